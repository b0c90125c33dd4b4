mod common;

use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};

use common::strategies::{any_message, check_chunking, check_round_trip, message_of};
use pcm_core::protocol::{decode, encode, FrameDecoder, ProtocolError, MAX_FRAME_BYTES, MESSAGE_TYPES};

#[test]
fn every_message_type_round_trips_1000_times() {
    for ty in MESSAGE_TYPES {
        let mut runner = TestRunner::new(RunnerConfig::with_cases(1000));
        runner
            .run(&message_of(ty), |m| check_round_trip(&m))
            .unwrap_or_else(|e| panic!("{ty}: {e}"));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn chunk_boundaries_do_not_matter(
        msgs in proptest::collection::vec(any_message(), 1..6),
        cuts in proptest::collection::vec(any::<usize>(), 0..40),
    ) {
        check_chunking(&msgs, &cuts)?;
    }

    #[test]
    fn byte_at_a_time_equals_whole(msg in any_message()) {
        let frame = encode(&msg).unwrap();
        let mut dec = FrameDecoder::new();
        let mut got = None;
        for b in &frame {
            prop_assert!(got.is_none());
            dec.push(std::slice::from_ref(b));
            got = dec.next_message().unwrap();
        }
        prop_assert_eq!(got, Some(msg));
    }

    #[test]
    fn truncated_frames_are_rejected(msg in any_message(), cut in any::<prop::sample::Index>()) {
        let frame = encode(&msg).unwrap();
        let at = cut.index(frame.len());
        let is_truncated = matches!(decode(&frame[..at]), Err(ProtocolError::Truncated { .. }));
        prop_assert!(is_truncated);
    }

    #[test]
    fn garbage_bodies_never_panic(body in proptest::collection::vec(any::<u8>(), 0..200)) {
        let mut frame = (body.len() as u32).to_be_bytes().to_vec();
        frame.extend_from_slice(&body);
        let _ = decode(&frame);
        // a bad body is skipped and the next frame still decodes
        let mut dec = FrameDecoder::new();
        dec.push(&frame);
        dec.push(&encode(&pcm_core::protocol::Message::Shutdown {}).unwrap());
        let first = dec.next_message();
        if first.is_err() {
            prop_assert_eq!(dec.next_message().unwrap(), Some(pcm_core::protocol::Message::Shutdown {}));
        }
    }

    #[test]
    fn oversize_headers_are_fatal(extra in 1u32..1000) {
        let len = MAX_FRAME_BYTES as u32 + extra;
        let mut dec = FrameDecoder::new();
        dec.push(&len.to_be_bytes());
        prop_assert_eq!(dec.next_message(), Err(ProtocolError::Oversize(len as usize)));
    }
}

#[test]
fn item_order_survives_a_100_item_invoke() {
    use pcm_core::model::{Awareness, InferenceItem, TaskId};
    use pcm_core::protocol::Message;
    let mut runner = TestRunner::default();
    let ids = proptest::collection::vec(any::<u64>(), 100);
    runner
        .run(&ids, |ids| {
            let msg = Message::Invoke {
                task_id: TaskId(1),
                attempt: 0,
                context_id: None,
                awareness: Awareness::Full,
                items: ids.iter().map(|&i| InferenceItem::new(i)).collect(),
                inputs: vec![],
            };
            let Message::Invoke { items, .. } = decode(&encode(&msg).unwrap()).unwrap() else {
                unreachable!()
            };
            prop_assert_eq!(items.iter().map(|i| i.item_id.0).collect::<Vec<_>>(), ids);
            Ok(())
        })
        .unwrap();
}
