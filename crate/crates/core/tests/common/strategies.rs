use proptest::collection::{btree_map, vec};
use proptest::prelude::*;

use pcm_core::model::{
    Awareness, BlobKey, BlobKind, BlobRef, BuildCostDescriptor, ContextId, ContextRecipe, GpuModel, InferenceItem,
    ItemId, ResourceRequest, TaskId, WorkerId,
};
use pcm_core::protocol::{
    decode, encode, FrameDecoder, InstallFailure, InstallSource, InvokeFailure, ItemResult, Message, TransferFailure,
    Verdict, HEADER_BYTES, MESSAGE_TYPES,
};

/// Any unicode, including quotes, escapes and astral-plane characters.
fn text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z0-9:/._-]{0,24}",
        any::<String>().prop_map(|s| s.chars().take(32).collect()),
    ]
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e12..1e12f64,
        Just(0.0),
        Just(f64::MIN_POSITIVE),
        Just(f64::MAX),
        any::<f64>().prop_filter("finite", |f| f.is_finite()),
    ]
}

fn hex64() -> impl Strategy<Value = String> {
    "[0-9a-f]{64}"
}

fn context_id() -> impl Strategy<Value = ContextId> {
    prop_oneof![hex64(), text()].prop_map(ContextId)
}

fn awareness() -> impl Strategy<Value = Awareness> {
    prop_oneof![
        Just(Awareness::Agnostic),
        Just(Awareness::Partial),
        Just(Awareness::Full)
    ]
}

fn source() -> impl Strategy<Value = InstallSource> {
    prop_oneof![Just(InstallSource::Fs), text().prop_map(InstallSource::Peer)]
}

fn timings() -> impl Strategy<Value = pcm_core::protocol::Timings> {
    btree_map(text(), finite(), 0..6)
}

fn resources() -> impl Strategy<Value = ResourceRequest> {
    (any::<u32>(), any::<u64>(), any::<u64>(), any::<u32>()).prop_map(|(cores, memory_bytes, disk_bytes, gpus)| {
        ResourceRequest {
            cores,
            memory_bytes,
            disk_bytes,
            gpus,
        }
    })
}

fn gpu() -> impl Strategy<Value = GpuModel> {
    (text(), any::<i32>(), finite(), finite()).prop_map(|(name, release_year, speed_factor, gpu_load_bandwidth)| {
        GpuModel {
            name,
            release_year,
            speed_factor,
            gpu_load_bandwidth,
        }
    })
}

fn recipe() -> impl Strategy<Value = ContextRecipe> {
    (
        context_id(),
        text(),
        any::<u64>(),
        any::<u64>(),
        any::<u64>(),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(
            |(context_id, code_ref, dependency_bytes, model_bytes, host_memory_bytes, disk_load, gpu_load)| {
                ContextRecipe {
                    context_id,
                    code_ref,
                    dependency_bytes,
                    model_bytes,
                    host_memory_bytes,
                    builder: BuildCostDescriptor { disk_load, gpu_load },
                }
            },
        )
}

fn item() -> impl Strategy<Value = InferenceItem> {
    (any::<u64>(), any::<u64>(), finite()).prop_map(|(id, payload_bytes, cost_units)| InferenceItem {
        item_id: ItemId(id),
        payload_bytes,
        cost_units,
    })
}

fn blob() -> impl Strategy<Value = BlobRef> {
    let kind = prop_oneof![
        Just(BlobKind::Dependencies),
        Just(BlobKind::ModelBlob),
        Just(BlobKind::Code),
        Just(BlobKind::InvocationInput)
    ];
    (hex64(), any::<u64>(), kind).prop_map(|(k, bytes, kind)| BlobRef {
        key: BlobKey(k),
        bytes,
        kind,
    })
}

fn verdict() -> impl Strategy<Value = Verdict> {
    prop_oneof![
        Just(Verdict::Supported),
        Just(Verdict::Refuted),
        Just(Verdict::NotEnoughInfo)
    ]
}

/// Messages whose `"type"` is `ty`.
pub fn message_of(ty: &str) -> BoxedStrategy<Message> {
    match ty {
        "REGISTER" => (
            text(),
            gpu(),
            resources(),
            vec(hex64().prop_map(BlobKey), 0..5),
            proptest::option::of(text()),
        )
            .prop_map(|(id, gpu_model, resources, inv, peer_address)| Message::Register {
                worker_id: WorkerId(id),
                gpu_model,
                resources,
                cache_inventory: inv,
                peer_address,
            })
            .boxed(),
        "INSTALL_CONTEXT" => (recipe(), source())
            .prop_map(|(recipe, source)| Message::InstallContext { recipe, source })
            .boxed(),
        "CONTEXT_READY" => (context_id(), finite(), source(), timings())
            .prop_map(
                |(context_id, build_seconds, fetched_from, timings)| Message::ContextReady {
                    context_id,
                    build_seconds,
                    fetched_from,
                    timings,
                },
            )
            .boxed(),
        "INSTALL_FAILED" => (
            context_id(),
            prop_oneof![
                Just(InstallFailure::InsufficientDisk),
                Just(InstallFailure::BadRecipe),
                Just(InstallFailure::Busy)
            ],
        )
            .prop_map(|(context_id, reason)| Message::InstallFailed { context_id, reason })
            .boxed(),
        "INVOKE" => (
            any::<u64>(),
            any::<u32>(),
            proptest::option::of(context_id()),
            awareness(),
            vec(item(), 0..120),
            vec(blob(), 0..3),
        )
            .prop_map(|(t, attempt, context_id, awareness, items, inputs)| Message::Invoke {
                task_id: TaskId(t),
                attempt,
                context_id,
                awareness,
                items,
                inputs,
            })
            .boxed(),
        "INVOKE_FAILED" => (
            any::<u64>(),
            any::<u32>(),
            prop_oneof![Just(InvokeFailure::ContextMissing), Just(InvokeFailure::Busy)],
        )
            .prop_map(|(t, attempt, reason)| Message::InvokeFailed {
                task_id: TaskId(t),
                attempt,
                reason,
            })
            .boxed(),
        "RESULT" => (
            any::<u64>(),
            any::<u32>(),
            vec(
                (any::<u64>(), verdict()).prop_map(|(i, v)| ItemResult {
                    item_id: ItemId(i),
                    verdict_token: v,
                }),
                0..120,
            ),
            timings(),
        )
            .prop_map(|(t, attempt, item_results, timings)| Message::Result {
                task_id: TaskId(t),
                attempt,
                item_results,
                timings,
            })
            .boxed(),
        "TRANSFER_GET" => context_id()
            .prop_map(|context_id| Message::TransferGet { context_id })
            .boxed(),
        "TRANSFER_DATA" => (context_id(), any::<u64>())
            .prop_map(|(context_id, declared_bytes)| Message::TransferData {
                context_id,
                declared_bytes,
            })
            .boxed(),
        "TRANSFER_ERROR" => (
            context_id(),
            prop_oneof![Just(TransferFailure::NotFound), Just(TransferFailure::Busy)],
        )
            .prop_map(|(context_id, reason)| Message::TransferError { context_id, reason })
            .boxed(),
        "HEARTBEAT" => (text(), finite())
            .prop_map(|(id, emulated_clock)| Message::Heartbeat {
                worker_id: WorkerId(id),
                emulated_clock,
            })
            .boxed(),
        "SHUTDOWN" => Just(Message::Shutdown {}).boxed(),
        other => panic!("no strategy for message type {other}"),
    }
}

pub fn any_message() -> BoxedStrategy<Message> {
    proptest::strategy::Union::new(MESSAGE_TYPES.iter().map(|t| message_of(t))).boxed()
}

/// Frame, parse back and compare; also checks the header and type tag.
pub fn check_round_trip(msg: &Message) -> Result<(), TestCaseError> {
    let frame = encode(msg).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let len = u32::from_be_bytes(frame[..HEADER_BYTES].try_into().unwrap()) as usize;
    prop_assert_eq!(len, frame.len() - HEADER_BYTES);
    let body: serde_json::Value = serde_json::from_slice(&frame[HEADER_BYTES..]).unwrap();
    prop_assert_eq!(body["type"].as_str(), Some(msg.type_name()));
    let back = decode(&frame).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(&back, msg);
    Ok(())
}

/// Feeds the concatenated frames to a decoder in pieces cut at `cuts`
/// and expects the same messages whatever the cut points.
pub fn check_chunking(msgs: &[Message], cuts: &[usize]) -> Result<(), TestCaseError> {
    let stream: Vec<u8> = msgs.iter().flat_map(|m| encode(m).unwrap()).collect();
    let mut points: Vec<usize> = cuts.iter().map(|c| c % (stream.len() + 1)).collect();
    points.push(0);
    points.push(stream.len());
    points.sort_unstable();
    let mut dec = FrameDecoder::new();
    let mut got = Vec::new();
    for w in points.windows(2) {
        dec.push(&stream[w[0]..w[1]]);
        while let Some(m) = dec.next_message().map_err(|e| TestCaseError::fail(e.to_string()))? {
            got.push(m);
        }
    }
    prop_assert_eq!(dec.buffered(), 0);
    prop_assert_eq!(got.as_slice(), msgs);
    Ok(())
}
