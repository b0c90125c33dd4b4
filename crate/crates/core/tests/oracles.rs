mod common;

use common::oracles::{self, generations};

macro_rules! oracle_tests {
    ($($name:ident),* $(,)?) => {$(
        #[test]
        fn $name() {
            match oracles::$name() {
                Ok(detail) => eprintln!("{}: {detail}", stringify!($name)),
                Err(detail) => panic!("{}: {detail}", stringify!($name)),
            }
        }
    )*};
}

oracle_tests!(
    golden_recipe_digest,
    fs_twenty_readers,
    fs_lone_reader,
    fs_reader_death,
    model_load_gap,
    cold_install,
    full_invoke_a10,
    twenty_cold_installs,
    peer_wave_generations,
);

#[test]
fn generation_counts() {
    assert_eq!(generations(50, 4), vec![1, 5, 25, 51]);
    assert_eq!(generations(0, 4), vec![1]);
    assert_eq!(generations(3, 1), vec![1, 2, 4]);
}
