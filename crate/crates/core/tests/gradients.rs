//! Finite-difference property tests of every differentiable operation and
//! of the full training loss.

#[path = "common/grad_cases.rs"]
mod grad_cases;

use grad_cases::{full_pipeline, Case, COMPOSITE, OPS, TOL};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

/// A fixed seed keeps the drawn cases identical from run to run.
fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 128,
        rng_seed: RngSeed::Fixed(0x6772_6164),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn case(name: &str) -> Case {
    OPS.iter()
        .chain([&COMPOSITE])
        .find(|(n, _)| *n == name)
        .map(|(_, f)| *f)
        .unwrap()
}

macro_rules! op_properties {
    ($($name:ident),* $(,)?) => {
        proptest! {
            #![proptest_config(config())]
            $(
                #[test]
                fn $name(seed in any::<u64>()) {
                    let err = case(stringify!($name))(seed).unwrap();
                    prop_assert!(err < TOL, "relative error {err}");
                }
            )*
        }
    };
}

op_properties!(
    conv2d,
    linear,
    relu,
    sigmoid,
    tanh,
    bilinear_resize,
    add_sub_mul,
    scale_offset,
    abs,
    sum_reshape_concat_slice,
    row_pick,
    max,
    focal_loss,
    correlation,
    fusion,
    composite,
);

#[test]
fn full_pipeline_loss() {
    let r = full_pipeline(2024).unwrap();
    assert!(r.failures.is_empty(), "{:#?}", r.failures);
    assert!(r.unchecked.is_empty(), "no smooth coordinate: {:#?}", r.unchecked);
    assert!(r.max_error < TOL);
}
