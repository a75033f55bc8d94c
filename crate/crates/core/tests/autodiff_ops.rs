mod support;

use ecgbench::tensor::gradient_check;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::opcases::{make_case, OP_NAMES};

#[test]
fn every_op_passes_a_few_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for name in OP_NAMES {
        for _ in 0..5 {
            let case = make_case(name, &mut rng);
            let err = gradient_check(&case.f, &case.inputs, case.h).unwrap();
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}
