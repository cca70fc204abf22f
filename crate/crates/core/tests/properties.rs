//! Cross-module properties: the same map computed through independent routes
//! must agree, and the carried state never grows with the sequence.

use lasp_core::chunk::{chunked_backward_serial, chunked_forward_serial};
use lasp_core::matrix::relative_max_error;
use lasp_core::oracle::{
    finite_difference_grads, serial_backward, serial_forward, upstream_weighted_loss, AttnProblem,
};
use lasp_core::recurrence::{run_model, ModelInstance};
use lasp_core::rng::SplitMix64;
use proptest::prelude::*;

fn problem(seed: u64, n: usize, dh: usize, lambda: f64) -> AttnProblem {
    let mut rng = SplitMix64::new(seed);
    AttnProblem::new(
        rng.matrix(n, dh),
        rng.matrix(n, dh),
        rng.matrix(n, dh),
        lambda,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    // Stepwise recurrence, chunked drivers and the serial oracle are three
    // routes to one function.
    #[test]
    fn three_way_forward_equivalence(
        seed in any::<u64>(),
        n in prop::sample::select(vec![8usize, 24, 48]),
        dh in 1usize..6,
        lambda in prop::sample::select(vec![1.0f64, 0.97, 0.9]),
    ) {
        let p = problem(seed, n, dh, lambda);
        let serial = serial_forward(&p).unwrap();

        let inst = ModelInstance::tnl_retnet(&p.q, &p.k, &p.v, lambda).unwrap();
        let stepwise = run_model(&inst).unwrap();
        prop_assert!(relative_max_error(&stepwise, &serial).unwrap() <= 1e-12);

        for c in (1..=n).filter(|c| n % c == 0) {
            let chunked = chunked_forward_serial(&p.q, &p.k, &p.v, lambda, c).unwrap();
            prop_assert!(relative_max_error(&chunked.output, &serial).unwrap() <= 1e-10);
        }
    }

    // The dual gradient route: analytic chunked backward against central
    // finite differences of the serial forward.
    #[test]
    fn chunked_gradients_match_finite_differences(
        seed in any::<u64>(),
        dh in 2usize..5,
        c in prop::sample::select(vec![1usize, 2, 4, 8, 16]),
        lambda in prop::sample::select(vec![1.0f64, 0.9]),
    ) {
        let n = 16;
        let p = problem(seed, n, dh, lambda);
        let dout = SplitMix64::new(seed ^ 0xFEED).matrix(n, dh);

        let fwd = chunked_forward_serial(&p.q, &p.k, &p.v, lambda, c).unwrap();
        let analytic =
            chunked_backward_serial(&p.q, &p.k, &p.v, &dout, lambda, c, &fwd.kv_cache).unwrap();
        prop_assert!(
            analytic
                .relative_max_error(&serial_backward(&p, &dout).unwrap())
                .unwrap()
                <= 1e-10
        );

        let numeric = finite_difference_grads(
            |w| upstream_weighted_loss(&serial_forward(w)?, &dout),
            &p,
            1e-5,
        )
        .unwrap();
        prop_assert!(analytic.relative_max_error(&numeric).unwrap() <= 1e-5);
    }

    // The carried state is d_h x d_h for every sequence length and partition.
    #[test]
    fn state_size_is_independent_of_sequence_and_chunk(
        seed in any::<u64>(),
        n in prop::sample::select(vec![8usize, 32, 128]),
        dh in 1usize..5,
    ) {
        let p = problem(seed, n, dh, 0.95);
        for c in (1..=n).filter(|c| n % c == 0) {
            let fwd = chunked_forward_serial(&p.q, &p.k, &p.v, 0.95, c).unwrap();
            prop_assert_eq!(fwd.kv_cache.len(), n / c);
            for kv in &fwd.kv_cache {
                prop_assert_eq!(kv.shape(), (dh, dh));
            }
        }
    }
}
