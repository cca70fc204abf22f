//! Config-driven verification suites behind `lasp verify` and `lasp gradcheck`.
//!
//! Three suites, each reporting the worst observed error against a pinned
//! tolerance:
//!
//! - oracle equivalence: dense masked left-product vs. step recurrence;
//! - chunk invariance: the chunked serial drivers against the serial oracles,
//!   quantified over every chunk size dividing `N`;
//! - parallel equivalence: the simulated world (both scheduling modes)
//!   against the serial oracles, bit-exactness of lockstep against the
//!   chunked drivers, and the protocol shape of the trace.
//!
//! Setting `LASP_VERIFY_TAMPER=1` flips the sign of one chunked forward
//! output entry; a healthy harness must then report the chunk-invariance
//! property as failed. This exists so the suite can prove it detects damage.

use lasp_core::chunk::{chunked_backward_serial, chunked_forward_serial};
use lasp_core::comm::MessageTag;
use lasp_core::matrix::{self, Matrix};
use lasp_core::oracle::{
    dense_masked_forward, finite_difference_grads, serial_backward, serial_forward,
    upstream_weighted_loss, AttnProblem, Grads,
};
use lasp_core::rng::SplitMix64;

use crate::config::RunConfig;
use crate::runtime::{self, SchedulingMode, SimProblem, SpWorld};
use crate::topology::plan_distribution;
use crate::SimError;

/// One verified property: its worst observed error against the tolerance.
#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl PropertyResult {
    fn new(name: &str, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            max_error,
            tolerance,
            pass: max_error <= tolerance,
        }
    }
}

fn tamper_requested() -> bool {
    std::env::var("LASP_VERIFY_TAMPER").is_ok_and(|v| v == "1")
}

fn random_attn(seed: u64, n: usize, dh: usize, lambda: f64) -> Result<AttnProblem, SimError> {
    let mut rng = SplitMix64::new(seed);
    Ok(AttnProblem::new(
        rng.matrix(n, dh),
        rng.matrix(n, dh),
        rng.matrix(n, dh),
        lambda,
    )?)
}

/// Runs all three suites for one config.
pub fn verify_suite(cfg: &RunConfig) -> Result<Vec<PropertyResult>, SimError> {
    let mut results = Vec::new();
    let dh = cfg.head_dim();

    // Oracle equivalence over a few derived seeds.
    let mut err = 0.0f64;
    for i in 0..3u64 {
        let p = random_attn(cfg.seed.wrapping_add(i), cfg.n, dh, cfg.lambda)?;
        let dense = dense_masked_forward(&p)?;
        let serial = serial_forward(&p)?;
        err = err.max(matrix::relative_max_error(&dense, &serial)?);
    }
    results.push(PropertyResult::new("oracle/dense_vs_serial", err, 1e-12));

    // Chunk invariance: every divisor of N, forward and backward.
    let p = random_attn(cfg.seed ^ 0x5EED, cfg.n, dh, cfg.lambda)?;
    let dout = SplitMix64::new(cfg.seed ^ 0xD0_07).matrix(cfg.n, dh);
    let serial_o = serial_forward(&p)?;
    let serial_g = serial_backward(&p, &dout)?;
    let mut fwd_err = 0.0f64;
    let mut bwd_err = 0.0f64;
    let mut tampered = tamper_requested();
    for c in (1..=cfg.n).filter(|c| cfg.n.is_multiple_of(*c)) {
        let mut fwd = chunked_forward_serial(&p.q, &p.k, &p.v, p.lambda(), c)?;
        if tampered {
            // Test hook: damage one entry so the suite must go red.
            let flipped = -fwd.output[(0, 0)];
            fwd.output[(0, 0)] = flipped;
            tampered = false;
        }
        fwd_err = fwd_err.max(matrix::relative_max_error(&fwd.output, &serial_o)?);
        let bwd = chunked_backward_serial(&p.q, &p.k, &p.v, &dout, p.lambda(), c, &fwd.kv_cache)?;
        bwd_err = bwd_err.max(bwd.relative_max_error(&serial_g)?);
    }
    results.push(PropertyResult::new("chunk/forward_invariance", fwd_err, 1e-10));
    results.push(PropertyResult::new("chunk/backward_invariance", bwd_err, 1e-10));

    // Parallel equivalence in both scheduling modes.
    let plan = plan_distribution(cfg.n, cfg.world, cfg.sp_size, cfg.batch)?;
    let (problem, douts) =
        runtime::random_problem(plan, cfg.heads, cfg.lambda, cfg.layers, cfg.d, cfg.seed)?;

    let mut lockstep = SpWorld::new(problem.clone(), SchedulingMode::Lockstep)?;
    lockstep.run_forward()?;
    lockstep.run_backward(&douts)?;
    let mut concurrent = SpWorld::new(problem.clone(), SchedulingMode::Concurrent)?;
    concurrent.run_forward()?;
    concurrent.run_backward(&douts)?;

    let mut par_fwd = 0.0f64;
    let mut par_bwd = 0.0f64;
    let mut exact = 0.0f64;
    let mut modes = 0.0f64;
    for batch in 0..problem.batches.len() {
        for layer in 0..problem.layer_count() {
            let (o_ref, g_ref) = per_head_serial(&problem, &douts, batch, layer)?;
            let o = lockstep.output(batch, layer)?;
            par_fwd = par_fwd.max(matrix::relative_max_error(&o, &o_ref)?);
            let g = lockstep.gradients(batch, layer)?;
            par_bwd = par_bwd.max(g.relative_max_error(&g_ref)?);

            let (o_chunked, g_chunked) = per_head_chunked(&problem, &douts, batch, layer)?;
            exact = exact.max(matrix::max_abs_diff(&o, &o_chunked)?);
            exact = exact.max(matrix::max_abs_diff(&g.dq, &g_chunked.dq)?);
            exact = exact.max(matrix::max_abs_diff(&g.dk, &g_chunked.dk)?);
            exact = exact.max(matrix::max_abs_diff(&g.dv, &g_chunked.dv)?);

            modes = modes.max(matrix::relative_max_error(
                &o,
                &concurrent.output(batch, layer)?,
            )?);
            let gc = concurrent.gradients(batch, layer)?;
            modes = modes.max(g.relative_max_error(&gc)?);
        }
    }
    results.push(PropertyResult::new("parallel/forward_vs_serial", par_fwd, 1e-10));
    results.push(PropertyResult::new("parallel/backward_vs_serial", par_bwd, 1e-10));
    results.push(PropertyResult::new("parallel/lockstep_bit_exact", exact, 0.0));
    results.push(PropertyResult::new("parallel/mode_agreement", modes, 1e-12));

    // Protocol shape: T-1 hops per (group, layer, head, direction, round),
    // every payload d_h^2 elements.
    let t = cfg.sp_size;
    let mut count_dev = 0usize;
    for tag in [MessageTag::KvFwd, MessageTag::DkvBwd] {
        for group in 0..cfg.group_count() {
            for layer in 0..cfg.layers {
                for head in 0..cfg.heads {
                    let count = lockstep
                        .trace()
                        .iter()
                        .filter(|r| {
                            r.tag == tag && r.src / t == group && r.layer == layer && r.head == head
                        })
                        .count();
                    let want = (t - 1) * lockstep.plan().rounds_for_group(group);
                    count_dev = count_dev.max(count.abs_diff(want));
                }
            }
        }
    }
    let payload_dev = lockstep
        .trace()
        .iter()
        .map(|r| r.elements.abs_diff(dh * dh))
        .max()
        .unwrap_or(0);
    results.push(PropertyResult::new(
        "parallel/protocol_shape",
        (count_dev + payload_dev) as f64,
        0.0,
    ));

    Ok(results)
}

/// Per-head serial oracle for one (batch, layer) of a simulation problem.
pub fn per_head_serial(
    problem: &SimProblem,
    douts: &[Vec<Matrix>],
    batch: usize,
    layer: usize,
) -> Result<(Matrix, Grads), SimError> {
    let inputs = &problem.batches[batch].layers[layer];
    let q_heads = matrix::split_cols(&inputs.q, problem.heads)?;
    let k_heads = matrix::split_cols(&inputs.k, problem.heads)?;
    let v_heads = matrix::split_cols(&inputs.v, problem.heads)?;
    let d_heads = matrix::split_cols(&douts[batch][layer], problem.heads)?;
    let mut o = Vec::new();
    let mut dq = Vec::new();
    let mut dk = Vec::new();
    let mut dv = Vec::new();
    for h in 0..problem.heads {
        let p = AttnProblem::new(
            q_heads[h].clone(),
            k_heads[h].clone(),
            v_heads[h].clone(),
            problem.lambda,
        )?;
        o.push(serial_forward(&p)?);
        let g = serial_backward(&p, &d_heads[h])?;
        dq.push(g.dq);
        dk.push(g.dk);
        dv.push(g.dv);
    }
    Ok((
        matrix::concat_cols(&o)?,
        Grads {
            dq: matrix::concat_cols(&dq)?,
            dk: matrix::concat_cols(&dk)?,
            dv: matrix::concat_cols(&dv)?,
        },
    ))
}

/// Per-head chunked serial reference (the bit-exact comparand for lockstep).
pub fn per_head_chunked(
    problem: &SimProblem,
    douts: &[Vec<Matrix>],
    batch: usize,
    layer: usize,
) -> Result<(Matrix, Grads), SimError> {
    let c = problem.plan.chunk_size();
    let inputs = &problem.batches[batch].layers[layer];
    let q_heads = matrix::split_cols(&inputs.q, problem.heads)?;
    let k_heads = matrix::split_cols(&inputs.k, problem.heads)?;
    let v_heads = matrix::split_cols(&inputs.v, problem.heads)?;
    let d_heads = matrix::split_cols(&douts[batch][layer], problem.heads)?;
    let mut o = Vec::new();
    let mut dq = Vec::new();
    let mut dk = Vec::new();
    let mut dv = Vec::new();
    for h in 0..problem.heads {
        let fwd = chunked_forward_serial(&q_heads[h], &k_heads[h], &v_heads[h], problem.lambda, c)?;
        let bwd = chunked_backward_serial(
            &q_heads[h],
            &k_heads[h],
            &v_heads[h],
            &d_heads[h],
            problem.lambda,
            c,
            &fwd.kv_cache,
        )?;
        o.push(fwd.output);
        dq.push(bwd.dq);
        dk.push(bwd.dk);
        dv.push(bwd.dv);
    }
    Ok((
        matrix::concat_cols(&o)?,
        Grads {
            dq: matrix::concat_cols(&dq)?,
            dk: matrix::concat_cols(&dk)?,
            dv: matrix::concat_cols(&dv)?,
        },
    ))
}

/// One finite-difference comparison at a given step size.
#[derive(Debug, Clone)]
pub struct GradcheckCase {
    pub lambda: f64,
    pub eps: f64,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub cases: Vec<GradcheckCase>,
    pub pass: bool,
}

/// Checks the simulated ring backward against central finite differences of
/// the per-head dense forward, under the loss `L = sum O (*) dO`. Sweeps the
/// requested step sizes and always includes the no-decay edge `lambda = 1`.
pub fn gradcheck(cfg: &RunConfig, eps_list: &[f64]) -> Result<GradcheckReport, SimError> {
    const THRESHOLD: f64 = 1e-5;
    if cfg.n > 128 {
        return Err(SimError::Config {
            detail: format!(
                "gradcheck is limited to N <= 128 (finite differences are O(N*d) forward runs), got {}",
                cfg.n
            ),
        });
    }
    if eps_list.is_empty() {
        return Err(SimError::Config {
            detail: "at least one finite-difference step is required".into(),
        });
    }
    let mut lambdas = vec![cfg.lambda];
    if cfg.lambda != 1.0 {
        lambdas.push(1.0);
    }

    let mut cases = Vec::new();
    for &lambda in &lambdas {
        let plan = plan_distribution(cfg.n, cfg.world, cfg.sp_size, cfg.batch)?;
        let (problem, douts) =
            runtime::random_problem(plan, cfg.heads, lambda, cfg.layers, cfg.d, cfg.seed)?;
        let mut world = SpWorld::new(problem.clone(), cfg.mode)?;
        world.run_forward()?;
        world.run_backward(&douts)?;
        let got = world.gradients(0, 0)?;
        let got_heads = (
            matrix::split_cols(&got.dq, cfg.heads)?,
            matrix::split_cols(&got.dk, cfg.heads)?,
            matrix::split_cols(&got.dv, cfg.heads)?,
        );

        let inputs = &problem.batches[0].layers[0];
        let q_heads = matrix::split_cols(&inputs.q, cfg.heads)?;
        let k_heads = matrix::split_cols(&inputs.k, cfg.heads)?;
        let v_heads = matrix::split_cols(&inputs.v, cfg.heads)?;
        let d_heads = matrix::split_cols(&douts[0][0], cfg.heads)?;

        for &eps in eps_list {
            let mut err = 0.0f64;
            for h in 0..cfg.heads {
                let p = AttnProblem::new(
                    q_heads[h].clone(),
                    k_heads[h].clone(),
                    v_heads[h].clone(),
                    lambda,
                )?;
                let numeric = finite_difference_grads(
                    |w| upstream_weighted_loss(&dense_masked_forward(w)?, &d_heads[h]),
                    &p,
                    eps,
                )?;
                let head_grads = Grads {
                    dq: got_heads.0[h].clone(),
                    dk: got_heads.1[h].clone(),
                    dv: got_heads.2[h].clone(),
                };
                err = err.max(head_grads.relative_max_error(&numeric)?);
            }
            cases.push(GradcheckCase {
                lambda,
                eps,
                max_rel_error: err,
                pass: err <= THRESHOLD,
            });
        }
    }
    let pass = cases.iter().all(|c| c.pass);
    Ok(GradcheckReport {
        threshold: THRESHOLD,
        cases,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PartialConfig;

    fn small_cfg() -> RunConfig {
        RunConfig::resolve(PartialConfig {
            n: Some(32),
            d: Some(8),
            heads: Some(2),
            world: Some(4),
            sp_size: Some(4),
            lambda: Some(0.9),
            seed: Some(77),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn suite_passes_on_small_config() {
        let results = verify_suite(&small_cfg()).unwrap();
        assert!(results.len() >= 7);
        for r in &results {
            assert!(r.pass, "{} failed: {} > {}", r.name, r.max_error, r.tolerance);
        }
    }

    #[test]
    fn gradcheck_passes_and_enforces_size_cap() {
        let report = gradcheck(&small_cfg(), &[1e-5]).unwrap();
        assert!(report.pass);
        // lambda sweep includes the no-decay edge.
        assert!(report.cases.iter().any(|c| c.lambda == 1.0));

        let mut big = small_cfg();
        big.n = 256;
        assert!(matches!(
            gradcheck(&big, &[1e-5]),
            Err(SimError::Config { .. })
        ));
    }
}
