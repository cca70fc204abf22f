//! Generalized recurrent memory: `m_t = o_t (*) m_{t-1} + e_t i_t^T`.
//!
//! Most linear-complexity sequence models fit one scheme: a `k x d` memory
//! state decayed by an oscillation term `o_t`, refreshed by the outer product
//! of an expand vector `e_t` with an input vector `i_t`, and read out against
//! a shrink vector as `y_t = m_t^T s_t`. The [`REGISTRY`] lists how the usual
//! suspects map onto the five roles; three of them are executable here:
//!
//! - `linear_attention`: oscillation is all-ones (`o = 1`),
//! - `tnl_retnet`: constant scalar decay `o = lambda`,
//! - `hgrn_lrn`: 1-D gated recurrence `h_t = f_t h_{t-1} + (1 - f_t) x_t`.
//!
//! [`chunked_scalar_equivalence`] bridges to the chunk kernels: any instance
//! whose oscillation is one constant scalar can be evaluated by
//! `chunked_forward_serial` and must agree with the stepwise path. Instances
//! with data-dependent decay are refused rather than approximated, since the
//! chunk-level state update assumes a constant rate.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::chunk::chunked_forward_serial;
use crate::matrix::{self, Matrix};
use crate::{check_lambda, Error, Result};

/// How the oscillation term is applied to the memory state.
#[derive(Debug, Clone, PartialEq)]
pub enum Oscillation {
    /// `m <- o * m` for one scalar.
    Scalar(f64),
    /// Row `i` of the memory scaled by `o[i]` (vector over the expand dim).
    RowWise(Vec<f64>),
    /// Full elementwise `o (*) m`, `o` of shape `k x d`.
    Elementwise(Matrix),
}

/// One step of providers: everything needed to advance and read the memory.
#[derive(Debug, Clone)]
pub struct GeneralStep {
    pub oscillation: Oscillation,
    pub expand: Vec<f64>,
    pub input: Vec<f64>,
    pub shrink: Vec<f64>,
}

/// Advances the memory one step: `m = o (*) m_prev + e i^T`.
pub fn general_step(
    m_prev: &Matrix,
    oscillation: &Oscillation,
    expand: &[f64],
    input: &[f64],
) -> Result<Matrix> {
    let (k, d) = m_prev.shape();
    if expand.len() != k {
        return Err(Error::Length {
            op: "general_step expand",
            expected: k,
            found: expand.len(),
        });
    }
    if input.len() != d {
        return Err(Error::Length {
            op: "general_step input",
            expected: d,
            found: input.len(),
        });
    }
    let mut m = match oscillation {
        Oscillation::Scalar(s) => matrix::scale(m_prev, *s),
        Oscillation::RowWise(w) => matrix::row_scale(m_prev, w)?,
        Oscillation::Elementwise(o) => matrix::hadamard(m_prev, o)?,
    };
    for (i, &e) in expand.iter().enumerate() {
        for (j, &x) in input.iter().enumerate() {
            m[(i, j)] += e * x;
        }
    }
    Ok(m)
}

/// Readout `y = m^T s`.
pub fn readout(m: &Matrix, shrink: &[f64]) -> Result<Vec<f64>> {
    let (k, d) = m.shape();
    if shrink.len() != k {
        return Err(Error::Length {
            op: "readout shrink",
            expected: k,
            found: shrink.len(),
        });
    }
    let mut y = alloc::vec![0.0; d];
    for (i, &s) in shrink.iter().enumerate() {
        for (j, yj) in y.iter_mut().enumerate() {
            *yj += m[(i, j)] * s;
        }
    }
    Ok(y)
}

/// A named model bound to a concrete input sequence: the per-step providers
/// are materialized at construction.
#[derive(Debug, Clone)]
pub struct ModelInstance {
    name: String,
    expand_dim: usize,
    input_dim: usize,
    steps: Vec<GeneralStep>,
}

impl ModelInstance {
    /// Plain linear attention: no decay, `kv_t = kv_{t-1} + k_t v_t^T`,
    /// `y_t = kv_t^T q_t`.
    pub fn linear_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Self> {
        Self::attention_like("linear_attention", q, k, v, 1.0)
    }

    /// Linear attention with constant exponential decay.
    pub fn tnl_retnet(q: &Matrix, k: &Matrix, v: &Matrix, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Self::attention_like("tnl_retnet", q, k, v, lambda)
    }

    fn attention_like(
        name: &str,
        q: &Matrix,
        k: &Matrix,
        v: &Matrix,
        lambda: f64,
    ) -> Result<Self> {
        if q.shape() != k.shape() || q.rows() != v.rows() {
            return Err(Error::Shape {
                op: "attention instance",
                left: q.shape(),
                right: if q.shape() != k.shape() {
                    k.shape()
                } else {
                    v.shape()
                },
            });
        }
        let steps = (0..q.rows())
            .map(|s| GeneralStep {
                oscillation: Oscillation::Scalar(lambda),
                expand: k.row(s).to_vec(),
                input: v.row(s).to_vec(),
                shrink: q.row(s).to_vec(),
            })
            .collect();
        Ok(Self {
            name: name.to_string(),
            expand_dim: q.cols(),
            input_dim: v.cols(),
            steps,
        })
    }

    /// 1-D gated recurrence `h_t = f_t h_{t-1} + (1 - f_t) x_t`, read out
    /// against `c_t`. The forget gate is the oscillation, `1 - f_t` the expand.
    pub fn hgrn(forget: &[f64], input: &[f64], shrink: &[f64]) -> Result<Self> {
        if forget.len() != input.len() || forget.len() != shrink.len() {
            return Err(Error::Length {
                op: "hgrn instance",
                expected: forget.len(),
                found: input.len().min(shrink.len()),
            });
        }
        if !forget.iter().chain(input).chain(shrink).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("hgrn instance"));
        }
        let steps = forget
            .iter()
            .zip(input)
            .zip(shrink)
            .map(|((&f, &x), &c)| GeneralStep {
                oscillation: Oscillation::Scalar(f),
                expand: alloc::vec![1.0 - f],
                input: alloc::vec![x],
                shrink: alloc::vec![c],
            })
            .collect();
        Ok(Self {
            name: "hgrn_lrn".to_string(),
            expand_dim: 1,
            input_dim: 1,
            steps,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn expand_dim(&self) -> usize {
        self.expand_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn steps(&self) -> &[GeneralStep] {
        &self.steps
    }

    /// The decay rate, if the oscillation is the same scalar at every step.
    pub fn constant_scalar_oscillation(&self) -> Option<f64> {
        let mut value = None;
        for step in &self.steps {
            match step.oscillation {
                Oscillation::Scalar(s) => match value {
                    None => value = Some(s),
                    Some(prev) if prev == s => {}
                    Some(_) => return None,
                },
                _ => return None,
            }
        }
        value
    }
}

/// Runs the recurrence over all steps; row `t` of the result is `y_t`.
pub fn run_model(inst: &ModelInstance) -> Result<Matrix> {
    let mut m = Matrix::zeros(inst.expand_dim, inst.input_dim);
    let mut out = Matrix::zeros(inst.steps.len(), inst.input_dim);
    for (t, step) in inst.steps.iter().enumerate() {
        m = general_step(&m, &step.oscillation, &step.expand, &step.input)?;
        let y = readout(&m, &step.shrink)?;
        for (j, yj) in y.iter().enumerate() {
            out[(t, j)] = *yj;
        }
    }
    Ok(out)
}

/// Result of trying to evaluate an instance through the chunk kernels.
#[derive(Debug, Clone, PartialEq)]
pub enum ChunkEquivalence {
    /// The instance's dynamics fall outside what the chunk kernels cover.
    NotChunkable { reason: String },
    /// Both paths ran; the largest relative max-norm deviation is reported.
    Checked { max_rel_err: f64 },
}

/// Evaluates a scalar-decay instance with `chunked_forward_serial` and
/// compares against the stepwise path. Data-dependent oscillation is refused:
/// the chunk-level update assumes one constant rate.
pub fn chunked_scalar_equivalence(inst: &ModelInstance, c: usize) -> Result<ChunkEquivalence> {
    let Some(lambda) = inst.constant_scalar_oscillation() else {
        return Ok(ChunkEquivalence::NotChunkable {
            reason: format!(
                "{}: oscillation is not a single constant scalar",
                inst.name
            ),
        });
    };
    if check_lambda(lambda).is_err() {
        return Ok(ChunkEquivalence::NotChunkable {
            reason: format!("{}: decay rate {lambda} outside (0, 1]", inst.name),
        });
    }
    let n = inst.steps.len();
    let k_dim = inst.expand_dim;
    let d_dim = inst.input_dim;
    if k_dim != d_dim {
        return Ok(ChunkEquivalence::NotChunkable {
            reason: format!("{}: memory state {k_dim}x{d_dim} is not square", inst.name),
        });
    }
    let q = Matrix::from_fn(n, k_dim, |t, j| inst.steps[t].shrink[j]);
    let k = Matrix::from_fn(n, k_dim, |t, j| inst.steps[t].expand[j]);
    let v = Matrix::from_fn(n, d_dim, |t, j| inst.steps[t].input[j]);
    let chunked = chunked_forward_serial(&q, &k, &v, lambda, c)?;
    let stepwise = run_model(inst)?;
    let max_rel_err = matrix::relative_max_error(&chunked.output, &stepwise)?;
    Ok(ChunkEquivalence::Checked { max_rel_err })
}

/// How one published model maps onto the five roles of the general form.
/// Entries whose dynamics are published only by reference (or that need
/// complex-valued oscillation) are metadata-only: `executable` is false.
#[derive(Debug, Clone, Copy)]
pub struct RegistryEntry {
    pub name: &'static str,
    pub input: &'static str,
    pub expand: &'static str,
    pub oscillation: &'static str,
    pub shrink: &'static str,
    /// Memory shape as `k x d` symbols.
    pub memory_k: &'static str,
    pub memory_d: &'static str,
    /// One of: scalar, vector, elementwise, matrix, complex.
    pub oscillation_kind: &'static str,
    pub executable: bool,
    pub note: &'static str,
}

pub const REGISTRY: &[RegistryEntry] = &[
    RegistryEntry {
        name: "s4",
        input: "x_t",
        expand: "B",
        oscillation: "A",
        shrink: "C",
        memory_k: "k",
        memory_d: "1",
        oscillation_kind: "matrix",
        executable: false,
        note: "SSM parameterization given by reference only",
    },
    RegistryEntry {
        name: "s5",
        input: "x_t",
        expand: "B",
        oscillation: "A",
        shrink: "C",
        memory_k: "k",
        memory_d: "d",
        oscillation_kind: "matrix",
        executable: false,
        note: "SSM parameterization given by reference only",
    },
    RegistryEntry {
        name: "dss",
        input: "x_t",
        expand: "B",
        oscillation: "a 1_k^T",
        shrink: "C",
        memory_k: "k",
        memory_d: "d",
        oscillation_kind: "vector",
        executable: false,
        note: "diagonal SSM; parameterization by reference",
    },
    RegistryEntry {
        name: "tnn",
        input: "x_t",
        expand: "B",
        oscillation: "A",
        shrink: "C",
        memory_k: "k",
        memory_d: "d",
        oscillation_kind: "matrix",
        executable: false,
        note: "Toeplitz form converted to SSM by reference",
    },
    RegistryEntry {
        name: "linear_attention",
        input: "x_t",
        expand: "B_t",
        oscillation: "J^(kd)",
        shrink: "C_t",
        memory_k: "k",
        memory_d: "d",
        oscillation_kind: "scalar",
        executable: true,
        note: "all-ones oscillation; executed as the scalar 1",
    },
    RegistryEntry {
        name: "tnl_retnet",
        input: "x_t",
        expand: "B_t",
        oscillation: "lambda J^(k)",
        shrink: "C_t",
        memory_k: "k",
        memory_d: "d",
        oscillation_kind: "scalar",
        executable: true,
        note: "constant exponential decay",
    },
    RegistryEntry {
        name: "mamba",
        input: "x_t",
        expand: "B_t",
        oscillation: "A_t",
        shrink: "C_t",
        memory_k: "k",
        memory_d: "d",
        oscillation_kind: "elementwise",
        executable: false,
        note: "data-dependent elementwise decay",
    },
    RegistryEntry {
        name: "rwkv4",
        input: "x_t",
        expand: "exp(k_t)",
        oscillation: "exp(-w)",
        shrink: "C_t",
        memory_k: "1",
        memory_d: "1",
        oscillation_kind: "scalar",
        executable: false,
        note: "per-channel scalar recurrence; parameterization by reference",
    },
    RegistryEntry {
        name: "cosformer",
        input: "x_t",
        expand: "B_t",
        oscillation: "exp(i theta) J^(kd)",
        shrink: "C_t",
        memory_k: "k",
        memory_d: "d",
        oscillation_kind: "complex",
        executable: false,
        note: "complex-valued oscillation; excluded from execution",
    },
    RegistryEntry {
        name: "lrpe",
        input: "x_t",
        expand: "B_t",
        oscillation: "exp(i Theta) 1^(d)T",
        shrink: "C_t",
        memory_k: "k",
        memory_d: "d",
        oscillation_kind: "complex",
        executable: false,
        note: "complex-valued oscillation; excluded from execution",
    },
    RegistryEntry {
        name: "gla_gateloop",
        input: "x_t",
        expand: "B_t",
        oscillation: "g_t 1_d^T",
        shrink: "C_t",
        memory_k: "k",
        memory_d: "d",
        oscillation_kind: "vector",
        executable: false,
        note: "data-dependent gate; chunked evaluation refused",
    },
    RegistryEntry {
        name: "dur_gfw",
        input: "x_t",
        expand: "B_t",
        oscillation: "g_t gbar_t^T",
        shrink: "C_t",
        memory_k: "k",
        memory_d: "d",
        oscillation_kind: "elementwise",
        executable: false,
        note: "rank-one data-dependent decay",
    },
    RegistryEntry {
        name: "hgrn_lrn",
        input: "x_t",
        expand: "1 - A_t",
        oscillation: "A_t",
        shrink: "C_t",
        memory_k: "1",
        memory_d: "1",
        oscillation_kind: "scalar",
        executable: true,
        note: "data-dependent forget gate; stepwise only",
    },
];

/// Looks up a registry row by name.
pub fn registry_entry(name: &str) -> Result<&'static RegistryEntry> {
    REGISTRY
        .iter()
        .find(|e| e.name == name)
        .ok_or(Error::Unknown {
            kind: "model",
            name: name.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::relative_max_error;
    use crate::oracle::{serial_forward, AttnProblem};
    use crate::rng::SplitMix64;

    #[test]
    fn general_step_outer_product_only() {
        let m0 = Matrix::zeros(2, 3);
        let ones = Oscillation::Scalar(1.0);
        let m = general_step(&m0, &ones, &[2.0, -1.0], &[1.0, 0.5, 0.0]).unwrap();
        let want =
            Matrix::from_rows(&[&[2.0, 1.0, 0.0], &[-1.0, -0.5, 0.0]]).unwrap();
        assert_eq!(m, want);
    }

    #[test]
    fn general_step_specializes_to_kv_recurrence() {
        let dh = 3;
        let mut rng = SplitMix64::new(1);
        let m_prev = rng.matrix(dh, dh);
        let k = rng.matrix(1, dh);
        let v = rng.matrix(1, dh);
        let lambda = 0.9;
        let m = general_step(
            &m_prev,
            &Oscillation::Scalar(lambda),
            k.row(0),
            v.row(0),
        )
        .unwrap();
        for i in 0..dh {
            for j in 0..dh {
                let want = lambda * m_prev[(i, j)] + k[(0, i)] * v[(0, j)];
                assert_eq!(m[(i, j)], want);
            }
        }
    }

    #[test]
    fn general_step_shape_discipline_rectangular() {
        let m0 = Matrix::zeros(3, 5);
        let osc = Oscillation::RowWise(alloc::vec![0.5, 1.0, 0.25]);
        let m = general_step(&m0, &osc, &[1.0, 2.0, 3.0], &[1.0; 5]).unwrap();
        assert_eq!(m.shape(), (3, 5));
        assert!(general_step(&m0, &osc, &[1.0, 2.0], &[1.0; 5]).is_err());
        assert!(general_step(&m0, &osc, &[1.0, 2.0, 3.0], &[1.0; 4]).is_err());
    }

    #[test]
    fn hgrn_hand_recurrence() {
        let forget = [0.5, 0.25];
        let input = [2.0, 4.0];
        let shrink = [1.0, 1.0];
        let inst = ModelInstance::hgrn(&forget, &input, &shrink).unwrap();
        let out = run_model(&inst).unwrap();
        // h1 = 0.5*0 + 0.5*2 = 1; h2 = 0.25*1 + 0.75*4 = 3.25
        assert_eq!(out[(0, 0)], 1.0);
        assert_eq!(out[(1, 0)], 3.25);
    }

    #[test]
    fn one_step_readout_is_scaled_input() {
        // y_1 = (e_1 . s_1) i_1 for a fresh memory.
        let inst = ModelInstance::hgrn(&[0.3], &[5.0], &[2.0]).unwrap();
        let out = run_model(&inst).unwrap();
        assert!((out[(0, 0)] - (1.0 - 0.3) * 5.0 * 2.0).abs() <= 1e-15);
    }

    #[test]
    fn linear_attention_matches_serial_oracle() {
        let mut rng = SplitMix64::new(2);
        let (q, k, v) = (rng.matrix(24, 4), rng.matrix(24, 4), rng.matrix(24, 4));
        let inst = ModelInstance::linear_attention(&q, &k, &v).unwrap();
        let out = run_model(&inst).unwrap();
        let p = AttnProblem::new(q, k, v, 1.0).unwrap();
        let oracle = serial_forward(&p).unwrap();
        assert!(relative_max_error(&out, &oracle).unwrap() <= 1e-12);
    }

    #[test]
    fn retnet_matches_serial_oracle_with_decay() {
        let mut rng = SplitMix64::new(3);
        let (q, k, v) = (rng.matrix(32, 5), rng.matrix(32, 5), rng.matrix(32, 5));
        let lambda = 0.93;
        let inst = ModelInstance::tnl_retnet(&q, &k, &v, lambda).unwrap();
        let out = run_model(&inst).unwrap();
        let p = AttnProblem::new(q, k, v, lambda).unwrap();
        let oracle = serial_forward(&p).unwrap();
        assert!(relative_max_error(&out, &oracle).unwrap() <= 1e-12);
    }

    #[test]
    fn chunked_equivalence_for_scalar_instances() {
        let mut rng = SplitMix64::new(4);
        let n = 64;
        let (q, k, v) = (rng.matrix(n, 4), rng.matrix(n, 4), rng.matrix(n, 4));

        let la = ModelInstance::linear_attention(&q, &k, &v).unwrap();
        match chunked_scalar_equivalence(&la, 16).unwrap() {
            ChunkEquivalence::Checked { max_rel_err } => assert!(max_rel_err <= 1e-10),
            other => panic!("expected check, got {other:?}"),
        }

        let rn = ModelInstance::tnl_retnet(&q, &k, &v, 0.9).unwrap();
        match chunked_scalar_equivalence(&rn, 8).unwrap() {
            ChunkEquivalence::Checked { max_rel_err } => assert!(max_rel_err <= 1e-10),
            other => panic!("expected check, got {other:?}"),
        }
    }

    #[test]
    fn data_dependent_gate_is_not_chunkable() {
        let mut rng = SplitMix64::new(5);
        let forget: alloc::vec::Vec<f64> = (0..8).map(|_| rng.next_unit()).collect();
        let input: alloc::vec::Vec<f64> = (0..8).map(|_| rng.next_symmetric()).collect();
        let shrink: alloc::vec::Vec<f64> = (0..8).map(|_| rng.next_symmetric()).collect();
        let inst = ModelInstance::hgrn(&forget, &input, &shrink).unwrap();
        assert!(matches!(
            chunked_scalar_equivalence(&inst, 4).unwrap(),
            ChunkEquivalence::NotChunkable { .. }
        ));
    }

    #[test]
    fn registry_lookup_and_executability() {
        assert!(registry_entry("linear_attention").unwrap().executable);
        assert!(registry_entry("tnl_retnet").unwrap().executable);
        assert!(registry_entry("hgrn_lrn").unwrap().executable);
        assert!(!registry_entry("mamba").unwrap().executable);
        assert!(!registry_entry("cosformer").unwrap().executable);
        assert!(matches!(
            registry_entry("nope"),
            Err(Error::Unknown { .. })
        ));
        assert_eq!(REGISTRY.len(), 13);
        assert_eq!(REGISTRY.iter().filter(|e| e.executable).count(), 3);
    }

    #[test]
    fn memory_shape_stays_fixed_over_a_run() {
        let mut rng = SplitMix64::new(6);
        let (k, d) = (3, 5);
        let mut m = Matrix::zeros(k, d);
        for _ in 0..20 {
            let e: alloc::vec::Vec<f64> = (0..k).map(|_| rng.next_symmetric()).collect();
            let i: alloc::vec::Vec<f64> = (0..d).map(|_| rng.next_symmetric()).collect();
            let osc = Oscillation::Elementwise(rng.matrix(k, d));
            m = general_step(&m, &osc, &e, &i).unwrap();
            assert_eq!(m.shape(), (k, d));
        }
    }
}
