//! Serial reference implementations of causal linear attention with decay.
//!
//! Two independent routes compute the same map:
//!
//! - [`dense_masked_forward`] materializes the full `N x N` decay mask and
//!   evaluates the left product `(Q K^T (*) M) V`.
//! - [`serial_forward`] runs the step recurrence
//!   `kv_s = lambda kv_{s-1} + k_s v_s^T`, `o_s^T = q_s^T kv_s`.
//!
//! [`serial_backward`] gives the exact gradients of that map under the loss
//! convention `L = sum O (*) dO` (so `dO` is the upstream gradient), and
//! [`finite_difference_grads`] checks any gradient path numerically. Every
//! chunked or distributed execution in this workspace is verified against
//! these functions.

use alloc::vec::Vec;

use crate::chunk::decay_mask;
use crate::matrix::{self, Matrix};
use crate::{check_lambda, Error, Result};

/// A single-head attention problem: `Q`, `K`, `V` of shape `N x d_h` and a
/// scalar decay rate in `(0, 1]`. `lambda = 1` is plain linear attention.
#[derive(Debug, Clone)]
pub struct AttnProblem {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    lambda: f64,
}

impl AttnProblem {
    pub fn new(q: Matrix, k: Matrix, v: Matrix, lambda: f64) -> Result<Self> {
        if q.shape() != k.shape() {
            return Err(Error::Shape {
                op: "AttnProblem",
                left: q.shape(),
                right: k.shape(),
            });
        }
        if q.shape() != v.shape() {
            return Err(Error::Shape {
                op: "AttnProblem",
                left: q.shape(),
                right: v.shape(),
            });
        }
        check_lambda(lambda)?;
        if !(q.is_finite() && k.is_finite() && v.is_finite()) {
            return Err(Error::NonFinite("attention input"));
        }
        Ok(Self { q, k, v, lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn seq_len(&self) -> usize {
        self.q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }
}

/// Left-product oracle: `O = (Q K^T (*) M) V` with the explicit decay mask.
pub fn dense_masked_forward(p: &AttnProblem) -> Result<Matrix> {
    let mask = decay_mask(p.seq_len(), p.lambda)?;
    let scores = matrix::matmul(&p.q, &matrix::transpose(&p.k))?;
    matrix::matmul(&matrix::hadamard(&scores, &mask)?, &p.v)
}

/// Recurrence oracle: folds `k_s v_s^T` into a running `d_h x d_h` state.
pub fn serial_forward(p: &AttnProblem) -> Result<Matrix> {
    Ok(serial_forward_with_trace(p, 0)?.0)
}

/// Like [`serial_forward`], additionally snapshotting the `kv` state after
/// every `trace_stride` steps (no snapshots when the stride is 0). The
/// snapshot after `t * stride` steps is the state a chunked run carries into
/// chunk `t`.
pub fn serial_forward_with_trace(
    p: &AttnProblem,
    trace_stride: usize,
) -> Result<(Matrix, Vec<Matrix>)> {
    let (n, dh) = p.q.shape();
    let lambda = p.lambda;
    let mut kv = Matrix::zeros(dh, dh);
    let mut out = Matrix::zeros(n, dh);
    let mut trace = Vec::new();
    for s in 0..n {
        for i in 0..dh {
            let ks = p.k[(s, i)];
            for j in 0..dh {
                kv[(i, j)] = lambda * kv[(i, j)] + ks * p.v[(s, j)];
            }
        }
        for j in 0..dh {
            let mut acc = 0.0;
            for i in 0..dh {
                acc += p.q[(s, i)] * kv[(i, j)];
            }
            out[(s, j)] = acc;
        }
        if trace_stride > 0 && (s + 1) % trace_stride == 0 {
            trace.push(kv.clone());
        }
    }
    Ok((out, trace))
}

/// Gradients of the forward map with respect to `Q`, `K`, `V`.
#[derive(Debug, Clone)]
pub struct Grads {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
}

impl Grads {
    pub fn zeros_like(p: &AttnProblem) -> Self {
        let (n, dh) = p.q.shape();
        Self {
            dq: Matrix::zeros(n, dh),
            dk: Matrix::zeros(n, dh),
            dv: Matrix::zeros(n, dh),
        }
    }

    /// Largest relative max-norm error across the three gradients.
    pub fn relative_max_error(&self, other: &Grads) -> Result<f64> {
        let eq = matrix::relative_max_error(&self.dq, &other.dq)?;
        let ek = matrix::relative_max_error(&self.dk, &other.dk)?;
        let ev = matrix::relative_max_error(&self.dv, &other.dv)?;
        Ok(eq.max(ek).max(ev))
    }
}

/// Exact analytical gradients via the step recurrences
/// `dq_s = kv_s do_s` (forward sweep) and
/// `dkv_s = lambda dkv_{s+1} + q_s do_s^T`, `dk_s = dkv_s v_s`,
/// `dv_s = dkv_s^T k_s` (reverse sweep).
pub fn serial_backward(p: &AttnProblem, d_out: &Matrix) -> Result<Grads> {
    if d_out.shape() != p.q.shape() {
        return Err(Error::Shape {
            op: "serial_backward",
            left: p.q.shape(),
            right: d_out.shape(),
        });
    }
    let (n, dh) = p.q.shape();
    let lambda = p.lambda;
    let mut grads = Grads::zeros_like(p);

    let mut kv = Matrix::zeros(dh, dh);
    for s in 0..n {
        for i in 0..dh {
            let ks = p.k[(s, i)];
            for j in 0..dh {
                kv[(i, j)] = lambda * kv[(i, j)] + ks * p.v[(s, j)];
            }
        }
        for i in 0..dh {
            let mut acc = 0.0;
            for j in 0..dh {
                acc += kv[(i, j)] * d_out[(s, j)];
            }
            grads.dq[(s, i)] = acc;
        }
    }

    let mut dkv = Matrix::zeros(dh, dh);
    for s in (0..n).rev() {
        for i in 0..dh {
            let qs = p.q[(s, i)];
            for j in 0..dh {
                dkv[(i, j)] = lambda * dkv[(i, j)] + qs * d_out[(s, j)];
            }
        }
        for i in 0..dh {
            let mut acc = 0.0;
            for j in 0..dh {
                acc += dkv[(i, j)] * p.v[(s, j)];
            }
            grads.dk[(s, i)] = acc;
        }
        for i in 0..dh {
            let mut acc = 0.0;
            for j in 0..dh {
                acc += dkv[(j, i)] * p.k[(s, j)];
            }
            grads.dv[(s, i)] = acc;
        }
    }
    Ok(grads)
}

/// The loss backing the finite-difference checks: `L = sum O (*) upstream`.
pub fn upstream_weighted_loss(output: &Matrix, upstream: &Matrix) -> Result<f64> {
    if output.shape() != upstream.shape() {
        return Err(Error::Shape {
            op: "upstream_weighted_loss",
            left: output.shape(),
            right: upstream.shape(),
        });
    }
    Ok(output
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(o, g)| o * g)
        .sum())
}

/// Central difference `(f(x + eps) - f(x - eps)) / (2 eps)`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Numerical gradients of an arbitrary scalar loss over `Q`, `K`, `V` by
/// central differences, one coordinate at a time.
///
/// The step must lie in `[1e-7, 1e-4]`: larger steps lose truncation accuracy,
/// smaller ones drown in cancellation at 64-bit precision.
pub fn finite_difference_grads<F>(mut loss: F, p: &AttnProblem, eps: f64) -> Result<Grads>
where
    F: FnMut(&AttnProblem) -> Result<f64>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Domain(alloc::format!(
            "finite-difference step must be in [1e-7, 1e-4], got {eps}"
        )));
    }
    fn pick(w: &mut AttnProblem, field: usize) -> &mut Matrix {
        match field {
            0 => &mut w.q,
            1 => &mut w.k,
            _ => &mut w.v,
        }
    }

    let (n, dh) = p.q.shape();
    let mut work = p.clone();
    let mut grads = Grads::zeros_like(p);

    // field: 0 = Q, 1 = K, 2 = V
    for field in 0..3 {
        for r in 0..n {
            for c in 0..dh {
                let orig = pick(&mut work, field)[(r, c)];
                pick(&mut work, field)[(r, c)] = orig + eps;
                let up = loss(&work)?;
                pick(&mut work, field)[(r, c)] = orig - eps;
                let down = loss(&work)?;
                pick(&mut work, field)[(r, c)] = orig;
                let g = (up - down) / (2.0 * eps);
                match field {
                    0 => grads.dq[(r, c)] = g,
                    1 => grads.dk[(r, c)] = g,
                    _ => grads.dv[(r, c)] = g,
                }
            }
        }
    }
    Ok(grads)
}
