//! Chunk-level kernels for causal linear attention with decay.
//!
//! A sequence of length `N` is cut into `T = N / C` chunks. Inside a chunk the
//! output is the masked left product
//!
//! ```text
//! O_intra = [(Q_t K_t^T) (*) M] V_t          M_ij = lambda^(i-j), i >= j
//! ```
//!
//! and the influence of everything before the chunk arrives through a single
//! `d_h x d_h` state:
//!
//! ```text
//! O_inter = Lam Q_t KV_prev                  Lam = diag(lambda^1 .. lambda^C)
//! KV_next = lambda^C KV_prev + (lambda^C Lam^-1 K_t)^T V_t
//! ```
//!
//! The backward pass mirrors this with a reverse-running `dKV` state. All
//! kernels are pure functions of one chunk; the drivers at the bottom run them
//! over a whole sequence in a single process and are the bit-exact reference
//! for the simulated multi-worker runtime.

use alloc::format;
use alloc::vec::Vec;

use crate::matrix::{self, Matrix};
use crate::oracle::Grads;
use crate::{check_lambda, Error, Result};

/// Lower-triangular decay mask: `M[i][j] = lambda^(i-j)` for `i >= j`, else 0.
///
/// Powers come from iterated multiplication along each row, never `pow`, so a
/// `C x C` mask is entry-for-entry identical to the top-left corner of an
/// `N x N` one.
pub fn decay_mask(n: usize, lambda: f64) -> Result<Matrix> {
    check_lambda(lambda)?;
    let mut mask = Matrix::zeros(n, n);
    for i in 0..n {
        let mut p = 1.0;
        for j in (0..=i).rev() {
            mask[(i, j)] = p;
            p *= lambda;
        }
    }
    Ok(mask)
}

/// Everything about the decay rate a chunk kernel needs, precomputed once per
/// `(C, lambda)` pair.
#[derive(Debug, Clone)]
pub struct DecayStructures {
    chunk_size: usize,
    lambda: f64,
    /// `C x C` lower-triangular mask.
    mask: Matrix,
    /// `[lambda^1 .. lambda^C]`, the diagonal of `Lam`.
    lambda_fwd: Vec<f64>,
    /// `[lambda^(C-1) .. lambda^0]`, the diagonal of `lambda^C Lam^-1`,
    /// computed directly as powers rather than by division.
    lambda_rev: Vec<f64>,
    /// `lambda^C`.
    lambda_pow_c: f64,
}

impl DecayStructures {
    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mask(&self) -> &Matrix {
        &self.mask
    }

    pub fn lambda_fwd(&self) -> &[f64] {
        &self.lambda_fwd
    }

    pub fn lambda_rev(&self) -> &[f64] {
        &self.lambda_rev
    }

    pub fn lambda_pow_c(&self) -> f64 {
        self.lambda_pow_c
    }

    /// True when `lambda^C` dropped below 1e-300. The update rule then
    /// degenerates to "history fully decayed", which is the correct limit;
    /// callers may want to surface a diagnostic.
    pub fn lambda_pow_c_underflow(&self) -> bool {
        self.lambda_pow_c < 1e-300
    }
}

/// Builds the decay mask and power vectors for chunk size `c`.
pub fn build_decay(c: usize, lambda: f64) -> Result<DecayStructures> {
    if c == 0 {
        return Err(Error::Domain("chunk size must be at least 1".into()));
    }
    check_lambda(lambda)?;
    let mask = decay_mask(c, lambda)?;
    let mut lambda_fwd = Vec::with_capacity(c);
    let mut p = 1.0;
    for _ in 0..c {
        p *= lambda;
        lambda_fwd.push(p);
    }
    let mut lambda_rev = alloc::vec![0.0; c];
    let mut q = 1.0;
    for i in (0..c).rev() {
        lambda_rev[i] = q;
        q *= lambda;
    }
    let lambda_pow_c = lambda_fwd[c - 1];
    Ok(DecayStructures {
        chunk_size: c,
        lambda,
        mask,
        lambda_fwd,
        lambda_rev,
        lambda_pow_c,
    })
}

/// One rank's slice of the sequence: `Q_t`, `K_t`, `V_t`, each `C x d_h`.
#[derive(Debug, Clone)]
pub struct ChunkInputs {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl ChunkInputs {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self> {
        if q.shape() != k.shape() {
            return Err(Error::Shape {
                op: "ChunkInputs",
                left: q.shape(),
                right: k.shape(),
            });
        }
        if q.shape() != v.shape() {
            return Err(Error::Shape {
                op: "ChunkInputs",
                left: q.shape(),
                right: v.shape(),
            });
        }
        Ok(Self { q, k, v })
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.rows() == 0
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }
}

fn check_chunk(d: &DecayStructures, rows: usize) -> Result<()> {
    if rows != d.chunk_size {
        return Err(Error::Shape {
            op: "chunk kernel",
            left: (rows, 0),
            right: (d.chunk_size, 0),
        });
    }
    Ok(())
}

/// `O_intra = [(Q_t K_t^T) (*) M] V_t`
pub fn intra_forward(ci: &ChunkInputs, d: &DecayStructures) -> Result<Matrix> {
    check_chunk(d, ci.len())?;
    let scores = matrix::matmul(&ci.q, &matrix::transpose(&ci.k))?;
    matrix::matmul(&matrix::hadamard(&scores, &d.mask)?, &ci.v)
}

/// `O_inter = Lam Q_t KV_prev`
pub fn inter_forward(q: &Matrix, kv_prev: &Matrix, d: &DecayStructures) -> Result<Matrix> {
    check_chunk(d, q.rows())?;
    matrix::matmul(&matrix::row_scale(q, &d.lambda_fwd)?, kv_prev)
}

/// `KV_next = lambda^C KV_prev + (lambda^C Lam^-1 K_t)^T V_t`
pub fn kv_update(
    kv_prev: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d: &DecayStructures,
) -> Result<Matrix> {
    check_chunk(d, k.rows())?;
    let fresh = matrix::matmul(&matrix::transpose(&matrix::row_scale(k, &d.lambda_rev)?), v)?;
    matrix::add(&matrix::scale(kv_prev, d.lambda_pow_c), &fresh)
}

/// The three masked left-product gradients local to one chunk:
/// `dQ = [(dO V^T) (*) M] K`, `dK = [(dO V^T) (*) M]^T Q`,
/// `dV = [(Q K^T) (*) M]^T dO`.
pub fn intra_backward(ci: &ChunkInputs, d_out: &Matrix, d: &DecayStructures) -> Result<Grads> {
    check_chunk(d, ci.len())?;
    let w = matrix::hadamard(&matrix::matmul(d_out, &matrix::transpose(&ci.v))?, &d.mask)?;
    let dq = matrix::matmul(&w, &ci.k)?;
    let dk = matrix::matmul(&matrix::transpose(&w), &ci.q)?;
    let scores = matrix::hadamard(&matrix::matmul(&ci.q, &matrix::transpose(&ci.k))?, &d.mask)?;
    let dv = matrix::matmul(&matrix::transpose(&scores), d_out)?;
    Ok(Grads { dq, dk, dv })
}

/// `dQ_inter = Lam dO_t KV_prev^T`, using the forward-cached state.
pub fn inter_backward_q(d_out: &Matrix, kv_prev: &Matrix, d: &DecayStructures) -> Result<Matrix> {
    check_chunk(d, d_out.rows())?;
    matrix::matmul(
        &matrix::row_scale(d_out, &d.lambda_fwd)?,
        &matrix::transpose(kv_prev),
    )
}

/// `dK_inter = lambda^C Lam^-1 V_t dKV_next^T`
pub fn inter_backward_k(v: &Matrix, dkv_next: &Matrix, d: &DecayStructures) -> Result<Matrix> {
    check_chunk(d, v.rows())?;
    matrix::matmul(
        &matrix::row_scale(v, &d.lambda_rev)?,
        &matrix::transpose(dkv_next),
    )
}

/// `dV_inter = lambda^C Lam^-1 K_t dKV_next`
pub fn inter_backward_v(k: &Matrix, dkv_next: &Matrix, d: &DecayStructures) -> Result<Matrix> {
    check_chunk(d, k.rows())?;
    matrix::matmul(&matrix::row_scale(k, &d.lambda_rev)?, dkv_next)
}

/// `dKV_prev = lambda^C dKV_next + (Lam Q_t)^T dO_t`
pub fn dkv_update(
    dkv_next: &Matrix,
    q: &Matrix,
    d_out: &Matrix,
    d: &DecayStructures,
) -> Result<Matrix> {
    check_chunk(d, q.rows())?;
    let fresh = matrix::matmul(
        &matrix::transpose(&matrix::row_scale(q, &d.lambda_fwd)?),
        d_out,
    )?;
    matrix::add(&matrix::scale(dkv_next, d.lambda_pow_c), &fresh)
}

/// Output of a chunked forward run: the full `N x d_h` output plus the state
/// each chunk received (entry `t` is the `KV` entering chunk `t`; entry 0 is
/// zero). The cache is exactly what the backward pass consumes.
#[derive(Debug, Clone)]
pub struct ChunkedForward {
    pub output: Matrix,
    pub kv_cache: Vec<Matrix>,
}

fn check_partition(n: usize, c: usize) -> Result<usize> {
    if c == 0 || !n.is_multiple_of(c) {
        return Err(Error::Partition(format!(
            "chunk size {c} does not divide sequence length {n}"
        )));
    }
    Ok(n / c)
}

fn split_chunks(q: &Matrix, k: &Matrix, v: &Matrix, c: usize) -> Result<Vec<ChunkInputs>> {
    let qs = matrix::split_rows(q, c)?;
    let ks = matrix::split_rows(k, c)?;
    let vs = matrix::split_rows(v, c)?;
    qs.into_iter()
        .zip(ks)
        .zip(vs)
        .map(|((q, k), v)| ChunkInputs::new(q, k, v))
        .collect()
}

/// Runs the chunked forward pass in one process: intra parts first (they are
/// independent), then the sequential state-carry loop.
pub fn chunked_forward_serial(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    lambda: f64,
    c: usize,
) -> Result<ChunkedForward> {
    let t = check_partition(q.rows(), c)?;
    let decay = build_decay(c, lambda)?;
    let chunks = split_chunks(q, k, v, c)?;
    let dh = q.cols();

    let intra: Vec<Matrix> = chunks
        .iter()
        .map(|ci| intra_forward(ci, &decay))
        .collect::<Result<_>>()?;

    let mut kv = Matrix::zeros(dh, dh);
    let mut kv_cache = Vec::with_capacity(t);
    let mut out_chunks = Vec::with_capacity(t);
    for (ci, intra_t) in chunks.iter().zip(&intra) {
        kv_cache.push(kv.clone());
        let inter = inter_forward(&ci.q, &kv, &decay)?;
        out_chunks.push(matrix::add(intra_t, &inter)?);
        kv = kv_update(&kv, &ci.k, &ci.v, &decay)?;
    }
    Ok(ChunkedForward {
        output: matrix::concat_rows(&out_chunks)?,
        kv_cache,
    })
}

/// Chunked backward pass; `kv_cache` must come from the matching forward call.
/// Parallel part first (`dQ` and the intra gradients need no neighbour state),
/// then the reverse state-carry loop for the inter parts of `dK`/`dV`.
pub fn chunked_backward_serial(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_out: &Matrix,
    lambda: f64,
    c: usize,
    kv_cache: &[Matrix],
) -> Result<Grads> {
    let t = check_partition(q.rows(), c)?;
    if kv_cache.len() != t {
        return Err(Error::Length {
            op: "chunked_backward_serial kv_cache",
            expected: t,
            found: kv_cache.len(),
        });
    }
    if d_out.shape() != q.shape() {
        return Err(Error::Shape {
            op: "chunked_backward_serial",
            left: q.shape(),
            right: d_out.shape(),
        });
    }
    let decay = build_decay(c, lambda)?;
    let chunks = split_chunks(q, k, v, c)?;
    let douts = matrix::split_rows(d_out, c)?;
    let dh = q.cols();

    let mut dq_chunks = Vec::with_capacity(t);
    let mut dk_intra = Vec::with_capacity(t);
    let mut dv_intra = Vec::with_capacity(t);
    for ((ci, dout_t), kv_prev) in chunks.iter().zip(&douts).zip(kv_cache) {
        if kv_prev.shape() != (dh, dh) {
            return Err(Error::Shape {
                op: "chunked_backward_serial kv_cache entry",
                left: (dh, dh),
                right: kv_prev.shape(),
            });
        }
        let intra = intra_backward(ci, dout_t, &decay)?;
        let dq_inter = inter_backward_q(dout_t, kv_prev, &decay)?;
        dq_chunks.push(matrix::add(&intra.dq, &dq_inter)?);
        dk_intra.push(intra.dk);
        dv_intra.push(intra.dv);
    }

    let mut dkv = Matrix::zeros(dh, dh);
    let mut dk_chunks = alloc::vec![Matrix::zeros(0, 0); t];
    let mut dv_chunks = alloc::vec![Matrix::zeros(0, 0); t];
    for idx in (0..t).rev() {
        let ci = &chunks[idx];
        dk_chunks[idx] = matrix::add(&dk_intra[idx], &inter_backward_k(&ci.v, &dkv, &decay)?)?;
        dv_chunks[idx] = matrix::add(&dv_intra[idx], &inter_backward_v(&ci.k, &dkv, &decay)?)?;
        dkv = dkv_update(&dkv, &ci.q, &douts[idx], &decay)?;
    }

    Ok(Grads {
        dq: matrix::concat_rows(&dq_chunks)?,
        dk: matrix::concat_rows(&dk_chunks)?,
        dv: matrix::concat_rows(&dv_chunks)?,
    })
}
