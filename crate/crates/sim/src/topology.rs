//! World layout and data distribution.
//!
//! A world of `W` ranks with sequence-parallel size `T` forms `G = W / T`
//! groups; rank `r` sits in group `r / T` at local position `r % T`, and the
//! group's source rank (where a batch lands before the scatter) is
//! `(r / T) * T`. Batches are dealt to groups round-robin: batch `b` goes to
//! group `b % G`. Within a group, chunk `t` of the sequence lives on the rank
//! with local position `t`.

use lasp_core::matrix::{self, Matrix};

use crate::SimError;

/// Static description of the distributed world.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    world_size: usize,
    sp_size: usize,
}

impl Topology {
    pub fn new(world_size: usize, sp_size: usize) -> Result<Self, SimError> {
        if world_size == 0 || sp_size == 0 {
            return Err(SimError::Config {
                detail: format!("world size {world_size} and sp size {sp_size} must be positive"),
            });
        }
        if !world_size.is_multiple_of(sp_size) {
            return Err(SimError::Config {
                detail: format!(
                    "sequence-parallel size {sp_size} does not divide world size {world_size}"
                ),
            });
        }
        Ok(Self {
            world_size,
            sp_size,
        })
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn sp_size(&self) -> usize {
        self.sp_size
    }

    pub fn group_count(&self) -> usize {
        self.world_size / self.sp_size
    }

    pub fn group_id(&self, rank: usize) -> usize {
        rank / self.sp_size
    }

    /// Position of `rank` inside its group; equals the chunk index it holds.
    pub fn local_chunk_index(&self, rank: usize) -> usize {
        rank % self.sp_size
    }

    /// First rank of `rank`'s group.
    pub fn src_rank(&self, rank: usize) -> usize {
        self.group_id(rank) * self.sp_size
    }

    pub fn source_ranks(&self) -> Vec<usize> {
        (0..self.group_count()).map(|g| g * self.sp_size).collect()
    }

    pub fn group_ranks(&self, group: usize) -> std::ops::Range<usize> {
        group * self.sp_size..(group + 1) * self.sp_size
    }

    pub fn is_group_first(&self, rank: usize) -> bool {
        self.local_chunk_index(rank) == 0
    }

    pub fn is_group_last(&self, rank: usize) -> bool {
        self.local_chunk_index(rank) == self.sp_size - 1
    }
}

/// A validated assignment of batches and chunks to ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DistributionPlan {
    topology: Topology,
    seq_len: usize,
    chunk_size: usize,
    batch_count: usize,
}

/// Where one batch lives: its group and the ranks inside it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub batch: usize,
    pub group: usize,
    pub src_rank: usize,
    pub ranks: Vec<usize>,
}

impl DistributionPlan {
    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn batch_count(&self) -> usize {
        self.batch_count
    }

    pub fn group_for_batch(&self, batch: usize) -> usize {
        batch % self.topology.group_count()
    }

    /// How many batches this group has already seen before `batch`.
    pub fn round_for_batch(&self, batch: usize) -> usize {
        batch / self.topology.group_count()
    }

    /// Global rank holding chunk `chunk` (0-based) of `batch`.
    pub fn rank_for(&self, batch: usize, chunk: usize) -> usize {
        self.group_for_batch(batch) * self.topology.sp_size() + chunk
    }

    pub fn rounds_for_group(&self, group: usize) -> usize {
        let g = self.topology.group_count();
        (self.batch_count + g - 1 - group) / g
    }

    pub fn placements(&self) -> Vec<Placement> {
        (0..self.batch_count)
            .map(|batch| {
                let group = self.group_for_batch(batch);
                Placement {
                    batch,
                    group,
                    src_rank: group * self.topology.sp_size(),
                    ranks: self.topology.group_ranks(group).collect(),
                }
            })
            .collect()
    }
}

/// Validates the divisibility requirements and fixes the batch round-robin.
pub fn plan_distribution(
    seq_len: usize,
    world_size: usize,
    sp_size: usize,
    batch_count: usize,
) -> Result<DistributionPlan, SimError> {
    let topology = Topology::new(world_size, sp_size)?;
    if seq_len == 0 || !seq_len.is_multiple_of(sp_size) {
        return Err(SimError::Config {
            detail: format!(
                "sequence-parallel size {sp_size} does not divide sequence length {seq_len}"
            ),
        });
    }
    let groups = topology.group_count();
    if batch_count < groups {
        return Err(SimError::Config {
            detail: format!("batch count {batch_count} is below the group count {groups}"),
        });
    }
    Ok(DistributionPlan {
        topology,
        seq_len,
        chunk_size: seq_len / sp_size,
        batch_count,
    })
}

/// Splits one batch's rows into the `T` chunks its group will hold, in rank
/// order. Concatenating the result reconstructs the input exactly.
pub fn scatter_sequence(x: &Matrix, plan: &DistributionPlan) -> Result<Vec<Matrix>, SimError> {
    if x.rows() != plan.seq_len {
        return Err(SimError::Config {
            detail: format!(
                "input has {} rows but the plan distributes sequences of length {}",
                x.rows(),
                plan.seq_len
            ),
        });
    }
    Ok(matrix::split_rows(x, plan.chunk_size)?)
}

pub fn gather_sequence(chunks: &[Matrix]) -> Result<Matrix, SimError> {
    Ok(matrix::concat_rows(chunks)?)
}

/// The query/key/value projections, all `d x d`.
#[derive(Debug, Clone)]
pub struct ProjectionWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl ProjectionWeights {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self, SimError> {
        for (name, w) in [("W_Q", &w_q), ("W_K", &w_k), ("W_V", &w_v)] {
            if w.rows() != w.cols() {
                return Err(SimError::Config {
                    detail: format!("{name} must be square, got {}x{}", w.rows(), w.cols()),
                });
            }
        }
        if w_q.shape() != w_k.shape() || w_q.shape() != w_v.shape() {
            return Err(SimError::Config {
                detail: "projection weights must share one shape".into(),
            });
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Matrix::identity(d),
            w_k: Matrix::identity(d),
            w_v: Matrix::identity(d),
        }
    }
}

/// `Q = X W_Q`, `K = X W_K`, `V = X W_V` for one chunk of embeddings.
pub fn project_qkv(
    x: &Matrix,
    w: &ProjectionWeights,
) -> Result<(Matrix, Matrix, Matrix), SimError> {
    Ok((
        matrix::matmul(x, &w.w_q)?,
        matrix::matmul(x, &w.w_k)?,
        matrix::matmul(x, &w.w_v)?,
    ))
}

/// Splits a `C x d` tensor into `h` head blocks of `d / h` columns; head `j`
/// takes columns `j * d_h .. (j + 1) * d_h`.
pub fn split_heads(m: &Matrix, heads: usize) -> Result<Vec<Matrix>, SimError> {
    Ok(matrix::split_cols(m, heads)?)
}

pub fn concat_heads(blocks: &[Matrix]) -> Result<Matrix, SimError> {
    Ok(matrix::concat_cols(blocks)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lasp_core::rng::SplitMix64;

    #[test]
    fn two_group_eight_rank_layout() {
        // W = 8, T = 4: two groups with source ranks 0 and 4; batch 0 spans
        // ranks 0..=3, batch 1 spans 4..=7.
        let plan = plan_distribution(64, 8, 4, 2).unwrap();
        let topo = plan.topology();
        assert_eq!(topo.group_count(), 2);
        assert_eq!(topo.source_ranks(), vec![0, 4]);
        for chunk in 0..4 {
            assert_eq!(plan.rank_for(0, chunk), chunk);
            assert_eq!(plan.rank_for(1, chunk), 4 + chunk);
        }
        let placements = plan.placements();
        assert_eq!(placements[0].ranks, vec![0, 1, 2, 3]);
        assert_eq!(placements[1].ranks, vec![4, 5, 6, 7]);
        assert_eq!(placements[1].src_rank, 4);
    }

    #[test]
    fn single_group_and_two_group_layouts() {
        let plan = plan_distribution(16, 4, 4, 1).unwrap();
        assert_eq!(plan.topology().group_count(), 1);
        assert_eq!(plan.topology().source_ranks(), vec![0]);

        let plan = plan_distribution(16, 4, 2, 2).unwrap();
        assert_eq!(plan.topology().group_count(), 2);
        assert_eq!(plan.topology().source_ranks(), vec![0, 2]);
    }

    #[test]
    fn divisibility_violations_name_the_pair() {
        let e = plan_distribution(64, 6, 4, 1).unwrap_err();
        assert!(e.to_string().contains('4') && e.to_string().contains('6'));
        let e = plan_distribution(10, 4, 4, 1).unwrap_err();
        assert!(e.to_string().contains("10"));
        assert!(plan_distribution(64, 8, 4, 1).is_err(), "batches below G");
    }

    #[test]
    fn round_robin_batches() {
        let plan = plan_distribution(16, 8, 4, 5).unwrap();
        assert_eq!(plan.group_for_batch(0), 0);
        assert_eq!(plan.group_for_batch(1), 1);
        assert_eq!(plan.group_for_batch(2), 0);
        assert_eq!(plan.round_for_batch(2), 1);
        assert_eq!(plan.rounds_for_group(0), 3);
        assert_eq!(plan.rounds_for_group(1), 2);
    }

    #[test]
    fn scatter_gather_round_trip_is_exact() {
        let mut rng = SplitMix64::new(1);
        let x = rng.matrix(8, 3);
        let plan = plan_distribution(8, 4, 4, 1).unwrap();
        let chunks = scatter_sequence(&x, &plan).unwrap();
        assert_eq!(chunks.len(), 4);
        // Rank 2 (0-based) holds rows 4..6 of N = 8, T = 4.
        assert_eq!(chunks[2].row(0), x.row(4));
        assert_eq!(chunks[2].row(1), x.row(5));
        assert_eq!(gather_sequence(&chunks).unwrap(), x);

        let whole = plan_distribution(8, 1, 1, 1).unwrap();
        let chunks = scatter_sequence(&x, &whole).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0], x);
    }

    #[test]
    fn identity_projection_passes_through() {
        let mut rng = SplitMix64::new(2);
        let x = rng.matrix(4, 4);
        let w = ProjectionWeights::identity(4);
        let (q, k, v) = project_qkv(&x, &w).unwrap();
        assert_eq!(q, x);
        assert_eq!(k, x);
        assert_eq!(v, x);

        let zero = Matrix::zeros(4, 4);
        let (q, _, _) = project_qkv(&zero, &w).unwrap();
        assert_eq!(q, zero);
    }

    // Projection is row-wise, so projecting the whole sequence and then
    // scattering gives each rank exactly what it would compute from its own
    // chunk. This is what lets workers receive pre-projected chunks.
    #[test]
    fn projection_commutes_with_scatter_bit_exactly() {
        let mut rng = SplitMix64::new(9);
        let x = rng.matrix(8, 4);
        let w = ProjectionWeights::new(rng.matrix(4, 4), rng.matrix(4, 4), rng.matrix(4, 4))
            .unwrap();
        let plan = plan_distribution(8, 4, 4, 1).unwrap();

        let (q_full, k_full, v_full) = project_qkv(&x, &w).unwrap();
        let q_scattered = scatter_sequence(&q_full, &plan).unwrap();
        let k_scattered = scatter_sequence(&k_full, &plan).unwrap();
        let v_scattered = scatter_sequence(&v_full, &plan).unwrap();

        for (local, x_chunk) in scatter_sequence(&x, &plan).unwrap().iter().enumerate() {
            let (q, k, v) = project_qkv(x_chunk, &w).unwrap();
            assert_eq!(q, q_scattered[local]);
            assert_eq!(k, k_scattered[local]);
            assert_eq!(v, v_scattered[local]);
        }
    }

    #[test]
    fn head_split_takes_column_blocks() {
        let x = Matrix::from_rows(&[&[0.0, 1.0, 2.0, 3.0], &[4.0, 5.0, 6.0, 7.0]]).unwrap();
        let heads = split_heads(&x, 2).unwrap();
        assert_eq!(heads[0].row(0), &[0.0, 1.0]);
        assert_eq!(heads[1].row(0), &[2.0, 3.0]);
        assert_eq!(concat_heads(&heads).unwrap(), x);
        assert!(split_heads(&x, 3).is_err());
    }
}
