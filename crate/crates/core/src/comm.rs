//! Communication-volume model and trace accounting.
//!
//! Analytic per-layer element counts for four sequence-parallel schemes
//! (`B` batch, `N` sequence length, `d` model dim, `h` heads, `T` parallel
//! size):
//!
//! | method            | full            | simplified (common `Bd` removed) |
//! |-------------------|-----------------|----------------------------------|
//! | LASP              | `B d^2 / h`     | `d / h`                          |
//! | Ring Attention    | `2 B N d / h`   | `2 N / h`                        |
//! | DeepSpeed-Ulysses | `4 B N d / T`   | `4 N / T`                        |
//! | Megatron-SP       | `2BNd + 4BNd/T` | `2N + 4N/T`                      |
//!
//! Only the LASP entry is independent of `N`, which is the whole point: the
//! ring carries one `d_h x d_h` state per hop. All arithmetic is exact
//! (`u128` with divisibility checks); a volume that does not come out integral
//! is reported as an error rather than rounded.
//!
//! The measured side consumes [`CommRecord`]s produced by the simulated
//! runtime: per group, per layer and per direction a run must show exactly
//! `T - 1` messages of exactly `(d/h)^2` elements, regardless of `N`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Sequence-parallel schemes compared by the volume model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SpMethod {
    Lasp,
    RingAttention,
    DeepspeedUlysses,
    MegatronSp,
}

impl SpMethod {
    pub const ALL: [SpMethod; 4] = [
        SpMethod::Lasp,
        SpMethod::RingAttention,
        SpMethod::DeepspeedUlysses,
        SpMethod::MegatronSp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SpMethod::Lasp => "LASP",
            SpMethod::RingAttention => "Ring Attention",
            SpMethod::DeepspeedUlysses => "DeepSpeed-Ulysses",
            SpMethod::MegatronSp => "Megatron-SP",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_lowercase().replace([' ', '_'], "-").as_str() {
            "lasp" => Ok(SpMethod::Lasp),
            "ring" | "ring-attention" => Ok(SpMethod::RingAttention),
            "ulysses" | "deepspeed-ulysses" => Ok(SpMethod::DeepspeedUlysses),
            "megatron" | "megatron-sp" => Ok(SpMethod::MegatronSp),
            _ => Err(Error::Unknown {
                kind: "method",
                name: s.to_string(),
            }),
        }
    }
}

/// Parameters of the volume formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommParams {
    pub batch: u64,
    pub seq_len: u64,
    pub model_dim: u64,
    pub heads: u64,
    pub sp_size: u64,
}

impl CommParams {
    pub fn new(batch: u64, seq_len: u64, model_dim: u64, heads: u64, sp_size: u64) -> Result<Self> {
        for (what, v) in [
            ("batch", batch),
            ("sequence length", seq_len),
            ("model dim", model_dim),
            ("heads", heads),
            ("sp size", sp_size),
        ] {
            if v == 0 {
                return Err(Error::Domain(format!("{what} must be positive")));
            }
        }
        if !model_dim.is_multiple_of(heads) {
            return Err(Error::Partition(format!(
                "head count {heads} does not divide model dim {model_dim}"
            )));
        }
        Ok(Self {
            batch,
            seq_len,
            model_dim,
            heads,
            sp_size,
        })
    }

    pub fn head_dim(&self) -> u64 {
        self.model_dim / self.heads
    }
}

fn exact_div(num: u128, den: u128, what: &str) -> Result<u128> {
    if !num.is_multiple_of(den) {
        return Err(Error::Domain(format!(
            "{what}: {num} is not divisible by {den}"
        )));
    }
    Ok(num / den)
}

/// Full-formulation volume in elements for one method.
pub fn analytic_volume(method: SpMethod, p: &CommParams) -> Result<u128> {
    let b = p.batch as u128;
    let n = p.seq_len as u128;
    let d = p.model_dim as u128;
    let h = p.heads as u128;
    let t = p.sp_size as u128;
    match method {
        SpMethod::Lasp => Ok(b * d * (d / h)),
        SpMethod::RingAttention => exact_div(2 * b * n * d, h, "ring volume"),
        SpMethod::DeepspeedUlysses => exact_div(4 * b * n * d, t, "ulysses volume"),
        SpMethod::MegatronSp => {
            Ok(2 * b * n * d + exact_div(4 * b * n * d, t, "megatron volume")?)
        }
    }
}

/// Simplified volume: the common `Bd` factor removed.
pub fn simplified_volume(method: SpMethod, p: &CommParams) -> Result<u128> {
    let n = p.seq_len as u128;
    let d = p.model_dim as u128;
    let h = p.heads as u128;
    let t = p.sp_size as u128;
    match method {
        SpMethod::Lasp => Ok(d / h),
        SpMethod::RingAttention => exact_div(2 * n, h, "ring simplified"),
        SpMethod::DeepspeedUlysses => exact_div(4 * n, t, "ulysses simplified"),
        SpMethod::MegatronSp => Ok(2 * n + exact_div(4 * n, t, "megatron simplified")?),
    }
}

/// One row of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeRow {
    pub method: SpMethod,
    pub full_elements: u128,
    pub simplified_elements: u128,
}

pub fn volume_rows(p: &CommParams) -> Result<Vec<VolumeRow>> {
    SpMethod::ALL
        .iter()
        .map(|&m| {
            Ok(VolumeRow {
                method: m,
                full_elements: analytic_volume(m, p)?,
                simplified_elements: simplified_volume(m, p)?,
            })
        })
        .collect()
}

/// All four methods ordered by simplified volume, with the LASP verdict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossoverReport {
    /// Ascending by simplified volume; ties keep the `SpMethod` order.
    pub ranking: Vec<(SpMethod, u128)>,
    pub lasp_strictly_lowest: bool,
    pub lasp_tied_lowest: bool,
}

impl CrossoverReport {
    pub fn lasp_lowest(&self) -> bool {
        self.lasp_strictly_lowest || self.lasp_tied_lowest
    }
}

pub fn crossover_check(p: &CommParams) -> Result<CrossoverReport> {
    let mut ranking: Vec<(SpMethod, u128)> = SpMethod::ALL
        .iter()
        .map(|&m| Ok((m, simplified_volume(m, p)?)))
        .collect::<Result<_>>()?;
    ranking.sort_by_key(|&(m, v)| (v, m));
    let lasp = ranking
        .iter()
        .find(|(m, _)| *m == SpMethod::Lasp)
        .map(|&(_, v)| v)
        .unwrap();
    let others_min = ranking
        .iter()
        .filter(|(m, _)| *m != SpMethod::Lasp)
        .map(|&(_, v)| v)
        .min()
        .unwrap();
    Ok(CrossoverReport {
        ranking,
        lasp_strictly_lowest: lasp < others_min,
        lasp_tied_lowest: lasp == others_min,
    })
}

/// Direction of a simulated point-to-point message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MessageTag {
    /// Forward `KV` state, rank `i -> i + 1`.
    KvFwd,
    /// Backward `dKV` state, rank `i + 1 -> i`.
    DkvBwd,
}

impl MessageTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            MessageTag::KvFwd => "KV_FWD",
            MessageTag::DkvBwd => "DKV_BWD",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "KV_FWD" => Ok(MessageTag::KvFwd),
            "DKV_BWD" => Ok(MessageTag::DkvBwd),
            _ => Err(Error::Unknown {
                kind: "message tag",
                name: s.to_string(),
            }),
        }
    }
}

/// One simulated message, as logged by the runtime.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommRecord {
    pub step: usize,
    pub src: usize,
    pub dst: usize,
    pub tag: MessageTag,
    pub layer: usize,
    pub head: usize,
    pub elements: usize,
}

impl CommRecord {
    pub fn bytes(&self) -> usize {
        self.elements * 8
    }
}

/// Aggregated per-(direction, layer, group) sums from a trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasuredVolume {
    /// Elements per message, uniform across the whole trace.
    pub elements_per_message: usize,
    /// (tag, layer, group) -> (message count, total elements).
    pub cells: BTreeMap<(MessageTag, usize, usize), (usize, u64)>,
    pub forward_messages: usize,
    pub backward_messages: usize,
    pub total_elements: u64,
}

impl MeasuredVolume {
    pub fn total_bytes(&self) -> u64 {
        self.total_elements * 8
    }

    /// Message counts grouped by payload size; two traces with the same
    /// multiset moved the same data regardless of ordering.
    pub fn size_multiset(records: &[CommRecord]) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for r in records {
            *m.entry(r.elements).or_insert(0) += 1;
        }
        m
    }
}

/// Validates and aggregates a LASP trace against the expected head geometry:
/// every payload must be `(d/h)^2` elements and every hop must stay inside a
/// ring neighbourhood of one sequence-parallel group.
pub fn measure_trace(records: &[CommRecord], p: &CommParams) -> Result<MeasuredVolume> {
    let dh = p.head_dim() as usize;
    let expected = dh * dh;
    let t = p.sp_size as usize;
    let mut cells: BTreeMap<(MessageTag, usize, usize), (usize, u64)> = BTreeMap::new();
    let mut fwd = 0;
    let mut bwd = 0;
    let mut total = 0u64;
    for r in records {
        if r.elements != expected {
            return Err(Error::Domain(format!(
                "malformed trace record at step {}: payload {} elements, expected {}",
                r.step, r.elements, expected
            )));
        }
        let hop_ok = match r.tag {
            MessageTag::KvFwd => r.dst == r.src + 1,
            MessageTag::DkvBwd => r.src == r.dst + 1,
        };
        if !hop_ok || r.src / t != r.dst / t {
            return Err(Error::Domain(format!(
                "malformed trace record at step {}: {} hop {} -> {} is not a ring neighbour",
                r.step,
                r.tag.as_str(),
                r.src,
                r.dst
            )));
        }
        match r.tag {
            MessageTag::KvFwd => fwd += 1,
            MessageTag::DkvBwd => bwd += 1,
        }
        let group = r.src / t;
        let cell = cells.entry((r.tag, r.layer, group)).or_insert((0, 0));
        cell.0 += 1;
        cell.1 += r.elements as u64;
        total += r.elements as u64;
    }
    Ok(MeasuredVolume {
        elements_per_message: expected,
        cells,
        forward_messages: fwd,
        backward_messages: bwd,
        total_elements: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(b: u64, n: u64, d: u64, h: u64, t: u64) -> CommParams {
        CommParams::new(b, n, d, h, t).unwrap()
    }

    #[test]
    fn table_values_from_the_comparison() {
        let p = params(1, 65536, 2048, 16, 64);
        assert_eq!(analytic_volume(SpMethod::Lasp, &p).unwrap(), 262144);
        assert_eq!(
            analytic_volume(SpMethod::DeepspeedUlysses, &p).unwrap(),
            8388608
        );
        assert_eq!(simplified_volume(SpMethod::Lasp, &p).unwrap(), 128);
        assert_eq!(
            analytic_volume(SpMethod::RingAttention, &p).unwrap(),
            2 * 65536 * 2048 / 16
        );
        assert_eq!(
            analytic_volume(SpMethod::MegatronSp, &p).unwrap(),
            2 * 65536 * 2048 + 4 * 65536 * 2048 / 64
        );
    }

    #[test]
    fn lasp_is_constant_in_n_others_grow() {
        let base = params(2, 1024, 512, 8, 16);
        let longer = params(2, 4096, 512, 8, 16);
        assert_eq!(
            analytic_volume(SpMethod::Lasp, &base).unwrap(),
            analytic_volume(SpMethod::Lasp, &longer).unwrap()
        );
        for m in [
            SpMethod::RingAttention,
            SpMethod::DeepspeedUlysses,
            SpMethod::MegatronSp,
        ] {
            assert!(
                analytic_volume(m, &longer).unwrap() > analytic_volume(m, &base).unwrap(),
                "{} should grow with N",
                m.name()
            );
        }
    }

    #[test]
    fn crossover_boundary_cases() {
        // d/h = 128 throughout; vary N/T around the boundary at 32.
        let tie = crossover_check(&params(1, 32768, 2048, 16, 1024)).unwrap();
        assert!(tie.lasp_tied_lowest && !tie.lasp_strictly_lowest);

        let above = crossover_check(&params(1, 65536, 2048, 16, 1024)).unwrap();
        assert!(above.lasp_strictly_lowest);
        assert_eq!(above.ranking[0].0, SpMethod::Lasp);

        let below = crossover_check(&params(1, 16384, 2048, 16, 1024)).unwrap();
        assert!(!below.lasp_lowest());
        assert_eq!(below.ranking[0].0, SpMethod::DeepspeedUlysses);
        assert_eq!(below.ranking[0].1, 64);
    }

    #[test]
    fn megatron_always_exceeds_ring_on_grid() {
        // 2N + 4N/T > 2N/h for every h >= 1.
        for n in [1024u64, 8192, 65536] {
            for h in [1u64, 8, 64] {
                for t in [4u64, 16, 64] {
                    let p = params(1, n, 512 * h.max(1), h, t);
                    let meg = simplified_volume(SpMethod::MegatronSp, &p).unwrap();
                    let ring = simplified_volume(SpMethod::RingAttention, &p).unwrap();
                    assert!(meg > ring, "N={n} h={h} T={t}");
                }
            }
        }
    }

    #[test]
    fn rejects_inexact_division_and_bad_params() {
        assert!(CommParams::new(1, 64, 100, 16, 4).is_err());
        assert!(CommParams::new(0, 64, 64, 4, 4).is_err());
        // 4BNd = 24 is not divisible by T = 32.
        let odd = params(1, 3, 2, 2, 32);
        assert!(analytic_volume(SpMethod::DeepspeedUlysses, &odd).is_err());
        assert!(SpMethod::parse("allreduce").is_err());
        assert_eq!(SpMethod::parse("Megatron-SP").unwrap(), SpMethod::MegatronSp);
    }

    fn record(
        step: usize,
        src: usize,
        dst: usize,
        tag: MessageTag,
        layer: usize,
        head: usize,
        elements: usize,
    ) -> CommRecord {
        CommRecord {
            step,
            src,
            dst,
            tag,
            layer,
            head,
            elements,
        }
    }

    #[test]
    fn measure_empty_trace_is_zero() {
        let p = params(1, 64, 16, 2, 1);
        let m = measure_trace(&[], &p).unwrap();
        assert_eq!(m.total_elements, 0);
        assert_eq!(m.forward_messages, 0);
    }

    #[test]
    fn measure_counts_per_group_and_layer() {
        // T = 4, h = 2, d_h = 8: forward volume per group per layer is 3 * 2 * 64.
        let p = params(1, 64, 16, 2, 4);
        let mut records = Vec::new();
        let mut step = 0;
        for head in 0..2 {
            for src in 0..3 {
                records.push(record(step, src, src + 1, MessageTag::KvFwd, 0, head, 64));
                step += 1;
            }
        }
        let m = measure_trace(&records, &p).unwrap();
        assert_eq!(m.elements_per_message, 64);
        assert_eq!(m.forward_messages, 6);
        assert_eq!(m.cells[&(MessageTag::KvFwd, 0, 0)], (6, 384));
    }

    #[test]
    fn measure_rejects_malformed_records() {
        let p = params(1, 64, 16, 2, 4);
        let wrong_size = [record(0, 0, 1, MessageTag::KvFwd, 0, 0, 63)];
        assert!(measure_trace(&wrong_size, &p).is_err());
        let wrong_dir = [record(0, 1, 0, MessageTag::KvFwd, 0, 0, 64)];
        assert!(measure_trace(&wrong_dir, &p).is_err());
        let cross_group = [record(0, 3, 4, MessageTag::KvFwd, 0, 0, 64)];
        assert!(measure_trace(&cross_group, &p).is_err());
    }
}
