//! Simulated multi-worker execution of the chunked attention ring.
//!
//! Workers are in-process execution contexts that own their chunk data
//! exclusively and exchange `d_h x d_h` states through ordered point-to-point
//! queues. Two scheduling modes run the same per-worker code:
//!
//! - `lockstep`: one thread drives workers round-robin in ring order, which
//!   makes the whole run bit-exact against `chunked_*_serial`;
//! - `concurrent`: one OS thread per worker with blocking receives, which
//!   exercises the real waiting semantics.
//!
//! The forward pass keeps the two-loop structure of the algorithm: every
//! worker first computes its intra-chunk outputs (no dependencies), then the
//! ring pass receives `KV` from the predecessor, combines, updates and sends
//! on. The received state is cached per (round, layer, head) so the backward
//! pass never re-communicates it; `dKV` flows the opposite way. Every send is
//! logged, and the trace is canonicalized (sorted by direction, round, layer,
//! head, group, ring position) so equal runs produce byte-equal traces
//! regardless of thread interleaving.

use std::collections::{HashMap, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use lasp_core::chunk::{self, ChunkInputs, DecayStructures};
use lasp_core::comm::{CommRecord, MessageTag};
use lasp_core::matrix::{self, Matrix};
use lasp_core::oracle::Grads;
use lasp_core::rng::SplitMix64;

use crate::topology::{self, DistributionPlan, Topology};
use crate::SimError;

/// How worker execution is interleaved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulingMode {
    Lockstep,
    Concurrent,
}

impl SchedulingMode {
    pub fn parse(s: &str) -> Result<Self, SimError> {
        match s {
            "lockstep" => Ok(SchedulingMode::Lockstep),
            "concurrent" => Ok(SchedulingMode::Concurrent),
            _ => Err(SimError::Config {
                detail: format!("scheduling mode must be lockstep or concurrent, got {s:?}"),
            }),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SchedulingMode::Lockstep => "lockstep",
            SchedulingMode::Concurrent => "concurrent",
        }
    }
}

/// Identity of one point-to-point message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageHeader {
    pub src: usize,
    pub dst: usize,
    pub tag: MessageTag,
    pub layer: usize,
    pub head: usize,
}

/// A state matrix in flight.
#[derive(Debug, Clone)]
pub struct Message {
    pub header: MessageHeader,
    pub payload: Matrix,
}

/// Sort key for trace canonicalization: direction, round, layer, head,
/// group, then position along the ring.
type TraceKey = (MessageTag, usize, usize, usize, usize, usize);

/// Ordered per-edge queues with optional blocking receive.
struct Bus {
    queues: Mutex<HashMap<(usize, usize), VecDeque<Message>>>,
    cond: Condvar,
}

const RECV_TIMEOUT: Duration = Duration::from_secs(30);

impl Bus {
    fn new() -> Self {
        Self {
            queues: Mutex::new(HashMap::new()),
            cond: Condvar::new(),
        }
    }

    fn send(&self, msg: Message) {
        let mut queues = self.queues.lock().unwrap();
        queues
            .entry((msg.header.src, msg.header.dst))
            .or_default()
            .push_back(msg);
        self.cond.notify_all();
    }

    /// Pops the next message on the (src, dst) edge and checks it against the
    /// expected header. In lockstep mode an empty queue is a protocol bug; in
    /// concurrent mode the call blocks (bounded by a timeout).
    fn recv(&self, expect: &MessageHeader, blocking: bool) -> Result<Message, SimError> {
        let edge = (expect.src, expect.dst);
        let mut queues = self.queues.lock().unwrap();
        loop {
            if let Some(msg) = queues.get_mut(&edge).and_then(VecDeque::pop_front) {
                if msg.header != *expect {
                    return Err(SimError::Protocol {
                        rank: expect.dst,
                        detail: format!(
                            "expected {} (layer {}, head {}) from rank {}, got {} (layer {}, head {})",
                            expect.tag.as_str(),
                            expect.layer,
                            expect.head,
                            expect.src,
                            msg.header.tag.as_str(),
                            msg.header.layer,
                            msg.header.head
                        ),
                    });
                }
                return Ok(msg);
            }
            if !blocking {
                return Err(SimError::Protocol {
                    rank: expect.dst,
                    detail: format!(
                        "missing message {} from rank {} (layer {}, head {})",
                        expect.tag.as_str(),
                        expect.src,
                        expect.layer,
                        expect.head
                    ),
                });
            }
            let (guard, timeout) = self.cond.wait_timeout(queues, RECV_TIMEOUT).unwrap();
            queues = guard;
            if timeout.timed_out() {
                return Err(SimError::Protocol {
                    rank: expect.dst,
                    detail: format!(
                        "timed out waiting for {} from rank {}",
                        expect.tag.as_str(),
                        expect.src
                    ),
                });
            }
        }
    }
}

/// One entry of a worker's local event log, in program order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkerEvent {
    Received {
        tag: MessageTag,
        round: usize,
        layer: usize,
        head: usize,
        peer: usize,
    },
    Sent {
        tag: MessageTag,
        round: usize,
        layer: usize,
        head: usize,
        peer: usize,
    },
}

#[derive(Debug, Clone)]
struct SentRecord {
    tag: MessageTag,
    round: usize,
    layer: usize,
    head: usize,
    src: usize,
    dst: usize,
    elements: usize,
}

/// Per-(round, layer, head) state owned by one worker.
#[derive(Debug)]
struct Slot {
    chunk: ChunkInputs,
    intra: Option<Matrix>,
    kv_in: Option<Matrix>,
    output: Option<Matrix>,
    dout: Option<Matrix>,
    dq: Option<Matrix>,
    dk_intra: Option<Matrix>,
    dv_intra: Option<Matrix>,
    dk: Option<Matrix>,
    dv: Option<Matrix>,
}

impl Slot {
    fn new(chunk: ChunkInputs) -> Self {
        Self {
            chunk,
            intra: None,
            kv_in: None,
            output: None,
            dout: None,
            dq: None,
            dk_intra: None,
            dv_intra: None,
            dk: None,
            dv: None,
        }
    }
}

struct Worker {
    rank: usize,
    rounds: usize,
    layers: usize,
    heads: usize,
    head_dim: usize,
    slots: Vec<Slot>,
    events: Vec<WorkerEvent>,
    sent: Vec<SentRecord>,
}

impl Worker {
    fn slot_index(&self, round: usize, layer: usize, head: usize) -> usize {
        (round * self.layers + layer) * self.heads + head
    }

    /// Canonical traversal order; both ends of every edge use it, so per-edge
    /// FIFO delivery lines messages up with their expected headers.
    fn slot_coords(&self) -> Vec<(usize, usize, usize)> {
        let mut coords = Vec::with_capacity(self.slots.len());
        for round in 0..self.rounds {
            for layer in 0..self.layers {
                for head in 0..self.heads {
                    coords.push((round, layer, head));
                }
            }
        }
        coords
    }

    fn compute_intra(&mut self, decay: &DecayStructures) -> Result<(), SimError> {
        for slot in &mut self.slots {
            slot.intra = Some(chunk::intra_forward(&slot.chunk, decay)?);
        }
        Ok(())
    }

    fn ring_forward(
        &mut self,
        decay: &DecayStructures,
        topo: &Topology,
        bus: &Bus,
        blocking: bool,
    ) -> Result<(), SimError> {
        let first = topo.is_group_first(self.rank);
        let last = topo.is_group_last(self.rank);
        for (round, layer, head) in self.slot_coords() {
            let kv_prev = if first {
                Matrix::zeros(self.head_dim, self.head_dim)
            } else {
                let expect = MessageHeader {
                    src: self.rank - 1,
                    dst: self.rank,
                    tag: MessageTag::KvFwd,
                    layer,
                    head,
                };
                let msg = bus.recv(&expect, blocking)?;
                self.events.push(WorkerEvent::Received {
                    tag: MessageTag::KvFwd,
                    round,
                    layer,
                    head,
                    peer: self.rank - 1,
                });
                msg.payload
            };
            let idx = self.slot_index(round, layer, head);
            let slot = &mut self.slots[idx];
            let intra = slot.intra.as_ref().ok_or_else(|| SimError::State {
                detail: format!("rank {}: intra output missing in ring pass", self.rank),
            })?;
            let inter = chunk::inter_forward(&slot.chunk.q, &kv_prev, decay)?;
            slot.output = Some(matrix::add(intra, &inter)?);
            let kv = chunk::kv_update(&kv_prev, &slot.chunk.k, &slot.chunk.v, decay)?;
            slot.kv_in = Some(kv_prev);
            if !last {
                let dst = self.rank + 1;
                self.sent.push(SentRecord {
                    tag: MessageTag::KvFwd,
                    round,
                    layer,
                    head,
                    src: self.rank,
                    dst,
                    elements: kv.rows() * kv.cols(),
                });
                self.events.push(WorkerEvent::Sent {
                    tag: MessageTag::KvFwd,
                    round,
                    layer,
                    head,
                    peer: dst,
                });
                bus.send(Message {
                    header: MessageHeader {
                        src: self.rank,
                        dst,
                        tag: MessageTag::KvFwd,
                        layer,
                        head,
                    },
                    payload: kv,
                });
            }
        }
        Ok(())
    }

    /// Gradient parts that need no neighbour state: `dQ` (intra + cached-KV
    /// inter) and the intra parts of `dK`/`dV`.
    fn backward_local(&mut self, decay: &DecayStructures) -> Result<(), SimError> {
        for idx in 0..self.slots.len() {
            let rank = self.rank;
            let slot = &mut self.slots[idx];
            let dout = slot.dout.as_ref().ok_or_else(|| SimError::State {
                detail: format!("rank {rank}: upstream gradient not scattered"),
            })?;
            let kv_in = slot.kv_in.as_ref().ok_or_else(|| SimError::State {
                detail: format!("rank {rank}: backward before forward (no cached KV state)"),
            })?;
            let intra = chunk::intra_backward(&slot.chunk, dout, decay)?;
            let dq_inter = chunk::inter_backward_q(dout, kv_in, decay)?;
            slot.dq = Some(matrix::add(&intra.dq, &dq_inter)?);
            slot.dk_intra = Some(intra.dk);
            slot.dv_intra = Some(intra.dv);
        }
        Ok(())
    }

    fn ring_backward(
        &mut self,
        decay: &DecayStructures,
        topo: &Topology,
        bus: &Bus,
        blocking: bool,
    ) -> Result<(), SimError> {
        let first = topo.is_group_first(self.rank);
        let last = topo.is_group_last(self.rank);
        for (round, layer, head) in self.slot_coords() {
            let dkv_next = if last {
                Matrix::zeros(self.head_dim, self.head_dim)
            } else {
                let expect = MessageHeader {
                    src: self.rank + 1,
                    dst: self.rank,
                    tag: MessageTag::DkvBwd,
                    layer,
                    head,
                };
                let msg = bus.recv(&expect, blocking)?;
                self.events.push(WorkerEvent::Received {
                    tag: MessageTag::DkvBwd,
                    round,
                    layer,
                    head,
                    peer: self.rank + 1,
                });
                msg.payload
            };
            let idx = self.slot_index(round, layer, head);
            let rank = self.rank;
            let slot = &mut self.slots[idx];
            let dout = slot.dout.as_ref().ok_or_else(|| SimError::State {
                detail: format!("rank {rank}: upstream gradient not scattered"),
            })?;
            let dk_intra = slot.dk_intra.as_ref().ok_or_else(|| SimError::State {
                detail: format!("rank {rank}: local backward parts missing"),
            })?;
            let dv_intra = slot.dv_intra.as_ref().unwrap();
            slot.dk = Some(matrix::add(
                dk_intra,
                &chunk::inter_backward_k(&slot.chunk.v, &dkv_next, decay)?,
            )?);
            slot.dv = Some(matrix::add(
                dv_intra,
                &chunk::inter_backward_v(&slot.chunk.k, &dkv_next, decay)?,
            )?);
            let dkv = chunk::dkv_update(&dkv_next, &slot.chunk.q, dout, decay)?;
            if !first {
                let dst = self.rank - 1;
                self.sent.push(SentRecord {
                    tag: MessageTag::DkvBwd,
                    round,
                    layer,
                    head,
                    src: self.rank,
                    dst,
                    elements: dkv.rows() * dkv.cols(),
                });
                self.events.push(WorkerEvent::Sent {
                    tag: MessageTag::DkvBwd,
                    round,
                    layer,
                    head,
                    peer: dst,
                });
                bus.send(Message {
                    header: MessageHeader {
                        src: self.rank,
                        dst,
                        tag: MessageTag::DkvBwd,
                        layer,
                        head,
                    },
                    payload: dkv,
                });
            }
        }
        Ok(())
    }
}

/// Full-sequence `Q`, `K`, `V` for one (batch, layer), each `N x d`.
#[derive(Debug, Clone)]
pub struct LayerInputs {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub layers: Vec<LayerInputs>,
}

/// Everything a simulation needs: the distribution plan plus per-batch,
/// per-layer inputs. Layers are independent attention instances; they exist
/// so traces account per layer, exactly like the per-layer volume formulas.
#[derive(Debug, Clone)]
pub struct SimProblem {
    pub plan: DistributionPlan,
    pub heads: usize,
    pub lambda: f64,
    pub batches: Vec<BatchInputs>,
}

impl SimProblem {
    pub fn new(
        plan: DistributionPlan,
        heads: usize,
        lambda: f64,
        batches: Vec<BatchInputs>,
    ) -> Result<Self, SimError> {
        if batches.len() != plan.batch_count() {
            return Err(SimError::Config {
                detail: format!(
                    "plan expects {} batches, got {}",
                    plan.batch_count(),
                    batches.len()
                ),
            });
        }
        let layers = batches
            .first()
            .map(|b| b.layers.len())
            .ok_or_else(|| SimError::Config {
                detail: "at least one batch is required".into(),
            })?;
        if layers == 0 {
            return Err(SimError::Config {
                detail: "at least one layer is required".into(),
            });
        }
        let d = batches[0].layers[0].q.cols();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(SimError::Config {
                detail: format!("head count {heads} does not divide model dim {d}"),
            });
        }
        for (b, batch) in batches.iter().enumerate() {
            if batch.layers.len() != layers {
                return Err(SimError::Config {
                    detail: format!("batch {b} has {} layers, expected {layers}", batch.layers.len()),
                });
            }
            for (l, layer) in batch.layers.iter().enumerate() {
                for (name, m) in [("Q", &layer.q), ("K", &layer.k), ("V", &layer.v)] {
                    if m.shape() != (plan.seq_len(), d) {
                        return Err(SimError::Config {
                            detail: format!(
                                "batch {b} layer {l} {name} is {}x{}, expected {}x{}",
                                m.rows(),
                                m.cols(),
                                plan.seq_len(),
                                d
                            ),
                        });
                    }
                    if !m.is_finite() {
                        return Err(SimError::Core(lasp_core::Error::NonFinite(
                            "simulation input",
                        )));
                    }
                }
            }
        }
        Ok(Self {
            plan,
            heads,
            lambda,
            batches,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.batches[0].layers[0].q.cols()
    }

    pub fn layer_count(&self) -> usize {
        self.batches[0].layers.len()
    }
}

/// Generates a problem and matching upstream gradients from one seed.
///
/// Fixture order (the cross-implementation contract): a single splitmix64
/// stream emits, for each batch and each layer in turn, the row-major `N x d`
/// tensors `Q`, `K`, `V`, `dO`, entries uniform in `[-1, 1)`.
pub fn random_problem(
    plan: DistributionPlan,
    heads: usize,
    lambda: f64,
    layers: usize,
    d: usize,
    seed: u64,
) -> Result<(SimProblem, Vec<Vec<Matrix>>), SimError> {
    let n = plan.seq_len();
    let mut rng = SplitMix64::new(seed);
    let mut batches = Vec::with_capacity(plan.batch_count());
    let mut douts = Vec::with_capacity(plan.batch_count());
    for _ in 0..plan.batch_count() {
        let mut layer_inputs = Vec::with_capacity(layers);
        let mut layer_douts = Vec::with_capacity(layers);
        for _ in 0..layers {
            let q = rng.matrix(n, d);
            let k = rng.matrix(n, d);
            let v = rng.matrix(n, d);
            let dout = rng.matrix(n, d);
            layer_inputs.push(LayerInputs { q, k, v });
            layer_douts.push(dout);
        }
        batches.push(BatchInputs {
            layers: layer_inputs,
        });
        douts.push(layer_douts);
    }
    Ok((SimProblem::new(plan, heads, lambda, batches)?, douts))
}

/// The instantiated world: workers with scattered chunks, ready to run.
pub struct SpWorld {
    plan: DistributionPlan,
    heads: usize,
    layers: usize,
    head_dim: usize,
    mode: SchedulingMode,
    decay: DecayStructures,
    workers: Vec<Worker>,
    trace: Vec<CommRecord>,
    forward_done: bool,
    backward_done: bool,
}

impl SpWorld {
    /// Scatters the problem across workers (rows to ranks, columns to heads).
    pub fn new(problem: SimProblem, mode: SchedulingMode) -> Result<Self, SimError> {
        let SimProblem {
            plan,
            heads,
            lambda,
            batches,
        } = problem;
        let topo = plan.topology();
        let t = topo.sp_size();
        let layers = batches[0].layers.len();
        let d = batches[0].layers[0].q.cols();
        let head_dim = d / heads;
        let decay = chunk::build_decay(plan.chunk_size(), lambda)?;

        let mut pending: Vec<Vec<Option<ChunkInputs>>> = (0..topo.world_size())
            .map(|rank| {
                let rounds = plan.rounds_for_group(topo.group_id(rank));
                (0..rounds * layers * heads).map(|_| None).collect()
            })
            .collect();

        for (b, batch) in batches.iter().enumerate() {
            let group = plan.group_for_batch(b);
            let round = plan.round_for_batch(b);
            for (l, layer) in batch.layers.iter().enumerate() {
                let q_chunks = topology::scatter_sequence(&layer.q, &plan)?;
                let k_chunks = topology::scatter_sequence(&layer.k, &plan)?;
                let v_chunks = topology::scatter_sequence(&layer.v, &plan)?;
                for local in 0..t {
                    let rank = group * t + local;
                    let q_heads = topology::split_heads(&q_chunks[local], heads)?;
                    let k_heads = topology::split_heads(&k_chunks[local], heads)?;
                    let v_heads = topology::split_heads(&v_chunks[local], heads)?;
                    for (h, ((qh, kh), vh)) in q_heads
                        .into_iter()
                        .zip(k_heads)
                        .zip(v_heads)
                        .enumerate()
                    {
                        let idx = (round * layers + l) * heads + h;
                        pending[rank][idx] = Some(ChunkInputs::new(qh, kh, vh)?);
                    }
                }
            }
        }

        let workers = pending
            .into_iter()
            .enumerate()
            .map(|(rank, slots)| Worker {
                rank,
                rounds: plan.rounds_for_group(topo.group_id(rank)),
                layers,
                heads,
                head_dim,
                slots: slots
                    .into_iter()
                    .map(|c| Slot::new(c.expect("all slots are filled by the scatter")))
                    .collect(),
                events: Vec::new(),
                sent: Vec::new(),
            })
            .collect();

        Ok(Self {
            plan,
            heads,
            layers,
            head_dim,
            mode,
            decay,
            workers,
            trace: Vec::new(),
            forward_done: false,
            backward_done: false,
        })
    }

    pub fn plan(&self) -> &DistributionPlan {
        &self.plan
    }

    pub fn mode(&self) -> SchedulingMode {
        self.mode
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn layer_count(&self) -> usize {
        self.layers
    }

    pub fn decay_underflow(&self) -> bool {
        self.decay.lambda_pow_c_underflow()
    }

    /// Forward pass: eager intra phase, then the `KV` ring.
    pub fn run_forward(&mut self) -> Result<(), SimError> {
        if self.forward_done {
            return Err(SimError::State {
                detail: "forward pass already ran".into(),
            });
        }
        let bus = Bus::new();
        let topo = self.plan.topology();
        let decay = &self.decay;
        match self.mode {
            SchedulingMode::Lockstep => {
                for w in &mut self.workers {
                    w.compute_intra(decay)?;
                }
                for w in &mut self.workers {
                    w.ring_forward(decay, &topo, &bus, false)?;
                }
            }
            SchedulingMode::Concurrent => {
                run_on_threads(&mut self.workers, |w| {
                    w.compute_intra(decay)?;
                    w.ring_forward(decay, &topo, &bus, true)
                })?;
            }
        }
        self.forward_done = true;
        self.rebuild_trace();
        Ok(())
    }

    /// Backward pass over scattered upstream gradients `douts[batch][layer]`
    /// (each `N x d`): local parts first, then the reverse `dKV` ring.
    pub fn run_backward(&mut self, douts: &[Vec<Matrix>]) -> Result<(), SimError> {
        if !self.forward_done {
            return Err(SimError::State {
                detail: "backward pass requested before forward".into(),
            });
        }
        if self.backward_done {
            return Err(SimError::State {
                detail: "backward pass already ran".into(),
            });
        }
        self.scatter_douts(douts)?;
        let bus = Bus::new();
        let topo = self.plan.topology();
        let decay = &self.decay;
        match self.mode {
            SchedulingMode::Lockstep => {
                for w in &mut self.workers {
                    w.backward_local(decay)?;
                }
                for w in self.workers.iter_mut().rev() {
                    w.ring_backward(decay, &topo, &bus, false)?;
                }
            }
            SchedulingMode::Concurrent => {
                run_on_threads(&mut self.workers, |w| {
                    w.backward_local(decay)?;
                    w.ring_backward(decay, &topo, &bus, true)
                })?;
            }
        }
        self.backward_done = true;
        self.rebuild_trace();
        Ok(())
    }

    fn scatter_douts(&mut self, douts: &[Vec<Matrix>]) -> Result<(), SimError> {
        if douts.len() != self.plan.batch_count() {
            return Err(SimError::Config {
                detail: format!(
                    "expected {} upstream gradient batches, got {}",
                    self.plan.batch_count(),
                    douts.len()
                ),
            });
        }
        let t = self.plan.topology().sp_size();
        for (b, batch) in douts.iter().enumerate() {
            if batch.len() != self.layers {
                return Err(SimError::Config {
                    detail: format!(
                        "batch {b} has {} upstream layers, expected {}",
                        batch.len(),
                        self.layers
                    ),
                });
            }
            let group = self.plan.group_for_batch(b);
            let round = self.plan.round_for_batch(b);
            for (l, dout) in batch.iter().enumerate() {
                let chunks = topology::scatter_sequence(dout, &self.plan)?;
                for (local, chunk) in chunks.iter().enumerate() {
                    let rank = group * t + local;
                    let heads = topology::split_heads(chunk, self.heads)?;
                    for (h, dh) in heads.into_iter().enumerate() {
                        let idx = self.workers[rank].slot_index(round, l, h);
                        self.workers[rank].slots[idx].dout = Some(dh);
                    }
                }
            }
        }
        Ok(())
    }

    /// Canonical trace: forward before backward, then round, layer, head,
    /// group, position along the ring. Independent of scheduling mode.
    fn rebuild_trace(&mut self) {
        let t = self.plan.topology().sp_size();
        let mut keyed: Vec<(TraceKey, CommRecord)> = self
            .workers
            .iter()
            .flat_map(|w| w.sent.iter())
            .map(|s| {
                let ring_pos = match s.tag {
                    MessageTag::KvFwd => s.src % t,
                    MessageTag::DkvBwd => t - 1 - (s.src % t),
                };
                (
                    (s.tag, s.round, s.layer, s.head, s.src / t, ring_pos),
                    CommRecord {
                        step: 0,
                        src: s.src,
                        dst: s.dst,
                        tag: s.tag,
                        layer: s.layer,
                        head: s.head,
                        elements: s.elements,
                    },
                )
            })
            .collect();
        keyed.sort_by_key(|a| a.0);
        self.trace = keyed
            .into_iter()
            .enumerate()
            .map(|(step, (_, mut rec))| {
                rec.step = step;
                rec
            })
            .collect();
    }

    pub fn trace(&self) -> &[CommRecord] {
        &self.trace
    }

    pub fn events(&self, rank: usize) -> &[WorkerEvent] {
        &self.workers[rank].events
    }

    /// One rank's `C x d_h` output block.
    pub fn rank_output(
        &self,
        rank: usize,
        round: usize,
        layer: usize,
        head: usize,
    ) -> Result<&Matrix, SimError> {
        let w = &self.workers[rank];
        w.slots[w.slot_index(round, layer, head)]
            .output
            .as_ref()
            .ok_or_else(|| SimError::State {
                detail: format!("rank {rank}: no output yet"),
            })
    }

    fn assemble(
        &self,
        batch: usize,
        layer: usize,
        pick: impl Fn(&Slot) -> Option<&Matrix>,
        what: &str,
    ) -> Result<Matrix, SimError> {
        if batch >= self.plan.batch_count() || layer >= self.layers {
            return Err(SimError::Config {
                detail: format!("no (batch {batch}, layer {layer}) in this run"),
            });
        }
        let t = self.plan.topology().sp_size();
        let group = self.plan.group_for_batch(batch);
        let round = self.plan.round_for_batch(batch);
        let mut rank_blocks = Vec::with_capacity(t);
        for local in 0..t {
            let w = &self.workers[group * t + local];
            let heads: Vec<Matrix> = (0..self.heads)
                .map(|h| {
                    pick(&w.slots[w.slot_index(round, layer, h)])
                        .cloned()
                        .ok_or_else(|| SimError::State {
                            detail: format!("rank {}: {what} not available", w.rank),
                        })
                })
                .collect::<Result<_, _>>()?;
            rank_blocks.push(matrix::concat_cols(&heads)?);
        }
        Ok(matrix::concat_rows(&rank_blocks)?)
    }

    /// Concatenated `N x d` output of one (batch, layer).
    pub fn output(&self, batch: usize, layer: usize) -> Result<Matrix, SimError> {
        self.assemble(batch, layer, |s| s.output.as_ref(), "forward output")
    }

    /// Concatenated `N x d` gradients of one (batch, layer).
    pub fn gradients(&self, batch: usize, layer: usize) -> Result<Grads, SimError> {
        Ok(Grads {
            dq: self.assemble(batch, layer, |s| s.dq.as_ref(), "dQ")?,
            dk: self.assemble(batch, layer, |s| s.dk.as_ref(), "dK")?,
            dv: self.assemble(batch, layer, |s| s.dv.as_ref(), "dV")?,
        })
    }
}

/// Runs one closure per worker on its own thread and joins them all.
fn run_on_threads(
    workers: &mut [Worker],
    body: impl Fn(&mut Worker) -> Result<(), SimError> + Sync,
) -> Result<(), SimError> {
    let body = &body;
    std::thread::scope(|scope| {
        let handles: Vec<_> = workers
            .iter_mut()
            .map(|w| scope.spawn(move || body(w)))
            .collect();
        let mut result = Ok(());
        for handle in handles {
            match handle.join() {
                Ok(r) => {
                    if result.is_ok() {
                        result = r;
                    }
                }
                Err(_) => {
                    if result.is_ok() {
                        result = Err(SimError::State {
                            detail: "worker thread panicked".into(),
                        });
                    }
                }
            }
        }
        result
    })
}

/// Batch-level gradient sync across sequence-parallel groups: the elementwise
/// mean, as a data-parallel all-reduce would produce on every member.
pub fn allreduce_mean_gradients(per_group: &[Grads]) -> Result<Grads, SimError> {
    let first = per_group.first().ok_or_else(|| SimError::Config {
        detail: "no gradient sets to reduce".into(),
    })?;
    let mut dq = first.dq.clone();
    let mut dk = first.dk.clone();
    let mut dv = first.dv.clone();
    for g in &per_group[1..] {
        dq = matrix::add(&dq, &g.dq)?;
        dk = matrix::add(&dk, &g.dk)?;
        dv = matrix::add(&dv, &g.dv)?;
    }
    let inv = 1.0 / per_group.len() as f64;
    Ok(Grads {
        dq: matrix::scale(&dq, inv),
        dk: matrix::scale(&dk, inv),
        dv: matrix::scale(&dv, inv),
    })
}
