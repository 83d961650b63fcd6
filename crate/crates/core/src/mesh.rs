//! Barrier-synchronized simulation of a mesh of chips.
//!
//! Query spikes enter each column at layer 0 and advance one layer per
//! timestep, so a chip at layer `ℓ` sees input event `(channel, t)` at
//! `t + ℓ`. Every mesh timestep steps all chips concurrently and joins before
//! the next one starts. Firings become [`MatchEvent`]s whose timestamps are
//! normalized by the chip's layer, then travel along the column through one
//! aggregation node per layer, again one layer per timestep. A node that has
//! forwarded `k` matches (finishing the tie group it is in) stops and tells
//! the nodes before it to stop too.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::EncodedKey;
use crate::error::{Error, Result};
use crate::neurocore::{tune_threshold_excluding, ChipStore, Threshold};
use crate::spikecodec::{CodecParams, SpikeEvent, SpikePattern};

/// Layout of the simulated mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshTopology {
    pub n_columns: usize,
    pub chips_per_column: usize,
    /// Chips per wavefront layer inside a column.
    pub column_width: usize,
}

impl Default for MeshTopology {
    fn default() -> Self {
        MeshTopology { n_columns: 3, chips_per_column: 256, column_width: 4 }
    }
}

impl MeshTopology {
    pub fn new(n_columns: usize, chips_per_column: usize, column_width: usize) -> Result<Self> {
        let t = MeshTopology { n_columns, chips_per_column, column_width };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_columns == 0 || self.chips_per_column == 0 || self.column_width == 0 {
            return Err(Error::Config("mesh dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn n_chips(&self) -> usize {
        self.n_columns * self.chips_per_column
    }

    pub fn column_of(&self, position: usize) -> usize {
        position / self.chips_per_column
    }

    /// Injection delay of the chip at `position`, in timesteps.
    pub fn layer_of(&self, position: usize) -> usize {
        (position % self.chips_per_column) / self.column_width
    }

    pub fn layers_per_column(&self) -> usize {
        self.chips_per_column.div_ceil(self.column_width)
    }

    /// Mesh position of the `index`-th programmed chip. Chips are dealt
    /// round-robin across columns so the columns fill evenly.
    pub fn position_of(&self, index: usize) -> usize {
        let column = index % self.n_columns;
        let within = index / self.n_columns;
        column * self.chips_per_column + within
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepClass {
    /// Query spikes are still being delivered somewhere in the mesh.
    Input,
    /// Only integration and output traffic.
    Integration,
}

/// First-order cost of one barrier-synchronized timestep, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub input_us: f64,
    pub integration_us: f64,
    /// Surcharge per delivered input spike.
    pub per_spike_in_us: f64,
    /// Surcharge per output (match) spike.
    pub per_spike_out_us: f64,
}

impl CostModel {
    pub const LARGE_US: f64 = 13.0;
    pub const SMALL_US: f64 = 5.8;

    pub fn flat(base_us: f64) -> Self {
        CostModel { input_us: base_us, integration_us: base_us, per_spike_in_us: 0.0, per_spike_out_us: 0.0 }
    }

    /// 13 µs per timestep for a million or more patterns, 5.8 µs below.
    pub fn for_dataset_size(m: usize) -> Self {
        Self::flat(if m >= 1_000_000 { Self::LARGE_US } else { Self::SMALL_US })
    }

    pub fn base(&self, class: TimestepClass) -> f64 {
        match class {
            TimestepClass::Input => self.input_us,
            TimestepClass::Integration => self.integration_us,
        }
    }

    pub fn duration(&self, class: TimestepClass, spikes_in: u64, spikes_out: u64) -> f64 {
        self.base(class) + spikes_in as f64 * self.per_spike_in_us + spikes_out as f64 * self.per_spike_out_us
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self::flat(Self::SMALL_US)
    }
}

/// A pattern-match neuron that fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatchEvent {
    pub global_id: u64,
    pub raw_timestep: u32,
    pub chip: u32,
    /// `raw_timestep` minus the chip's injection delay.
    pub normalized_timestep: u32,
}

impl MatchEvent {
    fn key(&self) -> (u32, u64) {
        (self.normalized_timestep, self.global_id)
    }
}

/// Matches ordered by `(normalized_timestep, global_id)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchList {
    events: Vec<MatchEvent>,
}

impl MatchList {
    /// Sorts `events` into a list (no cut).
    pub fn from_events(mut events: Vec<MatchEvent>) -> Self {
        events.sort_by_key(MatchEvent::key);
        MatchList { events }
    }

    pub fn events(&self) -> &[MatchEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.events.iter().map(|e| e.global_id).collect()
    }

    pub fn into_events(self) -> Vec<MatchEvent> {
        self.events
    }

    /// Keeps the first `k` events plus any that tie with the `k`-th.
    fn cut(&mut self, k: usize) {
        if k == 0 {
            self.events.clear();
        } else if self.events.len() > k {
            let boundary = self.events[k - 1].normalized_timestep;
            let end = self.events.partition_point(|e| e.normalized_timestep <= boundary);
            self.events.truncate(end);
        }
    }
}

/// Input schedule of one chip after wavefront delay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChipSchedule {
    pub delay: u32,
    /// Sorted by timestep.
    pub events: Vec<SpikeEvent>,
}

/// Per-chip input schedules: each event arrives `layer_of(chip)` timesteps
/// late. `positions[i]` is the mesh position of chip `i`.
pub fn distribute(pattern: &SpikePattern, topology: &MeshTopology, positions: &[usize]) -> Vec<ChipSchedule> {
    positions
        .iter()
        .map(|&p| {
            let delay = topology.layer_of(p) as u32;
            ChipSchedule {
                delay,
                events: pattern
                    .events()
                    .iter()
                    .map(|e| SpikeEvent { timestep: e.timestep + delay, channel: e.channel })
                    .collect(),
            }
        })
        .collect()
}

/// Sorts events by `(normalized_timestep, global_id)` and keeps the first `k`
/// together with everything tied with the `k`-th.
pub fn aggregate(events: &[MatchEvent], k: usize) -> MatchList {
    let mut list = MatchList::from_events(events.to_vec());
    list.cut(k);
    list
}

/// k-way merge of per-column lists with the same tie-aware cut.
pub fn merge_columns(lists: &[MatchList], k: usize) -> MatchList {
    let mut heap = BinaryHeap::new();
    for (l, list) in lists.iter().enumerate() {
        if let Some(e) = list.events.first() {
            heap.push(Reverse((e.key(), l, 0usize)));
        }
    }
    let mut out: Vec<MatchEvent> = Vec::with_capacity(lists.iter().map(MatchList::len).sum());
    while let Some(Reverse((_, l, i))) = heap.pop() {
        let e = lists[l].events[i];
        if k > 0 && out.len() >= k && e.normalized_timestep > out[k - 1].normalized_timestep {
            break;
        }
        out.push(e);
        if let Some(next) = lists[l].events.get(i + 1) {
            heap.push(Reverse((next.key(), l, i + 1)));
        }
    }
    debug_assert!(
        {
            let mut ids: Vec<u64> = out.iter().map(|e| e.global_id).collect();
            ids.sort_unstable();
            ids.windows(2).all(|w| w[0] != w[1])
        },
        "global ids repeat across columns"
    );
    let mut list = MatchList { events: out };
    list.cut(k);
    list
}

/// One executed mesh timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: u32,
    pub spikes_in: u64,
    pub spikes_out: u64,
    pub modeled_us: f64,
    pub class: TimestepClass,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimestepTrace {
    pub rows: Vec<TraceRow>,
}

impl TimestepTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn spikes_in(&self) -> u64 {
        self.rows.iter().map(|r| r.spikes_in).sum()
    }

    pub fn spikes_out(&self) -> u64 {
        self.rows.iter().map(|r| r.spikes_out).sum()
    }

    pub fn modeled_us(&self) -> f64 {
        self.rows.iter().map(|r| r.modeled_us).sum()
    }

    /// JSON lines: `{"t":..,"spikes_in":..,"spikes_out":..,"modeled_us":..}`.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in &self.rows {
            let line = serde_json::json!({
                "t": r.t,
                "spikes_in": r.spikes_in,
                "spikes_out": r.spikes_out,
                "modeled_us": r.modeled_us,
            });
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Total modeled duration of a trace under `cost`, in microseconds.
pub fn estimate_latency(trace: &TimestepTrace, cost: &CostModel) -> f64 {
    trace.rows.iter().map(|r| cost.duration(r.class, r.spikes_in, r.spikes_out)).sum()
}

/// Aggregation node for one layer of one column.
#[derive(Debug, Clone, Default)]
struct AggregatorNode {
    /// Events forwarded by the previous layer, delivered next timestep.
    inbound: Vec<MatchEvent>,
    sent: usize,
    stopped: bool,
}

/// Wavefront aggregation state for all columns.
#[derive(Debug, Clone)]
pub struct AggregatorState {
    k: usize,
    /// `nodes[column][layer]`.
    nodes: Vec<Vec<AggregatorNode>>,
    /// What each column's last node has sent to the host.
    delivered: Vec<Vec<MatchEvent>>,
}

impl AggregatorState {
    pub fn new(topology: &MeshTopology, k: usize) -> Self {
        let layers = topology.layers_per_column();
        AggregatorState {
            k,
            nodes: vec![vec![AggregatorNode::default(); layers]; topology.n_columns],
            delivered: vec![Vec::new(); topology.n_columns],
        }
    }

    pub fn column_done(&self, column: usize) -> bool {
        self.nodes[column].last().is_some_and(|n| n.stopped)
    }

    pub fn all_done(&self) -> bool {
        (0..self.nodes.len()).all(|c| self.column_done(c))
    }

    pub fn sent_count(&self, column: usize, layer: usize) -> usize {
        self.nodes[column][layer].sent
    }

    /// Advances every node by one hop. `local[column][layer]` holds the match
    /// events produced this timestep by that layer's chips.
    fn advance(&mut self, mut local: Vec<Vec<Vec<MatchEvent>>>) {
        let k = self.k;
        for (column, nodes) in self.nodes.iter_mut().enumerate() {
            let mut carry: Vec<MatchEvent> = Vec::new();
            let last = nodes.len() - 1;
            for layer in 0..nodes.len() {
                let mut inbox = std::mem::take(&mut nodes[layer].inbound);
                inbox.append(&mut local[column][layer]);
                // Whatever this node forwards reaches the next layer one
                // timestep later.
                if layer > 0 {
                    nodes[layer].inbound = std::mem::take(&mut carry);
                }
                let node = &mut nodes[layer];
                if node.stopped || inbox.is_empty() {
                    continue;
                }
                inbox.sort_by_key(MatchEvent::key);
                debug_assert!(inbox.windows(2).all(|w| w[0].normalized_timestep == w[1].normalized_timestep));
                node.sent += inbox.len();
                let stop = node.sent >= k;
                if layer == last {
                    self.delivered[column].extend_from_slice(&inbox);
                } else {
                    carry = inbox;
                }
                if stop {
                    for n in nodes[..=layer].iter_mut() {
                        n.stopped = true;
                    }
                }
            }
        }
    }

    fn into_lists(self) -> Vec<MatchList> {
        self.delivered.into_iter().map(|events| MatchList { events }).collect()
    }
}

/// Probe notifications for observing barrier ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeEvent {
    StepBegin { chip: usize, t: u32 },
    StepEnd { chip: usize, t: u32 },
}

pub type Probe = Arc<dyn Fn(ProbeEvent) + Send + Sync>;

/// Outcome of one query on the mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRun {
    pub columns: Vec<MatchList>,
    pub merged: MatchList,
    pub trace: TimestepTrace,
    pub k: usize,
}

impl QueryRun {
    /// Number of missing matches, if fewer than `k` were found.
    pub fn shortfall(&self) -> Option<usize> {
        (self.merged.len() < self.k).then(|| self.k - self.merged.len())
    }
}

/// Programmed chips placed on a topology.
pub struct Mesh {
    topology: MeshTopology,
    chips: Vec<ChipStore>,
    positions: Vec<usize>,
    codec: CodecParams,
    cost: CostModel,
    pool: Arc<rayon::ThreadPool>,
    probe: Option<Probe>,
}

impl std::fmt::Debug for Mesh {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mesh")
            .field("topology", &self.topology)
            .field("chips", &self.chips.len())
            .field("codec", &self.codec)
            .field("cost", &self.cost)
            .finish()
    }
}

impl Mesh {
    /// Places `chips` on the topology (see [`MeshTopology::position_of`]).
    /// `workers` is the number of threads stepping chips; 0 picks a default.
    pub fn new(
        topology: MeshTopology,
        chips: Vec<ChipStore>,
        codec: CodecParams,
        cost: CostModel,
        workers: usize,
    ) -> Result<Self> {
        topology.validate()?;
        codec.validate()?;
        if chips.len() > topology.n_chips() {
            let per_chip = chips.first().map(ChipStore::capacity).unwrap_or(0);
            return Err(Error::CapacityExceeded {
                needed: chips.iter().map(ChipStore::occupied).sum(),
                available: topology.n_chips() * per_chip,
            });
        }
        let positions = (0..chips.len()).map(|i| topology.position_of(i)).collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Mesh { topology, chips, positions, codec, cost, pool: Arc::new(pool), probe: None })
    }

    pub fn topology(&self) -> &MeshTopology {
        &self.topology
    }

    pub fn codec(&self) -> &CodecParams {
        &self.codec
    }

    pub fn cost(&self) -> &CostModel {
        &self.cost
    }

    pub fn set_cost(&mut self, cost: CostModel) {
        self.cost = cost;
    }

    pub fn chips(&self) -> &[ChipStore] {
        &self.chips
    }

    pub fn chip_mut(&mut self, index: usize) -> &mut ChipStore {
        &mut self.chips[index]
    }

    pub fn push_chip(&mut self, chip: ChipStore) -> Result<usize> {
        if self.chips.len() == self.topology.n_chips() {
            return Err(Error::CapacityExceeded { needed: self.chips.len() + 1, available: self.topology.n_chips() });
        }
        let index = self.chips.len();
        self.positions.push(self.topology.position_of(index));
        self.chips.push(chip);
        Ok(index)
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn layer_of_chip(&self, chip: usize) -> usize {
        self.topology.layer_of(self.positions[chip])
    }

    pub fn set_probe(&mut self, probe: Option<Probe>) {
        self.probe = probe;
    }

    /// Sets the same scale-free threshold on every chip.
    pub fn set_threshold(&mut self, value: f64) {
        for chip in &mut self.chips {
            chip.set_theta_v(crate::neurocore::chip_threshold(value, chip.scale()));
        }
    }

    /// Calibrates `theta_v` on all chips (see [`tune_threshold`]).
    pub fn tune_threshold(&mut self, keys: &[EncodedKey], target: u32) -> Result<Threshold> {
        self.tune_threshold_excluding(keys, &[], target)
    }

    /// Calibrates with each key's own stored neuron left out (see
    /// [`tune_threshold_excluding`]).
    pub fn tune_threshold_excluding(
        &mut self,
        keys: &[EncodedKey],
        exclude: &[Option<u64>],
        target: u32,
    ) -> Result<Threshold> {
        let codec = self.codec;
        tune_threshold_excluding(&mut self.chips, keys, exclude, &codec, target)
    }

    /// Runs one query for at most `t_max` mesh timesteps and resets every chip
    /// afterwards.
    pub fn run_query(&mut self, pattern: &SpikePattern, k: usize, t_max: u32) -> Result<QueryRun> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let schedules = distribute(pattern, &self.topology, &self.positions);
        let input_end = schedules.iter().filter_map(|s| s.events.last().map(|e| e.timestep)).max();
        let columns_of: Vec<usize> = self.positions.iter().map(|&p| self.topology.column_of(p)).collect();
        let layers_of: Vec<usize> = self.positions.iter().map(|&p| self.topology.layer_of(p)).collect();
        let mut cursors = vec![0usize; self.chips.len()];
        let mut agg = AggregatorState::new(&self.topology, k);
        let mut trace = TimestepTrace::default();
        let n_layers = self.topology.layers_per_column();

        for t in 0..t_max {
            // Input deliveries for this timestep, per chip.
            let mut spikes_in = 0u64;
            let incoming: Vec<Vec<u32>> = schedules
                .iter()
                .zip(cursors.iter_mut())
                .map(|(s, cur)| {
                    let start = *cur;
                    while *cur < s.events.len() && s.events[*cur].timestep == t {
                        *cur += 1;
                    }
                    spikes_in += (*cur - start) as u64;
                    s.events[start..*cur].iter().map(|e| e.channel).collect()
                })
                .collect();

            let probe = self.probe.clone();
            let fired: Vec<Vec<u32>> = self.pool.install(|| {
                self.chips
                    .par_iter_mut()
                    .zip(incoming.par_iter())
                    .enumerate()
                    .map(|(c, (chip, inc))| {
                        if let Some(p) = &probe {
                            p(ProbeEvent::StepBegin { chip: c, t });
                        }
                        let out = chip.step(inc);
                        if let Some(p) = &probe {
                            p(ProbeEvent::StepEnd { chip: c, t });
                        }
                        out
                    })
                    .collect()
            });

            // Past the barrier: collect counters in chip order.
            let raw = t + 1;
            let mut local = vec![vec![Vec::new(); n_layers]; self.topology.n_columns];
            let mut spikes_out = 0u64;
            for (c, slots) in fired.into_iter().enumerate() {
                let layer = layers_of[c];
                spikes_out += slots.len() as u64;
                let ids = self.chips[c].global_ids();
                for s in slots {
                    local[columns_of[c]][layer].push(MatchEvent {
                        global_id: ids[s as usize],
                        raw_timestep: raw,
                        chip: c as u32,
                        normalized_timestep: raw - layer as u32,
                    });
                }
            }
            agg.advance(local);

            let class =
                if input_end.is_some_and(|end| t <= end) { TimestepClass::Input } else { TimestepClass::Integration };
            trace.rows.push(TraceRow {
                t,
                spikes_in,
                spikes_out,
                modeled_us: self.cost.duration(class, spikes_in, spikes_out),
                class,
            });
            if agg.all_done() {
                break;
            }
        }

        for chip in &mut self.chips {
            chip.reset();
        }
        let columns = agg.into_lists();
        let merged = merge_columns(&columns, k);
        Ok(QueryRun { columns, merged, trace, k })
    }
}
