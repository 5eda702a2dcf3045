//! Time-stepped execution of all partitions against a shared bandwidth
//! budget.
//!
//! Each partition walks its layer sequence `passes` times. Within a layer,
//! bytes are consumed in proportion to flops, so a partition running at
//! compute rate `C` on a layer with `F` flops and `B` bytes asks for `C·B/F`
//! bytes/s. Every step the demands are arbitrated max-min fairly against the
//! peak bandwidth and each partition advances at the rate its grant allows.
//!
//! A partition that finishes a layer part-way through a step carries the rest
//! of the step into the following layers. Those carried segments run against
//! the bandwidth the step has not used yet (again split max-min fairly), so a
//! recorded sample can never exceed the peak and an unconstrained partition
//! loses no time at layer boundaries.
//!
//! Stagger offsets are applied as phase: a partition with offset `o` starts at
//! time zero at the point of its pass that a standalone partition reaches
//! after `o` seconds, and wraps around so it still performs exactly `passes`
//! full passes of work.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::machine::{check_capacity, partition_compute, MachineConfig, PartitionPlan, Stagger};
use crate::traffic::{pass_traffic, LayerTraffic, ReusePolicy};
use crate::workload::CnnModel;

/// Max-min fair (water-filling) split of `peak` among `demands`.
///
/// Demands are served smallest first; once the remaining capacity divided
/// evenly among the unserved participants falls below the next demand, every
/// unserved participant gets that even share.
pub fn allocate_bandwidth(demands: &[f64], peak: f64) -> Vec<f64> {
    let total: f64 = demands.iter().sum();
    if total <= peak {
        return demands.to_vec();
    }
    let mut order: Vec<usize> = (0..demands.len()).collect();
    order.sort_by(|&a, &b| demands[a].total_cmp(&demands[b]));

    let mut alloc = vec![0.0; demands.len()];
    let mut remaining = peak;
    for (k, &i) in order.iter().enumerate() {
        let level = remaining / (order.len() - k) as f64;
        if demands[i] <= level {
            alloc[i] = demands[i];
            remaining -= demands[i];
        } else {
            for &j in &order[k..] {
                alloc[j] = level;
            }
            break;
        }
    }
    alloc
}

/// Start offsets in seconds for each partition of `plan`.
pub fn stagger_offsets(plan: &PartitionPlan, pass_time_estimate: f64) -> Vec<f64> {
    let n = plan.n_partitions as usize;
    match plan.stagger {
        Stagger::None => vec![0.0; n],
        Stagger::Uniform => (0..n).map(|i| i as f64 / n as f64 * pass_time_estimate).collect(),
        Stagger::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.gen_range(0.0..pass_time_estimate)).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Fixed step in seconds; `None` derives it from the pass time estimate.
    pub dt: Option<f64>,
    /// Lower bound on the number of steps an automatically sized run takes.
    pub min_steps: u64,
    /// Keep the per-partition layer timeline alongside the bandwidth samples.
    pub record_trace: bool,
    pub workspace_factor: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: None,
            min_steps: 10_000,
            record_trace: false,
            workspace_factor: crate::machine::DEFAULT_WORKSPACE_FACTOR,
        }
    }
}

/// Auto step: 1/2000 of a pass, shrunk until a full run spans `min_steps`.
pub fn auto_dt(pass_time_estimate: f64, passes: u64, min_steps: u64) -> f64 {
    let per_pass = pass_time_estimate / 2000.0;
    let per_run = passes as f64 * pass_time_estimate / min_steps.max(1) as f64;
    per_pass.min(per_run)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionState {
    pub partition_id: usize,
    /// Global layer counter: `pass_index * n_layers + layer_index`.
    pub cursor: u64,
    pub fraction_done: f64,
    end_cursor: u64,
    end_fraction: f64,
    pub start_offset: f64,
    pub finished: bool,
    pub finish_time: f64,
}

impl PartitionState {
    pub fn layer_index(&self, n_layers: usize) -> usize {
        (self.cursor % n_layers as u64) as usize
    }

    pub fn pass_index(&self, n_layers: usize) -> u64 {
        self.cursor / n_layers as u64
    }

    fn limit(&self) -> f64 {
        if self.cursor == self.end_cursor {
            self.end_fraction
        } else {
            1.0
        }
    }

    fn complete_layer(&mut self) {
        if self.cursor == self.end_cursor {
            // the partial layer the partition started in
            self.fraction_done = self.end_fraction;
            self.finished = true;
            return;
        }
        self.cursor += 1;
        self.fraction_done = 0.0;
        if self.cursor == self.end_cursor && self.end_fraction == 0.0 {
            self.finished = true;
        }
    }
}

/// Everything the engine needs, independent of how the traffic was derived.
#[derive(Debug, Clone)]
pub struct Workload<'a> {
    pub layers: &'a [LayerTraffic],
    pub passes: u64,
    pub n_partitions: usize,
    /// ops/s of one partition
    pub partition_compute: f64,
    /// bytes/s
    pub peak_bw: f64,
    pub stagger: Stagger,
}

impl Workload<'_> {
    /// Standalone time of each layer for one partition holding a fair
    /// `1/n` share of the peak bandwidth.
    pub fn layer_time_estimates(&self) -> Vec<f64> {
        let share = self.peak_bw / self.n_partitions as f64;
        self.layers
            .iter()
            .map(|l| {
                let compute = l.flops_total as f64 / self.partition_compute;
                let memory = l.bytes_total as f64 / share;
                compute.max(memory)
            })
            .collect()
    }

    pub fn pass_time_estimate(&self) -> f64 {
        self.layer_time_estimates().iter().sum()
    }

    /// Time to run every pass on compute alone.
    pub fn pure_compute_time(&self) -> f64 {
        let per_pass: f64 = self
            .layers
            .iter()
            .map(|l| l.flops_total as f64 / self.partition_compute)
            .sum();
        per_pass * self.passes as f64
    }

    pub fn total_bytes(&self) -> f64 {
        let per_pass: u64 = self.layers.iter().map(|l| l.bytes_total).sum();
        (per_pass * self.passes * self.n_partitions as u64) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub dt: f64,
    pub n_partitions: usize,
    pub n_layers: usize,
    /// Aggregate bytes/s granted in each step.
    pub aggregate_bw: Vec<f64>,
    /// Row-major `[step][partition]` global layer counters, `-1` once a
    /// partition has finished. Empty unless the trace was recorded.
    pub layer_timeline: Vec<i64>,
    pub makespan: f64,
    pub total_bytes: f64,
    pub total_flops: f64,
    pub finish_times: Vec<f64>,
    pub start_offsets: Vec<f64>,
}

impl SimTrace {
    pub fn steps(&self) -> usize {
        self.aggregate_bw.len()
    }

    pub fn layers_at(&self, step: usize) -> Option<&[i64]> {
        let n = self.n_partitions;
        self.layer_timeline.get(step * n..(step + 1) * n)
    }

    /// Writes the trace CSV. Requires a recorded layer timeline.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "t,aggregate_bw")?;
        for p in 0..self.n_partitions {
            write!(out, ",layer_p{p}")?;
        }
        writeln!(out)?;
        for (step, bw) in self.aggregate_bw.iter().enumerate() {
            write!(out, "{:.9},{}", step as f64 * self.dt, bw)?;
            if let Some(layers) = self.layers_at(step) {
                for l in layers {
                    write!(out, ",{l}")?;
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// One row of a trace CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub aggregate_bw: f64,
    pub layers: Vec<i64>,
}

pub fn read_trace_csv<R: BufRead>(reader: R) -> Result<Vec<TraceRow>> {
    let err = |line: usize, msg: String| Error::Parse {
        source_name: "trace".into(),
        line,
        msg,
    };
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| err(1, "missing header".into()))??;
    if !header.starts_with("t,aggregate_bw") {
        return Err(err(1, format!("unexpected header `{header}`")));
    }
    let width = header.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(err(lineno, format!("expected {width} columns")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(lineno, format!("bad number `{s}`")));
        let layers = fields[2..]
            .iter()
            .map(|s| s.parse::<i64>().map_err(|_| err(lineno, format!("bad layer `{s}`"))))
            .collect::<Result<_>>()?;
        rows.push(TraceRow {
            t: num(fields[0])?,
            aggregate_bw: num(fields[1])?,
            layers,
        });
    }
    Ok(rows)
}

/// Maps a time offset onto a starting position (layer, fraction) within a
/// pass whose layers take `layer_times` seconds each.
fn start_position(layer_times: &[f64], offset: f64) -> (u64, f64) {
    let mut elapsed = 0.0;
    for (i, &t) in layer_times.iter().enumerate() {
        if offset < elapsed + t {
            let frac = ((offset - elapsed) / t).clamp(0.0, 1.0);
            return if frac < 1.0 {
                (i as u64, frac)
            } else {
                (i as u64 + 1, 0.0)
            };
        }
        elapsed += t;
    }
    (0, 0.0)
}

struct Segment {
    used: f64,
    progress: f64,
    completed: bool,
}

/// Advances `state` on its current layer for at most `tau` seconds, limited
/// to compute rate `compute` and bandwidth `bw`.
fn run_segment(state: &mut PartitionState, layer: &LayerTraffic, compute: f64, bw: f64, tau: f64) -> Segment {
    let f = layer.flops_total as f64;
    let b = layer.bytes_total as f64;
    let rate = if b == 0.0 { compute } else { compute.min(bw * f / b) };
    let remaining = (state.limit() - state.fraction_done).max(0.0);
    if rate <= 0.0 {
        return Segment {
            used: tau,
            progress: 0.0,
            completed: remaining == 0.0,
        };
    }
    let needed = remaining * f / rate;
    if needed <= tau {
        Segment {
            used: needed,
            progress: remaining,
            completed: true,
        }
    } else {
        let progress = rate * tau / f;
        state.fraction_done += progress;
        Segment {
            used: tau,
            progress,
            completed: false,
        }
    }
}

/// Runs the step loop for an already derived workload.
pub fn simulate_workload(work: &Workload<'_>, sim: &SimConfig) -> Result<SimTrace> {
    let n_layers = work.layers.len();
    let n = work.n_partitions;
    if n_layers == 0 || n == 0 || work.passes == 0 {
        return Err(Error::InvalidPlan("nothing to simulate".into()));
    }
    let positive = |x: f64| x > 0.0 && x.is_finite();
    if !positive(work.peak_bw) || !positive(work.partition_compute) {
        return Err(Error::InvalidMachine(
            "compute rate and bandwidth must be positive".into(),
        ));
    }
    let layer_times = work.layer_time_estimates();
    let pass_est: f64 = layer_times.iter().sum();
    let dt = match sim.dt {
        Some(dt) => dt,
        None => auto_dt(pass_est, work.passes, sim.min_steps),
    };
    if !positive(dt) {
        return Err(Error::InvalidTimeStep(dt));
    }

    let offsets = stagger_offsets(
        &PartitionPlan::new(n as u64, n as u64, work.passes, work.stagger),
        pass_est,
    );
    let work_units = work.passes * n_layers as u64;
    let mut states: Vec<PartitionState> = offsets
        .iter()
        .enumerate()
        .map(|(id, &offset)| {
            let (cursor, frac) = start_position(&layer_times, offset);
            PartitionState {
                partition_id: id,
                cursor,
                fraction_done: frac,
                end_cursor: cursor + work_units,
                end_fraction: frac,
                start_offset: offset,
                finished: false,
                finish_time: 0.0,
            }
        })
        .collect();

    let compute = work.partition_compute;
    let peak = work.peak_bw;
    let step_budget = peak * dt;
    let transitions = (work_units + 1) as f64;
    let max_steps = ((4.0 * work.passes as f64 * pass_est + 2.0 * transitions * dt) / dt) as u64 + 1_000;

    let mut aggregate_bw = Vec::new();
    let mut timeline = Vec::new();
    let mut total_bytes = 0.0;
    let mut total_flops = 0.0;
    let mut demands = vec![0.0; n];
    let mut surplus = vec![0.0; n];
    let mut step: u64 = 0;

    while states.iter().any(|s| !s.finished) {
        if step >= max_steps {
            return Err(Error::StepLimit(max_steps));
        }
        let t = step as f64 * dt;
        if sim.record_trace {
            timeline.extend(states.iter().map(|s| if s.finished { -1 } else { s.cursor as i64 }));
        }

        for (d, s) in demands.iter_mut().zip(&states) {
            *d = if s.finished {
                0.0
            } else {
                let l = &work.layers[s.layer_index(n_layers)];
                if l.bytes_total == 0 {
                    0.0
                } else {
                    compute * l.bytes_total as f64 / l.flops_total as f64
                }
            };
        }
        let grants = allocate_bandwidth(&demands, peak);

        let mut step_bytes = 0.0;
        let mut consume =
            |s: &mut PartitionState, layer: &LayerTraffic, seg: &Segment, clock: f64, step_bytes: &mut f64| {
                *step_bytes += seg.progress * layer.bytes_total as f64;
                total_flops += seg.progress * layer.flops_total as f64;
                if seg.completed {
                    s.complete_layer();
                    if s.finished {
                        s.finish_time = clock;
                    }
                }
            };

        for (i, s) in states.iter_mut().enumerate() {
            surplus[i] = 0.0;
            if s.finished {
                continue;
            }
            let layer = &work.layers[s.layer_index(n_layers)];
            let seg = run_segment(s, layer, compute, grants[i], dt);
            consume(s, layer, &seg, t + seg.used, &mut step_bytes);
            if seg.completed && !s.finished {
                surplus[i] = dt - seg.used;
            }
        }

        // carry leftover step time into following layers
        let mut spill_demand = vec![0.0; n];
        loop {
            let spilling: Vec<usize> = (0..n).filter(|&i| !states[i].finished && surplus[i] > 0.0).collect();
            if spilling.is_empty() {
                break;
            }
            spill_demand.iter_mut().for_each(|d| *d = 0.0);
            for &i in &spilling {
                let l = &work.layers[states[i].layer_index(n_layers)];
                if l.bytes_total > 0 {
                    spill_demand[i] = compute * surplus[i] * l.bytes_total as f64 / l.flops_total as f64;
                }
            }
            let leftover = (step_budget - step_bytes).max(0.0);
            let spill_grants = allocate_bandwidth(&spill_demand, leftover);
            for &i in &spilling {
                let s = &mut states[i];
                let layer = &work.layers[s.layer_index(n_layers)];
                let bw = spill_grants[i] / surplus[i];
                let seg = run_segment(s, layer, compute, bw, surplus[i]);
                let clock = t + dt - surplus[i] + seg.used;
                consume(s, layer, &seg, clock, &mut step_bytes);
                surplus[i] = if seg.completed && !s.finished {
                    surplus[i] - seg.used
                } else {
                    0.0
                };
            }
        }

        total_bytes += step_bytes;
        aggregate_bw.push(step_bytes / dt);
        step += 1;
    }

    let finish_times: Vec<f64> = states.iter().map(|s| s.finish_time).collect();
    let makespan = finish_times.iter().copied().fold(0.0, f64::max);
    Ok(SimTrace {
        dt,
        n_partitions: n,
        n_layers,
        aggregate_bw,
        layer_timeline: timeline,
        makespan,
        total_bytes,
        total_flops,
        finish_times,
        start_offsets: offsets,
    })
}

/// Run time of `plan` when bandwidth never limits: passes times the pass's
/// pure compute time on one partition.
pub fn compute_only_time(model: &CnnModel, machine: &MachineConfig, plan: &PartitionPlan, policy: &ReusePolicy) -> f64 {
    let layers = pass_traffic(model, machine, plan, policy);
    let c = partition_compute(machine, plan);
    let per_pass: f64 = layers.iter().map(|l| l.flops_total as f64 / c).sum();
    per_pass * plan.passes as f64
}

/// Simulates `plan` on `machine`, failing if the plan does not fit in DRAM.
pub fn simulate(
    model: &CnnModel,
    machine: &MachineConfig,
    plan: &PartitionPlan,
    policy: &ReusePolicy,
    sim: &SimConfig,
) -> Result<SimTrace> {
    machine.validate()?;
    plan.validate(machine)?;
    if let Some(dt) = sim.dt {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidTimeStep(dt));
        }
    }
    let capacity = check_capacity(model, machine, plan, sim.workspace_factor);
    if !capacity.feasible {
        return Err(capacity.to_error());
    }
    let layers = pass_traffic(model, machine, plan, policy);
    let work = Workload {
        layers: &layers,
        passes: plan.passes,
        n_partitions: plan.n_partitions as usize,
        partition_compute: partition_compute(machine, plan),
        peak_bw: machine.peak_bw(),
        stagger: plan.stagger,
    };
    simulate_workload(&work, sim)
}
