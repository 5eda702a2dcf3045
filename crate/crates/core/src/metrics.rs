//! Reductions of simulation traces to bandwidth statistics, throughput and
//! relative performance across partition or core-count sweeps.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::machine::{check_capacity, MachineConfig, PartitionPlan};
use crate::sim::{simulate, SimConfig, SimTrace};
use crate::traffic::ReusePolicy;
use crate::workload::CnnModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryStats {
    pub mean_bw: f64,
    /// Population standard deviation of the per-step aggregate bandwidth.
    pub std_bw: f64,
    pub makespan: f64,
    pub throughput: f64,
    pub images_total: u64,
}

/// Population mean and standard deviation.
pub fn mean_std(samples: &[f64]) -> Option<(f64, f64)> {
    if samples.is_empty() {
        return None;
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

pub fn summarize_samples(samples: &[f64], makespan: f64, images_total: u64) -> Result<SummaryStats> {
    let (mean_bw, std_bw) = mean_std(samples).ok_or(Error::EmptyTrace)?;
    Ok(SummaryStats {
        mean_bw,
        std_bw,
        makespan,
        throughput: images_total as f64 / makespan,
        images_total,
    })
}

pub fn summarize(trace: &SimTrace, images_total: u64) -> Result<SummaryStats> {
    summarize_samples(&trace.aggregate_bw, trace.makespan, images_total)
}

impl fmt::Display for SummaryStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mean_bw={}", self.mean_bw)?;
        writeln!(f, "std_bw={}", self.std_bw)?;
        writeln!(f, "makespan={}", self.makespan)?;
        writeln!(f, "throughput={}", self.throughput)?;
        write!(f, "images_total={}", self.images_total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    Partitions,
    Cores,
}

impl FromStr for SweepMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "partitions" => Ok(Self::Partitions),
            "cores" => Ok(Self::Cores),
            other => Err(format!("unknown sweep mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sweep_value: u64,
    pub feasible: bool,
    /// `None` for capacity-infeasible rows.
    pub stats: Option<SummaryStats>,
    pub relative_performance: Option<f64>,
    pub std_reduction: Option<f64>,
    pub mean_gain: Option<f64>,
    /// Makespan of the same configuration with bandwidth never limiting.
    pub compute_time: Option<f64>,
    pub peak_bw: f64,
}

/// Configuration for a row of a sweep.
fn row_config(
    machine: &MachineConfig,
    template: &PartitionPlan,
    mode: SweepMode,
    value: u64,
) -> (MachineConfig, PartitionPlan) {
    match mode {
        SweepMode::Partitions => (
            *machine,
            PartitionPlan {
                n_partitions: value,
                ..*template
            },
        ),
        SweepMode::Cores => (
            machine.with_cores(value),
            PartitionPlan {
                n_partitions: 1,
                images_per_pass_total: value,
                ..*template
            },
        ),
    }
}

/// Runs one simulation per value.
///
/// Partitions mode keeps `template`'s image count and varies the partition
/// count; cores mode runs a single partition on `value` cores with one image
/// per core. The first value is the baseline. Rows that do not fit in DRAM
/// are reported as infeasible.
pub fn sweep(
    model: &CnnModel,
    machine: &MachineConfig,
    template: &PartitionPlan,
    policy: &ReusePolicy,
    sim: &SimConfig,
    mode: SweepMode,
    values: &[u64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Sweep("no sweep values".into()));
    }
    for &v in values {
        let (m, plan) = row_config(machine, template, mode, v);
        m.validate()
            .and_then(|_| plan.validate(&m))
            .map_err(|e| Error::Sweep(format!("value {v}: {e}")))?;
    }

    let sim = SimConfig {
        record_trace: false,
        ..*sim
    };
    let results: Vec<Result<(Option<SummaryStats>, f64)>> = values
        .par_iter()
        .map(|&v| {
            let (m, plan) = row_config(machine, template, mode, v);
            let capacity = check_capacity(model, &m, &plan, sim.workspace_factor);
            if !capacity.feasible {
                return Ok((None, 0.0));
            }
            let trace = simulate(model, &m, &plan, policy, &sim)?;
            let compute = crate::sim::compute_only_time(model, &m, &plan, policy);
            Ok((Some(summarize(&trace, plan.images_total())?), compute))
        })
        .collect();

    let mut rows = Vec::with_capacity(values.len());
    for (&v, res) in values.iter().zip(results) {
        let (stats, compute) = res?;
        rows.push(SweepRow {
            sweep_value: v,
            feasible: stats.is_some(),
            stats,
            relative_performance: None,
            std_reduction: None,
            mean_gain: None,
            compute_time: stats.map(|_| compute),
            peak_bw: machine.peak_bw(),
        });
    }

    let base = rows[0]
        .stats
        .ok_or_else(|| Error::Sweep(format!("baseline value {} is infeasible", values[0])))?;
    for (i, row) in rows.iter_mut().enumerate() {
        let Some(s) = row.stats else { continue };
        if i == 0 {
            row.relative_performance = Some(1.0);
            row.std_reduction = Some(0.0);
            row.mean_gain = Some(0.0);
            continue;
        }
        row.relative_performance = Some(match mode {
            SweepMode::Partitions => base.makespan / s.makespan,
            SweepMode::Cores => s.throughput / base.throughput,
        });
        row.std_reduction = Some(if base.std_bw > 0.0 {
            1.0 - s.std_bw / base.std_bw
        } else {
            0.0
        });
        row.mean_gain = Some(s.mean_bw / base.mean_bw - 1.0);
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str =
    "sweep_value,mean_bw,std_bw,makespan,throughput,relative_performance,std_reduction,mean_gain,feasible";

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        match (r.stats, r.relative_performance, r.std_reduction, r.mean_gain) {
            (Some(s), Some(rel), Some(std_red), Some(gain)) => writeln!(
                out,
                "{},{},{},{},{},{},{},{},true",
                r.sweep_value, s.mean_bw, s.std_bw, s.makespan, s.throughput, rel, std_red, gain
            )?,
            _ => writeln!(out, "{},,,,,,,,false", r.sweep_value)?,
        }
    }
    Ok(())
}

/// Human-readable sweep table.
pub fn format_sweep_table(rows: &[SweepRow], mode: SweepMode) -> String {
    const GB: f64 = 1e9;
    let label = match mode {
        SweepMode::Partitions => "parts",
        SweepMode::Cores => "cores",
    };
    let mut s = format!(
        "{label:>6} {:>10} {:>10} {:>12} {:>12} {:>8} {:>8} {:>8}\n",
        "mean GB/s", "std GB/s", "makespan s", "images/s", "rel", "std -%", "mean +%"
    );
    for r in rows {
        match (r.stats, r.relative_performance, r.std_reduction, r.mean_gain) {
            (Some(st), Some(rel), Some(sr), Some(mg)) => s.push_str(&format!(
                "{:>6} {:>10.2} {:>10.2} {:>12.6} {:>12.2} {:>8.4} {:>8.2} {:>8.2}\n",
                r.sweep_value,
                st.mean_bw / GB,
                st.std_bw / GB,
                st.makespan,
                st.throughput,
                rel,
                sr * 100.0,
                mg * 100.0
            )),
            _ => s.push_str(&format!("{:>6} infeasible (exceeds DRAM capacity)\n", r.sweep_value)),
        }
    }
    s
}
