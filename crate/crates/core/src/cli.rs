//! Command-line harness: cost reports, single simulations, sweeps and
//! capacity validation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::machine::{check_capacity, load_machine, MachineConfig, PartitionPlan, Stagger};
use crate::metrics::{format_sweep_table, summarize, sweep, write_sweep_csv, SweepMode};
use crate::sim::{simulate, SimConfig};
use crate::traffic::{ReusePolicy, WeightMode};
use crate::workload::{layer_cost, load_model, weight_traffic_ratio, CnnModel};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INFEASIBLE: u8 = 1;
pub const EXIT_INPUT_ERROR: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "memshape",
    version,
    about = "Partitioned CNN accelerator bandwidth simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer operation and byte counts plus the weight traffic ratio.
    Cost(CostArgs),
    /// Run one simulation and print bandwidth statistics.
    Simulate(SimulateArgs),
    /// Run a partition-count or core-count sweep.
    Sweep(SweepArgs),
    /// Check that a partitioning plan fits in DRAM.
    Validate(RunArgs),
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub machine: PathBuf,
    /// Images per weight load for the weight traffic ratio.
    #[arg(long, default_value_t = 64)]
    pub batch: u64,
    /// Write the per-layer table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StaggerArg {
    None,
    Uniform,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightModeArg {
    FitOnce,
    Reload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WriteOutputs {
    Always,
    Fit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepModeArg {
    Partitions,
    Cores,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub machine: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub partitions: u64,
    /// Images in flight across all partitions in one pass.
    #[arg(long, default_value_t = 64)]
    pub images: u64,
    #[arg(long, default_value_t = 4)]
    pub passes: u64,
    #[arg(long, value_enum, default_value_t = StaggerArg::Uniform)]
    pub stagger: StaggerArg,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = WeightModeArg::FitOnce)]
    pub weight_mode: WeightModeArg,
    #[arg(long, value_enum, default_value_t = OnOff::Off)]
    pub producer_consumer: OnOff,
    #[arg(long, value_enum, default_value_t = WriteOutputs::Always)]
    pub write_outputs: WriteOutputs,
    /// Fixed simulation step in seconds (default: derived from the pass time).
    #[arg(long)]
    pub dt: Option<f64>,
    /// Scale of each partition's private DRAM working set.
    #[arg(long, default_value_t = crate::machine::DEFAULT_WORKSPACE_FACTOR)]
    pub workspace_factor: f64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Write the per-step trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Also write the summary to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value_t = SweepModeArg::Partitions)]
    pub mode: SweepModeArg,
    /// Comma-separated sweep values; the first is the baseline.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<u64>>,
    /// Write the sweep CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    pub fn stagger(&self) -> Stagger {
        match self.stagger {
            StaggerArg::None => Stagger::None,
            StaggerArg::Uniform => Stagger::Uniform,
            StaggerArg::Random => Stagger::Random { seed: self.seed },
        }
    }

    pub fn plan(&self) -> PartitionPlan {
        PartitionPlan::new(self.partitions, self.images, self.passes, self.stagger())
    }

    pub fn policy(&self) -> ReusePolicy {
        ReusePolicy {
            weight_mode: match self.weight_mode {
                WeightModeArg::FitOnce => WeightMode::FitOnce,
                WeightModeArg::Reload => WeightMode::ReloadPerImage,
            },
            producer_consumer: self.producer_consumer == OnOff::On,
            write_outputs_always: self.write_outputs == WriteOutputs::Always,
        }
    }

    pub fn sim_config(&self, record_trace: bool) -> SimConfig {
        SimConfig {
            dt: self.dt,
            record_trace,
            workspace_factor: self.workspace_factor,
            ..SimConfig::default()
        }
    }

    fn load(&self) -> Result<(CnnModel, MachineConfig)> {
        if !(self.workspace_factor >= 1.0 && self.workspace_factor.is_finite()) {
            return Err(Error::InvalidPlan(format!(
                "workspace factor must be >= 1, got {}",
                self.workspace_factor
            )));
        }
        let model = load_model(&self.model)?;
        let machine = load_machine(&self.machine)?;
        self.plan().validate(&machine)?;
        Ok((model, machine))
    }
}

fn create(path: &PathBuf) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Runs `cli`, writing human-readable output to `out`. Returns the process
/// exit status; input errors come back as `Err`.
pub fn run<W: Write>(cli: &Cli, out: &mut W) -> Result<u8> {
    match &cli.command {
        Command::Cost(args) => cmd_cost(args, out),
        Command::Simulate(args) => cmd_simulate(args, out),
        Command::Sweep(args) => cmd_sweep(args, out),
        Command::Validate(args) => cmd_validate(args, out),
    }
}

pub const COST_CSV_HEADER: &str = "index,name,kind,flops_per_image,weight_bytes,in_act_bytes,out_act_bytes,intensity";

pub fn cmd_cost<W: Write>(args: &CostArgs, out: &mut W) -> Result<u8> {
    let model = load_model(&args.model)?;
    let machine = load_machine(&args.machine)?;
    let es = machine.element_size;

    writeln!(
        out,
        "model {} ({} layers), element size {es} bytes",
        model.name,
        model.layers.len()
    )?;
    writeln!(
        out,
        "{:>4} {:<24} {:<7} {:>14} {:>12} {:>12} {:>12} {:>10}",
        "#", "layer", "kind", "flops/image", "weights B", "in B/img", "out B/img", "flops/B"
    )?;
    let mut csv = match &args.out {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "{COST_CSV_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    for (i, layer) in model.layers.iter().enumerate() {
        let c = layer_cost(layer, es);
        let intensity = c.arithmetic_intensity();
        writeln!(
            out,
            "{i:>4} {:<24} {:<7} {:>14} {:>12} {:>12} {:>12} {:>10.3}",
            layer.name,
            layer.kind,
            c.flops_per_image,
            c.weight_bytes,
            c.in_act_bytes_per_image,
            c.out_act_bytes_per_image,
            intensity
        )?;
        if let Some(w) = csv.as_mut() {
            writeln!(
                w,
                "{i},{},{},{},{},{},{},{}",
                layer.name,
                layer.kind,
                c.flops_per_image,
                c.weight_bytes,
                c.in_act_bytes_per_image,
                c.out_act_bytes_per_image,
                intensity
            )?;
        }
    }
    if let Some(mut w) = csv {
        w.flush()?;
    }

    let costs = model.costs(es);
    let flops: u64 = costs.iter().map(|c| c.flops_per_image).sum();
    writeln!(out, "total flops/image: {flops}")?;
    writeln!(out, "total weight bytes: {}", model.total_weight_bytes(es))?;
    match weight_traffic_ratio(&model, args.batch, es) {
        Ok(r) => writeln!(out, "weight_traffic_ratio(batch={}): {r}", args.batch)?,
        Err(e) => writeln!(out, "weight_traffic_ratio(batch={}): undefined ({e})", args.batch)?,
    }
    Ok(EXIT_OK)
}

pub fn cmd_simulate<W: Write>(args: &SimulateArgs, out: &mut W) -> Result<u8> {
    let run = &args.run;
    let (model, machine) = run.load()?;
    let plan = run.plan();
    let sim = run.sim_config(args.trace.is_some());

    let capacity = check_capacity(&model, &machine, &plan, sim.workspace_factor);
    if !capacity.feasible {
        writeln!(out, "{capacity}")?;
        return Ok(EXIT_INFEASIBLE);
    }

    let trace = simulate(&model, &machine, &plan, &run.policy(), &sim)?;
    let stats = summarize(&trace, plan.images_total())?;
    if let Some(path) = &args.trace {
        let mut w = create(path)?;
        trace.write_csv(&mut w)?;
        w.flush()?;
    }

    let text = format!(
        "model={}\npartitions={}\nimages_per_pass={}\npasses={}\nstagger={}\ndt={}\nsteps={}\n{stats}\n",
        model.name,
        plan.n_partitions,
        plan.images_per_pass_total,
        plan.passes,
        plan.stagger,
        trace.dt,
        trace.steps()
    );
    out.write_all(text.as_bytes())?;
    if let Some(path) = &args.out {
        let mut w = create(path)?;
        w.write_all(text.as_bytes())?;
        w.flush()?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_sweep<W: Write>(args: &SweepArgs, out: &mut W) -> Result<u8> {
    let run = &args.run;
    let model = load_model(&run.model)?;
    let machine = load_machine(&run.machine)?;
    let mode = match args.mode {
        SweepModeArg::Partitions => SweepMode::Partitions,
        SweepModeArg::Cores => SweepMode::Cores,
    };
    let values = args.values.clone().unwrap_or_else(|| match mode {
        SweepMode::Partitions => vec![1, 2, 4, 8, 16],
        SweepMode::Cores => vec![8, 16, 32, 64],
    });
    let rows = sweep(
        &model,
        &machine,
        &run.plan(),
        &run.policy(),
        &run.sim_config(false),
        mode,
        &values,
    )?;
    writeln!(out, "model={} stagger={}", model.name, run.stagger())?;
    out.write_all(format_sweep_table(&rows, mode).as_bytes())?;
    if let Some(path) = &args.out {
        let mut w = create(path)?;
        write_sweep_csv(&rows, &mut w)?;
        w.flush()?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_validate<W: Write>(args: &RunArgs, out: &mut W) -> Result<u8> {
    let (model, machine) = args.load()?;
    let report = check_capacity(&model, &machine, &args.plan(), args.workspace_factor);
    writeln!(out, "model={}", model.name)?;
    writeln!(out, "{report}")?;
    Ok(if report.feasible { EXIT_OK } else { EXIT_INFEASIBLE })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_flags() {
        let cli = Cli::try_parse_from(["memshape", "simulate", "--model", "m.csv", "--machine", "k.cfg"]).unwrap();
        let Command::Simulate(args) = cli.command else {
            panic!("wrong subcommand")
        };
        let r = &args.run;
        assert_eq!((r.partitions, r.images, r.passes, r.seed), (1, 64, 4, 42));
        assert_eq!(r.stagger(), Stagger::Uniform);
        assert_eq!(r.policy(), ReusePolicy::default());
        assert_eq!(r.dt, None);
    }

    #[test]
    fn flag_spellings() {
        let cli = Cli::try_parse_from([
            "memshape",
            "sweep",
            "--model",
            "m",
            "--machine",
            "k",
            "--partitions",
            "4",
            "--images",
            "32",
            "--passes",
            "2",
            "--stagger",
            "random",
            "--seed",
            "9",
            "--weight-mode",
            "reload",
            "--producer-consumer",
            "on",
            "--write-outputs",
            "fit",
            "--dt",
            "0.001",
            "--out",
            "o.csv",
            "--mode",
            "cores",
            "--values",
            "8,16",
        ])
        .unwrap();
        let Command::Sweep(args) = cli.command else {
            panic!("wrong subcommand")
        };
        assert_eq!(args.run.stagger(), Stagger::Random { seed: 9 });
        let p = args.run.policy();
        assert_eq!(p.weight_mode, WeightMode::ReloadPerImage);
        assert!(p.producer_consumer);
        assert!(!p.write_outputs_always);
        assert_eq!(args.run.dt, Some(0.001));
        assert_eq!(args.values, Some(vec![8, 16]));
        assert_eq!(args.mode, SweepModeArg::Cores);
    }

    #[test]
    fn bad_enum_value_is_rejected() {
        assert!(Cli::try_parse_from([
            "memshape",
            "validate",
            "--model",
            "m",
            "--machine",
            "k",
            "--stagger",
            "wave"
        ])
        .is_err());
    }
}
