//! Accelerator description, partitioning plans and the DRAM capacity check.

use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::workload::CnnModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MachineConfig {
    pub cores: u64,
    /// ops/s
    pub flops_per_core: u64,
    /// bytes/s
    pub peak_bw: u64,
    pub llc_bytes: u64,
    pub dram_bytes: u64,
    pub element_size: u64,
}

impl MachineConfig {
    /// 64 cores at 6 TFLOP/s aggregate, 400 GB/s, 32 MiB LLC, 16 GiB DRAM.
    pub fn knl64() -> Self {
        Self {
            cores: 64,
            flops_per_core: 93_750_000_000,
            peak_bw: 400_000_000_000,
            llc_bytes: 33_554_432,
            dram_bytes: 17_179_869_184,
            element_size: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("cores", self.cores),
            ("flops_per_core", self.flops_per_core),
            ("peak_bw", self.peak_bw),
            ("llc_bytes", self.llc_bytes),
            ("dram_bytes", self.dram_bytes),
            ("element_size", self.element_size),
        ];
        for (key, v) in fields {
            if v == 0 {
                return Err(Error::InvalidMachine(format!("`{key}` must be > 0")));
            }
        }
        Ok(())
    }

    pub fn peak_compute(&self) -> f64 {
        (self.cores * self.flops_per_core) as f64
    }

    pub fn peak_bw(&self) -> f64 {
        self.peak_bw as f64
    }

    pub fn with_cores(self, cores: u64) -> Self {
        Self { cores, ..self }
    }

    pub fn with_peak_bw(self, peak_bw: u64) -> Self {
        Self { peak_bw, ..self }
    }
}

const MACHINE_KEYS: [&str; 6] = [
    "cores",
    "flops_per_core",
    "peak_bw",
    "llc_bytes",
    "dram_bytes",
    "element_size",
];

/// Parses `key=value` machine files. Every key must appear exactly once.
pub fn parse_machine<R: BufRead>(reader: R, source_name: &str) -> Result<MachineConfig> {
    let err = |line: usize, msg: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        msg,
    };
    let mut values: [Option<u64>; 6] = [None; 6];
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let (key, value) = text
            .split_once('=')
            .ok_or_else(|| err(lineno, format!("expected key=value, got `{text}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let slot = MACHINE_KEYS
            .iter()
            .position(|k| *k == key)
            .ok_or_else(|| err(lineno, format!("unknown key `{key}`")))?;
        if values[slot].is_some() {
            return Err(err(lineno, format!("duplicate key `{key}`")));
        }
        let v: u64 = value
            .parse()
            .map_err(|_| err(lineno, format!("`{value}` is not a decimal integer")))?;
        values[slot] = Some(v);
    }
    if let Some(i) = values.iter().position(Option::is_none) {
        return Err(err(0, format!("missing key `{}`", MACHINE_KEYS[i])));
    }
    let v = values.map(Option::unwrap);
    let machine = MachineConfig {
        cores: v[0],
        flops_per_core: v[1],
        peak_bw: v[2],
        llc_bytes: v[3],
        dram_bytes: v[4],
        element_size: v[5],
    };
    machine.validate()?;
    Ok(machine)
}

pub fn load_machine(path: &Path) -> Result<MachineConfig> {
    let file = std::fs::File::open(path)?;
    parse_machine(std::io::BufReader::new(file), &path.display().to_string())
}

impl fmt::Display for MachineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "cores={}", self.cores)?;
        writeln!(f, "flops_per_core={}", self.flops_per_core)?;
        writeln!(f, "peak_bw={}", self.peak_bw)?;
        writeln!(f, "llc_bytes={}", self.llc_bytes)?;
        writeln!(f, "dram_bytes={}", self.dram_bytes)?;
        writeln!(f, "element_size={}", self.element_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stagger {
    None,
    #[default]
    Uniform,
    Random {
        seed: u64,
    },
}

impl FromStr for Stagger {
    type Err = String;

    /// `random` takes its seed separately; this parses it with seed 0.
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "uniform" => Ok(Self::Uniform),
            "random" => Ok(Self::Random { seed: 0 }),
            other => Err(format!("unknown stagger policy `{other}`")),
        }
    }
}

impl fmt::Display for Stagger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::Uniform => f.write_str("uniform"),
            Self::Random { seed } => write!(f, "random(seed={seed})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionPlan {
    pub n_partitions: u64,
    /// Images in flight across the whole machine during one pass.
    pub images_per_pass_total: u64,
    pub passes: u64,
    pub stagger: Stagger,
}

impl PartitionPlan {
    pub fn new(n_partitions: u64, images_per_pass_total: u64, passes: u64, stagger: Stagger) -> Self {
        Self {
            n_partitions,
            images_per_pass_total,
            passes,
            stagger,
        }
    }

    pub fn batch_per_partition(&self) -> u64 {
        self.images_per_pass_total / self.n_partitions
    }

    pub fn images_total(&self) -> u64 {
        self.images_per_pass_total * self.passes
    }

    pub fn validate(&self, machine: &MachineConfig) -> Result<()> {
        let n = self.n_partitions;
        if n == 0 || self.images_per_pass_total == 0 || self.passes == 0 {
            return Err(Error::InvalidPlan(
                "partitions, images and passes must all be >= 1".into(),
            ));
        }
        if !machine.cores.is_multiple_of(n) {
            return Err(Error::InvalidPlan(format!(
                "{n} partitions do not divide {} cores evenly",
                machine.cores
            )));
        }
        if !self.images_per_pass_total.is_multiple_of(n) {
            return Err(Error::InvalidPlan(format!(
                "{n} partitions do not divide {} images evenly",
                self.images_per_pass_total
            )));
        }
        Ok(())
    }
}

/// Compute rate of one partition in ops/s.
pub fn partition_compute(machine: &MachineConfig, plan: &PartitionPlan) -> f64 {
    ((machine.cores / plan.n_partitions) * machine.flops_per_core) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityReport {
    pub n_partitions: u64,
    pub weight_bytes_total: u64,
    pub workspace_bytes_per_partition: u64,
    pub dram_needed: u64,
    pub dram_bytes: u64,
    pub workspace_factor: f64,
    pub feasible: bool,
}

impl CapacityReport {
    pub fn new(
        weight_bytes_total: u64,
        workspace_bytes_per_partition: u64,
        n_partitions: u64,
        dram_bytes: u64,
        workspace_factor: f64,
    ) -> Self {
        let dram_needed = weight_bytes_total + n_partitions * workspace_bytes_per_partition;
        Self {
            n_partitions,
            weight_bytes_total,
            workspace_bytes_per_partition,
            dram_needed,
            dram_bytes,
            workspace_factor,
            feasible: dram_needed <= dram_bytes,
        }
    }

    pub fn to_error(&self) -> Error {
        Error::Infeasible {
            dram_needed: self.dram_needed,
            dram_bytes: self.dram_bytes,
        }
    }
}

impl fmt::Display for CapacityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const GIB: f64 = (1u64 << 30) as f64;
        writeln!(f, "partitions:                    {}", self.n_partitions)?;
        writeln!(f, "workspace factor:              {}", self.workspace_factor)?;
        writeln!(
            f,
            "weights (shared copy):         {} bytes ({:.3} GiB)",
            self.weight_bytes_total,
            self.weight_bytes_total as f64 / GIB
        )?;
        writeln!(
            f,
            "workspace per partition:       {} bytes ({:.3} GiB)",
            self.workspace_bytes_per_partition,
            self.workspace_bytes_per_partition as f64 / GIB
        )?;
        writeln!(
            f,
            "dram needed:                   {} bytes ({:.3} GiB)",
            self.dram_needed,
            self.dram_needed as f64 / GIB
        )?;
        writeln!(
            f,
            "dram available:                {} bytes ({:.3} GiB)",
            self.dram_bytes,
            self.dram_bytes as f64 / GIB
        )?;
        write!(
            f,
            "feasible:                      {}",
            if self.feasible { "yes" } else { "no" }
        )
    }
}

pub const DEFAULT_WORKSPACE_FACTOR: f64 = 2.0;

/// DRAM footprint of running `plan` on `machine`.
///
/// One read-only copy of the weights is shared. Each partition additionally
/// holds a private working set made of its activation buffers (sized for its
/// batch at the widest layer) and its own instance of the weights in the
/// layout its kernels consume; `workspace_factor` scales that working set.
pub fn check_capacity(
    model: &CnnModel,
    machine: &MachineConfig,
    plan: &PartitionPlan,
    workspace_factor: f64,
) -> CapacityReport {
    let es = machine.element_size;
    let weights = model.total_weight_bytes(es);
    let activations = plan.batch_per_partition() * model.max_activation_bytes(es);
    let workspace = (workspace_factor * (activations + weights) as f64).ceil() as u64;
    CapacityReport::new(
        weights,
        workspace,
        plan.n_partitions,
        machine.dram_bytes,
        workspace_factor,
    )
}
