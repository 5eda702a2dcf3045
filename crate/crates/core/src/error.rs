use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{source_name}:{line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error("layer `{name}`: {msg}")]
    InvalidLayer { name: String, msg: String },

    #[error("model `{0}` has no layers")]
    EmptyModel(String),

    #[error("model has no conv or fc layers; weight traffic ratio is undefined")]
    NoWeightedLayers,

    #[error("invalid machine config: {0}")]
    InvalidMachine(String),

    #[error("invalid partition plan: {0}")]
    InvalidPlan(String),

    #[error("capacity infeasible: needs {dram_needed} bytes of DRAM, machine has {dram_bytes}")]
    Infeasible { dram_needed: u64, dram_bytes: u64 },

    #[error("time step must be positive and finite, got {0}")]
    InvalidTimeStep(f64),

    #[error("simulation exceeded {0} steps without finishing")]
    StepLimit(u64),

    #[error("trace has no samples")]
    EmptyTrace,

    #[error("sweep: {0}")]
    Sweep(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
