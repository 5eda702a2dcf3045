//! Simulator for a manycore CNN accelerator whose cores share a
//! bandwidth-limited memory.
//!
//! Cores are grouped into partitions. Each partition runs its batch through
//! the network synchronously while partitions run independently of each
//! other, so their bandwidth demands interleave and the aggregate demand is
//! smoothed at the cost of loading weights once per partition.

pub mod cli;
pub mod error;
pub mod machine;
pub mod metrics;
pub mod sim;
pub mod traffic;
pub mod workload;

pub use error::{Error, Result};
pub use machine::{check_capacity, partition_compute, CapacityReport, MachineConfig, PartitionPlan, Stagger};
pub use metrics::{summarize, sweep, SummaryStats, SweepMode, SweepRow};
pub use sim::{allocate_bandwidth, simulate, stagger_offsets, SimConfig, SimTrace};
pub use traffic::{layer_traffic, pass_traffic, LayerTraffic, ReusePolicy, WeightMode};
pub use workload::{layer_cost, parse_model, weight_traffic_ratio, CnnModel, LayerCost, LayerKind, LayerSpec};
