//! Per-layer DRAM traffic of one partition's batch under the cache reuse
//! rules. Weights that fit the partition's LLC share are fetched once per
//! batch; otherwise they are refetched for every image.

use std::fmt;
use std::str::FromStr;

use crate::machine::{MachineConfig, PartitionPlan};
use crate::workload::{layer_cost, CnnModel, LayerCost, LayerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    #[default]
    FitOnce,
    ReloadPerImage,
}

impl FromStr for WeightMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fit-once" | "fit_once" => Ok(Self::FitOnce),
            "reload" | "reload_per_image" => Ok(Self::ReloadPerImage),
            other => Err(format!("unknown weight mode `{other}`")),
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FitOnce => "fit-once",
            Self::ReloadPerImage => "reload",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReusePolicy {
    pub weight_mode: WeightMode,
    /// Read a layer's input from cache when the previous layer's whole
    /// output footprint fits the LLC share.
    pub producer_consumer: bool,
    /// Write every output to DRAM even when it would fit the LLC share.
    pub write_outputs_always: bool,
}

impl Default for ReusePolicy {
    fn default() -> Self {
        Self {
            weight_mode: WeightMode::FitOnce,
            producer_consumer: false,
            write_outputs_always: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerTraffic {
    pub layer_index: usize,
    pub flops_total: u64,
    pub bytes_total: u64,
    pub weight_bytes_component: u64,
    pub activation_bytes_component: u64,
}

impl LayerTraffic {
    /// flops per DRAM byte, infinite for layers that touch no DRAM.
    pub fn intensity(&self) -> f64 {
        self.flops_total as f64 / self.bytes_total as f64
    }
}

/// Traffic of one layer for a batch of `batch` images.
///
/// `prev_output_bytes` is the previous layer's per-image output footprint, or
/// `None` for the first layer, which always reads its input from DRAM.
pub fn layer_traffic(
    layer_index: usize,
    cost: &LayerCost,
    batch: u64,
    llc_share: u64,
    policy: &ReusePolicy,
    prev_output_bytes: Option<u64>,
) -> LayerTraffic {
    let weights = if cost.weight_bytes <= llc_share && policy.weight_mode == WeightMode::FitOnce {
        cost.weight_bytes
    } else {
        cost.weight_bytes * batch
    };

    let input_cached = policy.producer_consumer && prev_output_bytes.is_some_and(|prev| batch * prev <= llc_share);
    let input = if input_cached {
        0
    } else {
        batch * cost.in_act_bytes_per_image
    };

    let out_footprint = batch * cost.out_act_bytes_per_image;
    let output = if !policy.write_outputs_always && out_footprint <= llc_share {
        0
    } else {
        out_footprint
    };

    LayerTraffic {
        layer_index,
        flops_total: cost.flops_per_image * batch,
        bytes_total: weights + input + output,
        weight_bytes_component: weights,
        activation_bytes_component: input + output,
    }
}

/// Convenience wrapper taking the layer itself.
pub fn layer_traffic_of(
    layer: &LayerSpec,
    element_size: u64,
    batch: u64,
    llc_share: u64,
    policy: &ReusePolicy,
) -> LayerTraffic {
    layer_traffic(0, &layer_cost(layer, element_size), batch, llc_share, policy, None)
}

pub fn llc_share(machine: &MachineConfig, plan: &PartitionPlan) -> u64 {
    machine.llc_bytes / plan.n_partitions
}

/// Traffic of every layer for one partition running one pass.
pub fn pass_traffic(
    model: &CnnModel,
    machine: &MachineConfig,
    plan: &PartitionPlan,
    policy: &ReusePolicy,
) -> Vec<LayerTraffic> {
    let costs = model.costs(machine.element_size);
    let batch = plan.batch_per_partition();
    let share = llc_share(machine, plan);
    costs
        .iter()
        .enumerate()
        .map(|(i, cost)| {
            let prev = i.checked_sub(1).map(|p| costs[p].out_act_bytes_per_image);
            layer_traffic(i, cost, batch, share, policy, prev)
        })
        .collect()
}

pub fn pass_bytes(traffic: &[LayerTraffic]) -> u64 {
    traffic.iter().map(|t| t.bytes_total).sum()
}

pub fn pass_weight_bytes(traffic: &[LayerTraffic]) -> u64 {
    traffic.iter().map(|t| t.weight_bytes_component).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::Stagger;
    use crate::workload::{LayerKind, Shape};

    const MB: u64 = 1 << 20;

    fn conv(name: &str, hw: u64, c: u64, k: u64) -> LayerSpec {
        let s = Shape::new(hw, hw, c);
        LayerSpec::new(name, LayerKind::Conv, s, s, k, k).unwrap()
    }

    fn relu(hw: u64, c: u64) -> LayerSpec {
        let s = Shape::new(hw, hw, c);
        LayerSpec::new("relu", LayerKind::Relu, s, s, 0, 0).unwrap()
    }

    #[test]
    fn conv2_1a_cache_fit() {
        let t = layer_traffic_of(&conv("c", 56, 64, 1), 4, 16, 8 * MB, &ReusePolicy::default());
        assert_eq!(t.weight_bytes_component, 16_384);
        assert_eq!(t.activation_bytes_component, 16 * 1_605_632);
        assert_eq!(t.bytes_total, 25_706_496);
        assert_eq!(t.flops_total, 16 * 25_690_112);
    }

    #[test]
    fn conv2_1a_weights_spill() {
        let t = layer_traffic_of(&conv("c", 56, 64, 1), 4, 16, 8 * 1024, &ReusePolicy::default());
        assert_eq!(t.weight_bytes_component, 262_144);
        assert_eq!(t.bytes_total, 25_952_256);
    }

    #[test]
    fn reload_mode_ignores_fit() {
        let policy = ReusePolicy {
            weight_mode: WeightMode::ReloadPerImage,
            ..ReusePolicy::default()
        };
        let t = layer_traffic_of(&conv("c", 56, 64, 1), 4, 16, 8 * MB, &policy);
        assert_eq!(t.weight_bytes_component, 262_144);
    }

    #[test]
    fn relu_has_no_weight_traffic() {
        for mode in [WeightMode::FitOnce, WeightMode::ReloadPerImage] {
            for pc in [false, true] {
                let policy = ReusePolicy {
                    weight_mode: mode,
                    producer_consumer: pc,
                    write_outputs_always: !pc,
                };
                let t = layer_traffic_of(&relu(56, 64), 4, 64, 1024, &policy);
                assert_eq!(t.weight_bytes_component, 0);
            }
        }
    }

    #[test]
    fn output_elided_only_when_it_fits() {
        let policy = ReusePolicy {
            write_outputs_always: false,
            ..ReusePolicy::default()
        };
        let l = relu(8, 8); // 2 KiB in and out per image
        let t = layer_traffic_of(&l, 4, 2, 4096, &policy);
        assert_eq!(t.activation_bytes_component, 2 * 2048);
        let t = layer_traffic_of(&l, 4, 8, 4096, &policy);
        assert_eq!(t.activation_bytes_component, 2 * 8 * 2048);
    }

    #[test]
    fn single_layer_pass() {
        let model = CnnModel::new("m", vec![conv("conv3_2b", 28, 128, 3)]).unwrap();
        let machine = MachineConfig {
            llc_bytes: 16 * MB,
            ..MachineConfig::knl64()
        };
        let plan = PartitionPlan::new(1, 64, 1, Stagger::None);
        let t = pass_traffic(&model, &machine, &plan, &ReusePolicy::default());
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].weight_bytes_component, 589_824);
        // 64 * (401_408 + 401_408)
        assert_eq!(t[0].activation_bytes_component, 51_380_224);
        assert_eq!(t[0].bytes_total, 51_970_048);
    }

    #[test]
    fn producer_consumer_elides_inputs_after_first() {
        let model = CnnModel::new("relus", vec![relu(8, 8), relu(8, 8), relu(8, 8)]).unwrap();
        let machine = MachineConfig::knl64();
        let plan = PartitionPlan::new(1, 64, 1, Stagger::None);
        let policy = ReusePolicy {
            producer_consumer: true,
            ..ReusePolicy::default()
        };
        let t = pass_traffic(&model, &machine, &plan, &policy);
        let in_bytes = 64 * 2048;
        assert_eq!(t[0].activation_bytes_component, in_bytes * 2);
        assert_eq!(t[1].activation_bytes_component, in_bytes);
        assert_eq!(t[2].activation_bytes_component, in_bytes);
    }

    #[test]
    fn partitioning_duplicates_weight_loads() {
        let model = CnnModel::new("m", vec![conv("a", 28, 128, 3), relu(28, 128)]).unwrap();
        let machine = MachineConfig::knl64();
        let policy = ReusePolicy::default();
        let p1 = PartitionPlan::new(1, 64, 1, Stagger::None);
        let p2 = PartitionPlan::new(2, 64, 1, Stagger::None);
        let t1 = pass_traffic(&model, &machine, &p1, &policy);
        let t2 = pass_traffic(&model, &machine, &p2, &policy);
        // each of the two partitions loads every weight once
        let all_partitions_n2 = 2 * pass_weight_bytes(&t2);
        assert_eq!(all_partitions_n2, 2 * pass_weight_bytes(&t1));
        let acts = |t: &[LayerTraffic], batch: u64| {
            t.iter()
                .map(|l| l.activation_bytes_component / batch)
                .collect::<Vec<_>>()
        };
        assert_eq!(acts(&t1, 64), acts(&t2, 32));
    }
}
