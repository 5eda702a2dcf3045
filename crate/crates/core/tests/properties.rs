mod common;

use proptest::prelude::*;

use memshape::metrics::summarize_samples;
use memshape::sim::{simulate_workload, Workload};
use memshape::traffic::layer_traffic;
use memshape::workload::Shape;
use memshape::{
    allocate_bandwidth, check_capacity, layer_cost, partition_compute, simulate, weight_traffic_ratio, LayerKind,
    LayerSpec, LayerTraffic, MachineConfig, PartitionPlan, ReusePolicy, SimConfig, Stagger, WeightMode,
};

fn any_layer() -> impl Strategy<Value = LayerSpec> {
    let kind = prop::sample::select(vec![
        LayerKind::Conv,
        LayerKind::Fc,
        LayerKind::Pool,
        LayerKind::Bn,
        LayerKind::Relu,
        LayerKind::Eltwise,
        LayerKind::Split,
    ]);
    (kind, 1u64..64, 1u64..64, 1u64..512, 1u64..512, 1u64..8, 1u64..8).prop_map(|(kind, h, w, c_in, c_out, kh, kw)| {
        let (input, output, k) = match kind {
            LayerKind::Fc => (Shape::new(1, 1, c_in), Shape::new(1, 1, c_out), (1, 1)),
            LayerKind::Conv => (Shape::new(h, w, c_in), Shape::new(h, w, c_out), (kh, kw)),
            LayerKind::Pool => (
                Shape::new(h, w, c_in),
                Shape::new(h.div_ceil(2), w.div_ceil(2), c_in),
                (kh, kw),
            ),
            _ => (Shape::new(h, w, c_in), Shape::new(h, w, c_in), (0, 0)),
        };
        LayerSpec::new("l", kind, input, output, k.0, k.1).unwrap()
    })
}

fn any_policy() -> impl Strategy<Value = ReusePolicy> {
    (any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(reload, pc, always)| ReusePolicy {
        weight_mode: if reload {
            WeightMode::ReloadPerImage
        } else {
            WeightMode::FitOnce
        },
        producer_consumer: pc,
        write_outputs_always: always,
    })
}

fn partitions() -> impl Strategy<Value = u64> {
    prop::sample::select(vec![1u64, 2, 4, 8, 16, 32, 64])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn element_size_scales_bytes_only(layer in any_layer(), es in 1u64..9) {
        let a = layer_cost(&layer, es);
        let b = layer_cost(&layer, 2 * es);
        prop_assert!(a.flops_per_image >= 1);
        prop_assert_eq!(b.flops_per_image, a.flops_per_image);
        prop_assert_eq!(b.weight_bytes, 2 * a.weight_bytes);
        prop_assert_eq!(b.in_act_bytes_per_image, 2 * a.in_act_bytes_per_image);
        prop_assert_eq!(b.out_act_bytes_per_image, 2 * a.out_act_bytes_per_image);
    }

    #[test]
    fn batch_leaves_per_image_traffic_unchanged(layer in any_layer(), batch in 1u64..64, share in 0u64..(64 << 20)) {
        let policy = ReusePolicy::default();
        let cost = layer_cost(&layer, 4);
        let one = layer_traffic(0, &cost, batch, share, &policy, None);
        let two = layer_traffic(0, &cost, 2 * batch, share, &policy, None);
        prop_assert_eq!(two.flops_total, 2 * one.flops_total);
        prop_assert_eq!(two.activation_bytes_component, 2 * one.activation_bytes_component);
        prop_assert_eq!(one.bytes_total, one.weight_bytes_component + one.activation_bytes_component);
    }

    #[test]
    fn bigger_cache_share_never_adds_traffic(
        layer in any_layer(),
        policy in any_policy(),
        batch in 1u64..64,
        prev in 1u64..(4 << 20),
        small in 0u64..(32 << 20),
        extra in 0u64..(32 << 20),
    ) {
        let cost = layer_cost(&layer, 4);
        let a = layer_traffic(1, &cost, batch, small, &policy, Some(prev));
        let b = layer_traffic(1, &cost, batch, small + extra, &policy, Some(prev));
        prop_assert!(b.bytes_total <= a.bytes_total);
    }

    #[test]
    fn reload_bounds_fit_once(layer in any_layer(), batch in 1u64..64, share in 0u64..(64 << 20)) {
        let cost = layer_cost(&layer, 4);
        let fit = ReusePolicy::default();
        let reload = ReusePolicy { weight_mode: WeightMode::ReloadPerImage, ..fit };
        let a = layer_traffic(0, &cost, batch, share, &fit, None);
        let b = layer_traffic(0, &cost, batch, share, &reload, None);
        prop_assert!(a.bytes_total <= b.bytes_total);
        prop_assert_eq!(b.weight_bytes_component, batch * cost.weight_bytes);
    }

    #[test]
    fn partitions_split_compute_exactly(n in partitions(), fpc in 1u64..1_000_000_000_000) {
        let machine = MachineConfig { flops_per_core: fpc, ..MachineConfig::knl64() };
        let plan = PartitionPlan::new(n, 64, 1, Stagger::Uniform);
        prop_assert_eq!(partition_compute(&machine, &plan) * n as f64, machine.peak_compute());
    }

    #[test]
    fn allocation_is_scale_invariant(demands in prop::collection::vec(0.0f64..1e3, 1..32), peak in 1.0f64..1e3) {
        let a = allocate_bandwidth(&demands, peak);
        let scaled: Vec<f64> = demands.iter().map(|d| d * 1024.0).collect();
        let b = allocate_bandwidth(&scaled, peak * 1024.0);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x * 1024.0 - y).abs() <= 1e-9 * y.abs().max(peak));
        }
    }

    #[test]
    fn stats_ignore_sample_subdivision(samples in prop::collection::vec(0.0f64..4e11, 1..200), k in 1usize..5) {
        let fine: Vec<f64> = samples.iter().flat_map(|&s| std::iter::repeat_n(s, k)).collect();
        let a = summarize_samples(&samples, 1.0, 64).unwrap();
        let b = summarize_samples(&fine, 1.0, 64).unwrap();
        prop_assert!((a.mean_bw - b.mean_bw).abs() <= 1e-9 * a.mean_bw.max(1.0));
        prop_assert!((a.std_bw - b.std_bw).abs() <= 1e-6 * a.mean_bw.max(1.0));
    }

    #[test]
    fn random_workloads_conserve_bytes(
        layers in prop::collection::vec((1u64..1_000_000_000, 0u64..100_000_000), 1..12),
        n in prop::sample::select(vec![1usize, 2, 4, 8]),
        passes in 1u64..3,
        seed in any::<u64>(),
    ) {
        let traffic: Vec<LayerTraffic> = layers
            .iter()
            .enumerate()
            .map(|(i, &(f, b))| LayerTraffic {
                layer_index: i,
                flops_total: f,
                bytes_total: b,
                weight_bytes_component: 0,
                activation_bytes_component: b,
            })
            .collect();
        let work = Workload {
            layers: &traffic,
            passes,
            n_partitions: n,
            partition_compute: 6e12 / n as f64,
            peak_bw: 4e11,
            stagger: Stagger::Random { seed },
        };
        let trace = simulate_workload(&work, &SimConfig::default()).unwrap();
        let expected = work.total_bytes();
        let tol = (traffic.len() as u64 * passes) as f64 * 4e11 * trace.dt;
        let sampled: f64 = trace.aggregate_bw.iter().sum::<f64>() * trace.dt;
        prop_assert!((trace.total_bytes - expected).abs() <= tol);
        prop_assert!((sampled - expected).abs() <= tol);
        prop_assert!(trace.aggregate_bw.iter().all(|&b| b <= 4e11 * (1.0 + 1e-9)));
        // no partition can beat its own compute time or the shared bandwidth
        let lower = work.pure_compute_time().max(expected / 4e11);
        prop_assert!(trace.makespan >= lower - 2.0 * trace.dt);
    }
}

#[test]
fn weight_ratio_falls_with_batch() {
    for name in common::MODELS {
        let model = common::model(name);
        let ratios: Vec<f64> = [1, 2, 4, 8, 16, 32, 64, 128]
            .iter()
            .map(|&b| weight_traffic_ratio(&model, b, 4).unwrap())
            .collect();
        assert!(ratios.windows(2).all(|w| w[1] < w[0]), "{name}: {ratios:?}");
    }
}

#[test]
fn capacity_grows_with_partitions() {
    let machine = common::knl64();
    for name in common::MODELS {
        let model = common::model(name);
        let needed: Vec<u64> = [1, 2, 4, 8, 16, 32, 64]
            .iter()
            .map(|&n| {
                check_capacity(&model, &machine, &PartitionPlan::new(n, 64, 1, Stagger::Uniform), 2.0).dram_needed
            })
            .collect();
        assert!(needed.windows(2).all(|w| w[1] >= w[0]), "{name}: {needed:?}");
    }
}

#[test]
fn simulation_is_deterministic() {
    let model = common::model("googlenet");
    let machine = common::knl64();
    for stagger in [Stagger::None, Stagger::Uniform, Stagger::Random { seed: 3 }] {
        let plan = PartitionPlan::new(8, 64, 2, stagger);
        let sim = SimConfig {
            record_trace: true,
            ..SimConfig::default()
        };
        let a = simulate(&model, &machine, &plan, &ReusePolicy::default(), &sim).unwrap();
        let b = simulate(&model, &machine, &plan, &ReusePolicy::default(), &sim).unwrap();
        assert_eq!(a, b);
    }
}
