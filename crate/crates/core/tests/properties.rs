use memprobe::analysis::{self, Metric, ResultSet};
use memprobe::backend::map_region;
use memprobe::chase::build_layout;
use memprobe::env::inspect_environment;
use memprobe::model::{self, Nanos};
use memprobe::oracle::{self, Prefetch, ToyCacheModel};
use memprobe::stats;
use memprobe::sweep::{SweepKind, SweepPlan, SweepReport};
use memprobe::{AccessMode, Bytes, ChaseResult, ChaseSpec, DeviceProfile, StreamResult, StreamSpec};
use proptest::prelude::*;

fn mode() -> impl Strategy<Value = AccessMode> {
    prop_oneof![Just(AccessMode::ReadOnly), Just(AccessMode::WriteBack)]
}

prop_compose! {
    fn stream_result()(
        workers in 1u32..48,
        lines in 1u64..1 << 24,
        passes in 1u32..64,
        mode in mode(),
        seed in any::<u64>(),
        wall in 1u64..u64::MAX >> 8,
        skew in prop::collection::vec(0u64..1 << 30, 48),
        checksum in any::<u64>(),
        node in 0u32..8,
    ) -> StreamResult {
        let cores: Vec<u32> = (0..workers).collect();
        let mut spec = StreamSpec::new(&cores, Bytes(lines * 64), mode);
        spec.passes = passes;
        spec.seed = seed;
        let total = spec.total_bytes();
        let wall = Nanos(wall);
        StreamResult {
            per_worker_time: skew[..workers as usize].iter().map(|s| Nanos(wall.0.saturating_sub(*s))).collect(),
            spec,
            total_bytes: total,
            wall_time: wall,
            bandwidth: StreamResult::bandwidth_from(total, wall),
            checksum,
            device: DeviceProfile::anonymous(format!("node{node}"), node),
        }
    }
}

prop_compose! {
    fn chase_result()(
        nodes in 1u64..1 << 26,
        passes in 1u64..1000,
        mode in mode(),
        window in prop::option::of(1u64..1 << 12),
        elapsed in prop::collection::vec(1u64..u64::MAX >> 16, 1..9),
        seed in any::<u64>(),
        checksum in any::<u64>(),
    ) -> ChaseResult {
        let mut spec = ChaseSpec::new(Bytes(nodes * 64), mode);
        spec.window_bytes = window.map(|w| Bytes(w.min(nodes) * 64));
        spec.seed = seed;
        spec.runs = elapsed.len() as u32;
        let hops = nodes * passes;
        let elapsed: Vec<Nanos> = elapsed.into_iter().map(Nanos).collect();
        let per_run = ChaseResult::per_run_ns(&elapsed, hops);
        ChaseResult {
            ns_per_access: stats::median(&per_run).unwrap(),
            dispersion: stats::iqr(&per_run).unwrap(),
            spec,
            passes_timed: passes,
            hops_timed: hops,
            elapsed,
            checksum,
            layout_digest: format!("{checksum:016x}"),
            device: DeviceProfile::anonymous("dram", 0),
        }
    }
}

proptest! {
    #[test]
    fn stream_results_round_trip(r in stream_result()) {
        let text = model::serialize(&r, None);
        prop_assert_eq!(model::deserialize::<StreamResult>(&text).unwrap(), r.clone());
        prop_assert!(r.check_accounting().is_ok());
        prop_assert_eq!(oracle::reference_bandwidth(&r).to_bits(), r.bandwidth.to_bits());
    }

    #[test]
    fn chase_results_round_trip(r in chase_result()) {
        let env = inspect_environment();
        let text = model::serialize(&r, Some(&env));
        let doc = model::deserialize_document::<ChaseResult>(&text).unwrap();
        prop_assert_eq!(doc.env.as_ref(), Some(&env));
        prop_assert_eq!(doc.record, r.clone());
        prop_assert!(r.check_accounting().is_ok());
        prop_assert_eq!(oracle::reference_ns_per_access(&r).to_bits(), r.ns_per_access.to_bits());
    }

    #[test]
    fn tampered_bandwidth_is_caught(r in stream_result()) {
        let mut bad = r.clone();
        bad.bandwidth = f64::from_bits(r.bandwidth.to_bits() + 1);
        prop_assert!(bad.check_accounting().is_err());
    }

    #[test]
    fn layouts_are_single_cycles(seed in any::<u64>(), nodes in 1u64..=1 << 16, window in 1u64..=512) {
        let device = DeviceProfile::anonymous("dram", 0);
        let mut region = map_region(&device, Bytes(nodes * 64), Bytes(4096)).unwrap();
        let layout = build_layout(&mut region, Bytes(nodes * 64), seed, None).unwrap();
        prop_assert!(oracle::walk_and_verify(&layout));
        let window = window.min(nodes);
        let layout = build_layout(&mut region, Bytes(nodes * 64), seed, Some(Bytes(window * 64))).unwrap();
        prop_assert!(oracle::verify_window_coverage(&layout, window));
    }

    #[test]
    fn self_ratio_is_100(values in prop::collection::vec(1e-3f64..1e6, 4)) {
        let mut set = ResultSet::new("x");
        for (m, v) in Metric::ALL.into_iter().zip(values) {
            set = set.with(m, v);
        }
        let t = analysis::ratio_table(&set, &set, &Metric::ALL).unwrap();
        prop_assert!(t.rows.iter().all(|r| r.ratio_percent == 100.0));
    }

    #[test]
    fn summaries_ignore_replicate_order(
        values in prop::collection::vec((1u64..6, 1.0f64..500.0), 1..40),
        shuffle_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = values.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle_seed));
        prop_assert_eq!(analysis::peak(&values).unwrap(), analysis::peak(&shuffled).unwrap());
        let n = analysis::collapse_replicates(&values).len();
        prop_assert_eq!(analysis::plateau(&values, n).unwrap(), analysis::plateau(&shuffled, n).unwrap());
    }

    #[test]
    fn cache_model_is_deterministic(trace in prop::collection::vec(0u64..1 << 20, 1..2000)) {
        let mut a = ToyCacheModel::new(64, 4, Prefetch::NextLine);
        let mut b = ToyCacheModel::new(64, 4, Prefetch::NextLine);
        let ra = oracle::simulate_misses(&trace, &mut a);
        let rb = oracle::simulate_misses(&trace, &mut b);
        prop_assert_eq!(a.misses(), b.misses());
        prop_assert!((0.0..=1.0).contains(&ra));
        prop_assert_eq!(ra, rb);
    }
}

#[test]
fn empty_sweep_report_serializes_empty_series() {
    let plan = SweepPlan::new(
        SweepKind::LatencyVsBuffer,
        DeviceProfile::anonymous("dram", 0),
        vec![4096],
        vec![0],
    );
    let report = SweepReport::empty(plan, inspect_environment());
    let text = model::serialize(&report, None);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for s in v["record"]["series"].as_array().unwrap() {
        assert_eq!(s["entries"].as_array().unwrap().len(), 0);
    }
    assert_eq!(model::deserialize::<SweepReport>(&text).unwrap(), report);
}
