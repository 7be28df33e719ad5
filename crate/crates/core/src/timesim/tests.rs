use super::*;
use crate::embedding::{shuffled_oracle, PoolingMode, PoolingSize, ValueMode};
use crate::protocol::{compare_outputs, Action};
use crate::topology::{NicLink, TopologyKind};
use proptest::prelude::*;

fn unit_model() -> ComputeModel {
    ComputeModel {
        per_wg_base: 1.0,
        per_element: 0.0,
        contention_knee: 1e9,
        contention_slope: 0.0,
        api_overhead: 0.0,
        sync_overhead: 0.0,
        kernel_launch: 0.0,
        local_store_bw: f64::INFINITY,
        flag_poll: 0.0,
    }
}

fn toy(policy: Policy) -> SimConfig {
    SimConfig {
        problem: EmbeddingProblem {
            num_gpus: 2,
            tables_per_gpu: 4,
            global_batch: 4,
            embedding_dim: 2,
            pooling: PoolingSize::Fixed(2),
            pooling_mode: PoolingMode::Sum,
            rows_per_table: 8,
            value_mode: ValueMode::ExactInt,
        },
        cluster: ClusterSpec {
            num_nodes: 2,
            gpus_per_node: 1,
            p2p_link: None,
            // a 16-byte payload takes one time unit, a flag half of one
            nic_link: NicLink {
                bandwidth: 16.0,
                per_message_overhead: 0.0,
                latency: 1.0,
            },
            topology: TopologyKind::Flat,
        },
        compute: unit_model(),
        occupancy: OccupancyConfig {
            max_concurrent_wgs: 2,
            occupancy_fraction: 1.0,
        },
        policy,
        slice_size: 2,
        vectors_per_wg: 1,
        zero_copy: true,
        max_message_size: 1 << 20,
    }
}

fn small_2node() -> SimConfig {
    let mut c = toy(Policy::CommAware);
    c.problem.global_batch = 64;
    c.problem.tables_per_gpu = 6;
    c.problem.embedding_dim = 16;
    c.cluster = ClusterSpec::inter_node_pair();
    c.compute = ComputeModel::default();
    c.occupancy = OccupancyConfig {
        max_concurrent_wgs: 16,
        occupancy_fraction: 0.75,
    };
    c.slice_size = 8;
    c.vectors_per_wg = 2;
    c
}

#[derive(Debug, PartialEq, serde::Deserialize)]
struct GoldenEvent {
    time: f64,
    actor: String,
    action: Action,
    #[serde(default)]
    slice: Option<usize>,
}

#[test]
fn toy_matches_hand_schedule() {
    let cfg = toy(Policy::CommAware);
    let tl = simulate_fused(&cfg, FusedOptions { payload: None, record_events: true }).unwrap();
    let mut got: Vec<GoldenEvent> = tl
        .log
        .events
        .iter()
        .filter(|e| e.action != Action::WgComplete)
        .map(|e| GoldenEvent {
            time: e.time.unwrap(),
            actor: e.actor.clone(),
            action: e.action,
            slice: e.slice,
        })
        .collect();
    let key = |e: &GoldenEvent| (e.time.to_bits(), e.actor.clone(), format!("{:?}", e.action), e.slice);
    got.sort_by_key(key);
    let mut want: Vec<GoldenEvent> = include_str!("../../tests/golden/toy_comm_aware.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    want.sort_by_key(key);
    assert_eq!(got, want);
    assert_eq!(tl.gpu_completion, vec![8.0, 8.0]);
    assert_eq!(tl.skew(), 0.0);
}

#[test]
fn toy_oblivious_delays_node1() {
    // node 0 sends its remote slices only after its local ones (triggers at
    // 5..8), so the last flag reaches node 1 at 8 + 1.5 (queue) + 1 + 0.5 + 1 = 12
    let tl = simulate_fused(&toy(Policy::Oblivious), FusedOptions::default()).unwrap();
    assert_eq!(tl.gpu_completion, vec![8.0, 12.0]);
    assert_eq!(tl.skew(), 0.5);
}

#[test]
fn free_network_equals_pure_compute() {
    let mut cfg = small_2node();
    cfg.compute = cfg.compute.compute_only();
    cfg.compute.contention_knee = 1e9;
    cfg.cluster.nic_link = NicLink {
        bandwidth: f64::INFINITY,
        per_message_overhead: 0.0,
        latency: 0.0,
    };
    let plan = cfg.plan().unwrap();
    // independent: each persistent WG runs its list back to back
    let mut expected = 0.0f64;
    for pwg in 0..plan.num_pwgs() {
        let t: f64 = plan
            .task_list(pwg)
            .iter()
            .map(|&w| {
                let wg = &plan.map.wgs[w];
                cfg.compute.wg_work((wg.rows * 2 * cfg.problem.embedding_dim) as u64)
            })
            .sum();
        expected = expected.max(t);
    }
    let tl = simulate_fused(&cfg, FusedOptions::default()).unwrap();
    assert!((tl.total_time() - expected).abs() <= 1e-12 * expected, "{} vs {expected}", tl.total_time());
}

#[test]
fn free_network_fused_not_slower_than_baseline() {
    let mut cfg = small_2node();
    cfg.cluster.nic_link = NicLink {
        bandwidth: f64::INFINITY,
        per_message_overhead: 0.0,
        latency: 0.0,
    };
    let f = simulate_fused(&cfg, FusedOptions::default()).unwrap().total_time();
    let b = simulate_baseline(&cfg).unwrap().total_time();
    assert!(f <= b, "{f} > {b}");
}

#[test]
fn single_gpu_baseline_is_compute_plus_copy() {
    let mut cfg = small_2node();
    cfg.problem.num_gpus = 1;
    cfg.cluster.num_nodes = 1;
    let tl = simulate_baseline(&cfg).unwrap();
    assert_eq!(tl.counters.messages, 0);
    let compute = tl.phases.iter().find(|p| p.name == "embedding_kernels").unwrap().end;
    assert!(compute >= tl.compute_end(0));
    let copy = cfg.compute.store_time(cfg.problem.produced_bytes_per_gpu());
    let want = compute + copy + cfg.compute.kernel_launch;
    assert!((tl.total_time() - want).abs() < 1e-15, "{} vs {want}", tl.total_time());
    let fused = simulate_fused(&cfg, FusedOptions::default()).unwrap();
    assert_eq!(fused.counters.messages, 0);
    assert_eq!(fused.counters.intermediate_bytes, 0);
}

#[test]
fn baseline_exposes_all_to_all_after_compute() {
    let cfg = small_2node();
    let tl = simulate_baseline(&cfg).unwrap();
    let a2a = tl.phases.iter().find(|p| p.name == "all_to_all" && p.gpu == 0).unwrap();
    assert!(a2a.start >= tl.compute_end(0));
    assert!(a2a.end > a2a.start);
    assert_eq!(tl.counters.intermediate_bytes, 2 * cfg.problem.produced_bytes_per_gpu());
    // 6 tables x 32 rows x 16 dims x 4 bytes in one message each way
    assert_eq!(tl.counters.messages, 2);
    assert_eq!(tl.counters.bytes, 2 * 6 * 32 * 16 * 4);
}

#[test]
fn remote_puts_precede_local_compute() {
    let cfg = small_2node();
    let plan = cfg.plan().unwrap();
    let tl = simulate_fused(&cfg, FusedOptions::default()).unwrap();
    for w in &tl.workers {
        let mut seen_local = false;
        for i in &w.intervals {
            match i.activity {
                Activity::Compute { wg, .. } => {
                    seen_local |= !plan.map.slices[plan.map.wgs[wg].slice_ix].is_remote();
                }
                Activity::Trigger { slice } if plan.map.slices[slice].is_remote() => {
                    assert!(!seen_local, "remote trigger after local compute on {w:?}");
                }
                _ => {}
            }
        }
    }
}

#[test]
fn payload_tracking_matches_oracle() {
    for (cluster, zero_copy) in [
        (ClusterSpec::inter_node_pair(), true),
        (ClusterSpec::intra_node_quad(), true),
        (ClusterSpec::intra_node_quad(), false),
    ] {
        let mut cfg = small_2node();
        cfg.problem.num_gpus = cluster.num_gpus();
        cfg.cluster = cluster;
        cfg.zero_copy = zero_copy;
        let data = EmbeddingData::generate(&cfg.problem, 17).unwrap();
        let tl = simulate_fused(&cfg, FusedOptions { payload: Some(&data), record_events: true }).unwrap();
        let want = shuffled_oracle(&cfg.problem, &data).unwrap();
        compare_outputs(tl.outputs.as_ref().unwrap(), &want, ValueMode::ExactInt).unwrap();
        let plan = cfg.plan().unwrap();
        assert!(tl.log.fence_violations(&plan).is_empty());
    }
}

#[test]
fn zero_copy_intra_node_has_no_intermediate_bytes() {
    let mut cfg = small_2node();
    cfg.cluster = ClusterSpec::intra_node_quad();
    cfg.problem.num_gpus = 4;
    let fused = simulate_fused(&cfg, FusedOptions::default()).unwrap();
    assert_eq!(fused.counters.intermediate_bytes, 0);
    assert_eq!(fused.counters.messages, 0);
    assert!(fused.counters.p2p_bytes > 0);
    cfg.zero_copy = false;
    let staged = simulate_fused(&cfg, FusedOptions::default()).unwrap();
    assert_eq!(staged.counters.intermediate_bytes, 4 * cfg.problem.produced_bytes_per_gpu());
    let base = simulate_baseline(&cfg).unwrap();
    assert_eq!(base.counters.intermediate_bytes, 4 * cfg.problem.produced_bytes_per_gpu());
}

#[test]
fn timelines_are_ordered_and_causal() {
    let cfg = small_2node();
    let tl = simulate_fused(&cfg, FusedOptions { payload: None, record_events: true }).unwrap();
    tl.check_intervals().unwrap();
    let times: Vec<f64> = tl.log.events.iter().map(|e| e.time.unwrap()).collect();
    assert!(times.windows(2).all(|w| w[0] <= w[1]));
    simulate_baseline(&cfg).unwrap().check_intervals().unwrap();
}

#[test]
fn compute_work_is_schedule_invariant() {
    let cfg = small_2node();
    let a = simulate_fused(&cfg, FusedOptions::default()).unwrap().compute_work();
    let mut o = cfg.clone();
    o.policy = Policy::Oblivious;
    let b = simulate_fused(&o, FusedOptions::default()).unwrap().compute_work();
    let mut p = cfg.clone();
    p.occupancy.occupancy_fraction = 0.25;
    let c = simulate_fused(&p, FusedOptions::default()).unwrap().compute_work();
    assert!((a - b).abs() <= 1e-9 * a && (a - c).abs() <= 1e-9 * a, "{a} {b} {c}");
}

#[test]
fn identical_runs_are_identical() {
    let cfg = small_2node();
    let a = simulate_fused(&cfg, FusedOptions { payload: None, record_events: true }).unwrap();
    let b = simulate_fused(&cfg, FusedOptions { payload: None, record_events: true }).unwrap();
    assert_eq!(a.workers, b.workers);
    assert_eq!(a.log, b.log);
    let grid = SweepGrid {
        slice_sizes: vec![2, 8, 32],
        ..Default::default()
    };
    let csv = |rows: &[SweepRow]| {
        let mut buf = Vec::new();
        write_csv(rows, "{}", &mut buf).unwrap();
        buf
    };
    let r1 = sweep(&cfg, Experiment::SliceSize, &grid).unwrap();
    let r2 = sweep(&cfg, Experiment::SliceSize, &grid).unwrap();
    assert_eq!(csv(&r1), csv(&r2));
}

#[test]
fn single_point_grid_gives_one_row() {
    let cfg = small_2node();
    let grid = SweepGrid {
        slice_sizes: vec![cfg.slice_size],
        ..Default::default()
    };
    let rows = sweep(&cfg, Experiment::SliceSize, &grid).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].ratio, rows[0].fused_time / rows[0].baseline_time);
    let err = sweep(&cfg, Experiment::SliceSize, &SweepGrid::default()).unwrap_err();
    assert!(err.to_string().contains("no configurations"));
}

#[test]
fn csv_starts_with_config_header() {
    let cfg = small_2node();
    let rows = sweep(&cfg, Experiment::Occupancy, &SweepGrid { occupancies: vec![0.5], ..Default::default() }).unwrap();
    let mut buf = Vec::new();
    write_csv(&rows, &serde_json::to_string(&cfg).unwrap(), &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config: {"));
    assert!(lines.next().unwrap().starts_with("experiment,batch,tables,slice_size,occupancy,policy,zero_copy,fused_time"));
}

#[test]
fn trace_export_is_json_array() {
    let tl = simulate_fused(&toy(Policy::CommAware), FusedOptions::default()).unwrap();
    let mut buf = Vec::new();
    tl.write_trace(&mut buf).unwrap();
    let recs: Vec<TraceRecord> = serde_json::from_slice(&buf).unwrap();
    assert!(recs.iter().any(|r| r.name == "fused_kernel" && r.dur == 8e6));
    assert!(recs.iter().any(|r| r.actor == "gpu0/wg1" && r.name == "drain"));
}

proptest! {
    #[test]
    fn contention_is_one_below_knee_and_non_decreasing(knee in 0.0f64..200.0, slope in 0.0f64..1.0, c in 0usize..300) {
        let m = ComputeModel { contention_knee: knee, contention_slope: slope, ..ComputeModel::default() };
        if c as f64 <= knee {
            prop_assert_eq!(m.contention(c), 1.0);
        }
        prop_assert!(m.contention(c + 1) >= m.contention(c));
    }
}
