//! One DLRM training iteration as a dependency graph of kernels and
//! collectives, evaluated by critical path over a cluster model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::ELEMENT_BYTES;
use crate::error::{config_err, Result};
use crate::netsim::{all_to_all, ring_allreduce};
use crate::topology::ClusterSpec;

/// Kernels whose times come from the profile.
pub const KERNELS: [&str; 7] = [
    "bottom_mlp",
    "embedding",
    "interaction",
    "top_mlp",
    "top_mlp_bwd",
    "embedding_bwd",
    "bottom_mlp_bwd",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    Baseline,
    Fused,
}

impl std::str::FromStr for GraphMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(GraphMode::Baseline),
            "fused" => Ok(GraphMode::Fused),
            other => config_err(format!("unknown graph mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Compute,
    Collective,
    FusedEmbedA2a,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cost {
    /// Profiled kernel time, looked up by name.
    Kernel(String),
    AllToAll { bytes_per_pair: u64 },
    AllReduce { bytes: u64 },
    /// Embedding kernel overlapped with its All-to-All.
    Fused { kernel: String, bytes_per_pair: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub kind: NodeKind,
    pub cost: Cost,
    /// Indices of nodes that must finish first.
    pub deps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecGraph {
    pub mode: GraphMode,
    pub nodes: Vec<GraphNode>,
}

/// Model shape plus the per-kernel time profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub embedding_dim: usize,
    pub avg_mlp_size: usize,
    pub num_mlp_layers: usize,
    pub avg_pooling: usize,
    pub tables_per_gpu: usize,
    pub local_batch: usize,
    /// Seconds per kernel, keyed by the names in [`KERNELS`].
    pub kernel_times: BTreeMap<String, f64>,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embedding_dim", self.embedding_dim),
            ("avg_mlp_size", self.avg_mlp_size),
            ("num_mlp_layers", self.num_mlp_layers),
            ("avg_pooling", self.avg_pooling),
            ("tables_per_gpu", self.tables_per_gpu),
            ("local_batch", self.local_batch),
        ] {
            if v == 0 {
                return config_err(format!("model.{name} must be positive"));
            }
        }
        for (k, &v) in &self.kernel_times {
            if !(v >= 0.0) || !v.is_finite() {
                return config_err(format!("kernel time {k} must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn kernel_time(&self, name: &str) -> Result<f64> {
        self.kernel_times
            .get(name)
            .copied()
            .ok_or_else(|| crate::Error::Config(format!("missing kernel time for {name:?}")))
    }

    /// Pooled embedding bytes one GPU sends to each other GPU.
    pub fn a2a_bytes_per_pair(&self) -> u64 {
        (self.tables_per_gpu * self.local_batch * self.embedding_dim) as u64 * ELEMENT_BYTES
    }

    /// Gradient bytes of all MLP layers.
    pub fn allreduce_bytes(&self) -> u64 {
        (self.num_mlp_layers * self.avg_mlp_size * self.avg_mlp_size) as u64 * ELEMENT_BYTES
    }

    /// Same model with every kernel time multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut p = self.clone();
        for v in p.kernel_times.values_mut() {
            *v *= s;
        }
        p
    }
}

/// Builds the iteration graph. The fused graph replaces the forward
/// embedding kernel and its All-to-All with one node; the rest is shared.
pub fn build_dlrm_graph(params: &ModelParams, mode: GraphMode) -> Result<ExecGraph> {
    params.validate()?;
    let mut nodes: Vec<GraphNode> = Vec::new();
    let mut add = |id: &str, kind: NodeKind, cost: Cost, deps: Vec<usize>| {
        nodes.push(GraphNode {
            id: id.into(),
            kind,
            cost,
            deps,
        });
        nodes.len() - 1
    };
    let kernel = |n: &str| Cost::Kernel(n.to_string());
    let a2a = Cost::AllToAll {
        bytes_per_pair: params.a2a_bytes_per_pair(),
    };
    let bottom = add("bottom_mlp", NodeKind::Compute, kernel("bottom_mlp"), vec![]);
    let embedded = match mode {
        GraphMode::Baseline => {
            let emb = add("embedding", NodeKind::Compute, kernel("embedding"), vec![]);
            add("a2a_fwd", NodeKind::Collective, a2a.clone(), vec![emb])
        }
        GraphMode::Fused => add(
            "fused_embed_a2a",
            NodeKind::FusedEmbedA2a,
            Cost::Fused {
                kernel: "embedding".into(),
                bytes_per_pair: params.a2a_bytes_per_pair(),
            },
            vec![],
        ),
    };
    let inter = add("interaction", NodeKind::Compute, kernel("interaction"), vec![embedded, bottom]);
    let top = add("top_mlp", NodeKind::Compute, kernel("top_mlp"), vec![inter]);
    let top_bwd = add("top_mlp_bwd", NodeKind::Compute, kernel("top_mlp_bwd"), vec![top]);
    let a2a_bwd = add("a2a_bwd", NodeKind::Collective, a2a, vec![top_bwd]);
    add("embedding_bwd", NodeKind::Compute, kernel("embedding_bwd"), vec![a2a_bwd]);
    let bottom_bwd = add("bottom_mlp_bwd", NodeKind::Compute, kernel("bottom_mlp_bwd"), vec![top_bwd]);
    add(
        "allreduce",
        NodeKind::Collective,
        Cost::AllReduce {
            bytes: params.allreduce_bytes(),
        },
        vec![top_bwd, bottom_bwd],
    );
    Ok(ExecGraph { mode, nodes })
}

impl ExecGraph {
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// (from, to) pairs by id.
    pub fn edges(&self) -> Vec<(String, String)> {
        let mut e: Vec<_> = self
            .nodes
            .iter()
            .flat_map(|n| n.deps.iter().map(|&d| (self.nodes[d].id.clone(), n.id.clone())))
            .collect();
        e.sort();
        e
    }

    /// Kahn order, ties broken by node index. Errors on a cycle.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        self.topological_order_by(|ready| ready.iter().copied().min().unwrap())
    }

    /// Topological order where `pick` chooses among ready nodes.
    pub fn topological_order_by(&self, mut pick: impl FnMut(&[usize]) -> usize) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut indeg: Vec<usize> = self.nodes.iter().map(|x| x.deps.len()).collect();
        for node in &self.nodes {
            if node.deps.iter().any(|&d| d >= n) {
                return config_err(format!("node {} depends on a missing node", node.id));
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while !ready.is_empty() {
            let i = pick(&ready);
            ready.retain(|&r| r != i);
            order.push(i);
            for (j, node) in self.nodes.iter().enumerate() {
                if node.deps.contains(&i) {
                    indeg[j] -= 1;
                    if indeg[j] == 0 {
                        ready.push(j);
                    }
                }
            }
        }
        if order.len() != n {
            return config_err("execution graph has a cycle");
        }
        Ok(order)
    }
}

/// Network and memory parameters collectives are costed with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectiveModel {
    pub max_message_size: u64,
    pub local_store_bw: f64,
}

impl Default for CollectiveModel {
    fn default() -> Self {
        Self {
            max_message_size: 1 << 20,
            local_store_bw: 1.0e12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeTiming {
    pub id: String,
    pub kind: NodeKind,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassResult {
    pub mode: GraphMode,
    pub total: f64,
    /// In graph node order.
    pub nodes: Vec<NodeTiming>,
}

impl PassResult {
    pub fn duration(&self, id: &str) -> Option<f64> {
        self.nodes.iter().find(|n| n.id == id).map(|n| n.end - n.start)
    }
}

/// Time of each node in isolation.
pub fn node_durations(graph: &ExecGraph, cluster: &ClusterSpec, params: &ModelParams, net: &CollectiveModel) -> Result<Vec<f64>> {
    cluster.validate()?;
    let n = cluster.num_gpus();
    let a2a = |bytes: u64| -> Result<f64> {
        Ok(all_to_all(cluster, &vec![0.0; n], bytes, net.max_message_size, net.local_store_bw)?.finish())
    };
    graph
        .nodes
        .iter()
        .map(|node| match &node.cost {
            Cost::Kernel(k) => params.kernel_time(k),
            Cost::AllToAll { bytes_per_pair } => a2a(*bytes_per_pair),
            Cost::AllReduce { bytes } => ring_allreduce(cluster, *bytes, 0.0),
            Cost::Fused { kernel, bytes_per_pair } => Ok(params.kernel_time(kernel)?.max(a2a(*bytes_per_pair)?)),
        })
        .collect()
}

/// Critical-path evaluation with nodes visited in `order` (must be topological).
pub fn evaluate_in_order(graph: &ExecGraph, durations: &[f64], order: &[usize]) -> Result<PassResult> {
    let mut end = vec![f64::NAN; graph.nodes.len()];
    let mut start = vec![0.0; graph.nodes.len()];
    for &i in order {
        let mut s = 0.0f64;
        for &d in &graph.nodes[i].deps {
            if end[d].is_nan() {
                return config_err(format!("node {} evaluated before its dependency", graph.nodes[i].id));
            }
            s = s.max(end[d]);
        }
        start[i] = s;
        end[i] = s + durations[i];
    }
    let nodes = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| NodeTiming {
            id: n.id.clone(),
            kind: n.kind,
            start: start[i],
            end: end[i],
        })
        .collect();
    Ok(PassResult {
        mode: graph.mode,
        total: end.iter().copied().fold(0.0, f64::max),
        nodes,
    })
}

/// Critical-path time of one iteration on `cluster`.
pub fn simulate_training_pass(
    graph: &ExecGraph,
    cluster: &ClusterSpec,
    params: &ModelParams,
    net: &CollectiveModel,
) -> Result<PassResult> {
    let durations = node_durations(graph, cluster, params, net)?;
    evaluate_in_order(graph, &durations, &graph.topological_order()?)
}

/// Baseline and fused iterations side by side.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleoutResult {
    pub baseline: PassResult,
    pub fused: PassResult,
    pub ratio: f64,
    /// Forward All-to-All time on the baseline critical path (not hidden by the bottom MLP).
    pub exposed_a2a: f64,
    /// min(embedding, exposed All-to-All).
    pub saving_bound: f64,
}

pub fn compare_scaleout(cluster: &ClusterSpec, params: &ModelParams, net: &CollectiveModel) -> Result<ScaleoutResult> {
    let baseline = simulate_training_pass(&build_dlrm_graph(params, GraphMode::Baseline)?, cluster, params, net)?;
    let fused = simulate_training_pass(&build_dlrm_graph(params, GraphMode::Fused)?, cluster, params, net)?;
    let find = |r: &PassResult, id: &str| r.nodes.iter().find(|n| n.id == id).cloned().expect("node present");
    let emb = find(&baseline, "embedding");
    let a2a = find(&baseline, "a2a_fwd");
    let bottom = find(&baseline, "bottom_mlp");
    let exposed_a2a = a2a.end.max(bottom.end) - emb.end.max(bottom.end);
    Ok(ScaleoutResult {
        ratio: fused.total / baseline.total,
        saving_bound: (emb.end - emb.start).min(exposed_a2a),
        exposed_a2a,
        baseline,
        fused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(times: [f64; 7]) -> ModelParams {
        ModelParams {
            embedding_dim: 92,
            avg_mlp_size: 682,
            num_mlp_layers: 43,
            avg_pooling: 70,
            tables_per_gpu: 4,
            local_batch: 256,
            kernel_times: KERNELS.iter().map(|k| k.to_string()).zip(times).collect(),
        }
    }

    fn torus() -> ClusterSpec {
        ClusterSpec::torus(4, 4)
    }

    #[test]
    fn baseline_graph_topology() {
        let g = build_dlrm_graph(&params([1.0; 7]), GraphMode::Baseline).unwrap();
        assert_eq!(g.nodes.len(), 10);
        let e = |a: &str, b: &str| (a.to_string(), b.to_string());
        let mut want = vec![
            e("embedding", "a2a_fwd"),
            e("a2a_fwd", "interaction"),
            e("bottom_mlp", "interaction"),
            e("interaction", "top_mlp"),
            e("top_mlp", "top_mlp_bwd"),
            e("top_mlp_bwd", "a2a_bwd"),
            e("a2a_bwd", "embedding_bwd"),
            e("top_mlp_bwd", "bottom_mlp_bwd"),
            e("top_mlp_bwd", "allreduce"),
            e("bottom_mlp_bwd", "allreduce"),
        ];
        want.sort();
        assert_eq!(g.edges(), want);
    }

    #[test]
    fn fused_graph_merges_two_nodes() {
        let p = params([1.0; 7]);
        let b = build_dlrm_graph(&p, GraphMode::Baseline).unwrap();
        let f = build_dlrm_graph(&p, GraphMode::Fused).unwrap();
        assert_eq!(f.nodes.len(), b.nodes.len() - 1);
        assert!(f.index_of("embedding").is_none() && f.index_of("a2a_fwd").is_none());
        assert_eq!(f.nodes.iter().filter(|n| n.kind == NodeKind::FusedEmbedA2a).count(), 1);
        assert_eq!(b.nodes.iter().filter(|n| n.kind == NodeKind::FusedEmbedA2a).count(), 0);
        let rename = |s: String| if s == "a2a_fwd" { "fused_embed_a2a".to_string() } else { s };
        let mut from_baseline: Vec<_> = b
            .edges()
            .into_iter()
            .filter(|(a, _)| a != "embedding")
            .map(|(a, c)| (rename(a), rename(c)))
            .collect();
        from_baseline.sort();
        assert_eq!(f.edges(), from_baseline);
    }

    #[test]
    fn interaction_waits_for_a2a() {
        let p = params([1e-3; 7]);
        for mode in [GraphMode::Baseline, GraphMode::Fused] {
            let g = build_dlrm_graph(&p, mode).unwrap();
            let r = simulate_training_pass(&g, &torus(), &p, &CollectiveModel::default()).unwrap();
            let src = if mode == GraphMode::Baseline { "a2a_fwd" } else { "fused_embed_a2a" };
            let a = r.nodes.iter().find(|n| n.id == src).unwrap();
            let i = r.nodes.iter().find(|n| n.id == "interaction").unwrap();
            assert!(i.start >= a.end);
        }
    }

    #[test]
    fn zero_compute_is_pure_collectives() {
        let p = params([0.0; 7]);
        let c = torus();
        let net = CollectiveModel::default();
        let r = compare_scaleout(&c, &p, &net).unwrap();
        let n = c.num_gpus();
        let a2a = all_to_all(&c, &vec![0.0; n], p.a2a_bytes_per_pair(), net.max_message_size, net.local_store_bw)
            .unwrap()
            .finish();
        let ar = ring_allreduce(&c, p.allreduce_bytes(), 0.0).unwrap();
        assert_eq!(r.baseline.total, a2a + a2a.max(ar));
        assert_eq!(r.fused.total, r.baseline.total);
    }

    #[test]
    fn missing_kernel_time_is_config_error() {
        let mut p = params([1.0; 7]);
        p.kernel_times.remove("top_mlp");
        let g = build_dlrm_graph(&p, GraphMode::Baseline).unwrap();
        let err = simulate_training_pass(&g, &torus(), &p, &CollectiveModel::default()).unwrap_err();
        assert!(err.to_string().contains("top_mlp"));
    }

    #[test]
    fn saving_equals_closed_form_when_bottom_mlp_is_short() {
        for emb in [1e-5, 1e-4, 1e-3, 1e-2] {
            let p = params([1e-6, emb, 1e-4, 2e-4, 3e-4, 1e-4, 1e-4]);
            let r = compare_scaleout(&torus(), &p, &CollectiveModel::default()).unwrap();
            let saving = r.baseline.total - r.fused.total;
            assert!((saving - r.saving_bound).abs() <= 1e-12 * r.baseline.total, "emb {emb}: {saving} vs {}", r.saving_bound);
        }
    }

    #[test]
    fn random_topological_replay_is_order_free() {
        let p = params([1e-4, 2e-4, 3e-5, 1e-4, 2e-4, 2e-4, 1e-4]);
        let c = torus();
        let net = CollectiveModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mode in [GraphMode::Baseline, GraphMode::Fused] {
            let g = build_dlrm_graph(&p, mode).unwrap();
            let d = node_durations(&g, &c, &p, &net).unwrap();
            let want = evaluate_in_order(&g, &d, &g.topological_order().unwrap()).unwrap();
            for _ in 0..50 {
                let order = g.topological_order_by(|r| r[rng.gen_range(0..r.len())]).unwrap();
                assert_eq!(evaluate_in_order(&g, &d, &order).unwrap(), want);
            }
        }
    }

    #[test]
    fn scaling_all_costs_scales_total() {
        let p = params([1e-4, 2e-4, 3e-5, 1e-4, 2e-4, 2e-4, 1e-4]);
        let c = torus();
        let net = CollectiveModel {
            max_message_size: 1 << 20,
            local_store_bw: 1e12,
        };
        let base = compare_scaleout(&c, &p, &net).unwrap();
        for s in [0.5, 2.0, 10.0] {
            let scaled_net = CollectiveModel {
                local_store_bw: net.local_store_bw / s,
                ..net.clone()
            };
            let r = compare_scaleout(&c.scaled(s), &p.scaled(s), &scaled_net).unwrap();
            for (a, b) in [(r.baseline.total, base.baseline.total), (r.fused.total, base.fused.total)] {
                assert!((a - s * b).abs() <= 1e-9 * a, "{a} vs {s} x {b}");
            }
        }
    }

    #[test]
    fn cycle_is_rejected() {
        let mut g = build_dlrm_graph(&params([1.0; 7]), GraphMode::Baseline).unwrap();
        let last = g.nodes.len() - 1;
        g.nodes[0].deps.push(last);
        assert!(g.topological_order().is_err());
    }

    proptest::proptest! {
        #[test]
        fn fused_never_slower(times in proptest::array::uniform7(0.0f64..1e-2)) {
            let p = params(times);
            let r = compare_scaleout(&ClusterSpec::torus(2, 4), &p, &CollectiveModel::default()).unwrap();
            proptest::prop_assert!(r.fused.total <= r.baseline.total);
            proptest::prop_assert!(r.baseline.total - r.fused.total <= r.saving_bound * (1.0 + 1e-12) + 1e-15);
        }
    }
}
