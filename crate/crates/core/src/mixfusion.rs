//! Subgraph sampling around mixer accounts, message-passing encoding and
//! pair fusion.

use std::collections::HashSet;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PairSample, TransactionGraph};
use crate::error::{Error, Result};
use crate::grad::{Graph, Mat, Var};
use crate::nn::{uniform, Activation, Bound, ParamStore};

/// Local neighborhood of one account. Node 0 is the center.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    pub center_id: String,
    pub node_ids: Vec<String>,
    /// Symmetric neighbor lists over local indices.
    pub adjacency: Vec<Vec<usize>>,
    /// `|V| x d_T`.
    pub features: Mat,
}

impl Subgraph {
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }
}

fn frontier_rng(seed: u64, center: usize, depth: usize) -> ChaCha8Rng {
    let mix = (center as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (depth as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    ChaCha8Rng::seed_from_u64(seed ^ mix)
}

/// Breadth-first closure of depth `k` around `center`, holding at most `cap`
/// nodes. When a frontier would overflow the cap, a seeded sample of it is
/// kept.
pub fn sample_k_hop(graph: &TransactionGraph, center: &str, k: usize, cap: usize, seed: u64) -> Result<Subgraph> {
    if cap == 0 {
        return Err(Error::Argument("subgraph cap must be at least 1".into()));
    }
    let c = graph.lookup(center)?;
    let mut nodes = vec![c];
    let mut seen: HashSet<usize> = HashSet::from([c]);
    let mut frontier = vec![c];
    for depth in 1..=k {
        if nodes.len() >= cap || frontier.is_empty() {
            break;
        }
        let mut next: Vec<usize> = frontier
            .iter()
            .flat_map(|&u| graph.neighbors(u).iter().copied())
            .filter(|v| !seen.contains(v))
            .collect();
        next.sort_unstable();
        next.dedup();
        let room = cap - nodes.len();
        if next.len() > room {
            let mut rng = frontier_rng(seed, c, depth);
            let mut keep: Vec<usize> = index::sample(&mut rng, next.len(), room).into_iter().map(|i| next[i]).collect();
            keep.sort_unstable();
            next = keep;
        }
        seen.extend(&next);
        nodes.extend(&next);
        frontier = next;
    }
    let local: std::collections::HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let adjacency = nodes
        .iter()
        .map(|&g| graph.neighbors(g).iter().filter_map(|v| local.get(v).copied()).collect())
        .collect();
    let mut features = Array2::zeros((nodes.len(), graph.d_t()));
    for (mut row, &g) in features.rows_mut().into_iter().zip(&nodes) {
        row.assign(&ndarray::ArrayView1::from(&graph.account(g).features));
    }
    Ok(Subgraph {
        center_id: center.to_string(),
        node_ids: nodes.iter().map(|&g| graph.account(g).id.clone()).collect(),
        adjacency,
        features,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Center,
    MeanPool,
}

/// Settings of the subgraph encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixFusionConfig {
    pub k: usize,
    pub layers: usize,
    pub cap: usize,
    pub d_c: usize,
    pub aggregation: Aggregation,
    pub activation: Activation,
    pub readout: Readout,
    pub bias: bool,
}

impl Default for MixFusionConfig {
    fn default() -> Self {
        Self {
            k: 2,
            layers: 2,
            cap: 256,
            d_c: 46,
            aggregation: Aggregation::Mean,
            activation: Activation::Relu,
            readout: Readout::Center,
            bias: false,
        }
    }
}

/// Weights of the message-passing layers, stored `d_in x d_out` under
/// `layer{l}.weight` (and `layer{l}.bias` when enabled).
#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    pub d_in: usize,
    pub d_c: usize,
    pub layers: usize,
    pub aggregation: Aggregation,
    pub activation: Activation,
    pub readout: Readout,
    pub store: ParamStore,
}

impl GnnParams {
    /// He-uniform initialization, so that relu layers roughly preserve scale.
    pub fn new(d_in: usize, cfg: &MixFusionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.layers == 0 || cfg.d_c == 0 || d_in == 0 {
            return Err(Error::Config("encoder needs at least one layer and positive widths".into()));
        }
        let mut store = ParamStore::new();
        let mut width = d_in;
        for l in 0..cfg.layers {
            let bound = (6.0 / width as f64).sqrt();
            store.insert(format!("layer{l}.weight"), uniform(rng, width, cfg.d_c, bound));
            if cfg.bias {
                store.insert(format!("layer{l}.bias"), Array2::zeros((1, cfg.d_c)));
            }
            width = cfg.d_c;
        }
        Ok(Self {
            d_in,
            d_c: cfg.d_c,
            layers: cfg.layers,
            aggregation: cfg.aggregation,
            activation: cfg.activation,
            readout: cfg.readout,
            store,
        })
    }

    /// Builds parameters from explicit weight matrices (no bias).
    pub fn from_weights(weights: Vec<Mat>, aggregation: Aggregation, readout: Readout) -> Result<Self> {
        let Some(first) = weights.first() else {
            return Err(Error::Shape("at least one weight matrix is required".into()));
        };
        let d_in = first.nrows();
        let mut width = d_in;
        let mut store = ParamStore::new();
        for (l, w) in weights.iter().enumerate() {
            if w.nrows() != width {
                return Err(Error::Shape(format!("layer {l} expects {} inputs, chain provides {width}", w.nrows())));
            }
            width = w.ncols();
            store.insert(format!("layer{l}.weight"), w.clone());
        }
        Ok(Self {
            d_in,
            d_c: width,
            layers: weights.len(),
            aggregation,
            activation: Activation::Relu,
            readout,
            store,
        })
    }

    /// Row-stochastic (mean) or plain (sum) aggregation over each node and
    /// its neighbors.
    pub fn aggregation_matrix(&self, sub: &Subgraph) -> Mat {
        let n = sub.len();
        let mut a = Array2::zeros((n, n));
        for (i, nbrs) in sub.adjacency.iter().enumerate() {
            let w = match self.aggregation {
                Aggregation::Mean => 1.0 / (1 + nbrs.len()) as f64,
                Aggregation::Sum => 1.0,
            };
            a[[i, i]] += w;
            for &j in nbrs {
                a[[i, j]] += w;
            }
        }
        a
    }

    /// Differentiable encoding of `sub`, returning a `1 x d_C` row.
    pub fn forward(&self, g: &mut Graph, b: &Bound, sub: &Subgraph) -> Var {
        let agg = g.constant(self.aggregation_matrix(sub));
        let mut h = g.constant(sub.features.clone());
        for l in 0..self.layers {
            let m = g.matmul(agg, h);
            let mut z = g.matmul(m, b.var(&format!("layer{l}.weight")));
            if let Some(bias) = b.try_var(&format!("layer{l}.bias")) {
                z = g.add_row(z, bias);
            }
            h = match self.activation {
                Activation::Relu => g.relu(z),
            };
        }
        match self.readout {
            Readout::Center => g.select_row(h, 0),
            Readout::MeanPool => g.mean_rows(h),
        }
    }
}

fn check_subgraph(sub: &Subgraph, d_in: usize) -> Result<()> {
    if sub.is_empty() {
        return Err(Error::Shape("empty subgraph".into()));
    }
    if sub.features.ncols() != d_in || sub.features.nrows() != sub.len() || sub.adjacency.len() != sub.len() {
        return Err(Error::Shape(format!(
            "subgraph has {}x{} features for {} nodes, encoder expects width {d_in}",
            sub.features.nrows(),
            sub.features.ncols(),
            sub.len()
        )));
    }
    if sub.adjacency.iter().flatten().any(|&j| j >= sub.len()) {
        return Err(Error::Shape("adjacency index out of range".into()));
    }
    Ok(())
}

/// Embedding of the subgraph after all message-passing layers.
pub fn gnn_encode(sub: &Subgraph, params: &GnnParams) -> Result<Vec<f64>> {
    check_subgraph(sub, params.d_in)?;
    let mut g = Graph::new();
    let b = params.store.bind(&mut g, false);
    let out = params.forward(&mut g, &b, sub);
    Ok(g.value(out).iter().copied().collect())
}

/// Joint representation `[h_A | h_B]`, deposit side first.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRepresentation {
    pub values: Vec<f64>,
}

impl JointRepresentation {
    pub fn d_c(&self) -> usize {
        self.values.len() / 2
    }

    pub fn split(&self) -> (&[f64], &[f64]) {
        self.values.split_at(self.d_c())
    }
}

pub fn fuse(h_a: &[f64], h_b: &[f64]) -> Result<JointRepresentation> {
    if h_a.len() != h_b.len() {
        return Err(Error::Shape(format!("cannot fuse widths {} and {}", h_a.len(), h_b.len())));
    }
    let mut values = Vec::with_capacity(2 * h_a.len());
    values.extend_from_slice(h_a);
    values.extend_from_slice(h_b);
    Ok(JointRepresentation { values })
}

/// Subgraph encoder bound to its sampling settings.
#[derive(Debug, Clone, PartialEq)]
pub struct MixFusion {
    pub params: GnnParams,
    pub k: usize,
    pub cap: usize,
    pub seed: u64,
}

/// Per-account embeddings of a whole graph, rows in graph order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings {
    pub values: Mat,
}

impl MixFusion {
    pub fn new(d_t: usize, cfg: &MixFusionConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            params: GnnParams::new(d_t, cfg, &mut rng)?,
            k: cfg.k,
            cap: cfg.cap,
            seed,
        })
    }

    pub fn d_c(&self) -> usize {
        self.params.d_c
    }

    pub fn embed(&self, graph: &TransactionGraph, id: &str) -> Result<Vec<f64>> {
        let sub = sample_k_hop(graph, id, self.k, self.cap, self.seed)?;
        gnn_encode(&sub, &self.params)
    }

    /// Embeds every account; accounts are independent, so this runs in
    /// parallel on the ambient thread pool.
    pub fn embed_all(&self, graph: &TransactionGraph) -> Result<NodeEmbeddings> {
        if graph.d_t() != self.params.d_in {
            return Err(Error::Shape(format!(
                "graph has d_T = {}, encoder expects {}",
                graph.d_t(),
                self.params.d_in
            )));
        }
        let rows: Vec<Vec<f64>> = graph
            .accounts()
            .par_iter()
            .map(|a| self.embed(graph, &a.id))
            .collect::<Result<_>>()?;
        let mut values = Array2::zeros((rows.len(), self.d_c()));
        for (mut r, v) in values.axis_iter_mut(Axis(0)).zip(&rows) {
            r.assign(&ndarray::ArrayView1::from(v));
        }
        Ok(NodeEmbeddings { values })
    }

    pub fn joint(&self, graph: &TransactionGraph, deposit: &str, withdrawal: &str) -> Result<JointRepresentation> {
        fuse(&self.embed(graph, deposit)?, &self.embed(graph, withdrawal)?)
    }
}

impl NodeEmbeddings {
    pub fn row(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.row(i)
    }

    /// Fused rows for `pairs`, one per pair, as an `n x 2·d_C` matrix.
    pub fn joint_matrix(&self, graph: &TransactionGraph, pairs: &[PairSample]) -> Result<Mat> {
        let d_c = self.values.ncols();
        let mut out = Array2::zeros((pairs.len(), 2 * d_c));
        for (i, p) in pairs.iter().enumerate() {
            let a = graph.lookup(&p.deposit_id)?;
            let b = graph.lookup(&p.withdrawal_id)?;
            out.slice_mut(ndarray::s![i, ..d_c]).assign(&self.values.row(a));
            out.slice_mut(ndarray::s![i, d_c..]).assign(&self.values.row(b));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Account, Role, TxEdge};
    use crate::grad::tests::{check_gradient, random_mat};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn graph(n: usize, edges: &[(usize, usize)], d: usize) -> TransactionGraph {
        let accounts = (0..n)
            .map(|i| Account {
                id: format!("n{i}"),
                features: (0..d).map(|j| (i * d + j) as f64 * 0.1).collect(),
                role: Role::Normal,
            })
            .collect();
        let edges = edges
            .iter()
            .map(|&(a, b)| TxEdge {
                from_id: format!("n{a}"),
                to_id: format!("n{b}"),
                amount: 1.0,
                timestamp: 0,
                gas_price: 0,
            })
            .collect();
        TransactionGraph::new(d, accounts, edges).unwrap()
    }

    /// Dense reference: H ← relu(D̃⁻¹(A+I) H W) per layer, center row.
    fn dense_oracle(sub: &Subgraph, weights: &[Mat]) -> Vec<f64> {
        let n = sub.len();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            a[i][i] = 1.0;
            for &j in &sub.adjacency[i] {
                a[i][j] = 1.0;
            }
        }
        for row in a.iter_mut() {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let mut h: Vec<Vec<f64>> = sub.features.rows().into_iter().map(|r| r.to_vec()).collect();
        for w in weights {
            let mixed: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..h[0].len()).map(|c| (0..n).map(|j| a[i][j] * h[j][c]).sum()).collect())
                .collect();
            h = mixed
                .iter()
                .map(|row| {
                    (0..w.ncols())
                        .map(|o| (0..w.nrows()).map(|k| row[k] * w[[k, o]]).sum::<f64>().max(0.0))
                        .collect()
                })
                .collect();
        }
        h[0].clone()
    }

    fn random_subgraph(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Subgraph {
        let mut adjacency = vec![Vec::new(); n];
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < 0.5 {
                    adjacency[i].push(j);
                    adjacency[j].push(i);
                }
            }
        }
        Subgraph {
            center_id: "c".into(),
            node_ids: (0..n).map(|i| format!("v{i}")).collect(),
            adjacency,
            features: random_mat(rng, n, d),
        }
    }

    #[test]
    fn k_zero_and_path_closure() {
        let g = graph(3, &[(0, 1), (1, 2)], 2);
        assert_eq!(sample_k_hop(&g, "n0", 0, 10, 0).unwrap().node_ids, vec!["n0"]);
        let s = sample_k_hop(&g, "n0", 1, 10, 0).unwrap();
        assert_eq!(s.node_ids, vec!["n0", "n1"]);
        assert_eq!(s.adjacency, vec![vec![1], vec![0]]);
        assert!(matches!(sample_k_hop(&g, "zz", 1, 10, 0), Err(Error::Lookup(_))));
    }

    #[test]
    fn star_is_capped_deterministically() {
        let edges: Vec<_> = (1..=100).map(|i| (0, i)).collect();
        let g = graph(101, &edges, 2);
        let a = sample_k_hop(&g, "n0", 1, 11, 42).unwrap();
        let b = sample_k_hop(&g, "n0", 1, 11, 42).unwrap();
        assert_eq!(a.len(), 11);
        assert_eq!(a.node_ids[0], "n0");
        assert_eq!(a, b);
        let c = sample_k_hop(&g, "n0", 1, 11, 43).unwrap();
        assert_ne!(a.node_ids, c.node_ids);
    }

    #[test]
    fn hand_cases() {
        let single = Subgraph {
            center_id: "a".into(),
            node_ids: vec!["a".into()],
            adjacency: vec![vec![]],
            features: array![[0.5, 2.0, 0.0]],
        };
        let id = GnnParams::from_weights(vec![Array2::eye(3)], Aggregation::Mean, Readout::Center).unwrap();
        assert_eq!(gnn_encode(&single, &id).unwrap(), vec![0.5, 2.0, 0.0]);

        let pair = Subgraph {
            center_id: "a".into(),
            node_ids: vec!["a".into(), "b".into()],
            adjacency: vec![vec![1], vec![0]],
            features: array![[1.0, 0.0], [0.0, 1.0]],
        };
        let id2 = GnnParams::from_weights(vec![Array2::eye(2)], Aggregation::Mean, Readout::Center).unwrap();
        assert_eq!(gnn_encode(&pair, &id2).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(gnn_encode(&single, &id2), Err(Error::Shape(_))));
        assert!(GnnParams::from_weights(vec![Array2::eye(2), Array2::eye(3)], Aggregation::Mean, Readout::Center).is_err());
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=6 {
            let sub = random_subgraph(&mut rng, n, 4);
            let w = vec![random_mat(&mut rng, 4, 3), random_mat(&mut rng, 3, 3)];
            let p = GnnParams::from_weights(w.clone(), Aggregation::Mean, Readout::Center).unwrap();
            let got = gnn_encode(&sub, &p).unwrap();
            for (a, b) in got.iter().zip(dense_oracle(&sub, &w)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sum_aggregation_and_mean_pool() {
        let sub = Subgraph {
            center_id: "a".into(),
            node_ids: vec!["a".into(), "b".into()],
            adjacency: vec![vec![1], vec![0]],
            features: array![[1.0, 0.0], [0.0, 3.0]],
        };
        let s = GnnParams::from_weights(vec![Array2::eye(2)], Aggregation::Sum, Readout::Center).unwrap();
        assert_eq!(gnn_encode(&sub, &s).unwrap(), vec![1.0, 3.0]);
        let single = Subgraph {
            adjacency: vec![vec![], vec![]],
            ..sub
        };
        let m = GnnParams::from_weights(vec![Array2::eye(2)], Aggregation::Mean, Readout::MeanPool).unwrap();
        assert_eq!(gnn_encode(&single, &m).unwrap(), vec![0.5, 1.5]);
    }

    #[test]
    fn far_edges_do_not_matter() {
        let g1 = graph(6, &[(0, 1), (1, 2), (2, 3), (3, 4)], 3);
        let g2 = graph(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)], 3);
        let mf = MixFusion::new(3, &MixFusionConfig { d_c: 4, ..Default::default() }, 1).unwrap();
        assert_eq!(mf.embed(&g1, "n0").unwrap(), mf.embed(&g2, "n0").unwrap());
    }

    #[test]
    fn gradient_through_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sub = random_subgraph(&mut rng, 5, 3);
        let inputs = [random_mat(&mut rng, 3, 3), random_mat(&mut rng, 3, 3)];
        check_gradient(
            &inputs,
            |g, v| {
                let agg = {
                    let p = GnnParams::from_weights(vec![Array2::eye(3), Array2::eye(3)], Aggregation::Mean, Readout::Center)
                        .unwrap();
                    g.constant(p.aggregation_matrix(&sub))
                };
                let h = g.constant(sub.features.clone());
                let m = g.matmul(agg, h);
                let z = g.matmul(m, v[0]);
                let h = g.relu(z);
                let m = g.matmul(agg, h);
                let z = g.matmul(m, v[1]);
                let h = g.relu(z);
                let c = g.select_row(h, 0);
                let sq = g.mul(c, c);
                g.sum_all(sq)
            },
            1e-4,
        );
    }

    #[test]
    fn fuse_contract() {
        assert_eq!(fuse(&[1.0, 2.0], &[3.0, 4.0]).unwrap().values, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(fuse(&[0.0; 46], &[0.0; 46]).unwrap().values, vec![0.0; 92]);
        assert_ne!(fuse(&[1.0], &[2.0]).unwrap(), fuse(&[2.0], &[1.0]).unwrap());
        assert!(matches!(fuse(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn joint_matrix_matches_direct_fusion() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)], 3);
        let mf = MixFusion::new(3, &MixFusionConfig { d_c: 2, ..Default::default() }, 2).unwrap();
        let emb = mf.embed_all(&g).unwrap();
        let pairs = [PairSample::positive("n0", "n3")];
        let m = emb.joint_matrix(&g, &pairs).unwrap();
        assert_eq!(m.row(0).to_vec(), mf.joint(&g, "n0", "n3").unwrap().values);
    }

    proptest! {
        #[test]
        fn permutation_invariance(seed in any::<u64>(), n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sub = random_subgraph(&mut rng, n, 3);
            let w = vec![random_mat(&mut rng, 3, 3), random_mat(&mut rng, 3, 2)];
            let p = GnnParams::from_weights(w, Aggregation::Mean, Readout::Center).unwrap();
            // Permute every node except the center, which must stay first.
            let mut perm: Vec<usize> = (1..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            perm.insert(0, 0);
            let mut inv = vec![0; n];
            for (new, &old) in perm.iter().enumerate() {
                inv[old] = new;
            }
            let permuted = Subgraph {
                center_id: sub.center_id.clone(),
                node_ids: perm.iter().map(|&o| sub.node_ids[o].clone()).collect(),
                adjacency: perm.iter().map(|&o| sub.adjacency[o].iter().map(|&j| inv[j]).collect()).collect(),
                features: sub.features.select(Axis(0), &perm),
            };
            let a = gnn_encode(&sub, &p).unwrap();
            let b = gnn_encode(&permuted, &p).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn fuse_then_split_is_identity(a in proptest::collection::vec(-1e3f64..1e3, 1..20)) {
            let b: Vec<f64> = a.iter().map(|v| v * 2.0).collect();
            let j = fuse(&a, &b).unwrap();
            let (x, y) = j.split();
            prop_assert_eq!(x, &a[..]);
            prop_assert_eq!(y, &b[..]);
        }
    }
}
