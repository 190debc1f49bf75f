//! Parameter stores, layers and the SGD optimizer shared by every trainable
//! component.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grad::{Graph, Mat, Var};

/// Named tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Adds every tensor to `g`, as parameters or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.nrows() as u64).to_le_bytes());
            h.update((t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .values()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean distance between two stores with identical layout.
    pub fn distance(&self, other: &ParamStore) -> f64 {
        self.tensors
            .iter()
            .map(|(k, a)| {
                let b = &other.tensors[k];
                a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Graph variables for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects gradients for every bound tensor; missing gradients are zero.
    pub fn gradients(&self, g: &Graph, grads: &crate::grad::Grads) -> BTreeMap<String, Mat> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let grad = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(g.value(*v).dim()));
                (k.clone(), grad)
            })
            .collect()
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Adds `{prefix}.weight` (in x out) and `{prefix}.bias` with the usual
/// `U(-1/sqrt(in), 1/sqrt(in))` initialisation.
pub fn init_linear(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (d_in as f64).sqrt();
    store.insert(format!("{prefix}.weight"), uniform(rng, d_in, d_out, bound));
    if bias {
        store.insert(format!("{prefix}.bias"), uniform(rng, 1, d_out, bound));
    }
}

pub fn linear(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Var {
    let y = g.matmul(x, b.var(&format!("{prefix}.weight")));
    match b.try_var(&format!("{prefix}.bias")) {
        Some(bias) => g.add_row(y, bias),
        None => y,
    }
}

/// Fully connected network with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub store: ParamStore,
}

impl Mlp {
    pub fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let mut store = ParamStore::new();
        for (i, w) in dims.windows(2).enumerate() {
            init_linear(&mut store, &format!("layer{i}"), w[0], w[1], true, rng);
        }
        Self {
            dims: dims.to_vec(),
            store,
        }
    }

    pub fn d_in(&self) -> usize {
        self.dims[0]
    }

    pub fn d_out(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let n = self.dims.len() - 1;
        let mut h = x;
        for i in 0..n {
            h = linear(g, b, &format!("layer{i}"), h);
            if i + 1 < n {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn infer(&self, x: &Mat) -> Mat {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &b, xv);
        g.value(y).clone()
    }
}

/// Transformer encoder over tabular vectors. Each input row is a sequence of
/// one token, so attention weights are identically one and every position
/// attends only to itself. Post-norm residual layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub d_in: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub d_out: usize,
    /// Linear + batch-norm + ReLU output head when true, plain linear otherwise.
    pub norm_head: bool,
    pub store: ParamStore,
    /// Batch-norm population statistics used in inference mode.
    pub running_mean: Mat,
    pub running_var: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Batch,
    Population,
}

pub const NORM_EPS: f64 = 1e-5;

impl Transformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d_in: usize,
        d_model: usize,
        heads: usize,
        layers: usize,
        ffn: usize,
        d_out: usize,
        norm_head: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "d_model must split into heads");
        let mut store = ParamStore::new();
        init_linear(&mut store, "embed", d_in, d_model, true, rng);
        for l in 0..layers {
            for proj in ["q", "k", "v", "o"] {
                init_linear(&mut store, &format!("block{l}.attn.{proj}"), d_model, d_model, true, rng);
            }
            init_linear(&mut store, &format!("block{l}.ff1"), d_model, ffn, true, rng);
            init_linear(&mut store, &format!("block{l}.ff2"), ffn, d_model, true, rng);
            for ln in ["ln1", "ln2"] {
                store.insert(format!("block{l}.{ln}.gamma"), Array2::ones((1, d_model)));
                store.insert(format!("block{l}.{ln}.beta"), Array2::zeros((1, d_model)));
            }
        }
        init_linear(&mut store, "head", d_model, d_out, true, rng);
        if norm_head {
            store.insert("head.bn.gamma", Array2::ones((1, d_out)));
            store.insert("head.bn.beta", Array2::zeros((1, d_out)));
        }
        Self {
            d_in,
            d_model,
            heads,
            layers,
            ffn,
            d_out,
            norm_head,
            store,
            running_mean: Array2::zeros((1, d_out)),
            running_var: Array2::ones((1, d_out)),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var, mode: NormMode) -> Var {
        let mut h = linear(g, b, "embed", x);
        for l in 0..self.layers {
            let p = format!("block{l}");
            let q = linear(g, b, &format!("{p}.attn.q"), h);
            let k = linear(g, b, &format!("{p}.attn.k"), h);
            let v = linear(g, b, &format!("{p}.attn.v"), h);
            let a = g.attention(q, k, v, 1, self.heads);
            let a = linear(g, b, &format!("{p}.attn.o"), a);
            let r = g.add(h, a);
            h = g.layer_norm(r, b.var(&format!("{p}.ln1.gamma")), b.var(&format!("{p}.ln1.beta")), NORM_EPS);
            let f = linear(g, b, &format!("{p}.ff1"), h);
            let f = g.relu(f);
            let f = linear(g, b, &format!("{p}.ff2"), f);
            let r = g.add(h, f);
            h = g.layer_norm(r, b.var(&format!("{p}.ln2.gamma")), b.var(&format!("{p}.ln2.beta")), NORM_EPS);
        }
        let out = linear(g, b, "head", h);
        if !self.norm_head {
            return out;
        }
        let (gamma, beta) = (b.var("head.bn.gamma"), b.var("head.bn.beta"));
        let normed = match mode {
            NormMode::Batch => g.batch_norm(out, gamma, beta, NORM_EPS),
            NormMode::Population => {
                let shift = g.constant(-&self.running_mean);
                let inv = g.constant(self.running_var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt()));
                let c = g.add_row(out, shift);
                let c = g.mul_row(c, inv);
                let c = g.mul_row(c, gamma);
                g.add_row(c, beta)
            }
        };
        g.relu(normed)
    }

    /// Sets the batch-norm population statistics from the pre-norm head
    /// outputs over `x`.
    pub fn calibrate(&mut self, x: &Mat) {
        if !self.norm_head || x.nrows() == 0 {
            return;
        }
        let mut g = Graph::new();
        let mut stripped = self.clone();
        stripped.norm_head = false;
        let b = self.store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = stripped.forward(&mut g, &b, xv, NormMode::Population);
        let pre = g.value(out);
        self.running_mean = pre.mean_axis(Axis(0)).expect("rows").insert_axis(Axis(0));
        self.running_var = pre.var_axis(Axis(0), 0.0).insert_axis(Axis(0));
    }

    pub fn infer(&self, x: &Mat) -> Mat {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &b, xv, NormMode::Population);
        g.value(y).clone()
    }
}

/// A trainable map that is either a transformer or an MLP.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Transformer(Transformer),
    Mlp(Mlp),
}

impl Network {
    pub fn store(&self) -> &ParamStore {
        match self {
            Network::Transformer(t) => &t.store,
            Network::Mlp(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Network::Transformer(t) => &mut t.store,
            Network::Mlp(m) => &mut m.store,
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            Network::Transformer(t) => t.d_in,
            Network::Mlp(m) => m.d_in(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Network::Transformer(t) => t.d_out,
            Network::Mlp(m) => m.d_out(),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var, mode: NormMode) -> Var {
        match self {
            Network::Transformer(t) => t.forward(g, b, x, mode),
            Network::Mlp(m) => m.forward(g, b, x),
        }
    }

    pub fn infer(&self, x: &Mat) -> Mat {
        match self {
            Network::Transformer(t) => t.infer(x),
            Network::Mlp(m) => m.infer(x),
        }
    }

    /// Refreshes normalization statistics; a no-op for MLPs.
    pub fn calibrate(&mut self, x: &Mat) {
        if let Network::Transformer(t) = self {
            t.calibrate(x);
        }
    }
}

/// Activation applied after a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

/// Hyperparameters of stochastic gradient descent with momentum and
/// L2 weight decay (decay added to the gradient before the momentum update).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    buffers: BTreeMap<String, Mat>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            buffers: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Mat>) {
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for (name, grad) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let mut d = grad.clone();
            if weight_decay != 0.0 {
                d.scaled_add(weight_decay, p);
            }
            let update = if momentum != 0.0 {
                match self.buffers.get_mut(name) {
                    Some(buf) => {
                        *buf *= momentum;
                        *buf += &d;
                        buf.clone()
                    }
                    None => {
                        self.buffers.insert(name.clone(), d.clone());
                        d
                    }
                }
            } else {
                d
            };
            p.scaled_add(-lr, &update);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::tests::random_mat;
    use rand::SeedableRng;

    #[test]
    fn sgd_matches_reference_update() {
        // p=1, grad=2, wd=0.5 -> d=2.5; step 1: buf=2.5, p=1-0.1*2.5=0.75
        // step 2: d=2+0.375=2.375, buf=0.9*2.5+2.375=4.625, p=0.75-0.4625=0.2875
        let mut store = ParamStore::new();
        store.insert("p", Array2::from_elem((1, 1), 1.0));
        let grads: BTreeMap<_, _> = [("p".to_string(), Array2::from_elem((1, 1), 2.0))].into();
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.5,
        });
        opt.step(&mut store, &grads);
        assert!((store.get("p").unwrap()[[0, 0]] - 0.75).abs() < 1e-12);
        opt.step(&mut store, &grads);
        assert!((store.get("p").unwrap()[[0, 0]] - 0.2875).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::new(&[3, 4, 2], &mut rng);
        let before = mlp.store.digest();
        let grads = mlp
            .store
            .iter()
            .map(|(k, v)| (k.clone(), Array2::ones(v.dim())))
            .collect();
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.0,
            ..SgdConfig::default()
        });
        opt.step(&mut mlp.store, &grads);
        assert_eq!(before, mlp.store.digest());
    }

    #[test]
    fn transformer_shapes_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Transformer::new(3, 4, 2, 1, 6, 3, true, &mut rng);
        let x = random_mat(&mut rng, 5, 3);
        assert_eq!(t.infer(&x).dim(), (5, 3));

        // finite differences on the input of a tiny transformer in batch mode
        crate::grad::tests::check_gradient(
            &[x],
            |g, v| {
                let b = t.store.bind(g, false);
                let y = t.forward(g, &b, v[0], NormMode::Batch);
                let s = g.sigmoid(y);
                g.sum_all(s)
            },
            1e-4,
        );
    }

    #[test]
    fn calibrated_head_standardises_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Transformer::new(4, 8, 2, 2, 16, 4, true, &mut rng);
        let x = random_mat(&mut rng, 200, 4);
        t.calibrate(&x);
        let mut g = Graph::new();
        let b = t.store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let batch = t.forward(&mut g, &b, xv, NormMode::Batch);
        let pop = t.forward(&mut g, &b, xv, NormMode::Population);
        let diff = (g.value(batch) - g.value(pop)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-9, "population stats should equal full-batch stats, diff {diff}");
    }

    #[test]
    fn digest_tracks_every_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::new(&[2, 2], &mut rng);
        let d0 = mlp.store.digest();
        mlp.store.get_mut("layer0.bias").unwrap()[[0, 1]] += 1e-12;
        assert_ne!(d0, mlp.store.digest());
    }
}
