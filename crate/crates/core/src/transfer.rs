//! Cross-task transfer: a frozen source encoder, the mean-centering
//! projection adapter, a feature generator and two classifiers trained by
//! maximum classifier discrepancy.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::SourceDataset;
use crate::error::{Error, Result};
use crate::grad::{Graph, Mat, Var};
use crate::nn::{Mlp, Network, NormMode, ParamStore, Sgd, SgdConfig, Transformer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderArch {
    Transformer,
    Mlp,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub arch: EncoderArch,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    /// Hidden widths of the MLP variant.
    pub hidden: Vec<usize>,
    pub pretrain_epochs: usize,
    pub batch: usize,
    pub sgd: SgdConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            arch: EncoderArch::Transformer,
            d_model: 92,
            heads: 4,
            layers: 3,
            ffn: 368,
            hidden: vec![148],
            pretrain_epochs: 10,
            batch: 64,
            sgd: SgdConfig::default(),
        }
    }
}

/// Source encoder `E: R^{d_S} -> R^{d_S}`. `None` is the identity map.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub d_s: usize,
    pub net: Option<Network>,
}

fn check_width(x: &Mat, width: usize, what: &str) -> Result<()> {
    if x.ncols() != width {
        return Err(Error::Shape(format!("{what}: got width {}, expected {width}", x.ncols())));
    }
    Ok(())
}

fn check_heads(d_model: usize, heads: usize) -> Result<()> {
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::Config(format!("d_model {d_model} is not divisible by {heads} heads")));
    }
    Ok(())
}

impl Encoder {
    pub fn identity(d_s: usize) -> Self {
        Self { d_s, net: None }
    }

    pub fn new(d_s: usize, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let net = match cfg.arch {
            EncoderArch::Identity => None,
            EncoderArch::Transformer => {
                check_heads(cfg.d_model, cfg.heads)?;
                Some(Network::Transformer(Transformer::new(
                    d_s, cfg.d_model, cfg.heads, cfg.layers, cfg.ffn, d_s, true, rng,
                )))
            }
            EncoderArch::Mlp => {
                let mut dims = vec![d_s];
                dims.extend(&cfg.hidden);
                dims.push(d_s);
                Some(Network::Mlp(Mlp::new(&dims, rng)))
            }
        };
        Ok(Self { d_s, net })
    }

    /// Inference-mode encoding of the rows of `x`.
    pub fn encode(&self, x: &Mat) -> Result<Mat> {
        check_width(x, self.d_s, "encoder input")?;
        Ok(match &self.net {
            None => x.clone(),
            Some(n) => n.infer(x),
        })
    }

    /// Trains the encoder with a temporary linear probe on the source labels,
    /// then fixes its normalization statistics on the full source set.
    /// Returns the mean cross-entropy of each epoch.
    pub fn pretrain(&mut self, source: &SourceDataset, cfg: &EncoderConfig, seed: u64) -> Result<Vec<f64>> {
        let Some(net) = self.net.as_mut() else {
            return Ok(Vec::new());
        };
        let x = source.features();
        check_width(&x, self.d_s, "source features")?;
        let y = source.labels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probe = Mlp::new(&[self.d_s, 2], &mut rng);
        let mut opt_e = Sgd::new(cfg.sgd);
        let mut opt_p = Sgd::new(cfg.sgd);
        let mut losses = Vec::with_capacity(cfg.pretrain_epochs);
        let mut last_finite = None;
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        for epoch in 0..cfg.pretrain_epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch.max(2)) {
                if chunk.len() < 2 {
                    continue;
                }
                let mut g = Graph::new();
                let be = net.store().bind(&mut g, true);
                let bp = probe.store.bind(&mut g, true);
                let xb = g.constant(x.select(Axis(0), chunk));
                let z = net.forward(&mut g, &be, xb, NormMode::Batch);
                let logits = probe.forward(&mut g, &bp, z);
                let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
                let loss = g.cross_entropy(logits, &yb);
                let l = g.scalar(loss);
                if !l.is_finite() {
                    return Err(Error::Divergence { epoch, last_finite });
                }
                let grads = g.backward(loss);
                opt_e.step(net.store_mut(), &be.gradients(&g, &grads));
                opt_p.step(&mut probe.store, &bp.gradients(&g, &grads));
                total += l;
                batches += 1;
            }
            losses.push(if batches > 0 { total / batches as f64 } else { 0.0 });
            last_finite = Some(epoch);
        }
        net.calibrate(&x);
        Ok(losses)
    }

    /// Parameters plus normalization statistics, under `prefix`.
    pub fn export(&self, prefix: &str, out: &mut ParamStore) {
        if let Some(net) = &self.net {
            for (k, v) in net.store().iter() {
                out.insert(format!("{prefix}{k}"), v.clone());
            }
            if let Network::Transformer(t) = net {
                out.insert(format!("{prefix}running_mean"), t.running_mean.clone());
                out.insert(format!("{prefix}running_var"), t.running_var.clone());
            }
        }
    }
}

/// Principal directions of the rows of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// `1 x d`.
    pub mean: Mat,
    /// `d x k`, orthonormal columns in descending eigenvalue order.
    pub components: Mat,
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Top-`k` principal directions. Each column's largest-magnitude entry is
    /// made positive so the result is unique.
    pub fn fit(x: &Mat, k: usize) -> Result<Self> {
        let (n, d) = x.dim();
        if k == 0 || k > d {
            return Err(Error::Argument(format!("cannot keep {k} of {d} principal directions")));
        }
        if n < 2 {
            return Err(Error::Argument("PCA needs at least two samples".into()));
        }
        let mean = x.mean_axis(Axis(0)).expect("rows").insert_axis(Axis(0));
        let centered = x - &mean;
        let cov = centered.t().dot(&centered) / (n - 1) as f64;
        let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let tol = top * 1e-10 * d as f64;
        let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol && top > 0.0).count();
        if rank < k {
            return Err(Error::NumericalRank {
                achieved: rank,
                requested: k,
            });
        }
        let mut components = Array2::zeros((d, k));
        for (c, &i) in order.iter().take(k).enumerate() {
            let col = eig.eigenvectors.column(i);
            let pivot = (0..d)
                .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
                .expect("d > 0");
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            for r in 0..d {
                components[[r, c]] = sign * col[r];
            }
        }
        Ok(Self {
            mean,
            components,
            eigenvalues: order.iter().take(k).map(|&i| eig.eigenvalues[i]).collect(),
        })
    }

    pub fn transform(&self, x: &Mat) -> Result<Mat> {
        check_width(x, self.mean.ncols(), "PCA input")?;
        Ok((x - &self.mean).dot(&self.components))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Pca,
    Expansion,
}

/// `T(u) = Uᵀ(E(u) − μ_S)`, stored as `mu_s` (`1 x d_S`) and `u`
/// (`d_S x d_P`).
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub store: ParamStore,
}

impl Adapter {
    pub fn new(mu_s: Mat, u: Mat) -> Result<Self> {
        if mu_s.nrows() != 1 || mu_s.ncols() != u.nrows() {
            return Err(Error::Shape(format!(
                "mean is {:?} but projection is {:?}",
                mu_s.dim(),
                u.dim()
            )));
        }
        let mut store = ParamStore::new();
        store.insert("mu_s", mu_s);
        store.insert("u", u);
        Ok(Self { store })
    }

    pub fn mu_s(&self) -> &Mat {
        self.store.get("mu_s").expect("adapter mean")
    }

    pub fn u(&self) -> &Mat {
        self.store.get("u").expect("adapter projection")
    }

    pub fn d_s(&self) -> usize {
        self.u().nrows()
    }

    pub fn d_p(&self) -> usize {
        self.u().ncols()
    }

    /// Projects already-encoded rows.
    pub fn project(&self, encoded: &Mat) -> Result<Mat> {
        check_width(encoded, self.d_s(), "adapter input")?;
        Ok((encoded - self.mu_s()).dot(self.u()))
    }
}

/// Mean of `E(u)` over every source sample.
pub fn compute_source_mean(encoder: &Encoder, source: &SourceDataset) -> Result<Vec<f64>> {
    if source.is_empty() {
        return Err(Error::Argument("source mean of an empty dataset".into()));
    }
    let enc = encoder.encode(&source.features())?;
    Ok(enc.mean_axis(Axis(0)).expect("rows").to_vec())
}

/// Adapter whose projection holds the top-`d_p` principal directions of the
/// centered encodings.
pub fn fit_adapter_pca(encoder: &Encoder, source: &SourceDataset, d_p: usize) -> Result<Adapter> {
    if d_p > encoder.d_s {
        return Err(Error::Argument(format!("d_P = {d_p} exceeds d_S = {}", encoder.d_s)));
    }
    if source.len() < d_p {
        return Err(Error::Capacity(format!("PCA to {d_p} components needs at least {d_p} samples")));
    }
    let enc = encoder.encode(&source.features())?;
    let pca = Pca::fit(&enc, d_p)?;
    Adapter::new(pca.mean, pca.components)
}

/// Adapter whose projection copies the first `min(d_S, d_P)` coordinates and
/// fills any remaining columns with scaled Gaussian directions, allowing
/// `d_P > d_S`.
pub fn fit_adapter_expansion(encoder: &Encoder, source: &SourceDataset, d_p: usize, seed: u64) -> Result<Adapter> {
    let mu = compute_source_mean(encoder, source)?;
    let d_s = encoder.d_s;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d_s as f64).sqrt();
    let mut u = Array2::zeros((d_s, d_p));
    for c in 0..d_p {
        if c < d_s {
            u[[c, c]] = 1.0;
        } else {
            for r in 0..d_s {
                let z: f64 = StandardNormal.sample(&mut rng);
                u[[r, c]] = scale * z;
            }
        }
    }
    Adapter::new(Array2::from_shape_vec((1, d_s), mu).expect("width"), u)
}

/// `Uᵀ(E(u) − μ_S)` for a single sample.
pub fn adapt(adapter: &Adapter, encoder: &Encoder, u: &[f64]) -> Result<Vec<f64>> {
    let x = Array2::from_shape_vec((1, u.len()), u.to_vec()).expect("row");
    let enc = encoder.encode(&x)?;
    Ok(adapter.project(&enc)?.row(0).to_vec())
}

/// L1 distance between two probability vectors.
pub fn discrepancy(p1: &[f64], p2: &[f64]) -> Result<f64> {
    if p1.len() != p2.len() {
        return Err(Error::Shape(format!("probability vectors of length {} and {}", p1.len(), p2.len())));
    }
    if let Some(&bad) = p1.iter().chain(p2).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Range {
            name: "probability",
            value: bad,
            allowed: "[0, 1]",
        });
    }
    Ok(p1.iter().zip(p2).map(|(a, b)| (a - b).abs()).sum())
}

/// Mean over rows of the row-wise L1 distance.
pub fn discrepancy_batch(p1: &Mat, p2: &Mat) -> Result<f64> {
    if p1.dim() != p2.dim() || p1.nrows() == 0 {
        return Err(Error::Shape(format!("probability batches {:?} and {:?}", p1.dim(), p2.dim())));
    }
    Ok((p1 - p2).mapv(f64::abs).sum() / p1.nrows() as f64)
}

fn discrepancy_var(g: &mut Graph, logits1: Var, logits2: Var) -> Var {
    let n = g.value(logits1).nrows() as f64;
    let p1 = g.softmax_rows(logits1);
    let p2 = g.softmax_rows(logits2);
    let d = g.sub(p1, p2);
    let a = g.abs(d);
    let s = g.sum_all(a);
    g.scale(s, 1.0 / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorArch {
    Transformer,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub arch: GeneratorArch,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub hidden: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            arch: GeneratorArch::Transformer,
            d_model: 92,
            heads: 4,
            layers: 3,
            ffn: 368,
            hidden: vec![92],
        }
    }
}

/// How the classifiers are updated in the discrepancy-maximization step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierStep {
    /// Minimize source cross-entropy minus target discrepancy.
    SupervisedDiscrepancy,
    /// Maximize target discrepancy only.
    Discrepancy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Mcd,
    NoTransfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub strategy: StrategyKind,
    pub adapter: AdapterKind,
    pub encoder: EncoderConfig,
    pub generator: GeneratorConfig,
    /// Hidden widths of C1 and C2.
    pub classifier_hidden: Vec<usize>,
    pub lambda: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Generator updates per classifier update.
    pub generator_steps: usize,
    pub classifier_step: ClassifierStep,
    /// Whether the adapter projection is updated with the generator.
    pub train_adapter: bool,
    /// Number of unlabeled target pairs drawn for alignment.
    pub target_stream: usize,
    pub sgd: SgdConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Mcd,
            adapter: AdapterKind::Pca,
            encoder: EncoderConfig::default(),
            generator: GeneratorConfig::default(),
            classifier_hidden: vec![92],
            lambda: 1.0,
            batch: 64,
            epochs: 10,
            generator_steps: 1,
            classifier_step: ClassifierStep::SupervisedDiscrepancy,
            train_adapter: true,
            target_stream: 2000,
            sgd: SgdConfig::default(),
        }
    }
}

/// Encoder, adapter, generator F and the two classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferModel {
    pub encoder: Encoder,
    pub adapter: Adapter,
    pub generator: Network,
    pub c1: Mlp,
    pub c2: Mlp,
    pub lambda: f64,
}

/// Objective value and gradients keyed `generator.*`, `adapter.u`, `c1.*`
/// or `c2.*`.
#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub discrepancy: f64,
    pub source_ce: f64,
    pub gradients: BTreeMap<String, Mat>,
}

fn prefixed(prefix: &str, grads: BTreeMap<String, Mat>) -> impl Iterator<Item = (String, Mat)> + '_ {
    grads.into_iter().map(move |(k, v)| (format!("{prefix}{k}"), v))
}

fn strip<'a>(prefix: &str, grads: &'a BTreeMap<String, Mat>) -> BTreeMap<String, Mat> {
    grads
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}

impl TransferModel {
    pub fn new(encoder: Encoder, adapter: Adapter, cfg: &TransferConfig, seed: u64) -> Result<Self> {
        if adapter.d_s() != encoder.d_s {
            return Err(Error::Shape(format!(
                "adapter expects d_S = {}, encoder produces {}",
                adapter.d_s(),
                encoder.d_s
            )));
        }
        let d_p = adapter.d_p();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gc = &cfg.generator;
        let generator = match gc.arch {
            GeneratorArch::Transformer => {
                check_heads(gc.d_model, gc.heads)?;
                Network::Transformer(Transformer::new(d_p, gc.d_model, gc.heads, gc.layers, gc.ffn, d_p, false, &mut rng))
            }
            GeneratorArch::Mlp => {
                let mut dims = vec![d_p];
                dims.extend(&gc.hidden);
                dims.push(d_p);
                Network::Mlp(Mlp::new(&dims, &mut rng))
            }
        };
        let mut dims = vec![d_p];
        dims.extend(&cfg.classifier_hidden);
        dims.push(2);
        let c1 = Mlp::new(&dims, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
        let c2 = Mlp::new(&dims, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(2)));
        Ok(Self {
            encoder,
            adapter,
            generator,
            c1,
            c2,
            lambda: cfg.lambda,
        })
    }

    pub fn d_p(&self) -> usize {
        self.adapter.d_p()
    }

    /// `E(u)` for raw source features.
    pub fn encode_source(&self, features: &Mat) -> Result<Mat> {
        self.encoder.encode(features)
    }

    /// `F(T(u))` for raw source features.
    pub fn generate_source(&self, features: &Mat) -> Result<Mat> {
        let t = self.adapter.project(&self.encoder.encode(features)?)?;
        Ok(self.generator.infer(&t))
    }

    /// `F(h̃)` for fused target representations.
    pub fn generate(&self, target: &Mat) -> Result<Mat> {
        check_width(target, self.d_p(), "target representation")?;
        Ok(self.generator.infer(target))
    }

    /// Every tensor upstream of the association classifier: encoder
    /// (including normalization statistics), adapter and generator.
    pub fn frozen_params(&self) -> ParamStore {
        let mut out = ParamStore::new();
        self.encoder.export("encoder.", &mut out);
        for (k, v) in self.adapter.store.iter() {
            out.insert(format!("adapter.{k}"), v.clone());
        }
        for (k, v) in self.generator.store().iter() {
            out.insert(format!("generator.{k}"), v.clone());
        }
        out
    }

    /// SHA-256 over [`Self::frozen_params`].
    pub fn generator_digest(&self) -> String {
        self.frozen_params().digest()
    }

    fn check_batch(&self, source_enc: &Mat, labels: &[usize], target: &Mat) -> Result<()> {
        check_width(source_enc, self.encoder.d_s, "encoded source")?;
        check_width(target, self.d_p(), "target representation")?;
        if source_enc.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} source rows but {} labels",
                source_enc.nrows(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Argument("source labels must be 0 or 1".into()));
        }
        if source_enc.nrows() == 0 || target.nrows() == 0 {
            return Err(Error::Argument("empty training batch".into()));
        }
        Ok(())
    }

    /// Generator loss `E‖C1(F(h̃)) − C2(F(h̃))‖₁ + λ·CE(C1(F(T(u))), y)` and
    /// its gradients with respect to F and, if `with_adapter`, U.
    pub fn generator_objective(&self, source_enc: &Mat, labels: &[usize], target: &Mat, with_adapter: bool) -> Result<Objective> {
        self.check_batch(source_enc, labels, target)?;
        let mut g = Graph::new();
        let bf = self.generator.store().bind(&mut g, true);
        let b1 = self.c1.store.bind(&mut g, false);
        let b2 = self.c2.store.bind(&mut g, false);
        let u = if with_adapter {
            g.param(self.adapter.u().clone())
        } else {
            g.constant(self.adapter.u().clone())
        };
        let xs = g.constant(source_enc - self.adapter.mu_s());
        let ts = g.matmul(xs, u);
        let fs = self.generator.forward(&mut g, &bf, ts, NormMode::Batch);
        let ls = self.c1.forward(&mut g, &b1, fs);
        let ce = g.cross_entropy(ls, labels);
        let xt = g.constant(target.clone());
        let ft = self.generator.forward(&mut g, &bf, xt, NormMode::Batch);
        let l1 = self.c1.forward(&mut g, &b1, ft);
        let l2 = self.c2.forward(&mut g, &b2, ft);
        let dis = discrepancy_var(&mut g, l1, l2);
        let weighted = g.scale(ce, self.lambda);
        let loss = g.add(dis, weighted);
        let grads = g.backward(loss);
        let mut gradients: BTreeMap<String, Mat> = prefixed("generator.", bf.gradients(&g, &grads)).collect();
        if with_adapter {
            let gu = grads.get(u).cloned().unwrap_or_else(|| Array2::zeros(self.adapter.u().dim()));
            gradients.insert("adapter.u".into(), gu);
        }
        Ok(Objective {
            value: g.scalar(loss),
            discrepancy: g.scalar(dis),
            source_ce: g.scalar(ce),
            gradients,
        })
    }

    /// Classifier-step loss with F held fixed: `CE₁ + CE₂ − L_dis` on source
    /// and target, or `−L_dis` alone.
    pub fn classifier_objective(&self, source_enc: &Mat, labels: &[usize], target: &Mat, step: ClassifierStep) -> Result<Objective> {
        self.check_batch(source_enc, labels, target)?;
        let fs = self.generator.infer(&self.adapter.project(source_enc)?);
        let ft = self.generator.infer(target);
        let mut g = Graph::new();
        let b1 = self.c1.store.bind(&mut g, true);
        let b2 = self.c2.store.bind(&mut g, true);
        let xt = g.constant(ft);
        let l1 = self.c1.forward(&mut g, &b1, xt);
        let l2 = self.c2.forward(&mut g, &b2, xt);
        let dis = discrepancy_var(&mut g, l1, l2);
        let xs = g.constant(fs);
        let s1 = self.c1.forward(&mut g, &b1, xs);
        let s2 = self.c2.forward(&mut g, &b2, xs);
        let ce1 = g.cross_entropy(s1, labels);
        let ce2 = g.cross_entropy(s2, labels);
        let neg = g.scale(dis, -1.0);
        let loss = match step {
            ClassifierStep::SupervisedDiscrepancy => {
                let ce = g.add(ce1, ce2);
                g.add(ce, neg)
            }
            ClassifierStep::Discrepancy => neg,
        };
        let grads = g.backward(loss);
        let gradients = prefixed("c1.", b1.gradients(&g, &grads))
            .chain(prefixed("c2.", b2.gradients(&g, &grads)))
            .collect();
        Ok(Objective {
            value: g.scalar(loss),
            discrepancy: g.scalar(dis),
            source_ce: g.scalar(ce1),
            gradients,
        })
    }

    /// Cross-entropy of `C1(F(T(u)))` on encoded source rows.
    pub fn source_ce(&self, source_enc: &Mat, labels: &[usize]) -> Result<f64> {
        let f = self.generator.infer(&self.adapter.project(source_enc)?);
        let mut g = Graph::new();
        let b1 = self.c1.store.bind(&mut g, false);
        let x = g.constant(f);
        let l = self.c1.forward(&mut g, &b1, x);
        let ce = g.cross_entropy(l, labels);
        Ok(g.scalar(ce))
    }

    /// Mean discrepancy of the two classifiers on `F(h̃)`.
    pub fn target_discrepancy(&self, target: &Mat) -> Result<f64> {
        let f = self.generate(target)?;
        let p1 = crate::grad::softmax_rows(&self.c1.infer(&f));
        let p2 = crate::grad::softmax_rows(&self.c2.infer(&f));
        discrepancy_batch(&p1, &p2)
    }
}

/// One row per completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean target discrepancy seen by the generator step.
    pub target_discrepancy: f64,
    pub source_ce: f64,
    pub delta_generator: f64,
    pub delta_c1: f64,
    pub delta_c2: f64,
    pub delta_adapter: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,target_discrepancy,source_ce,delta_generator,delta_c1,delta_c2,delta_adapter\n");
        for r in &self.records {
            s += &format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.target_discrepancy, r.source_ce, r.delta_generator, r.delta_c1, r.delta_c2, r.delta_adapter
            );
        }
        s
    }
}

/// A way of preparing the generator before fine-tuning.
pub trait TransferStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn train(
        &self,
        model: &mut TransferModel,
        source: &SourceDataset,
        target: &Mat,
        cfg: &TransferConfig,
        seed: u64,
    ) -> Result<TrainLog>;
}

/// Maximum classifier discrepancy.
#[derive(Debug, Clone, Copy, Default)]
pub struct Mcd;

/// Leaves the generator at its random initialization.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoTransfer;

impl TransferStrategy for Mcd {
    fn name(&self) -> &'static str {
        "mcd"
    }

    fn train(&self, model: &mut TransferModel, source: &SourceDataset, target: &Mat, cfg: &TransferConfig, seed: u64) -> Result<TrainLog> {
        train_transfer(model, source, target, cfg, seed)
    }
}

impl TransferStrategy for NoTransfer {
    fn name(&self) -> &'static str {
        "no_transfer"
    }

    fn train(&self, _: &mut TransferModel, _: &SourceDataset, _: &Mat, _: &TransferConfig, _: u64) -> Result<TrainLog> {
        Ok(TrainLog::default())
    }
}

pub fn strategy(kind: StrategyKind) -> Box<dyn TransferStrategy> {
    match kind {
        StrategyKind::Mcd => Box::new(Mcd),
        StrategyKind::NoTransfer => Box::new(NoTransfer),
    }
}

fn rows(m: &Mat, idx: &[usize]) -> Mat {
    m.select(Axis(0), idx)
}

/// Alternating discrepancy training. Each source batch is paired with the
/// next batch of a shuffled pass over the target rows; the classifiers take
/// one step, then the generator (and optionally U) takes
/// `generator_steps` steps.
pub fn train_transfer(model: &mut TransferModel, source: &SourceDataset, target: &Mat, cfg: &TransferConfig, seed: u64) -> Result<TrainLog> {
    if cfg.batch == 0 || cfg.generator_steps == 0 {
        return Err(Error::Config("batch and generator_steps must be positive".into()));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::Config("lambda must be non-negative".into()));
    }
    let enc = model.encode_source(&source.features())?;
    let labels = source.labels();
    model.check_batch(&enc, &labels, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt_c1 = Sgd::new(cfg.sgd);
    let mut opt_c2 = Sgd::new(cfg.sgd);
    let mut opt_f = Sgd::new(cfg.sgd);
    let mut opt_u = Sgd::new(cfg.sgd);
    let mut log = TrainLog::default();
    let mut last_finite = None;
    let mut src_order: Vec<usize> = (0..enc.nrows()).collect();
    let mut tgt_order: Vec<usize> = (0..target.nrows()).collect();
    let tb = cfg.batch.min(target.nrows());
    let mut tgt_pos = target.nrows();

    for epoch in 0..cfg.epochs {
        let before = (
            model.generator.store().clone(),
            model.c1.store.clone(),
            model.c2.store.clone(),
            model.adapter.store.clone(),
        );
        src_order.shuffle(&mut rng);
        let (mut dis_sum, mut ce_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in src_order.chunks(cfg.batch) {
            if tgt_pos + tb > tgt_order.len() {
                tgt_order.shuffle(&mut rng);
                tgt_pos = 0;
            }
            let tidx = &tgt_order[tgt_pos..tgt_pos + tb];
            tgt_pos += tb;
            let xs = rows(&enc, chunk);
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let xt = rows(target, tidx);

            let a = model.classifier_objective(&xs, &ys, &xt, cfg.classifier_step)?;
            if !a.value.is_finite() {
                return Err(Error::Divergence { epoch, last_finite });
            }
            opt_c1.step(&mut model.c1.store, &strip("c1.", &a.gradients));
            opt_c2.step(&mut model.c2.store, &strip("c2.", &a.gradients));

            for _ in 0..cfg.generator_steps {
                let b = model.generator_objective(&xs, &ys, &xt, cfg.train_adapter)?;
                if !b.value.is_finite() {
                    return Err(Error::Divergence { epoch, last_finite });
                }
                opt_f.step(model.generator.store_mut(), &strip("generator.", &b.gradients));
                if cfg.train_adapter {
                    opt_u.step(&mut model.adapter.store, &strip("adapter.", &b.gradients));
                }
                dis_sum += b.discrepancy;
                ce_sum += b.source_ce;
                steps += 1;
            }
        }
        let n = steps.max(1) as f64;
        log.records.push(EpochRecord {
            epoch,
            target_discrepancy: dis_sum / n,
            source_ce: ce_sum / n,
            delta_generator: model.generator.store().distance(&before.0),
            delta_c1: model.c1.store.distance(&before.1),
            delta_c2: model.c2.store.distance(&before.2),
            delta_adapter: model.adapter.store.distance(&before.3),
        });
        last_finite = Some(epoch);
    }
    Ok(log)
}

/// Output of [`pretrain_transfer`].
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: TransferModel,
    /// The model as it was before the strategy ran: same encoder, adapter and
    /// generator initialization.
    pub initial: TransferModel,
    pub encoder_losses: Vec<f64>,
    pub log: TrainLog,
}

/// Pretrains the encoder, fits the adapter to `d_p` columns and runs the
/// configured strategy against the unlabeled `target` rows.
pub fn pretrain_transfer(source: &SourceDataset, target: &Mat, d_p: usize, cfg: &TransferConfig, seed: u64) -> Result<Pretrained> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut encoder = Encoder::new(source.d_s, &cfg.encoder, &mut rng)?;
    let encoder_losses = encoder.pretrain(source, &cfg.encoder, seed.wrapping_add(10))?;
    let adapter = match cfg.adapter {
        AdapterKind::Pca => fit_adapter_pca(&encoder, source, d_p)?,
        AdapterKind::Expansion => fit_adapter_expansion(&encoder, source, d_p, seed.wrapping_add(20))?,
    };
    let mut model = TransferModel::new(encoder, adapter, cfg, seed.wrapping_add(30))?;
    let initial = model.clone();
    let log = strategy(cfg.strategy).train(&mut model, source, target, cfg, seed.wrapping_add(40))?;
    Ok(Pretrained {
        model,
        initial,
        encoder_losses,
        log,
    })
}

/// First `k` rows of `m` (all rows if fewer).
pub fn head_rows(m: &Mat, k: usize) -> Mat {
    m.slice(s![..k.min(m.nrows()), ..]).to_owned()
}
