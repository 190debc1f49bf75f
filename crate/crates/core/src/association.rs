//! Few-shot fine-tuning of the pair classifier on frozen generator features.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PairSample, TransactionGraph};
use crate::error::{Error, Result};
use crate::grad::{sigmoid, Graph, Mat};
use crate::mixfusion::{JointRepresentation, MixFusion};
use crate::nn::{Mlp, ParamStore, Sgd, SgdConfig};
use crate::transfer::TransferModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierArch {
    Mlp,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationConfig {
    pub arch: ClassifierArch,
    /// Hidden widths of the MLP variant.
    pub hidden: Vec<usize>,
    /// Number of mini-batch updates, independent of the training-set size.
    pub steps: usize,
    pub batch: usize,
    pub threshold: f64,
    pub sgd: SgdConfig,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            arch: ClassifierArch::Mlp,
            hidden: vec![1024; 4],
            steps: 500,
            batch: 64,
            threshold: 0.5,
            sgd: SgdConfig::default(),
        }
    }
}

/// A binary classifier over feature rows.
pub trait Classifier {
    /// Fits to `x` and 0/1 `y`; returns the loss of each update.
    fn fit(&mut self, x: &Mat, y: &[u8], cfg: &AssociationConfig, seed: u64) -> Result<Vec<f64>>;

    fn predict_proba(&self, x: &Mat) -> Vec<f64>;
}

/// Single-logit classifier with a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationClassifier {
    pub arch: ClassifierArch,
    pub net: Mlp,
}

impl AssociationClassifier {
    pub fn new(d_in: usize, cfg: &AssociationConfig, seed: u64) -> Self {
        let mut dims = vec![d_in];
        if cfg.arch == ClassifierArch::Mlp {
            dims.extend(&cfg.hidden);
        }
        dims.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            arch: cfg.arch,
            net: Mlp::new(&dims, &mut rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.net.d_in()
    }

    pub fn store(&self) -> &ParamStore {
        &self.net.store
    }

    /// Mean binary cross-entropy on `x`, with gradients per parameter.
    pub fn loss_and_gradients(&self, x: &Mat, y: &[u8]) -> (f64, std::collections::BTreeMap<String, Mat>) {
        let mut g = Graph::new();
        let b = self.net.store.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let logits = self.net.forward(&mut g, &b, xv);
        let targets: Vec<f64> = y.iter().map(|&l| f64::from(l)).collect();
        let loss = g.bce_with_logits(logits, &targets);
        let grads = g.backward(loss);
        (g.scalar(loss), b.gradients(&g, &grads))
    }
}

fn check_training_set(x: &Mat, y: &[u8]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("{} rows but {} labels", x.nrows(), y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&l| l > 1) {
        return Err(Error::Argument(format!("label {bad} is not 0 or 1")));
    }
    let pos = y.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::ClassCoverage(format!("{pos} positives among {} samples", y.len())));
    }
    Ok(())
}

impl Classifier for AssociationClassifier {
    fn fit(&mut self, x: &Mat, y: &[u8], cfg: &AssociationConfig, seed: u64) -> Result<Vec<f64>> {
        check_training_set(x, y)?;
        if x.ncols() != self.d_in() {
            return Err(Error::Shape(format!("features of width {}, classifier expects {}", x.ncols(), self.d_in())));
        }
        if cfg.batch == 0 {
            return Err(Error::Config("fine-tune batch must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = Sgd::new(cfg.sgd);
        let mut order: Vec<usize> = (0..y.len()).collect();
        let b = cfg.batch.min(y.len());
        let mut pos = order.len();
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            if pos + b > order.len() {
                order.shuffle(&mut rng);
                pos = 0;
            }
            let idx = &order[pos..pos + b];
            pos += b;
            let xb = x.select(ndarray::Axis(0), idx);
            let yb: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
            let (loss, grads) = self.loss_and_gradients(&xb, &yb);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: step,
                    last_finite: step.checked_sub(1),
                });
            }
            opt.step(&mut self.net.store, &grads);
            losses.push(loss);
        }
        Ok(losses)
    }

    fn predict_proba(&self, x: &Mat) -> Vec<f64> {
        self.net.infer(x).column(0).iter().map(|&z| sigmoid(z)).collect()
    }
}

/// Loss trace and the generator digests taken around fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub losses: Vec<f64>,
    pub digest_before: String,
    pub digest_after: String,
}

/// Trains `classifier` on `F(h̃)` for the fused training pairs `joints`.
/// Only the classifier is updated; the frozen model's digest is checked
/// before and after.
pub fn finetune<C: Classifier>(
    classifier: &mut C,
    model: &TransferModel,
    joints: &Mat,
    labels: &[u8],
    cfg: &AssociationConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    check_training_set(joints, labels)?;
    let digest_before = model.generator_digest();
    let features = model.generate(joints)?;
    let losses = classifier.fit(&features, labels, cfg, seed)?;
    let digest_after = model.generator_digest();
    if digest_before != digest_after {
        return Err(Error::FreezeViolation {
            before: digest_before,
            after: digest_after,
        });
    }
    Ok(FinetuneReport {
        losses,
        digest_before,
        digest_after,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub deposit_id: String,
    pub withdrawal_id: String,
    pub probability: f64,
    pub label: u8,
    pub threshold: f64,
}

impl Prediction {
    pub fn new(deposit_id: &str, withdrawal_id: &str, probability: f64, threshold: f64) -> Self {
        Self {
            deposit_id: deposit_id.to_string(),
            withdrawal_id: withdrawal_id.to_string(),
            probability,
            label: u8::from(probability >= threshold),
            threshold,
        }
    }
}

/// Scores the ordered pair (deposit, withdrawal): MixFusion, then F, then C.
pub fn predict_pair<C: Classifier>(
    classifier: &C,
    model: &TransferModel,
    fusion: &MixFusion,
    graph: &TransactionGraph,
    deposit_id: &str,
    withdrawal_id: &str,
    threshold: f64,
) -> Result<Prediction> {
    let joint: JointRepresentation = fusion.joint(graph, deposit_id, withdrawal_id)?;
    let row = Mat::from_shape_vec((1, joint.values.len()), joint.values).expect("row");
    let p = classifier.predict_proba(&model.generate(&row)?)[0];
    Ok(Prediction::new(deposit_id, withdrawal_id, p, threshold))
}

/// Predictions for `pairs` whose fused representations are the rows of
/// `joints`.
pub fn predict_batch<C: Classifier>(
    classifier: &C,
    model: &TransferModel,
    pairs: &[PairSample],
    joints: &Mat,
    threshold: f64,
) -> Result<Vec<Prediction>> {
    if pairs.len() != joints.nrows() {
        return Err(Error::Shape(format!("{} pairs but {} rows", pairs.len(), joints.nrows())));
    }
    let probs = classifier.predict_proba(&model.generate(joints)?);
    Ok(pairs
        .iter()
        .zip(probs)
        .map(|(p, prob)| Prediction::new(&p.deposit_id, &p.withdrawal_id, prob, threshold))
        .collect())
}

/// CSV `deposit,withdrawal,probability,label`.
pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "deposit,withdrawal,probability,label")?;
    for p in predictions {
        writeln!(out, "{},{},{},{}", p.deposit_id, p.withdrawal_id, p.probability, p.label)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SgdConfig;
    use crate::transfer::{Adapter, Encoder, GeneratorArch, GeneratorConfig, TransferConfig};
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn identity_model(d: usize) -> TransferModel {
        let cfg = TransferConfig {
            generator: GeneratorConfig {
                arch: GeneratorArch::Mlp,
                hidden: vec![d],
                ..Default::default()
            },
            classifier_hidden: vec![],
            ..Default::default()
        };
        let adapter = Adapter::new(Array2::zeros((1, d)), Array2::eye(d)).unwrap();
        TransferModel::new(Encoder::identity(d), adapter, &cfg, 3).unwrap()
    }

    fn toy_cfg() -> AssociationConfig {
        AssociationConfig {
            hidden: vec![32, 32],
            steps: 500,
            sgd: SgdConfig {
                lr: 0.05,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn separable_pair_is_learned_and_digest_is_unchanged() {
        let model = identity_model(4);
        let x = array![[1.0, 0.5, -0.2, 0.3], [-1.0, -0.5, 0.2, -0.3]];
        let y = [1u8, 0];
        let mut c = AssociationClassifier::new(4, &toy_cfg(), 1);
        let report = finetune(&mut c, &model, &x, &y, &toy_cfg(), 2).unwrap();
        assert!(*report.losses.last().unwrap() < 1e-2, "loss {:?}", report.losses.last());
        assert_eq!(report.digest_before, report.digest_after);
        let p = c.predict_proba(&model.generate(&x).unwrap());
        assert!(p[0] > 0.5 && p[1] < 0.5, "{p:?}");
    }

    #[test]
    fn logistic_variant_fits_too() {
        let model = identity_model(2);
        let x = array![[2.0, 0.0], [-2.0, 0.0], [1.5, 0.1], [-1.0, 0.3]];
        let y = [1u8, 0, 1, 0];
        let cfg = AssociationConfig {
            arch: ClassifierArch::Logistic,
            ..toy_cfg()
        };
        let mut c = AssociationClassifier::new(2, &cfg, 1);
        assert_eq!(c.store().num_scalars(), 3);
        finetune(&mut c, &model, &x, &y, &cfg, 0).unwrap();
        let p = c.predict_proba(&model.generate(&x).unwrap());
        for (pi, yi) in p.iter().zip(y) {
            assert_eq!(u8::from(*pi >= 0.5), yi);
        }
    }

    #[test]
    fn single_class_and_mismatched_inputs_are_rejected() {
        let model = identity_model(2);
        let mut c = AssociationClassifier::new(2, &toy_cfg(), 1);
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(
            finetune(&mut c, &model, &x, &[1, 1], &toy_cfg(), 0),
            Err(Error::ClassCoverage(_))
        ));
        assert!(matches!(finetune(&mut c, &model, &x, &[1], &toy_cfg(), 0), Err(Error::Shape(_))));
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let cfg = AssociationConfig {
            arch: ClassifierArch::Logistic,
            ..toy_cfg()
        };
        let c = AssociationClassifier::new(3, &cfg, 4);
        let x = array![[0.3, -1.0, 0.5], [1.2, 0.4, -0.7], [-0.2, 0.1, 0.9]];
        let y = [1u8, 0, 1];
        let (_, grads) = c.loss_and_gradients(&x, &y);
        let h = 1e-5;
        for (name, grad) in &grads {
            for idx in 0..grad.len() {
                let eval = |d: f64| {
                    let mut m = c.clone();
                    *m.net.store.get_mut(name).unwrap().iter_mut().nth(idx).unwrap() += d;
                    m.loss_and_gradients(&x, &y).0
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = *grad.iter().nth(idx).unwrap();
                assert!((num - ana).abs() <= 1e-4 * num.abs().max(ana.abs()).max(1e-6), "{name}: {ana} vs {num}");
            }
        }
    }

    #[test]
    fn zeroed_output_layer_gives_one_half() {
        let mut c = AssociationClassifier::new(3, &toy_cfg(), 1);
        let last = c.net.dims.len() - 2;
        for p in ["weight", "bias"] {
            c.net.store.get_mut(&format!("layer{last}.{p}")).unwrap().fill(0.0);
        }
        let x = array![[5.0, -3.0, 1.0], [0.0, 0.0, 0.0]];
        assert_eq!(c.predict_proba(&x), vec![0.5, 0.5]);
        assert_eq!(Prediction::new("a", "b", 0.5, 0.5).label, 1);
    }

    #[test]
    fn predictions_csv_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_predictions(&path, &[Prediction::new("d", "w", 0.25, 0.5)]).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "deposit,withdrawal,probability,label\nd,w,0.25,0\n");
    }

    proptest! {
        #[test]
        fn raising_the_threshold_never_creates_positives(
            probs in proptest::collection::vec(0.0f64..=1.0, 1..30),
            t1 in 0.0f64..1.0,
            dt in 0.0f64..1.0,
        ) {
            let t2 = t1 + dt;
            for p in probs {
                let low = Prediction::new("d", "w", p, t1).label;
                let high = Prediction::new("d", "w", p, t2).label;
                prop_assert!(high <= low);
            }
        }
    }
}
