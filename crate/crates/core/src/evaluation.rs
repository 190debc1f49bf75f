//! Metrics, the few-shot / noise / imbalance protocols, degradation rate,
//! the MMD probe and embedding export.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::association::{finetune, predict_batch, AssociationClassifier, AssociationConfig};
use crate::data::{
    inject_label_noise_excluding, kfold, make_imbalanced, subsample_few_shot, PairSample, Provenance, SourceDataset,
    TransactionGraph,
};
use crate::error::{Error, Result};
use crate::grad::Mat;
use crate::mixfusion::NodeEmbeddings;
use crate::transfer::TransferModel;

/// Confusion counts and derived scores for the positive class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn compute_metrics(predictions: &[u8], labels: &[u8]) -> Result<Metrics> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        accuracy: ratio(tp + tn, labels.len()),
        precision,
        recall,
        f1,
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub accuracy: (f64, f64),
    pub precision: (f64, f64),
    pub recall: (f64, f64),
    pub f1: (f64, f64),
}

/// Per-trial metrics of one protocol setting.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: String,
    /// Setting within the protocol, such as `N=10` or `eta=0.5`.
    pub parameter: String,
    pub config_digest: String,
    pub trials: Vec<Metrics>,
}

impl EvalReport {
    pub fn summary(&self) -> Summary {
        let col = |f: fn(&Metrics) -> f64| mean_std(&self.trials.iter().map(f).collect::<Vec<_>>());
        Summary {
            accuracy: col(|m| m.accuracy),
            precision: col(|m| m.precision),
            recall: col(|m| m.recall),
            f1: col(|m| m.f1),
        }
    }

    /// Key-value text with one `[[trial]]` table per trial.
    pub fn to_text(&self) -> String {
        let s = self.summary();
        let mut out = String::new();
        let _ = writeln!(out, "protocol = \"{}\"", self.protocol);
        let _ = writeln!(out, "parameter = \"{}\"", self.parameter);
        let _ = writeln!(out, "config_digest = \"{}\"", self.config_digest);
        let _ = writeln!(out, "trials = {}", self.trials.len());
        for (name, (m, sd)) in [
            ("accuracy", s.accuracy),
            ("precision", s.precision),
            ("recall", s.recall),
            ("f1", s.f1),
        ] {
            let _ = writeln!(out, "{name}_mean = {m:.6}");
            let _ = writeln!(out, "{name}_std = {sd:.6}");
        }
        for (i, t) in self.trials.iter().enumerate() {
            let _ = write!(
                out,
                "\n[[trial]]\nindex = {i}\naccuracy = {:.6}\nprecision = {:.6}\nrecall = {:.6}\nf1 = {:.6}\ntp = {}\nfp = {}\ntn = {}\nfn = {}\n",
                t.accuracy, t.precision, t.recall, t.f1, t.tp, t.fp, t.tn, t.fn_
            );
        }
        out
    }

    /// Flat per-trial CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("protocol,parameter,trial,accuracy,precision,recall,f1,tp,fp,tn,fn\n");
        for (i, t) in self.trials.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{i},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
                self.protocol, self.parameter, t.accuracy, t.precision, t.recall, t.f1, t.tp, t.fp, t.tn, t.fn_
            );
        }
        out
    }

    /// One table row: `parameter  acc mean±std  recall mean±std  f1 mean±std`.
    pub fn table_row(&self) -> String {
        let s = self.summary();
        format!(
            "{:<12} acc {:.4}±{:.4}  recall {:.4}±{:.4}  f1 {:.4}±{:.4}",
            self.parameter, s.accuracy.0, s.accuracy.1, s.recall.0, s.recall.1, s.f1.0, s.f1.1
        )
    }
}

/// Independent per-trial seed.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    let mut z = seed ^ (trial as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything a trial needs: node embeddings of the target graph, the
/// frozen transfer model and the fine-tuning settings.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub graph: &'a TransactionGraph,
    pub embeddings: &'a NodeEmbeddings,
    pub model: &'a TransferModel,
    pub assoc: &'a AssociationConfig,
    pub config_digest: &'a str,
}

fn labels(pairs: &[PairSample]) -> Vec<u8> {
    pairs.iter().map(|p| p.label).collect()
}

impl EvalContext<'_> {
    pub fn joints(&self, pairs: &[PairSample]) -> Result<Mat> {
        self.embeddings.joint_matrix(self.graph, pairs)
    }

    /// Fine-tunes a fresh classifier on `train` and scores it on `test`.
    pub fn run_trial(&self, train: &[PairSample], test: &[PairSample], seed: u64) -> Result<Metrics> {
        if test.iter().any(|p| p.provenance == Provenance::InjectedNoise) {
            return Err(Error::Integrity("injected noise reached a test set".into()));
        }
        let clf = self.train_classifier(train, seed)?;
        let preds = predict_batch(&clf, self.model, test, &self.joints(test)?, self.assoc.threshold)?;
        let predicted: Vec<u8> = preds.iter().map(|p| p.label).collect();
        compute_metrics(&predicted, &labels(test))
    }

    pub fn train_classifier(&self, train: &[PairSample], seed: u64) -> Result<AssociationClassifier> {
        let mut clf = AssociationClassifier::new(self.model.d_p(), self.assoc, seed);
        finetune(
            &mut clf,
            self.model,
            &self.joints(train)?,
            &labels(train),
            self.assoc,
            seed.wrapping_add(1),
        )?;
        Ok(clf)
    }

    fn report(&self, protocol: &str, parameter: String, trials: Vec<Metrics>) -> EvalReport {
        EvalReport {
            protocol: protocol.into(),
            parameter,
            config_digest: self.config_digest.into(),
            trials,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shots {
    N(usize),
    All,
}

impl std::fmt::Display for Shots {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shots::N(n) => write!(f, "N={n}"),
            Shots::All => write!(f, "N=ALL"),
        }
    }
}

impl std::str::FromStr for Shots {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Shots::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Shots::N(n)),
            _ => Err(Error::Argument(format!("few-shot size `{s}` is not a positive integer or ALL"))),
        }
    }
}

fn collect<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..n).into_par_iter().map(f).collect()
}

/// `trials` resamples of N positives + N negatives for training, the rest
/// held out. With [`Shots::All`] a single stratified 80/20 split is reused
/// and only the training seed varies.
pub fn run_few_shot(ctx: &EvalContext, pairs: &[PairSample], shots: Shots, trials: usize, seed: u64) -> Result<EvalReport> {
    let metrics = match shots {
        Shots::N(n) => collect(trials, |t| {
            let s = trial_seed(seed, t);
            let split = subsample_few_shot(pairs, n, s)?;
            ctx.run_trial(&split.train, &split.test, s)
        })?,
        Shots::All => {
            let folds = kfold(pairs, 5, seed)?;
            let (train, test) = fold_split(pairs, &folds, 0);
            collect(trials, |t| ctx.run_trial(&train, &test, trial_seed(seed, t)))?
        }
    };
    Ok(ctx.report("few_shot", shots.to_string(), metrics))
}

fn fold_split(pairs: &[PairSample], folds: &[Vec<usize>], k: usize) -> (Vec<PairSample>, Vec<PairSample>) {
    let mut held = vec![false; pairs.len()];
    for &i in &folds[k] {
        held[i] = true;
    }
    let test = folds[k].iter().map(|&i| pairs[i].clone()).collect();
    let train = (0..pairs.len()).filter(|&i| !held[i]).map(|i| pairs[i].clone()).collect();
    (train, test)
}

/// Training folds of a `folds`-fold split, each with `⌈eta·P⌉` injected
/// pseudo-positives. Every positive in `pairs` is excluded from the noise.
pub fn noisy_folds(pairs: &[PairSample], eta: f64, folds: usize, seed: u64) -> Result<Vec<(Vec<PairSample>, Vec<PairSample>)>> {
    let idx = kfold(pairs, folds, seed)?;
    (0..folds)
        .map(|k| {
            let (train, test) = fold_split(pairs, &idx, k);
            let noisy = inject_label_noise_excluding(&train, eta, trial_seed(seed ^ 0x4E01_5E, k), pairs)?;
            Ok((noisy, test))
        })
        .collect()
}

/// `folds`-fold cross-validation with noise in the training folds only.
pub fn run_noise(ctx: &EvalContext, pairs: &[PairSample], eta: f64, folds: usize, seed: u64) -> Result<EvalReport> {
    let splits = noisy_folds(pairs, eta, folds, seed)?;
    let metrics = collect(splits.len(), |k| ctx.run_trial(&splits[k].0, &splits[k].1, trial_seed(seed, k)))?;
    Ok(ctx.report("noise", format!("eta={eta}"), metrics))
}

/// `folds`-fold cross-validation on a 1:`ratio` positive-to-negative corpus.
pub fn run_imbalance(ctx: &EvalContext, pairs: &[PairSample], ratio: usize, folds: usize, seed: u64) -> Result<EvalReport> {
    let imbalanced = make_imbalanced(pairs, ratio, seed)?;
    let splits = noisy_folds(&imbalanced, 0.0, folds, seed)?;
    let metrics = collect(splits.len(), |k| ctx.run_trial(&splits[k].0, &splits[k].1, trial_seed(seed, k)))?;
    Ok(ctx.report("imbalance", format!("ratio=1:{ratio}"), metrics))
}

/// `(f1_clean − f1_eta) / f1_clean`.
pub fn degradation_rate(f1_clean: f64, f1_eta: f64) -> Result<f64> {
    if f1_clean == 0.0 {
        return Err(Error::Division("clean F1 is zero"));
    }
    Ok((f1_clean - f1_eta) / f1_clean)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled sample.
    Median,
    Value(f64),
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median_distance(z: &[ndarray::ArrayView1<f64>]) -> f64 {
    let mut d = Vec::with_capacity(z.len() * (z.len() - 1) / 2);
    for i in 0..z.len() {
        for j in i + 1..z.len() {
            d.push(sq_dist(z[i], z[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

fn canonical_first(x: &Mat, y: &Mat) -> bool {
    x.nrows()
        .cmp(&y.nrows())
        .then_with(|| {
            x.iter()
                .zip(y.iter())
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .is_le()
}

/// Square root of the unbiased squared-MMD estimate with an RBF kernel
/// `exp(−‖a−b‖² / 2σ²)`, clipped at zero before the root.
pub fn mmd(x: &Mat, y: &Mat, bandwidth: Bandwidth) -> Result<f64> {
    if x.ncols() != y.ncols() {
        return Err(Error::Shape(format!("samples of dimension {} and {}", x.ncols(), y.ncols())));
    }
    if x.nrows() < 2 || y.nrows() < 2 {
        return Err(Error::Argument("MMD needs at least two samples per set".into()));
    }
    // Fixed argument order makes the estimate exactly symmetric.
    let (x, y) = if canonical_first(x, y) { (x, y) } else { (y, x) };
    let sigma = match bandwidth {
        Bandwidth::Value(v) => v,
        Bandwidth::Median => {
            let pooled: Vec<_> = x.rows().into_iter().chain(y.rows()).collect();
            median_distance(&pooled)
        }
    };
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Bandwidth(sigma));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let k = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| (-gamma * sq_dist(a, b)).exp();
    let within = |m: &Mat| {
        let n = m.nrows();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += k(m.row(i), m.row(j));
                }
            }
        }
        s / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for a in x.rows() {
        for b in y.rows() {
            cross += k(a, b);
        }
    }
    cross /= (x.nrows() * y.nrows()) as f64;
    let sq = within(x) + within(y) - 2.0 * cross;
    Ok(sq.max(0.0).sqrt())
}

/// Writes `sample_id,domain,label,e_0,…` rows of generator outputs for the
/// source samples and the target pairs.
pub fn export_embeddings(
    model: &TransferModel,
    source: &SourceDataset,
    target_pairs: &[PairSample],
    target_joints: &Mat,
    path: &Path,
) -> Result<()> {
    if target_pairs.len() != target_joints.nrows() {
        return Err(Error::Shape(format!(
            "{} target pairs but {} rows",
            target_pairs.len(),
            target_joints.nrows()
        )));
    }
    let fs = if source.is_empty() {
        Mat::zeros((0, model.d_p()))
    } else {
        model.generate_source(&source.features())?
    };
    let ft = model.generate(target_joints)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..model.d_p()).map(|i| format!("e_{i}")).collect();
    writeln!(out, "sample_id,domain,label,{}", header.join(","))?;
    let row = |v: ndarray::ArrayView1<f64>| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    for (i, (s, e)) in source.samples.iter().zip(fs.rows()).enumerate() {
        writeln!(out, "s{i},source,{},{}", s.label, row(e))?;
    }
    for (p, e) in target_pairs.iter().zip(ft.rows()) {
        writeln!(out, "{}:{},target,{},{}", p.deposit_id, p.withdrawal_id, p.label, row(e))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn metric_cases() {
        let m = compute_metrics(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((m.accuracy, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = compute_metrics(&[0, 0, 0, 0], &[1, 1, 0, 0]).unwrap();
        assert_eq!((m.accuracy, m.recall, m.f1), (0.5, 0.0, 0.0));
        assert!(compute_metrics(&[1], &[1, 0]).is_err());
        assert!(compute_metrics(&[], &[]).is_err());
    }

    /// Confusion counts by enumerating the four cells separately.
    fn oracle(pred: &[u8], lab: &[u8]) -> (usize, usize, usize, usize) {
        let count = |p: u8, l: u8| pred.iter().zip(lab).filter(|(a, b)| **a == p && **b == l).count();
        (count(1, 1), count(1, 0), count(0, 0), count(0, 1))
    }

    #[test]
    fn metrics_match_enumerated_confusion_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let n = rng.random_range(1..40);
            let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let lab: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let m = compute_metrics(&pred, &lab).unwrap();
            let (tp, fp, tn, fn_) = oracle(&pred, &lab);
            assert_eq!((m.tp, m.fp, m.tn, m.fn_), (tp, fp, tn, fn_));
            assert_eq!(m.accuracy, (tp + tn) as f64 / n as f64);
        }
    }

    #[test]
    fn degradation_cases() {
        assert_eq!(degradation_rate(0.7, 0.7).unwrap(), 0.0);
        assert!((degradation_rate(0.9872, 0.7629).unwrap() - 0.2272).abs() < 1e-4);
        assert!((degradation_rate(0.9490, 0.7629).unwrap() - 0.1961).abs() < 1e-4);
        assert!(matches!(degradation_rate(0.0, 0.5), Err(Error::Division(_))));
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    }

    #[test]
    fn mmd_point_masses() {
        let x = array![[0.0], [0.0]];
        let y = array![[10.0], [10.0]];
        let want = (2.0 - 2.0 * (-50.0f64).exp()).sqrt();
        assert!((mmd(&x, &y, Bandwidth::Value(1.0)).unwrap() - want).abs() < 1e-9);
        assert!(mmd(&x, &x, Bandwidth::Value(1.0)).unwrap().abs() < 1e-12);
        assert!(matches!(mmd(&x, &x, Bandwidth::Median), Err(Error::Bandwidth(_))));
        assert!(matches!(mmd(&x, &array![[1.0, 2.0], [3.0, 4.0]], Bandwidth::Median), Err(Error::Shape(_))));
    }

    #[test]
    fn mmd_identical_sample_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((30, 3), |_| StandardNormal.sample(&mut rng));
        assert!(mmd(&x, &x.clone(), Bandwidth::Median).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mmd_grows_with_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((60, 2), |_| StandardNormal.sample(&mut rng));
        let base = Array2::from_shape_fn((60, 2), |_| StandardNormal.sample(&mut rng));
        let vals: Vec<f64> = [0.5, 1.5, 3.0]
            .iter()
            .map(|&o| mmd(&x, &(&base + o), Bandwidth::Value(1.0)).unwrap())
            .collect();
        assert!(vals[0] < vals[1] && vals[1] < vals[2], "{vals:?}");
    }

    proptest! {
        #[test]
        fn mmd_is_symmetric_and_non_negative(
            xs in proptest::collection::vec(-5.0f64..5.0, 6..20),
            ys in proptest::collection::vec(-5.0f64..5.0, 6..20),
        ) {
            let x = Array2::from_shape_vec((xs.len() / 2, 2), xs[..xs.len() / 2 * 2].to_vec()).unwrap();
            let y = Array2::from_shape_vec((ys.len() / 2, 2), ys[..ys.len() / 2 * 2].to_vec()).unwrap();
            let a = mmd(&x, &y, Bandwidth::Median);
            let b = mmd(&y, &x, Bandwidth::Median);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                    prop_assert!(a >= 0.0);
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "asymmetric failure"),
            }
        }
    }

    #[test]
    fn noise_stays_in_training_folds() {
        let mut pairs = Vec::new();
        for i in 0..20 {
            pairs.push(PairSample::positive(format!("d{i}"), format!("w{i}")));
            pairs.push(PairSample::new(format!("d{i}"), format!("w{}", (i + 1) % 20), 0, Provenance::ShuffledNegative));
        }
        let folds = noisy_folds(&pairs, 0.5, 10, 3).unwrap();
        assert_eq!(folds.len(), 10);
        for (train, test) in &folds {
            assert!(test.iter().all(|p| p.provenance != Provenance::InjectedNoise));
            let p = train.iter().filter(|p| p.label == 1 && p.provenance != Provenance::InjectedNoise).count();
            let noise = train.iter().filter(|p| p.provenance == Provenance::InjectedNoise).count();
            assert_eq!(noise, (0.5 * p as f64).ceil() as usize);
        }
        let clean = noisy_folds(&pairs, 0.0, 10, 3).unwrap();
        for ((c, _), (n, _)) in clean.iter().zip(&noisy_folds(&pairs, 0.5, 10, 3).unwrap()) {
            assert_eq!(&n[..c.len()], &c[..]);
        }
    }

    #[test]
    fn shots_parse() {
        assert_eq!("all".parse::<Shots>().unwrap(), Shots::All);
        assert_eq!("3".parse::<Shots>().unwrap(), Shots::N(3));
        assert!("0".parse::<Shots>().is_err());
        assert_eq!(Shots::N(10).to_string(), "N=10");
    }

    #[test]
    fn report_serializations() {
        let m = compute_metrics(&[1, 0], &[1, 1]).unwrap();
        let r = EvalReport {
            protocol: "few_shot".into(),
            parameter: "N=1".into(),
            config_digest: "abc".into(),
            trials: vec![m, m],
        };
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(r.to_text().contains("f1_mean = 0.666667"));
        assert!(r.table_row().starts_with("N=1"));
    }
}
