//! Synthetic mixer corpus with planted deposit → pool → withdrawal chains.
//!
//! Every user owns a home wallet, a deposit account, a withdrawal account and
//! a cash-out wallet. The four accounts share a behavioral habit vector, and
//! the deposit and withdrawal sides echo each other's amounts, timing and
//! (for a fraction of users) gas-price suffix. Decoys are unrelated accounts
//! forming short transfer chains between user wallets.
//!
//! The source domain mirrors the same idea at the account level: each sample
//! has an inflow block and an outflow block, and malicious accounts forward
//! what they receive, so their two blocks share a latent. Both classes are
//! three-component Gaussian mixtures with overlapping means.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::transforms::make_unassociated_negatives;
use super::{Account, Corpus, PairSample, Role, SourceDataset, SourceSample, TransactionGraph, TxEdge};
use crate::error::{Error, Result};

/// Number of leading account features derived from the transaction edges.
const EDGE_STATS: usize = 8;
const GWEI: u64 = 1_000_000_000;
const T0: i64 = 1_600_000_000;
const DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_decoys: usize,
    /// Fixed pool denominations in native-token units.
    pub pools: Vec<f64>,
    /// Length of the decoy transfer chains.
    pub hops: usize,
    pub deposits_min: usize,
    pub deposits_max: usize,
    /// Fraction of users whose withdrawals reuse the deposit gas-price suffix.
    pub echo_rate: f64,
    pub d_t: usize,
    /// Width of the shared habit vector.
    pub latent_dim: usize,
    /// Scale of the habit component of account features.
    pub signal: f64,
    /// Standard deviation of per-account feature noise.
    pub feature_noise: f64,
    pub d_s: usize,
    pub n_source: usize,
    pub malicious_fraction: f64,
    /// Residual noise between the inflow and outflow latents of malicious
    /// source accounts.
    pub mirror_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 50,
            n_decoys: 200,
            pools: vec![0.1, 1.0, 10.0, 100.0],
            hops: 3,
            deposits_min: 1,
            deposits_max: 3,
            echo_rate: 0.3,
            d_t: 46,
            latent_dim: 4,
            signal: 1.0,
            feature_noise: 1.0,
            d_s: 148,
            n_source: 2000,
            malicious_fraction: 0.25,
            mirror_noise: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.n_users == 0 {
            return bad("n_users must be positive");
        }
        if self.pools.is_empty() || self.pools.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return bad("pools must be a non-empty list of positive denominations");
        }
        if self.hops == 0 {
            return bad("hops must be positive");
        }
        if self.deposits_min == 0 || self.deposits_min > self.deposits_max {
            return bad("need 1 <= deposits_min <= deposits_max");
        }
        if !(0.0..=1.0).contains(&self.echo_rate) || !(0.0..=1.0).contains(&self.malicious_fraction) {
            return bad("echo_rate and malicious_fraction must lie in [0, 1]");
        }
        if self.d_t <= EDGE_STATS {
            return bad("d_t must exceed the 8 edge statistics");
        }
        if self.latent_dim == 0 || self.d_s < 2 || self.n_source < 2 {
            return bad("latent_dim, d_s >= 2 and n_source >= 2 are required");
        }
        for (name, v) in [
            ("signal", self.signal),
            ("feature_noise", self.feature_noise),
            ("mirror_noise", self.mirror_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be a non-negative number"));
            }
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

fn address(rng: &mut ChaCha8Rng) -> String {
    let bytes: [u8; 20] = rng.random();
    let mut s = String::with_capacity(42);
    s.push_str("0x");
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn suffix(rng: &mut ChaCha8Rng) -> u64 {
    rng.random_range(1..GWEI)
}

/// Builds the corpus as a pure function of `(cfg, seed)`.
pub fn generate_synthetic_corpus(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = synth_source(cfg, &mut rng)?;
    let (graph, positives) = synth_target(cfg, &mut rng)?;
    let mut pairs = positives;
    if pairs.len() >= 2 {
        let negatives = make_unassociated_negatives(&pairs, 1, rng.random())?;
        pairs.extend(negatives);
    }
    Ok(Corpus { source, graph, pairs })
}

fn synth_source(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SourceDataset> {
    let half = cfg.d_s / 2;
    let r = cfg.latent_dim;
    // Shared loading so that the two blocks express a latent identically.
    let loading: Vec<Vec<f64>> = (0..half).map(|_| normal_vec(rng, r, 1.0 / (r as f64).sqrt())).collect();
    let components = 3;
    let means: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|_| (0..components).map(|_| normal_vec(rng, cfg.d_s, 0.5)).collect())
        .collect();
    let n_mal = ((cfg.n_source as f64) * cfg.malicious_fraction).round() as usize;
    let mut labels: Vec<u8> = (0..cfg.n_source).map(|i| u8::from(i < n_mal)).collect();
    labels.shuffle(rng);
    let mut samples = Vec::with_capacity(cfg.n_source);
    for label in labels {
        let k = rng.random_range(0..components);
        let a = normal_vec(rng, r, 1.0);
        let b: Vec<f64> = if label == 1 {
            a.iter().map(|&v| v + cfg.mirror_noise * normal(rng)).collect()
        } else {
            normal_vec(rng, r, 1.0)
        };
        let mean = &means[label as usize][k];
        let mut features = Vec::with_capacity(cfg.d_s);
        for block in [&a, &b] {
            for row in &loading {
                let v: f64 = row.iter().zip(block.iter()).map(|(w, z)| w * z).sum();
                features.push(cfg.signal * v);
            }
        }
        features.resize(cfg.d_s, 0.0);
        for (j, f) in features.iter_mut().enumerate() {
            *f += mean[j] + cfg.feature_noise * 0.5 * normal(rng);
        }
        samples.push(SourceSample { features, label });
    }
    SourceDataset::new(cfg.d_s, samples)
}

struct Builder {
    accounts: Vec<(String, Role)>,
    owners: Vec<usize>,
    edges: Vec<TxEdge>,
}

impl Builder {
    fn add(&mut self, rng: &mut ChaCha8Rng, role: Role, owner: usize) -> usize {
        self.accounts.push((address(rng), role));
        self.owners.push(owner);
        self.accounts.len() - 1
    }

    fn edge(&mut self, from: usize, to: usize, amount: f64, timestamp: i64, gas_price: u64) {
        self.edges.push(TxEdge {
            from_id: self.accounts[from].0.clone(),
            to_id: self.accounts[to].0.clone(),
            amount,
            timestamp,
            gas_price,
        });
    }
}

fn synth_target(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<(TransactionGraph, Vec<PairSample>)> {
    let mut b = Builder {
        accounts: Vec::new(),
        owners: Vec::new(),
        edges: Vec::new(),
    };
    // Owner 0 is the mixer itself; users are 1..=n_users; each decoy owns itself.
    let pools: Vec<usize> = (0..cfg.pools.len()).map(|_| b.add(rng, Role::Normal, 0)).collect();
    let mut wallets = Vec::new();
    let mut positives = Vec::with_capacity(cfg.n_users);
    for u in 1..=cfg.n_users {
        let home = b.add(rng, Role::Normal, u);
        let dep = b.add(rng, Role::Deposit, u);
        let wd = b.add(rng, Role::Withdrawal, u);
        let out = b.add(rng, Role::Normal, u);
        wallets.push((home, out));
        positives.push(PairSample::positive(b.accounts[dep].0.clone(), b.accounts[wd].0.clone()));

        let p = rng.random_range(0..pools.len());
        let denom = cfg.pools[p];
        let m = rng.random_range(cfg.deposits_min..=cfg.deposits_max);
        let start = T0 + rng.random_range(0..30 * DAY);
        let gap = rng.random_range(600..6 * 3600);
        let delay = rng.random_range(3600..3 * DAY);
        let gwei = rng.random_range(20..80u64);
        let tag = suffix(rng);
        let echo = rng.random::<f64>() < cfg.echo_rate;

        b.edge(home, dep, m as f64 * denom * 1.01, start - 3600, gwei * GWEI);
        for i in 0..m as i64 {
            b.edge(dep, pools[p], denom, start + i * gap, gwei * GWEI + tag);
        }
        let fee = 1.0 - rng.random_range(0.001..0.01);
        for i in 0..m as i64 {
            let relay_gwei = rng.random_range(20..80u64);
            let gp = relay_gwei * GWEI + if echo { tag } else { suffix(rng) };
            b.edge(pools[p], wd, denom * fee, start + delay + i * gap, gp);
        }
        b.edge(wd, out, m as f64 * denom * fee * 0.999, start + delay + m as i64 * gap + 600, gwei * GWEI);
    }

    let decoys: Vec<usize> = (0..cfg.n_decoys)
        .map(|i| b.add(rng, Role::Normal, cfg.n_users + 1 + i))
        .collect();
    for chain in decoys.chunks(cfg.hops) {
        let amount = 10f64.powf(rng.random_range(-1.0..2.5));
        let mut t = T0 + rng.random_range(0..30 * DAY);
        let gas = |rng: &mut ChaCha8Rng| {
            let gwei = rng.random_range(20..80u64) * GWEI;
            if rng.random::<f64>() < 0.2 {
                gwei + suffix(rng)
            } else {
                gwei
            }
        };
        if !wallets.is_empty() {
            let (_, out) = wallets[rng.random_range(0..wallets.len())];
            let g = gas(rng);
            b.edge(out, chain[0], amount, t, g);
        }
        for w in chain.windows(2) {
            t += rng.random_range(60..DAY);
            let g = gas(rng);
            b.edge(w[0], w[1], amount * 0.99, t, g);
        }
        if !wallets.is_empty() {
            let (home, _) = wallets[rng.random_range(0..wallets.len())];
            t += rng.random_range(60..DAY);
            let g = gas(rng);
            b.edge(chain[chain.len() - 1], home, amount * 0.98, t, g);
        }
    }

    let features = account_features(cfg, &b, rng);
    let accounts = b
        .accounts
        .into_iter()
        .zip(features)
        .map(|((id, role), features)| Account { id, features, role })
        .collect();
    let graph = TransactionGraph::new(cfg.d_t, accounts, b.edges)?;
    Ok((graph, positives))
}

/// Edge statistics followed by habit features, standardized per column.
fn account_features(cfg: &SynthConfig, b: &Builder, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = b.accounts.len();
    let r = cfg.latent_dim;
    let habit_width = cfg.d_t - EDGE_STATS;
    let loading: Vec<Vec<f64>> = (0..habit_width)
        .map(|_| normal_vec(rng, r, 1.0 / (r as f64).sqrt()))
        .collect();
    let mut habits: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut rows = Vec::with_capacity(n);

    let mut in_count = vec![0.0f64; n];
    let mut out_count = vec![0.0f64; n];
    let mut in_amount = vec![0.0f64; n];
    let mut out_amount = vec![0.0f64; n];
    let mut times: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut gas: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut peers: Vec<Vec<usize>> = vec![Vec::new(); n];
    let index: HashMap<&str, usize> = b.accounts.iter().enumerate().map(|(i, (id, _))| (id.as_str(), i)).collect();
    for e in &b.edges {
        let (f, t) = (index[e.from_id.as_str()], index[e.to_id.as_str()]);
        out_count[f] += 1.0;
        in_count[t] += 1.0;
        out_amount[f] += e.amount;
        in_amount[t] += e.amount;
        for i in [f, t] {
            times[i].push((e.timestamp - T0) as f64 / DAY as f64);
            gas[i].push(e.gas_price as f64 / GWEI as f64);
        }
        peers[f].push(t);
        peers[t].push(f);
    }

    for i in 0..n {
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let span = times[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - times[i].iter().cloned().fold(f64::INFINITY, f64::min);
        let mut p = peers[i].clone();
        p.sort_unstable();
        p.dedup();
        let mut row = vec![
            in_count[i].ln_1p(),
            out_count[i].ln_1p(),
            in_amount[i].ln_1p(),
            out_amount[i].ln_1p(),
            mean(&times[i]),
            if span.is_finite() { (span * 24.0).ln_1p() } else { 0.0 },
            mean(&gas[i]),
            (p.len() as f64).ln_1p(),
        ];
        let owner = b.owners[i];
        let z = habits.entry(owner).or_insert_with(|| normal_vec(rng, r, 1.0)).clone();
        for l in &loading {
            let v: f64 = l.iter().zip(&z).map(|(w, z)| w * z).sum();
            row.push(cfg.signal * v + cfg.feature_noise * normal(rng));
        }
        rows.push(row);
    }
    standardize(&mut rows);
    rows
}

fn standardize(rows: &mut [Vec<f64>]) {
    if rows.is_empty() {
        return;
    }
    let n = rows.len() as f64;
    for j in 0..rows[0].len() {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 1e-12 { var.sqrt() } else { 1.0 };
        for r in rows.iter_mut() {
            r[j] = (r[j] - mean) / sd;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;
    use std::collections::HashSet;

    fn small() -> SynthConfig {
        SynthConfig {
            n_source: 200,
            ..SynthConfig::default()
        }
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_synthetic_corpus(&small(), 7).unwrap();
        let b = generate_synthetic_corpus(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&small(), 8).unwrap();
        assert_ne!(a.pairs, c.pairs);
    }

    #[test]
    fn single_user_yields_one_positive() {
        let cfg = SynthConfig {
            n_users: 1,
            n_decoys: 0,
            ..small()
        };
        let c = generate_synthetic_corpus(&cfg, 1).unwrap();
        assert_eq!(c.pairs.len(), 1);
        assert_eq!(c.pairs[0].label, 1);
    }

    #[test]
    fn corpus_shape_and_planted_pairs() {
        let c = generate_synthetic_corpus(&small(), 7).unwrap();
        let pos: Vec<_> = c.pairs.iter().filter(|p| p.label == 1).collect();
        let neg: Vec<_> = c.pairs.iter().filter(|p| p.label == 0).collect();
        assert_eq!(pos.len(), 50);
        assert_eq!(neg.len(), 50);
        assert!(pos.iter().all(|p| p.provenance == Provenance::GroundTruth));
        assert!(neg.iter().all(|p| p.provenance == Provenance::ShuffledNegative));
        crate::data::check_pairs(&c.graph, &c.pairs).unwrap();
        for p in &pos {
            let d = c.graph.lookup(&p.deposit_id).unwrap();
            let w = c.graph.lookup(&p.withdrawal_id).unwrap();
            assert_eq!(c.graph.account(d).role, Role::Deposit);
            assert_eq!(c.graph.account(w).role, Role::Withdrawal);
        }
        assert_eq!(c.graph.ids_with_role(Role::Deposit).len(), 50);
        assert_eq!(c.graph.len(), 4 + 50 * 4 + 200);
        assert_eq!(c.source.len(), 200);
        assert_eq!(c.source.positives(), 50);
        let ids: HashSet<_> = c.graph.accounts().iter().map(|a| &a.id).collect();
        assert_eq!(ids.len(), c.graph.len());
    }

    #[test]
    fn planted_pairs_are_more_similar_than_shuffled_ones() {
        let c = generate_synthetic_corpus(&small(), 7).unwrap();
        let feats = |id: &str| &c.graph.account(c.graph.lookup(id).unwrap()).features;
        let mean_cos = |label: u8| {
            let v: Vec<f64> = c
                .pairs
                .iter()
                .filter(|p| p.label == label)
                .map(|p| cosine(feats(&p.deposit_id), feats(&p.withdrawal_id)))
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean_cos(1) > mean_cos(0), "{} vs {}", mean_cos(1), mean_cos(0));
    }

    #[test]
    fn features_are_standardized() {
        let c = generate_synthetic_corpus(&small(), 3).unwrap();
        let n = c.graph.len() as f64;
        for j in 0..c.graph.d_t() {
            let mean: f64 = c.graph.accounts().iter().map(|a| a.features[j]).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            SynthConfig { n_users: 0, ..small() },
            SynthConfig { pools: vec![], ..small() },
            SynthConfig { pools: vec![-1.0], ..small() },
            SynthConfig { deposits_min: 3, deposits_max: 2, ..small() },
            SynthConfig { d_t: 5, ..small() },
            SynthConfig { echo_rate: 1.5, ..small() },
        ] {
            assert!(matches!(generate_synthetic_corpus(&cfg, 0), Err(Error::Config(_))));
        }
    }
}
