//! Heuristic matchers and the no-transfer learning baseline.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use crate::association::AssociationClassifier;
use crate::data::{PairSample, Role, Split, TransactionGraph};
use crate::error::Result;
use crate::evaluation::EvalContext;

/// Gas-price fingerprint modulus: the last nine decimal digits of a wei value.
pub const GF_MODULUS: u64 = 1_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HeuristicRule {
    GasFingerprint,
    Denomination,
}

impl HeuristicRule {
    pub fn as_str(self) -> &'static str {
        match self {
            HeuristicRule::GasFingerprint => "gas_fingerprint",
            HeuristicRule::Denomination => "denomination",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicMatch {
    pub deposit_id: String,
    pub withdrawal_id: String,
    pub rule: HeuristicRule,
    /// The fingerprint (gas) or the denomination amount that matched.
    pub evidence: String,
}

/// Edge indices sent by deposit-role accounts and received by
/// withdrawal-role accounts.
fn role_edges(graph: &TransactionGraph) -> (Vec<usize>, Vec<usize>) {
    let role = |id: &str| graph.account(graph.position(id).expect("validated graph")).role;
    let mut dep = Vec::new();
    let mut wd = Vec::new();
    for (i, e) in graph.edges().iter().enumerate() {
        if role(&e.from_id) == Role::Deposit {
            dep.push(i);
        }
        if role(&e.to_id) == Role::Withdrawal {
            wd.push(i);
        }
    }
    (dep, wd)
}

/// Links a deposit account to a withdrawal account when any of its outgoing
/// transactions shares a nonzero `gas_price mod 10⁹` with any transaction
/// paying the withdrawal account. One match per address pair, carrying the
/// smallest shared fingerprint; sorted by (deposit, withdrawal).
pub fn gas_fingerprint_match(graph: &TransactionGraph) -> Vec<HeuristicMatch> {
    let (dep, wd) = role_edges(graph);
    let edges = graph.edges();
    let mut by_print: HashMap<u64, Vec<&str>> = HashMap::new();
    for &i in &wd {
        let fp = edges[i].gas_price % GF_MODULUS;
        if fp != 0 {
            by_print.entry(fp).or_default().push(&edges[i].to_id);
        }
    }
    let mut pairs: BTreeMap<(&str, &str), u64> = BTreeMap::new();
    for &i in &dep {
        let fp = edges[i].gas_price % GF_MODULUS;
        if fp == 0 {
            continue;
        }
        for &w in by_print.get(&fp).into_iter().flatten() {
            let slot = pairs.entry((edges[i].from_id.as_str(), w)).or_insert(fp);
            *slot = (*slot).min(fp);
        }
    }
    pairs
        .into_iter()
        .map(|((d, w), fp)| HeuristicMatch {
            deposit_id: d.to_string(),
            withdrawal_id: w.to_string(),
            rule: HeuristicRule::GasFingerprint,
            evidence: fp.to_string(),
        })
        .collect()
}

/// Simplified cross-contract rule: a deposit and a withdrawal of the same
/// fixed denomination (withdrawals may be short by up to `fee_tolerance`,
/// relative) where the withdrawal follows within `window` seconds.
pub fn denomination_match(graph: &TransactionGraph, denominations: &[f64], fee_tolerance: f64, window: i64) -> Vec<HeuristicMatch> {
    let (dep, wd) = role_edges(graph);
    let edges = graph.edges();
    let denom_of = |amount: f64, tol: f64| {
        denominations
            .iter()
            .copied()
            .find(|&d| amount <= d * (1.0 + 1e-12) && amount >= d * (1.0 - tol) - 1e-12)
    };
    let mut pairs: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    for &i in &dep {
        let Some(d) = denom_of(edges[i].amount, 0.0) else { continue };
        for &j in &wd {
            let dt = edges[j].timestamp - edges[i].timestamp;
            if dt > 0 && dt <= window && denom_of(edges[j].amount, fee_tolerance) == Some(d) {
                pairs.entry((edges[i].from_id.as_str(), edges[j].to_id.as_str())).or_insert(d);
            }
        }
    }
    pairs
        .into_iter()
        .map(|((a, b), d)| HeuristicMatch {
            deposit_id: a.to_string(),
            withdrawal_id: b.to_string(),
            rule: HeuristicRule::Denomination,
            evidence: d.to_string(),
        })
        .collect()
}

/// Fraction of positive pairs in `pairs` that appear among `matches`.
pub fn match_recall(matches: &[HeuristicMatch], pairs: &[PairSample]) -> f64 {
    let found: std::collections::HashSet<(&str, &str)> =
        matches.iter().map(|m| (m.deposit_id.as_str(), m.withdrawal_id.as_str())).collect();
    let pos: Vec<&PairSample> = pairs.iter().filter(|p| p.label == 1).collect();
    if pos.is_empty() {
        return 0.0;
    }
    pos.iter().filter(|p| found.contains(&p.key())).count() as f64 / pos.len() as f64
}

/// CSV `deposit,withdrawal,rule,evidence`.
pub fn write_matches(path: &Path, matches: &[HeuristicMatch]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "deposit,withdrawal,rule,evidence")?;
    for m in matches {
        writeln!(out, "{},{},{},{}", m.deposit_id, m.withdrawal_id, m.rule.as_str(), m.evidence)?;
    }
    out.flush()?;
    Ok(())
}

/// Trains the association classifier on the split's training pairs using
/// `ctx`, whose model must carry a generator that was never transfer-trained
/// (see [`crate::transfer::NoTransfer`]). All other settings match the full
/// pipeline so runs can be paired by seed.
pub fn no_transfer_train(ctx: &EvalContext, split: &Split, seed: u64) -> Result<AssociationClassifier> {
    ctx.train_classifier(&split.train, seed)
}
