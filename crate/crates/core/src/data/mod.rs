//! Domain data model, file formats, the synthetic corpus generator and the
//! corpus transforms used by the evaluation protocols.

mod io;
mod synth;
mod transforms;

use std::collections::HashMap;

use ndarray::Array2;

use crate::error::{Error, Result};

pub use io::{
    load_corpus, load_pairs, load_source_dataset, load_target_graph, load_target_graph_and_pairs, read_matrix_csv, write_accounts,
    write_corpus, write_edges, write_pairs, write_source_dataset, CorpusPaths, MALICIOUS_CLASSES,
};
pub use synth::{generate_synthetic_corpus, SynthConfig};
pub use transforms::{
    inject_label_noise, inject_label_noise_excluding, kfold, make_imbalanced, make_unassociated_negatives,
    parse_ratio, subsample_few_shot, Split,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Deposit,
    Withdrawal,
    Normal,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Deposit => "deposit",
            Role::Withdrawal => "withdrawal",
            Role::Normal => "normal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "deposit" => Some(Role::Deposit),
            "withdrawal" => Some(Role::Withdrawal),
            "normal" => Some(Role::Normal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Account {
    pub id: String,
    pub features: Vec<f64>,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TxEdge {
    pub from_id: String,
    pub to_id: String,
    /// Native-token units.
    pub amount: f64,
    /// Seconds.
    pub timestamp: i64,
    /// Smallest-denomination units (wei).
    pub gas_price: u64,
}

/// Accounts and value transfers with a symmetric neighbor index.
#[derive(Debug, Clone)]
pub struct TransactionGraph {
    d_t: usize,
    accounts: Vec<Account>,
    edges: Vec<TxEdge>,
    index: HashMap<String, usize>,
    neighbors: Vec<Vec<usize>>,
    incident: Vec<Vec<usize>>,
}

impl PartialEq for TransactionGraph {
    fn eq(&self, other: &Self) -> bool {
        self.d_t == other.d_t && self.accounts == other.accounts && self.edges == other.edges
    }
}

impl TransactionGraph {
    pub fn new(d_t: usize, accounts: Vec<Account>, edges: Vec<TxEdge>) -> Result<Self> {
        let mut index = HashMap::with_capacity(accounts.len());
        for (i, a) in accounts.iter().enumerate() {
            if a.features.len() != d_t {
                return Err(Error::Schema(format!(
                    "account {} has {} features, expected {d_t}",
                    a.id,
                    a.features.len()
                )));
            }
            if index.insert(a.id.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate account id {}", a.id)));
            }
        }
        let mut neighbors = vec![Vec::new(); accounts.len()];
        let mut incident = vec![Vec::new(); accounts.len()];
        for (e, edge) in edges.iter().enumerate() {
            if !(edge.amount >= 0.0) {
                return Err(Error::Schema(format!("edge {e} has negative amount {}", edge.amount)));
            }
            let from = *index
                .get(&edge.from_id)
                .ok_or_else(|| Error::Integrity(format!("edge {e} references unknown account {}", edge.from_id)))?;
            let to = *index
                .get(&edge.to_id)
                .ok_or_else(|| Error::Integrity(format!("edge {e} references unknown account {}", edge.to_id)))?;
            if from == to {
                return Err(Error::Integrity(format!("edge {e} is a self-loop on {}", edge.from_id)));
            }
            neighbors[from].push(to);
            neighbors[to].push(from);
            incident[from].push(e);
            incident[to].push(e);
        }
        for n in &mut neighbors {
            n.sort_unstable();
            n.dedup();
        }
        Ok(Self {
            d_t,
            accounts,
            edges,
            index,
            neighbors,
            incident,
        })
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    pub fn accounts(&self) -> &[Account] {
        &self.accounts
    }

    pub fn edges(&self) -> &[TxEdge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.accounts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accounts.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn lookup(&self, id: &str) -> Result<usize> {
        self.position(id).ok_or_else(|| Error::Lookup(id.to_string()))
    }

    pub fn account(&self, i: usize) -> &Account {
        &self.accounts[i]
    }

    /// Undirected neighbors, sorted and deduplicated.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Indices of edges touching account `i`.
    pub fn incident_edges(&self, i: usize) -> &[usize] {
        &self.incident[i]
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<&str> {
        self.accounts
            .iter()
            .filter(|a| a.role == role)
            .map(|a| a.id.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSample {
    pub features: Vec<f64>,
    /// 0 benign, 1 malicious.
    pub label: u8,
}

/// Labeled source-domain accounts.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDataset {
    pub d_s: usize,
    pub samples: Vec<SourceSample>,
}

impl SourceDataset {
    pub fn new(d_s: usize, samples: Vec<SourceSample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != d_s {
                return Err(Error::Schema(format!(
                    "sample {i} has {} features, expected {d_s}",
                    s.features.len()
                )));
            }
            if s.label > 1 {
                return Err(Error::Schema(format!("sample {i} has label {}", s.label)));
            }
        }
        Ok(Self { d_s, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.samples.len(), self.d_s));
        for (mut row, s) in m.rows_mut().into_iter().zip(&self.samples) {
            row.assign(&ndarray::ArrayView1::from(&s.features));
        }
        m
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label as usize).collect()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 1).count()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            d_s: self.d_s,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    GroundTruth,
    ShuffledNegative,
    InjectedNoise,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::GroundTruth => "ground_truth",
            Provenance::ShuffledNegative => "shuffled_negative",
            Provenance::InjectedNoise => "injected_noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ground_truth" => Some(Provenance::GroundTruth),
            "shuffled_negative" => Some(Provenance::ShuffledNegative),
            "injected_noise" => Some(Provenance::InjectedNoise),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PairSample {
    pub deposit_id: String,
    pub withdrawal_id: String,
    /// 1 associated, 0 unassociated.
    pub label: u8,
    pub provenance: Provenance,
}

impl PairSample {
    pub fn new(deposit_id: impl Into<String>, withdrawal_id: impl Into<String>, label: u8, provenance: Provenance) -> Self {
        Self {
            deposit_id: deposit_id.into(),
            withdrawal_id: withdrawal_id.into(),
            label,
            provenance,
        }
    }

    pub fn positive(deposit_id: impl Into<String>, withdrawal_id: impl Into<String>) -> Self {
        Self::new(deposit_id, withdrawal_id, 1, Provenance::GroundTruth)
    }

    pub fn key(&self) -> (&str, &str) {
        (&self.deposit_id, &self.withdrawal_id)
    }
}

/// A source dataset together with a target graph and its labeled pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub source: SourceDataset,
    pub graph: TransactionGraph,
    /// In synthetic corpora: planted positives followed by shuffled negatives.
    pub pairs: Vec<PairSample>,
}

/// Checks that every pair endpoint is a graph account and that no pair links
/// an account to itself.
pub fn check_pairs(graph: &TransactionGraph, pairs: &[PairSample]) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        for id in [&p.deposit_id, &p.withdrawal_id] {
            if graph.position(id).is_none() {
                return Err(Error::Integrity(format!("pair {i} references unknown account {id}")));
            }
        }
        if p.deposit_id == p.withdrawal_id {
            return Err(Error::Integrity(format!("pair {i} links {} to itself", p.deposit_id)));
        }
        if p.label > 1 {
            return Err(Error::Schema(format!("pair {i} has label {}", p.label)));
        }
    }
    Ok(())
}
