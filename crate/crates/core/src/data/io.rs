//! CSV ingestion and export. Every file has a mandatory header row and uses
//! `.` as the decimal separator.

use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{check_pairs, Account, Corpus, PairSample, Provenance, Role, SourceDataset, SourceSample, TransactionGraph, TxEdge};
use crate::error::{Error, Result};

/// Class names folded into the malicious label when a `class` column is
/// present. Matching ignores case and punctuation.
pub const MALICIOUS_CLASSES: [&str; 6] = ["phishing", "gambling", "darknet", "blacklist", "laundering", "ponzi"];

/// File layout of a corpus directory.
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub accounts: PathBuf,
    pub edges: PathBuf,
    pub pairs: PathBuf,
    pub source: PathBuf,
}

impl CorpusPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            accounts: dir.join("accounts.csv"),
            edges: dir.join("edges.csv"),
            pairs: dir.join("pairs.csv"),
            source: dir.join("source.csv"),
        }
    }
}

fn name_of(path: &Path) -> String {
    path.display().to_string()
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", name_of(path))))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::parse(name_of(path), line, format!("{kind:?}")),
    }
}

fn headers(path: &Path, rdr: &mut csv::Reader<File>) -> Result<Vec<String>> {
    let h = rdr.headers().map_err(|e| csv_err(path, e))?;
    if h.is_empty() {
        return Err(Error::Schema(format!("{}: missing header row", name_of(path))));
    }
    Ok(h.iter().map(str::to_string).collect())
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, path: &Path, line: usize) -> Result<&'a str> {
    rec.get(i)
        .ok_or_else(|| Error::parse(name_of(path), line, format!("missing column {i}")))
}

fn parse_f64(s: &str, path: &Path, line: usize, what: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::parse(name_of(path), line, format!("{what}: `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(name_of(path), line, format!("{what}: `{s}` is not finite")));
    }
    Ok(v)
}

fn parse_label(s: &str, path: &Path, line: usize) -> Result<u8> {
    match s {
        "0" => Ok(0),
        "1" => Ok(1),
        _ => Err(Error::parse(name_of(path), line, format!("label `{s}` is not 0 or 1"))),
    }
}

fn is_malicious_class(name: &str) -> bool {
    let norm: String = name
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase();
    MALICIOUS_CLASSES.iter().any(|c| norm.contains(c))
}

fn line_of(rec: &csv::StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

/// Reads `f_0,…,f_{d_S−1},label`. A `class` column, when present, overrides
/// the label: the malicious class names map to 1 and all others to 0.
pub fn load_source_dataset(path: &Path, d_s: usize) -> Result<SourceDataset> {
    let mut rdr = reader(path)?;
    let cols = headers(path, &mut rdr)?;
    let class_col = cols.iter().position(|c| c == "class");
    let label_col = cols.iter().position(|c| c == "label");
    if class_col.is_none() && label_col.is_none() {
        return Err(Error::Schema(format!("{}: needs a `label` or `class` column", name_of(path))));
    }
    let feature_cols: Vec<usize> = (0..cols.len())
        .filter(|&i| Some(i) != class_col && Some(i) != label_col)
        .collect();
    if feature_cols.len() != d_s {
        return Err(Error::Schema(format!(
            "{}: {} feature columns, expected d_S = {d_s}",
            name_of(path),
            feature_cols.len()
        )));
    }
    let mut samples = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = line_of(&rec);
        let mut features = Vec::with_capacity(d_s);
        for &c in &feature_cols {
            features.push(parse_f64(field(&rec, c, path, line)?, path, line, &cols[c])?);
        }
        let label = match class_col {
            Some(c) => u8::from(is_malicious_class(field(&rec, c, path, line)?)),
            None => parse_label(field(&rec, label_col.unwrap(), path, line)?, path, line)?,
        };
        samples.push(SourceSample { features, label });
    }
    SourceDataset::new(d_s, samples)
}

pub fn write_source_dataset(path: &Path, data: &SourceDataset) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = (0..data.d_s).map(|i| format!("f_{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for s in &data.samples {
        let mut row: Vec<String> = s.features.iter().map(f64::to_string).collect();
        row.push(s.label.to_string());
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::WriterBuilder::new().from_writer(File::create(path)?))
}

fn load_accounts(path: &Path) -> Result<(usize, Vec<Account>)> {
    let mut rdr = reader(path)?;
    let cols = headers(path, &mut rdr)?;
    if cols.len() < 2 || cols[0] != "id" || cols[1] != "role" {
        return Err(Error::Schema(format!("{}: header must start with id,role", name_of(path))));
    }
    let d_t = cols.len() - 2;
    let mut accounts = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = line_of(&rec);
        let id = field(&rec, 0, path, line)?.to_string();
        let role_s = field(&rec, 1, path, line)?;
        let role = Role::parse(role_s)
            .ok_or_else(|| Error::parse(name_of(path), line, format!("unknown role `{role_s}`")))?;
        let mut features = Vec::with_capacity(d_t);
        for c in 2..cols.len() {
            features.push(parse_f64(field(&rec, c, path, line)?, path, line, &cols[c])?);
        }
        accounts.push(Account { id, features, role });
    }
    Ok((d_t, accounts))
}

fn load_edges(path: &Path) -> Result<Vec<TxEdge>> {
    let mut rdr = reader(path)?;
    let cols = headers(path, &mut rdr)?;
    if cols != ["from", "to", "amount", "timestamp", "gas_price"] {
        return Err(Error::Schema(format!(
            "{}: header must be from,to,amount,timestamp,gas_price",
            name_of(path)
        )));
    }
    let mut edges = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = line_of(&rec);
        let amount = parse_f64(field(&rec, 2, path, line)?, path, line, "amount")?;
        if amount < 0.0 {
            return Err(Error::parse(name_of(path), line, "amount is negative"));
        }
        let ts = field(&rec, 3, path, line)?;
        let timestamp = ts
            .parse()
            .map_err(|_| Error::parse(name_of(path), line, format!("timestamp `{ts}` is not an integer")))?;
        let gp = field(&rec, 4, path, line)?;
        let gas_price = gp
            .parse()
            .map_err(|_| Error::parse(name_of(path), line, format!("gas_price `{gp}` is not a non-negative integer")))?;
        edges.push(TxEdge {
            from_id: field(&rec, 0, path, line)?.to_string(),
            to_id: field(&rec, 1, path, line)?.to_string(),
            amount,
            timestamp,
            gas_price,
        });
    }
    Ok(edges)
}

/// Reads `accounts.csv` (`id,role,f_0,…`) and `edges.csv`; d_T is the number
/// of feature columns.
pub fn load_target_graph(accounts: &Path, edges: &Path) -> Result<TransactionGraph> {
    let (d_t, accounts) = load_accounts(accounts)?;
    let edges = load_edges(edges)?;
    TransactionGraph::new(d_t, accounts, edges)
}

/// Reads `deposit,withdrawal,label[,provenance]`.
pub fn load_pairs(path: &Path) -> Result<Vec<PairSample>> {
    let mut rdr = reader(path)?;
    let cols = headers(path, &mut rdr)?;
    let with_provenance = match cols.len() {
        3 => false,
        4 if cols[3] == "provenance" => true,
        _ => {
            return Err(Error::Schema(format!(
                "{}: header must be deposit,withdrawal,label[,provenance]",
                name_of(path)
            )))
        }
    };
    if cols[0] != "deposit" || cols[1] != "withdrawal" || cols[2] != "label" {
        return Err(Error::Schema(format!(
            "{}: header must be deposit,withdrawal,label[,provenance]",
            name_of(path)
        )));
    }
    let mut pairs = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = line_of(&rec);
        let label = parse_label(field(&rec, 2, path, line)?, path, line)?;
        let provenance = if with_provenance {
            let p = field(&rec, 3, path, line)?;
            Provenance::parse(p).ok_or_else(|| Error::parse(name_of(path), line, format!("unknown provenance `{p}`")))?
        } else if label == 1 {
            Provenance::GroundTruth
        } else {
            Provenance::ShuffledNegative
        };
        pairs.push(PairSample::new(
            field(&rec, 0, path, line)?,
            field(&rec, 1, path, line)?,
            label,
            provenance,
        ));
    }
    Ok(pairs)
}

/// Loads a graph directory (`accounts.csv`, `edges.csv`) and a pairs file,
/// checking that every pair endpoint resolves.
pub fn load_target_graph_and_pairs(graph_dir: &Path, pairs: &Path) -> Result<(TransactionGraph, Vec<PairSample>)> {
    let paths = CorpusPaths::in_dir(graph_dir);
    let graph = load_target_graph(&paths.accounts, &paths.edges)?;
    let pairs = load_pairs(pairs)?;
    check_pairs(&graph, &pairs)?;
    Ok((graph, pairs))
}

pub fn write_accounts(path: &Path, graph: &TransactionGraph) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["id".to_string(), "role".to_string()];
    header.extend((0..graph.d_t()).map(|i| format!("f_{i}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for a in graph.accounts() {
        let mut row = vec![a.id.clone(), a.role.as_str().to_string()];
        row.extend(a.features.iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_edges(path: &Path, graph: &TransactionGraph) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["from", "to", "amount", "timestamp", "gas_price"])
        .map_err(|e| csv_err(path, e))?;
    for e in graph.edges() {
        w.write_record([
            e.from_id.clone(),
            e.to_id.clone(),
            e.amount.to_string(),
            e.timestamp.to_string(),
            e.gas_price.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes pairs with the optional provenance column so that reloads are exact.
pub fn write_pairs(path: &Path, pairs: &[PairSample]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["deposit", "withdrawal", "label", "provenance"])
        .map_err(|e| csv_err(path, e))?;
    for p in pairs {
        w.write_record([
            p.deposit_id.as_str(),
            p.withdrawal_id.as_str(),
            if p.label == 1 { "1" } else { "0" },
            p.provenance.as_str(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the four corpus files into `dir`, which must exist.
pub fn write_corpus(dir: &Path, source: &SourceDataset, graph: &TransactionGraph, pairs: &[PairSample]) -> Result<CorpusPaths> {
    let paths = CorpusPaths::in_dir(dir);
    write_source_dataset(&paths.source, source)?;
    write_accounts(&paths.accounts, graph)?;
    write_edges(&paths.edges, graph)?;
    write_pairs(&paths.pairs, pairs)?;
    Ok(paths)
}

/// Loads the four corpus files from `dir`.
pub fn load_corpus(dir: &Path, d_s: usize) -> Result<Corpus> {
    let paths = CorpusPaths::in_dir(dir);
    let source = load_source_dataset(&paths.source, d_s)?;
    let (graph, pairs) = load_target_graph_and_pairs(dir, &paths.pairs)?;
    Ok(Corpus { source, graph, pairs })
}

/// Reads a numeric table. Columns named `f_*` are used when any exist,
/// otherwise every column except `label`, `class`, `id` and `role`.
pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let mut rdr = reader(path)?;
    let cols = headers(path, &mut rdr)?;
    let mut keep: Vec<usize> = (0..cols.len()).filter(|&i| cols[i].starts_with("f_")).collect();
    if keep.is_empty() {
        keep = (0..cols.len())
            .filter(|&i| !matches!(cols[i].as_str(), "label" | "class" | "id" | "role"))
            .collect();
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = line_of(&rec);
        for &c in &keep {
            values.push(parse_f64(field(&rec, c, path, line)?, path, line, &cols[c])?);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, keep.len()), values).map_err(|e| Error::Shape(e.to_string()))
}
