//! End-to-end assembly: corpus loading, subgraph encoding, transfer
//! pretraining and checkpoint persistence.
//!
//! A checkpoint is a directory holding `config.toml`, `manifest.txt`
//! (`key = value` lines plus one `tensor = name rows cols offset` line per
//! tensor) and `tensors.bin`, the tensors as little-endian `f64`, row-major,
//! concatenated in manifest order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{self, Corpus, PairSample, Provenance, Role, TransactionGraph};
use crate::error::{Error, Result};
use crate::evaluation::trial_seed;
use crate::grad::Mat;
use crate::mixfusion::{MixFusion, NodeEmbeddings};
use crate::nn::{Network, ParamStore};
use crate::transfer::{pretrain_transfer, Adapter, Encoder, TrainLog, TransferModel};

/// Sub-seed streams derived from the master seed.
pub mod streams {
    pub const FUSION: usize = 1;
    pub const TRANSFER: usize = 2;
    pub const ALIGNMENT: usize = 3;
    pub const EVALUATION: usize = 4;
}

pub fn sub_seed(cfg: &RunConfig, stream: usize) -> u64 {
    trial_seed(cfg.seed, stream)
}

/// The configured corpus: synthetic from `cfg.synth` and `cfg.seed`, or the
/// files named in `cfg.data`.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    if cfg.data.is_synthetic() {
        return data::generate_synthetic_corpus(&cfg.synth, cfg.seed);
    }
    let source_path = cfg.data.source.as_ref().expect("validated");
    let graph_dir = cfg.data.graph_dir.as_ref().expect("validated");
    let pairs_path = cfg
        .data
        .pairs
        .clone()
        .unwrap_or_else(|| data::CorpusPaths::in_dir(graph_dir).pairs);
    let source = data::load_source_dataset(source_path, cfg.data.d_s)?;
    let (graph, pairs) = data::load_target_graph_and_pairs(graph_dir, &pairs_path)?;
    Ok(Corpus { source, graph, pairs })
}

/// Up to `n` unlabeled (deposit, withdrawal) candidates drawn uniformly from
/// the cross product of the two roles.
pub fn alignment_pairs(graph: &TransactionGraph, n: usize, seed: u64) -> Result<Vec<PairSample>> {
    let deps = graph.ids_with_role(Role::Deposit);
    let wds = graph.ids_with_role(Role::Withdrawal);
    let total = deps.len() * wds.len();
    if total == 0 {
        return Err(Error::Capacity("the target graph has no deposit/withdrawal candidates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, total, n.min(total)).into_vec();
    picks.sort_unstable();
    Ok(picks
        .into_iter()
        .map(|i| PairSample::new(deps[i / wds.len()], wds[i % wds.len()], 0, Provenance::ShuffledNegative))
        .collect())
}

/// Subgraph encoder plus frozen transfer model.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub fusion: MixFusion,
    pub model: TransferModel,
}

/// Output of [`pretrain`].
#[derive(Debug, Clone)]
pub struct Trained {
    pub pipeline: Pipeline,
    /// Same encoder, adapter and generator initialization, never
    /// transfer-trained.
    pub untrained: TransferModel,
    pub embeddings: NodeEmbeddings,
    pub encoder_losses: Vec<f64>,
    pub log: TrainLog,
}

pub fn build_fusion(cfg: &RunConfig, graph: &TransactionGraph) -> Result<MixFusion> {
    MixFusion::new(graph.d_t(), &cfg.mixfusion, sub_seed(cfg, streams::FUSION))
}

/// Encodes the target graph, then pretrains the encoder and runs the
/// configured transfer strategy against unlabeled candidate pairs.
pub fn pretrain(cfg: &RunConfig, corpus: &Corpus) -> Result<Trained> {
    let fusion = build_fusion(cfg, &corpus.graph)?;
    let embeddings = fusion.embed_all(&corpus.graph)?;
    let stream = alignment_pairs(&corpus.graph, cfg.transfer.target_stream, sub_seed(cfg, streams::ALIGNMENT))?;
    let target = embeddings.joint_matrix(&corpus.graph, &stream)?;
    let out = pretrain_transfer(&corpus.source, &target, cfg.d_p(), &cfg.transfer, sub_seed(cfg, streams::TRANSFER))?;
    Ok(Trained {
        pipeline: Pipeline {
            fusion,
            model: out.model,
        },
        untrained: out.initial,
        embeddings,
        encoder_losses: out.encoder_losses,
        log: out.log,
    })
}

fn collect_tensors(p: &Pipeline) -> ParamStore {
    let mut out = p.model.frozen_params();
    for (prefix, store) in [("gnn.", &p.fusion.params.store), ("c1.", &p.model.c1.store), ("c2.", &p.model.c2.store)] {
        for (k, v) in store.iter() {
            out.insert(format!("{prefix}{k}"), v.clone());
        }
    }
    out
}

fn take(tensors: &mut BTreeMap<String, Mat>, name: &str, like: &Mat) -> Result<Mat> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    if t.dim() != like.dim() {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has shape {:?}, expected {:?}",
            t.dim(),
            like.dim()
        )));
    }
    Ok(t)
}

fn fill(store: &mut ParamStore, prefix: &str, tensors: &mut BTreeMap<String, Mat>) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
    for k in names {
        let slot = store.get_mut(&k).expect("listed");
        *slot = take(tensors, &format!("{prefix}{k}"), slot)?;
    }
    Ok(())
}

/// Writes `config.toml`, `manifest.txt` and `tensors.bin` into `dir`.
pub fn save_checkpoint(dir: &Path, cfg: &RunConfig, p: &Pipeline) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let tensors = collect_tensors(p);
    let mut manifest = String::new();
    let _ = writeln!(manifest, "format = mixlink-checkpoint-1");
    let _ = writeln!(manifest, "config_digest = {}", cfg.digest());
    let _ = writeln!(manifest, "seed = {}", cfg.seed);
    let _ = writeln!(manifest, "d_t = {}", p.fusion.params.d_in);
    let _ = writeln!(manifest, "d_s = {}", p.model.encoder.d_s);
    let _ = writeln!(manifest, "d_p = {}", p.model.d_p());
    let _ = writeln!(manifest, "generator_digest = {}", p.model.generator_digest());
    let mut blob = Vec::with_capacity(tensors.num_scalars() * 8);
    let mut offset = 0;
    for (name, t) in tensors.iter() {
        let _ = writeln!(manifest, "tensor = {name} {} {} {offset}", t.nrows(), t.ncols());
        for v in t.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    std::fs::write(dir.join("tensors.bin"), blob)?;
    Ok(())
}

/// Manifest `key = value` entries, with tensor lines collected separately.
fn parse_manifest(text: &str) -> Result<(BTreeMap<String, String>, Vec<(String, usize, usize, usize)>)> {
    let mut keys = BTreeMap::new();
    let mut tensors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Checkpoint(format!("manifest line {}: expected `key = value`", i + 1)))?;
        if k == "tensor" {
            let f: Vec<&str> = v.split_whitespace().collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Checkpoint(format!("manifest line {}: bad number `{s}`", i + 1)));
            if f.len() != 4 {
                return Err(Error::Checkpoint(format!("manifest line {}: tensor needs name rows cols offset", i + 1)));
            }
            tensors.push((f[0].to_string(), num(f[1])?, num(f[2])?, num(f[3])?));
        } else {
            keys.insert(k.to_string(), v.to_string());
        }
    }
    Ok((keys, tensors))
}

/// Rebuilds the pipeline stored by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(RunConfig, Pipeline)> {
    let read = |name: &str| {
        std::fs::read(dir.join(name)).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", dir.join(name).display())))
    };
    let cfg = RunConfig::from_toml(&String::from_utf8_lossy(&read("config.toml")?))?;
    let (keys, entries) = parse_manifest(&String::from_utf8_lossy(&read("manifest.txt")?))?;
    if keys.get("format").map(String::as_str) != Some("mixlink-checkpoint-1") {
        return Err(Error::Checkpoint("unknown checkpoint format".into()));
    }
    if keys.get("config_digest") != Some(&cfg.digest()) {
        return Err(Error::Checkpoint("config.toml does not match the manifest digest".into()));
    }
    let dim = |k: &str| -> Result<usize> {
        keys.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("manifest lacks {k}")))
    };
    let (d_t, d_s, d_p) = (dim("d_t")?, dim("d_s")?, dim("d_p")?);
    let blob = read("tensors.bin")?;
    let mut tensors = BTreeMap::new();
    for (name, r, c, off) in entries {
        let start = off * 8;
        let end = start + r * c * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("tensor {name} overruns tensors.bin")));
        }
        let vals: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(name, Array2::from_shape_vec((r, c), vals).expect("sized"));
    }

    let mut fusion = MixFusion::new(d_t, &cfg.mixfusion, sub_seed(&cfg, streams::FUSION))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let encoder = Encoder::new(d_s, &cfg.transfer.encoder, &mut rng)?;
    let adapter = Adapter::new(Array2::zeros((1, d_s)), Array2::zeros((d_s, d_p)))?;
    let mut model = TransferModel::new(encoder, adapter, &cfg.transfer, 0)?;

    fill(&mut fusion.params.store, "gnn.", &mut tensors)?;
    fill(&mut model.adapter.store, "adapter.", &mut tensors)?;
    fill(model.generator.store_mut(), "generator.", &mut tensors)?;
    fill(&mut model.c1.store, "c1.", &mut tensors)?;
    fill(&mut model.c2.store, "c2.", &mut tensors)?;
    if let Some(net) = model.encoder.net.as_mut() {
        fill(net.store_mut(), "encoder.", &mut tensors)?;
        if let Network::Transformer(t) = net {
            t.running_mean = take(&mut tensors, "encoder.running_mean", &t.running_mean)?;
            t.running_var = take(&mut tensors, "encoder.running_var", &t.running_var)?;
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    if let Some(d) = keys.get("generator_digest") {
        if *d != model.generator_digest() {
            return Err(Error::Checkpoint("tensor contents do not match the recorded digest".into()));
        }
    }
    Ok((cfg, Pipeline { fusion, model }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::{predict_pair, AssociationClassifier};
    use crate::data::SynthConfig;
    use crate::transfer::{EncoderArch, GeneratorArch};

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.synth = SynthConfig {
            n_users: 6,
            n_decoys: 12,
            d_t: 12,
            d_s: 10,
            n_source: 80,
            ..Default::default()
        };
        cfg.data.d_s = 10;
        cfg.mixfusion.d_c = 4;
        cfg.mixfusion.cap = 16;
        cfg.transfer.encoder.d_model = 8;
        cfg.transfer.encoder.heads = 2;
        cfg.transfer.encoder.layers = 1;
        cfg.transfer.encoder.ffn = 16;
        cfg.transfer.encoder.pretrain_epochs = 2;
        cfg.transfer.generator.arch = GeneratorArch::Mlp;
        cfg.transfer.generator.hidden = vec![8];
        cfg.transfer.classifier_hidden = vec![8];
        cfg.transfer.epochs = 2;
        cfg.transfer.target_stream = 30;
        cfg.association.hidden = vec![8];
        cfg.association.steps = 20;
        cfg
    }

    #[test]
    fn alignment_pairs_are_distinct_candidates() {
        let corpus = data::generate_synthetic_corpus(&SynthConfig::default(), 1).unwrap();
        let pairs = alignment_pairs(&corpus.graph, 500, 2).unwrap();
        assert_eq!(pairs.len(), 500);
        let set: std::collections::HashSet<_> = pairs.iter().map(|p| p.key()).collect();
        assert_eq!(set.len(), 500);
        let all = alignment_pairs(&corpus.graph, 1_000_000, 2).unwrap();
        assert_eq!(all.len(), 2500);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_predictions() {
        for arch in [EncoderArch::Transformer, EncoderArch::Mlp, EncoderArch::Identity] {
            let mut cfg = tiny_config();
            cfg.transfer.encoder.arch = arch;
            let corpus = load_corpus(&cfg).unwrap();
            let trained = pretrain(&cfg, &corpus).unwrap();
            let dir = tempfile::tempdir().unwrap();
            save_checkpoint(dir.path(), &cfg, &trained.pipeline).unwrap();
            let (cfg2, loaded) = load_checkpoint(dir.path()).unwrap();
            assert_eq!(cfg2, cfg);
            assert_eq!(loaded, trained.pipeline);
            let clf = AssociationClassifier::new(cfg.d_p(), &cfg.association, 1);
            let p = &corpus.pairs[0];
            let a = predict_pair(&clf, &trained.pipeline.model, &trained.pipeline.fusion, &corpus.graph, &p.deposit_id, &p.withdrawal_id, 0.5).unwrap();
            let b = predict_pair(&clf, &loaded.model, &loaded.fusion, &corpus.graph, &p.deposit_id, &p.withdrawal_id, 0.5).unwrap();
            assert_eq!(a, b);
            // a second save is byte-identical
            let dir2 = tempfile::tempdir().unwrap();
            save_checkpoint(dir2.path(), &cfg2, &loaded).unwrap();
            for f in ["config.toml", "manifest.txt", "tensors.bin"] {
                assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(dir2.path().join(f)).unwrap());
            }
        }
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let cfg = tiny_config();
        let corpus = load_corpus(&cfg).unwrap();
        let trained = pretrain(&cfg, &corpus).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &cfg, &trained.pipeline).unwrap();
        let bin = dir.path().join("tensors.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&bin, &bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
        bytes.truncate(16);
        std::fs::write(&bin, &bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn untrained_model_shares_initialization() {
        let cfg = tiny_config();
        let corpus = load_corpus(&cfg).unwrap();
        let t = pretrain(&cfg, &corpus).unwrap();
        assert_eq!(t.untrained.encoder, t.pipeline.model.encoder);
        assert_ne!(t.untrained.generator, t.pipeline.model.generator);
        assert_eq!(t.log.records.len(), cfg.transfer.epochs);
    }
}
