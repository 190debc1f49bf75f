use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mixlink::baselines::{gas_fingerprint_match, match_recall, write_matches};
use mixlink::config::{file_digest, RunConfig};
use mixlink::data::{self, Corpus, CorpusPaths};
use mixlink::evaluation::{
    degradation_rate, export_embeddings, mmd, run_few_shot, run_imbalance, run_noise, trial_seed, Bandwidth,
    EvalContext, EvalReport, Shots,
};
use mixlink::pipeline::{self, load_checkpoint, save_checkpoint, streams};
use mixlink::transfer::{Pca, StrategyKind};
use mixlink::{Error, Result};

use crate::{Cli, Command, ConfigArg, Protocol, Reference, Strategy};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 4,
        Error::Config(_) | Error::Argument(_) | Error::Range { .. } => 2,
        e if e.is_data_error() => 3,
        _ => 1,
    }
}

fn load_config(arg: &ConfigArg, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match &arg.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Points the configuration at a corpus directory written by `synth`.
fn use_corpus_dir(cfg: &mut RunConfig, dir: &Path) {
    let paths = CorpusPaths::in_dir(dir);
    cfg.data.source = Some(paths.source);
    cfg.data.graph_dir = Some(dir.to_path_buf());
    cfg.data.pairs = Some(paths.pairs);
}

/// Writes `manifest.txt` listing the command, config digest, seed and the
/// SHA-256 of each produced file.
fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, files: &[PathBuf]) -> Result<()> {
    let mut m = String::new();
    let _ = writeln!(m, "command = {command}");
    let _ = writeln!(m, "config_digest = {}", cfg.digest());
    let _ = writeln!(m, "seed = {}", cfg.seed);
    for f in files {
        let name = f.strip_prefix(dir).unwrap_or(f);
        let _ = writeln!(m, "file = {} {}", name.display(), file_digest(f)?);
    }
    std::fs::write(dir.join("manifest.txt"), m)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = load_config(&config, cli.seed)?;
            cmd_synth(&cfg, &out)
        }
        Command::Pretrain {
            config,
            run_dir,
            data,
            strategy,
        } => {
            let mut cfg = load_config(&config, cli.seed)?;
            if let Some(d) = data {
                use_corpus_dir(&mut cfg, &d);
            }
            if let Some(s) = strategy {
                cfg.transfer.strategy = match s {
                    Strategy::Mcd => StrategyKind::Mcd,
                    Strategy::NoTransfer => StrategyKind::NoTransfer,
                };
            }
            cfg.validate()?;
            cmd_pretrain(&cfg, &run_dir)
        }
        Command::FinetuneEval {
            checkpoint,
            protocol,
            run_dir,
            data,
            shots,
            etas,
            ratios,
            trials,
            folds,
            reference,
        } => {
            let (mut cfg, pipe) = load_checkpoint(&checkpoint)?;
            if let Some(d) = data {
                use_corpus_dir(&mut cfg, &d);
            }
            if let Some(s) = shots {
                cfg.protocol.shots = s
                    .iter()
                    .map(|x| match x.parse::<Shots>()? {
                        Shots::All => Ok(0),
                        Shots::N(n) => Ok(n),
                    })
                    .collect::<Result<_>>()?;
            }
            if let Some(e) = etas {
                cfg.protocol.etas = e;
            }
            if let Some(r) = ratios {
                cfg.protocol.ratios = r.iter().map(|x| data::parse_ratio(x)).collect::<Result<_>>()?;
            }
            if let Some(t) = trials {
                cfg.protocol.trials = t;
            }
            if let Some(f) = folds {
                cfg.protocol.folds = f;
            }
            cfg.validate()?;
            let eval_seed = trial_seed(cli.seed.unwrap_or(cfg.seed), streams::EVALUATION);
            cmd_finetune_eval(&cfg, &pipe, protocol, reference, eval_seed, &run_dir)
        }
        Command::Mmd {
            x,
            y,
            pca_align,
            bandwidth,
        } => {
            let v = cmd_mmd(&x, &y, pca_align, bandwidth)?;
            println!("{}", format_sig6(v));
            Ok(())
        }
        Command::BaselineGf { data, run_dir } => cmd_baseline_gf(&data, &run_dir),
        Command::ExportEmbeddings {
            checkpoint,
            run_dir,
            data,
            max_source,
        } => {
            let (mut cfg, pipe) = load_checkpoint(&checkpoint)?;
            if let Some(d) = data {
                use_corpus_dir(&mut cfg, &d);
            }
            cmd_export_embeddings(&cfg, &pipe, max_source, &run_dir)
        }
    }
}

/// Six significant digits in scientific notation.
pub fn format_sig6(v: f64) -> String {
    format!("{v:.5e}")
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = data::generate_synthetic_corpus(&cfg.synth, cfg.seed)?;
    std::fs::create_dir_all(out)?;
    let paths = data::write_corpus(out, &corpus.source, &corpus.graph, &corpus.pairs)?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml())?;
    write_manifest(
        out,
        "synth",
        cfg,
        &[paths.source, paths.accounts, paths.edges, paths.pairs, cfg_path],
    )?;
    println!(
        "wrote {} source samples, {} accounts, {} edges, {} pairs to {}",
        corpus.source.len(),
        corpus.graph.len(),
        corpus.graph.edges().len(),
        corpus.pairs.len(),
        out.display()
    );
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    pipeline::load_corpus(cfg)
}

pub fn cmd_pretrain(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let trained = pipeline::pretrain(cfg, &corpus)?;
    std::fs::create_dir_all(run_dir)?;
    let ckpt = run_dir.join("checkpoint");
    save_checkpoint(&ckpt, cfg, &trained.pipeline)?;
    let log = run_dir.join("train_log.csv");
    std::fs::write(&log, trained.log.to_csv())?;
    let enc = run_dir.join("encoder_log.csv");
    let mut s = String::from("epoch,source_ce\n");
    for (i, l) in trained.encoder_losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    std::fs::write(&enc, s)?;
    let files = vec![
        ckpt.join("config.toml"),
        ckpt.join("manifest.txt"),
        ckpt.join("tensors.bin"),
        log,
        enc,
    ];
    write_manifest(run_dir, "pretrain", cfg, &files)?;
    if let Some(last) = trained.log.records.last() {
        println!(
            "transfer: {} epochs, final target discrepancy {:.6}, source CE {:.6}",
            trained.log.records.len(),
            last.target_discrepancy,
            last.source_ce
        );
    }
    println!("generator digest {}", trained.pipeline.model.generator_digest());
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn write_report(run_dir: &Path, stem: &str, r: &EvalReport, files: &mut Vec<PathBuf>) -> Result<()> {
    let txt = run_dir.join(format!("{stem}.txt"));
    let csv = run_dir.join(format!("{stem}.csv"));
    std::fs::write(&txt, r.to_text())?;
    std::fs::write(&csv, r.to_csv())?;
    files.push(txt);
    files.push(csv);
    Ok(())
}

fn shots_of(n: usize) -> Shots {
    if n == 0 {
        Shots::All
    } else {
        Shots::N(n)
    }
}

pub fn cmd_finetune_eval(
    cfg: &RunConfig,
    pipe: &pipeline::Pipeline,
    protocol: Protocol,
    reference: Reference,
    seed: u64,
    run_dir: &Path,
) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let embeddings = pipe.fusion.embed_all(&corpus.graph)?;
    let digest = cfg.digest();
    let ctx = EvalContext {
        graph: &corpus.graph,
        embeddings: &embeddings,
        model: &pipe.model,
        assoc: &cfg.association,
        config_digest: &digest,
    };
    std::fs::create_dir_all(run_dir)?;
    let p = &cfg.protocol;
    let pairs = &corpus.pairs;
    let mut files = Vec::new();
    let mut summary = String::new();
    let name = match protocol {
        Protocol::FewShot => {
            for &n in &p.shots {
                let r = run_few_shot(&ctx, pairs, shots_of(n), p.trials, seed)?;
                let tag = if n == 0 { "all".to_string() } else { n.to_string() };
                write_report(run_dir, &format!("few_shot_n{tag}"), &r, &mut files)?;
                let _ = writeln!(summary, "{}", r.table_row());
            }
            "few_shot"
        }
        Protocol::Noise => {
            let clean = match reference {
                Reference::Full => run_few_shot(&ctx, pairs, Shots::All, p.trials, seed)?,
                Reference::Eta5 => run_noise(&ctx, pairs, 0.05, p.folds, seed)?,
            };
            write_report(run_dir, "noise_reference", &clean, &mut files)?;
            let f1_clean = clean.summary().f1.0;
            let _ = writeln!(summary, "reference {}", clean.table_row());
            let mut deg = String::from("eta,f1_mean,f1_std,degradation_rate\n");
            for &eta in &p.etas {
                let r = run_noise(&ctx, pairs, eta, p.folds, seed)?;
                write_report(run_dir, &format!("noise_eta{eta}"), &r, &mut files)?;
                let s = r.summary();
                let rate = degradation_rate(f1_clean, s.f1.0)?;
                let _ = writeln!(deg, "{eta},{:.6},{:.6},{rate:.6}", s.f1.0, s.f1.1);
                let _ = writeln!(summary, "{}  degradation {rate:.4}", r.table_row());
            }
            let path = run_dir.join("degradation.csv");
            std::fs::write(&path, deg)?;
            files.push(path);
            "noise"
        }
        Protocol::Imbalance => {
            for &k in &p.ratios {
                let r = run_imbalance(&ctx, pairs, k, p.folds, seed)?;
                write_report(run_dir, &format!("imbalance_1to{k}"), &r, &mut files)?;
                let _ = writeln!(summary, "{}", r.table_row());
            }
            "imbalance"
        }
    };
    let path = run_dir.join("summary.txt");
    std::fs::write(&path, &summary)?;
    files.push(path);
    write_manifest(run_dir, &format!("finetune-eval {name}"), cfg, &files)?;
    print!("{summary}");
    Ok(())
}

pub fn cmd_mmd(x: &Path, y: &Path, pca_align: bool, bandwidth: Option<f64>) -> Result<f64> {
    let mut a = data::read_matrix_csv(x)?;
    let mut b = data::read_matrix_csv(y)?;
    if a.ncols() != b.ncols() {
        if !pca_align {
            return Err(Error::Schema(format!(
                "{} has {} columns and {} has {}; pass --pca-align to project the wider one",
                x.display(),
                a.ncols(),
                y.display(),
                b.ncols()
            )));
        }
        if a.ncols() > b.ncols() {
            a = Pca::fit(&a, b.ncols())?.transform(&a)?;
        } else {
            b = Pca::fit(&b, a.ncols())?.transform(&b)?;
        }
    }
    let bw = bandwidth.map_or(Bandwidth::Median, Bandwidth::Value);
    mmd(&a, &b, bw)
}

pub fn cmd_baseline_gf(dir: &Path, run_dir: &Path) -> Result<()> {
    let paths = CorpusPaths::in_dir(dir);
    let graph = data::load_target_graph(&paths.accounts, &paths.edges)?;
    let matches = gas_fingerprint_match(&graph);
    std::fs::create_dir_all(run_dir)?;
    let out = run_dir.join("matches.csv");
    write_matches(&out, &matches)?;
    println!("{} gas-fingerprint matches", matches.len());
    if paths.pairs.exists() {
        let pairs = data::load_pairs(&paths.pairs)?;
        data::check_pairs(&graph, &pairs)?;
        println!("recall over labeled positives {:.4}", match_recall(&matches, &pairs));
    }
    let mut m = String::from("command = baseline-gf\n");
    let _ = writeln!(m, "file = matches.csv {}", file_digest(&out)?);
    std::fs::write(run_dir.join("manifest.txt"), m)?;
    Ok(())
}

pub fn cmd_export_embeddings(cfg: &RunConfig, pipe: &pipeline::Pipeline, max_source: Option<usize>, run_dir: &Path) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let embeddings = pipe.fusion.embed_all(&corpus.graph)?;
    let joints = embeddings.joint_matrix(&corpus.graph, &corpus.pairs)?;
    let keep: Vec<usize> = (0..corpus.source.len().min(max_source.unwrap_or(usize::MAX))).collect();
    let source = corpus.source.subset(&keep);
    std::fs::create_dir_all(run_dir)?;
    let out = run_dir.join("embeddings.csv");
    export_embeddings(&pipe.model, &source, &corpus.pairs, &joints, &out)?;
    write_manifest(run_dir, "export-embeddings", cfg, &[out.clone()])?;
    println!(
        "wrote {} source and {} target rows to {}",
        source.len(),
        corpus.pairs.len(),
        out.display()
    );
    Ok(())
}
