use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[data]
d_s = 10

[synth]
n_users = 8
n_decoys = 16
d_t = 12
d_s = 10
n_source = 80

[mixfusion]
d_c = 4
cap = 16

[transfer]
epochs = 2
target_stream = 30
classifier_hidden = [8]

[transfer.encoder]
d_model = 8
heads = 2
layers = 1
ffn = 16
pretrain_epochs = 2

[transfer.generator]
arch = "mlp"
hidden = [8]

[association]
hidden = [8]
steps = 20
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mixlink"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        Self { _dir: dir, root, config }
    }

    fn synth(&self, name: &str) -> PathBuf {
        let out = self.root.join(name);
        let o = run(&["synth", "--config", s(&self.config), "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    }

    fn pretrain(&self, data: &Path, name: &str) -> PathBuf {
        let run_dir = self.root.join(name);
        let o = run(&["pretrain", "--config", s(&self.config), "--data", s(data), "--run-dir", s(&run_dir)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        run_dir
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let f = Fixture::new();
    let a = f.synth("a");
    let b = f.synth("b");
    for name in ["source.csv", "accounts.csv", "edges.csv", "pairs.csv"] {
        assert_eq!(read(&a.join(name)), read(&b.join(name)), "{name}");
    }
}

#[test]
fn full_pipeline_is_deterministic() {
    let f = Fixture::new();
    let data = f.synth("data");
    let r1 = f.pretrain(&data, "r1");
    let r2 = f.pretrain(&data, "r2");
    assert_eq!(read(&r1.join("train_log.csv")), read(&r2.join("train_log.csv")));
    assert_eq!(
        read(&r1.join("checkpoint/tensors.bin")),
        read(&r2.join("checkpoint/tensors.bin"))
    );

    let mut outs = Vec::new();
    for (run_dir, jobs) in [(&r1, "1"), (&r2, "3")] {
        let eval = run_dir.join("eval");
        let o = run(&[
            "--jobs",
            jobs,
            "finetune-eval",
            "--checkpoint",
            s(&run_dir.join("checkpoint")),
            "--protocol",
            "few-shot",
            "--shots",
            "2,all",
            "--trials",
            "2",
            "--run-dir",
            s(&eval),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push((read(&eval.join("few_shot_n2.csv")), read(&eval.join("few_shot_nall.csv"))));
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn noise_and_imbalance_protocols_write_reports() {
    let f = Fixture::new();
    let data = f.synth("data");
    let r = f.pretrain(&data, "r");
    let ck = r.join("checkpoint");
    let noise = r.join("noise");
    let o = run(&[
        "finetune-eval", "--checkpoint", s(&ck), "--protocol", "noise", "--etas", "0.1",
        "--folds", "3", "--run-dir", s(&noise),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let deg = std::fs::read_to_string(noise.join("degradation.csv")).unwrap();
    assert!(deg.starts_with("eta,f1_mean,f1_std,degradation_rate\n"));
    assert_eq!(deg.lines().count(), 2);

    let imb = r.join("imbalance");
    let o = run(&[
        "finetune-eval", "--checkpoint", s(&ck), "--protocol", "imbalance", "--ratios", "1:2",
        "--folds", "3", "--run-dir", s(&imb),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(imb.join("summary.txt").exists());
}

#[test]
fn export_and_baseline_outputs() {
    let f = Fixture::new();
    let data = f.synth("data");
    let r = f.pretrain(&data, "r");
    let ex = r.join("ex");
    let o = run(&[
        "export-embeddings", "--checkpoint", s(&r.join("checkpoint")), "--max-source", "5",
        "--run-dir", s(&ex),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(ex.join("embeddings.csv")).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("sample_id,domain,label,e_0"));
    assert_eq!(text.lines().filter(|l| l.contains(",source,")).count(), 5);

    let gf = r.join("gf");
    let o = run(&["baseline-gf", "--data", s(&data), "--run-dir", s(&gf)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = std::fs::read_to_string(gf.join("matches.csv")).unwrap();
    assert!(m.starts_with("deposit,withdrawal,rule,evidence\n"));
}

#[test]
fn mmd_of_identical_tables_is_zero_and_symmetric() {
    let f = Fixture::new();
    let data = f.synth("data");
    let src = data.join("source.csv");
    let o = run(&["mmd", s(&src), s(&src)]);
    assert!(o.status.success());
    let v: f64 = String::from_utf8(o.stdout).unwrap().trim().parse().unwrap();
    assert_eq!(v, 0.0);

    let acc = data.join("accounts.csv");
    let ab = run(&["mmd", s(&src), s(&acc), "--pca-align"]);
    let ba = run(&["mmd", s(&acc), s(&src), "--pca-align"]);
    assert!(ab.status.success(), "{}", String::from_utf8_lossy(&ab.stderr));
    assert_eq!(ab.stdout, ba.stdout);
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    let code = |o: Output| o.status.code().unwrap();

    assert_eq!(code(run(&[])), 2);
    assert_eq!(code(run(&["finetune-eval", "--checkpoint", "x", "--protocol", "bogus", "--run-dir", "y"])), 2);
    assert_eq!(code(run(&["--jobs", "0", "mmd", "a", "b"])), 2);

    let bad = f.root.join("bad.toml");
    std::fs::write(&bad, "[transfer.sgd]\nlr = -1.0\n").unwrap();
    assert_eq!(code(run(&["synth", "--config", s(&bad), "--out", s(&f.root.join("o"))])), 2);

    let missing = f.root.join("missing");
    assert_eq!(
        code(run(&["pretrain", "--config", s(&f.config), "--data", s(&missing), "--run-dir", s(&f.root.join("r"))])),
        3
    );

    let garbled = f.root.join("garbled.csv");
    std::fs::write(&garbled, "a,b\n1,oops\n").unwrap();
    assert_eq!(code(run(&["mmd", s(&garbled), s(&garbled)])), 3);

    let diverge = f.root.join("diverge.toml");
    std::fs::write(&diverge, format!("{TINY}\n[transfer.sgd]\nlr = 1e200\n")).unwrap();
    let data = f.synth("data");
    let o = run(&["pretrain", "--config", s(&diverge), "--data", s(&data), "--run-dir", s(&f.root.join("d"))]);
    assert_eq!(code(o), 4);
}
