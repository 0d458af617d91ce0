use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
data.train_size=30
data.valid_size=6
data.test_size=6
data.vocab_size=12
data.max_len=5
pretrain.steps=3
provider.layers=1
provider.dim=8
provider.ff_dim=16
model.d_model=8
model.d_ff=16
model.layers=1
stage1.max_steps=4
stage2.max_steps=4
stage1.eval_every=2
stage2.eval_every=2
stage1.eval_decode=3
stage2.eval_decode=3
bench.reps=3
bench.sentences=3
";

fn fusemt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusemt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("o").display().to_string();
    assert_eq!(code(&fusemt(&["no-such-command"])), 1);
    assert_eq!(code(&fusemt(&["gen-data", "--config", "/no/such/file.cfg"])), 1);
    assert_eq!(code(&fusemt(&["--config", &cfg, "--out", &out, "--set", "bogus.key=3", "gen-data"])), 1);
    assert_eq!(code(&fusemt(&["--config", &cfg, "--out", &out, "--set", "novalue", "gen-data"])), 1);
    assert_eq!(code(&fusemt(&["--config", &cfg, "--out", &out, "train", "--stage", "stage3"])), 1);
    let o = fusemt(&["--config", &cfg, "--set", "model.variant=stacked_decoder+drop_dec_attnB", "train"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
    assert_eq!(code(&fusemt(&["score", "--hyp", "/no/hyp", "--ref", "/no/ref"])), 1);
    assert_eq!(code(&fusemt(&["--help"])), 0);
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let input = dir.path().join("in.txt");
    std::fs::write(&input, "a b\n").unwrap();
    let out = dir.path().join("o").display().to_string();
    let o = fusemt(&["--out", &out, "decode", "--model", &bad.display().to_string(), "--input", &input.display().to_string()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unwritable_output_directory_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let out = blocker.join("sub").display().to_string();
    let o = fusemt(&["--config", &cfg, "--out", &out, "gen-data"]);
    assert_ne!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("output directory"));
}

#[test]
fn train_decode_score_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.display().to_string();
    let o = fusemt(&["--config", &cfg, "--out", &run_s, "--seed", "4", "train", "--stage", "stage2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.cfg", "log.csv", "metrics.txt", "model.ckpt", "stage1.ckpt", "provider.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(std::fs::read_to_string(run.join("config.cfg")).unwrap().contains("seed=4\n"));

    let again = dir.path().join("again").display().to_string();
    let snapshot = run.join("config.cfg").display().to_string();
    assert_eq!(code(&fusemt(&["--config", &snapshot, "--out", &again, "train"])), 0);
    assert_eq!(
        std::fs::read(run.join("metrics.txt")).unwrap(),
        std::fs::read(Path::new(&again).join("metrics.txt")).unwrap()
    );

    let input = dir.path().join("in.txt");
    std::fs::write(&input, "a b c\nb\n").unwrap();
    let dec = dir.path().join("dec").display().to_string();
    let model = run.join("model.ckpt").display().to_string();
    let o = fusemt(&["--out", &dec, "decode", "--model", &model, "--input", &input.display().to_string()]);
    assert_eq!(code(&o), 1, "fused model without a provider");
    let provider = run.join("provider.ckpt").display().to_string();
    let o = fusemt(&[
        "--out", &dec, "decode", "--model", &model, "--provider", &provider, "--input", &input.display().to_string(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let hyp = Path::new(&dec).join("decode.hyp");
    assert_eq!(std::fs::read_to_string(&hyp).unwrap().lines().count(), 2);

    let o = fusemt(&["score", "--hyp", &hyp.display().to_string(), "--ref", &hyp.display().to_string()]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("seq_acc=1\n"), "{text}");
    let o = fusemt(&["score", "--hyp", &hyp.display().to_string(), "--ref", &input.display().to_string()]);
    assert_eq!(code(&o), 0);
}

#[test]
fn ablate_emits_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("ab");
    let o = fusemt(&["--config", &cfg, "--out", &out.display().to_string(), "ablate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        [
            "full",
            "random_init",
            "linear_feed",
            "drop_enc_attnB",
            "drop_dec_attnB",
            "embedding_feed",
            "stacked_decoder",
            "no_provider_baseline"
        ]
    );
    for n in names {
        assert!(out.join(n).join("metrics.txt").is_file());
    }
}

#[test]
fn bench_and_sweep_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let b = dir.path().join("bench");
    assert_eq!(code(&fusemt(&["--config", &cfg, "--out", &b.display().to_string(), "bench-inference"])), 0);
    let timing = std::fs::read_to_string(b.join("timing.csv")).unwrap();
    assert!(timing.starts_with("baseline_seconds,fused_seconds,increase_ratio\n"));
    let s = dir.path().join("sweep");
    assert_eq!(code(&fusemt(&["--config", &cfg, "--out", &s.display().to_string(), "dropnet-sweep"])), 0);
    let dirs = std::fs::read_dir(&s).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 6);
    assert!(s.join("sweep.csv").is_file());
}
