use fusemt::decode::BeamConfig;
use fusemt::experiment::{
    ablation_csv, ambiguous_accuracy, run_dropnet_sweep, run_train, ExperimentConfig, Stage, ABLATE_ROWS, SWEEP_P_NET,
};
use fusemt::data::{generate, RuleTable, SyntheticTaskSpec, TaskKind};

fn tiny() -> ExperimentConfig {
    let text = "\
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
";
    ExperimentConfig::from_kv(text).unwrap()
}

#[test]
fn config_snapshot_round_trips() {
    let mut cfg = tiny();
    cfg.set("decode.preset", "translation").unwrap();
    cfg.set("sweep.p_net", "0,0.5").unwrap();
    cfg.set("stage", "joint-random-init").unwrap();
    let back = ExperimentConfig::from_kv(&cfg.to_kv()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_kv(), cfg.to_kv());
    assert_eq!(back.stage, Stage::JointRandomInit);
}

#[test]
fn unknown_and_derived_keys_are_refused() {
    let mut cfg = ExperimentConfig::default();
    for key in ["nope", "model.nope", "data.seed", "stage1.seed", "model.src_vocab", "stage2.schedule_offset"] {
        assert!(cfg.set(key, "1").is_err(), "{key} accepted");
    }
    assert!(cfg.set("model.heads", "x").is_err());
    assert!(ExperimentConfig::from_kv("seed=1\nseed=2\n").is_err());
}

#[test]
fn contradictions_are_refused() {
    assert!(ExperimentConfig::from_kv("model.variant=stacked_decoder+drop_dec_attnB\n").is_err());
    assert!(ExperimentConfig::from_kv("provider.mode=document\n").is_err());
    assert!(ExperimentConfig::from_kv("provider.mode=document\ndata.task=context_disambiguation\n").is_ok());
    assert!(ExperimentConfig::from_kv("sweep.p_net=0,1.2\n").is_err());
    assert!(ExperimentConfig::from_kv("bench.reps=1\nbench.warmup=1\n").is_err());
}

#[test]
fn decode_presets_and_overrides() {
    let d = ExperimentConfig::default().decode.beam;
    assert_eq!((d.width, d.alpha), (5, 1.0));
    let t = BeamConfig::preset("translation").unwrap();
    assert_eq!((t.width, t.alpha), (4, 0.6));
    let cfg = ExperimentConfig::from_kv("decode.preset=translation\ndecode.width=7\n").unwrap();
    assert_eq!((cfg.decode.beam.width, cfg.decode.beam.alpha), (7, 0.6));
    assert!(BeamConfig::preset("bogus").is_err());
}

#[test]
fn default_matrix_and_sweep_are_complete() {
    let cfg = ExperimentConfig::default();
    assert_eq!(cfg.ablate_variants, ABLATE_ROWS.map(String::from).to_vec());
    assert_eq!(cfg.sweep_p_net, SWEEP_P_NET.to_vec());
    assert_eq!(cfg.model.p_net, 1.0);
}

#[test]
fn seeds_split_per_consumer() {
    let cfg = tiny();
    let seeds = [
        cfg.task_spec().seed,
        cfg.pretrain_config().seed,
        cfg.train_config(Stage::Stage1).seed,
        cfg.train_config(Stage::Stage2).seed,
        cfg.train_config(Stage::JointRandomInit).seed,
    ];
    for i in 0..seeds.len() {
        for j in 0..i {
            assert_ne!(seeds[i], seeds[j]);
        }
    }
    let mut other = cfg.clone();
    other.seed = 2;
    assert_ne!(other.task_spec().seed, cfg.task_spec().seed);
}

#[test]
fn persisted_config_reruns_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.stage = Stage::Stage2;
    let a = dir.path().join("a");
    let m1 = run_train(&cfg, &a).unwrap();
    let snapshot = ExperimentConfig::load(a.join("config.cfg")).unwrap();
    let b = dir.path().join("b");
    let m2 = run_train(&snapshot, &b).unwrap();
    assert_eq!(m1, m2);
    for f in ["log.csv", "metrics.txt", "model.ckpt", "stage1.ckpt", "provider.ckpt", "test.hyp"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn sweep_writes_one_run_per_rate_and_merged_curves() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.set("sweep.p_net", "0,1").unwrap();
    run_dropnet_sweep(&cfg, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("p_net,step,metric,value"));
    let mut families: Vec<(String, String)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[2].to_string())
        })
        .collect();
    families.sort();
    families.dedup();
    assert_eq!(families.len(), 6);
    for p in ["p_net_0", "p_net_1"] {
        assert!(dir.path().join(p).join("log.csv").is_file());
        assert!(dir.path().join(p).join("model.ckpt").is_file());
    }
}

#[test]
fn ambiguous_accuracy_scores_only_ambiguous_positions() {
    let spec = SyntheticTaskSpec {
        task: TaskKind::ContextDisambiguation,
        train_size: 30,
        valid_size: 5,
        test_size: 5,
        ..SyntheticTaskSpec::default()
    };
    let data = generate(&spec).unwrap();
    let rules = RuleTable::standard();
    let refs = data.test.target.clone();
    assert_eq!(ambiguous_accuracy(&refs, &data.test, &rules).unwrap(), 1.0);
    let blank = vec![String::new(); refs.len()];
    assert_eq!(ambiguous_accuracy(&blank, &data.test, &rules).unwrap(), 0.0);
    assert!(ambiguous_accuracy(&refs[1..], &data.test, &rules).is_err());
}

#[test]
fn empty_ablation_table_is_just_the_header() {
    let csv = ablation_csv(&[]);
    assert_eq!(csv, "variant,valid_loss,test_bleu,test_seq_acc,test_ambiguous_acc\n");
}
