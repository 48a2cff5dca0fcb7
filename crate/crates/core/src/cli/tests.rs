use super::*;
use crate::policy::Demo;

fn run_args(args: &[&str]) -> i32 {
    run(std::iter::once("mvp").chain(args.iter().copied()))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run_args(&["--bogus"]), 1);
    assert_eq!(run_args(&["count", "--tier"]), 1);
    assert_eq!(run_args(&["count", "--tier", "vit-q"]), 1);
    assert_eq!(run_args(&["nonsense"]), 1);
    assert_eq!(run_args(&["--help"]), 0);
    assert_eq!(run_args(&["count", "--tier", "vit-l", "--image", "224"]), 0);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert_eq!(run_args(&["replay", path(&missing)]), 2);
    assert_eq!(run_args(&["--config", path(&missing), "count"]), 2);
}

#[test]
fn run_config_round_trips_through_toml() {
    let mut c = RunConfig::default();
    c.seed = 9;
    c.policy.hidden_sizes = Some(vec![8, 8, 8]);
    c.task.task = TaskId::HandReach;
    let text = c.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    let partial = RunConfig::from_toml("seed = 4\n[task]\ntask = \"push\"\n").unwrap();
    assert_eq!(partial.seed, 4);
    assert_eq!(partial.task.task, TaskId::Push);
    assert_eq!(partial.task.demos, 80);
    assert!(RunConfig::from_toml("seed = \"x\"").is_err());
}

#[test]
fn seed_environment_override() {
    std::env::set_var(SEED_ENV, "17");
    let mut c = RunConfig::default();
    c.apply_env().unwrap();
    assert_eq!((c.seed, c.pretrain.seed), (17, 17));
    std::env::set_var(SEED_ENV, "x");
    assert!(c.apply_env().is_err());
    std::env::remove_var(SEED_ENV);
}

#[test]
fn zero_epoch_pretraining_returns_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let enc = dir.path().join("enc");
    assert_eq!(run_args(&["--seed", "5", "build-corpus", "--total", "6", "--out", path(&corpus)]), 0);
    assert!(corpus.join(MANIFEST_FILE).is_file());
    assert_eq!(
        run_args(&["--seed", "5", "pretrain", "--manifest", path(&corpus), "--tier", "micro", "--epochs", "0", "--out", path(&enc)]),
        0
    );
    let ck = load_encoder(&enc).unwrap();
    assert_eq!(ck.params, vit::init::<f32>(&EncoderConfig::micro(), 5).unwrap());
    let saved = RunConfig::load(&enc.join(RUN_CONFIG_FILE)).unwrap();
    assert_eq!(saved.pretrain.epochs, 0);
    assert_eq!(saved.encoder, EncoderConfig::micro());
    assert_eq!(saved.seed, 5);
}

#[test]
fn collect_replay_and_prune() {
    let dir = tempfile::tempdir().unwrap();
    let demos = dir.path().join("demos");
    assert_eq!(run_args(&["collect", "--task", "reach", "--n", "3", "--out", path(&demos)]), 0);
    let dirs = policy::demo_dirs(&demos).unwrap();
    assert_eq!(dirs.len(), 3);
    assert!(demos.join(RUN_CONFIG_FILE).is_file());
    assert_eq!(run_args(&["replay", path(&demos)]), 0);

    let victim = &dirs[1];
    let mut rec = Demo::load_record(victim).unwrap();
    rec.steps[2].action[0] += 0.01;
    std::fs::write(victim.join(policy::DEMO_FILE), serde_json::to_string(&rec).unwrap()).unwrap();
    assert_eq!(run_args(&["replay", path(&demos)]), 2);
    assert_eq!(run_args(&["replay", "--prune", path(&demos)]), 0);
    assert_eq!(policy::demo_dirs(&demos).unwrap().len(), 2);
    assert!(demos.join(PRUNED_DIR).join(victim.file_name().unwrap()).join(policy::DEMO_FILE).is_file());

    std::fs::write(dirs[0].join(policy::DEMO_FILE), "{ not json").unwrap();
    assert_eq!(run_args(&["replay", path(&dirs[0])]), 2);
}

#[test]
fn train_evaluate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "seed = 2\n[encoder]\nimage_size = 64\npatch_size = 8\nwidth = 48\ndepth = 2\nheads = 2\ntier_name = \"ViT-Micro\"\n\
         [policy]\nhidden_sizes = [16, 16, 8]\nembed_dim = 8\n[policy.train]\nsteps = 5\nbatch_size = 8\n",
    )
    .unwrap();
    let c = path(&cfg);
    let (demos, enc, pol, ev, rep) = (
        dir.path().join("demos"),
        dir.path().join("enc"),
        dir.path().join("pol"),
        dir.path().join("eval"),
        dir.path().join("rep"),
    );
    assert_eq!(run_args(&["--config", c, "collect", "--n", "2", "--out", path(&demos)]), 0);
    assert_eq!(run_args(&["--config", c, "build-corpus", "--total", "4", "--out", path(&enc)]), 0);
    assert_eq!(run_args(&["--config", c, "pretrain", "--manifest", path(&enc), "--epochs", "1", "--out", path(&enc)]), 0);
    assert_eq!(
        run_args(&["--config", c, "train-policy", "--demos", path(&demos), "--encoder", path(&enc), "--out", path(&pol)]),
        0
    );
    let ck = load_policy(&pol).unwrap();
    assert_eq!(ck.loss_curve.len(), 5);
    assert_eq!(
        run_args(&["--config", c, "evaluate", "--policy", path(&pol), "--encoder", path(&enc), "--expert", "--k", "2", "--out", path(&ev)]),
        0
    );
    let records = Report::read_records(&ev.join("records.jsonl")).unwrap();
    assert_eq!(records.len(), 4);
    assert_eq!(records[1].model, "scripted-expert");
    assert!(records[1].success);
    assert_eq!(run_args(&["report", "--records", path(&ev), "--out", path(&rep)]), 0);
    assert_eq!(Report::load(&rep).unwrap().summary.len(), 2);
    assert_eq!(run_args(&["evaluate", "--out", path(&ev)]), 1);
}
