use std::collections::BTreeSet;
use std::path::Path;

use mvp::cli::teleop::{scripted_reach_take, TeleopClient, TeleopConfig, TeleopServer};
use mvp::mae::EncoderCheckpoint;
use mvp::policy::{action_mse, collect_demos, demo_dirs, replay, train_bc, BcPolicy, Demo, DemoSource, PolicyConfig, DEMO_FILE};
use mvp::simworld::TaskId;
use mvp::vit::EncoderConfig;
use serde_json::Value;

const TAKES: usize = 5;

/// Every key path in a JSON document, with arrays collapsed to their elements.
fn key_paths(v: &Value, prefix: &str, out: &mut BTreeSet<String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let p = format!("{prefix}.{k}");
                out.insert(p.clone());
                key_paths(x, &p, out);
            }
        }
        Value::Array(xs) => {
            for x in xs {
                key_paths(x, &format!("{prefix}[]"), out);
            }
        }
        _ => {}
    }
}

fn schema(dir: &Path) -> BTreeSet<String> {
    let v: Value = serde_json::from_slice(&std::fs::read(dir.join(DEMO_FILE)).unwrap()).unwrap();
    let mut out = BTreeSet::new();
    key_paths(&v, "", &mut out);
    out
}

fn frame_names(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn loopback_takes_match_scripted_demos_and_train() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TeleopConfig::new(TaskId::Reach, dir.path().join("teleop"), 0);
    cfg.max_demos = Some(TAKES);
    let mut server = TeleopServer::bind("127.0.0.1:0", cfg).unwrap();
    let addr = server.local_addr().unwrap();
    let handle = std::thread::spawn(move || server.serve());

    let mut client = TeleopClient::connect(addr).unwrap();
    for v in [0, 3, 6, 9, 12] {
        let f = scripted_reach_take(&mut client, v, 80).unwrap();
        assert!(f.state.success, "variation {v} not reached");
    }
    handle.join().unwrap().unwrap();

    let teleop_dirs = demo_dirs(&dir.path().join("teleop")).unwrap();
    assert_eq!(teleop_dirs.len(), TAKES);

    let scripted_root = dir.path().join("scripted");
    let scripted = collect_demos(TaskId::Reach, 1, 0, 0.01, false).unwrap();
    scripted[0].save(&scripted_root.join("demo_0000")).unwrap();
    let reference = schema(&scripted_root.join("demo_0000"));
    assert_eq!(frame_names(&scripted_root.join("demo_0000")), frame_names(&teleop_dirs[0]));

    let mut demos = Vec::new();
    for d in &teleop_dirs {
        assert_eq!(schema(d), reference, "{}", d.display());
        let demo = Demo::load(d).unwrap();
        assert_eq!(demo.record.source, DemoSource::Teleop);
        assert!(demo.record.success);
        let verdict = replay(&demo.record).unwrap();
        assert!(verdict.pass, "{}: {}", d.display(), verdict.reason);
        demos.push(demo);
    }

    let enc = EncoderCheckpoint::random(&EncoderConfig::micro(), 5).unwrap();
    let mut c = PolicyConfig::for_task(TaskId::Reach, enc.config.width);
    c.train.steps = 3000;
    c.train.batch_size = 32;
    c.train.weight_decay = 0.0;
    let ck = train_bc(&demos, &enc, &c, 1).unwrap();
    let policy = BcPolicy::new("teleop-bc", ck, &enc).unwrap();
    let mse = action_mse(&policy, &demos).unwrap() / (c.delta_max * c.delta_max);
    assert!(mse < 1e-3, "normalized per-step action mse {mse}");
}
