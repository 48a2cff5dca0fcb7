//! Command-line entry points. Exit codes: 0 on success, 1 on usage errors,
//! 2 on runtime failures.

mod config;
pub mod teleop;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::{build_corpus, synth_corpus, CorpusManifest, Generator, SHAPE_CLASSES};
use crate::error::{Error, Result};
use crate::harness::{self, AblationBase, Report, StudyKind};
use crate::mae::{self, EncoderCheckpoint};
use crate::policy::{self, load_demos, BcPolicy, Controller, ExpertController, Modality, PolicyCheckpoint};
use crate::simworld::{Camera, TaskId};
use crate::vit::{self, EncoderConfig};

pub use config::{CorpusConfig, PolicyOverrides, RunConfig, TaskConfig, DEFAULT_DEMO_SIGMA, RUN_CONFIG_FILE, SEED_ENV};

pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const POLICY_FILE: &str = "policy.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PRUNED_DIR: &str = "pruned";

#[derive(Debug, Parser)]
#[command(name = "mvp", version, about = "Masked visual pre-training for motor control")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed; overrides the config file and MVP_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Render a synthetic image set to PNG files.
    SynthCorpus {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "shapes")]
        generator: Generator,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mix sources into a pre-training corpus manifest.
    BuildCorpus {
        #[arg(long)]
        total: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// MAE pre-training of an encoder.
    Pretrain {
        /// Corpus manifest; the configured mixture when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        opts: PretrainOpts,
    },
    /// Supervised shape-classification pre-training baseline.
    PretrainSupervised {
        /// Number of labeled synthetic images.
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[command(flatten)]
        opts: PretrainOpts,
    },
    /// Record scripted expert demonstrations.
    Collect {
        #[arg(long)]
        task: Option<TaskId>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        /// Also record the third-person camera.
        #[arg(long)]
        third: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the teleoperation websocket and record demos.
    Teleop {
        #[arg(long)]
        task: Option<TaskId>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long)]
        max_demos: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-simulate demos and report PASS/FAIL per demo.
    Replay {
        /// A demo directory or a directory of demos.
        demos: PathBuf,
        /// Move failing demos into `pruned/`.
        #[arg(long)]
        prune: bool,
    },
    /// Behavior cloning on top of an encoder.
    TrainPolicy {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        modality: Option<Modality>,
        #[arg(long)]
        camera: Option<Camera>,
        /// Random crop and color jitter.
        #[arg(long)]
        augment: bool,
        /// Train the encoder end to end.
        #[arg(long)]
        finetune: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate policies on the variation grid.
    Evaluate {
        #[arg(long)]
        task: Option<TaskId>,
        /// Policy checkpoint (repeatable).
        #[arg(long = "policy")]
        policies: Vec<PathBuf>,
        /// Encoder checkpoint: one shared, or one per policy.
        #[arg(long = "encoder")]
        encoders: Vec<PathBuf>,
        /// Include the scripted expert.
        #[arg(long)]
        expert: bool,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a comparison, demo sweep, scaling study or ablation suite.
    Study(StudyArgs),
    /// Summarize evaluation records into report files.
    Report {
        /// `records.jsonl` files or directories holding one.
        #[arg(long = "records", required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter and multiply-add counts of an encoder tier.
    Count {
        #[arg(long, default_value = "vit-b")]
        tier: String,
        #[arg(long, default_value_t = 224)]
        image: usize,
    },
}

#[derive(Debug, Args)]
pub struct PretrainOpts {
    #[arg(long)]
    pub tier: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long)]
    pub kind: Option<StudyKind>,
    #[arg(long)]
    pub task: Option<TaskId>,
    /// Demo directory; scripted demos are collected when absent.
    #[arg(long)]
    pub demos: Option<PathBuf>,
    /// `name=path` encoder checkpoint (repeatable).
    #[arg(long = "encoder")]
    pub encoders: Vec<String>,
    /// Add a randomly initialized encoder of the configured tier as `scratch`.
    #[arg(long)]
    pub scratch: bool,
    #[arg(long, value_delimiter = ',')]
    pub counts: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Encoder tiers for scaling studies, smallest first.
    #[arg(long, value_delimiter = ',')]
    pub tiers: Vec<String>,
    /// Corpus sizes for scaling studies, smallest first.
    #[arg(long, value_delimiter = ',')]
    pub corpus_sizes: Vec<usize>,
    /// Optimizer steps of end-to-end ablation arms.
    #[arg(long)]
    pub end_to_end_steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e @ Error::Usage(_)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn main() -> ! {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    std::process::exit(run(std::env::args_os()))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `path`, or `path/name` when `path` is a directory.
fn resolve(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

pub fn load_encoder(path: &Path) -> Result<EncoderCheckpoint> {
    EncoderCheckpoint::load(&resolve(path, ENCODER_FILE))
}

pub fn load_policy(path: &Path) -> Result<PolicyCheckpoint> {
    PolicyCheckpoint::load(&resolve(path, POLICY_FILE))
}

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<RunConfig> {
    let mut c = cfg.clone();
    c.out_dir = out.to_path_buf();
    c.save_into(out)?;
    Ok(c)
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Cmd::SynthCorpus { n, generator, out } => {
            prepare_out(&cfg, &out)?;
            let set = synth_corpus(n, cfg.seed, generator)?;
            set.save(&out)?;
            println!("wrote {} images to {}", set.images.len(), out.display());
        }
        Cmd::BuildCorpus { total, out } => {
            let mut c = cfg.clone();
            if let Some(t) = total {
                c.corpus.total = t;
            }
            let c = prepare_out(&c, &out)?;
            let m = build_corpus(&c.corpus_sources(), &c.corpus.proportions, c.corpus.total)?;
            m.save(&out.join(MANIFEST_FILE))?;
            for (name, n) in &m.counts {
                println!("{name}: {n}");
            }
            println!("fingerprint {}", m.fingerprint);
        }
        Cmd::Pretrain { manifest, opts } => {
            let c = prepare_out(&pretrain_config(&cfg, &opts)?, &opts.out)?;
            let m = match manifest {
                Some(p) => CorpusManifest::load(&resolve(&p, MANIFEST_FILE))?,
                None => build_corpus(&c.corpus_sources(), &c.corpus.proportions, c.corpus.total)?,
            };
            let images = m.load_images(c.encoder.image_size)?;
            let out = mae::pretrain(&c.mae(), &images, &m.fingerprint, &c.pretrain)?;
            out.checkpoint.save(&opts.out.join(ENCODER_FILE))?;
            mae::write_loss_csv(&opts.out.join("loss.csv"), &out.checkpoint.loss_curve)?;
            let epochs = out.epoch_losses();
            if let (Some(first), Some(last)) = (epochs.first(), epochs.last()) {
                println!("masked loss: epoch 1 {first:.4}, final {last:.4}");
            }
            println!("encoder {}", out.checkpoint.fingerprint());
        }
        Cmd::PretrainSupervised { n, opts } => {
            let c = prepare_out(&pretrain_config(&cfg, &opts)?, &opts.out)?;
            let set = synth_corpus(n, c.seed, Generator::Shapes)?;
            let labels = set.labels.clone().ok_or_else(|| Error::InvalidArgument("shape corpus has no labels".into()))?;
            let images: Vec<_> = set.images.iter().map(|i| i.center_crop_resize(c.encoder.image_size).to_tensor()).collect();
            let fp = format!("synthetic-shapes:{n}:{}", c.seed);
            let out = mae::pretrain_supervised(&c.encoder, &images, &labels, SHAPE_CLASSES, &fp, &c.pretrain)?;
            out.checkpoint.save(&opts.out.join(ENCODER_FILE))?;
            mae::write_loss_csv(&opts.out.join("loss.csv"), &out.checkpoint.loss_curve)?;
            println!("final training accuracy {:.3}", out.final_accuracy);
        }
        Cmd::Collect { task, n, sigma, third, out } => {
            let mut c = cfg.clone();
            c.task.task = task.unwrap_or(c.task.task);
            c.task.demos = n.unwrap_or(c.task.demos);
            c.task.sigma = sigma.unwrap_or(c.task.sigma);
            c.task.record_third |= third;
            let c = prepare_out(&c, &out)?;
            let t = &c.task;
            let demos = policy::collect_demos(t.task, t.demos, c.seed, t.sigma, t.record_third)?;
            for (i, d) in demos.iter().enumerate() {
                d.save(&out.join(format!("demo_{i:04}")))?;
            }
            let steps: usize = demos.iter().map(|d| d.len()).sum();
            println!("collected {} {} demos ({steps} steps) in {}", demos.len(), t.task, out.display());
        }
        Cmd::Teleop {
            task,
            host,
            port,
            max_demos,
            out,
        } => {
            let mut c = cfg.clone();
            c.task.task = task.unwrap_or(c.task.task);
            let c = prepare_out(&c, &out)?;
            let mut tc = teleop::TeleopConfig::new(c.task.task, out.clone(), c.seed);
            tc.max_demos = max_demos;
            let mut server = teleop::TeleopServer::bind(&format!("{host}:{port}"), tc)?;
            println!("teleop on ws://{} for {}", server.local_addr()?, c.task.task);
            server.serve()?;
            println!("{} demos in {}", server.demos_saved(), out.display());
        }
        Cmd::Replay { demos, prune } => replay_cmd(&demos, prune)?,
        Cmd::TrainPolicy {
            demos,
            encoder,
            steps,
            modality,
            camera,
            augment,
            finetune,
            out,
        } => {
            let mut c = cfg.clone();
            if let Some(s) = steps {
                c.policy.train.steps = s;
            }
            c.policy.modality = modality.unwrap_or(c.policy.modality);
            c.policy.camera = camera.unwrap_or(c.policy.camera);
            if augment {
                c.policy.augmentations = policy::Augmentations::ALL;
            }
            c.policy.finetune_encoder |= finetune;
            let c = prepare_out(&c, &out)?;
            let enc = load_encoder(&encoder)?;
            let demos = load_demos(&demos)?;
            let task = demos.first().ok_or_else(|| Error::InvalidArgument("no demos found".into()))?.task();
            let pc = c.policy_config(task, enc.config.width);
            let ck = policy::train_bc(&demos, &enc, &pc, c.seed)?;
            ck.save(&out.join(POLICY_FILE))?;
            mae::write_loss_csv(&out.join("loss.csv"), &ck.loss_curve)?;
            let policy = BcPolicy::new("policy", ck, &enc)?;
            println!("train action mse {:.3e} rad^2", policy::action_mse(&policy, &demos)?);
        }
        Cmd::Evaluate {
            task,
            policies,
            encoders,
            expert,
            k,
            out,
        } => {
            let mut c = cfg.clone();
            c.task.task = task.unwrap_or(c.task.task);
            c.study.k = k.unwrap_or(c.study.k);
            let c = prepare_out(&c, &out)?;
            let mut models = load_models(&policies, &encoders)?;
            if expert {
                models.push(Box::new(ExpertController::new(0.0)));
            }
            if models.is_empty() {
                return Err(Error::Usage("evaluate needs --policy or --expert".into()));
            }
            let ev = harness::evaluate(&mut models, c.task.task, c.study.k, c.seed)?;
            let report = Report::from_records(ev.records, Vec::new())?;
            report.save(&out)?;
            for (name, rate) in &ev.rates {
                println!("{name}: {:.0}/{}", rate * c.study.k as f64, c.study.k);
            }
        }
        Cmd::Study(args) => study_cmd(&cfg, args)?,
        Cmd::Report { records, out } => {
            let mut all = Vec::new();
            for p in &records {
                all.extend(Report::read_records(&resolve(p, "records.jsonl"))?);
            }
            let report = Report::from_records(all, Vec::new())?;
            report.save(&out)?;
            print!("{}", report.summary_csv());
        }
        Cmd::Count { tier, image } => {
            let c = EncoderConfig::from_tier(&tier).map_err(|e| Error::Usage(e.to_string()))?;
            let params = vit::count_params(&c);
            let flops = vit::count_flops(&c, image)?;
            println!("{} @ {image}px", c.tier_name);
            println!("params {params} ({:.1}M)", params as f64 / 1e6);
            println!("flops {flops} ({:.1}e9 multiply-adds)", flops as f64 / 1e9);
        }
    }
    Ok(())
}

fn pretrain_config(cfg: &RunConfig, o: &PretrainOpts) -> Result<RunConfig> {
    let mut c = cfg.clone();
    if let Some(t) = &o.tier {
        c.encoder = EncoderConfig::from_tier(t)?;
        c.decoder = None;
    }
    if let Some(e) = o.epochs {
        c.pretrain.epochs = e;
    }
    if let Some(b) = o.batch_size {
        c.pretrain.batch_size = b;
    }
    if let Some(lr) = o.lr {
        c.pretrain.lr = lr;
    }
    c.validate()?;
    Ok(c)
}

fn model_name(path: &Path) -> String {
    let p = if path.is_dir() { path } else { path.parent().unwrap_or(path) };
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "policy".into())
}

fn load_models(policies: &[PathBuf], encoders: &[PathBuf]) -> Result<Vec<Box<dyn Controller>>> {
    if !policies.is_empty() && encoders.len() != 1 && encoders.len() != policies.len() {
        return Err(Error::Usage(format!(
            "{} policies need one shared encoder or one encoder each, got {}",
            policies.len(),
            encoders.len()
        )));
    }
    let mut out: Vec<Box<dyn Controller>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (i, p) in policies.iter().enumerate() {
        let enc = load_encoder(&encoders[i.min(encoders.len() - 1)])?;
        let mut name = model_name(p);
        if names.contains(&name) {
            name = format!("{name}-{i}");
        }
        names.push(name.clone());
        out.push(Box::new(BcPolicy::new(&name, load_policy(p)?, &enc)?));
    }
    Ok(out)
}

fn replay_cmd(path: &Path, prune: bool) -> Result<()> {
    let dirs = if path.join(policy::DEMO_FILE).is_file() {
        vec![path.to_path_buf()]
    } else {
        policy::demo_dirs(path)?
    };
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!("no demos under {}", path.display())));
    }
    let mut failed = 0;
    for d in &dirs {
        let record = policy::Demo::load_record(d)?;
        let v = policy::replay(&record)?;
        println!("{} {} ({} steps): {}", if v.pass { "PASS" } else { "FAIL" }, d.display(), v.steps, v.reason);
        if !v.pass {
            failed += 1;
            if prune {
                let root = d.parent().unwrap_or(Path::new(".")).join(PRUNED_DIR);
                std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
                let dest = root.join(d.file_name().unwrap_or_default());
                std::fs::rename(d, &dest).map_err(|e| Error::io(d, e))?;
                println!("moved to {}", dest.display());
            }
        }
    }
    println!("{} of {} demos pass", dirs.len() - failed, dirs.len());
    if failed > 0 && !prune {
        return Err(Error::InvalidArgument(format!("{failed} demos fail replay")));
    }
    Ok(())
}

fn parse_named(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => Err(Error::Usage(format!("expected name=path, got `{spec}`"))),
    }
}

fn study_cmd(cfg: &RunConfig, a: StudyArgs) -> Result<()> {
    let mut c = cfg.clone();
    let s = &mut c.study;
    s.kind = a.kind.unwrap_or(s.kind);
    if let Some(t) = a.task {
        s.tasks = vec![t];
    }
    if !a.counts.is_empty() {
        s.demo_counts = a.counts.clone();
    }
    if !a.seeds.is_empty() {
        s.seeds = a.seeds.clone();
    }
    s.k = a.k.unwrap_or(s.k);
    if !a.encoders.is_empty() {
        s.models = a.encoders.clone();
    }
    if !a.tiers.is_empty() && s.kind == StudyKind::Scaling {
        s.models = a.tiers.clone();
    }
    s.validate()?;
    let c = prepare_out(&c, &a.out)?;
    let s = &c.study;
    let task = s.tasks[0];
    let n_demos = match s.kind {
        StudyKind::DemosSweep => *s.demo_counts.last().unwrap_or(&c.task.demos),
        _ => c.task.demos,
    };
    let demos = match &a.demos {
        Some(d) => load_demos(d)?,
        None => policy::collect_demos(task, n_demos, c.seed, c.task.sigma, s.kind == StudyKind::Ablation || c.policy.camera == Camera::Third)?,
    };
    let mut encoders = Vec::new();
    if s.kind != StudyKind::Scaling {
        for spec in &s.models {
            let (name, path) = parse_named(spec)?;
            encoders.push((name, load_encoder(&path)?));
        }
        if a.scratch {
            encoders.push(("scratch".to_string(), EncoderCheckpoint::random(&c.encoder, c.seed)?));
        }
        if encoders.is_empty() {
            return Err(Error::Usage("study needs at least one --encoder name=path (or --scratch)".into()));
        }
    }
    let width = encoders.first().map_or(c.encoder.width, |(_, e)| e.config.width);
    let base = c.policy_config(task, width);
    let result = match s.kind {
        StudyKind::Compare => harness::compare(&encoders, &demos, task, &base, &s.seeds, s.k)?,
        StudyKind::DemosSweep => {
            if encoders.len() != 1 {
                return Err(Error::Usage("a demo sweep takes exactly one encoder".into()));
            }
            harness::demos_sweep(&encoders[0].1, &demos, task, &s.demo_counts, &base, &s.seeds, s.k)?
        }
        StudyKind::Ablation => {
            let ab = AblationBase {
                pretrained: encoders[0].1.clone(),
                config: base,
                scratch_seed: c.seed,
                end_to_end_steps: a.end_to_end_steps,
            };
            harness::ablation_suite(task, &ab, &demos, &s.seeds, s.k)?
        }
        StudyKind::Scaling => {
            let tiers = if s.models.is_empty() { vec!["micro".to_string(), "tiny".to_string()] } else { s.models.clone() };
            let tiers = tiers.iter().map(|t| EncoderConfig::from_tier(t)).collect::<Result<Vec<_>>>()?;
            let sizes = if a.corpus_sizes.is_empty() { vec![c.corpus.total / 4, c.corpus.total] } else { a.corpus_sizes.clone() };
            let corpora = sizes
                .iter()
                .map(|&n| build_corpus(&c.corpus_sources(), &c.corpus.proportions, n))
                .collect::<Result<Vec<_>>>()?;
            let r = harness::scaling_study(&tiers, &corpora, &c.pretrain, &demos, task, &base, &s.seeds, s.k)?;
            let p = a.out.join("scaling.json");
            std::fs::write(&p, serde_json::to_string_pretty(&r)?).map_err(|e| Error::io(&p, e))?;
            println!(
                "bigger model, same data: {}; bigger model, bigger data: {}",
                r.bigger_model_same_data, r.bigger_model_bigger_data
            );
            r.study
        }
    };
    let p = a.out.join("study.json");
    std::fs::write(&p, serde_json::to_string_pretty(&result)?).map_err(|e| Error::io(&p, e))?;
    result.report().save(&a.out)?;
    for r in &result.summary {
        println!("{}: {:.3} ± {:.3}", r.model, r.mean, r.stderr);
    }
    Ok(())
}

#[cfg(test)]
mod tests;
