//! Command-line entry points: `synth`, `train`, `eval`, `finetune`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::actor::ActorHead;
use crate::autodiff::TensorError;
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::RunConfig;
use crate::dbpo::{critic_init, finetune, Collector, DbpoLearner, FINETUNE_HEADER};
use crate::env::{mode_coverage, synth_multimodal, ImitationDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Policy, EPISODES_HEADER};
use crate::policy::{draw_latents, Generator, GeneratorParams};
use crate::trainer::{train_with_dump, METRICS_HEADER};

#[derive(Debug, Parser)]
#[command(
    name = "driftkit",
    version,
    about = "Drift-field policies: synthesize, train, evaluate, fine-tune"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Flat JSON config with dotted keys.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a multimodal demonstration dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Stage-1 drift-field training.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Deployment-mode evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
        /// Overrides `checkpoint` from the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Stage-2 fine-tuning from a Stage-1 checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => 3,
        Error::Tensor(TensorError::NonFinite { .. } | TensorError::Domain { .. }) => 3,
        Error::Io { .. } => 4,
        Error::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => 4,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => cmd_synth(&common),
        Command::Train { common } => cmd_train(&common),
        Command::Eval {
            common,
            episodes,
            checkpoint,
        } => cmd_eval(&common, episodes, checkpoint),
        Command::Finetune { common, checkpoint } => cmd_finetune(&common, checkpoint),
    }
}

fn prepare(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    let snap = common.out.join("config.json");
    fs::write(&snap, cfg.to_flat_json()?).map_err(|e| Error::io(&snap, e))?;
    Ok(cfg)
}

struct CsvOut {
    path: PathBuf,
    w: BufWriter<File>,
}

impl CsvOut {
    fn create(path: PathBuf, header: &str) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Self {
            path,
            w: BufWriter::new(f),
        };
        out.line(header)?;
        Ok(out)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.w, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn cmd_synth(common: &Common) -> Result<()> {
    let cfg = prepare(common)?;
    let ds = synth_multimodal(&cfg.synth, &cfg.env, &cfg.chunk)?;
    let path = common.out.join("dataset.csv");
    ds.save(&path)?;
    println!(
        "modes={} conditions={} records={} seed={} -> {}",
        cfg.synth.modes,
        ds.meta.conditions.len(),
        ds.len(),
        cfg.seed,
        path.display()
    );
    Ok(())
}

pub fn cmd_train(common: &Common) -> Result<()> {
    let cfg = prepare(common)?;
    let data = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| Error::config("data.path is required for train"))?;
    let ds = ImitationDataset::load(data)?;
    if *ds.spec() != cfg.chunk {
        return Err(Error::config(format!(
            "dataset chunk spec {:?} does not match chunk.* {:?}",
            ds.spec(),
            cfg.chunk
        )));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = GeneratorParams::init(&cfg.chunk, &cfg.model, &mut init_rng);
    let generator = Generator::new(params, cfg.chunk)?;
    let ck_dir = common.out.join("checkpoints");
    if cfg.train.checkpoint_every.is_some() {
        fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    }
    let mut metrics = CsvOut::create(common.out.join("metrics.csv"), METRICS_HEADER)?;
    let started = Instant::now();
    let snapshot = |t: &crate::trainer::Trainer| {
        let mut ck = Checkpoint::new(
            cfg.chunk,
            cfg.model,
            cfg.drift.clone(),
            t.generator.params.clone(),
            t.ema.clone(),
        );
        ck.step = t.steps_done();
        ck.optimizer = Some(t.optimizer.clone());
        ck.rng = Some(RngState::capture(&t.rng));
        ck
    };
    let (trainer, log) = train_with_dump(
        &ds,
        generator,
        &cfg.drift,
        &cfg.train,
        Some(common.out.clone()),
        |t, m| {
            metrics.line(&m.csv_row())?;
            if let Some(every) = cfg.train.checkpoint_every {
                if every > 0 && m.step % every == 0 {
                    snapshot(t).save(&ck_dir.join(format!("step_{:06}.json", m.step)))?;
                }
            }
            Ok(())
        },
    )?;
    metrics.finish()?;
    snapshot(&trainer).save(&common.out.join("checkpoint.json"))?;
    let last = log.last().map(|m| m.loss).unwrap_or(f64::NAN);
    println!(
        "steps={} final_loss={last} wall_clock_s={:.3}",
        trainer.steps_done(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<Checkpoint> {
    let path = flag
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| Error::config("no checkpoint given (--checkpoint or checkpoint key)"))?;
    let ck = Checkpoint::load(&path)?;
    if ck.spec != cfg.chunk {
        return Err(Error::Checkpoint(format!(
            "checkpoint chunk spec {:?} does not match chunk.* {:?}",
            ck.spec, cfg.chunk
        )));
    }
    Ok(ck)
}

fn write_report(
    dir: &Path,
    prefix: &str,
    report: &EvalReport,
    coverage: Option<f64>,
) -> Result<()> {
    let mut eps = CsvOut::create(dir.join(format!("{prefix}_episodes.csv")), EPISODES_HEADER)?;
    for row in report.episode_rows() {
        eps.line(&row)?;
    }
    eps.finish()?;
    let mut sum = CsvOut::create(dir.join(format!("{prefix}_summary.csv")), "metric,value")?;
    sum.line(&format!("episodes,{}", report.episodes.len()))?;
    sum.line(&format!("success_rate,{}", report.success_rate()))?;
    sum.line(&format!("mean_return,{}", report.mean_return()))?;
    sum.line(&format!("decisions,{}", report.decisions))?;
    sum.line(&format!("nfe_violations,{}", report.nfe_violations))?;
    if let Some(c) = coverage {
        sum.line(&format!("mode_coverage,{c}"))?;
    }
    sum.finish()?;
    let mut timing = CsvOut::create(dir.join(format!("{prefix}_timing.csv")), "metric,value")?;
    timing.line(&format!("wall_clock_s,{}", report.wall_clock.as_secs_f64()))?;
    timing.line(&format!(
        "per_decision_s,{}",
        report.per_decision().as_secs_f64()
    ))?;
    timing.finish()
}

pub fn cmd_eval(
    common: &Common,
    episodes: Option<usize>,
    checkpoint: Option<PathBuf>,
) -> Result<()> {
    let cfg = prepare(common)?;
    let episodes = episodes.unwrap_or(cfg.eval.episodes);
    let (report, coverage) = if cfg.eval.scripted {
        (
            evaluate(Policy::Scripted, &cfg.env, &cfg.chunk, episodes, cfg.seed)?,
            None,
        )
    } else {
        let ck = load_checkpoint(&cfg, checkpoint)?;
        let g = ck.eval_generator()?;
        let report = evaluate(
            Policy::Generator(&g),
            &cfg.env,
            &cfg.chunk,
            episodes,
            cfg.seed,
        )?;
        let coverage = match &cfg.eval.dataset {
            Some(p) => {
                let ds = ImitationDataset::load(p)?;
                Some(generator_coverage(
                    &g,
                    &ds,
                    cfg.eval.coverage_samples,
                    cfg.seed,
                )?)
            }
            None => None,
        };
        (report, coverage)
    };
    write_report(&common.out, "eval", &report, coverage)?;
    println!(
        "episodes={} success_rate={} mean_return={} nfe_violations={}{} per_decision_us={:.1}",
        report.episodes.len(),
        report.success_rate(),
        report.mean_return(),
        report.nfe_violations,
        coverage
            .map(|c| format!(" mode_coverage={c}"))
            .unwrap_or_default(),
        report.per_decision().as_secs_f64() * 1e6
    );
    Ok(())
}

/// [`mode_coverage`] for a generator, latents from stream 2 of `seed`.
pub fn generator_coverage(
    g: &Generator,
    ds: &ImitationDataset,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    mode_coverage(ds, samples, |obs, n| {
        let rows = obs.repeat_axis(0, n)?.reshape(&[n, obs.numel()])?;
        let z = draw_latents(n, g.params.latent_dim(), &mut rng);
        g.generate_batch(&rows, &z)
    })
}

pub fn cmd_finetune(common: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = prepare(common)?;
    let ck = load_checkpoint(&cfg, checkpoint)?;
    let generator = ck.eval_generator()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let head = ck
        .actor
        .clone()
        .unwrap_or_else(|| ActorHead::new(cfg.model.hidden, cfg.chunk.chunk_dim(), &cfg.actor));
    let critic = ck
        .critic
        .clone()
        .unwrap_or_else(|| critic_init(cfg.chunk.obs_features(), cfg.ppo.critic_hidden, &mut rng));
    let before = evaluate(
        Policy::Generator(&generator),
        &cfg.env,
        &cfg.chunk,
        cfg.eval.episodes,
        cfg.seed,
    )?;
    let mut learner = DbpoLearner::new(generator, head, critic, cfg.ppo)?;
    learner.dump_dir = Some(common.out.clone());
    let mut collector =
        Collector::new(&cfg.env, cfg.chunk.obs_history, cfg.ppo.num_envs, &mut rng)?;
    let mut metrics = CsvOut::create(common.out.join("finetune.csv"), FINETUNE_HEADER)?;
    let started = Instant::now();
    finetune(
        &mut learner,
        &mut collector,
        cfg.ppo.iterations,
        &mut rng,
        |_, m| metrics.line(&m.csv_row()),
    )?;
    metrics.finish()?;
    let after = evaluate(
        Policy::Generator(&learner.generator),
        &cfg.env,
        &cfg.chunk,
        cfg.eval.episodes,
        cfg.seed,
    )?;
    let mut cmp = CsvOut::create(
        common.out.join("finetune_eval.csv"),
        "stage,success_rate,mean_return",
    )?;
    cmp.line(&format!(
        "pretrained,{},{}",
        before.success_rate(),
        before.mean_return()
    ))?;
    cmp.line(&format!(
        "finetuned,{},{}",
        after.success_rate(),
        after.mean_return()
    ))?;
    cmp.finish()?;
    let mut out = Checkpoint::new(
        ck.spec,
        ck.model,
        ck.drift.clone(),
        learner.generator.params.clone(),
        learner.generator.params.clone(),
    );
    out.step = learner.iteration as u64;
    out.actor = Some(learner.head.clone());
    out.critic = Some(learner.critic.clone());
    out.rng = Some(RngState::capture(&rng));
    out.save(&common.out.join("checkpoint.json"))?;
    println!(
        "iterations={} pretrained_success={} finetuned_success={} wall_clock_s={:.3}",
        learner.iteration,
        before.success_rate(),
        after.success_rate(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
