use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use synergen::attention::build_mask;
use synergen::config::{RunConfig, RunData};
use synergen::decoder::{load_checkpoint, Model};
use synergen::embeddings::synth_semantic;
use synergen::evaluation::{run_eval, EvalReport, Mode, Protocol, Task};
use synergen::events::{load_events, synth_generate, write_events, SynthSpec};
use synergen::trainer::{
    batch_gradients, gradcheck_against, gradcheck_fixture, train, RunOutputs, TrainData, Trainer,
};
use synergen::Error;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "synergen", version, about = "Unified retrieval and ranking over user event sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event log and semantic tables.
    Synth {
        /// JSON synthetic spec; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out targets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = TaskArg::Retrieval)]
        task: TaskArg,
        #[arg(long, value_enum, default_value_t = ModeArg::Recommendation)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value_t = ProtocolArg::Full)]
        protocol: ProtocolArg,
        /// Overrides the events path stored in the checkpoint.
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        semantic_dir: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print token metadata and the attention mask of one session.
    InspectMask {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        session: String,
        #[arg(long, default_value_t = 0)]
        theta: i64,
    },
    /// Compare backprop with finite differences on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Test hook: shift the retrieval-head gradient before comparing.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Retrieval,
    Ranking,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Search,
    Recommendation,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Pool100,
    Full,
    Impressed,
}

/// Verification failures exit 1; everything else that goes wrong exits 2.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<VerificationFailed>().is_some() {
        return 1;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Divergence { .. } | Error::NonFiniteGradient { .. }) => 1,
        _ => 2,
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth { spec, seed, out } => cmd_synth(spec.as_deref(), seed, &out),
        Command::Train { config, resume, seed, steps, output_dir } => cmd_train(&config, resume.as_deref(), seed, steps, output_dir),
        Command::Eval { checkpoint, task, mode, protocol, events, semantic_dir, seeds, seed, report } => {
            let ck = load_checkpoint(&checkpoint)?;
            let mut cfg = RunConfig::from_json(&ck.config_json)?;
            if let Some(p) = events {
                cfg.data.events = p;
            }
            if let Some(p) = semantic_dir {
                cfg.data.semantic_dir = p;
            }
            cfg.eval.task = match task {
                TaskArg::Retrieval => Task::Retrieval,
                TaskArg::Ranking => Task::Ranking,
            };
            cfg.eval.mode = match mode {
                ModeArg::Search => Mode::Search,
                ModeArg::Recommendation => Mode::Recommendation,
            };
            cfg.eval.protocol = match protocol {
                ProtocolArg::Pool100 => Protocol::Pool100,
                ProtocolArg::Full => Protocol::Full,
                ProtocolArg::Impressed => Protocol::Impressed,
            };
            if let Some(n) = seeds {
                cfg.eval.seeds = n;
            }
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            cfg.eval.validate()?;
            let model = Model::from_checkpoint(&ck)?;
            let data = RunData::load(&cfg.data, &model.config)?;
            let rep = run_eval(&model, &data.sessions, &data.split, &data.store, &cfg.eval)?;
            let json = rep.to_json()?;
            match report {
                Some(p) => fs::write(&p, format!("{json}\n")).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{json}"),
            }
            print!("{}", EvalReport::table(&[rep]));
            Ok(())
        }
        Command::InspectMask { events, session, theta } => {
            let sessions = load_events(&events)?;
            let s = sessions.iter().find(|s| s.user_id == session).ok_or_else(|| Error::UnknownUser(session.clone()))?;
            let seq = synergen::trainer::context_sequence(&s.events, usize::MAX);
            for m in &seq.metas {
                println!("{:>4} {:?} t={} group={} event={}", m.index, m.kind, m.t, m.req_group, m.event_id);
            }
            print!("{}", build_mask(&seq.metas, theta).render(&seq.metas));
            Ok(())
        }
        Command::Gradcheck { seed, samples, corrupt_gradient } => {
            let fx = gradcheck_fixture(seed)?;
            let mut grads = batch_gradients(&fx.model, &fx.store, &fx.batch, &fx.weights)?;
            if corrupt_gradient {
                let id = fx.model.ids.retrieval_w;
                if let Some(g) = grads.get_mut(id) {
                    g.grad.data_mut().iter_mut().for_each(|v| *v += 1.0);
                }
            }
            let rep = gradcheck_against(&fx.model, &fx.store, &fx.batch, &fx.weights, &grads, samples, 1e-5, seed)?;
            println!(
                "max relative error {:.3e} at {}[{}] ({} checked, {} skipped at kinks)",
                rep.max_rel_error, rep.worst_param, rep.worst_index, rep.checked, rep.skipped
            );
            if rep.max_rel_error >= GRADCHECK_TOLERANCE {
                bail!(VerificationFailed(format!("gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}", rep.max_rel_error)));
            }
            Ok(())
        }
    }
}

fn cmd_synth(spec_path: Option<&Path>, seed: u64, out: &Path) -> anyhow::Result<()> {
    let spec: SynthSpec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => SynthSpec::default(),
    };
    spec.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let sessions = synth_generate(&spec, seed)?;
    write_events(out.join("events.jsonl"), &sessions)?;
    synth_semantic(&spec, seed)?.save(out)?;
    log::info!("wrote {} users to {}", sessions.len(), out.display());
    Ok(())
}

fn cmd_train(config: &Path, resume: Option<&Path>, seed: Option<u64>, steps: Option<u64>, output_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(n) = steps {
        cfg.train.steps = n;
    }
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    cfg.validate()?;
    let data = RunData::load(&cfg.data, &cfg.model)?;
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            log::info!("resuming from step {}", ck.step);
            Trainer::from_checkpoint(&ck, cfg.train.clone())?
        }
        None => Trainer::new(Model::new(cfg.model.clone())?, cfg.train.clone(), cfg.to_canonical_json()?)?,
    };
    trainer.model.check_store(&data.store)?;
    let outputs = RunOutputs { metrics_log: Some(cfg.metrics_path()), checkpoint: Some(cfg.checkpoint_path()) };
    let td = TrainData { sessions: &data.sessions, split: &data.split, store: &data.store };
    let records = train(&mut trainer, &td, &outputs)?;
    if let Some(last) = records.last() {
        log::info!("step {} loss {:.5}", last.step, last.loss_total);
    }
    log::info!("checkpoint {}", cfg.checkpoint_path().display());
    Ok(())
}
