//! `ag4`: data generation, training, gradient checking, parameter reports
//! and rubric scoring.
//!
//! Exit codes: 0 success, 1 check or validation failure, 2 usage or
//! config error.

use ag4_core::config::{Profile, RunConfig};
use ag4_core::data::{generate_dataset, Dataset, GenerateOptions, Split};
use ag4_core::gradcheck::{check_gradients, perturbed_fixture, GradCheckOptions, DEFAULT_TOLERANCE};
use ag4_core::policy::{build_policy, Preset};
use ag4_core::rubric::{render_report, RubricError, ScoreSheet};
use ag4_core::tensor::BackwardFault;
use ag4_core::train::{
    load_checkpoint, save_checkpoint, write_loss_csv, Checkpoint, CheckpointError, Stage, Template, TrainState, Trainer,
};
use ag4_core::{Model, Vocab};
use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ag4", version, about = "Adapter-tuned vision-language toy model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic image-caption dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        items: usize,
        /// Additional stage-2 entries reusing the first images.
        #[arg(long, default_value_t = 0)]
        stage2_items: usize,
        /// Model config whose vocabulary and vision settings to follow.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "AG4_OUT", default_value = "data/synthetic")]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the manifest named in the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        /// Overrides the freeze preset named in the config.
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        seed: Option<u64>,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Allow stage 2 to start from fresh weights.
        #[arg(long)]
        from_scratch: bool,
        /// Continue an interrupted run of the same stage and config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps instead of the schedule end.
        #[arg(long)]
        stop_at: Option<u64>,
        #[arg(long, env = "AG4_OUT")]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, hide = true)]
        fault: Option<Fault>,
    },
    /// Show which parameters a preset trains.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        json: bool,
    },
    /// Validate scoresheets and render the benchmark report.
    Score {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Also write report.txt, items.csv and summary.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    Gelu,
    RmsGain,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse()
}

enum Failure {
    Usage(anyhow::Error),
    Check(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            seed,
            items,
            stage2_items,
            config,
            out,
        } => gen_data(seed, items, stage2_items, config.as_deref(), &out),
        Command::Train {
            config,
            manifest,
            stage,
            preset,
            seed,
            init,
            from_scratch,
            resume,
            stop_at,
            out,
        } => train(TrainArgs {
            config,
            manifest,
            stage,
            preset,
            seed,
            init,
            from_scratch,
            resume,
            stop_at,
            out,
        }),
        Command::Gradcheck {
            config,
            tol,
            seed,
            fault,
        } => gradcheck(config.as_deref(), tol, seed, fault),
        Command::Params { config, preset, json } => params(config.as_deref(), preset, json),
        Command::Score { files, out } => score(&files, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::profile(Profile::Toy)),
    }
}

fn gen_data(seed: u64, items: usize, stage2_items: usize, config: Option<&Path>, out: &Path) -> CmdResult {
    if items == 0 {
        return Err(anyhow!("--items must be at least 1").into());
    }
    let cfg = load_config(config)?;
    let opts = GenerateOptions {
        stage2_items,
        ..GenerateOptions::for_model(seed, items, &cfg.model)
    };
    let manifest = generate_dataset(&opts, out).with_context(|| format!("writing dataset to {}", out.display()))?;
    println!(
        "wrote {} items to {}",
        manifest.items.len(),
        out.join("manifest.jsonl").display()
    );
    Ok(())
}

struct TrainArgs {
    config: PathBuf,
    manifest: Option<PathBuf>,
    stage: Stage,
    preset: Option<Preset>,
    seed: Option<u64>,
    init: Option<PathBuf>,
    from_scratch: bool,
    resume: Option<PathBuf>,
    stop_at: Option<u64>,
    out: Option<PathBuf>,
}

/// A missing file is a usage error; a damaged one fails the run.
fn read_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    load_checkpoint(path).map_err(|e| {
        let e = anyhow::Error::from(e).context(format!("reading {}", path.display()));
        match e.downcast_ref::<CheckpointError>() {
            Some(CheckpointError::Io(_)) => Failure::Usage(e),
            _ => Failure::Check(e),
        }
    })
}

fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = load_config(Some(&a.config))?;
    if let Some(p) = a.preset {
        cfg.preset = p;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let out = a.out.unwrap_or_else(|| cfg.out_dir.clone());
    let manifest = a
        .manifest
        .or_else(|| cfg.manifest.clone())
        .ok_or_else(|| anyhow!("no manifest: pass --manifest or set `manifest` in the config"))?;
    let tc = cfg.train(a.stage);
    let policy = build_policy(&cfg.model, cfg.preset).map_err(anyhow::Error::from)?;
    let data =
        Dataset::load(&manifest, cfg.model.vocab_size).with_context(|| format!("loading {}", manifest.display()))?;
    let examples = match a.stage {
        Stage::Stage1 => data.split(Split::Stage1),
        Stage::Stage2 => {
            let s2 = data.split(Split::Stage2);
            if s2.is_empty() {
                data.clone()
            } else {
                s2
            }
        }
    };

    let mut state = if let Some(path) = &a.resume {
        let ckpt = read_checkpoint(path)?;
        if ckpt.stage != a.stage {
            return Err(anyhow!("{} holds a {} checkpoint, not {}", path.display(), ckpt.stage, a.stage).into());
        }
        TrainState::resume(&ckpt, &cfg.model, &tc).map_err(|e| Failure::Check(anyhow!("{}: {e}", path.display())))?
    } else {
        let model = match (a.stage, &a.init) {
            (_, Some(path)) => {
                let ckpt = read_checkpoint(path)?;
                if ckpt.stage != Stage::Stage1 {
                    return Err(anyhow!(
                        "--init expects a stage1 checkpoint, {} is {}",
                        path.display(),
                        ckpt.stage
                    )
                    .into());
                }
                ckpt.to_model(&cfg.model)
                    .map_err(|e| Failure::Check(anyhow!("{}: {e}", path.display())))?
            }
            (Stage::Stage2, None) if !a.from_scratch => {
                return Err(anyhow!("stage 2 needs a stage-1 checkpoint via --init (or --from-scratch)").into())
            }
            _ => Model::init(cfg.model.clone(), cfg.seed).map_err(anyhow::Error::from)?,
        };
        TrainState::new(model, a.stage)
    };

    let template = match a.stage {
        Stage::Stage1 => Template::Caption,
        Stage::Stage2 => Template::Instruction {
            pool: Vocab {
                n_classes: 4,
                n_levels: 4,
            }
            .instruction_pool(),
        },
    };
    let trainer = Trainer::new(&tc, &policy, &examples.examples, template).map_err(anyhow::Error::from)?;
    let end = a.stop_at.unwrap_or(tc.total_steps());
    let trace = trainer
        .run_until(&mut state, end)
        .map_err(|e| Failure::Check(e.into()))?;

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ckpt_path = out.join(format!("{}.ckpt", a.stage));
    let csv_path = out.join(format!("{}_loss.csv", a.stage));
    save_checkpoint(&state.checkpoint(&tc), &ckpt_path).with_context(|| format!("writing {}", ckpt_path.display()))?;
    let file = fs::File::create(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    write_loss_csv(&trace, file).map_err(anyhow::Error::from)?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!(
            "{}: steps {}..{} loss {:.4} -> {:.4}",
            a.stage,
            first.step,
            last.step + 1,
            first.loss,
            last.loss
        );
    }
    println!("checkpoint {}", ckpt_path.display());
    println!("loss trace {}", csv_path.display());
    Ok(())
}

fn gradcheck(config: Option<&Path>, tol: f64, seed: u64, fault: Option<Fault>) -> CmdResult {
    if tol.is_nan() || tol <= 0.0 {
        return Err(anyhow!("--tol must be positive").into());
    }
    let cfg = load_config(config)?;
    let (model, policy, examples) = perturbed_fixture(&cfg.model, cfg.preset, seed).map_err(anyhow::Error::from)?;
    let opts = GradCheckOptions {
        fault: fault.map(|f| match f {
            Fault::Gelu => BackwardFault::GeluDerivative,
            Fault::RmsGain => BackwardFault::RmsNormGain,
        }),
        ..Default::default()
    };
    let report = check_gradients(&model, &policy, &examples, &Template::Caption, &opts).map_err(anyhow::Error::from)?;
    print!("{}", report.render(tol));
    if report.passes(tol) {
        Ok(())
    } else {
        let failing: Vec<_> = report
            .groups
            .iter()
            .filter(|g| g.max_rel_err >= tol)
            .map(|g| g.path.as_str())
            .collect();
        Err(Failure::Check(anyhow!(
            "gradient check failed for {}",
            failing.join(", ")
        )))
    }
}

fn params(config: Option<&Path>, preset: Option<Preset>, json: bool) -> CmdResult {
    let cfg = load_config(config)?;
    let policy = build_policy(&cfg.model, preset.unwrap_or(cfg.preset)).map_err(anyhow::Error::from)?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&policy.to_json()).map_err(anyhow::Error::from)?
        );
    } else {
        print!("{}", policy.render_table());
    }
    Ok(())
}

fn score(files: &[PathBuf], out: Option<&Path>) -> CmdResult {
    let mut sheets = Vec::with_capacity(files.len());
    for f in files {
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        let sheet = ScoreSheet::from_json(&text).map_err(|e| Failure::Check(anyhow!("{}: {e}", f.display())))?;
        sheets.push(sheet);
    }
    let report = render_report(&sheets).map_err(|e| match e {
        RubricError::DuplicateModel(_) | RubricError::Invalid(_) => Failure::Check(e.into()),
        other => Failure::Usage(other.into()),
    })?;
    print!("{}", report.text);
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (name, body) in [
            ("report.txt", &report.text),
            ("items.csv", &report.items_csv),
            ("summary.csv", &report.summary_csv),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        }
    }
    Ok(())
}
