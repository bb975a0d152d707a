use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use alam_core::harness::{
    emit_intervention_plot, emit_probe_plots, generate_data, load_checkpoint, load_model, load_policy, parse_config,
    policy_demos, prepare_output, read_data, read_json, run_eval, run_intervene, run_pretrain, run_probe,
    run_train_policy, write_data, write_eval, write_json, RunConfig, CHECKPOINT_DIR,
};
use alam_core::policy::{EvalReport, InterventionKind};
use alam_core::probes::{composition_grid, OracleEncoder, ProbeReport, TransitionEncoder};
use alam_core::{AlamError, Result, View};

/// Output root for relative `--out` paths and default run directories.
const OUT_ROOT_ENV: &str = "ALAM_OUT_ROOT";

#[derive(Parser)]
#[command(name = "alam", version, about = "Algebraic latent action pretraining, probes and policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file (merged over the preset defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set encoder.latent_dim=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (relative paths resolve under $ALAM_OUT_ROOT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing, non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic episode dataset and its train/test split.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the encoder, quantizer and decoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from the checkpoint already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run the algebraic and reconstruction probes on held-out episodes.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a policy on expert demonstrations.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint whose encoder extracts latent streams.
        #[arg(long, conflicts_with = "oracle_encoder")]
        encoder: Option<PathBuf>,
        /// Use ground-truth displacements as latents.
        #[arg(long)]
        oracle_encoder: bool,
    },
    /// Closed-loop evaluation of a trained policy.
    EvalPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "none")]
        intervention: String,
    },
    /// Evaluate every test-time intervention on shared seeds.
    Intervene {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render plots from probe reports (`LABEL=PATH`) and intervention tables.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long = "probe", value_name = "LABEL=PATH")]
        probes: Vec<String>,
        #[arg(long)]
        interventions: Option<PathBuf>,
    },
    /// Print the resolved configuration as JSON.
    PrintConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn resolve_out(common: &Common, run: &RunConfig, sub: &str) -> PathBuf {
    match &common.out {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => out_root().join(p),
        None => out_root().join(&run.out_dir).join(sub),
    }
}

fn config(common: &Common) -> Result<RunConfig> {
    parse_config(common.config.as_deref(), &common.overrides)
}

fn start(common: &Common, sub: &str) -> Result<(RunConfig, PathBuf)> {
    let run = config(common)?;
    let out = resolve_out(common, &run, sub);
    prepare_output(&out, common.force)?;
    Ok((run, out))
}

fn announce(path: &Path) {
    println!("wrote {}", path.display());
}

fn gen_data(common: &Common) -> Result<()> {
    let (run, out) = start(common, "data")?;
    let (ds, split) = generate_data(&run)?;
    write_data(&out, &run, &ds, &split)?;
    println!("{} episodes ({} train, {} test)", ds.len(), split.train.len(), split.test.len());
    announce(&out);
    Ok(())
}

fn pretrain(common: &Common, data: &Path, resume: bool) -> Result<()> {
    let run = config(common)?;
    let out = resolve_out(common, &run, &format!("pretrain-{}", run.pretrain.mode.name()));
    let ckpt = if resume {
        Some(load_checkpoint(&out.join(CHECKPOINT_DIR))?)
    } else {
        prepare_output(&out, common.force)?;
        None
    };
    let (ds, split) = read_data(data)?;
    let t = run_pretrain(&run, &ds, &split, &out, ckpt.as_ref())?;
    println!("finished at step {}", t.step);
    announce(&out);
    Ok(())
}

fn probe(common: &Common, checkpoint: &Path, data: &Path) -> Result<()> {
    let (run, out) = start(common, "probe")?;
    let model = load_model(checkpoint)?;
    let (ds, split) = read_data(data)?;
    let mut report = run_probe(&run, &model, &ds, &split)?;
    report.checkpoint = Some(checkpoint.display().to_string());
    write_json(&out.join("probe.json"), &report)?;
    if let Some(&ep) = split.test.first() {
        let k = run.probe.grid.stride;
        let traj = &ds.episodes[ep];
        if 2 * k < traj.len() {
            let grid = composition_grid(traj, View::Global, (0, k, 2 * k), &model, &model)?;
            grid.write_png(&out.join("composition.png"))?;
        }
    }
    for row in &report.rows {
        println!(
            "t={:>3}{} add={:.4e} rev={:.4e} psnr(direct)={:.2} psnr(cumulative)={:.2}",
            row.horizon,
            if row.unseen { "*" } else { " " },
            row.add,
            row.rev,
            row.direct.psnr,
            row.cumulative.psnr
        );
    }
    announce(&out);
    Ok(())
}

fn train_policy(common: &Common, encoder: Option<&Path>, oracle: bool) -> Result<()> {
    let (run, out) = start(common, &format!("policy-{}", run_arm(common)?))?;
    let model = encoder.map(load_model).transpose()?;
    let enc: Option<&dyn TransitionEncoder> = match (&model, oracle) {
        (Some(m), _) => Some(m),
        (None, true) => Some(&OracleEncoder),
        (None, false) => None,
    };
    let demos = policy_demos(&run, enc)?;
    let t = run_train_policy(&run, &demos, enc.map(|e| e.id()), &out)?;
    println!("finished at step {}", t.step);
    announce(&out);
    Ok(())
}

fn run_arm(common: &Common) -> Result<&'static str> {
    Ok(config(common)?.policy.arm.name())
}

fn print_eval(r: &EvalReport) {
    match (r.success_rate, r.interval) {
        (Some(p), Some((lo, hi))) => println!(
            "{:<8} success {:.3} [{lo:.3}, {hi:.3}] ({}/{})",
            r.intervention.name(),
            p,
            r.successes,
            r.episodes
        ),
        _ => println!("{:<8} no episodes", r.intervention.name()),
    }
}

fn eval_policy(common: &Common, checkpoint: &Path, intervention: &str) -> Result<()> {
    let kind = InterventionKind::parse(intervention)?;
    let (run, out) = start(common, "eval")?;
    let model = load_policy(checkpoint)?;
    let report = run_eval(&run, &model, kind, &checkpoint.display().to_string())?;
    write_eval(&out, &report)?;
    print_eval(&report);
    announce(&out);
    Ok(())
}

fn intervene(common: &Common, checkpoint: &Path) -> Result<()> {
    let (run, out) = start(common, "intervene")?;
    let model = load_policy(checkpoint)?;
    let reports = run_intervene(&run, &model, &checkpoint.display().to_string())?;
    for r in &reports {
        write_eval(&out, r)?;
        print_eval(r);
    }
    let summary: Vec<EvalReport> = reports.iter().map(|r| EvalReport { log: Vec::new(), ..r.clone() }).collect();
    write_json(&out.join("interventions.json"), &summary)?;
    if reports.iter().any(|r| r.episodes > 0) {
        announce(&emit_intervention_plot(&reports, &out)?);
    }
    announce(&out);
    Ok(())
}

fn plot(common: &Common, probes: &[String], interventions: Option<&Path>) -> Result<()> {
    let run = config(common)?;
    let out = resolve_out(common, &run, "plots");
    let mut reports = Vec::new();
    for spec in probes {
        let (label, path) = spec
            .split_once('=')
            .ok_or_else(|| AlamError::invalid(format!("--probe expects LABEL=PATH, got `{spec}`")))?;
        reports.push((label.to_string(), read_json::<ProbeReport>(Path::new(path))?));
    }
    let evals: Option<Vec<EvalReport>> = interventions.map(read_json).transpose()?;
    if reports.is_empty() && evals.is_none() {
        return Err(AlamError::invalid("nothing to plot: pass --probe and/or --interventions"));
    }
    // Validate everything before touching the output directory.
    let empty_probe = !reports.is_empty() && reports.iter().all(|(_, r)| r.is_empty());
    let empty_eval = evals.as_ref().is_some_and(|e| e.iter().all(|r| r.episodes == 0));
    if empty_probe || empty_eval {
        return Err(AlamError::invalid("report is empty; no plots written"));
    }
    prepare_output(&out, common.force)?;
    if !reports.is_empty() {
        for f in emit_probe_plots(&reports, &out)? {
            announce(&f);
        }
    }
    if let Some(e) = evals {
        announce(&emit_intervention_plot(&e, &out)?);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => gen_data(&common),
        Command::Pretrain { common, data, resume } => pretrain(&common, &data, resume),
        Command::Probe { common, checkpoint, data } => probe(&common, &checkpoint, &data),
        Command::TrainPolicy { common, encoder, oracle_encoder } => {
            train_policy(&common, encoder.as_deref(), oracle_encoder)
        }
        Command::EvalPolicy { common, checkpoint, intervention } => eval_policy(&common, &checkpoint, &intervention),
        Command::Intervene { common, checkpoint } => intervene(&common, &checkpoint),
        Command::Plot { common, probes, interventions } => plot(&common, &probes, interventions.as_deref()),
        Command::PrintConfig { common } => {
            println!("{}", serde_json::to_string_pretty(&config(&common)?)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
