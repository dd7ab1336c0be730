//! Command-line harness: pretrain | train | eval | export-embeddings |
//! selfcheck.
//!
//! Exit codes: 0 success, 2 config error, 3 numeric failure (NaN abort),
//! 4 selfcheck failure.

mod config;

use clap::{Parser, Subcommand};
use rlvr_core::checkpoint::{self, CheckpointData, CheckpointKind};
use rlvr_core::contrastive::ContrastiveHead;
use rlvr_core::error::CoreError;
use rlvr_core::policy::{Dims, PolicyParams};
use rlvr_core::tasks::{write_task_dump, TaskSuite, Vocabulary};
use rlvr_core::trainer::{self, pass_at_1, RunState, TrainConfig};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rlvr-lab", about = "Desk-scale RLVR laboratory with contrastive reward shaping")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Repeatable section.key=value overrides applied on top of the file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for --override run.seed=N.
    #[arg(long)]
    seed: Option<u64>,
    /// Pin sampling to a single worker.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the supervised corpus, warm up the policy, report base pass@1.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run policy optimization from a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// pass@1 on the eval suites.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// base | perturbed1 | perturbed2 | all
        #[arg(long, default_value = "all")]
        suite: String,
        /// Samples per prompt (overrides eval.eval_samples_per_prompt).
        #[arg(long)]
        n: Option<usize>,
        /// Directory for eval.json; defaults next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample groups without updating anything and dump embeddings as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of steps' worth of groups to sample.
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in verification suites.
    Selfcheck,
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig, CoreError> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path)?,
        None => String::new(),
    };
    let mut table: toml::Value = toml::from_str(&text)
        .map_err(|e| CoreError::Config(vec![format!("TOML parse error: {e}")]))?;
    config::apply_overrides(&mut table, &args.overrides)?;
    if let Some(seed) = args.seed {
        config::apply_overrides(&mut table, &[format!("run.seed={seed}")])?;
    }
    if args.deterministic {
        config::apply_overrides(&mut table, &["run.workers=1".to_string()])?;
    }
    config::resolve(table)
}

fn echo_config(cfg: &TrainConfig, dir: &Path) -> Result<(), CoreError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), config::echo(cfg))?;
    Ok(())
}

#[derive(Serialize)]
struct PretrainReport {
    pretrain_steps: usize,
    final_loss: f64,
    pass1_base: f64,
    eval_prompts: usize,
    eval_samples_per_prompt: usize,
    seed: u64,
}

fn cmd_pretrain(args: &ConfigArgs, out: &Path) -> Result<(), CoreError> {
    let cfg = load_config(args)?;
    echo_config(&cfg, out)?;
    let suite = TaskSuite::build(&cfg.tasks, cfg.run.seed)?;
    let corpus_file = std::fs::File::create(out.join("corpus.jsonl"))?;
    write_task_dump(std::io::BufWriter::new(corpus_file), &suite.train)?;

    let mut policy = PolicyParams::init(Dims::default(), cfg.run.seed);
    cfg.validate_lengths(&policy.dims)?;
    println!(
        "pretraining {} params for {} steps (batch {}, lr {})",
        policy.param_count(),
        cfg.run.pretrain_steps,
        cfg.run.pretrain_batch,
        cfg.run.pretrain_lr
    );
    let curve = trainer::pretrain(&cfg, &mut policy)?;
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(out.join("pretrain_loss.csv"))?);
        use std::io::Write;
        writeln!(w, "step,loss")?;
        for (i, l) in curve.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, l)?;
        }
    }

    let vocab_hash = Vocabulary::standard().hash();
    let data = CheckpointData {
        kind: CheckpointKind::Policy,
        step: 0,
        seed: cfg.run.seed,
        policy,
        reference: None,
        head: None,
        policy_opt: None,
    };
    checkpoint::save_to_path(&out.join("policy.bin"), &data, vocab_hash)?;

    let eval_set: Vec<_> =
        suite.eval_base.iter().take(cfg.eval.eval_prompts).cloned().collect();
    let pass1 = pass_at_1(
        &data.policy,
        &eval_set,
        &cfg.eval,
        cfg.sampling.max_response_len,
        cfg.run.seed,
        0,
    )?;
    let report = PretrainReport {
        pretrain_steps: cfg.run.pretrain_steps,
        final_loss: curve.last().copied().unwrap_or(f64::NAN),
        pass1_base: pass1,
        eval_prompts: eval_set.len(),
        eval_samples_per_prompt: cfg.eval.eval_samples_per_prompt,
        seed: cfg.run.seed,
    };
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "pretrain done: final loss {:.4}, base pass@1 {:.4} over {} prompts -> {}",
        report.final_loss,
        pass1,
        eval_set.len(),
        out.join("policy.bin").display()
    );
    Ok(())
}

fn cmd_train(args: &ConfigArgs, ckpt: &Path, out: &Path) -> Result<(), CoreError> {
    let cfg = load_config(args)?;
    echo_config(&cfg, out)?;
    let vocab_hash = Vocabulary::standard().hash();
    let data = checkpoint::load_from_path(ckpt, vocab_hash)?;
    let resuming = data.kind == CheckpointKind::Run;
    let state = RunState::from_checkpoint(data, &cfg);
    cfg.validate_lengths(&state.policy.dims)?;
    let start = state.step;
    println!(
        "{} {:?} run at step {} (total {}, warmup {}, contrastive {})",
        if resuming { "resuming" } else { "starting" },
        cfg.method.method,
        start,
        cfg.run.total_steps,
        cfg.run.head_warmup_steps,
        if cfg.run.contrastive_enabled { "on" } else { "off" }
    );
    let final_state = trainer::run_with_state(&cfg, state, out, !resuming)?;
    println!(
        "run complete at step {}; metrics: {}, final checkpoint: {}",
        final_state.step,
        out.join("metrics.jsonl").display(),
        out.join("final.bin").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalLine {
    suite: String,
    pass1: f64,
    prompts: usize,
    samples_per_prompt: usize,
    seed: u64,
}

fn cmd_eval(
    args: &ConfigArgs,
    ckpt: &Path,
    suite_sel: &str,
    n: Option<usize>,
    out: Option<&Path>,
) -> Result<(), CoreError> {
    let mut cfg = load_config(args)?;
    if let Some(n) = n {
        cfg.eval.eval_samples_per_prompt = n;
    }
    let vocab_hash = Vocabulary::standard().hash();
    let data = checkpoint::load_from_path(ckpt, vocab_hash)?;
    let suite = TaskSuite::build(&cfg.tasks, cfg.run.seed)?;
    let selected: Vec<(&str, &[rlvr_core::tasks::TaskInstance])> = match suite_sel {
        "base" => vec![("base", &suite.eval_base)],
        "perturbed1" => vec![("perturbed1", &suite.eval_perturbed1)],
        "perturbed2" => vec![("perturbed2", &suite.eval_perturbed2)],
        "all" => vec![
            ("base", &suite.eval_base),
            ("perturbed1", &suite.eval_perturbed1),
            ("perturbed2", &suite.eval_perturbed2),
        ],
        other => {
            return Err(CoreError::Config(vec![format!(
                "--suite must be base|perturbed1|perturbed2|all, got `{other}`"
            )]))
        }
    };
    let mut lines = Vec::new();
    for (name, set) in selected {
        let capped: Vec<_> = set.iter().take(cfg.eval.eval_prompts).cloned().collect();
        let pass1 = pass_at_1(
            &data.policy,
            &capped,
            &cfg.eval,
            cfg.sampling.max_response_len,
            cfg.run.seed,
            0,
        )?;
        println!(
            "suite {name}: pass@1 = {pass1:.4} ({} prompts, n = {}, seed = {})",
            capped.len(),
            cfg.eval.eval_samples_per_prompt,
            cfg.run.seed
        );
        lines.push(EvalLine {
            suite: name.to_string(),
            pass1,
            prompts: capped.len(),
            samples_per_prompt: cfg.eval.eval_samples_per_prompt,
            seed: cfg.run.seed,
        });
    }
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| ckpt.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("eval.json"), serde_json::to_string_pretty(&lines)?)?;
    Ok(())
}

fn cmd_export(args: &ConfigArgs, ckpt: &Path, steps: usize, out: &Path) -> Result<(), CoreError> {
    let cfg = load_config(args)?;
    let vocab_hash = Vocabulary::standard().hash();
    let data = checkpoint::load_from_path(ckpt, vocab_hash)?;
    let head = data
        .head
        .unwrap_or_else(|| ContrastiveHead::init(cfg.contrastive.d, data.policy.dims.dim, cfg.run.seed));
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = std::fs::File::create(out)?;
    trainer::export_embeddings(&cfg, &data.policy, &head, steps, std::io::BufWriter::new(file))?;
    println!(
        "wrote {} rows to {}",
        steps * cfg.run.prompts_per_step * cfg.sampling.group_size,
        out.display()
    );
    Ok(())
}

fn cmd_selfcheck() -> Result<bool, CoreError> {
    let results = rlvr_core::selfcheck::run_all()?;
    let mut all_pass = true;
    println!("{:<44} {:>12} {:>12}  status", "check", "measured", "tolerance");
    for r in &results {
        println!(
            "{:<44} {:>12.3e} {:>12.3e}  {}",
            r.name,
            r.measured,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" }
        );
        all_pass &= r.pass;
    }
    println!(
        "{}/{} checks passed",
        results.iter().filter(|r| r.pass).count(),
        results.len()
    );
    Ok(all_pass)
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Config(_) => 2,
        CoreError::NumericFailure { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<(), CoreError> = match &cli.cmd {
        Command::Pretrain { cfg, out } => cmd_pretrain(cfg, out),
        Command::Train { cfg, ckpt, out } => cmd_train(cfg, ckpt, out),
        Command::Eval { cfg, ckpt, suite, n, out } => {
            cmd_eval(cfg, ckpt, suite, *n, out.as_deref())
        }
        Command::ExportEmbeddings { cfg, ckpt, steps, out } => {
            cmd_export(cfg, ckpt, *steps, out)
        }
        Command::Selfcheck => match cmd_selfcheck() {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(4),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
