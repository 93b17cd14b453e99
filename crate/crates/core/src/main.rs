//! `clbench` command line: generate the benchmark, run single stages, or the
//! full experiment pipeline, and rebuild reports from persisted scores.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use clbench::data::{self, Domain};
use clbench::error::{Error, Result};
use clbench::report;
use clbench::runner::{
    self, evaluate_model, run_adaptation, run_stage1, split_repetition, ExperimentConfig,
    StrategySpec,
};
use clbench::strategies::{FisherWeighting, ThresholdRule};

#[derive(Parser)]
#[command(name = "clbench", version, about = "Two-domain continual-learning benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-domain benchmark and write the dataset CSVs
    Generate(CommonArgs),
    /// Stage 1: train on domain A for one repetition
    Train(RepArgs),
    /// Stage 2: adapt a stage-1 model to domain B under one strategy
    Adapt(AdaptArgs),
    /// Evaluate the checkpoints of one repetition and write score files
    Evaluate(RepArgs),
    /// Full pipeline: generate, train, adapt, evaluate, report
    Run(CommonArgs),
    /// Rebuild report files from the persisted raw scores
    Report {
        /// Directory holding manifest.json and scores/
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment config; built-in defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Master seed override
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Repetition index (1-based)
    #[arg(long, default_value_t = 1)]
    rep: u32,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    rep_args: RepArgs,
    /// Strategy: "jt", "ewc", "lwf", or a name from the config list
    #[arg(long)]
    strategy: String,
    /// Regularizer impact (EWC or LWF)
    #[arg(long)]
    lambda: Option<f64>,
    /// Absolute Fisher threshold for EWC
    #[arg(long)]
    rho: Option<f64>,
    /// Quantile Fisher threshold for EWC (exclusive with --rho)
    #[arg(long)]
    quantile: Option<f64>,
    /// Source-data fraction for joint training
    #[arg(long)]
    fraction: Option<f64>,
    /// Use classic magnitude-weighted EWC instead of the binarized variant
    #[arg(long)]
    classic: bool,
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => runner::load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<(data::Dataset, data::Dataset)> {
    let (a, b) = data::generate(&cfg.resolved_benchmark())?;
    std::fs::create_dir_all(out.join("data"))?;
    data::save_csv(&a, &out.join("data/domain_a.csv"))?;
    data::save_csv(&b, &out.join("data/domain_b.csv"))?;
    Ok((a, b))
}

fn build_strategy(cfg: &ExperimentConfig, args: &AdaptArgs) -> Result<StrategySpec> {
    if args.rho.is_some() && args.quantile.is_some() {
        return Err(Error::config("--rho and --quantile are mutually exclusive"));
    }
    // start from the configured entry with this name when there is one,
    // then apply flag overrides on top
    let base = cfg.strategies.iter().find(|s| s.name() == args.strategy).cloned();
    let kind = match &base {
        Some(StrategySpec::Jt { .. }) => "jt",
        Some(StrategySpec::Ewc { .. }) => "ewc",
        Some(StrategySpec::Lwf { .. }) => "lwf",
        None => args.strategy.as_str(),
    };
    match kind {
        "jt" => {
            let cfg_fraction = match base {
                Some(StrategySpec::Jt { fraction }) => fraction,
                _ => 0.0,
            };
            Ok(StrategySpec::Jt {
                fraction: args.fraction.unwrap_or(cfg_fraction),
            })
        }
        "ewc" => {
            let (cfg_lambda, cfg_rule, cfg_weighting) = match base {
                Some(StrategySpec::Ewc {
                    lambda,
                    rule,
                    weighting,
                }) => (lambda, rule, weighting),
                _ => (
                    1.0,
                    ThresholdRule::Quantile { q: 0.5 },
                    FisherWeighting::Binarized,
                ),
            };
            let rule = match (args.rho, args.quantile) {
                (Some(rho), None) => ThresholdRule::Absolute { rho },
                (None, Some(q)) => ThresholdRule::Quantile { q },
                _ => cfg_rule,
            };
            let weighting = if args.classic {
                FisherWeighting::Classic
            } else {
                cfg_weighting
            };
            Ok(StrategySpec::Ewc {
                lambda: args.lambda.unwrap_or(cfg_lambda),
                rule,
                weighting,
            })
        }
        "lwf" => {
            let cfg_lambda = match base {
                Some(StrategySpec::Lwf { lambda }) => lambda,
                _ => 2.0,
            };
            Ok(StrategySpec::Lwf {
                lambda: args.lambda.unwrap_or(cfg_lambda),
            })
        }
        other => Err(Error::config(format!(
            "unknown strategy {other:?}; use jt, ewc, lwf or a configured name"
        ))),
    }
}

fn cmd_generate(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let (a, b) = generate_data(&cfg, &args.out)?;
    println!(
        "wrote {} ({} samples) and {} ({} samples)",
        args.out.join("data/domain_a.csv").display(),
        a.len(),
        args.out.join("data/domain_b.csv").display(),
        b.len()
    );
    Ok(())
}

fn cmd_train(args: &RepArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let (a, b) = generate_data(&cfg, &args.common.out)?;
    let rep_seed = cfg.master_seed.wrapping_add(args.rep as u64);
    let rep = split_repetition(&cfg, &a, &b, rep_seed)?;
    let (model, record) = run_stage1(&cfg, &rep, rep_seed)?;
    let (initial_on_source, src_scores) =
        evaluate_model(&model, &rep.source_test, &Domain::A.mask())?;
    let (_, tgt_scores) = evaluate_model(&model, &rep.target_test, &data::shared_label_mask())?;
    report::persist_repetition_base(
        &args.common.out,
        args.rep,
        &model,
        &record,
        (&src_scores, &rep.source_test),
        (&tgt_scores, &rep.target_test),
    )?;
    println!(
        "stage-1 model for repetition {}: best epoch {}, val loss {:.6}, source test mean AUC {}",
        args.rep,
        record.best_epoch,
        record.best_val_loss,
        initial_on_source
            .average()
            .map(|a| format!("{a:.4}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_adapt(args: &AdaptArgs) -> Result<()> {
    let common = &args.rep_args.common;
    let cfg = load_config(common)?;
    let strategy = build_strategy(&cfg, args)?;
    let (a, b) = generate_data(&cfg, &common.out)?;
    let rep_index = args.rep_args.rep;
    let rep_seed = cfg.master_seed.wrapping_add(rep_index as u64);
    let rep = split_repetition(&cfg, &a, &b, rep_seed)?;

    // reuse the persisted stage-1 checkpoint when present, else train it now
    let stage1_path = common
        .out
        .join(format!("reps/rep{rep_index}/checkpoints/stage1.json"));
    let source_model = if stage1_path.exists() {
        clbench::checkpoint::load_model(&stage1_path)?
    } else {
        let (model, record) = run_stage1(&cfg, &rep, rep_seed)?;
        let (_, src_scores) = evaluate_model(&model, &rep.source_test, &Domain::A.mask())?;
        let (_, tgt_scores) =
            evaluate_model(&model, &rep.target_test, &data::shared_label_mask())?;
        report::persist_repetition_base(
            &common.out,
            rep_index,
            &model,
            &record,
            (&src_scores, &rep.source_test),
            (&tgt_scores, &rep.target_test),
        )?;
        model
    };

    let (adapted, record, artifacts) =
        run_adaptation(&source_model, &strategy, &cfg, &rep, rep_seed)?;
    let (after_src, src_scores) = evaluate_model(&adapted, &rep.source_test, &Domain::A.mask())?;
    let (after_tgt, tgt_scores) = evaluate_model(&adapted, &rep.target_test, &Domain::B.mask())?;
    report::persist_strategy(
        &common.out,
        rep_index,
        &strategy.name(),
        &adapted,
        &record,
        &artifacts,
        (&src_scores, &rep.source_test),
        (&tgt_scores, &rep.target_test),
    )?;
    println!(
        "adapted with {}: source test mean AUC {}, target test mean AUC {}",
        strategy.name(),
        after_src.average().map(|a| format!("{a:.4}")).unwrap_or_default(),
        after_tgt.average().map(|a| format!("{a:.4}")).unwrap_or_default(),
    );
    Ok(())
}

fn cmd_evaluate(args: &RepArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let (a, b) = generate_data(&cfg, &args.common.out)?;
    let rep_index = args.rep;
    let rep_seed = cfg.master_seed.wrapping_add(rep_index as u64);
    let rep = split_repetition(&cfg, &a, &b, rep_seed)?;
    let ckpt_dir = args
        .common
        .out
        .join(format!("reps/rep{rep_index}/checkpoints"));
    if !ckpt_dir.is_dir() {
        return Err(Error::config(format!(
            "no checkpoints under {}; run train/adapt first",
            ckpt_dir.display()
        )));
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&ckpt_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    entries.sort();
    let scores_dir = args.common.out.join(format!("scores/rep{rep_index}"));
    std::fs::create_dir_all(&scores_dir)?;
    for path in entries {
        let stem = path.file_stem().unwrap().to_string_lossy().to_string();
        let model = clbench::checkpoint::load_model(&path)?;
        let is_initial = stem == "stage1";
        let (src_defined, tgt_defined) = if is_initial {
            (Domain::A.mask(), data::shared_label_mask())
        } else {
            (Domain::A.mask(), Domain::B.mask())
        };
        let prefix = if is_initial { "initial".to_string() } else { stem.clone() };
        let (src_table, src_scores) = evaluate_model(&model, &rep.source_test, &src_defined)?;
        let (tgt_table, tgt_scores) = evaluate_model(&model, &rep.target_test, &tgt_defined)?;
        report::save_scores(
            &scores_dir.join(format!("{prefix}_on_source.csv")),
            &src_scores,
            &rep.source_test,
            &src_defined,
        )?;
        report::save_scores(
            &scores_dir.join(format!("{prefix}_on_target.csv")),
            &tgt_scores,
            &rep.target_test,
            &tgt_defined,
        )?;
        println!(
            "{prefix}: source mean AUC {}, target mean AUC {}",
            src_table.average().map(|a| format!("{a:.4}")).unwrap_or_default(),
            tgt_table.average().map(|a| format!("{a:.4}")).unwrap_or_default(),
        );
    }
    Ok(())
}

fn cmd_run(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let run = runner::run_experiment(&cfg, Some(&args.out))?;
    println!(
        "completed {} repetitions x {} strategies; reports in {}",
        run.repetitions.len(),
        run.strategy_order.len(),
        args.out.display()
    );
    println!(
        "  initial: source mean AUC {:.4}, mean FWT {:+.4}",
        run.mean_initial_source_auc()?,
        run.mean_fwt()?
    );
    for name in &run.strategy_order {
        println!(
            "  {name}: mean BWT {:+.4}, target mean AUC {:.4}",
            run.mean_bwt(name)?,
            run.mean_target_auc(name)?
        );
    }
    Ok(())
}

fn cmd_report(out: &Path) -> Result<()> {
    let run = report::rebuild_run_result(out)?;
    let bundle = report::evaluate_and_report(&run)?;
    report::write_report(out, &bundle)?;
    println!(
        "rebuilt report.md, report.json and transfer.csv in {}",
        out.display()
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Adapt(args) => cmd_adapt(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Run(args) => cmd_run(args),
        Command::Report { out } => cmd_report(out),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
