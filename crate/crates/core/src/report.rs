//! Report emission and raw-score persistence.
//!
//! Every number in the Markdown/JSON reports is recomputable from the
//! persisted score files through the metrics module alone; `rebuild_run_result`
//! does exactly that for the `report` subcommand. Reports carry no timestamps,
//! so identical runs produce byte-identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, Dataset, Domain};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{aggregate, backward_transfer, forward_transfer, AucTable, TransferReport};
use crate::nn::{LabelMask, MlpModel};
use crate::optim::TrainRecord;
use crate::runner::{AdaptArtifacts, RepetitionResult, RunResult, StrategyOutcome};
use crate::strategies::save_prior;

pub struct ReportBundle {
    pub markdown: String,
    pub json: String,
    pub transfer_csv: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    config_hash: String,
    master_seed: u64,
    label_names: Vec<String>,
    strategy_order: Vec<String>,
    repetitions: u32,
}

pub fn write_manifest(dir: &Path, run: &RunResult) -> Result<()> {
    let manifest = Manifest {
        schema_version: run.schema_version,
        config_hash: run.config_hash.clone(),
        master_seed: run.master_seed,
        label_names: run.label_names.clone(),
        strategy_order: run.strategy_order.clone(),
        repetitions: run.repetitions.len() as u32,
    };
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Writes one evaluation's raw scores: per sample, the model score, the true
/// label and a per-label "defined" flag for this evaluation.
pub fn save_scores(path: &Path, scores: &Matrix, test: &Dataset, defined: &LabelMask) -> Result<()> {
    if scores.rows() != test.len() || scores.cols() != data::NUM_LABELS {
        return Err(Error::shape("scores disagree with the test set"));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string()];
    for i in 0..data::NUM_LABELS {
        header.push(format!("s_{i}"));
    }
    for i in 0..data::NUM_LABELS {
        header.push(format!("y_{i}"));
    }
    for i in 0..data::NUM_LABELS {
        header.push(format!("d_{i}"));
    }
    w.write_record(&header)?;
    for (row, sample) in test.samples.iter().enumerate() {
        let mut record = vec![sample.id.to_string()];
        for l in 0..data::NUM_LABELS {
            record.push(scores.get(row, l).to_string());
        }
        for l in 0..data::NUM_LABELS {
            record.push(((sample.labels[l] > 0.5) as u8).to_string());
        }
        for l in 0..data::NUM_LABELS {
            record.push((defined.is_active(l) as u8).to_string());
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a score file back into (scores, labels, defined-mask).
pub fn load_scores(path: &Path) -> Result<(Matrix, Matrix, LabelMask)> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = 1 + 3 * data::NUM_LABELS;
    if headers.len() != expected {
        return Err(Error::integrity(format!(
            "score file has {} columns, expected {expected}",
            headers.len()
        )));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut defined: Option<Vec<bool>> = None;
    for record in reader.records() {
        let record = record?;
        let mut srow = Vec::with_capacity(data::NUM_LABELS);
        let mut yrow = Vec::with_capacity(data::NUM_LABELS);
        let mut drow = Vec::with_capacity(data::NUM_LABELS);
        for l in 0..data::NUM_LABELS {
            srow.push(
                record[1 + l]
                    .parse::<f64>()
                    .map_err(|_| Error::integrity("unparsable score"))?,
            );
            yrow.push(
                record[1 + data::NUM_LABELS + l]
                    .parse::<u8>()
                    .map_err(|_| Error::integrity("unparsable label"))? as f64,
            );
            drow.push(
                record[1 + 2 * data::NUM_LABELS + l]
                    .parse::<u8>()
                    .map_err(|_| Error::integrity("unparsable defined flag"))?
                    != 0,
            );
        }
        match &defined {
            None => defined = Some(drow),
            Some(prev) if *prev != drow => {
                return Err(Error::integrity("defined flags vary within one score file"))
            }
            _ => {}
        }
        scores.push(srow);
        labels.push(yrow);
    }
    let defined = defined.ok_or_else(|| Error::integrity("score file has no rows"))?;
    Ok((
        Matrix::from_rows(&scores)?,
        Matrix::from_rows(&labels)?,
        LabelMask::new(defined),
    ))
}

fn scores_dir(dir: &Path, rep: u32) -> std::path::PathBuf {
    dir.join(format!("scores/rep{rep}"))
}

/// Persists the stage-1 side of one repetition: checkpoint, train record and
/// the two initial-model score files.
pub fn persist_repetition_base(
    dir: &Path,
    rep: u32,
    model: &MlpModel,
    record: &TrainRecord,
    source_eval: (&Matrix, &Dataset),
    target_eval: (&Matrix, &Dataset),
) -> Result<()> {
    let rep_dir = dir.join(format!("reps/rep{rep}"));
    std::fs::create_dir_all(rep_dir.join("checkpoints"))?;
    std::fs::create_dir_all(scores_dir(dir, rep))?;
    checkpoint::save_model(model, &rep_dir.join("checkpoints/stage1.json"))?;
    std::fs::write(rep_dir.join("stage1_record.csv"), record.to_csv())?;
    save_scores(
        &scores_dir(dir, rep).join("initial_on_source.csv"),
        source_eval.0,
        source_eval.1,
        &Domain::A.mask(),
    )?;
    save_scores(
        &scores_dir(dir, rep).join("initial_on_target.csv"),
        target_eval.0,
        target_eval.1,
        &data::shared_label_mask(),
    )?;
    Ok(())
}

/// Persists one adapted strategy: checkpoint, train record, strategy
/// artifacts and the two post-adaptation score files.
#[allow(clippy::too_many_arguments)]
pub fn persist_strategy(
    dir: &Path,
    rep: u32,
    name: &str,
    model: &MlpModel,
    record: &TrainRecord,
    artifacts: &AdaptArtifacts,
    source_eval: (&Matrix, &Dataset),
    target_eval: (&Matrix, &Dataset),
) -> Result<()> {
    let rep_dir = dir.join(format!("reps/rep{rep}"));
    std::fs::create_dir_all(rep_dir.join("checkpoints"))?;
    checkpoint::save_model(model, &rep_dir.join(format!("checkpoints/{name}.json")))?;
    std::fs::write(rep_dir.join(format!("{name}_record.csv")), record.to_csv())?;
    if let Some(prior) = &artifacts.prior {
        std::fs::create_dir_all(rep_dir.join("priors"))?;
        save_prior(prior, &rep_dir.join(format!("priors/{name}.json")))?;
    }
    if let Some(soft) = &artifacts.soft_targets {
        std::fs::create_dir_all(rep_dir.join("soft_targets"))?;
        std::fs::write(rep_dir.join(format!("soft_targets/{name}.csv")), soft.to_csv())?;
    }
    if let Some(mixture) = &artifacts.mixture {
        std::fs::create_dir_all(rep_dir.join("mixtures"))?;
        let json = serde_json::json!({
            "fraction": mixture.fraction,
            "selected_source_groups": mixture.selected_source_groups,
        });
        std::fs::write(
            rep_dir.join(format!("mixtures/{name}.json")),
            serde_json::to_string_pretty(&json)?,
        )?;
    }
    save_scores(
        &scores_dir(dir, rep).join(format!("{name}_on_source.csv")),
        source_eval.0,
        source_eval.1,
        &Domain::A.mask(),
    )?;
    save_scores(
        &scores_dir(dir, rep).join(format!("{name}_on_target.csv")),
        target_eval.0,
        target_eval.1,
        &Domain::B.mask(),
    )?;
    Ok(())
}

/// Rebuilds the full result set from the manifest and the raw score files,
/// using metrics-module functions only.
pub fn rebuild_run_result(dir: &Path) -> Result<RunResult> {
    let manifest_path = dir.join("manifest.json");
    let raw = std::fs::read_to_string(&manifest_path).map_err(|e| {
        Error::config(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&raw)?;

    let mut repetitions = Vec::new();
    for rep in 1..=manifest.repetitions {
        let sdir = scores_dir(dir, rep);
        let table_from = |stem: &str| -> Result<AucTable> {
            let (scores, labels, defined) = load_scores(&sdir.join(format!("{stem}.csv")))?;
            AucTable::from_scores(&scores, &labels, &defined)
        };
        let initial_on_source = table_from("initial_on_source")?;
        let initial_on_target = table_from("initial_on_target")?;
        let fwt = forward_transfer(&initial_on_target);
        let mut outcomes = Vec::new();
        for name in &manifest.strategy_order {
            let after_on_source = table_from(&format!("{name}_on_source"))?;
            let after_on_target = table_from(&format!("{name}_on_target"))?;
            let bwt = backward_transfer(&initial_on_source, &after_on_source)?;
            outcomes.push(StrategyOutcome {
                name: name.clone(),
                after_on_source,
                after_on_target,
                transfer: TransferReport::new(bwt, fwt.clone())?,
            });
        }
        repetitions.push(RepetitionResult {
            repetition: rep,
            initial_on_source,
            initial_on_target,
            outcomes,
        });
    }
    Ok(RunResult {
        schema_version: manifest.schema_version,
        config_hash: manifest.config_hash,
        master_seed: manifest.master_seed,
        label_names: manifest.label_names,
        strategy_order: manifest.strategy_order,
        repetitions,
    })
}

// ---------------------------------------------------------------------------
// aggregation across repetitions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
struct LabelStat {
    label: String,
    mean: Option<f64>,
    std: Option<f64>,
    n: usize,
}

#[derive(Debug, Clone, Serialize)]
struct ColumnStats {
    column: String,
    per_label: Vec<LabelStat>,
    average: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct TransferStats {
    column: String,
    per_label: Vec<LabelStat>,
    min: f64,
    mean: f64,
    max: f64,
    /// Population std across repetitions of the per-repetition label-mean.
    rep_std: f64,
}

#[derive(Debug, Clone, Serialize)]
struct Orderings {
    mean_bwt_by_strategy: Vec<(String, f64)>,
    lwf_gt_ewc: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
struct ReportJson {
    schema_version: u32,
    config_hash: String,
    master_seed: u64,
    repetitions: usize,
    label_names: Vec<String>,
    strategies: Vec<String>,
    source_auc: Vec<ColumnStats>,
    target_auc: Vec<ColumnStats>,
    backward_transfer: Vec<TransferStats>,
    forward_transfer: TransferStats,
    orderings: Orderings,
}

/// Mean and population std of the defined values.
fn mean_std(values: &[Option<f64>]) -> (Option<f64>, Option<f64>, usize) {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let n = defined.len();
    if n == 0 {
        return (None, None, 0);
    }
    let mean = defined.iter().sum::<f64>() / n as f64;
    let var = defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (Some(mean), Some(var.sqrt()), n)
}

/// Stats per label for one table column, across repetitions.
fn column_stats<F>(run: &RunResult, column: &str, labels: &[usize], table: F) -> Result<ColumnStats>
where
    F: Fn(&RepetitionResult) -> Result<&AucTable>,
{
    let mut per_label = Vec::with_capacity(labels.len());
    for &l in labels {
        let values: Vec<Option<f64>> = run
            .repetitions
            .iter()
            .map(|rep| Ok(table(rep)?.per_label()[l]))
            .collect::<Result<_>>()?;
        let (mean, std, n) = mean_std(&values);
        per_label.push(LabelStat {
            label: run.label_names[l].clone(),
            mean,
            std,
            n,
        });
    }
    let means: Vec<f64> = per_label.iter().filter_map(|s| s.mean).collect();
    let average = if means.is_empty() {
        None
    } else {
        Some(means.iter().sum::<f64>() / means.len() as f64)
    };
    Ok(ColumnStats {
        column: column.to_string(),
        per_label,
        average,
    })
}

/// Per-label transfer values for one repetition.
type TransferOf<'a> = dyn Fn(&RepetitionResult) -> Result<Vec<Option<f64>>> + 'a;

fn transfer_stats(
    run: &RunResult,
    column: &str,
    labels: &[usize],
    values_of: &TransferOf,
) -> Result<TransferStats> {
    let mut per_label = Vec::with_capacity(labels.len());
    let per_rep: Vec<Vec<Option<f64>>> = run
        .repetitions
        .iter()
        .map(|rep| values_of(rep))
        .collect::<Result<_>>()?;
    for (k, &l) in labels.iter().enumerate() {
        let _ = k;
        let values: Vec<Option<f64>> = per_rep.iter().map(|v| v[l]).collect();
        let (mean, std, n) = mean_std(&values);
        per_label.push(LabelStat {
            label: run.label_names[l].clone(),
            mean,
            std,
            n,
        });
    }
    let label_means: Vec<Option<f64>> = per_label.iter().map(|s| s.mean).collect();
    let agg = aggregate(&label_means)?;
    let rep_means: Vec<Option<f64>> = per_rep
        .iter()
        .map(|v| aggregate(v).ok().map(|a| a.mean))
        .collect();
    let (_, rep_std, _) = mean_std(&rep_means);
    Ok(TransferStats {
        column: column.to_string(),
        per_label,
        min: agg.min,
        mean: agg.mean,
        max: agg.max,
        rep_std: rep_std.unwrap_or(0.0),
    })
}

fn active_indices(mask: &LabelMask) -> Vec<usize> {
    (0..mask.len()).filter(|&l| mask.is_active(l)).collect()
}

fn validate_run(run: &RunResult) -> Result<()> {
    if run.repetitions.is_empty() {
        return Err(Error::config("need at least one completed repetition"));
    }
    let labels = run.label_names.len();
    for rep in &run.repetitions {
        if rep.initial_on_source.len() != labels || rep.initial_on_target.len() != labels {
            return Err(Error::integrity("inconsistent label sets across results"));
        }
        for name in &run.strategy_order {
            let outcome = rep.outcome(name).ok_or_else(|| {
                Error::integrity(format!(
                    "repetition {} lacks strategy {name}",
                    rep.repetition
                ))
            })?;
            if outcome.after_on_source.len() != labels || outcome.after_on_target.len() != labels {
                return Err(Error::integrity("inconsistent label sets across results"));
            }
        }
    }
    Ok(())
}

fn fmt_cell(stat: &LabelStat) -> String {
    match (stat.mean, stat.std) {
        (Some(m), Some(s)) => format!("{m:.4}±{s:.4}"),
        _ => String::new(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn markdown_quadrant(title: &str, columns: &[ColumnStats]) -> String {
    let mut md = format!("## {title}\n\n");
    md.push_str("| Label |");
    for c in columns {
        md.push_str(&format!(" {} |", c.column));
    }
    md.push('\n');
    md.push_str("|---|");
    for _ in columns {
        md.push_str("---|");
    }
    md.push('\n');
    let num_labels = columns[0].per_label.len();
    for i in 0..num_labels {
        md.push_str(&format!("| {} |", columns[0].per_label[i].label));
        for c in columns {
            md.push_str(&format!(" {} |", fmt_cell(&c.per_label[i])));
        }
        md.push('\n');
    }
    md.push_str("| **Average** |");
    for c in columns {
        md.push_str(&format!(" {} |", fmt_opt(c.average)));
    }
    md.push_str("\n\n");
    md
}

fn markdown_transfer(title: &str, rows: &[&TransferStats]) -> String {
    let mut md = format!("## {title}\n\n");
    md.push_str("| Strategy | min | mean | max | rep std |\n|---|---|---|---|---|\n");
    for t in rows {
        md.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            t.column, t.min, t.mean, t.max, t.rep_std
        ));
    }
    md.push('\n');
    md
}

/// Builds the Markdown, JSON and CSV reports from collected results.
/// Results may arrive in any repetition order; output is canonical.
pub fn evaluate_and_report(run: &RunResult) -> Result<ReportBundle> {
    validate_run(run)?;
    let mut run = run.clone();
    run.repetitions.sort_by_key(|r| r.repetition);
    let run = &run;

    let source_labels = active_indices(&Domain::A.mask());
    let target_labels = active_indices(&Domain::B.mask());
    let shared_labels = active_indices(&data::shared_label_mask());

    // four quadrants
    let mut source_auc = vec![column_stats(run, "Initial", &source_labels, |rep| {
        Ok(&rep.initial_on_source)
    })?];
    let mut target_auc = vec![column_stats(run, "Initial", &target_labels, |rep| {
        Ok(&rep.initial_on_target)
    })?];
    for name in &run.strategy_order {
        source_auc.push(column_stats(run, name, &source_labels, |rep| {
            Ok(&rep
                .outcome(name)
                .expect("validated above")
                .after_on_source)
        })?);
        target_auc.push(column_stats(run, name, &target_labels, |rep| {
            Ok(&rep
                .outcome(name)
                .expect("validated above")
                .after_on_target)
        })?);
    }

    // transfer measures
    let mut bwt_stats = Vec::new();
    for name in &run.strategy_order {
        let values_of = |rep: &RepetitionResult| -> Result<Vec<Option<f64>>> {
            Ok(rep.outcome(name).expect("validated above").transfer.bwt.clone())
        };
        bwt_stats.push(transfer_stats(run, name, &source_labels, &values_of)?);
    }
    let fwt_of = |rep: &RepetitionResult| -> Result<Vec<Option<f64>>> {
        Ok(forward_transfer(&rep.initial_on_target))
    };
    let fwt_stats = transfer_stats(run, "initial", &shared_labels, &fwt_of)?;

    let mean_bwt_by_strategy: Vec<(String, f64)> = bwt_stats
        .iter()
        .map(|t| (t.column.clone(), t.mean))
        .collect();
    let find = |n: &str| mean_bwt_by_strategy.iter().find(|(s, _)| s == n).map(|(_, v)| *v);
    let lwf_gt_ewc = match (find("lwf"), find("ewc")) {
        (Some(l), Some(e)) => Some(l > e),
        _ => None,
    };

    // markdown
    let mut md = String::from("# Continual adaptation report\n\n");
    md.push_str(&format!("- config hash: `{}`\n", run.config_hash));
    md.push_str(&format!("- master seed: {}\n", run.master_seed));
    md.push_str(&format!("- repetitions: {}\n\n", run.repetitions.len()));
    md.push_str(
        "Cells are mean AUC ± population std across repetitions; blank cells are \
         undefined (label not evaluated or degenerate in the test split). \
         'Initial' is the source-domain model before adaptation.\n\n",
    );
    md.push_str(&markdown_quadrant("Source domain (A) test AUC", &source_auc));
    md.push_str(&markdown_quadrant("Target domain (B) test AUC", &target_auc));
    md.push_str(&markdown_transfer(
        "Backward transfer (source-domain labels)",
        &bwt_stats.iter().collect::<Vec<_>>(),
    ));
    md.push_str(&markdown_transfer(
        "Forward transfer (shared labels, initial model)",
        &[&fwt_stats],
    ));

    // transfer csv
    let mut csv_out = String::from("metric,strategy,min,mean,max,rep_std\n");
    for t in &bwt_stats {
        csv_out.push_str(&format!(
            "bwt,{},{},{},{},{}\n",
            t.column, t.min, t.mean, t.max, t.rep_std
        ));
    }
    csv_out.push_str(&format!(
        "fwt,{},{},{},{},{}\n",
        fwt_stats.column, fwt_stats.min, fwt_stats.mean, fwt_stats.max, fwt_stats.rep_std
    ));

    // json
    let json_report = ReportJson {
        schema_version: run.schema_version,
        config_hash: run.config_hash.clone(),
        master_seed: run.master_seed,
        repetitions: run.repetitions.len(),
        label_names: run.label_names.clone(),
        strategies: run.strategy_order.clone(),
        source_auc,
        target_auc,
        backward_transfer: bwt_stats,
        forward_transfer: fwt_stats,
        orderings: Orderings {
            mean_bwt_by_strategy,
            lwf_gt_ewc,
        },
    };
    let json = serde_json::to_string_pretty(&json_report)?;

    Ok(ReportBundle {
        markdown: md,
        json,
        transfer_csv: csv_out,
    })
}

pub fn write_report(dir: &Path, bundle: &ReportBundle) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.md"), &bundle.markdown)?;
    std::fs::write(dir.join("report.json"), &bundle.json)?;
    std::fs::write(dir.join("transfer.csv"), &bundle.transfer_csv)?;
    Ok(())
}
