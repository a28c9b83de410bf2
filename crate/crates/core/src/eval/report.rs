//! Files written by training and ablation runs.
//!
//! Everything here is a pure function of the results, so repeated runs with
//! the same seeds produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::experiment::RunResult;
use super::{mean_std, MetricsReport};
use crate::config::{ExperimentConfig, Method};
use crate::cost::CostKind;
use crate::error::Result;
use crate::model::save_checkpoint;
use crate::reweight::{save_weight_net, QMode, WeightMode};

fn metrics_header(k: usize) -> String {
    let mut h = String::from(
        "seed,method,stage1_top1_error,stage1_balanced_accuracy,stage1_min_recall,top1_error,balanced_accuracy,min_recall",
    );
    for c in 0..k {
        write!(h, ",acc_{c}").unwrap();
    }
    h.push_str(",sinkhorn_unconverged,fingerprint\n");
    h
}

fn metrics_row(label: &str, run: &RunResult) -> String {
    let (s1, s2) = (&run.stage1, &run.stage2);
    let mut row = format!(
        "{},{label},{},{},{},{},{},{}",
        run.seed,
        s1.top1_error,
        s1.balanced_accuracy,
        s1.min_recall(),
        s2.top1_error,
        s2.balanced_accuracy,
        s2.min_recall()
    );
    for a in &s2.per_class_accuracy {
        write!(row, ",{a}").unwrap();
    }
    writeln!(row, ",{},{}", run.sinkhorn_unconverged, s2.fingerprint).unwrap();
    row
}

/// Weight dump: `example_index,class,weight`.
pub fn weights_csv(labels: &[usize], weights: &[f64]) -> String {
    let mut out = String::from("example_index,class,weight\n");
    for (i, (y, w)) in labels.iter().zip(weights).enumerate() {
        writeln!(out, "{i},{y},{w}").unwrap();
    }
    out
}

/// Single-row metrics CSV for a stand-alone evaluation.
pub fn eval_csv(report: &MetricsReport) -> String {
    let mut out = String::from("seed,top1_error,balanced_accuracy,min_recall");
    for c in 0..report.per_class_accuracy.len() {
        write!(out, ",acc_{c}").unwrap();
    }
    write!(
        out,
        "\n{},{},{},{}",
        report.seed,
        report.top1_error,
        report.balanced_accuracy,
        report.min_recall()
    )
    .unwrap();
    for a in &report.per_class_accuracy {
        write!(out, ",{a}").unwrap();
    }
    out.push('\n');
    out
}

fn pm(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s)
}

fn summary_line(label: &str, runs: &[RunResult]) -> String {
    let pick = |f: &dyn Fn(&RunResult) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    format!(
        "| {label} | {} | {} | {} | {} | {} |\n",
        pm(&pick(&|r| r.stage1.balanced_accuracy)),
        pm(&pick(&|r| r.stage2.balanced_accuracy)),
        pm(&pick(&|r| r.stage2.top1_error)),
        pm(&pick(&|r| r.stage2.min_recall())),
        runs.len()
    )
}

const SUMMARY_HEADER: &str = "| run | stage-1 balanced acc. (%) | balanced acc. (%) | top-1 error (%) | min recall (%) | seeds |\n|---|---|---|---|---|---|\n";

/// Writes `config.txt`, `metrics.csv`, `report.md` and per-seed model
/// checkpoints and weight dumps under `out`.
pub fn write_run_outputs(cfg: &ExperimentConfig, runs: &[RunResult], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_kv())?;
    let k = runs.first().map_or(0, |r| r.class_counts.len());
    let label = cfg.cell_label();
    let mut csv = metrics_header(k);
    for run in runs {
        csv.push_str(&metrics_row(&label, run));
    }
    fs::write(out.join("metrics.csv"), csv)?;

    let mut md = format!("# Results: {label}\n\nMean ± sample std over seeds; config fingerprint `{}`.\n\n", cfg.fingerprint());
    md.push_str(SUMMARY_HEADER);
    md.push_str(&summary_line(&label, runs));
    if cfg.method.is_ot() {
        md.push_str("\n## Final class-mean weights\n\n| seed | largest class | smallest class | smallest >= largest |\n|---|---|---|---|\n");
        for run in runs {
            let means = run.class_mean_weights();
            writeln!(
                md,
                "| {} | {:.3e} | {:.3e} | {} |",
                run.seed,
                means.first().copied().unwrap_or(0.0),
                means.last().copied().unwrap_or(0.0),
                run.tail_weight_dominates()
            )
            .unwrap();
        }
    }
    fs::write(out.join("report.md"), md)?;

    for run in runs {
        let dir = out.join(format!("seed_{}", run.seed));
        fs::create_dir_all(&dir)?;
        save_checkpoint(&run.model, &dir.join("model.csv"))?;
        if let Some(net) = &run.weight_net {
            save_weight_net(net, &dir.join("weightnet.csv"))?;
        }
        fs::write(dir.join("weights_final.csv"), weights_csv(&run.train_labels, &run.final_weights))?;
        for (e, w) in run.epoch_weights.iter().enumerate() {
            fs::write(dir.join(format!("weights_epoch_{e}.csv")), weights_csv(&run.train_labels, w))?;
        }
    }
    Ok(())
}

/// Writes the ablation `report.md` (cost kind × meta mode grid plus every
/// cell), `cells.csv` (one row per cell and seed) and `config.txt`.
///
/// `toy_gap` is the maintained-vs-scratch weight difference on the toy
/// batch, reported when given.
pub fn write_ablation_outputs(
    base: &ExperimentConfig,
    cells: &[(ExperimentConfig, Vec<RunResult>)],
    toy_gap: Option<f64>,
    out: &Path,
) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), base.to_kv())?;
    let k = cells
        .first()
        .and_then(|(_, r)| r.first())
        .map_or(0, |r| r.class_counts.len());
    let mut csv = metrics_header(k);
    for (cfg, runs) in cells {
        let label = cfg.cell_label();
        for run in runs {
            csv.push_str(&metrics_row(&label, run));
        }
    }
    fs::write(out.join("cells.csv"), csv)?;

    let mut md = String::from("# Ablation\n\nBalanced test accuracy (%) after stage 2, mean ± sample std over seeds, maintained weights.\n\n| cost \\ Q |");
    for q in QMode::ALL {
        write!(md, " {q} |").unwrap();
    }
    md.push_str("\n|---|---|---|---|\n");
    for kind in CostKind::ALL {
        write!(md, "| {kind} |").unwrap();
        for q in QMode::ALL {
            let cell = cells.iter().find(|(c, _)| {
                c.method == Method::OtDirect && c.cost.kind == kind && c.q_mode == q && c.weights_mode == WeightMode::Maintained
            });
            match cell {
                Some((_, runs)) => {
                    let acc: Vec<f64> = runs.iter().map(|r| r.stage2.balanced_accuracy).collect();
                    write!(md, " {} |", pm(&acc)).unwrap();
                }
                None => md.push_str(" - |"),
            }
        }
        md.push('\n');
    }
    md.push_str("\n## All cells\n\n");
    md.push_str(SUMMARY_HEADER);
    for (cfg, runs) in cells {
        md.push_str(&summary_line(&cfg.cell_label(), runs));
    }
    if let Some(gap) = toy_gap {
        writeln!(md, "\nToy batch under the label cost, maintained vs scratch weights after convergence: max difference {gap:.3e}.").unwrap();
    }
    fs::write(out.join("report.md"), md)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::confusion_and_metrics;

    #[test]
    fn weights_dump_format() {
        assert_eq!(weights_csv(&[0, 1], &[0.25, 0.75]), "example_index,class,weight\n0,0,0.25\n1,1,0.75\n");
    }

    #[test]
    fn eval_csv_format() {
        let mut m = confusion_and_metrics(&[0, 0], &[0, 1], 2).unwrap();
        m.seed = 3;
        assert_eq!(eval_csv(&m), "seed,top1_error,balanced_accuracy,min_recall,acc_0,acc_1\n3,0.5,0.5,0,1,0\n");
    }

    #[test]
    fn header_lists_classes() {
        assert!(metrics_header(2).contains(",acc_0,acc_1,sinkhorn_unconverged,fingerprint\n"));
    }
}
