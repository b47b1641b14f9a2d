//! Turns predictions into report rows: task metrics on the whole test split
//! plus one row per age/sex stratum.

use crate::error::{Error, Result};
use crate::event_model::Labels;
use crate::metrics::{
    argmax_predictions, auroc, binary_predictions, f1, macro_auroc_ovr, mae, mse, stratified_eval,
    EvalReport, F1Averaging, Stratum, StratumKey, StratumValue,
};
use crate::train::Predictions;

pub const ALL_STRATA: &str = "all";

/// Headline metric name per task, used for the stratified rows.
pub fn stratified_metric(preds: &Predictions) -> &'static str {
    match preds {
        Predictions::Binary(_) => "auroc",
        Predictions::Category(_) => "macro_auroc",
        Predictions::Real(_) => "mae",
    }
}

fn headline(preds: &Predictions, labels: &[Labels], idx: &[usize]) -> Result<f64> {
    match preds {
        Predictions::Binary(p) => {
            let s: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let y: Vec<u8> = idx.iter().map(|&i| labels[i].binary).collect();
            auroc(&s, &y)
        }
        Predictions::Category(p) => {
            let s: Vec<Vec<f64>> = idx.iter().map(|&i| p[i].clone()).collect();
            let y: Vec<u8> = idx.iter().map(|&i| labels[i].category).collect();
            macro_auroc_ovr(&s, &y, 3)
        }
        Predictions::Real(p) => {
            let s: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let y: Vec<f64> = idx.iter().map(|&i| labels[i].real).collect();
            mae(&s, &y)
        }
    }
}

/// Appends whole-split metrics and per-stratum headline metrics for `model`.
pub fn evaluate_predictions(
    report: &mut EvalReport,
    model: &str,
    preds: &Predictions,
    labels: &[Labels],
    keys: &[StratumKey],
) -> Result<()> {
    if preds.len() != labels.len() || labels.len() != keys.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} labels and {} strata keys",
            preds.len(),
            labels.len(),
            keys.len()
        )));
    }
    let task = preds.task().as_str();
    match preds {
        Predictions::Binary(p) => {
            let y: Vec<u8> = labels.iter().map(|l| l.binary).collect();
            report.push(task, model, "auroc", auroc(p, &y)?, ALL_STRATA);
            report.push(
                task,
                model,
                "f1",
                f1(&binary_predictions(p), &y, F1Averaging::Binary)?,
                ALL_STRATA,
            );
        }
        Predictions::Category(p) => {
            let y: Vec<u8> = labels.iter().map(|l| l.category).collect();
            report.push(
                task,
                model,
                "macro_auroc",
                macro_auroc_ovr(p, &y, 3)?,
                ALL_STRATA,
            );
            report.push(
                task,
                model,
                "macro_f1",
                f1(&argmax_predictions(p), &y, F1Averaging::Macro(3))?,
                ALL_STRATA,
            );
        }
        Predictions::Real(p) => {
            let y: Vec<f64> = labels.iter().map(|l| l.real).collect();
            report.push(task, model, "mae", mae(p, &y)?, ALL_STRATA);
            report.push(task, model, "mse", mse(p, &y)?, ALL_STRATA);
        }
    }
    let metric = stratified_metric(preds);
    for r in stratified_eval(keys, &Stratum::all(), |idx| headline(preds, labels, idx)) {
        let stratum = r.stratum.to_string();
        match r.value {
            StratumValue::Reported(v) => report.push(task, model, metric, v, &stratum),
            StratumValue::Suppressed => {
                report.push_raw(task, model, metric, "suppressed".into(), &stratum)
            }
            StratumValue::Undefined(_) => {
                report.push_raw(task, model, metric, "undefined".into(), &stratum)
            }
        }
    }
    Ok(())
}
