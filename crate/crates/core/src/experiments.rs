//! Ablation and annotation-ratio harnesses.

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::data::DomainDatasets;
use crate::eval::{evaluate_model, MetricsRow};
use crate::trainer::{train, TrainOutcome};
use crate::{DomainId, Result};

/// Trains one configuration and scores its selected model on the test split.
pub fn run_method(cfg: &ExperimentConfig, ds: &DomainDatasets) -> Result<(TrainOutcome, MetricsRow)> {
    let outcome = train(cfg, ds)?;
    let row = evaluate_model(cfg.method.name(), &outcome.best, &ds.test, DomainId::Target, ds.spacing)?;
    Ok((outcome, row))
}

/// One row per ablation method, in table order, all with `base`'s seed and
/// architecture.
pub fn run_ablation(base: &ExperimentConfig, ds: &DomainDatasets) -> Result<Vec<MetricsRow>> {
    Method::ABLATION
        .iter()
        .map(|&method| {
            let cfg = ExperimentConfig {
                method,
                ..base.clone()
            };
            Ok(run_method(&cfg, ds)?.1)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    /// Labeled fraction of the target training pool; 1 for the upper bound.
    pub ratio: f64,
    pub labeled: usize,
    pub dice_mean: f64,
    pub dice_sd: f64,
    /// Fully supervised reference trained on every target label.
    pub upper_bound: bool,
    pub test_set_hash: String,
}

impl SweepRow {
    fn new(method: Method, ratio: f64, labeled: usize, row: &MetricsRow, upper_bound: bool) -> Self {
        Self {
            method: method.name().to_string(),
            ratio,
            labeled,
            dice_mean: row.mean.dice_pct.mean,
            dice_sd: row.mean.dice_pct.sd,
            upper_bound,
            test_set_hash: row.test_set_hash.clone(),
        }
    }
}

/// Trains every method at every ratio, then a `baseline_target` upper bound
/// on the fully labeled target pool. The split at each ratio depends only on
/// `base.seed`.
pub fn run_ratio_sweep(
    base: &ExperimentConfig,
    ds: &DomainDatasets,
    ratios: &[f64],
    methods: &[Method],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(ratios.len() * methods.len() + 1);
    // Partition everything up front so a bad ratio fails before any training.
    let splits = ratios
        .iter()
        .map(|&r| ds.with_annotation_ratio(r, base.seed))
        .collect::<Result<Vec<_>>>()?;
    for (&ratio, split) in ratios.iter().zip(&splits) {
        for &method in methods {
            let cfg = ExperimentConfig {
                method,
                ..base.clone()
            };
            let (_, row) = run_method(&cfg, split)?;
            rows.push(SweepRow::new(method, ratio, split.target_labeled.len(), &row, false));
        }
    }
    let full = ds.with_annotation_ratio(1.0, base.seed)?;
    let cfg = ExperimentConfig {
        method: Method::BaselineTarget,
        ..base.clone()
    };
    let (_, row) = run_method(&cfg, &full)?;
    rows.push(SweepRow::new(Method::BaselineTarget, 1.0, full.target_labeled.len(), &row, true));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_domains, SplitCounts};
    use crate::model::Architecture;
    use crate::Error;

    fn tiny() -> (ExperimentConfig, DomainDatasets) {
        let mut cfg = ExperimentConfig::desk(Method::CsCada);
        cfg.model = Architecture::new(vec![2, 4], 3);
        cfg.train.k_max = 2;
        cfg.train.validate_every = 0;
        cfg.data.size = Some(16);
        cfg.data.counts = Some(SplitCounts {
            source_labeled: 4,
            target_labeled: 2,
            target_unlabeled: 6,
            validation: 2,
            test: 3,
        });
        let ds = generate_synthetic_domains(&cfg.data.synthetic_spec()).unwrap();
        (cfg, ds)
    }

    #[test]
    fn ablation_rows_follow_table_order_on_one_test_set() {
        let (cfg, ds) = tiny();
        let rows = run_ablation(&cfg, &ds).unwrap();
        let names: Vec<_> = rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(names, ["baseline_target", "semt_only", "dsbn_only", "ss_cada", "cs_cada"]);
        assert!(rows.iter().all(|r| r.test_set_hash == ds.test_set_hash() && r.cases == 3));
    }

    #[test]
    fn sweep_row_count_and_upper_bound() {
        let (cfg, ds) = tiny();
        let rows = run_ratio_sweep(&cfg, &ds, &[0.25, 0.5], &[Method::BaselineTarget, Method::CsCada]).unwrap();
        assert_eq!(rows.len(), 2 * 2 + 1);
        let last = rows.last().unwrap();
        assert!(last.upper_bound && last.labeled == 8 && last.ratio == 1.0);
        assert_eq!(rows[0].labeled, 2);
        assert_eq!(rows[2].labeled, 4);
    }

    #[test]
    fn ratio_one_baseline_equals_upper_bound() {
        let (cfg, ds) = tiny();
        let rows = run_ratio_sweep(&cfg, &ds, &[1.0], &[Method::BaselineTarget]).unwrap();
        assert_eq!(rows[0].dice_mean, rows[1].dice_mean);
    }

    #[test]
    fn zero_label_ratio_fails_before_training() {
        let (cfg, ds) = tiny();
        let err = run_ratio_sweep(&cfg, &ds, &[0.5, 0.01], &[Method::CsCada]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
