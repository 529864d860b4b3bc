//! Run reports: JSON records, an aligned text table and a per-step trace.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;

pub const SCHEMA_VERSION: &str = "1";
pub const REFERENCE_LABEL: &str = "published reference values (reported, not reproduced)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum CellStatus {
    Completed,
    Failed { code: i32, message: String },
}

/// One (strategy, target epsilon) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub strategy: String,
    pub strategy_label: String,
    pub target_epsilon: f64,
    pub status: CellStatus,
    /// Test accuracy of the EMA weights.
    pub accuracy_ema: Option<f64>,
    pub accuracy_raw: Option<f64>,
    /// `None` when the accountant was bypassed.
    pub realized_epsilon: Option<f64>,
    pub best_alpha: Option<f64>,
    pub noise_multiplier: Option<f64>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub steps: u64,
    pub sampling_rate: f64,
    pub seed: u64,
    pub private: bool,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub dataset: String,
    pub strategy_label: String,
    pub epsilons: Vec<f64>,
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub label: String,
    pub setting: String,
    pub rows: Vec<ReferenceRow>,
}

impl ReferenceValues {
    /// Top-1 accuracy (%) of DP fine-tuning an ImageNet-pretrained
    /// Wide-ResNet-28-10 on CIFAR-10 / CIFAR-100, delta = 1e-5.
    pub fn published() -> Self {
        let eps = vec![1.0, 2.0, 4.0, 8.0];
        let row = |dataset: &str, label: &str, acc: [f64; 4]| ReferenceRow {
            dataset: dataset.into(),
            strategy_label: label.into(),
            epsilons: eps.clone(),
            accuracy: acc.to_vec(),
        };
        Self {
            label: REFERENCE_LABEL.into(),
            setting: "Wide-ResNet-28-10 pretrained on ImageNet, top-1 accuracy (%), delta=1e-5".into(),
            rows: vec![
                row("CIFAR-10", "Whole-Model", [94.7, 95.4, 96.1, 96.7]),
                row("CIFAR-10", "Last-Layer", [93.1, 93.6, 94.0, 94.2]),
                row("CIFAR-10", "First-Last-Layers", [95.0, 95.6, 96.1, 96.4]),
                row("CIFAR-100", "Whole-Model", [70.3, 74.7, 79.2, 81.8]),
                row("CIFAR-100", "Last-Layer", [70.3, 73.9, 76.1, 77.6]),
                row("CIFAR-100", "First-Last-Layers", [73.7, 77.9, 81.0, 82.1]),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub epochs: usize,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub holdout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: String,
    pub dataset: String,
    pub base_seed: u64,
    pub delta: f64,
    pub clip_norm: f64,
    pub learning_rate: f64,
    pub expected_batch_size: f64,
    pub augment_multiplicity: usize,
    pub ema_decay: f64,
    pub private_examples: usize,
    pub test_examples: usize,
    pub pretrain: Option<PretrainSummary>,
    pub records: Vec<CellRecord>,
    pub reference: ReferenceValues,
}

impl RunReport {
    /// Copy with every wall-time field set to zero.
    pub fn without_timing(&self) -> RunReport {
        let mut r = self.clone();
        for rec in &mut r.records {
            rec.wall_time_secs = 0.0;
        }
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::Report(format!(
                "unsupported schema version `{}`",
                self.schema_version
            )));
        }
        for r in &self.records {
            if let (Some(real), true) = (r.realized_epsilon, r.private) {
                if real > r.target_epsilon {
                    return Err(HarnessError::Report(format!(
                        "{} at epsilon={}: realized epsilon {real} exceeds the target",
                        r.strategy, r.target_epsilon
                    )));
                }
            }
        }
        Ok(())
    }

    /// Failure code of the first failed cell, if any.
    pub fn first_failure(&self) -> Option<i32> {
        self.records.iter().find_map(|r| match r.status {
            CellStatus::Failed { code, .. } => Some(code),
            CellStatus::Completed => None,
        })
    }

    /// Strategies as rows, target epsilons as columns.
    pub fn table(&self) -> String {
        let mut strategies: Vec<(&str, &str)> = Vec::new();
        let mut epsilons: Vec<f64> = Vec::new();
        for r in &self.records {
            if !strategies.iter().any(|(s, _)| *s == r.strategy) {
                strategies.push((&r.strategy, &r.strategy_label));
            }
            if !epsilons.contains(&r.target_epsilon) {
                epsilons.push(r.target_epsilon);
            }
        }
        let cell = |s: &str, e: f64| {
            self.records
                .iter()
                .find(|r| r.strategy == s && r.target_epsilon == e)
        };
        let width = 14;
        let mut out = String::new();
        let _ = writeln!(out, "Top-1 test accuracy (%) of EMA weights on {}", self.dataset);
        let _ = writeln!(
            out,
            "delta={:e}  C={}  lr={}  B={}  K={}  seed={}",
            self.delta, self.clip_norm, self.learning_rate, self.expected_batch_size, self.augment_multiplicity, self.base_seed
        );
        out.push('\n');
        let _ = write!(out, "{:<22}{:>10}", "strategy", "d");
        for e in &epsilons {
            let _ = write!(out, "{:>width$}", format!("eps={e}"));
        }
        out.push('\n');
        for (s, label) in &strategies {
            let d = cell(s, epsilons[0]).map_or(0, |r| r.trainable_params);
            let _ = write!(out, "{label:<22}{d:>10}");
            for &e in &epsilons {
                let text = match cell(s, e) {
                    Some(r) => match (&r.status, r.accuracy_ema) {
                        (CellStatus::Completed, Some(a)) if r.private => format!("{:.1}", 100.0 * a),
                        (CellStatus::Completed, Some(a)) => format!("{:.1} NON-PRIVATE", 100.0 * a),
                        (CellStatus::Failed { code, .. }, _) => format!("FAILED({code})"),
                        _ => "-".into(),
                    },
                    None => "-".into(),
                };
                let _ = write!(out, "{text:>width$}");
            }
            out.push('\n');
        }
        out.push('\n');
        let _ = writeln!(out, "{:<22}{:>10}", "noise multiplier", "");
        for (s, label) in &strategies {
            let _ = write!(out, "{label:<22}{:>10}", "");
            for &e in &epsilons {
                let text = cell(s, e)
                    .and_then(|r| r.noise_multiplier)
                    .map_or("-".into(), |z| format!("{z:.4}"));
                let _ = write!(out, "{text:>width$}");
            }
            out.push('\n');
        }
        out.push('\n');
        let _ = writeln!(out, "{:<22}{:>10}", "realized epsilon", "");
        for (s, label) in &strategies {
            let _ = write!(out, "{label:<22}{:>10}", "");
            for &e in &epsilons {
                let text = match cell(s, e) {
                    Some(r) if !r.private => "not accounted".into(),
                    Some(r) => r.realized_epsilon.map_or("-".into(), |x| format!("{x:.4}")),
                    None => "-".into(),
                };
                let _ = write!(out, "{text:>width$}");
            }
            out.push('\n');
        }
        for r in &self.records {
            if let CellStatus::Failed { message, .. } = &r.status {
                let _ = writeln!(out, "\nfailed: {} eps={}: {message}", r.strategy, r.target_epsilon);
            }
        }

        let refs = &self.reference;
        let _ = writeln!(out, "\n{} ({})", refs.label, refs.setting);
        let mut dataset = "";
        for row in &refs.rows {
            if row.dataset != dataset {
                dataset = &row.dataset;
                let _ = write!(out, "{dataset:<22}{:>10}", "");
                for e in &row.epsilons {
                    let _ = write!(out, "{:>width$}", format!("eps={e}"));
                }
                out.push('\n');
            }
            let _ = write!(out, "  {:<20}{:>10}", row.strategy_label, "");
            for a in &row.accuracy {
                let _ = write!(out, "{:>width$}", format!("{a:.1}"));
            }
            out.push('\n');
        }
        out
    }
}

/// One private step of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub strategy: String,
    pub target_epsilon: f64,
    pub step: u64,
    pub epsilon_spent: f64,
    pub train_loss: f64,
}

pub fn trace_csv(trace: &[TracePoint]) -> String {
    let mut out = String::from("strategy,target_epsilon,step,epsilon_spent,train_loss\n");
    for p in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.strategy, p.target_epsilon, p.step, p.epsilon_spent, p.train_loss
        );
    }
    out
}

pub fn parse_report(json: &str) -> Result<RunReport, HarnessError> {
    let report: RunReport =
        serde_json::from_str(json).map_err(|e| HarnessError::Report(format!("malformed report: {e}")))?;
    report.validate()?;
    Ok(report)
}

/// Paths written by [`report_emit`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedFiles {
    pub json: PathBuf,
    pub table: PathBuf,
    pub trace: PathBuf,
}

/// Write `report.json`, `report.txt` and `trace.csv` into `dir`.
pub fn report_emit(report: &RunReport, trace: &[TracePoint], dir: &Path) -> Result<EmittedFiles, HarnessError> {
    report.validate()?;
    let io = |path: &Path, e: std::io::Error| HarnessError::Io {
        path: path.display().to_string(),
        source: e,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let files = EmittedFiles {
        json: dir.join("report.json"),
        table: dir.join("report.txt"),
        trace: dir.join("trace.csv"),
    };
    std::fs::write(&files.json, report.to_json() + "\n").map_err(|e| io(&files.json, e))?;
    std::fs::write(&files.table, report.table()).map_err(|e| io(&files.table, e))?;
    std::fs::write(&files.trace, trace_csv(trace)).map_err(|e| io(&files.trace, e))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> RunReport {
        let rec = |strategy: &str, eps: f64, status: CellStatus| CellRecord {
            strategy: strategy.into(),
            strategy_label: strategy.to_uppercase(),
            target_epsilon: eps,
            accuracy_ema: matches!(status, CellStatus::Completed).then_some(0.1 + 1.0 / 3.0),
            accuracy_raw: Some(0.25),
            realized_epsilon: Some(eps * (1.0 - 1e-4)),
            best_alpha: Some(7.5),
            noise_multiplier: Some(1.234_567_890_123),
            trainable_params: 410,
            total_params: 9674,
            steps: 10,
            sampling_rate: 0.05,
            seed: u64::MAX - 3,
            private: true,
            wall_time_secs: 0.5,
            status,
        };
        RunReport {
            schema_version: SCHEMA_VERSION.into(),
            dataset: "synthetic".into(),
            base_seed: 7,
            delta: 1e-5,
            clip_norm: 1.0,
            learning_rate: 0.5,
            expected_batch_size: 64.0,
            augment_multiplicity: 2,
            ema_decay: 0.999,
            private_examples: 1280,
            test_examples: 300,
            pretrain: None,
            records: vec![
                rec("whole", 1.0, CellStatus::Completed),
                rec(
                    "last",
                    1.0,
                    CellStatus::Failed {
                        code: 3,
                        message: "infeasible".into(),
                    },
                ),
            ],
            reference: ReferenceValues::published(),
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let r = sample();
        let back = parse_report(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_json().contains("\"schema_version\": \"1\""));
    }

    #[test]
    fn table_lists_strategies_as_rows() {
        let t = sample().table();
        assert!(t.contains("eps=1"));
        assert!(t.contains("WHOLE"));
        assert!(t.contains("FAILED(3)"));
        assert!(t.contains(REFERENCE_LABEL));
        assert!(t.contains("77.9"));
    }

    #[test]
    fn overspent_budget_is_rejected() {
        let mut r = sample();
        r.records[0].realized_epsilon = Some(1.01);
        assert!(matches!(r.validate(), Err(HarnessError::Report(_))));
        r.records[0].private = false;
        r.validate().unwrap();
    }

    #[test]
    fn unwritable_directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain-file");
        std::fs::write(&file, b"x").unwrap();
        let err = report_emit(&sample(), &[], &file.join("sub")).unwrap_err();
        assert!(matches!(err, HarnessError::Io { .. }));
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let json = sample().to_json().replace("\"schema_version\": \"1\"", "\"schema_version\": \"2\"");
        assert!(parse_report(&json).is_err());
    }
}
