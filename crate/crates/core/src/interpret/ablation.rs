use std::io::Write;

use serde::{Deserialize, Serialize};

use super::finetune::{finetune, FinetuneConfig};
use super::task::LabeledExample;
use crate::chunker::AgreementType;
use crate::error::Result;
use crate::fusion::Stage2Model;
use crate::tokenizer::Vocabulary;
use crate::Scalar;

/// Share of the baseline accuracy kept after an ablation, in percent.
/// A zero baseline counts as fully kept.
pub fn remaining_pct(baseline: f64, ablated: f64) -> f64 {
    if baseline == 0.0 {
        100.0
    } else {
        100.0 * ablated / baseline
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub task: String,
    pub agreement: AgreementType,
    pub seed: u64,
    pub baseline_acc: f64,
    pub ablated_acc: f64,
    pub remaining_pct: f64,
}

/// Mean over seeds for one (task, agreement) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationMean {
    pub task: String,
    pub agreement: AgreementType,
    pub baseline_acc: f64,
    pub ablated_acc: f64,
    pub remaining_pct: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Per (task, agreement) means in first-seen order.
    pub fn means(&self) -> Vec<AblationMean> {
        let mut keys: Vec<(String, AgreementType)> = Vec::new();
        for r in &self.rows {
            let k = (r.task.clone(), r.agreement);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(task, agreement)| {
                let rows: Vec<&AblationRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.task == task && r.agreement == agreement)
                    .collect();
                let n = rows.len() as f64;
                let mean = |f: fn(&AblationRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
                AblationMean {
                    task,
                    agreement,
                    baseline_acc: mean(|r| r.baseline_acc),
                    ablated_acc: mean(|r| r.ablated_acc),
                    remaining_pct: mean(|r| r.remaining_pct),
                }
            })
            .collect()
    }

    /// Agreement with the lowest remaining percentage for one task and seed;
    /// ties go to the earlier agreement.
    pub fn largest_drop(&self, task: &str, seed: u64) -> Option<AgreementType> {
        self.rows
            .iter()
            .filter(|r| r.task == task && r.seed == seed)
            .fold(None::<&AblationRow>, |best, r| match best {
                Some(b) if b.remaining_pct <= r.remaining_pct => Some(b),
                _ => Some(r),
            })
            .map(|r| r.agreement)
    }

    /// CSV with one row per seed followed by `mean` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "task",
            "agreement",
            "seed",
            "baseline_acc",
            "ablated_acc",
            "remaining_pct",
        ])?;
        for r in &self.rows {
            out.write_record([
                r.task.clone(),
                r.agreement.name().to_string(),
                r.seed.to_string(),
                r.baseline_acc.to_string(),
                r.ablated_acc.to_string(),
                r.remaining_pct.to_string(),
            ])?;
        }
        for m in self.means() {
            out.write_record([
                m.task,
                m.agreement.name().to_string(),
                "mean".to_string(),
                m.baseline_acc.to_string(),
                m.ablated_acc.to_string(),
                m.remaining_pct.to_string(),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Finetunes with `agreement` clamped for the whole run and compares the
/// dev accuracy with `baseline_acc` from an unablated run of the same
/// configuration.
pub fn ablate<T: Scalar>(
    model: &Stage2Model<T>,
    agreement: AgreementType,
    vocab: &Vocabulary,
    train: &[LabeledExample],
    dev: &[LabeledExample],
    cfg: &FinetuneConfig,
    baseline_acc: f64,
) -> Result<AblationRow> {
    let mut ablated = model.clone();
    ablated.clamp(&[agreement])?;
    let acc = finetune(&ablated, vocab, train, dev, cfg)?.dev_accuracy;
    Ok(AblationRow {
        task: String::new(),
        agreement,
        seed: cfg.seed,
        baseline_acc,
        ablated_acc: acc,
        remaining_pct: remaining_pct(baseline_acc, acc),
    })
}

/// Baseline plus all four single-agreement ablations for every seed.
pub fn ablation_study<T: Scalar>(
    model: &Stage2Model<T>,
    task: &str,
    vocab: &Vocabulary,
    train: &[LabeledExample],
    dev: &[LabeledExample],
    cfg: &FinetuneConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    for &seed in seeds {
        let cfg = FinetuneConfig { seed, ..cfg.clone() };
        let baseline = finetune(model, vocab, train, dev, &cfg)?.dev_accuracy;
        for a in AgreementType::ALL {
            let mut row = ablate(model, a, vocab, train, dev, &cfg, baseline)?;
            row.task = task.to_string();
            report.rows.push(row);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(a: AgreementType, seed: u64, remaining: f64) -> AblationRow {
        AblationRow {
            task: "t".into(),
            agreement: a,
            seed,
            baseline_acc: 0.8,
            ablated_acc: 0.8 * remaining / 100.0,
            remaining_pct: remaining,
        }
    }

    #[test]
    fn remaining_percentage() {
        assert_eq!(remaining_pct(0.8, 0.4), 50.0);
        assert_eq!(remaining_pct(0.0, 0.3), 100.0);
        assert_eq!(remaining_pct(0.5, 0.5), 100.0);
    }

    #[test]
    fn means_and_largest_drop() {
        let report = AblationReport {
            rows: vec![
                row(AgreementType::Sv, 0, 60.0),
                row(AgreementType::Dobj, 0, 90.0),
                row(AgreementType::Sv, 1, 80.0),
                row(AgreementType::Dobj, 1, 70.0),
            ],
        };
        let m = report.means();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].remaining_pct, 70.0);
        assert_eq!(report.largest_drop("t", 0), Some(AgreementType::Sv));
        assert_eq!(report.largest_drop("t", 1), Some(AgreementType::Dobj));
        assert_eq!(report.largest_drop("t", 9), None);
    }

    #[test]
    fn csv_has_seed_and_mean_rows() {
        let report = AblationReport {
            rows: vec![row(AgreementType::Pobj, 3, 50.0)],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "task,agreement,seed,baseline_acc,ablated_acc,remaining_pct");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("t,pobj,3,"));
        assert!(lines[2].starts_with("t,pobj,mean,"));
    }
}
