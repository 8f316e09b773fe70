//! Downstream finetuning, agreement ablation, and attention attribution.

mod ablation;
mod attribution;
mod finetune;
mod task;

pub use ablation::{ablate, ablation_study, remaining_pct, AblationMean, AblationReport, AblationRow};
pub use attribution::{
    attention_attribution, max_normalize, raw_attribution, render_html, write_attribution_csv, AttributionReport,
    ATTRIBUTION_LABEL,
};
pub use finetune::{encode_examples, finetune, Classifier, FinetuneConfig, FinetuneOutcome, FinetuneRow, CLASSIFIER};
pub use task::{implied_classes, load_task, read_task_tsv, LabeledExample};
