use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use dacbert::fusion::{train_stage2, Stage2Config};
use dacbert::nn::ModelShape;
use dacbert::pretrain::{train_stage1, write_trace, Stage1Config, TraceRow, TrainingMeta};
use dacbert::{AgreementType, ChunkDataset, Stage2Model32, SubmodelCheckpoint32};

use crate::config::{self, create, flush, out_dir, read_corpus, read_vocab};
use crate::manifest::{dir_manifest, RunManifest};
use crate::Global;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AgreementArg {
    Sv,
    Dobj,
    Pobj,
    Comp,
    All,
}

impl AgreementArg {
    pub fn expand(self) -> Vec<AgreementType> {
        match self {
            AgreementArg::Sv => vec![AgreementType::Sv],
            AgreementArg::Dobj => vec![AgreementType::Dobj],
            AgreementArg::Pobj => vec![AgreementType::Pobj],
            AgreementArg::Comp => vec![AgreementType::Comp],
            AgreementArg::All => AgreementType::ALL.to_vec(),
        }
    }
}

/// Encoder and optimizer flags shared by both pretraining stages.
#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
    /// Sequences per optimizer step.
    #[arg(long)]
    pub accumulation: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Hidden size; the feed-forward size follows as four times this.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
}

impl TrainFlags {
    fn apply_shape(&self, shape: &mut ModelShape) {
        if let Some(l) = self.layers {
            shape.layers = l;
        }
        if let Some(h) = self.hidden {
            shape.hidden_dim = h;
            shape.ffn_dim = 4 * h;
        }
        if let Some(h) = self.heads {
            shape.heads = h;
        }
    }
}

#[derive(Debug, Args)]
pub struct Stage1Args {
    #[arg(long, value_enum)]
    pub agreement: AgreementArg,
    /// A chunk JSONL file, or a directory holding `<agreement>.jsonl` files.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Output directory for `<agreement>.ckpt` and its trace.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct Stage2Args {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory holding `<agreement>.ckpt` for all four agreements.
    #[arg(long)]
    pub submodels: Option<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub freeze_submodels: bool,
    /// Train the main encoder alone, without agreement embeddings.
    #[arg(long)]
    pub no_fusion: bool,
    /// Feed masked ids to the submodels as well as the main encoder.
    #[arg(long)]
    pub mask_chunk_inputs: bool,
    /// Agreements whose scores are pinned to zero.
    #[arg(long, value_delimiter = ',')]
    pub clamp: Vec<AgreementType>,
}

fn dataset_path(data: &Path, a: AgreementType, single: bool) -> Result<PathBuf> {
    if data.is_dir() {
        return Ok(data.join(format!("{}.jsonl", a.name())));
    }
    if !single {
        bail!(
            "{}: training all agreements needs a directory of chunk files",
            data.display()
        );
    }
    Ok(data.to_path_buf())
}

fn write_trace_file(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = create(path)?;
    write_trace(&mut w, rows)?;
    flush(w, path)
}

fn metrics_row(label: &str, meta: &TrainingMeta) -> [String; 6] {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    [
        label.to_string(),
        meta.steps.to_string(),
        opt(meta.final_mlm_loss),
        opt(meta.final_mlm_accuracy),
        meta.skipped_items.to_string(),
        meta.skipped_steps.to_string(),
    ]
}

const METRICS_HEADER: [&str; 6] = [
    "model",
    "steps",
    "final_loss",
    "final_acc",
    "skipped_items",
    "skipped_steps",
];

/// Numeric failure raised after the last good parameters were saved.
fn fault_error(label: &str, meta: &TrainingMeta) -> Option<anyhow::Error> {
    meta.fault.as_ref().map(|f| {
        anyhow::Error::new(dacbert::Error::NonFinite {
            step: f.step,
            detail: f.detail.clone(),
        })
        .context(format!(
            "{label}: training stopped; parameters from step {} were saved",
            f.step.saturating_sub(1)
        ))
    })
}

pub fn stage1(g: &Global, a: Stage1Args) -> Result<()> {
    let mut cfg: Stage1Config = config::section(g, "stage1")?;
    cfg.seed = g.seed.unwrap_or(cfg.seed);
    cfg.threads = g.threads.unwrap_or(cfg.threads);
    let t = &a.train;
    cfg.total_steps = t.steps.unwrap_or(cfg.total_steps);
    cfg.micro_batch = t.micro_batch.unwrap_or(cfg.micro_batch);
    cfg.accumulation_target = t.accumulation.unwrap_or(cfg.accumulation_target);
    cfg.peak_lr = t.lr.unwrap_or(cfg.peak_lr);
    t.apply_shape(&mut cfg.model);
    cfg.validate()?;

    let agreements = a.agreement.expand();
    let mut m = RunManifest::new("pretrain-stage1", Some(cfg.seed), cfg.threads);
    m.config(&cfg)?;
    m.input("vocab", &a.vocab);
    let vocab = read_vocab(&a.vocab)?;
    let mut datasets = Vec::with_capacity(agreements.len());
    for &ag in &agreements {
        let path = dataset_path(&a.data, ag, agreements.len() == 1)?;
        let d = ChunkDataset::read_jsonl(config::open(&path)?, Some(ag))
            .with_context(|| format!("reading {}", path.display()))?;
        m.input(&format!("data.{}", ag.name()), &path);
        datasets.push(d);
    }

    let dir = out_dir(&a.out)?;
    let mut metrics = Vec::new();
    let mut fault = None;
    for d in &datasets {
        let name = d.agreement.name();
        let outcome = train_stage1::<f32>(d, &vocab, &cfg).with_context(|| format!("training {name}"))?;
        let ckpt = dir.join(format!("{name}.ckpt"));
        outcome.checkpoint.save(&ckpt)?;
        let trace = dir.join(format!("{name}_trace.csv"));
        write_trace_file(&trace, &outcome.trace)?;
        let meta = &outcome.checkpoint.meta;
        eprintln!(
            "stage1 {name}: {} step(s), final acc {}",
            meta.steps,
            meta.final_mlm_accuracy.map_or("n/a".into(), |x| format!("{x:.4}"))
        );
        metrics.push(metrics_row(name, meta));
        m.output(ckpt);
        m.output(trace);
        if let Some(e) = fault_error(name, meta) {
            fault = Some(e);
            break;
        }
    }
    let path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(METRICS_HEADER)?;
    for row in &metrics {
        w.write_record(row)?;
    }
    flush(w.into_inner()?, &path)?;
    m.output(path);
    m.finish(&dir_manifest(&dir))?;
    fault.map_or(Ok(()), Err)
}

pub fn stage2(g: &Global, a: Stage2Args) -> Result<()> {
    let mut cfg: Stage2Config = config::section(g, "stage2")?;
    cfg.seed = g.seed.unwrap_or(cfg.seed);
    cfg.threads = g.threads.unwrap_or(cfg.threads);
    let t = &a.train;
    cfg.total_steps = t.steps.unwrap_or(cfg.total_steps);
    cfg.micro_batch = t.micro_batch.unwrap_or(cfg.micro_batch);
    cfg.accumulation_target = t.accumulation.unwrap_or(cfg.accumulation_target);
    cfg.peak_lr = t.lr.unwrap_or(cfg.peak_lr);
    t.apply_shape(&mut cfg.main);
    cfg.max_seq_len = a.max_seq_len.unwrap_or(cfg.max_seq_len);
    cfg.use_fusion &= !a.no_fusion;
    cfg.fusion.freeze_submodels |= a.freeze_submodels;
    cfg.fusion.mask_chunk_inputs |= a.mask_chunk_inputs;
    for &c in &a.clamp {
        if !cfg.fusion.clamped.contains(&c) {
            cfg.fusion.clamped.push(c);
        }
    }
    cfg.validate()?;

    let mut m = RunManifest::new("pretrain-stage2", Some(cfg.seed), cfg.threads);
    m.config(&cfg)?;
    m.input("corpus", &a.corpus);
    m.input("vocab", &a.vocab);
    let vocab = read_vocab(&a.vocab)?;
    let corpus = read_corpus(&a.corpus, g.strict)?;
    let mut subs = Vec::new();
    if cfg.use_fusion {
        let Some(dir) = &a.submodels else {
            bail!("--submodels is required unless --no-fusion is given");
        };
        m.input("submodels", dir);
        for ag in AgreementType::ALL {
            let path = dir.join(format!("{}.ckpt", ag.name()));
            let ckpt = SubmodelCheckpoint32::load(&path).with_context(|| format!("loading {}", path.display()))?;
            if ckpt.agreement != ag {
                bail!(
                    "{}: holds the {} submodel, expected {ag}",
                    path.display(),
                    ckpt.agreement
                );
            }
            subs.push(ckpt);
        }
    }

    let outcome = train_stage2::<f32>(&corpus, &subs, &vocab, &cfg)?;
    let dir = out_dir(&a.out)?;
    let ckpt = dir.join("model.ckpt");
    outcome.model.save(&ckpt, &outcome.meta)?;
    let trace = dir.join("trace.csv");
    write_trace_file(&trace, &outcome.trace)?;
    let path = dir.join("metrics.csv");
    write_stage2_metrics(&path, &outcome.model, &outcome.meta)?;
    eprintln!(
        "stage2: {} step(s), final acc {}",
        outcome.meta.steps,
        outcome
            .meta
            .final_mlm_accuracy
            .map_or("n/a".into(), |x| format!("{x:.4}"))
    );
    m.output(ckpt);
    m.output(trace);
    m.output(path);
    m.finish(&dir_manifest(&dir))?;
    fault_error("stage2", &outcome.meta).map_or(Ok(()), Err)
}

fn write_stage2_metrics(path: &Path, model: &Stage2Model32, meta: &TrainingMeta) -> Result<()> {
    let mut header: Vec<String> = METRICS_HEADER.iter().map(|s| s.to_string()).collect();
    let mut row = metrics_row("stage2", meta).to_vec();
    if let Some(scores) = model.scores() {
        for (ag, s) in AgreementType::ALL.iter().zip(scores) {
            header.push(format!("score_{}", ag.name()));
            row.push(s.to_string());
        }
    }
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(&header)?;
    w.write_record(&row)?;
    flush(w.into_inner()?, path)
}
