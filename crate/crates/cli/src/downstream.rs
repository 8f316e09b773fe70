use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use dacbert::fusion::mlm_eval_stage2;
use dacbert::interpret::{
    ablate as ablate_one, attention_attribution, encode_examples, finetune as run_finetune, load_task, render_html,
    write_attribution_csv, AblationReport, FinetuneConfig, LabeledExample,
};
use dacbert::nn::MaskedLoss;
use dacbert::pretrain::{mlm_eval, TrainingMeta};
use dacbert::{AgreementType, ChunkDataset, Classifier32, SpanMode, Stage2Model32, SubmodelCheckpoint32};
use serde::{Deserialize, Serialize};

use crate::config::{self, create, flush, out_dir, parent_dir, read_corpus, read_vocab};
use crate::manifest::{dir_manifest, file_manifest, RunManifest};
use crate::train::AgreementArg;
use crate::Global;

/// Task files and finetuning flags shared by `finetune` and `ablate`.
#[derive(Debug, Clone, Args)]
pub struct TaskFlags {
    /// Stage-2 checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// TSV with a header naming `text_a`, optional `text_b`, and `label`.
    #[arg(long)]
    pub train: PathBuf,
    /// CoNLL-U parses of the training rows, ids `<row>-a` and `<row>-b`.
    #[arg(long)]
    pub train_parses: Option<PathBuf>,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub dev_parses: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub num_classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub task: TaskFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub task: TaskFlags,
    #[arg(long, value_enum)]
    pub agreement: Option<AgreementArg>,
    /// Finetuning seeds, e.g. `0,1,2,3,4`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Task name written to the report; defaults to the training file stem
    /// without a `_train` suffix.
    #[arg(long = "task")]
    pub task_name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttnDumpArgs {
    /// Stage-2 or classifier checkpoint with submodels.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub sentence_file: PathBuf,
    /// HTML report; the CSV is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("target").required(true).args(["corpus", "chunks", "task"])))]
pub struct EvalArgs {
    /// Stage-2, classifier, or (with --chunks) submodel checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// MLM accuracy of a stage-2 model over a CoNLL-U corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// MLM accuracy of a submodel over a chunk JSONL file.
    #[arg(long)]
    pub chunks: Option<PathBuf>,
    /// Classification accuracy over a task TSV.
    #[arg(long)]
    pub task: Option<PathBuf>,
    #[arg(long, requires = "task")]
    pub parses: Option<PathBuf>,
    /// Seed of the evaluation masking stream; defaults to --seed.
    #[arg(long)]
    pub mask_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn finetune_config(g: &Global, t: &TaskFlags) -> Result<FinetuneConfig> {
    let mut cfg: FinetuneConfig = config::section(g, "finetune")?;
    cfg.seed = g.seed.unwrap_or(cfg.seed);
    cfg.epochs = t.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = t.batch_size.unwrap_or(cfg.batch_size);
    cfg.lr = t.lr.unwrap_or(cfg.lr);
    cfg.num_classes = t.num_classes.or(cfg.num_classes);
    cfg.validate()?;
    Ok(cfg)
}

fn span_mode(model: &Stage2Model32) -> SpanMode {
    model.fusion().map(|f| f.options.span_mode).unwrap_or_default()
}

fn read_task(tsv: &Path, parses: Option<&Path>, mode: SpanMode) -> Result<Vec<LabeledExample>> {
    load_task(tsv, parses, mode).with_context(|| format!("reading {}", tsv.display()))
}

struct Loaded {
    model: Stage2Model32,
    meta: TrainingMeta,
    vocab: dacbert::Vocabulary,
    train: Vec<LabeledExample>,
    dev: Vec<LabeledExample>,
}

fn load_inputs(t: &TaskFlags, m: &mut RunManifest) -> Result<Loaded> {
    m.input("model", &t.model);
    m.input("vocab", &t.vocab);
    m.input("train", &t.train);
    m.input("dev", &t.dev);
    if let Some(p) = &t.train_parses {
        m.input("train_parses", p);
    }
    if let Some(p) = &t.dev_parses {
        m.input("dev_parses", p);
    }
    let (model, meta) = Stage2Model32::load(&t.model).with_context(|| format!("loading {}", t.model.display()))?;
    let vocab = read_vocab(&t.vocab)?;
    let mode = span_mode(&model);
    let train = read_task(&t.train, t.train_parses.as_deref(), mode)?;
    let dev = read_task(&t.dev, t.dev_parses.as_deref(), mode)?;
    Ok(Loaded {
        model,
        meta,
        vocab,
        train,
        dev,
    })
}

pub fn finetune(g: &Global, a: FinetuneArgs) -> Result<()> {
    let cfg = finetune_config(g, &a.task)?;
    let mut m = RunManifest::new("finetune", Some(cfg.seed), 1);
    m.config(&cfg)?;
    let input = load_inputs(&a.task, &mut m)?;
    let outcome = run_finetune(&input.model, &input.vocab, &input.train, &input.dev, &cfg)?;

    let dir = out_dir(&a.out)?;
    let ckpt = dir.join("classifier.ckpt");
    outcome.classifier.save(&ckpt, &input.meta)?;
    let metrics = dir.join("metrics.csv");
    let mut w = csv::Writer::from_writer(create(&metrics)?);
    w.write_record(["epoch", "dev_accuracy", "best"])?;
    for (i, acc) in outcome.epoch_accuracies.iter().enumerate() {
        let epoch = i + 1;
        let best = if epoch == outcome.best_epoch { "1" } else { "0" };
        w.write_record([epoch.to_string(), acc.to_string(), best.to_string()])?;
    }
    flush(w.into_inner()?, &metrics)?;
    let trace = dir.join("trace.csv");
    let mut w = csv::Writer::from_writer(create(&trace)?);
    for row in &outcome.trace {
        w.serialize(row)?;
    }
    flush(w.into_inner()?, &trace)?;
    eprintln!(
        "finetune: dev accuracy {:.4} (epoch {})",
        outcome.dev_accuracy, outcome.best_epoch
    );
    m.output(ckpt);
    m.output(metrics);
    m.output(trace);
    m.finish(&dir_manifest(&dir))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct AblateConfig {
    agreements: Vec<AgreementType>,
    seeds: Vec<u64>,
    task: Option<String>,
    /// Filled from the `finetune` section and the finetuning flags.
    #[serde(skip_deserializing)]
    finetune: FinetuneConfig,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            agreements: AgreementType::ALL.to_vec(),
            seeds: (0..5).collect(),
            task: None,
            finetune: FinetuneConfig::default(),
        }
    }
}

pub fn ablate(g: &Global, a: AblateArgs) -> Result<()> {
    let mut cfg: AblateConfig = config::section(g, "ablate")?;
    cfg.finetune = finetune_config(g, &a.task)?;
    if let Some(ag) = a.agreement {
        cfg.agreements = ag.expand();
    }
    match (a.seeds, g.seed) {
        (Some(seeds), _) => cfg.seeds = seeds,
        (None, Some(seed)) => cfg.seeds = vec![seed],
        (None, None) => {}
    }
    if cfg.seeds.is_empty() || cfg.agreements.is_empty() {
        bail!("ablation needs at least one seed and one agreement");
    }
    let task = a.task_name.or(cfg.task.clone()).unwrap_or_else(|| {
        a.task
            .train
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .map_or_else(|| "task".to_string(), |s| s.trim_end_matches("_train").to_string())
    });
    cfg.task = Some(task.clone());

    let mut m = RunManifest::new("ablate", cfg.seeds.first().copied(), 1);
    m.config(&cfg)?;
    let input = load_inputs(&a.task, &mut m)?;
    if input.model.fusion().is_none() {
        bail!("{}: ablation needs a model with submodels", a.task.model.display());
    }
    let mut report = AblationReport::default();
    for &seed in &cfg.seeds {
        let ft = FinetuneConfig {
            seed,
            ..cfg.finetune.clone()
        };
        let baseline = run_finetune(&input.model, &input.vocab, &input.train, &input.dev, &ft)?.dev_accuracy;
        for &ag in &cfg.agreements {
            let mut row = ablate_one(&input.model, ag, &input.vocab, &input.train, &input.dev, &ft, baseline)?;
            row.task = task.clone();
            eprintln!(
                "ablate seed {seed} {ag}: {:.4} -> {:.4}",
                row.baseline_acc, row.ablated_acc
            );
            report.rows.push(row);
        }
    }
    let dir = out_dir(&a.out)?;
    let path = dir.join("ablation.csv");
    let mut w = create(&path)?;
    report.write_csv(&mut w)?;
    flush(w, &path)?;
    m.output(path);
    m.finish(&dir_manifest(&dir))
}

pub fn attn_dump(g: &Global, a: AttnDumpArgs) -> Result<()> {
    let mut m = RunManifest::new("attn-dump", None, 1);
    m.input("model", &a.model);
    m.input("vocab", &a.vocab);
    m.input("sentences", &a.sentence_file);
    let (model, _) = Stage2Model32::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let vocab = read_vocab(&a.vocab)?;
    let sentences = read_corpus(&a.sentence_file, g.strict)?;
    m.config(&serde_json::json!({
        "span_mode": span_mode(&model),
        "strict": g.strict,
    }))?;
    let reports = sentences
        .iter()
        .map(|s| attention_attribution(&model, s, &vocab).with_context(|| format!("sentence {}", s.id)))
        .collect::<Result<Vec<_>>>()?;

    parent_dir(&a.out)?;
    config::write(&a.out, render_html(&reports))?;
    let csv_path = a.out.with_extension("csv");
    let mut w = create(&csv_path)?;
    write_attribution_csv(&mut w, &reports)?;
    flush(w, &csv_path)?;
    m.output(&a.out);
    m.output(csv_path);
    m.finish(&file_manifest(&a.out))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct EvalConfig {
    mask_seed: u64,
}

pub fn eval(g: &Global, a: EvalArgs) -> Result<()> {
    let mut cfg: EvalConfig = config::section(g, "eval")?;
    cfg.mask_seed = a.mask_seed.or(g.seed).unwrap_or(cfg.mask_seed);
    let mut m = RunManifest::new("eval", Some(cfg.mask_seed), 1);
    m.config(&cfg)?;
    m.input("model", &a.model);
    m.input("vocab", &a.vocab);
    let vocab = read_vocab(&a.vocab)?;
    let load_err = || format!("loading {}", a.model.display());

    let (target, count, accuracy, loss) = if let Some(path) = &a.corpus {
        m.input("corpus", path);
        let (model, _) = Stage2Model32::load(&a.model).with_context(load_err)?;
        let corpus = read_corpus(path, g.strict)?;
        let r = mlm_eval_stage2(&model, &corpus, &vocab, cfg.mask_seed)?;
        mlm_row("mlm", &r)
    } else if let Some(path) = &a.chunks {
        m.input("chunks", path);
        let ckpt = SubmodelCheckpoint32::load(&a.model).with_context(load_err)?;
        let data = ChunkDataset::read_jsonl(config::open(path)?, Some(ckpt.agreement))
            .with_context(|| format!("reading {}", path.display()))?;
        let r = mlm_eval(&ckpt, &data, &vocab, cfg.mask_seed)?;
        mlm_row("chunk_mlm", &r)
    } else if let Some(path) = &a.task {
        m.input("task", path);
        if let Some(p) = &a.parses {
            m.input("parses", p);
        }
        let (clf, _) = Classifier32::load(&a.model).with_context(load_err)?;
        let examples = read_task(path, a.parses.as_deref(), span_mode(&clf.model))?;
        if examples.is_empty() {
            bail!("{}: no examples", path.display());
        }
        let encoded = encode_examples(&clf.model, &vocab, &examples)?;
        ("task", encoded.len(), clf.accuracy(&encoded)?, None)
    } else {
        unreachable!("clap requires one evaluation target")
    };

    let dir = out_dir(&a.out)?;
    let path = dir.join("eval.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["target", "count", "accuracy", "loss"])?;
    w.write_record([
        target.to_string(),
        count.to_string(),
        accuracy.to_string(),
        loss.map(|l: f64| l.to_string()).unwrap_or_default(),
    ])?;
    flush(w.into_inner()?, &path)?;
    eprintln!("eval {target}: accuracy {accuracy:.4} over {count}");
    m.output(path);
    m.finish(&dir_manifest(&dir))
}

fn mlm_row(target: &'static str, r: &MaskedLoss) -> (&'static str, usize, f64, Option<f64>) {
    (target, r.count, r.accuracy(), Some(r.loss))
}
