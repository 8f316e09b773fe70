use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use dacbert::chunker::{chunk_corpus, corpus_length_stats, write_stats_csv, CorpusChunks};
use dacbert::conllu::to_conllu;
use dacbert::synth::{write_toy_bundle, ToySizes};
use dacbert::{AgreementType, ChunkDataset, SpanMode, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::config::{self, create, flush, out_dir, parent_dir, read_conllu, read_corpus};
use crate::manifest::{dir_manifest, file_manifest, RunManifest};
use crate::Global;

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpanModeArg {
    Subtree,
    DirectChildren,
}

impl From<SpanModeArg> for SpanMode {
    fn from(m: SpanModeArg) -> Self {
        match m {
            SpanModeArg::Subtree => SpanMode::Subtree,
            SpanModeArg::DirectChildren => SpanMode::DirectChildren,
        }
    }
}

#[derive(Debug, Args)]
pub struct ChunkArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Which dependents may extend a chunk leftward.
    #[arg(long, value_enum)]
    pub span_mode: Option<SpanModeArg>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Directory written by `chunk`.
    #[arg(long)]
    pub chunks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub percentiles: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub corpus_size: Option<usize>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub dev_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct IngestConfig {
    strict: bool,
}

pub fn ingest(g: &Global, a: IngestArgs) -> Result<()> {
    let mut cfg: IngestConfig = config::section(g, "ingest")?;
    cfg.strict |= g.strict;
    let mut m = RunManifest::new("ingest", None, 1);
    m.config(&cfg)?;
    m.input("corpus", &a.input);
    let outcome = read_conllu(&a.input, cfg.strict)?;
    let dir = out_dir(&a.out)?;

    let corpus = dir.join("corpus.conllu");
    config::write(&corpus, to_conllu(&outcome.sentences))?;
    let rejected = dir.join("rejected.csv");
    let mut w = csv::Writer::from_writer(create(&rejected)?);
    w.write_record(["line", "sentence_id", "message"])?;
    for r in &outcome.rejected {
        w.write_record([
            r.line.to_string().as_str(),
            r.sentence_id.as_deref().unwrap_or(""),
            &r.message,
        ])?;
    }
    flush(w.into_inner()?, &rejected)?;
    eprintln!(
        "ingest: {} sentence(s) kept, {} rejected",
        outcome.sentences.len(),
        outcome.rejected.len()
    );
    m.output(&corpus);
    m.output(&rejected);
    m.finish(&dir_manifest(&dir))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct ChunkConfig {
    strict: bool,
    span_mode: SpanMode,
}

pub fn chunk(g: &Global, a: ChunkArgs) -> Result<()> {
    let mut cfg: ChunkConfig = config::section(g, "chunk")?;
    cfg.strict |= g.strict;
    if let Some(mode) = a.span_mode {
        cfg.span_mode = mode.into();
    }
    let mut m = RunManifest::new("chunk", None, 1);
    m.config(&cfg)?;
    m.input("corpus", &a.input);
    let corpus = read_corpus(&a.input, cfg.strict)?;
    let chunks = chunk_corpus(&corpus, cfg.span_mode);
    let dir = out_dir(&a.out)?;

    for d in &chunks.datasets {
        let path = dir.join(format!("{}.jsonl", d.agreement.name()));
        let mut w = create(&path)?;
        d.write_jsonl(&mut w).map_err(|e| dacbert::Error::io(&path, e))?;
        flush(w, &path)?;
        m.output(path);
    }
    let counts = dir.join("counts.csv");
    let mut w = csv::Writer::from_writer(create(&counts)?);
    w.write_record(["agreement", "count"])?;
    for (agreement, n) in chunks.counts() {
        w.write_record([agreement.name(), &n.to_string()])?;
    }
    flush(w.into_inner()?, &counts)?;
    m.output(&counts);
    eprintln!(
        "chunk: {} sentence(s), {} root-attached trigger(s) skipped",
        corpus.len(),
        chunks.root_triggers
    );
    m.finish(&dir_manifest(&dir))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct StatsConfig {
    percentiles: Vec<f64>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            percentiles: vec![50.0, 90.0, 95.0, 96.0, 97.0, 98.0, 99.0, 100.0],
        }
    }
}

pub fn stats(g: &Global, a: StatsArgs) -> Result<()> {
    let mut cfg: StatsConfig = config::section(g, "stats")?;
    if let Some(p) = a.percentiles {
        cfg.percentiles = p;
    }
    let mut m = RunManifest::new("stats", None, 1);
    m.config(&cfg)?;
    m.input("chunks", &a.chunks);
    let mut datasets = Vec::with_capacity(4);
    for agreement in AgreementType::ALL {
        let path = a.chunks.join(format!("{}.jsonl", agreement.name()));
        let d = ChunkDataset::read_jsonl(config::open(&path)?, Some(agreement))
            .with_context(|| format!("reading {}", path.display()))?;
        datasets.push(d);
    }
    let chunks = CorpusChunks {
        datasets: datasets.try_into().expect("four datasets"),
        root_triggers: 0,
    };
    let stats = corpus_length_stats(&chunks, &cfg.percentiles)?;
    let dir = out_dir(&a.out)?;
    let path = dir.join("stats.csv");
    let mut w = create(&path)?;
    write_stats_csv(&mut w, &stats)?;
    flush(w, &path)?;
    m.output(&path);
    m.finish(&dir_manifest(&dir))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct VocabConfig {
    size: usize,
    strict: bool,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            size: 8192,
            strict: false,
        }
    }
}

pub fn build_vocab(g: &Global, a: BuildVocabArgs) -> Result<()> {
    let mut cfg: VocabConfig = config::section(g, "vocab")?;
    cfg.strict |= g.strict;
    if let Some(size) = a.size {
        cfg.size = size;
    }
    let mut m = RunManifest::new("build-vocab", None, 1);
    m.config(&cfg)?;
    m.input("corpus", &a.corpus);
    let corpus = read_corpus(&a.corpus, cfg.strict)?;
    let lines: Vec<String> = corpus.iter().map(|s| s.forms().join(" ")).collect();
    let vocab = Vocabulary::build(lines.iter().map(String::as_str), cfg.size)?;
    parent_dir(&a.out)?;
    let mut w = create(&a.out)?;
    vocab.write(&mut w).map_err(|e| dacbert::Error::io(&a.out, e))?;
    flush(w, &a.out)?;
    eprintln!("build-vocab: {} piece(s)", vocab.len());
    m.output(&a.out);
    m.finish(&file_manifest(&a.out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ToyConfig {
    corpus_size: usize,
    train_size: usize,
    dev_size: usize,
    seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let s = ToySizes::default();
        ToyConfig {
            corpus_size: s.corpus,
            train_size: s.train,
            dev_size: s.dev,
            seed: 0,
        }
    }
}

pub fn gen_toy(g: &Global, a: GenToyArgs) -> Result<()> {
    let mut cfg: ToyConfig = config::section(g, "gen_toy")?;
    cfg.corpus_size = a.corpus_size.unwrap_or(cfg.corpus_size);
    cfg.train_size = a.train_size.unwrap_or(cfg.train_size);
    cfg.dev_size = a.dev_size.unwrap_or(cfg.dev_size);
    cfg.seed = g.seed.unwrap_or(cfg.seed);
    let mut m = RunManifest::new("gen-toy", Some(cfg.seed), 1);
    m.config(&cfg)?;
    let sizes = ToySizes {
        corpus: cfg.corpus_size,
        train: cfg.train_size,
        dev: cfg.dev_size,
    };
    let dir = out_dir(&a.out)?;
    for path in write_toy_bundle(&dir, sizes, cfg.seed)? {
        m.output(path);
    }
    m.finish(&dir_manifest(&dir))
}
