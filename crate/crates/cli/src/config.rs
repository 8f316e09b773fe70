use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dacbert::conllu::{parse_conllu, IngestOutcome};
use dacbert::{ParsedSentence, Vocabulary};
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::Global;

/// The section of the `--config` file named `section`, deserialized over
/// the built-in defaults. Missing file section means all defaults.
pub fn section<C: DeserializeOwned + Default>(g: &Global, section: &str) -> Result<C> {
    let Some(path) = &g.config else {
        return Ok(C::default());
    };
    let file = File::open(path).map_err(|e| dacbert::Error::io(path, e))?;
    let root: Value =
        serde_json::from_reader(BufReader::new(file)).with_context(|| format!("{}: not valid JSON", path.display()))?;
    if !root.is_object() {
        bail!("{}: top level must be an object", path.display());
    }
    match root.get(section) {
        None | Some(Value::Null) => Ok(C::default()),
        Some(v) => {
            serde_json::from_value(v.clone()).with_context(|| format!("{}: section \"{section}\"", path.display()))
        }
    }
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path).map_err(|e| dacbert::Error::io(path, e))?;
    Ok(BufReader::new(file))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|e| dacbert::Error::io(path, e))?;
    Ok(BufWriter::new(file))
}

pub fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| dacbert::Error::io(path, e))?;
    Ok(())
}

pub fn out_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| dacbert::Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}

/// Parent directory of an output file, created if missing.
pub fn parent_dir(file: &Path) -> Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => out_dir(p).map(|_| ()),
        _ => Ok(()),
    }
}

pub fn read_conllu(path: &Path, strict: bool) -> Result<IngestOutcome> {
    let outcome = parse_conllu(open(path)?, strict).with_context(|| format!("reading {}", path.display()))?;
    if !outcome.rejected.is_empty() {
        eprintln!(
            "{}: skipped {} malformed sentence(s)",
            path.display(),
            outcome.rejected.len()
        );
    }
    Ok(outcome)
}

pub fn read_corpus(path: &Path, strict: bool) -> Result<Vec<ParsedSentence>> {
    Ok(read_conllu(path, strict)?.sentences)
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::read(open(path)?).with_context(|| format!("reading {}", path.display()))
}

pub fn flush(mut w: impl Write, path: &Path) -> Result<()> {
    w.flush().map_err(|e| dacbert::Error::io(path, e))?;
    Ok(())
}
