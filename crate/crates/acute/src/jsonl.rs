//! Line-delimited JSON files: conversation logs, question registries,
//! training pairs and plain record dumps.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use acute_core::corpus::{Conversation, Corpus, CorpusError, Provenance, Question};
use acute_core::selfchat::UtterancePair;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A line that could not be turned into a valid conversation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug)]
pub struct Ingest {
    pub corpus: Corpus,
    pub rejects: Vec<Reject>,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_conversation(line: &str, default_provenance: Provenance) -> Result<Conversation, String> {
    let mut value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| "record is not a JSON object".to_string())?;
    obj.entry("provenance")
        .or_insert_with(|| serde_json::Value::String(default_provenance.as_str().into()));
    let mut conv: Conversation = serde_json::from_value(value).map_err(|e| e.to_string())?;
    conv.trim_texts();
    Ok(conv)
}

/// Reads a conversation log. Records without a `provenance` field get
/// `default_provenance`. Malformed or invalid lines are collected as rejects;
/// a duplicate `conv_id` is fatal, as is a file with no valid conversation.
pub fn parse_log_file(path: &Path, default_provenance: Provenance) -> Result<Ingest> {
    let lines = read_lines(path)?;
    let mut corpus = Corpus::new();
    let mut rejects = Vec::new();
    for (line_no, line) in lines {
        match parse_conversation(&line, default_provenance) {
            Ok(conv) => match corpus.insert(conv) {
                Ok(()) => {}
                Err(CorpusError::DuplicateConvId(id)) => {
                    return Err(Error::Data(format!(
                        "{}:{line_no}: duplicate conv_id `{id}`",
                        path.display()
                    )))
                }
                Err(e) => rejects.push(Reject {
                    line: line_no,
                    reason: e.to_string(),
                }),
            },
            Err(reason) => rejects.push(Reject {
                line: line_no,
                reason,
            }),
        }
    }
    if corpus.is_empty() {
        return Err(Error::Data(format!("{}: no conversations", path.display())));
    }
    Ok(Ingest { corpus, rejects })
}

/// Reads every record of type `T`, failing on the first bad line.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{n}: {e}", path.display())))
        })
        .collect()
}

pub fn write_records<'a, T: Serialize + 'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Runtime(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    write_records(path, corpus.conversations())
}

pub fn read_questions(path: &Path) -> Result<Vec<Question>> {
    read_records(path)
}

/// Reads `{"call": .., "response": ..}` records; blank pairs are skipped.
pub fn read_training_pairs(path: &Path) -> Result<BTreeSet<UtterancePair>> {
    #[derive(Deserialize)]
    struct Raw {
        call: String,
        response: String,
    }
    Ok(read_records::<Raw>(path)?
        .into_iter()
        .filter_map(|r| UtterancePair::new(&r.call, &r.response))
        .collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
