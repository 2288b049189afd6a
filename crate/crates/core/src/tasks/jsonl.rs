//! JSONL dataset ingestion with feature hashing.
//!
//! One record per line:
//! `{"task_id", "family", "split": "train"|"dev"|"test", "tokens": [..], "label": ..}`
//! for sequence tasks, or with `"labels": [..]` aligned to `tokens` for token
//! tasks. The label vocabulary file holds one label per line; the (0-based)
//! line number is the label id.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabelVocab, TaskSpec, TaskStream};
use crate::error::{Error, Result};
use crate::model::{Example, HeadKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonlRecord {
    pub task_id: String,
    pub family: String,
    pub split: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Signed feature hashing into `dim` buckets, L2-normalized.
///
/// Each token is hashed with 64-bit FNV-1a over its UTF-8 bytes. The top bit
/// picks the sign, the remaining 63 bits modulo `dim` pick the bucket.
pub fn hash_featurize<S: AsRef<str>>(tokens: &[S], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::Config("hash dimension must be positive".into()));
    }
    let mut v = vec![0.0; dim];
    for tok in tokens {
        let h = fnv1a64(tok.as_ref().as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[((h & (u64::MAX >> 1)) % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(v)
}

/// Features of token `i`: the word plus its left and right neighbours.
fn token_features(tokens: &[String], i: usize, dim: usize) -> Result<Vec<f64>> {
    let prev = if i == 0 { "<s>" } else { tokens[i - 1].as_str() };
    let next = tokens.get(i + 1).map_or("</s>", String::as_str);
    hash_featurize(&[format!("w={}", tokens[i]), format!("p={prev}"), format!("n={next}")], dim)
}

pub fn load_vocab(path: &Path) -> Result<LabelVocab> {
    let text = std::fs::read_to_string(path)?;
    LabelVocab::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Reads a JSONL dataset; tasks appear in order of their first record and
/// each split keeps file order.
pub fn load_stream(data: &Path, labels: &Path, dim: usize) -> Result<TaskStream> {
    let vocab = load_vocab(labels)?;
    parse_stream(BufReader::new(File::open(data)?), vocab, dim)
}

pub(crate) fn parse_stream<R: BufRead>(reader: R, vocab: LabelVocab, dim: usize) -> Result<TaskStream> {
    if dim == 0 {
        return Err(Error::Config("hash dimension must be positive".into()));
    }
    let mut tasks: Vec<TaskSpec> = Vec::new();
    let mut head: Option<HeadKind> = None;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: lineno, message };
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let label_id = |name: &str| {
            vocab
                .id(name)
                .ok_or_else(|| Error::Schema(format!("line {lineno}: unknown label {name:?}")))
        };
        let (kind, example) = match (&rec.label, &rec.labels) {
            (Some(l), None) => (
                HeadKind::SequenceClassification,
                Example::sequence(rec.task_id.clone(), hash_featurize(&rec.tokens, dim)?, label_id(l)?),
            ),
            (None, Some(ls)) => {
                if ls.len() != rec.tokens.len() {
                    return Err(parse_err(format!(
                        "{} tokens but {} labels",
                        rec.tokens.len(),
                        ls.len()
                    )));
                }
                let ids = ls.iter().map(|l| label_id(l)).collect::<Result<Vec<_>>>()?;
                let feats = (0..rec.tokens.len())
                    .map(|i| token_features(&rec.tokens, i, dim))
                    .collect::<Result<Vec<_>>>()?;
                (HeadKind::TokenLabeling, Example::tokens(rec.task_id.clone(), feats, ids))
            }
            _ => return Err(parse_err("record needs exactly one of \"label\" or \"labels\"".into())),
        };
        match head {
            None => head = Some(kind),
            Some(h) if h != kind => {
                return Err(Error::Schema(format!(
                    "line {lineno}: mixes sequence and token records in one dataset"
                )))
            }
            _ => {}
        }
        let pos = match tasks.iter().position(|t| t.task_id == rec.task_id) {
            Some(p) => p,
            None => {
                tasks.push(TaskSpec {
                    task_id: rec.task_id.clone(),
                    family: rec.family.clone(),
                    train: vec![],
                    dev: vec![],
                    test: vec![],
                    head_kind: kind,
                });
                tasks.len() - 1
            }
        };
        let task = &mut tasks[pos];
        if task.family != rec.family {
            return Err(Error::Schema(format!(
                "line {lineno}: task {:?} listed under families {:?} and {:?}",
                rec.task_id, task.family, rec.family
            )));
        }
        match rec.split.as_str() {
            "train" => task.train.push(example),
            "dev" => task.dev.push(example),
            "test" => task.test.push(example),
            other => return Err(Error::Schema(format!("line {lineno}: unknown split {other:?}"))),
        }
    }
    TaskStream::new(tasks, vocab).map_err(|e| match e {
        Error::Input(m) => Error::Schema(m),
        other => other,
    })
}

pub fn write_jsonl(records: &[JsonlRecord], vocab: &LabelVocab, data: &Path, labels: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(data)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let mut lab = BufWriter::new(File::create(labels)?);
    for n in &vocab.names {
        writeln!(lab, "{n}")?;
    }
    lab.flush()?;
    Ok(())
}
