//! Scoring and transfer metrics over the stage-by-task score matrix.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict, HeadKind, ModelConfig, ParameterVector};
use crate::tasks::{LabelVocab, TaskSpec, TaskStream};
use crate::model::Example;

/// Micro-averaged F1 over label instances, in percent.
///
/// With exactly one label per instance every miss is one false positive and
/// one false negative, so the result equals accuracy.
pub fn micro_f1(predictions: &[usize], golds: &[usize]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::Input("micro-F1 of an empty set".into()));
    }
    let tp = predictions.iter().zip(golds).filter(|(p, g)| p == g).count() as f64;
    let miss = golds.len() as f64 - tp;
    let (fp, fn_) = (miss, miss);
    Ok(100.0 * 2.0 * tp / (2.0 * tp + fp + fn_))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span<'a> {
    pub kind: &'a str,
    pub start: usize,
    pub end: usize,
}

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(name: &str) -> Tag<'_> {
    if let Some(k) = name.strip_prefix("B-") {
        Tag::Begin(k)
    } else if let Some(k) = name.strip_prefix("I-") {
        Tag::Inside(k)
    } else {
        Tag::Outside
    }
}

/// BIO spans with exclusive `end`. An `I-X` that does not continue an `X`
/// span opens a new one.
pub fn decode_spans<'a>(labels: &[usize], vocab: &'a LabelVocab) -> Result<Vec<Span<'a>>> {
    let mut spans = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    for (i, &id) in labels.iter().enumerate() {
        let name = vocab
            .name(id)
            .ok_or_else(|| Error::Schema(format!("label id {id} not in vocabulary")))?;
        let tag = parse_tag(name);
        match (tag, open) {
            (Tag::Inside(k), Some((cur, _))) if k == cur => {}
            (tag, _) => {
                if let Some((kind, start)) = open.take() {
                    spans.push(Span { kind, start, end: i });
                }
                open = match tag {
                    Tag::Begin(k) | Tag::Inside(k) => Some((k, i)),
                    Tag::Outside => None,
                };
            }
        }
    }
    if let Some((kind, start)) = open {
        spans.push(Span {
            kind,
            start,
            end: labels.len(),
        });
    }
    Ok(spans)
}

/// Exact-match span F1 in percent over a corpus of sequences.
///
/// Returns 100 when neither side has any span and 0 when precision and
/// recall are both 0.
pub fn span_f1(preds: &[Vec<usize>], golds: &[Vec<usize>], vocab: &LabelVocab) -> Result<f64> {
    let (p, r) = span_precision_recall(preds, golds, vocab)?;
    Ok(match (p, r) {
        (None, None) => 100.0,
        (p, r) => {
            let (p, r) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
            if p + r == 0.0 {
                0.0
            } else {
                100.0 * 2.0 * p * r / (p + r)
            }
        }
    })
}

/// Precision and recall, `None` where the denominator is zero.
pub fn span_precision_recall(
    preds: &[Vec<usize>],
    golds: &[Vec<usize>],
    vocab: &LabelVocab,
) -> Result<(Option<f64>, Option<f64>)> {
    if preds.len() != golds.len() {
        return Err(Error::Input(format!(
            "{} predicted sequences for {} gold sequences",
            preds.len(),
            golds.len()
        )));
    }
    let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for (p, g) in preds.iter().zip(golds) {
        if p.len() != g.len() {
            return Err(Error::Input(format!(
                "sequence lengths differ: {} predicted vs {} gold",
                p.len(),
                g.len()
            )));
        }
        let ps = decode_spans(p, vocab)?;
        let gs = decode_spans(g, vocab)?;
        tp += ps.iter().filter(|s| gs.contains(s)).count();
        n_pred += ps.len();
        n_gold += gs.len();
    }
    let ratio = |n: usize| (n > 0).then(|| tp as f64 / n as f64);
    Ok((ratio(n_pred), ratio(n_gold)))
}

/// Test score (percent) of the model on a set of examples.
pub fn score_examples(
    theta: &ParameterVector,
    config: &ModelConfig,
    examples: &[Example],
    vocab: &LabelVocab,
) -> Result<f64> {
    match config.head_kind {
        HeadKind::SequenceClassification => {
            let mut preds = Vec::with_capacity(examples.len());
            let mut golds = Vec::with_capacity(examples.len());
            for e in examples {
                preds.push(predict(theta, config, e)?[0]);
                golds.push(e.gold()[0]);
            }
            micro_f1(&preds, &golds)
        }
        HeadKind::TokenLabeling => {
            let preds = examples
                .iter()
                .map(|e| predict(theta, config, e))
                .collect::<Result<Vec<_>>>()?;
            let golds: Vec<_> = examples.iter().map(Example::gold).collect();
            span_f1(&preds, &golds, vocab)
        }
    }
}

pub fn score_task(theta: &ParameterVector, config: &ModelConfig, task: &TaskSpec, vocab: &LabelVocab) -> Result<f64> {
    score_examples(theta, config, &task.test, vocab)
}

/// Which row CBT compares against the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CbtRow {
    /// The row recorded after the last task.
    #[default]
    Final,
    /// The row recorded after task `T-1` (1-based).
    TMinus1,
}

/// `R[i][j]`: test score on task `j` after training stage `i` (both 0-based
/// here, 1-based in CSV output). Rows are filled in increasing stage order
/// and may skip stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub task_ids: Vec<String>,
    pub rows: Vec<Option<Vec<f64>>>,
}

impl ScoreMatrix {
    pub fn new(task_ids: Vec<String>) -> Self {
        let t = task_ids.len();
        Self {
            task_ids,
            rows: vec![None; t],
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.task_ids.len()
    }

    pub fn filled_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.is_some()).count()
    }

    pub fn row(&self, stage: usize) -> Option<&[f64]> {
        self.rows.get(stage).and_then(|r| r.as_deref())
    }

    fn last_filled(&self) -> Option<usize> {
        self.rows.iter().rposition(Option::is_some)
    }

    /// Stores the scores of stage `stage` (0-based).
    pub fn set_row(&mut self, stage: usize, scores: Vec<f64>) -> Result<()> {
        if stage >= self.num_tasks() {
            return Err(Error::State(format!(
                "stage {} out of range for {} tasks",
                stage + 1,
                self.num_tasks()
            )));
        }
        if scores.len() != self.num_tasks() {
            return Err(Error::Input(format!(
                "row has {} scores for {} tasks",
                scores.len(),
                self.num_tasks()
            )));
        }
        if let Some(last) = self.last_filled() {
            if stage <= last {
                return Err(Error::State(format!(
                    "stage {} recorded after stage {}",
                    stage + 1,
                    last + 1
                )));
            }
        }
        self.rows[stage] = Some(scores);
        Ok(())
    }

    fn get(&self, i: usize, j: usize) -> Result<f64> {
        self.row(i)
            .map(|r| r[j])
            .ok_or_else(|| Error::State(format!("row for stage {} has not been recorded", i + 1)))
    }

    /// Average score over the tasks seen so far (`0..=stage`).
    pub fn seen_average(&self, stage: usize) -> Option<f64> {
        self.row(stage)
            .map(|r| r[..=stage].iter().sum::<f64>() / (stage + 1) as f64)
    }

    /// Average over all tasks of the last recorded row.
    pub fn final_average(&self) -> Option<f64> {
        let r = self.row(self.last_filled()?)?;
        Some(r.iter().sum::<f64>() / r.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["stage".to_string()];
        header.extend(self.task_ids.iter().cloned());
        out.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            if let Some(row) = row {
                let mut rec = vec![(i + 1).to_string()];
                rec.extend(row.iter().map(|v| v.to_string()));
                out.write_record(&rec)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("stage") || header.len() < 2 {
            return Err(Error::Schema("score matrix CSV must start with a `stage` column".into()));
        }
        let mut m = ScoreMatrix::new(header.iter().skip(1).map(String::from).collect());
        for (idx, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = idx + 2;
            let num = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: format!("{s:?}: {e}"),
                })
            };
            let stage = rec.get(0).unwrap_or("").trim().parse::<usize>().map_err(|e| Error::Parse {
                line,
                message: format!("bad stage: {e}"),
            })?;
            if stage == 0 {
                return Err(Error::Parse {
                    line,
                    message: "stages are numbered from 1".into(),
                });
            }
            let scores = rec.iter().skip(1).map(num).collect::<Result<Vec<_>>>()?;
            m.set_row(stage - 1, scores)?;
        }
        Ok(m)
    }
}

/// Evaluates the model on every task's test split and stores the row.
pub fn record_row(
    matrix: &mut ScoreMatrix,
    stage: usize,
    theta: &ParameterVector,
    config: &ModelConfig,
    stream: &TaskStream,
) -> Result<()> {
    if stream.task_ids() != matrix.task_ids {
        return Err(Error::State("stream order does not match the score matrix".into()));
    }
    if let Some(last) = matrix.last_filled() {
        if stage <= last {
            return Err(Error::State(format!(
                "stage {} already recorded or out of order",
                stage + 1
            )));
        }
    }
    let scores = stream
        .tasks
        .iter()
        .map(|t| score_task(theta, config, t, &stream.labels))
        .collect::<Result<Vec<_>>>()?;
    matrix.set_row(stage, scores)
}

/// Mean zero-shot score on tasks not yet trained on.
pub fn cft(r: &ScoreMatrix) -> Result<f64> {
    let t = r.num_tasks();
    if t < 2 {
        return Err(Error::State("transfer metrics need at least two tasks".into()));
    }
    let mut total = 0.0;
    for i in 0..t - 1 {
        let row = r.row(i).ok_or_else(|| {
            Error::State(format!("CFT needs the row of stage {}", i + 1))
        })?;
        total += row[i + 1..].iter().sum::<f64>() / (t - 1 - i) as f64;
    }
    Ok(total / (t - 1) as f64)
}

/// Mean change on earlier tasks between their own stage and the reference row.
pub fn cbt(r: &ScoreMatrix, which: CbtRow) -> Result<f64> {
    let t = r.num_tasks();
    if t < 2 {
        return Err(Error::State("transfer metrics need at least two tasks".into()));
    }
    let reference = match which {
        CbtRow::Final => t - 1,
        CbtRow::TMinus1 => t - 2,
    };
    let mut total = 0.0;
    for i in 0..t - 1 {
        total += r.get(reference, i)? - r.get(i, i)?;
    }
    Ok(total / (t - 1) as f64)
}

/// Per-run summary derived from a score matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    /// Task ids in training order with their scores in the last recorded row.
    pub per_task_f1: Vec<(String, f64)>,
    pub final_average: f64,
    /// `(stage, average over seen tasks)`, stages 1-based.
    pub stage_averages: Vec<(usize, f64)>,
    pub cft: Option<f64>,
    pub cbt: Option<f64>,
}

impl EvalReport {
    pub fn from_matrix(method: &str, seed: u64, r: &ScoreMatrix, cbt_row: CbtRow) -> Result<Self> {
        let last = r
            .last_filled()
            .ok_or_else(|| Error::State("no rows recorded".into()))?;
        let row = r.row(last).unwrap();
        let per_task_f1 = r.task_ids.iter().cloned().zip(row.iter().copied()).collect();
        let stage_averages = (0..r.num_tasks())
            .filter_map(|s| r.seen_average(s).map(|a| (s + 1, a)))
            .collect();
        Ok(Self {
            method: method.to_string(),
            seed,
            per_task_f1,
            final_average: r.final_average().unwrap(),
            stage_averages,
            cft: cft(r).ok(),
            cbt: cbt(r, cbt_row).ok(),
        })
    }
}
