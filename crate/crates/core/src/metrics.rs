//! Per-level accuracy and the all-levels consistency score.
//!
//! Works on internal samples and on external prediction/triplet files.
//! External answers compare by trimmed, case-insensitive string equality;
//! booleans map to "yes"/"no".

use crate::synth::{Level, Sample};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no prediction for sample {id}{}", triplet_note(.triplet_id))]
    MissingPrediction { id: String, triplet_id: Option<String> },
    #[error("triplet {triplet_id} is incomplete: missing {missing} member")]
    IncompleteTriplet { triplet_id: String, missing: Level },
    #[error("triplet {triplet_id} has duplicate {level} members")]
    DuplicateMember { triplet_id: String, level: Level },
    #[error("no samples at level {level}")]
    EmptyLevel { level: Level },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn triplet_note(t: &Option<String>) -> String {
    match t {
        Some(id) => format!(" (triplet {id})"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// A ground-truth or predicted answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Bool(bool),
    Text(String),
}

impl Answer {
    fn normalized(&self) -> String {
        match self {
            Answer::Bool(true) => "yes".into(),
            Answer::Bool(false) => "no".into(),
            Answer::Text(s) => s.trim().to_lowercase(),
        }
    }
}

/// 1 iff the prediction equals the ground truth (after normalization).
pub fn correctness(prediction: &Answer, truth: &Answer) -> u32 {
    match (prediction, truth) {
        (Answer::Bool(a), Answer::Bool(b)) => (a == b) as u32,
        _ => (prediction.normalized() == truth.normalized()) as u32,
    }
}

/// The minimal view of a sample the metrics need. Internal samples and
/// external triplet records both reduce to this.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub id: String,
    pub level: Level,
    pub triplet_id: Option<String>,
    pub answer: Answer,
}

impl From<&Sample> for EvalSample {
    fn from(s: &Sample) -> EvalSample {
        EvalSample {
            id: s.id.clone(),
            level: s.level,
            triplet_id: s.triplet_id.clone(),
            answer: Answer::Bool(s.answer),
        }
    }
}

pub type Predictions = BTreeMap<String, Answer>;

/// Predictions file: JSON lines of `{"id": str, "answer": str|bool}`.
pub fn load_predictions(path: &Path) -> Result<Predictions> {
    #[derive(Deserialize)]
    struct Line {
        id: String,
        answer: Answer,
    }
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Predictions::new();
    for (i, line) in r.lines().enumerate() {
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&text)
            .map_err(|e| MetricsError::Malformed { line: i + 1, message: e.to_string() })?;
        out.insert(parsed.id, parsed.answer);
    }
    Ok(out)
}

/// Triplet/sample file in either the full dataset schema or the minimal
/// external schema `{"id","level","triplet_id","answer"}`; other fields are
/// ignored.
pub fn load_eval_samples(path: &Path) -> Result<Vec<EvalSample>> {
    #[derive(Deserialize)]
    struct Line {
        id: String,
        level: Level,
        #[serde(default)]
        triplet_id: Option<String>,
        answer: Answer,
    }
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&text)
            .map_err(|e| MetricsError::Malformed { line: i + 1, message: e.to_string() })?;
        out.push(EvalSample {
            id: parsed.id,
            level: parsed.level,
            triplet_id: parsed.triplet_id,
            answer: parsed.answer,
        });
    }
    Ok(out)
}

fn prediction_for<'a>(preds: &'a Predictions, s: &EvalSample) -> Result<&'a Answer> {
    preds.get(&s.id).ok_or_else(|| MetricsError::MissingPrediction {
        id: s.id.clone(),
        triplet_id: s.triplet_id.clone(),
    })
}

/// Mean correctness over the samples at one level.
pub fn level_accuracy(preds: &Predictions, samples: &[EvalSample], level: Level) -> Result<f64> {
    let mut n = 0u32;
    let mut correct = 0u32;
    for s in samples.iter().filter(|s| s.level == level) {
        correct += correctness(prediction_for(preds, s)?, &s.answer);
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyLevel { level });
    }
    Ok(correct as f64 / n as f64)
}

/// Mean correctness over all samples.
pub fn overall_accuracy(preds: &Predictions, samples: &[EvalSample]) -> Result<f64> {
    let mut correct = 0u32;
    for s in samples {
        correct += correctness(prediction_for(preds, s)?, &s.answer);
    }
    if samples.is_empty() {
        return Err(MetricsError::EmptyLevel { level: Level::Train });
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Groups triplet members by id, requiring exactly one pp, pw, and ww member
/// each. Samples without a triplet id are ignored.
pub fn group_triplets(samples: &[EvalSample]) -> Result<Vec<[&EvalSample; 3]>> {
    let mut by_id: BTreeMap<&str, [Option<&EvalSample>; 3]> = BTreeMap::new();
    for s in samples {
        let Some(tid) = s.triplet_id.as_deref() else {
            continue;
        };
        let slot = match s.level {
            Level::Pp => 0,
            Level::Pw => 1,
            Level::Ww => 2,
            Level::Train => continue,
        };
        let entry = by_id.entry(tid).or_default();
        if entry[slot].replace(s).is_some() {
            return Err(MetricsError::DuplicateMember {
                triplet_id: tid.to_string(),
                level: s.level,
            });
        }
    }
    let mut out = Vec::with_capacity(by_id.len());
    for (tid, members) in by_id {
        for (slot, level) in [(0, Level::Pp), (1, Level::Pw), (2, Level::Ww)] {
            if members[slot].is_none() {
                return Err(MetricsError::IncompleteTriplet {
                    triplet_id: tid.to_string(),
                    missing: level,
                });
            }
        }
        out.push([members[0].unwrap(), members[1].unwrap(), members[2].unwrap()]);
    }
    Ok(out)
}

/// Fraction of triplets whose pp, pw, and ww members are all answered
/// correctly (product of per-member indicators).
pub fn consistency(preds: &Predictions, samples: &[EvalSample]) -> Result<f64> {
    let triplets = group_triplets(samples)?;
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let mut all_correct = 0u32;
    for members in &triplets {
        let mut product = 1;
        for s in members {
            product *= correctness(prediction_for(preds, s)?, &s.answer);
        }
        all_correct += product;
    }
    Ok(all_correct as f64 / triplets.len() as f64)
}

/// The headline evaluation: overall and per-level accuracy, consistency, and
/// counts. `iid_accuracy` is populated when an IID held-out split was scored
/// alongside; `provenance` echoes the effective configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub accuracy_pp: f64,
    pub accuracy_pw: f64,
    pub accuracy_ww: f64,
    pub consistency: f64,
    pub triplet_count: usize,
    pub samples_pp: usize,
    pub samples_pw: usize,
    pub samples_ww: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iid_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

/// Scores a prediction set against triplet-annotated samples.
pub fn evaluate(preds: &Predictions, samples: &[EvalSample]) -> Result<EvalReport> {
    let count = |level| samples.iter().filter(|s| s.level == level).count();
    Ok(EvalReport {
        overall_accuracy: overall_accuracy(preds, samples)?,
        accuracy_pp: level_accuracy(preds, samples, Level::Pp)?,
        accuracy_pw: level_accuracy(preds, samples, Level::Pw)?,
        accuracy_ww: level_accuracy(preds, samples, Level::Ww)?,
        consistency: consistency(preds, samples)?,
        triplet_count: group_triplets(samples)?.len(),
        samples_pp: count(Level::Pp),
        samples_pw: count(Level::Pw),
        samples_ww: count(Level::Ww),
        iid_accuracy: None,
        provenance: None,
    })
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| MetricsError::Malformed { line: 0, message: e.to_string() })?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<EvalReport> {
        let r = BufReader::new(std::fs::File::open(path)?);
        serde_json::from_reader(r).map_err(|e| MetricsError::Malformed { line: 0, message: e.to_string() })
    }

    /// `metric,value` rows in a fixed order; six data rows for a standard
    /// report, plus `iid_accuracy` when present.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "metric,value")?;
        writeln!(w, "overall_accuracy,{}", self.overall_accuracy)?;
        writeln!(w, "accuracy_pp,{}", self.accuracy_pp)?;
        writeln!(w, "accuracy_pw,{}", self.accuracy_pw)?;
        writeln!(w, "accuracy_ww,{}", self.accuracy_ww)?;
        writeln!(w, "consistency,{}", self.consistency)?;
        writeln!(w, "triplet_count,{}", self.triplet_count)?;
        if let Some(iid) = self.iid_accuracy {
            writeln!(w, "iid_accuracy,{iid}")?;
        }
        Ok(())
    }
}
