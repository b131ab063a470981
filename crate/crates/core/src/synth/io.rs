//! JSON-lines dataset files and the vocabulary file.
//!
//! One sample per line:
//! `{"id", "level", "triplet_id", "query": [[item_id,...],...],
//!   "phrase_lengths", "scene": [[size,color,shape],...], "answer",
//!   "novel_composition", "schema_version"}`
//!
//! Unknown extra fields are accepted and preserved through a round trip.
//! Malformed records fail with their line number.

use super::{
    Descriptor, ItemKind, Level, Sample, SceneObject, SynthError, Vocabulary, SCHEMA_VERSION,
};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

type Result<T> = std::result::Result<T, SynthError>;

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    level: Level,
    triplet_id: Option<String>,
    query: Vec<Vec<usize>>,
    phrase_lengths: Vec<usize>,
    scene: Vec<[usize; 3]>,
    answer: bool,
    novel_composition: Option<[usize; 2]>,
    schema_version: u32,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
}

impl Record {
    fn from_sample(s: &Sample) -> Record {
        Record {
            id: s.id.clone(),
            level: s.level,
            triplet_id: s.triplet_id.clone(),
            query: s.query.iter().map(|d| d.items().collect()).collect(),
            phrase_lengths: s.phrase_lengths.clone(),
            scene: s.scene.iter().map(|o| [o.size, o.color, o.shape]).collect(),
            answer: s.answer,
            novel_composition: s.novel_composition.map(|(a, b)| [a, b]),
            schema_version: SCHEMA_VERSION,
            extra: s.extra.clone(),
        }
    }

    fn into_sample(self, vocab: &Vocabulary, line: usize) -> Result<Sample> {
        let mut query = Vec::with_capacity(self.query.len());
        for items in &self.query {
            let mut d = Descriptor::default();
            if items.is_empty() {
                return Err(SynthError::Malformed { line, message: "empty descriptor".into() });
            }
            for &id in items {
                let slot = match vocab.kind_of(id).map_err(|e| SynthError::Malformed {
                    line,
                    message: e.to_string(),
                })? {
                    ItemKind::Size => &mut d.size,
                    ItemKind::Color => &mut d.color,
                    ItemKind::Shape => &mut d.shape,
                };
                if slot.replace(id).is_some() {
                    return Err(SynthError::Malformed {
                        line,
                        message: format!("descriptor repeats an attribute family (item {id})"),
                    });
                }
            }
            query.push(d);
        }
        let scene: Vec<SceneObject> = self
            .scene
            .iter()
            .map(|&[size, color, shape]| SceneObject { size, color, shape })
            .collect();
        Ok(Sample {
            id: self.id,
            level: self.level,
            triplet_id: self.triplet_id,
            query,
            phrase_lengths: self.phrase_lengths,
            scene,
            answer: self.answer,
            novel_composition: self.novel_composition.map(|[a, b]| (a, b)),
            extra: self.extra,
        })
    }
}

pub fn save_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let line = serde_json::to_string(&Record::from_sample(s))
            .map_err(|e| SynthError::Malformed { line: 0, message: e.to_string() })?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_samples(path: &Path, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&text)
            .map_err(|e| SynthError::Malformed { line: line_no, message: e.to_string() })?;
        if record.schema_version != SCHEMA_VERSION {
            return Err(SynthError::SchemaVersion {
                line: line_no,
                found: record.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        out.push(record.into_sample(vocab, line_no)?);
    }
    Ok(out)
}

pub fn save_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, vocab)
        .map_err(|e| SynthError::Malformed { line: 0, message: e.to_string() })?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_vocabulary(path: &Path) -> Result<Vocabulary> {
    let r = BufReader::new(std::fs::File::open(path)?);
    serde_json::from_reader(r).map_err(|e| SynthError::Malformed { line: 0, message: e.to_string() })
}
