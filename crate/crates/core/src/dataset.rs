//! Preference triples, corruption records and the JSON Lines dataset format.
//!
//! One triple per line:
//!
//! ```text
//! {"prompt_id":3,"chosen_id":1,"rejected_id":4,"chosen_len":57,"rejected_len":120,"epsilon":0.9,"flipped":true}
//! ```
//!
//! `logp_chosen_ref`/`logp_rejected_ref` appear only for ingested corpora and
//! `epsilon`/`flipped` only for corrupted datasets. Absent optionals are
//! omitted rather than written as `null`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceTriple {
    pub prompt_id: usize,
    /// Response labeled as preferred (possibly after corruption).
    pub chosen_id: usize,
    pub rejected_id: usize,
    pub chosen_len: u32,
    pub rejected_len: u32,
    /// Reference log-probabilities `(chosen, rejected)`, present for ingested data.
    pub logp_ref: Option<(f64, f64)>,
}

impl PreferenceTriple {
    pub fn new(prompt_id: usize, chosen_id: usize, rejected_id: usize, chosen_len: u32, rejected_len: u32) -> Self {
        Self {
            prompt_id,
            chosen_id,
            rejected_id,
            chosen_len,
            rejected_len,
            logp_ref: None,
        }
    }

    /// The same comparison with the preferred/dispreferred labels exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            prompt_id: self.prompt_id,
            chosen_id: self.rejected_id,
            rejected_id: self.chosen_id,
            chosen_len: self.rejected_len,
            rejected_len: self.chosen_len,
            logp_ref: self.logp_ref.map(|(w, l)| (l, w)),
        }
    }

    fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.chosen_id == self.rejected_id {
            return Err(("chosen_id", "chosen_id equals rejected_id".into()));
        }
        if self.chosen_len < 1 {
            return Err(("chosen_len", "chosen_len must be at least 1".into()));
        }
        if self.rejected_len < 1 {
            return Err(("rejected_len", "rejected_len must be at least 1".into()));
        }
        if let Some((w, l)) = self.logp_ref {
            for (v, field) in [(w, "logp_chosen_ref"), (l, "logp_rejected_ref")] {
                if !v.is_finite() || v > 0.0 {
                    return Err((field, format!("{field} must be finite and <= 0, got {v}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionRecord {
    pub triple_index: usize,
    pub epsilon: f64,
    pub flipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Ingested,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub triples: Vec<PreferenceTriple>,
    pub corruption: Option<Vec<CorruptionRecord>>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(triples: Vec<PreferenceTriple>, provenance: Provenance) -> Self {
        Self {
            triples,
            corruption: None,
            provenance,
        }
    }

    pub fn with_corruption(mut self, records: Vec<CorruptionRecord>) -> Result<Self> {
        if records.len() != self.triples.len() {
            return Err(Error::arg(format!(
                "corruption list has {} records for {} triples",
                records.len(),
                self.triples.len()
            )));
        }
        if let Some(bad) = records.iter().enumerate().find(|(i, r)| r.triple_index != *i) {
            return Err(Error::arg(format!("corruption record {} points at triple {}", bad.0, bad.1.triple_index)));
        }
        self.corruption = Some(records);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn is_corrupted(&self) -> bool {
        self.corruption.is_some()
    }

    /// Fraction of triples whose labels were swapped; `None` for clean data.
    pub fn flip_ratio(&self) -> Option<f64> {
        let recs = self.corruption.as_ref()?;
        if recs.is_empty() {
            return Some(0.0);
        }
        Some(recs.iter().filter(|r| r.flipped).count() as f64 / recs.len() as f64)
    }

    /// Dataset with the corruption undone and records dropped.
    pub fn restored(&self) -> Dataset {
        let triples = match &self.corruption {
            Some(recs) => self
                .triples
                .iter()
                .zip(recs)
                .map(|(t, r)| if r.flipped { t.swapped() } else { t.clone() })
                .collect(),
            None => self.triples.clone(),
        };
        Dataset::new(triples, self.provenance)
    }
}

/// On-disk line layout. Field order fixes the byte layout of written files.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    prompt_id: usize,
    chosen_id: usize,
    rejected_id: usize,
    chosen_len: u32,
    rejected_len: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logp_chosen_ref: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logp_rejected_ref: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flipped: Option<bool>,
}

pub fn write_jsonl(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_lines(ds, &mut out).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Serializes `ds` in the JSON Lines layout to any writer.
pub fn write_lines<W: Write>(ds: &Dataset, out: &mut W) -> Result<()> {
    for (i, t) in ds.triples.iter().enumerate() {
        let rec = ds.corruption.as_ref().map(|c| c[i]);
        let line = Line {
            prompt_id: t.prompt_id,
            chosen_id: t.chosen_id,
            rejected_id: t.rejected_id,
            chosen_len: t.chosen_len,
            rejected_len: t.rejected_len,
            logp_chosen_ref: t.logp_ref.map(|p| p.0),
            logp_rejected_ref: t.logp_ref.map(|p| p.1),
            epsilon: rec.map(|r| r.epsilon),
            flipped: rec.map(|r| r.flipped),
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_lines(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses and validates a JSON Lines dataset. Line numbers in errors are 1-based.
///
/// Provenance is inferred: a dataset whose triples carry reference
/// log-probabilities is `Ingested`, otherwise `Synthetic`.
pub fn read_lines<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut triples = Vec::new();
    let mut records = Vec::new();
    let mut has_records: Option<bool> = None;
    let mut has_logp: Option<bool> = None;

    for (idx, raw) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let raw = raw.map_err(|e| Error::io("<reader>", e))?;
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let invalid = |field: &'static str, message: String| Error::Invalid {
            line: lineno,
            field,
            message,
        };

        let logp_ref = match (line.logp_chosen_ref, line.logp_rejected_ref) {
            (Some(w), Some(l)) => Some((w, l)),
            (None, None) => None,
            (Some(_), None) => {
                return Err(invalid("logp_rejected_ref", "logp_chosen_ref present without logp_rejected_ref".into()))
            }
            (None, Some(_)) => {
                return Err(invalid("logp_chosen_ref", "logp_rejected_ref present without logp_chosen_ref".into()))
            }
        };
        if *has_logp.get_or_insert(logp_ref.is_some()) != logp_ref.is_some() {
            return Err(invalid("logp_chosen_ref", "reference log-probs must be present on all lines or none".into()));
        }

        let triple = PreferenceTriple {
            prompt_id: line.prompt_id,
            chosen_id: line.chosen_id,
            rejected_id: line.rejected_id,
            chosen_len: line.chosen_len,
            rejected_len: line.rejected_len,
            logp_ref,
        };
        triple.validate().map_err(|(field, message)| invalid(field, message))?;

        let rec = match (line.epsilon, line.flipped) {
            (Some(epsilon), Some(flipped)) => {
                if !(0.0..=1.0).contains(&epsilon) {
                    return Err(invalid("epsilon", format!("epsilon must lie in [0, 1], got {epsilon}")));
                }
                Some(CorruptionRecord {
                    triple_index: triples.len(),
                    epsilon,
                    flipped,
                })
            }
            (None, None) => None,
            (Some(_), None) => return Err(invalid("flipped", "epsilon present without flipped".into())),
            (None, Some(_)) => return Err(invalid("epsilon", "flipped present without epsilon".into())),
        };
        if *has_records.get_or_insert(rec.is_some()) != rec.is_some() {
            return Err(invalid("epsilon", "corruption fields must be present on all lines or none".into()));
        }
        records.extend(rec);
        triples.push(triple);
    }

    let provenance = if has_logp == Some(true) {
        Provenance::Ingested
    } else {
        Provenance::Synthetic
    };
    Ok(Dataset {
        triples,
        corruption: (has_records == Some(true)).then_some(records),
        provenance,
    })
}
