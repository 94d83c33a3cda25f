use serde::{Deserialize, Serialize};

use crate::ctr::ObservationSequence;
use crate::error::{validation, Result};

/// Event time with a censoring flag. A censored label only lower-bounds the true event time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    pub event_time: f64,
    pub censored: bool,
}

impl SurvivalLabel {
    pub fn new(event_time: f64, censored: bool) -> Result<Self> {
        if !(event_time.is_finite() && event_time > 0.0) {
            return Err(validation(format!("event time {event_time} must be positive and finite")));
        }
        Ok(Self { event_time, censored })
    }

    pub fn event(event_time: f64) -> Result<Self> {
        Self::new(event_time, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub sequence: ObservationSequence,
    pub label: SurvivalLabel,
}

/// Labeled sequences sharing an observation width and demographic width.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        if let Some(first) = records.first() {
            let dim = first.sequence.dim();
            let demo = first.sequence.demographics().map(<[f64]>::len);
            for r in &records {
                if r.sequence.dim() != dim {
                    return Err(validation(format!(
                        "record {}: observation width {} differs from {dim}",
                        r.sequence.record_id(),
                        r.sequence.dim()
                    )));
                }
                if r.sequence.demographics().map(<[f64]>::len) != demo {
                    return Err(validation(format!(
                        "record {}: demographics differ in presence or width",
                        r.sequence.record_id()
                    )));
                }
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.sequence.dim())
    }

    pub fn demographics_dim(&self) -> usize {
        self.records.first().and_then(|r| r.sequence.demographics()).map_or(0, <[f64]>::len)
    }

    pub fn labels(&self) -> Vec<SurvivalLabel> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { records: indices.iter().map(|&i| self.records[i].clone()).collect() }
    }

    pub fn sequences(&self) -> Vec<&ObservationSequence> {
        self.records.iter().map(|r| &r.sequence).collect()
    }
}
