use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::parse::DropReason;

/// One record removed at a stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropEvent {
    pub stage: String,
    /// Sample key or pair id.
    pub key: String,
    pub reason: DropReason,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// Funnel accounting for one filtering stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLedger {
    pub stage: String,
    pub input: usize,
    pub output: usize,
    pub drops: BTreeMap<DropReason, usize>,
}

impl StageLedger {
    pub fn new(stage: impl Into<String>, input: usize) -> Self {
        Self {
            stage: stage.into(),
            input,
            output: 0,
            drops: BTreeMap::new(),
        }
    }

    pub fn dropped(&self) -> usize {
        self.drops.values().sum()
    }

    /// `input == output + drops`.
    pub fn is_conserved(&self) -> bool {
        self.input == self.output + self.dropped()
    }
}

/// Survivors of a stage together with its accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput<T> {
    pub kept: Vec<T>,
    pub ledger: StageLedger,
    pub events: Vec<DropEvent>,
}

impl<T> StageOutput<T> {
    pub(crate) fn new(stage: &str, input: usize) -> Self {
        Self {
            kept: Vec::new(),
            ledger: StageLedger::new(stage, input),
            events: Vec::new(),
        }
    }

    pub(crate) fn keep(&mut self, item: T) {
        self.kept.push(item);
        self.ledger.output += 1;
    }

    pub(crate) fn drop(&mut self, key: String, reason: DropReason, detail: String) {
        *self.ledger.drops.entry(reason).or_insert(0) += 1;
        self.events.push(DropEvent {
            stage: self.ledger.stage.clone(),
            key,
            reason,
            detail,
        });
    }
}
