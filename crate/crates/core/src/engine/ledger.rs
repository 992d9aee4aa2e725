//! Append-only evidence ledger and its JSONL persistence.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypothesis::EvidenceRecord;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ledger {
    records: Vec<EvidenceRecord>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[EvidenceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn max_turn(&self) -> u32 {
        self.records.last().map_or(0, |r| r.turn)
    }

    /// Appends one record. Turns must start at 1 and never go backwards.
    pub fn append(&mut self, record: EvidenceRecord) -> Result<()> {
        if record.turn == 0 {
            return Err(Error::input("evidence turns start at 1"));
        }
        if record.turn < self.max_turn() {
            return Err(Error::input(format!(
                "record for turn {} after turn {}",
                record.turn,
                self.max_turn()
            )));
        }
        if self.records.iter().any(|r| r.id == record.id) {
            return Err(Error::input(format!("duplicate evidence id {}", record.id)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn truncate(&mut self, len: usize) {
        self.records.truncate(len);
    }

    pub fn get(&self, id: &str) -> Option<&EvidenceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn into_records(self) -> Vec<EvidenceRecord> {
        self.records
    }
}

/// Reads a ledger file; a missing file is an empty ledger.
pub fn read_jsonl(path: &Path) -> Result<Ledger> {
    let mut ledger = Ledger::new();
    if !path.exists() {
        return Ok(ledger);
    }
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        ledger.append(serde_json::from_str(&line)?)?;
    }
    Ok(ledger)
}

/// Appends records as JSON lines and syncs the file.
pub fn append_jsonl(path: &Path, records: &[EvidenceRecord]) -> Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        writeln!(file, "{}", serde_json::to_string(r)?)?;
    }
    file.sync_all()?;
    Ok(())
}

pub fn write_jsonl(path: &Path, records: &[EvidenceRecord]) -> Result<()> {
    let mut file = File::create(path)?;
    for r in records {
        writeln!(file, "{}", serde_json::to_string(r)?)?;
    }
    file.sync_all()?;
    Ok(())
}
