//! JSONL checkpoint records, the append-only writer, and run-directory
//! loading/export.
//!
//! One file per stage in the run directory, one record per line, every
//! record carrying `schema_version`. See docs/schema.md for the field-level
//! contract.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::domain::{CharacterPair, Conversation, ConversationStatus, NormViolation, Situation, Utterance};

pub const SCHEMA_VERSION: u32 = 1;

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const SITUATIONS_FILE: &str = "situations.jsonl";
pub const CONVERSATIONS_FILE: &str = "conversations.jsonl";
pub const NORMS_FILE: &str = "norms.jsonl";
pub const INTERVENTIONS_FILE: &str = "interventions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub schema_version: u32,
    #[serde(flatten)]
    pub pair: CharacterPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SituationRecord {
    pub schema_version: u32,
    #[serde(flatten)]
    pub situation: Situation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub schema_version: u32,
    #[serde(flatten)]
    pub conversation: Conversation,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub schema_version: u32,
    pub conv_id: String,
    pub status: RecordStatus,
    pub violations: Vec<NormViolation>,
    pub raw_response: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub schema_version: u32,
    pub original_conv_id: String,
    pub status: RecordStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pivot_index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub revised_utterance: Option<Utterance>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intervened: Option<Conversation>,
    pub no_op_edit: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure_reason: Option<String>,
}

impl InterventionOutcome {
    /// The domain view of a successful outcome.
    pub fn as_record(&self) -> Option<crate::domain::InterventionRecord> {
        match (self.status, &self.pivot_index, &self.revised_utterance, &self.intervened) {
            (RecordStatus::Ok, Some(pivot), Some(revised), Some(intervened)) => {
                Some(crate::domain::InterventionRecord {
                    original_conv_id: self.original_conv_id.clone(),
                    pivot_index: *pivot,
                    revised_utterance: revised.clone(),
                    intervened: intervened.clone(),
                })
            }
            _ => None,
        }
    }
}

/// Append-only JSONL writer; every record is flushed as one line.
pub struct CheckpointWriter {
    writer: BufWriter<File>,
    path: PathBuf,
}

impl CheckpointWriter {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { writer: BufWriter::new(file), path: path.to_path_buf() })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> std::io::Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| std::io::Error::other(format!("{}: {e}", self.path.display())))?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()
    }
}

/// Reads a JSONL checkpoint, skipping malformed lines with a warning.
/// A missing file is an empty checkpoint.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> std::io::Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(record) => records.push(record),
            Err(e) => {
                tracing::warn!(path = %path.display(), line = lineno + 1, %e, "skipping malformed checkpoint line");
            }
        }
    }
    Ok(records)
}

/// Everything a completed (or partial) run directory contains.
#[derive(Debug, Default)]
pub struct RunData {
    pub pairs: Vec<PairRecord>,
    pub situations: Vec<SituationRecord>,
    pub conversations: Vec<ConversationRecord>,
    pub norms: Vec<NormRecord>,
    pub interventions: Vec<InterventionOutcome>,
}

impl RunData {
    pub fn load(dir: &Path) -> std::io::Result<Self> {
        Ok(Self {
            pairs: read_jsonl(&dir.join(PAIRS_FILE))?,
            situations: read_jsonl(&dir.join(SITUATIONS_FILE))?,
            conversations: read_jsonl(&dir.join(CONVERSATIONS_FILE))?,
            norms: read_jsonl(&dir.join(NORMS_FILE))?,
            interventions: read_jsonl(&dir.join(INTERVENTIONS_FILE))?,
        })
    }

    pub fn pair_by_id(&self, pair_id: &str) -> Option<&CharacterPair> {
        self.pairs.iter().map(|r| &r.pair).find(|p| p.pair_id == pair_id)
    }

    pub fn accepted_conversations(&self) -> Vec<&Conversation> {
        self.conversations
            .iter()
            .map(|r| &r.conversation)
            .filter(|c| c.status == ConversationStatus::Accepted)
            .collect()
    }

    pub fn ok_norms(&self) -> Vec<&NormRecord> {
        self.norms.iter().filter(|n| n.status == RecordStatus::Ok).collect()
    }

    pub fn ok_interventions(&self) -> Vec<&InterventionOutcome> {
        self.interventions.iter().filter(|i| i.status == RecordStatus::Ok).collect()
    }
}

/// One line of the exported dataset: an accepted conversation joined with
/// its violations and (when built) its intervention.
#[derive(Debug, Serialize, Deserialize)]
pub struct ExportRecord {
    pub schema_version: u32,
    pub conversation: Conversation,
    pub violations: Vec<NormViolation>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intervention: Option<InterventionOutcome>,
}

/// Writes the final dataset: accepted conversations only, never rejected or
/// failed records.
pub fn export_dataset(run_dir: &Path, out_path: &Path) -> std::io::Result<usize> {
    let data = RunData::load(run_dir)?;
    let mut writer = CheckpointWriter::open(out_path)?;
    let mut count = 0;
    for record in &data.conversations {
        let conversation = &record.conversation;
        if conversation.status != ConversationStatus::Accepted {
            continue;
        }
        debug_assert!(conversation.gate.map(|g| g.approved).unwrap_or(false));
        let violations = data
            .norms
            .iter()
            .find(|n| n.conv_id == conversation.conv_id && n.status == RecordStatus::Ok)
            .map(|n| n.violations.clone())
            .unwrap_or_default();
        let intervention = data
            .interventions
            .iter()
            .find(|i| i.original_conv_id == conversation.conv_id && i.status == RecordStatus::Ok)
            .cloned();
        writer.append(&ExportRecord {
            schema_version: SCHEMA_VERSION,
            conversation: conversation.clone(),
            violations,
            intervention,
        })?;
        count += 1;
    }
    Ok(count)
}
