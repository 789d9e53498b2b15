//! Stage orchestration: characters, situations, gated conversations, and
//! norm/intervention annotation, with JSONL checkpointing and resume.
//!
//! Stages are strict barriers. Within a stage, records are processed
//! concurrently up to the backend parallelism but written in work order
//! through a single writer, so two runs with the same seed and script
//! produce byte-identical checkpoints. Resume loads each stage's checkpoint
//! before any concurrency starts and only generates what is missing.

pub mod checkpoint;
pub mod config;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dedup;
use crate::domain::{
    validate_pair, validate_utterances, CharacterPair, Conversation, ConversationFlow,
    ConversationStatus, GateResult, Situation, SituationStatus,
};
use crate::gateway::{complete_parsed, ChatRequest, Gateway};
use crate::norms::{self, EngineSettings, NormAnnotation};
use crate::parse::{self, ParseMode};
use crate::prompts::{extend_avoid_list, RenderContext, TemplateError, TemplateId, TemplateStore};

pub use checkpoint::{
    export_dataset, read_jsonl, CheckpointWriter, ConversationRecord, ExportRecord,
    InterventionOutcome, NormRecord, PairRecord, RecordStatus, RunData, SituationRecord,
    CONVERSATIONS_FILE, INTERVENTIONS_FILE, MANIFEST_FILE, NORMS_FILE, PAIRS_FILE, SCHEMA_VERSION,
    SITUATIONS_FILE, VERDICTS_FILE,
};
pub use config::{PipelineConfig, StageTemperatures, DEFAULT_FLOWS, DEFAULT_RELATIONSHIPS};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {produced} of {requested} records after retries")]
    StageFailed { stage: &'static str, produced: usize, requested: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Characters,
    Situations,
    Conversations,
    Norms,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Characters, Stage::Situations, Stage::Conversations, Stage::Norms];

    pub fn parse_list(text: &str) -> Result<Vec<Stage>, String> {
        text.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| match s {
                "characters" => Ok(Stage::Characters),
                "situations" => Ok(Stage::Situations),
                "conversations" => Ok(Stage::Conversations),
                "norms" => Ok(Stage::Norms),
                other => Err(format!(
                    "unknown stage {other:?} (expected characters, situations, conversations, norms)"
                )),
            })
            .collect()
    }
}

/// Which stage halves a run executes. The norm stage splits so the
/// discovery and intervention commands can run separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePlan {
    pub characters: bool,
    pub situations: bool,
    pub conversations: bool,
    pub discover_norms: bool,
    pub intervene: bool,
}

impl StagePlan {
    pub fn none() -> Self {
        Self {
            characters: false,
            situations: false,
            conversations: false,
            discover_norms: false,
            intervene: false,
        }
    }

    pub fn from_stages(stages: &[Stage]) -> Self {
        let mut plan = Self::none();
        for stage in stages {
            match stage {
                Stage::Characters => plan.characters = true,
                Stage::Situations => plan.situations = true,
                Stage::Conversations => plan.conversations = true,
                Stage::Norms => {
                    plan.discover_norms = true;
                    plan.intervene = true;
                }
            }
        }
        plan
    }
}

/// Content-addressed record id: stable across runs for the same
/// (stage, parent, ordinal), so resume never depends on timestamps.
pub fn record_id(stage: &str, parent: &str, ordinal: usize) -> String {
    let digest = Sha256::digest(format!("{stage}\u{1f}{parent}\u{1f}{ordinal}").as_bytes());
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("{stage}-{hex}")
}

/// Seeded uniform choice keyed by record identity; stable under resume and
/// concurrency because it never consumes a shared RNG stream.
pub fn stable_choice(seed: u64, key: &str, n: usize) -> usize {
    assert!(n > 0, "empty catalog");
    let digest = Sha256::digest(format!("{seed}\u{1f}{key}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(bytes) % n as u64) as usize
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub pairs: usize,
    pub situations_kept: usize,
    pub situations_dropped_duplicate: usize,
    pub situations_dropped_topic: usize,
    pub conversations_attempted: usize,
    pub conversations_accepted: usize,
    pub conversations_rejected: usize,
    pub conversations_failed: usize,
    pub norm_annotations: usize,
    pub violations: usize,
    pub interventions: usize,
    pub interventions_failed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestIds {
    pub pairs: Vec<String>,
    pub situations: Vec<String>,
    pub conversations: Vec<String>,
    pub norm_annotations: Vec<String>,
    pub interventions: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub run_seed: u64,
    pub counts: StageCounts,
    pub ids: ManifestIds,
    pub config: PipelineConfig,
}

pub struct Pipeline {
    config: PipelineConfig,
    gateway: Arc<Gateway>,
    templates: TemplateStore,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, gateway: Arc<Gateway>) -> Result<Self, PipelineError> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(PipelineError::Config(problems.join("; ")));
        }
        let mut templates = match &config.templates_dir {
            Some(dir) => TemplateStore::from_dir(dir)?,
            None => TemplateStore::builtin(),
        };
        if !config.extra_avoid_topics.is_empty() {
            let body = extend_avoid_list(templates.body(TemplateId::SituationGen), &config.extra_avoid_topics)?;
            templates.set_body(TemplateId::SituationGen, body);
        }
        Ok(Self { config, gateway, templates })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn templates(&self) -> &TemplateStore {
        &self.templates
    }

    fn mode(&self) -> ParseMode {
        self.config.parse_mode()
    }

    fn request(&self, prompt: String, temperature: f32) -> ChatRequest {
        ChatRequest::new(prompt, temperature, &self.config.backend.chat_model)
    }

    fn engine_settings(&self) -> EngineSettings {
        EngineSettings {
            chat_model: self.config.backend.chat_model.clone(),
            norms_temperature: self.config.stage_temperatures.norms,
            continuation_temperature: self.config.stage_temperatures.continuation,
            max_parse_retries: self.config.max_parse_retries,
            parse_mode: self.mode(),
        }
    }

    fn stage_path(&self, file: &str) -> PathBuf {
        self.config.output_dir.join(file)
    }

    /// Generates character pairs per relationship (one request each) and
    /// merges them with already-checkpointed pairs. With `generate` false,
    /// only the checkpoint is read.
    pub async fn stage_characters(&self, generate: bool) -> Result<Vec<CharacterPair>, PipelineError> {
        let path = self.stage_path(PAIRS_FILE);
        let existing: Vec<PairRecord> = read_jsonl(&path)?;
        let mut by_relationship: HashMap<String, Vec<CharacterPair>> = HashMap::new();
        for record in existing {
            by_relationship.entry(record.pair.relationship.clone()).or_default().push(record.pair);
        }

        let todo: Vec<String> = if generate {
            self.config
                .relationships
                .iter()
                .filter(|r| !by_relationship.contains_key(*r))
                .cloned()
                .collect()
        } else {
            Vec::new()
        };
        let results: Vec<(String, Result<Vec<CharacterPair>, String>)> =
            futures::stream::iter(todo.into_iter().map(|r| async move {
                let outcome = self.generate_pairs_for(&r).await;
                (r, outcome)
            }))
            .buffered(self.config.backend.parallelism.max(1))
            .collect()
            .await;
        let mut generated: HashMap<String, Result<Vec<CharacterPair>, String>> =
            results.into_iter().collect();

        let mut writer: Option<CheckpointWriter> = None;
        let mut out = Vec::new();
        for relationship in &self.config.relationships {
            if let Some(pairs) = by_relationship.remove(relationship) {
                out.extend(pairs);
                continue;
            }
            match generated.remove(relationship) {
                Some(Ok(pairs)) => {
                    let writer = match writer.as_mut() {
                        Some(w) => w,
                        None => writer.insert(CheckpointWriter::open(&path)?),
                    };
                    for pair in &pairs {
                        writer.append(&PairRecord { schema_version: SCHEMA_VERSION, pair: pair.clone() })?;
                    }
                    out.extend(pairs);
                }
                Some(Err(reason)) => {
                    tracing::error!(%relationship, %reason, "character generation failed");
                }
                None => {}
            }
        }

        if generate {
            let requested =
                self.config.relationships.len() * self.config.pairs_per_relationship as usize;
            if (out.len() as f64) < self.config.min_stage_yield * requested as f64 {
                return Err(PipelineError::StageFailed {
                    stage: "characters",
                    produced: out.len(),
                    requested,
                });
            }
        }
        Ok(out)
    }

    async fn generate_pairs_for(&self, relationship: &str) -> Result<Vec<CharacterPair>, String> {
        let catalog = &self.config.personal_desc_catalog;
        let personal_desc =
            &catalog[stable_choice(self.config.seed, &format!("personal_desc/{relationship}"), catalog.len())];
        let ctx = RenderContext::new()
            .set("num_pairs", self.config.pairs_per_relationship.to_string())
            .set("relation_desc", relationship)
            .set("personal_desc", personal_desc);
        let prompt = self.templates.render(TemplateId::CharacterPair, &ctx).map_err(|e| e.to_string())?;
        let request = self.request(prompt, self.config.stage_temperatures.characters);
        let mode = self.mode();
        let (blocks, _, _) = complete_parsed(&self.gateway, &request, self.config.max_parse_retries, |t| {
            parse::parse_character_pairs(t, mode)
        })
        .await
        .map_err(|e| e.to_string())?;

        let mut pairs = Vec::with_capacity(blocks.len());
        for (i, block) in blocks.into_iter().enumerate() {
            let pair = CharacterPair {
                pair_id: record_id("pair", relationship, i),
                relationship: relationship.to_string(),
                profiles: block.profiles,
                closeness: block.closeness,
                how_met: block.how_met,
                known_duration: block.known_duration,
            };
            for finding in validate_pair(&pair) {
                tracing::warn!(pair = %pair.pair_id, field = %finding.field, "{}", finding.message);
            }
            pairs.push(pair);
        }
        Ok(pairs)
    }

    /// Generates up to five situations per pair, drops configured topics,
    /// and deduplicates near-duplicates within each relationship group (or
    /// globally). Group membership in the checkpoint marks a group done.
    pub async fn stage_situations(
        &self,
        pairs: &[CharacterPair],
        generate: bool,
    ) -> Result<Vec<Situation>, PipelineError> {
        let path = self.stage_path(SITUATIONS_FILE);
        let existing: Vec<SituationRecord> = read_jsonl(&path)?;
        let mut existing_by_pair: HashMap<String, Vec<Situation>> = HashMap::new();
        for record in existing {
            existing_by_pair.entry(record.situation.pair_id.clone()).or_default().push(record.situation);
        }
        let pairs_by_id: BTreeMap<String, CharacterPair> =
            pairs.iter().map(|p| (p.pair_id.clone(), p.clone())).collect();

        let groups: Vec<Vec<&CharacterPair>> = if self.config.global_dedup {
            vec![pairs.iter().collect()]
        } else {
            let mut order: Vec<&str> = Vec::new();
            let mut grouped: HashMap<&str, Vec<&CharacterPair>> = HashMap::new();
            for pair in pairs {
                if !grouped.contains_key(pair.relationship.as_str()) {
                    order.push(&pair.relationship);
                }
                grouped.entry(&pair.relationship).or_default().push(pair);
            }
            order.into_iter().map(|r| grouped.remove(r).expect("grouped")).collect()
        };

        let mut writer: Option<CheckpointWriter> = None;
        let mut out = Vec::new();
        let mut pairs_ok = 0usize;
        for group in groups {
            let done = group.iter().any(|p| existing_by_pair.contains_key(&p.pair_id));
            if done {
                for pair in &group {
                    if let Some(records) = existing_by_pair.remove(&pair.pair_id) {
                        pairs_ok += 1;
                        out.extend(records);
                    }
                }
                continue;
            }
            if !generate {
                continue;
            }

            let results: Vec<(&CharacterPair, Result<Vec<String>, String>)> =
                futures::stream::iter(group.iter().map(|pair| async move {
                    (*pair, self.generate_situations_for(pair).await)
                }))
                .buffered(self.config.backend.parallelism.max(1))
                .collect()
                .await;

            let mut group_situations: Vec<Situation> = Vec::new();
            for (pair, outcome) in results {
                match outcome {
                    Ok(texts) => {
                        pairs_ok += 1;
                        let names =
                            [pair.profiles[0].name.clone(), pair.profiles[1].name.clone()];
                        for (i, text) in texts.into_iter().enumerate() {
                            let normalized =
                                dedup::normalize_situation(&text, &names, self.config.name_handling);
                            let status = if self.is_dropped_topic(&normalized) {
                                SituationStatus::DroppedTopic
                            } else {
                                SituationStatus::Kept
                            };
                            group_situations.push(Situation {
                                situation_id: record_id("situation", &pair.pair_id, i),
                                pair_id: pair.pair_id.clone(),
                                text,
                                normalized_text: normalized,
                                embedding: None,
                                status,
                            });
                        }
                    }
                    Err(reason) => {
                        tracing::error!(pair = %pair.pair_id, %reason, "situation generation failed");
                    }
                }
            }
            let deduped = match dedup::dedup_group(
                &self.gateway,
                &pairs_by_id,
                group_situations,
                self.config.dedup_threshold,
                self.config.name_handling,
            )
            .await
            {
                Ok(situations) => situations,
                Err(e) => {
                    tracing::error!(%e, "dedup failed for group; situations not checkpointed");
                    continue;
                }
            };
            let writer = match writer.as_mut() {
                Some(w) => w,
                None => writer.insert(CheckpointWriter::open(&path)?),
            };
            for situation in &deduped {
                writer.append(&SituationRecord {
                    schema_version: SCHEMA_VERSION,
                    situation: situation.clone(),
                })?;
            }
            out.extend(deduped);
        }

        if generate && !pairs.is_empty() {
            if (pairs_ok as f64) < self.config.min_stage_yield * pairs.len() as f64 {
                return Err(PipelineError::StageFailed {
                    stage: "situations",
                    produced: pairs_ok,
                    requested: pairs.len(),
                });
            }
        }
        Ok(out)
    }

    fn is_dropped_topic(&self, normalized_text: &str) -> bool {
        if self.config.drop_topics.is_empty() {
            return false;
        }
        let haystack = normalized_text.to_lowercase();
        self.config.drop_topics.iter().any(|t| haystack.contains(&t.to_lowercase()))
    }

    async fn generate_situations_for(&self, pair: &CharacterPair) -> Result<Vec<String>, String> {
        let ctx = RenderContext::new().with_pair(pair);
        let prompt = self.templates.render(TemplateId::SituationGen, &ctx).map_err(|e| e.to_string())?;
        let request = self.request(prompt, self.config.stage_temperatures.situations);
        let mode = self.mode();
        let (texts, _, _) = complete_parsed(&self.gateway, &request, self.config.max_parse_retries, |t| {
            parse::parse_situations(t, mode)
        })
        .await
        .map_err(|e| e.to_string())?;
        Ok(texts)
    }

    /// Summarize-then-verify gating. The summary is generated at the summary
    /// temperature and stored on the conversation; the verification request
    /// always runs at temperature 0 exactly.
    pub async fn self_verify(
        &self,
        conversation: &mut Conversation,
        situation_text: &str,
        flow_text: &str,
    ) -> Result<GateResult, String> {
        let transcript = parse::render_conversation(&conversation.utterances);
        let ctx = RenderContext::new().set("conversation", transcript);
        let prompt = self.templates.render(TemplateId::Summarize, &ctx).map_err(|e| e.to_string())?;
        let request = self.request(prompt, self.config.stage_temperatures.summary);
        let summary = self.gateway.complete(&request).await.map_err(|e| e.to_string())?.text;

        let ctx = RenderContext::new()
            .set("situation", situation_text)
            .set("flow", flow_text)
            .set("summary", &summary);
        let prompt = self.templates.render(TemplateId::SelfVerify, &ctx).map_err(|e| e.to_string())?;
        let request = self.request(prompt, 0.0);
        let mode = self.mode();
        let (gate, _, _) = complete_parsed(&self.gateway, &request, self.config.max_parse_retries, |t| {
            parse::parse_gate(t, mode)
        })
        .await
        .map_err(|e| e.to_string())?;

        conversation.summary = Some(summary);
        conversation.gate = Some(gate);
        Ok(gate)
    }

    /// Generates one flow-guided conversation per kept situation and gates
    /// it. Every outcome is checkpointed; failures never abort the stage.
    pub async fn stage_conversations(
        &self,
        pairs: &[CharacterPair],
        situations: &[Situation],
        generate: bool,
    ) -> Result<Vec<ConversationRecord>, PipelineError> {
        let path = self.stage_path(CONVERSATIONS_FILE);
        let existing: Vec<ConversationRecord> = read_jsonl(&path)?;
        let mut by_situation: HashMap<String, ConversationRecord> =
            existing.into_iter().map(|r| (r.conversation.situation_id.clone(), r)).collect();
        let pairs_by_id: HashMap<&str, &CharacterPair> =
            pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect();

        let work: Vec<&Situation> =
            situations.iter().filter(|s| s.status == SituationStatus::Kept).collect();
        let mut writer: Option<CheckpointWriter> = None;
        let mut out = Vec::with_capacity(work.len());

        enum Slot {
            Existing(ConversationRecord),
            Todo(usize),
        }
        let mut slots = Vec::with_capacity(work.len());
        let mut todo: Vec<&Situation> = Vec::new();
        for situation in &work {
            match by_situation.remove(&situation.situation_id) {
                Some(record) => slots.push(Slot::Existing(record)),
                None if generate => {
                    slots.push(Slot::Todo(todo.len()));
                    todo.push(situation);
                }
                None => {}
            }
        }

        let pairs_by_id = &pairs_by_id;
        let results: Vec<ConversationRecord> =
            futures::stream::iter(todo.iter().map(|situation| async move {
                let pair = pairs_by_id
                    .get(situation.pair_id.as_str())
                    .expect("situation references a known pair");
                self.generate_conversation_for(pair, situation).await
            }))
            .buffered(self.config.backend.parallelism.max(1))
            .collect()
            .await;

        for slot in slots {
            match slot {
                Slot::Existing(record) => out.push(record),
                Slot::Todo(i) => {
                    let record = results[i].clone();
                    let writer = match writer.as_mut() {
                        Some(w) => w,
                        None => writer.insert(CheckpointWriter::open(&path)?),
                    };
                    writer.append(&record)?;
                    out.push(record);
                }
            }
        }
        Ok(out)
    }

    async fn generate_conversation_for(
        &self,
        pair: &CharacterPair,
        situation: &Situation,
    ) -> ConversationRecord {
        let conv_id = record_id("conversation", &situation.situation_id, 0);
        let flows = &self.config.flow_catalog;
        let flow_text =
            &flows[stable_choice(self.config.seed, &format!("flow/{}", situation.situation_id), flows.len())];

        let mut conversation = Conversation {
            conv_id,
            pair_id: pair.pair_id.clone(),
            situation_id: situation.situation_id.clone(),
            flow: Some(ConversationFlow::new(flow_text.clone())),
            utterances: Vec::new(),
            summary: None,
            gate: None,
            status: ConversationStatus::Draft,
        };
        let failed = |mut conversation: Conversation, reason: String| {
            tracing::error!(conv = %conversation.conv_id, %reason, "conversation failed");
            conversation.status = ConversationStatus::Failed;
            ConversationRecord {
                schema_version: SCHEMA_VERSION,
                conversation,
                failure_reason: Some(reason),
            }
        };

        let ctx = RenderContext::new()
            .with_pair(pair)
            .set("situation", &situation.text)
            .set("flow", flow_text);
        let prompt = match self.templates.render(TemplateId::ConversationGen, &ctx) {
            Ok(p) => p,
            Err(e) => return failed(conversation, e.to_string()),
        };
        let request = self.request(prompt, self.config.stage_temperatures.conversation);
        let mode = self.mode();
        let utterances = match complete_parsed(&self.gateway, &request, self.config.max_parse_retries, |t| {
            parse::parse_conversation(t, mode)
        })
        .await
        {
            Ok((utterances, _, _)) => utterances,
            Err(e) => return failed(conversation, e.to_string()),
        };

        let findings = validate_utterances(pair, &utterances);
        if !findings.is_empty() {
            let reason = findings
                .iter()
                .map(|f| format!("{}: {}", f.field, f.message))
                .collect::<Vec<_>>()
                .join("; ");
            return failed(conversation, reason);
        }
        for (index, emotion) in crate::domain::noncanonical_emotions(&utterances) {
            tracing::warn!(conv = %conversation.conv_id, index, %emotion, "emotion outside the shipped lexicon");
        }
        conversation.utterances = utterances;

        match self.self_verify(&mut conversation, &situation.text, flow_text).await {
            Ok(gate) => {
                conversation.status =
                    if gate.approved { ConversationStatus::Accepted } else { ConversationStatus::Rejected };
                let failure_reason = (!gate.approved).then(|| "gate rejected".to_string());
                ConversationRecord { schema_version: SCHEMA_VERSION, conversation, failure_reason }
            }
            Err(reason) => failed(conversation, reason),
        }
    }

    /// Discovers norms for each accepted conversation, then builds and
    /// continues an intervention for each conversation with at least one
    /// resolved violation. The `discover` and `intervene` halves can run
    /// independently; disabled halves contribute only checkpointed records.
    pub async fn stage_norms_and_interventions(
        &self,
        pairs: &[CharacterPair],
        situations: &[Situation],
        conversations: &[ConversationRecord],
        discover: bool,
        intervene: bool,
    ) -> Result<(Vec<NormRecord>, Vec<InterventionOutcome>), PipelineError> {
        let norms_path = self.stage_path(NORMS_FILE);
        let interventions_path = self.stage_path(INTERVENTIONS_FILE);
        let mut existing_norms: HashMap<String, NormRecord> = read_jsonl::<NormRecord>(&norms_path)?
            .into_iter()
            .map(|r| (r.conv_id.clone(), r))
            .collect();
        let mut existing_interventions: HashMap<String, InterventionOutcome> =
            read_jsonl::<InterventionOutcome>(&interventions_path)?
                .into_iter()
                .map(|r| (r.original_conv_id.clone(), r))
                .collect();
        let pairs_by_id: HashMap<&str, &CharacterPair> =
            pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect();
        let situations_by_id: HashMap<&str, &Situation> =
            situations.iter().map(|s| (s.situation_id.as_str(), s)).collect();

        let accepted: Vec<&Conversation> = conversations
            .iter()
            .map(|r| &r.conversation)
            .filter(|c| c.status == ConversationStatus::Accepted)
            .collect();

        struct Work<'a> {
            conversation: &'a Conversation,
            norm: Option<NormRecord>,
            intervention: Option<InterventionOutcome>,
        }
        let mut items: Vec<Work> = accepted
            .iter()
            .map(|c| Work {
                conversation: c,
                norm: existing_norms.remove(&c.conv_id),
                intervention: existing_interventions.remove(&c.conv_id),
            })
            .collect();

        let pairs_by_id = &pairs_by_id;
        let situations_by_id = &situations_by_id;
        let results: Vec<(usize, Option<NormRecord>, Option<InterventionOutcome>)> =
            futures::stream::iter(items.iter().enumerate().map(|(i, work)| {
                let norm = work.norm.clone();
                let intervention = work.intervention.clone();
                let conversation = work.conversation;
                async move {
                    let norm = match norm {
                        Some(record) => Some(record),
                        None if discover => Some(self.annotate(conversation, pairs_by_id).await),
                        None => None,
                    };
                    let wants_intervention = norm
                        .as_ref()
                        .map(|n| n.status == RecordStatus::Ok && !n.violations.is_empty())
                        .unwrap_or(false);
                    let intervention = match intervention {
                        Some(record) => Some(record),
                        None if intervene && wants_intervention => {
                            let norm = norm.as_ref().expect("wants_intervention implies a record");
                            Some(self.intervene(conversation, norm, pairs_by_id, situations_by_id).await)
                        }
                        None => None,
                    };
                    (i, norm, intervention)
                }
            }))
            .buffered(self.config.backend.parallelism.max(1))
            .collect()
            .await;

        let mut by_index: BTreeMap<usize, (Option<NormRecord>, Option<InterventionOutcome>)> =
            results.into_iter().map(|(i, n, iv)| (i, (n, iv))).collect();

        let mut norm_writer: Option<CheckpointWriter> = None;
        let mut intervention_writer: Option<CheckpointWriter> = None;
        let mut norm_records = Vec::with_capacity(items.len());
        let mut intervention_records = Vec::new();
        for (i, work) in items.iter_mut().enumerate() {
            let (norm, intervention) = by_index.remove(&i).expect("result for every item");
            if let Some(norm) = norm {
                if work.norm.is_none() {
                    let writer = match norm_writer.as_mut() {
                        Some(w) => w,
                        None => norm_writer.insert(CheckpointWriter::open(&norms_path)?),
                    };
                    writer.append(&norm)?;
                }
                norm_records.push(norm);
            }
            if let Some(outcome) = intervention {
                if work.intervention.is_none() {
                    let writer = match intervention_writer.as_mut() {
                        Some(w) => w,
                        None => intervention_writer.insert(CheckpointWriter::open(&interventions_path)?),
                    };
                    writer.append(&outcome)?;
                }
                intervention_records.push(outcome);
            }
        }
        Ok((norm_records, intervention_records))
    }

    async fn annotate(
        &self,
        conversation: &Conversation,
        pairs_by_id: &HashMap<&str, &CharacterPair>,
    ) -> NormRecord {
        let Some(pair) = pairs_by_id.get(conversation.pair_id.as_str()) else {
            return NormRecord {
                schema_version: SCHEMA_VERSION,
                conv_id: conversation.conv_id.clone(),
                status: RecordStatus::Failed,
                violations: Vec::new(),
                raw_response: String::new(),
                failure_reason: Some(format!("unknown pair {}", conversation.pair_id)),
            };
        };
        match norms::discover_norms(&self.gateway, &self.templates, &self.engine_settings(), pair, conversation)
            .await
        {
            Ok(NormAnnotation { conv_id, violations, raw_response }) => NormRecord {
                schema_version: SCHEMA_VERSION,
                conv_id,
                status: RecordStatus::Ok,
                violations,
                raw_response,
                failure_reason: None,
            },
            Err(e) => {
                tracing::error!(conv = %conversation.conv_id, %e, "norm discovery failed");
                NormRecord {
                    schema_version: SCHEMA_VERSION,
                    conv_id: conversation.conv_id.clone(),
                    status: RecordStatus::Failed,
                    violations: Vec::new(),
                    raw_response: String::new(),
                    failure_reason: Some(e.to_string()),
                }
            }
        }
    }

    async fn intervene(
        &self,
        conversation: &Conversation,
        norm: &NormRecord,
        pairs_by_id: &HashMap<&str, &CharacterPair>,
        situations_by_id: &HashMap<&str, &Situation>,
    ) -> InterventionOutcome {
        let failed = |reason: String, no_op: bool| InterventionOutcome {
            schema_version: SCHEMA_VERSION,
            original_conv_id: conversation.conv_id.clone(),
            status: RecordStatus::Failed,
            pivot_index: None,
            revised_utterance: None,
            intervened: None,
            no_op_edit: no_op,
            failure_reason: Some(reason),
        };
        let annotation = NormAnnotation {
            conv_id: norm.conv_id.clone(),
            violations: norm.violations.clone(),
            raw_response: String::new(),
        };
        let Some(plan) = norms::build_intervention(conversation, &annotation) else {
            return failed("no violation resolves to a turn".to_string(), false);
        };
        let Some(pair) = pairs_by_id.get(conversation.pair_id.as_str()) else {
            return failed(format!("unknown pair {}", conversation.pair_id), plan.no_op_edit);
        };
        let Some(situation) = situations_by_id.get(conversation.situation_id.as_str()) else {
            return failed(format!("unknown situation {}", conversation.situation_id), plan.no_op_edit);
        };

        let mut prefix_plus_revised = plan.prefix.clone();
        prefix_plus_revised.push(plan.revised.clone());
        match norms::continue_conversation(
            &self.gateway,
            &self.templates,
            &self.engine_settings(),
            pair,
            &situation.text,
            &prefix_plus_revised,
            record_id("intervention", &conversation.conv_id, 0),
            conversation.pair_id.clone(),
            conversation.situation_id.clone(),
        )
        .await
        {
            Ok(intervened) => InterventionOutcome {
                schema_version: SCHEMA_VERSION,
                original_conv_id: conversation.conv_id.clone(),
                status: RecordStatus::Ok,
                pivot_index: Some(plan.pivot_index),
                revised_utterance: Some(plan.revised),
                intervened: Some(intervened),
                no_op_edit: plan.no_op_edit,
                failure_reason: None,
            },
            Err(e) => {
                tracing::error!(conv = %conversation.conv_id, %e, "intervention continuation failed");
                failed(e.to_string(), plan.no_op_edit)
            }
        }
    }

    /// Runs every stage with barriers and writes the manifest.
    pub async fn run(&self) -> Result<DatasetManifest, PipelineError> {
        self.run_stages(&Stage::ALL).await
    }

    /// Runs the selected stages; unselected stages contribute only their
    /// checkpointed records.
    pub async fn run_stages(&self, stages: &[Stage]) -> Result<DatasetManifest, PipelineError> {
        self.run_plan(&StagePlan::from_stages(stages)).await
    }

    /// Runs the planned stage halves. The manifest is rebuilt from the full
    /// record set either way.
    pub async fn run_plan(&self, plan: &StagePlan) -> Result<DatasetManifest, PipelineError> {
        std::fs::create_dir_all(&self.config.output_dir)?;
        let pairs = self.stage_characters(plan.characters).await?;
        let situations = self.stage_situations(&pairs, plan.situations).await?;
        let conversations = self.stage_conversations(&pairs, &situations, plan.conversations).await?;
        let (norms, interventions) = self
            .stage_norms_and_interventions(
                &pairs,
                &situations,
                &conversations,
                plan.discover_norms,
                plan.intervene,
            )
            .await?;

        let manifest = self.build_manifest(&pairs, &situations, &conversations, &norms, &interventions);
        let path = self.stage_path(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
        Ok(manifest)
    }

    fn build_manifest(
        &self,
        pairs: &[CharacterPair],
        situations: &[Situation],
        conversations: &[ConversationRecord],
        norms: &[NormRecord],
        interventions: &[InterventionOutcome],
    ) -> DatasetManifest {
        let mut counts = StageCounts { pairs: pairs.len(), ..StageCounts::default() };
        for situation in situations {
            match situation.status {
                SituationStatus::Kept => counts.situations_kept += 1,
                SituationStatus::DroppedDuplicate => counts.situations_dropped_duplicate += 1,
                SituationStatus::DroppedTopic => counts.situations_dropped_topic += 1,
            }
        }
        for record in conversations {
            counts.conversations_attempted += 1;
            match record.conversation.status {
                ConversationStatus::Accepted => counts.conversations_accepted += 1,
                ConversationStatus::Rejected => counts.conversations_rejected += 1,
                _ => counts.conversations_failed += 1,
            }
        }
        counts.norm_annotations = norms.iter().filter(|n| n.status == RecordStatus::Ok).count();
        counts.violations = norms.iter().map(|n| n.violations.len()).sum();
        counts.interventions = interventions.iter().filter(|i| i.status == RecordStatus::Ok).count();
        counts.interventions_failed =
            interventions.iter().filter(|i| i.status == RecordStatus::Failed).count();

        let ids = ManifestIds {
            pairs: pairs.iter().map(|p| p.pair_id.clone()).collect(),
            situations: situations.iter().map(|s| s.situation_id.clone()).collect(),
            conversations: conversations.iter().map(|r| r.conversation.conv_id.clone()).collect(),
            norm_annotations: norms.iter().map(|n| n.conv_id.clone()).collect(),
            interventions: interventions.iter().map(|i| i.original_conv_id.clone()).collect(),
        };
        DatasetManifest {
            schema_version: SCHEMA_VERSION,
            run_seed: self.config.seed,
            counts,
            ids,
            config: self.config.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_ids_are_stable_and_distinct() {
        assert_eq!(record_id("pair", "siblings", 0), record_id("pair", "siblings", 0));
        assert_ne!(record_id("pair", "siblings", 0), record_id("pair", "siblings", 1));
        assert_ne!(record_id("pair", "siblings", 0), record_id("situation", "siblings", 0));
        assert!(record_id("pair", "siblings", 0).starts_with("pair-"));
    }

    #[test]
    fn stable_choice_is_deterministic_and_in_range() {
        for n in 1..=7 {
            for key in ["a", "b", "flow/x"] {
                let c = stable_choice(42, key, n);
                assert_eq!(c, stable_choice(42, key, n));
                assert!(c < n);
            }
        }
        // Different seeds shift assignments somewhere.
        let moved = (0..64).any(|i| {
            let key = format!("k{i}");
            stable_choice(1, &key, 5) != stable_choice(2, &key, 5)
        });
        assert!(moved);
    }

    #[test]
    fn stage_list_parsing() {
        assert_eq!(
            Stage::parse_list("characters, situations").unwrap(),
            vec![Stage::Characters, Stage::Situations]
        );
        assert!(Stage::parse_list("nope").is_err());
    }
}
