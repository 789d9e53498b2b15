//! Shared domain types for the generation pipeline, plus conversation-level
//! resolution logic (evidence-to-turn matching, first-violation selection,
//! record validation).
//!
//! All types here are plain immutable values; they are safe to clone and
//! share across tasks.

use serde::{Deserialize, Serialize};

/// Intimacy labels a generated pair may carry. Anything else is a validation
/// finding, not a hard error.
pub const CLOSENESS_LABELS: [&str; 5] = [
    "extremely close",
    "very close",
    "moderately close",
    "slightly close",
    "not close at all",
];

/// The 24-term emotion lexicon (8 primary emotions at 3 intensities).
/// Labels outside this set are flagged, never rejected.
pub const EMOTION_LEXICON: [&str; 24] = [
    "serenity",
    "joy",
    "ecstasy",
    "acceptance",
    "trust",
    "admiration",
    "apprehension",
    "fear",
    "terror",
    "distraction",
    "surprise",
    "amazement",
    "pensiveness",
    "sadness",
    "grief",
    "boredom",
    "disgust",
    "loathing",
    "annoyance",
    "anger",
    "rage",
    "interest",
    "anticipation",
    "vigilance",
];

/// True when `mbti` is one of the 16 valid codes, case-insensitively.
pub fn is_valid_mbti(mbti: &str) -> bool {
    let up = mbti.trim().to_ascii_uppercase();
    let bytes = up.as_bytes();
    bytes.len() == 4
        && matches!(bytes[0], b'E' | b'I')
        && matches!(bytes[1], b'S' | b'N')
        && matches!(bytes[2], b'T' | b'F')
        && matches!(bytes[3], b'J' | b'P')
}

/// True when `label` is in the shipped 24-term emotion lexicon.
pub fn is_canonical_emotion(label: &str) -> bool {
    let lower = label.trim().to_lowercase();
    EMOTION_LEXICON.contains(&lower.as_str())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterProfile {
    pub name: String,
    pub age: u32,
    pub personality: String,
    pub mbti: String,
    pub mbti_desc: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterPair {
    pub pair_id: String,
    pub relationship: String,
    pub profiles: [CharacterProfile; 2],
    pub closeness: String,
    pub how_met: String,
    pub known_duration: String,
}

impl CharacterPair {
    pub fn names(&self) -> [&str; 2] {
        [&self.profiles[0].name, &self.profiles[1].name]
    }

    pub fn has_participant(&self, name: &str) -> bool {
        let name = name.trim();
        self.profiles.iter().any(|p| p.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SituationStatus {
    Kept,
    DroppedDuplicate,
    DroppedTopic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Situation {
    pub situation_id: String,
    pub pair_id: String,
    pub text: String,
    pub normalized_text: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub embedding: Option<Vec<f32>>,
    pub status: SituationStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub index: usize,
    pub speaker: String,
    pub emotion: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationFlow {
    pub description: String,
}

impl ConversationFlow {
    pub fn new(description: impl Into<String>) -> Self {
        Self { description: description.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateResult {
    pub situation_score: u8,
    pub flow_score: u8,
    pub approved: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversationStatus {
    Draft,
    Accepted,
    Rejected,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub conv_id: String,
    pub pair_id: String,
    pub situation_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flow: Option<ConversationFlow>,
    pub utterances: Vec<Utterance>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub summary: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gate: Option<GateResult>,
    pub status: ConversationStatus,
}

impl Conversation {
    /// Concatenated utterance texts, one conversation = one document.
    pub fn joined_text(&self) -> String {
        let texts: Vec<&str> = self.utterances.iter().map(|u| u.text.as_str()).collect();
        texts.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormViolation {
    pub norm: String,
    pub description: String,
    pub violator: String,
    pub evidence: String,
    pub suggestion: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub utterance_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub original_conv_id: String,
    pub pivot_index: usize,
    pub revised_utterance: Utterance,
    pub intervened: Conversation,
}

/// One invariant breach found by a validator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationFinding {
    pub field: String,
    pub message: String,
}

impl ValidationFinding {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self { field: field.to_string(), message: message.into() }
    }
}

/// Checks every `CharacterPair`/`CharacterProfile` invariant; returns one
/// finding per breach, empty when the pair is valid.
pub fn validate_pair(pair: &CharacterPair) -> Vec<ValidationFinding> {
    let mut findings = Vec::new();
    for (i, profile) in pair.profiles.iter().enumerate() {
        let who = format!("profiles[{i}]");
        if profile.name.trim().is_empty() {
            findings.push(ValidationFinding::new(&format!("{who}.name"), "name is empty"));
        }
        if profile.name.contains('\n') {
            findings.push(ValidationFinding::new(&format!("{who}.name"), "name contains a newline"));
        }
        if profile.age == 0 {
            findings.push(ValidationFinding::new(&format!("{who}.age"), "age must be > 0"));
        }
        if !is_valid_mbti(&profile.mbti) {
            findings.push(ValidationFinding::new(
                &format!("{who}.mbti"),
                format!("{:?} is not one of the 16 MBTI codes", profile.mbti),
            ));
        }
    }
    if pair.profiles[0].name.trim() == pair.profiles[1].name.trim() {
        findings.push(ValidationFinding::new("profiles", "the two profile names must differ"));
    }
    if !CLOSENESS_LABELS.contains(&pair.closeness.trim().to_lowercase().as_str()) {
        findings.push(ValidationFinding::new(
            "closeness",
            format!("{:?} is not one of the five closeness labels", pair.closeness),
        ));
    }
    findings
}

/// Validates parsed utterances against the pair: unknown speakers are fatal,
/// emotions outside the shipped lexicon are flagged only.
pub fn validate_utterances(pair: &CharacterPair, utterances: &[Utterance]) -> Vec<ValidationFinding> {
    let mut findings = Vec::new();
    for u in utterances {
        if !pair.has_participant(&u.speaker) {
            findings.push(ValidationFinding::new(
                &format!("utterances[{}].speaker", u.index),
                format!("{:?} is not a participant", u.speaker),
            ));
        }
    }
    findings
}

/// Emotion labels outside the 24-term lexicon, for warn-level flagging.
pub fn noncanonical_emotions(utterances: &[Utterance]) -> Vec<(usize, String)> {
    utterances
        .iter()
        .filter(|u| !is_canonical_emotion(&u.emotion))
        .map(|u| (u.index, u.emotion.clone()))
        .collect()
}

fn normalize_for_match(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last_space = true;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            out.extend(ch.to_lowercase());
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

fn match_tokens(text: &str) -> std::collections::BTreeSet<String> {
    normalize_for_match(text).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

fn jaccard(a: &std::collections::BTreeSet<String>, b: &std::collections::BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 { 0.0 } else { inter as f64 / union as f64 }
}

/// Minimum token-overlap for the fuzzy evidence tier.
pub const EVIDENCE_JACCARD_FLOOR: f64 = 0.6;

/// Matches raw evidence text back to an utterance index.
///
/// Three tiers, each tried across the whole conversation before falling
/// through: exact equality after whitespace trim, then case/punctuation
/// normalized equality, then highest token-set Jaccard overlap at or above
/// [`EVIDENCE_JACCARD_FLOOR`]. Ties resolve to the smallest index. `None`
/// when no tier matches.
pub fn resolve_evidence(conversation: &Conversation, evidence: &str) -> Option<usize> {
    let trimmed = evidence.trim();
    if trimmed.is_empty() {
        return None;
    }
    // Tier 1: exact after trim.
    for u in &conversation.utterances {
        if u.text.trim() == trimmed {
            return Some(u.index);
        }
    }
    // Tier 2: case/punctuation-normalized equality.
    let norm = normalize_for_match(trimmed);
    if !norm.is_empty() {
        for u in &conversation.utterances {
            if normalize_for_match(&u.text) == norm {
                return Some(u.index);
            }
        }
    }
    // Tier 3: best token-overlap at or above the floor.
    let ev_tokens = match_tokens(trimmed);
    if ev_tokens.is_empty() {
        return None;
    }
    let mut best: Option<(f64, usize)> = None;
    for u in &conversation.utterances {
        let score = jaccard(&ev_tokens, &match_tokens(&u.text));
        if score >= EVIDENCE_JACCARD_FLOOR {
            let better = match best {
                None => true,
                Some((s, i)) => score > s || (score == s && u.index < i),
            };
            if better {
                best = Some((score, u.index));
            }
        }
    }
    best.map(|(_, i)| i)
}

/// Picks the violation whose evidence resolves to the earliest turn.
///
/// Violations that already carry `utterance_index` use it; others go through
/// [`resolve_evidence`]. Unresolvable violations are skipped. When two
/// violations resolve to the same index, the one earlier in the input list
/// wins.
pub fn first_violation<'a>(
    conversation: &Conversation,
    violations: &'a [NormViolation],
) -> Option<(&'a NormViolation, usize)> {
    let mut best: Option<(&NormViolation, usize)> = None;
    for v in violations {
        let idx = v.utterance_index.or_else(|| resolve_evidence(conversation, &v.evidence));
        let Some(idx) = idx else { continue };
        if idx >= conversation.utterances.len() {
            continue;
        }
        match best {
            Some((_, b)) if b <= idx => {}
            _ => best = Some((v, idx)),
        }
    }
    best
}
