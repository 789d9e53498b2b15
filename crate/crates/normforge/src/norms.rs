//! Norm-violation discovery, minimal-edit remediation handling, and
//! intervened-conversation construction.
//!
//! Discovery prompts the model per accepted conversation and validates every
//! returned stanza: violations naming a non-participant or whose evidence
//! cannot be matched to a turn by that violator are dropped (logged), not
//! repaired. Interventions replace the earliest violating turn with its
//! suggestion and regenerate the remainder without flow guidance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    first_violation, resolve_evidence, CharacterPair, Conversation, ConversationStatus,
    NormViolation, Utterance,
};
use crate::gateway::{complete_parsed, ChatRequest, CompletionError, Gateway, GatewayError};
use crate::parse::{self, ParseError, ParseMode};
use crate::prompts::{RenderContext, TemplateError, TemplateId, TemplateStore};

#[derive(Debug, Error)]
pub enum NormError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("unparseable after {attempts} attempts: {last}")]
    Unparseable { attempts: u32, last: ParseError },
    #[error("conversation {0} is not accepted")]
    NotAccepted(String),
}

impl From<CompletionError<ParseError>> for NormError {
    fn from(err: CompletionError<ParseError>) -> Self {
        match err {
            CompletionError::Gateway(e) => NormError::Gateway(e),
            CompletionError::Unparseable { attempts, last } => NormError::Unparseable { attempts, last },
        }
    }
}

/// Knobs the engine needs from the pipeline configuration.
#[derive(Debug, Clone)]
pub struct EngineSettings {
    pub chat_model: String,
    pub norms_temperature: f32,
    pub continuation_temperature: f32,
    pub max_parse_retries: u32,
    pub parse_mode: ParseMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormAnnotation {
    pub conv_id: String,
    pub violations: Vec<NormViolation>,
    pub raw_response: String,
}

/// Discovers norm violations for one accepted conversation. Survivors carry
/// a resolved `utterance_index` whose speaker equals the violator.
pub async fn discover_norms(
    gateway: &Gateway,
    templates: &TemplateStore,
    settings: &EngineSettings,
    pair: &CharacterPair,
    conversation: &Conversation,
) -> Result<NormAnnotation, NormError> {
    if conversation.status != ConversationStatus::Accepted {
        return Err(NormError::NotAccepted(conversation.conv_id.clone()));
    }
    let transcript = parse::render_conversation(&conversation.utterances);
    let ctx = RenderContext::new().with_pair(pair).set("conversation", transcript);
    let prompt = templates.render(TemplateId::NormDiscovery, &ctx)?;
    let request = ChatRequest::new(prompt, settings.norms_temperature, &settings.chat_model);
    let mode = settings.parse_mode;
    let (parsed, raw_response, _) =
        complete_parsed(gateway, &request, settings.max_parse_retries, |text| {
            parse::parse_norm_blocks(text, mode)
        })
        .await?;

    let mut violations = Vec::with_capacity(parsed.len());
    for mut violation in parsed {
        let violator = violation.violator.trim();
        if !pair.has_participant(violator) {
            tracing::warn!(
                conv = %conversation.conv_id,
                violator = %violation.violator,
                "dropping violation: violator is not a participant"
            );
            continue;
        }
        let Some(index) = resolve_evidence(conversation, &violation.evidence) else {
            tracing::warn!(
                conv = %conversation.conv_id,
                norm = %violation.norm,
                "dropping violation: evidence does not match any turn"
            );
            continue;
        };
        if conversation.utterances[index].speaker != violator {
            tracing::warn!(
                conv = %conversation.conv_id,
                norm = %violation.norm,
                index,
                "dropping violation: evidence turn belongs to the other speaker"
            );
            continue;
        }
        violation.violator = violator.to_string();
        violation.utterance_index = Some(index);
        violations.push(violation);
    }
    Ok(NormAnnotation { conv_id: conversation.conv_id.clone(), violations, raw_response })
}

/// The pieces of an intervention before the continuation is generated.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionPlan {
    pub pivot_index: usize,
    pub revised: Utterance,
    pub prefix: Vec<Utterance>,
    /// True when the suggestion text equals the original utterance.
    pub no_op_edit: bool,
}

/// Selects the earliest resolved violation and builds the revised pivot
/// utterance (same speaker, original emotion, suggestion text). `None` when
/// nothing resolves.
pub fn build_intervention(
    conversation: &Conversation,
    annotation: &NormAnnotation,
) -> Option<InterventionPlan> {
    let (violation, pivot_index) = first_violation(conversation, &annotation.violations)?;
    let original = &conversation.utterances[pivot_index];
    let revised = Utterance {
        index: pivot_index,
        speaker: violation.violator.clone(),
        emotion: original.emotion.clone(),
        text: violation.suggestion.clone(),
    };
    let no_op_edit = revised.text.trim() == original.text.trim();
    if no_op_edit {
        tracing::warn!(
            conv = %conversation.conv_id,
            pivot_index,
            "suggestion equals the original utterance (no-op edit)"
        );
    }
    Some(InterventionPlan {
        pivot_index,
        revised,
        prefix: conversation.utterances[..pivot_index].to_vec(),
        no_op_edit,
    })
}

const CONTINUATION_INSTRUCTION: &str = "Continue this conversation from the last line.";

/// The conversation prompt with the flow requirement removed, plus the
/// transcript so far and the continuation instruction.
pub fn continuation_prompt(
    templates: &TemplateStore,
    pair: &CharacterPair,
    situation_text: &str,
    transcript: &str,
) -> Result<String, TemplateError> {
    let body = templates.body(TemplateId::ConversationGen);
    let without_flow: Vec<&str> = body.split('\n').filter(|l| !l.contains("{flow}")).collect();
    let ctx = RenderContext::new().with_pair(pair).set("situation", situation_text);
    let rendered = crate::prompts::render_body(&without_flow.join("\n"), &ctx)?;
    Ok(format!("{rendered}\nConversation so far:\n{transcript}\n\n{CONTINUATION_INSTRUCTION}\n"))
}

/// Regenerates the rest of a conversation after the revised pivot, without
/// flow guidance. The returned conversation is the prefix plus revision plus
/// the parsed continuation, reindexed from zero; it carries no flow and no
/// gate.
pub async fn continue_conversation(
    gateway: &Gateway,
    templates: &TemplateStore,
    settings: &EngineSettings,
    pair: &CharacterPair,
    situation_text: &str,
    prefix_plus_revised: &[Utterance],
    intervened_conv_id: String,
    pair_id: String,
    situation_id: String,
) -> Result<Conversation, NormError> {
    assert!(!prefix_plus_revised.is_empty(), "continuation needs at least the revised turn");
    let transcript = parse::render_conversation(prefix_plus_revised);
    let prompt = continuation_prompt(templates, pair, situation_text, &transcript)?;
    let request = ChatRequest::new(prompt, settings.continuation_temperature, &settings.chat_model);
    let mode = settings.parse_mode;
    let (continuation, _, _) =
        complete_parsed(gateway, &request, settings.max_parse_retries, |text| {
            let utterances = parse::parse_conversation(text, mode)?;
            // An unknown speaker is as useless as a malformed line; retry.
            for u in &utterances {
                if !pair.has_participant(&u.speaker) {
                    return Err(ParseError {
                        format: "conversation",
                        line: u.index + 1,
                        reason: format!("unknown speaker {:?}", u.speaker),
                        raw: u.speaker.clone(),
                    });
                }
            }
            Ok(utterances)
        })
        .await?;

    let revised = prefix_plus_revised.last().expect("non-empty");
    let mut tail: &[Utterance] = &continuation;
    if let Some(head) = continuation.first() {
        if head.speaker == revised.speaker && head.text == revised.text {
            tracing::debug!("continuation repeated the revised line verbatim; stripping it");
            tail = &continuation[1..];
        }
    }
    let mut utterances: Vec<Utterance> = Vec::with_capacity(prefix_plus_revised.len() + tail.len());
    utterances.extend_from_slice(prefix_plus_revised);
    utterances.extend_from_slice(tail);
    for (i, u) in utterances.iter_mut().enumerate() {
        u.index = i;
    }
    Ok(Conversation {
        conv_id: intervened_conv_id,
        pair_id,
        situation_id,
        flow: None,
        utterances,
        summary: None,
        gate: None,
        status: ConversationStatus::Draft,
    })
}
