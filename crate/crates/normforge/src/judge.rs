//! Model-as-judge scoring: conversation naturalness, escalation level, and
//! original-vs-intervened quality comparison, plus the aggregate report.
//!
//! Judges run at temperature 0 by default for score stability, one call per
//! conversation. Every verdict is an explanation followed by a 1-5 rating.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Conversation;
use crate::gateway::{complete_parsed, ChatRequest, CompletionError, Gateway, GatewayError};
use crate::parse::{self, ParseError};
use crate::prompts::{RenderContext, TemplateError, TemplateId, TemplateStore};

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("unparseable verdict after {attempts} attempts: {last}")]
    Unparseable { attempts: u32, last: ParseError },
    #[error("conversations {0} and {1} do not share a pair and situation")]
    MismatchedConversations(String, String),
    #[error("missing verdicts: {0}")]
    MissingVerdicts(String),
}

impl From<CompletionError<ParseError>> for JudgeError {
    fn from(err: CompletionError<ParseError>) -> Self {
        match err {
            CompletionError::Gateway(e) => JudgeError::Gateway(e),
            CompletionError::Unparseable { attempts, last } => JudgeError::Unparseable { attempts, last },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Naturalness,
    Escalation,
    InterventionQuality,
}

/// Which side of the original/intervened comparison a verdict scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictTarget {
    Original,
    Intervened,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub kind: VerdictKind,
    pub rating: u8,
    pub explanation: String,
    pub conv_ids: Vec<String>,
}

/// Judge knobs, factored out of the pipeline config.
#[derive(Debug, Clone)]
pub struct JudgeSettings {
    pub chat_model: String,
    pub temperature: f32,
    pub max_parse_retries: u32,
}

async fn rate(
    gateway: &Gateway,
    settings: &JudgeSettings,
    prompt: String,
) -> Result<(String, u8), JudgeError> {
    let request = ChatRequest::new(prompt, settings.temperature, &settings.chat_model);
    let ((explanation, rating), _, _) =
        complete_parsed(gateway, &request, settings.max_parse_retries, parse::parse_rating).await?;
    Ok((explanation, rating))
}

/// Scores how natural the conversation reads; the relationship label may be
/// absent ("unknown" is substituted, and the judge is told to infer it).
pub async fn judge_naturalness(
    gateway: &Gateway,
    templates: &TemplateStore,
    settings: &JudgeSettings,
    conversation: &Conversation,
    relationship: Option<&str>,
) -> Result<JudgeVerdict, JudgeError> {
    let ctx = RenderContext::new()
        .set("relationship", relationship.unwrap_or("unknown"))
        .set("conv", parse::render_conversation(&conversation.utterances));
    let prompt = templates.render(TemplateId::NaturalnessJudge, &ctx)?;
    let (explanation, rating) = rate(gateway, settings, prompt).await?;
    Ok(JudgeVerdict {
        kind: VerdictKind::Naturalness,
        rating,
        explanation,
        conv_ids: vec![conversation.conv_id.clone()],
    })
}

/// Scores how far the conversation escalated (1 calm .. 5 very hostile).
pub async fn judge_escalation(
    gateway: &Gateway,
    templates: &TemplateStore,
    settings: &JudgeSettings,
    conversation: &Conversation,
) -> Result<JudgeVerdict, JudgeError> {
    let ctx = RenderContext::new().set("conv", parse::render_conversation(&conversation.utterances));
    let prompt = templates.render(TemplateId::EscalationJudge, &ctx)?;
    let (explanation, rating) = rate(gateway, settings, prompt).await?;
    Ok(JudgeVerdict {
        kind: VerdictKind::Escalation,
        rating,
        explanation,
        conv_ids: vec![conversation.conv_id.clone()],
    })
}

/// Scores how well the intervened conversation preserves the original's
/// message, complaint, and situation.
pub async fn judge_intervention_quality(
    gateway: &Gateway,
    templates: &TemplateStore,
    settings: &JudgeSettings,
    original: &Conversation,
    intervened: &Conversation,
) -> Result<JudgeVerdict, JudgeError> {
    if original.pair_id != intervened.pair_id || original.situation_id != intervened.situation_id {
        return Err(JudgeError::MismatchedConversations(
            original.conv_id.clone(),
            intervened.conv_id.clone(),
        ));
    }
    let ctx = RenderContext::new()
        .set("conv_1", parse::render_conversation(&original.utterances))
        .set("conv_2", parse::render_conversation(&intervened.utterances));
    let prompt = templates.render(TemplateId::InterventionQualityJudge, &ctx)?;
    let (explanation, rating) = rate(gateway, settings, prompt).await?;
    Ok(JudgeVerdict {
        kind: VerdictKind::InterventionQuality,
        rating,
        explanation,
        conv_ids: vec![original.conv_id.clone(), intervened.conv_id.clone()],
    })
}

/// One persisted verdict, as written to verdicts.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub schema_version: u32,
    pub target: VerdictTarget,
    #[serde(flatten)]
    pub verdict: JudgeVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub original_escalation_mean: f64,
    pub intervened_escalation_mean: f64,
    pub information_preservation_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub naturalness_mean: Option<f64>,
    pub original_escalation_count: usize,
    pub intervened_escalation_count: usize,
    pub information_preservation_count: usize,
    pub naturalness_count: usize,
}

fn mean(values: &[u8]) -> f64 {
    values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64
}

/// Aggregates verdicts into the escalation/preservation comparison. Requires
/// at least one verdict per required column; naturalness is optional.
pub fn comparison_report(records: &[VerdictRecord]) -> Result<ComparisonReport, JudgeError> {
    let mut original_escalation = Vec::new();
    let mut intervened_escalation = Vec::new();
    let mut preservation = Vec::new();
    let mut naturalness = Vec::new();
    for record in records {
        match (record.verdict.kind, record.target) {
            (VerdictKind::Escalation, VerdictTarget::Original) => {
                original_escalation.push(record.verdict.rating)
            }
            (VerdictKind::Escalation, VerdictTarget::Intervened) => {
                intervened_escalation.push(record.verdict.rating)
            }
            (VerdictKind::InterventionQuality, _) => preservation.push(record.verdict.rating),
            (VerdictKind::Naturalness, _) => naturalness.push(record.verdict.rating),
            _ => {}
        }
    }
    let mut missing = Vec::new();
    if original_escalation.is_empty() {
        missing.push("escalation/original");
    }
    if intervened_escalation.is_empty() {
        missing.push("escalation/intervened");
    }
    if preservation.is_empty() {
        missing.push("intervention_quality");
    }
    if !missing.is_empty() {
        return Err(JudgeError::MissingVerdicts(missing.join(", ")));
    }
    Ok(ComparisonReport {
        original_escalation_mean: mean(&original_escalation),
        intervened_escalation_mean: mean(&intervened_escalation),
        information_preservation_mean: mean(&preservation),
        naturalness_mean: (!naturalness.is_empty()).then(|| mean(&naturalness)),
        original_escalation_count: original_escalation.len(),
        intervened_escalation_count: intervened_escalation.len(),
        information_preservation_count: preservation.len(),
        naturalness_count: naturalness.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ConversationStatus, Utterance};
    use crate::gateway::{BackendConfig, MockScript, ScriptEntry, ScriptMatcher, ScriptedBackend};
    use std::sync::Arc;

    fn conversation(conv_id: &str, hostile: bool) -> Conversation {
        let lines: &[(&str, &str, &str)] = if hostile {
            &[
                ("Riya", "rage", "You wrecked my weekend plans AGAIN."),
                ("Tom", "anger", "Maybe stop making plans with my car then!"),
            ]
        } else {
            &[
                ("Riya", "serenity", "Tea's ready when you want it."),
                ("Tom", "joy", "Perfect timing, thanks."),
            ]
        };
        Conversation {
            conv_id: conv_id.into(),
            pair_id: "p0".into(),
            situation_id: "s0".into(),
            flow: None,
            utterances: lines
                .iter()
                .enumerate()
                .map(|(i, (s, e, t))| Utterance {
                    index: i,
                    speaker: (*s).into(),
                    emotion: (*e).into(),
                    text: (*t).into(),
                })
                .collect(),
            summary: None,
            gate: None,
            status: ConversationStatus::Accepted,
        }
    }

    fn settings() -> JudgeSettings {
        JudgeSettings { chat_model: "mock".into(), temperature: 0.0, max_parse_retries: 3 }
    }

    fn gateway_for(script: MockScript) -> (Gateway, Arc<ScriptedBackend>) {
        let backend = Arc::new(ScriptedBackend::new(script));
        let config = BackendConfig { backoff_base_ms: 1, ..BackendConfig::default() };
        (Gateway::new(backend.clone(), config), backend)
    }

    #[tokio::test]
    async fn naturalness_verdict() {
        let script = MockScript::new(vec![ScriptEntry::new(
            ScriptMatcher::Substring("evaluate the naturalness".into()),
            "Plausible domestic tiff with a natural flow. Rating 4",
        )]);
        let (gateway, backend) = gateway_for(script);
        let verdict = judge_naturalness(
            &gateway,
            &TemplateStore::builtin(),
            &settings(),
            &conversation("c1", true),
            Some("roommates"),
        )
        .await
        .unwrap();
        assert_eq!(verdict.rating, 4);
        assert_eq!(verdict.kind, VerdictKind::Naturalness);
        assert!(verdict.explanation.starts_with("Plausible"));
        let prompt = &backend.recorded_requests()[0].prompt;
        assert!(prompt.contains("Relationship: roommates"));
    }

    #[tokio::test]
    async fn naturalness_unknown_relationship() {
        let script = MockScript::new(vec![ScriptEntry::new(
            ScriptMatcher::Substring("evaluate the naturalness".into()),
            "Rating 3",
        )]);
        let (gateway, backend) = gateway_for(script);
        judge_naturalness(&gateway, &TemplateStore::builtin(), &settings(), &conversation("c1", true), None)
            .await
            .unwrap();
        assert!(backend.recorded_requests()[0].prompt.contains("Relationship: unknown"));
    }

    #[tokio::test]
    async fn naturalness_retries_until_rating_appears() {
        let mut entry =
            ScriptEntry::new(ScriptMatcher::Substring("evaluate the naturalness".into()), "");
        entry.responses = vec![
            "I think this conversation is quite plausible.".into(),
            "Still no verdict, just vibes.".into(),
            "Rating 3".into(),
        ];
        let (gateway, backend) = gateway_for(MockScript::new(vec![entry]));
        let verdict = judge_naturalness(
            &gateway,
            &TemplateStore::builtin(),
            &settings(),
            &conversation("c1", true),
            None,
        )
        .await
        .unwrap();
        assert_eq!(verdict.rating, 3);
        assert_eq!(backend.recorded_requests().len(), 3);
    }

    #[tokio::test]
    async fn escalation_scale_extremes() {
        let script = MockScript::new(vec![
            ScriptEntry::new(
                ScriptMatcher::All(vec!["Level of Escalation".into(), "wrecked my weekend".into()]),
                "Open hostility from the first line. Rating 5",
            ),
            ScriptEntry::new(
                ScriptMatcher::All(vec!["Level of Escalation".into(), "Tea's ready".into()]),
                "No hostility at all. Rating 1",
            ),
        ]);
        let (gateway, _) = gateway_for(script);
        let hostile =
            judge_escalation(&gateway, &TemplateStore::builtin(), &settings(), &conversation("c1", true))
                .await
                .unwrap();
        assert_eq!(hostile.rating, 5);
        let calm =
            judge_escalation(&gateway, &TemplateStore::builtin(), &settings(), &conversation("c2", false))
                .await
                .unwrap();
        assert_eq!(calm.rating, 1);
    }

    #[tokio::test]
    async fn intervention_quality_two_conversations() {
        let script = MockScript::new(vec![ScriptEntry::new(
            ScriptMatcher::Substring("Compare the Overall Conversation Quality".into()),
            "Same complaint, same situation, softer tone. Rating 5",
        )]);
        let (gateway, _) = gateway_for(script);
        let original = conversation("c1", true);
        let intervened = conversation("c1-intervened", false);
        let verdict = judge_intervention_quality(
            &gateway,
            &TemplateStore::builtin(),
            &settings(),
            &original,
            &intervened,
        )
        .await
        .unwrap();
        assert_eq!(verdict.rating, 5);
        assert_eq!(verdict.conv_ids.len(), 2);
    }

    #[tokio::test]
    async fn intervention_quality_requires_shared_context() {
        let (gateway, _) = gateway_for(MockScript::new(vec![]));
        let original = conversation("c1", true);
        let mut other = conversation("c2", false);
        other.situation_id = "elsewhere".into();
        let err = judge_intervention_quality(
            &gateway,
            &TemplateStore::builtin(),
            &settings(),
            &original,
            &other,
        )
        .await
        .unwrap_err();
        assert!(matches!(err, JudgeError::MismatchedConversations(_, _)));
    }

    fn record(kind: VerdictKind, target: VerdictTarget, rating: u8) -> VerdictRecord {
        VerdictRecord {
            schema_version: 1,
            target,
            verdict: JudgeVerdict { kind, rating, explanation: String::new(), conv_ids: vec!["c".into()] },
        }
    }

    #[test]
    fn report_means() {
        let records = vec![
            record(VerdictKind::Escalation, VerdictTarget::Original, 3),
            record(VerdictKind::Escalation, VerdictTarget::Original, 4),
            record(VerdictKind::Escalation, VerdictTarget::Intervened, 2),
            record(VerdictKind::Escalation, VerdictTarget::Intervened, 2),
            record(VerdictKind::InterventionQuality, VerdictTarget::Both, 5),
        ];
        let report = comparison_report(&records).unwrap();
        assert_eq!(report.original_escalation_mean, 3.5);
        assert_eq!(report.intervened_escalation_mean, 2.0);
        assert_eq!(report.information_preservation_mean, 5.0);
        assert_eq!(report.naturalness_mean, None);
    }

    #[test]
    fn report_single_verdicts() {
        let records = vec![
            record(VerdictKind::Escalation, VerdictTarget::Original, 4),
            record(VerdictKind::Escalation, VerdictTarget::Intervened, 1),
            record(VerdictKind::InterventionQuality, VerdictTarget::Both, 3),
        ];
        let report = comparison_report(&records).unwrap();
        assert_eq!(report.original_escalation_mean, 4.0);
        assert_eq!(report.intervened_escalation_mean, 1.0);
        assert_eq!(report.information_preservation_mean, 3.0);
    }

    #[test]
    fn report_missing_kinds() {
        let records = vec![
            record(VerdictKind::Escalation, VerdictTarget::Original, 4),
            record(VerdictKind::Escalation, VerdictTarget::Intervened, 1),
        ];
        let err = comparison_report(&records).unwrap_err();
        assert!(matches!(err, JudgeError::MissingVerdicts(ref m) if m.contains("intervention_quality")));
    }
}
