//! The nine prompt templates and their placeholder substitution.
//!
//! Template bodies live as UTF-8 data files under `templates/` (one per
//! [`TemplateId`]) so they can be swapped without rebuilding; the shipped
//! copies are embedded as the default store. Substitution is flat `{name}`
//! replacement only — no conditionals, no loops.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::domain::CharacterPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateId {
    CharacterPair,
    SituationGen,
    ConversationGen,
    Summarize,
    SelfVerify,
    NormDiscovery,
    NaturalnessJudge,
    EscalationJudge,
    InterventionQualityJudge,
}

impl TemplateId {
    pub const ALL: [TemplateId; 9] = [
        TemplateId::CharacterPair,
        TemplateId::SituationGen,
        TemplateId::ConversationGen,
        TemplateId::Summarize,
        TemplateId::SelfVerify,
        TemplateId::NormDiscovery,
        TemplateId::NaturalnessJudge,
        TemplateId::EscalationJudge,
        TemplateId::InterventionQualityJudge,
    ];

    /// On-disk file name for this template.
    pub fn file_name(self) -> &'static str {
        match self {
            TemplateId::CharacterPair => "a1_character_pair.txt",
            TemplateId::SituationGen => "a2_situation_gen.txt",
            TemplateId::ConversationGen => "a3_conversation_gen.txt",
            TemplateId::Summarize => "a4_summarize.txt",
            TemplateId::SelfVerify => "a5_self_verify.txt",
            TemplateId::NormDiscovery => "a6_norm_discovery.txt",
            TemplateId::NaturalnessJudge => "a7_naturalness.txt",
            TemplateId::EscalationJudge => "a8_escalation.txt",
            TemplateId::InterventionQualityJudge => "a9_intervention_quality.txt",
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateId::CharacterPair => include_str!("../templates/a1_character_pair.txt"),
            TemplateId::SituationGen => include_str!("../templates/a2_situation_gen.txt"),
            TemplateId::ConversationGen => include_str!("../templates/a3_conversation_gen.txt"),
            TemplateId::Summarize => include_str!("../templates/a4_summarize.txt"),
            TemplateId::SelfVerify => include_str!("../templates/a5_self_verify.txt"),
            TemplateId::NormDiscovery => include_str!("../templates/a6_norm_discovery.txt"),
            TemplateId::NaturalnessJudge => include_str!("../templates/a7_naturalness.txt"),
            TemplateId::EscalationJudge => include_str!("../templates/a8_escalation.txt"),
            TemplateId::InterventionQualityJudge => {
                include_str!("../templates/a9_intervention_quality.txt")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("missing placeholder {{{0}}}")]
    MissingPlaceholder(String),
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("operation applies to a different template")]
    WrongTemplate,
    #[error("failed to read template file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Placeholder values for one render. Keys are the bare names appearing as
/// `{name}` in a template body.
#[derive(Debug, Clone, Default)]
pub struct RenderContext {
    values: BTreeMap<String, String>,
}

impl RenderContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, key: &str, value: impl Into<String>) -> Self {
        self.values.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Fills the `person_1_*`/`person_2_*` block plus relationship metadata
    /// shared by the situation, conversation, and norm templates.
    pub fn with_pair(self, pair: &CharacterPair) -> Self {
        let [p1, p2] = &pair.profiles;
        self.set("person_1_name", &p1.name)
            .set("person_1_age", p1.age.to_string())
            .set("person_1_personality", &p1.personality)
            .set("person_1_mbti", &p1.mbti)
            .set("person_1_mbti_desc", &p1.mbti_desc)
            .set("person_2_name", &p2.name)
            .set("person_2_age", p2.age.to_string())
            .set("person_2_personality", &p2.personality)
            .set("person_2_mbti", &p2.mbti)
            .set("person_2_mbti_desc", &p2.mbti_desc)
            .set("closeness", &pair.closeness)
            .set("how_they_know", &pair.how_met)
            .set("how_long_they_know", &pair.known_duration)
            .set("relationship", &pair.relationship)
    }
}

static PLACEHOLDER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([a-z_0-9]+)\}").expect("placeholder regex"));

/// Loaded template bodies, keyed by [`TemplateId`].
#[derive(Debug, Clone)]
pub struct TemplateStore {
    bodies: BTreeMap<&'static str, String>,
}

impl TemplateStore {
    /// The shipped templates, embedded at build time from `templates/`.
    pub fn builtin() -> Self {
        let mut bodies = BTreeMap::new();
        for id in TemplateId::ALL {
            bodies.insert(id.file_name(), id.builtin_body().to_string());
        }
        Self { bodies }
    }

    /// Loads all nine template files from a directory.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut bodies = BTreeMap::new();
        for id in TemplateId::ALL {
            let path = dir.join(id.file_name());
            let body = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                path: path.display().to_string(),
                source,
            })?;
            bodies.insert(id.file_name(), body);
        }
        Ok(Self { bodies })
    }

    /// Raw template body.
    pub fn body(&self, id: TemplateId) -> &str {
        &self.bodies[id.file_name()]
    }

    /// Replaces a template body (used for avoid-list extension).
    pub fn set_body(&mut self, id: TemplateId, body: String) {
        self.bodies.insert(id.file_name(), body);
    }

    /// Renders `id` with `ctx`. Every placeholder in the body must be
    /// present in the context.
    pub fn render(&self, id: TemplateId, ctx: &RenderContext) -> Result<String, TemplateError> {
        render_body(self.body(id), ctx)
    }
}

/// Substitutes every `{name}` in `body` from `ctx` in a single pass.
pub fn render_body(body: &str, ctx: &RenderContext) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(body.len());
    let mut last = 0;
    for caps in PLACEHOLDER_RE.captures_iter(body) {
        let whole = caps.get(0).expect("match");
        let name = &caps[1];
        let value = ctx
            .get(name)
            .ok_or_else(|| TemplateError::MissingPlaceholder(name.to_string()))?;
        out.push_str(&body[last..whole.start()]);
        out.push_str(value);
        last = whole.end();
    }
    out.push_str(&body[last..]);
    Ok(out)
}

/// Placeholder names required by a template body, in order of appearance.
pub fn required_placeholders(body: &str) -> Vec<String> {
    let mut seen = Vec::new();
    for caps in PLACEHOLDER_RE.captures_iter(body) {
        let name = caps[1].to_string();
        if !seen.contains(&name) {
            seen.push(name);
        }
    }
    seen
}

const AVOID_LINE_PREFIX: &str = "Avoid scenarios including: ";

/// Appends extra topics to the situation template's avoid line,
/// comma-separated, preserving the original list and its trailing period.
pub fn extend_avoid_list(base_template: &str, extra_topics: &[String]) -> Result<String, TemplateError> {
    if !base_template.lines().any(|l| l.starts_with(AVOID_LINE_PREFIX)) {
        return Err(TemplateError::WrongTemplate);
    }
    if extra_topics.is_empty() {
        return Ok(base_template.to_string());
    }
    let mut out_lines = Vec::new();
    for line in base_template.split('\n') {
        if let Some(rest) = line.strip_prefix(AVOID_LINE_PREFIX) {
            let (items, period) = match rest.strip_suffix('.') {
                Some(trimmed) => (trimmed, "."),
                None => (rest, ""),
            };
            let mut all: Vec<&str> = items.split(", ").collect();
            for topic in extra_topics {
                all.push(topic);
            }
            out_lines.push(format!("{AVOID_LINE_PREFIX}{}{period}", all.join(", ")));
        } else {
            out_lines.push(line.to_string());
        }
    }
    Ok(out_lines.join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_ctx(body: &str) -> RenderContext {
        let mut ctx = RenderContext::new();
        for name in required_placeholders(body) {
            let value = format!("V_{name}");
            ctx = ctx.set(&name, value);
        }
        ctx
    }

    #[test]
    fn character_pair_render_contains_count() {
        let store = TemplateStore::builtin();
        let ctx = RenderContext::new()
            .set("num_pairs", "3")
            .set("relation_desc", "siblings")
            .set("personal_desc", "contrasting");
        let out = store.render(TemplateId::CharacterPair, &ctx).unwrap();
        assert!(out.contains("Generate exactly 3 pairs"));
        assert!(out.contains("relationship of siblings"));
        assert!(out.contains("They MUST have contrasting personalities."));
    }

    #[test]
    fn conversation_render_contains_flow() {
        let store = TemplateStore::builtin();
        let body = store.body(TemplateId::ConversationGen);
        let ctx = full_ctx(body).set("flow", "escalate steadily into an argument");
        let out = store.render(TemplateId::ConversationGen, &ctx).unwrap();
        assert!(out.contains("The conversation should escalate steadily into an argument"));
    }

    #[test]
    fn self_verify_missing_summary() {
        let store = TemplateStore::builtin();
        let ctx = RenderContext::new().set("situation", "s").set("flow", "f");
        match store.render(TemplateId::SelfVerify, &ctx) {
            Err(TemplateError::MissingPlaceholder(name)) => assert_eq!(name, "summary"),
            other => panic!("expected MissingPlaceholder, got {other:?}"),
        }
    }

    #[test]
    fn rendering_is_deterministic_and_complete() {
        let store = TemplateStore::builtin();
        for id in TemplateId::ALL {
            let ctx = full_ctx(store.body(id));
            let a = store.render(id, &ctx).unwrap();
            let b = store.render(id, &ctx).unwrap();
            assert_eq!(a, b);
            assert!(
                !PLACEHOLDER_RE.is_match(&a),
                "template {:?} leaked a placeholder",
                id
            );
        }
    }

    #[test]
    fn extend_avoid_list_appends() {
        let store = TemplateStore::builtin();
        let body = store.body(TemplateId::SituationGen);
        let extended = extend_avoid_list(body, &["homework".to_string()]).unwrap();
        let line = extended
            .lines()
            .find(|l| l.starts_with("Avoid scenarios including:"))
            .unwrap();
        assert_eq!(
            line,
            "Avoid scenarios including: projects, discovery, social gathering, art, poem, \
             trips, family gathering, career plans, future plans, homework."
        );
    }

    #[test]
    fn extend_avoid_list_empty_is_identity() {
        let store = TemplateStore::builtin();
        let body = store.body(TemplateId::SituationGen);
        assert_eq!(extend_avoid_list(body, &[]).unwrap(), body);
    }

    #[test]
    fn extend_avoid_list_wrong_template() {
        let store = TemplateStore::builtin();
        let body = store.body(TemplateId::CharacterPair);
        assert!(matches!(
            extend_avoid_list(body, &["homework".to_string()]),
            Err(TemplateError::WrongTemplate)
        ));
    }

    #[test]
    fn builtin_matches_checked_in_files() {
        // The embedded store and the on-disk files must be byte-identical.
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("templates");
        let from_disk = TemplateStore::from_dir(&dir).unwrap();
        let builtin = TemplateStore::builtin();
        for id in TemplateId::ALL {
            assert_eq!(builtin.body(id), from_disk.body(id), "{:?}", id);
        }
    }

    #[test]
    fn template_anchor_lines() {
        let store = TemplateStore::builtin();
        let anchors: [(TemplateId, &str); 9] = [
            (TemplateId::CharacterPair, "separate each pairs by \"====\""),
            (TemplateId::SituationGen, "List them one by one with numbering."),
            (TemplateId::ConversationGen, "Format should be \"Name (Emotion): Utterance\""),
            (TemplateId::Summarize, "Summarize the above conversation in 4-5 sentences."),
            (TemplateId::SelfVerify, "Overall Alignment: [Yes/No]"),
            (TemplateId::NormDiscovery, "Norm:\nDescription:\nViolator:\nEvidence:\nSuggestion:"),
            (TemplateId::NaturalnessJudge, "Rating 5: The conversation sounds entirely natural"),
            (TemplateId::EscalationJudge, "Measure the Level of Escalation in a Conversation"),
            (
                TemplateId::InterventionQualityJudge,
                "Compare the Overall Conversation Quality Between Two Conversations",
            ),
        ];
        for (id, anchor) in anchors {
            assert!(store.body(id).contains(anchor), "{:?} missing anchor", id);
        }
    }
}
