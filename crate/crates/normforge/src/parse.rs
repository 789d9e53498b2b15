//! Parsers for the structured plain-text formats the prompts demand from the
//! model, plus the inverse transcript renderer.
//!
//! Every parser is total over arbitrary input: it returns a value or a
//! [`ParseError`], never panics. Parsing ignores trailing whitespace and is
//! insensitive to `\r\n` vs `\n` line endings. In [`ParseMode::Lenient`]
//! (the default), stray leading Markdown decorations are stripped before
//! matching, since models occasionally emit them despite instructions.

use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::domain::{CharacterProfile, GateResult, NormViolation, Utterance};

/// Upper bound on situations per pair; extra numbered items are dropped.
pub const MAX_SITUATIONS: usize = 5;

#[derive(Debug, Clone, Error, PartialEq)]
#[error("{format} parse error at line {line}: {reason} (line: {raw:?})")]
pub struct ParseError {
    pub format: &'static str,
    pub line: usize,
    pub reason: String,
    pub raw: String,
}

impl ParseError {
    fn new(format: &'static str, line: usize, reason: impl Into<String>, raw: &str) -> Self {
        Self { format, line: line.max(1), reason: reason.into(), raw: raw.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Lenient,
    Strict,
}

/// One `====`-separated block of the character-pair response, before ids and
/// the relationship label are attached by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBlock {
    pub profiles: [CharacterProfile; 2],
    pub how_met: String,
    pub known_duration: String,
    pub closeness: String,
}

fn lines_of(text: &str) -> Vec<&str> {
    text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)).collect()
}

fn strip_decorations(mut line: &str) -> &str {
    loop {
        let trimmed = line.trim_start();
        let next = if let Some(rest) = trimmed.strip_prefix("**") {
            rest
        } else if let Some(rest) = trimmed.strip_prefix('*') {
            rest
        } else if let Some(rest) = trimmed.strip_prefix('#') {
            rest
        } else if let Some(rest) = trimmed.strip_prefix("- ") {
            rest
        } else {
            return trimmed;
        };
        line = next;
    }
}

fn prepared(line: &str, mode: ParseMode) -> &str {
    match mode {
        ParseMode::Lenient => strip_decorations(line),
        ParseMode::Strict => line.trim(),
    }
}

/// Case-insensitive label match at the start of a line; returns the value
/// after the colon.
fn label_value<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let (head, rest) = line.split_at_checked(label.len())?;
    if head.eq_ignore_ascii_case(label) {
        Some(rest.trim())
    } else {
        None
    }
}

fn first_integer(value: &str) -> Option<u64> {
    static INT_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").expect("int regex"));
    INT_RE.find(value).and_then(|m| m.as_str().parse().ok())
}

// ---------------------------------------------------------------------------
// Character pairs
// ---------------------------------------------------------------------------

#[derive(Default)]
struct ProfileDraft {
    name: Option<String>,
    age: Option<(String, usize)>,
    personality: Option<String>,
    mbti: Option<String>,
}

const PAIRS: &str = "character_pairs";

/// Parses the `====`-separated character-pair response format: two
/// Name/Age/Personality/MBTI stanzas followed by how-met, duration, and
/// closeness lines. Field labels match case-insensitively; age is the first
/// integer in its value.
pub fn parse_character_pairs(text: &str, mode: ParseMode) -> Result<Vec<PairBlock>, ParseError> {
    let lines = lines_of(text);
    let mut blocks: Vec<(usize, Vec<(usize, &str)>)> = Vec::new();
    let mut current: Vec<(usize, &str)> = Vec::new();
    let mut start = 1;
    for (i, raw) in lines.iter().enumerate() {
        if raw.trim() == "====" {
            blocks.push((start, std::mem::take(&mut current)));
            start = i + 2;
        } else {
            current.push((i + 1, raw));
        }
    }
    blocks.push((start, current));

    let mut out = Vec::new();
    for (block_line, block) in blocks {
        if block.iter().all(|(_, l)| l.trim().is_empty()) {
            continue;
        }
        out.push(parse_pair_block(block_line, &block, mode)?);
    }
    if out.is_empty() {
        return Err(ParseError::new(PAIRS, 1, "no character pair blocks found", ""));
    }
    Ok(out)
}

/// Which free-text field wrapped continuation lines should extend.
#[derive(Clone, Copy)]
enum Tail {
    None,
    Personality,
    Mbti,
    HowMet,
    KnownDuration,
    Closeness,
}

fn parse_pair_block(
    block_line: usize,
    block: &[(usize, &str)],
    mode: ParseMode,
) -> Result<PairBlock, ParseError> {
    let mut profiles: Vec<(usize, ProfileDraft)> = Vec::new();
    let mut how_met: Option<String> = None;
    let mut known_duration: Option<String> = None;
    let mut closeness: Option<String> = None;
    let mut tail = Tail::None;

    for &(lineno, raw) in block {
        let line = prepared(raw, mode);
        if line.is_empty() {
            continue;
        }
        if let Some(v) = label_value(line, "name:") {
            profiles.push((lineno, ProfileDraft { name: Some(v.to_string()), ..Default::default() }));
            tail = Tail::None;
        } else if let Some(v) = label_value(line, "age:") {
            let profile = profiles
                .last_mut()
                .ok_or_else(|| ParseError::new(PAIRS, lineno, "Age before any Name", raw))?;
            let age = first_integer(v)
                .ok_or_else(|| ParseError::new(PAIRS, lineno, "age has no integer", raw))?;
            profile.1.age = Some((v.to_string(), age as usize));
            tail = Tail::None;
        } else if let Some(v) = label_value(line, "personality:") {
            let profile = profiles
                .last_mut()
                .ok_or_else(|| ParseError::new(PAIRS, lineno, "Personality before any Name", raw))?;
            profile.1.personality = Some(v.to_string());
            tail = Tail::Personality;
        } else if let Some(v) = label_value(line, "mbti:") {
            let profile = profiles
                .last_mut()
                .ok_or_else(|| ParseError::new(PAIRS, lineno, "MBTI before any Name", raw))?;
            profile.1.mbti = Some(v.to_string());
            tail = Tail::Mbti;
        } else if let Some(v) = label_value(line, "how did they meet:") {
            how_met = Some(v.to_string());
            tail = Tail::HowMet;
        } else if let Some(v) = label_value(line, "how long have they known each other:") {
            known_duration = Some(v.to_string());
            tail = Tail::KnownDuration;
        } else if let Some(v) = label_value(line, "closeness:") {
            closeness = Some(v.to_string());
            tail = Tail::Closeness;
        } else {
            // Wrapped continuation of the previous free-text field.
            let slot = match tail {
                Tail::None => None,
                Tail::Personality => profiles.last_mut().and_then(|p| p.1.personality.as_mut()),
                Tail::Mbti => profiles.last_mut().and_then(|p| p.1.mbti.as_mut()),
                Tail::HowMet => how_met.as_mut(),
                Tail::KnownDuration => known_duration.as_mut(),
                Tail::Closeness => closeness.as_mut(),
            };
            if let Some(field) = slot {
                if !field.is_empty() {
                    field.push(' ');
                }
                field.push_str(line);
            }
        }
    }

    if profiles.len() != 2 {
        return Err(ParseError::new(
            PAIRS,
            block_line,
            format!("expected 2 profiles per block, found {}", profiles.len()),
            "",
        ));
    }
    let mut built = Vec::with_capacity(2);
    for (lineno, draft) in profiles {
        let name = draft.name.expect("profile starts with a name");
        let (_, age) = draft
            .age
            .ok_or_else(|| ParseError::new(PAIRS, lineno, "missing field Age", ""))?;
        let personality = draft
            .personality
            .ok_or_else(|| ParseError::new(PAIRS, lineno, "missing field Personality", ""))?;
        let mbti_raw = draft
            .mbti
            .ok_or_else(|| ParseError::new(PAIRS, lineno, "missing field MBTI", ""))?;
        let (mbti, mbti_desc) = split_mbti(&mbti_raw);
        built.push(CharacterProfile { name, age: age as u32, personality, mbti, mbti_desc });
    }
    let missing = |field: &str| ParseError::new(PAIRS, block_line, format!("missing field {field}"), "");
    let p2 = built.pop().expect("two profiles");
    let p1 = built.pop().expect("two profiles");
    Ok(PairBlock {
        profiles: [p1, p2],
        how_met: how_met.ok_or_else(|| missing("How did they meet"))?,
        known_duration: known_duration.ok_or_else(|| missing("How long have they known each other"))?,
        closeness: closeness.ok_or_else(|| missing("Closeness"))?,
    })
}

/// Splits an MBTI value line into the 4-letter code and its one-sentence
/// explanation ("INFJ - The Advocate ..." style).
fn split_mbti(value: &str) -> (String, String) {
    let value = value.trim();
    match value.split_once(char::is_whitespace) {
        Some((code, rest)) => {
            let code = code.trim_matches(|c: char| !c.is_alphanumeric());
            let desc = rest.trim_start_matches(|c: char| c == '-' || c == ':' || c == ',' || c.is_whitespace());
            (code.to_string(), desc.to_string())
        }
        None => (value.trim_matches(|c: char| !c.is_alphanumeric()).to_string(), String::new()),
    }
}

// ---------------------------------------------------------------------------
// Situations
// ---------------------------------------------------------------------------

static ITEM_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\d+)[.)]\s*(.*)$").expect("item regex"));

/// Extracts numbered scenario items ("1. ..." or "1) ..."), joining wrapped
/// continuation lines to the preceding item. At most [`MAX_SITUATIONS`]
/// items are returned; extras are dropped with a warning.
pub fn parse_situations(text: &str, mode: ParseMode) -> Result<Vec<String>, ParseError> {
    let mut items: Vec<String> = Vec::new();
    for (i, raw) in lines_of(text).iter().enumerate() {
        let line = prepared(raw, mode);
        if line.is_empty() {
            continue;
        }
        if let Some(caps) = ITEM_RE.captures(line) {
            items.push(caps[2].trim().to_string());
        } else if let Some(last) = items.last_mut() {
            if !last.is_empty() {
                last.push(' ');
            }
            last.push_str(line);
        } else {
            // Preamble before the first numbered item; latitude for chatty models.
            tracing::debug!(line = i + 1, "ignoring unnumbered preamble line");
        }
    }
    if items.is_empty() {
        return Err(ParseError::new("situations", 1, "no numbered items found", ""));
    }
    if items.len() > MAX_SITUATIONS {
        tracing::warn!(
            kept = MAX_SITUATIONS,
            dropped = items.len() - MAX_SITUATIONS,
            "situation list exceeded the cap; dropping extras"
        );
        items.truncate(MAX_SITUATIONS);
    }
    Ok(items)
}

// ---------------------------------------------------------------------------
// Conversations
// ---------------------------------------------------------------------------

/// Splits a "Name (Emotion): Utterance" line. The emotion is the final
/// parenthesised group before the first colon.
fn split_speaker_line(line: &str) -> Option<(String, String, String)> {
    let colon = line.find(':')?;
    let head = &line[..colon];
    let close = head.rfind(')')?;
    if !head[close + 1..].trim().is_empty() {
        return None;
    }
    let open = head[..close].rfind('(')?;
    let speaker = head[..open].trim();
    let emotion = head[open + 1..close].trim();
    if speaker.is_empty() || emotion.is_empty() {
        return None;
    }
    let text = line[colon + 1..].trim();
    Some((speaker.to_string(), emotion.to_string(), text.to_string()))
}

/// Parses a transcript in the "Name (Emotion): Utterance" line format.
/// Non-matching lines continue the previous utterance's text; the first
/// non-empty line must match.
pub fn parse_conversation(text: &str, mode: ParseMode) -> Result<Vec<Utterance>, ParseError> {
    let mut utterances: Vec<Utterance> = Vec::new();
    for (i, raw) in lines_of(text).iter().enumerate() {
        let line = prepared(raw, mode);
        if line.is_empty() {
            continue;
        }
        match split_speaker_line(line) {
            Some((speaker, emotion, text)) => {
                let text = match mode {
                    ParseMode::Lenient => text.trim_start_matches('*').trim_start().to_string(),
                    ParseMode::Strict => text,
                };
                utterances.push(Utterance { index: utterances.len(), speaker, emotion, text });
            }
            None => match utterances.last_mut() {
                Some(last) => {
                    if !last.text.is_empty() {
                        last.text.push(' ');
                    }
                    last.text.push_str(line);
                }
                None => {
                    return Err(ParseError::new(
                        "conversation",
                        i + 1,
                        "first line does not match \"Name (Emotion): Utterance\"",
                        raw,
                    ));
                }
            },
        }
    }
    if utterances.is_empty() {
        return Err(ParseError::new("conversation", 1, "empty transcript", ""));
    }
    Ok(utterances)
}

/// Inverse of [`parse_conversation`]: one "Name (Emotion): text" line per
/// utterance.
pub fn render_conversation(utterances: &[Utterance]) -> String {
    let lines: Vec<String> = utterances
        .iter()
        .map(|u| format!("{} ({}): {}", u.speaker, u.emotion, u.text))
        .collect();
    lines.join("\n")
}

// ---------------------------------------------------------------------------
// Gate verdicts
// ---------------------------------------------------------------------------

/// Parses the self-verification verdict: "Situation: <1-5>", "Flow: <1-5>",
/// "Overall Alignment: <Yes|No>", label order free, case-insensitive. Later
/// occurrences override earlier ones, so echoed input lines are harmless.
pub fn parse_gate(text: &str, mode: ParseMode) -> Result<GateResult, ParseError> {
    const GATE: &str = "gate";
    let mut situation: Option<(usize, u64, String)> = None;
    let mut flow: Option<(usize, u64, String)> = None;
    let mut approved: Option<bool> = None;
    for (i, raw) in lines_of(text).iter().enumerate() {
        let line = prepared(raw, mode);
        if let Some(v) = label_value(line, "situation:") {
            if let Some(n) = first_integer(v) {
                situation = Some((i + 1, n, raw.to_string()));
            }
        } else if let Some(v) = label_value(line, "flow:") {
            if let Some(n) = first_integer(v) {
                flow = Some((i + 1, n, raw.to_string()));
            }
        } else if let Some(v) = label_value(line, "overall alignment:") {
            let word: String = v
                .chars()
                .skip_while(|c| !c.is_alphanumeric())
                .take_while(|c| c.is_alphanumeric())
                .collect();
            if word.eq_ignore_ascii_case("yes") {
                approved = Some(true);
            } else if word.eq_ignore_ascii_case("no") {
                approved = Some(false);
            }
        }
    }
    let score = |slot: Option<(usize, u64, String)>, field: &str| -> Result<u8, ParseError> {
        let (line, n, raw) = slot
            .ok_or_else(|| ParseError::new(GATE, 1, format!("missing field {field}"), ""))?;
        if !(1..=5).contains(&n) {
            return Err(ParseError::new(GATE, line, format!("{field} score {n} outside 1-5"), &raw));
        }
        Ok(n as u8)
    };
    Ok(GateResult {
        situation_score: score(situation, "Situation")?,
        flow_score: score(flow, "Flow")?,
        approved: approved
            .ok_or_else(|| ParseError::new(GATE, 1, "missing field Overall Alignment", ""))?,
    })
}

// ---------------------------------------------------------------------------
// Norm stanzas
// ---------------------------------------------------------------------------

/// Parses repeated Norm/Description/Violator/Evidence/Suggestion stanzas in
/// input order. `utterance_index` is left unresolved for the caller.
pub fn parse_norm_blocks(text: &str, mode: ParseMode) -> Result<Vec<NormViolation>, ParseError> {
    const NORMS: &str = "norm_blocks";
    const LABELS: [&str; 5] = ["norm:", "description:", "violator:", "evidence:", "suggestion:"];

    struct Stanza {
        line: usize,
        fields: [Option<String>; 5],
        current: Option<usize>,
    }

    let mut stanzas: Vec<Stanza> = Vec::new();
    for (i, raw) in lines_of(text).iter().enumerate() {
        let line = prepared(raw, mode);
        if line.is_empty() {
            if let Some(s) = stanzas.last_mut() {
                s.current = None;
            }
            continue;
        }
        let mut matched = false;
        for (f, label) in LABELS.iter().enumerate() {
            if let Some(v) = label_value(line, label) {
                if f == 0 {
                    stanzas.push(Stanza { line: i + 1, fields: Default::default(), current: None });
                }
                if let Some(s) = stanzas.last_mut() {
                    s.fields[f] = Some(v.to_string());
                    s.current = Some(f);
                }
                matched = true;
                break;
            }
        }
        if !matched {
            if let Some(s) = stanzas.last_mut() {
                if let Some(f) = s.current {
                    let field = s.fields[f].as_mut().expect("current field set");
                    if !field.is_empty() {
                        field.push(' ');
                    }
                    field.push_str(line);
                }
            }
        }
    }

    if stanzas.is_empty() {
        return Err(ParseError::new(NORMS, 1, "no norm stanzas found", ""));
    }
    let mut out = Vec::with_capacity(stanzas.len());
    for s in stanzas {
        let take = |f: usize, name: &str| -> Result<String, ParseError> {
            s.fields[f]
                .clone()
                .ok_or_else(|| ParseError::new(NORMS, s.line, format!("stanza missing {name}"), ""))
        };
        out.push(NormViolation {
            norm: take(0, "Norm:")?,
            description: take(1, "Description:")?,
            violator: take(2, "Violator:")?,
            evidence: take(3, "Evidence:")?,
            suggestion: take(4, "Suggestion:")?,
            utterance_index: None,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Judge ratings
// ---------------------------------------------------------------------------

static RATING_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\brating\s*:?\s*(\d+)").expect("rating regex"));

/// Extracts the judge verdict: the integer in the last "Rating N" (or
/// "Rating: N") occurrence, with everything before it as the explanation.
pub fn parse_rating(text: &str) -> Result<(String, u8), ParseError> {
    const RATING: &str = "rating";
    let caps = RATING_RE
        .captures_iter(text)
        .last()
        .ok_or_else(|| ParseError::new(RATING, 1, "no rating token found", ""))?;
    let whole = caps.get(0).expect("match");
    let line = text[..whole.start()].matches('\n').count() + 1;
    let n: u64 = caps[1]
        .parse()
        .map_err(|_| ParseError::new(RATING, line, "rating is not a number", whole.as_str()))?;
    if !(1..=5).contains(&n) {
        return Err(ParseError::new(RATING, line, format!("rating {n} outside 1-5"), whole.as_str()));
    }
    Ok((text[..whole.start()].trim().to_string(), n as u8))
}

#[cfg(test)]
mod tests {
    use super::*;

    const ANGELA_MICHAEL_BLOCK: &str = "\
Name: Angela
Age: 42
Personality: Angela is organized and patient, preferring clear plans over surprises. She holds firm opinions about health and routine.
MBTI: ESFJ - The Consul, a caring organizer who values harmony and structure.

Name: Michael
Age: 15
Personality: Michael is energetic and sociable, quick to chase whatever his friends are excited about. He resists rules he finds arbitrary.
MBTI: ESFP - The Entertainer, a spontaneous type who lives in the moment.

How did they meet: since birth
How long have they known each other: 15 years
Closeness: extremely close
";

    #[test]
    fn parse_single_pair_block() {
        let pairs = parse_character_pairs(ANGELA_MICHAEL_BLOCK, ParseMode::Lenient).unwrap();
        assert_eq!(pairs.len(), 1);
        let p = &pairs[0];
        assert_eq!(p.profiles[0].name, "Angela");
        assert_eq!(p.profiles[0].age, 42);
        assert_eq!(p.profiles[0].mbti, "ESFJ");
        assert!(p.profiles[0].mbti_desc.starts_with("The Consul"));
        assert_eq!(p.profiles[1].name, "Michael");
        assert_eq!(p.closeness, "extremely close");
        assert_eq!(p.how_met, "since birth");
    }

    #[test]
    fn parse_two_blocks_in_order() {
        let two = format!("{ANGELA_MICHAEL_BLOCK}====\n{}", ANGELA_MICHAEL_BLOCK.replace("Angela", "Dana"));
        let pairs = parse_character_pairs(&two, ParseMode::Lenient).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].profiles[0].name, "Angela");
        assert_eq!(pairs[1].profiles[0].name, "Dana");
    }

    #[test]
    fn trailing_separator_is_ignored() {
        let text = format!("{ANGELA_MICHAEL_BLOCK}====\n");
        assert_eq!(parse_character_pairs(&text, ParseMode::Lenient).unwrap().len(), 1);
    }

    #[test]
    fn missing_closeness_is_an_error() {
        let text = ANGELA_MICHAEL_BLOCK.replace("Closeness: extremely close\n", "");
        let err = parse_character_pairs(&text, ParseMode::Lenient).unwrap_err();
        assert!(err.reason.contains("Closeness"), "{err}");
    }

    #[test]
    fn non_integer_age_is_an_error() {
        let text = ANGELA_MICHAEL_BLOCK.replace("Age: 42", "Age: forty-two");
        let err = parse_character_pairs(&text, ParseMode::Lenient).unwrap_err();
        assert!(err.reason.contains("integer"), "{err}");
    }

    #[test]
    fn age_takes_first_integer() {
        let text = ANGELA_MICHAEL_BLOCK.replace("Age: 42", "Age: 42 years old");
        let pairs = parse_character_pairs(&text, ParseMode::Lenient).unwrap();
        assert_eq!(pairs[0].profiles[0].age, 42);
    }

    #[test]
    fn one_profile_is_an_error() {
        let text = "Name: Solo\nAge: 30\nPersonality: quiet\nMBTI: INTJ\nHow did they meet: online\nHow long have they known each other: 1 year\nCloseness: not close at all\n";
        let err = parse_character_pairs(text, ParseMode::Lenient).unwrap_err();
        assert!(err.reason.contains("2 profiles"), "{err}");
    }

    #[test]
    fn situations_basic() {
        assert_eq!(parse_situations("1. A\n2. B", ParseMode::Lenient).unwrap(), vec!["A", "B"]);
    }

    #[test]
    fn situations_cap_at_five() {
        let text = "1. a\n2. b\n3. c\n4. d\n5. e\n6. f";
        let items = parse_situations(text, ParseMode::Lenient).unwrap();
        assert_eq!(items.len(), 5);
        assert_eq!(items[4], "e");
    }

    #[test]
    fn situations_join_wrapped_lines() {
        let text = "1. Angela finds the kitchen\n   a mess again.\n2. Michael borrows the car.";
        let items = parse_situations(text, ParseMode::Lenient).unwrap();
        assert_eq!(items[0], "Angela finds the kitchen a mess again.");
        assert_eq!(items.len(), 2);
    }

    #[test]
    fn situations_without_numbering_error() {
        assert!(parse_situations("no numbering at all", ParseMode::Lenient).is_err());
    }

    #[test]
    fn conversation_basic_line() {
        let utts = parse_conversation("Angela (Angry): Michael, seriously?", ParseMode::Lenient).unwrap();
        assert_eq!(utts.len(), 1);
        assert_eq!(utts[0].speaker, "Angela");
        assert_eq!(utts[0].emotion, "Angry");
        assert_eq!(utts[0].text, "Michael, seriously?");
    }

    #[test]
    fn conversation_continuation_joins() {
        let text = "Angela (Angry): Michael, seriously?\nthat was the last straw";
        let utts = parse_conversation(text, ParseMode::Lenient).unwrap();
        assert_eq!(utts.len(), 1);
        assert_eq!(utts[0].text, "Michael, seriously? that was the last straw");
    }

    #[test]
    fn conversation_empty_is_error() {
        assert!(parse_conversation("", ParseMode::Lenient).is_err());
        assert!(parse_conversation("   \n \n", ParseMode::Lenient).is_err());
    }

    #[test]
    fn conversation_first_line_must_match() {
        assert!(parse_conversation("hello there\nAngela (Calm): hi", ParseMode::Lenient).is_err());
    }

    #[test]
    fn conversation_markdown_stripped_in_lenient_mode() {
        let text = "**Angela (Angry):** Michael, seriously?";
        let utts = parse_conversation(text, ParseMode::Lenient).unwrap();
        assert_eq!(utts[0].speaker, "Angela");
        assert_eq!(utts[0].text, "Michael, seriously?");
        // Strict mode keeps the decoration; speaker validation downstream
        // rejects the record instead.
        let strict = parse_conversation(text, ParseMode::Strict).unwrap();
        assert_eq!(strict[0].speaker, "**Angela");
    }

    #[test]
    fn conversation_text_colons_stay_in_text() {
        let utts =
            parse_conversation("Angela (Calm): Here is the deal: one bag.", ParseMode::Lenient).unwrap();
        assert_eq!(utts[0].text, "Here is the deal: one bag.");
    }

    #[test]
    fn render_parse_round_trip() {
        let utts = vec![
            Utterance { index: 0, speaker: "Angela".into(), emotion: "anger".into(), text: "Michael, seriously?".into() },
            Utterance { index: 1, speaker: "Michael".into(), emotion: "annoyance".into(), text: "Oh, come on, Mom!".into() },
        ];
        let rendered = render_conversation(&utts);
        assert_eq!(rendered, "Angela (anger): Michael, seriously?\nMichael (annoyance): Oh, come on, Mom!");
        assert_eq!(parse_conversation(&rendered, ParseMode::Strict).unwrap(), utts);
    }

    #[test]
    fn render_empty_is_empty() {
        assert_eq!(render_conversation(&[]), "");
    }

    #[test]
    fn gate_happy_path() {
        let gate = parse_gate("Situation: 4\nFlow: 5\nOverall Alignment: Yes", ParseMode::Lenient).unwrap();
        assert_eq!(gate, GateResult { situation_score: 4, flow_score: 5, approved: true });
    }

    #[test]
    fn gate_rejection() {
        let gate = parse_gate("Situation: 2\nFlow: 3\nOverall Alignment: No", ParseMode::Lenient).unwrap();
        assert!(!gate.approved);
    }

    #[test]
    fn gate_score_out_of_range() {
        let err = parse_gate("Situation: 7\nFlow: 3\nOverall Alignment: Yes", ParseMode::Lenient).unwrap_err();
        assert!(err.reason.contains("outside 1-5"), "{err}");
    }

    #[test]
    fn gate_bracketed_values() {
        let gate =
            parse_gate("Situation: [5]\nFlow: [4]\nOverall Alignment: [Yes]", ParseMode::Lenient).unwrap();
        assert_eq!(gate, GateResult { situation_score: 5, flow_score: 4, approved: true });
    }

    #[test]
    fn gate_missing_field() {
        let err = parse_gate("Situation: 4\nOverall Alignment: Yes", ParseMode::Lenient).unwrap_err();
        assert!(err.reason.contains("Flow"), "{err}");
    }

    const NORM_STANZA: &str = "\
Norm: Maintaining supportive tone
Description: Family members are expected to keep a supportive tone even while disagreeing.
Violator: Angela
Evidence: Michael, seriously? Three bags of chips?
Suggestion: Michael, can we talk about the chips? Remember our healthy eating plan?
";

    #[test]
    fn norm_single_stanza() {
        let violations = parse_norm_blocks(NORM_STANZA, ParseMode::Lenient).unwrap();
        assert_eq!(violations.len(), 1);
        let v = &violations[0];
        assert_eq!(v.norm, "Maintaining supportive tone");
        assert_eq!(v.violator, "Angela");
        assert!(v.evidence.starts_with("Michael, seriously?"));
        assert_eq!(v.utterance_index, None);
    }

    #[test]
    fn norm_three_stanzas_in_order() {
        let text = format!(
            "{NORM_STANZA}\n{}\n{}",
            NORM_STANZA.replace("Angela", "Michael"),
            NORM_STANZA.replace("supportive tone", "respectful language")
        );
        let violations = parse_norm_blocks(&text, ParseMode::Lenient).unwrap();
        assert_eq!(violations.len(), 3);
        assert_eq!(violations[1].violator, "Michael");
        assert_eq!(violations[2].norm, "Maintaining respectful language");
    }

    #[test]
    fn norm_missing_suggestion() {
        let text = NORM_STANZA.lines().take(4).collect::<Vec<_>>().join("\n");
        let err = parse_norm_blocks(&text, ParseMode::Lenient).unwrap_err();
        assert!(err.reason.contains("Suggestion"), "{err}");
    }

    #[test]
    fn norm_prose_only_is_error() {
        assert!(parse_norm_blocks("the conversation went poorly overall", ParseMode::Lenient).is_err());
    }

    #[test]
    fn rating_after_explanation() {
        let (explanation, rating) = parse_rating("Flows well overall. Rating 4").unwrap();
        assert_eq!(explanation, "Flows well overall.");
        assert_eq!(rating, 4);
    }

    #[test]
    fn rating_leading_token() {
        let (explanation, rating) = parse_rating("Rating 2: lacks some naturalness").unwrap();
        assert_eq!(explanation, "");
        assert_eq!(rating, 2);
    }

    #[test]
    fn rating_last_occurrence_wins() {
        let text = "Rating 5 means perfect. This one earns Rating: 3";
        assert_eq!(parse_rating(text).unwrap().1, 3);
    }

    #[test]
    fn rating_missing_or_out_of_range() {
        assert!(parse_rating("no verdict here").is_err());
        assert!(parse_rating("Rating 9").is_err());
        assert!(parse_rating("Rating 99999999999999999999").is_err());
    }

    #[test]
    fn parsers_tolerate_crlf() {
        let text = "Situation: 4\r\nFlow: 5\r\nOverall Alignment: Yes\r\n";
        assert!(parse_gate(text, ParseMode::Lenient).unwrap().approved);
        let conv = "Angela (Calm): hi\r\nMichael (Calm): hey\r\n";
        assert_eq!(parse_conversation(conv, ParseMode::Lenient).unwrap().len(), 2);
    }
}
