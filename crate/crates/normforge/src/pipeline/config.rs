//! Run configuration: relationship catalog, sampling catalogs, thresholds,
//! backend settings, and per-stage temperatures.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dedup::{NameHandling, DEFAULT_DEDUP_THRESHOLD};
use crate::gateway::BackendConfig;
use crate::parse::ParseMode;

/// The default pool of 20 relationship types.
pub const DEFAULT_RELATIONSHIPS: [&str; 20] = [
    "parent-child",
    "siblings",
    "husband-wife",
    "boyfriend-girlfriend",
    "friends",
    "best friends",
    "colleagues",
    "boss-employee",
    "neighbors",
    "roommates",
    "teacher-student",
    "doctor-patient",
    "landlord-tenant",
    "mentor-mentee",
    "grandparent-grandchild",
    "cousins",
    "in-laws",
    "teammates",
    "customer-staff",
    "strangers",
];

/// Default trajectory catalog. Entries complete the sentence
/// "The conversation should ...".
pub const DEFAULT_FLOWS: [&str; 6] = [
    "Start cautiously, but confrontational as boundaries are breached, leading to an intense fight",
    "escalate steadily into an argument",
    "begin warmly, then sour as a misunderstanding surfaces, ending cold and unresolved",
    "open with mild irritation, build into accusations, and end with one side walking away",
    "start neutral, grow tense in the middle, and close with a reluctant truce that satisfies no one",
    "begin with small talk, shift into passive-aggressive jabs, and end in open hostility",
];

/// Per-stage sampling temperatures. Self-verification is not configurable:
/// it always runs at temperature 0 exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageTemperatures {
    pub characters: f32,
    pub situations: f32,
    pub conversation: f32,
    pub summary: f32,
    pub norms: f32,
    pub continuation: f32,
    pub judge: f32,
}

impl Default for StageTemperatures {
    fn default() -> Self {
        Self {
            characters: 1.0,
            situations: 1.0,
            conversation: 1.0,
            summary: 1.0,
            norms: 1.0,
            continuation: 1.0,
            judge: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub relationships: Vec<String>,
    pub pairs_per_relationship: u32,
    pub personal_desc_catalog: Vec<String>,
    pub flow_catalog: Vec<String>,
    pub dedup_threshold: f64,
    /// Deduplicate across all relationships instead of within each.
    pub global_dedup: bool,
    pub name_handling: NameHandling,
    /// Situations whose normalized text contains one of these topics are
    /// dropped before dedup.
    pub drop_topics: Vec<String>,
    /// Extra topics appended to the situation template's avoid line.
    pub extra_avoid_topics: Vec<String>,
    pub seed: u64,
    pub backend: BackendConfig,
    pub output_dir: PathBuf,
    pub stage_temperatures: StageTemperatures,
    pub max_parse_retries: u32,
    pub strict_parse: bool,
    /// Abort a stage when its success fraction falls below this.
    pub min_stage_yield: f64,
    /// Load template files from here instead of the embedded copies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            relationships: DEFAULT_RELATIONSHIPS.iter().map(|s| s.to_string()).collect(),
            pairs_per_relationship: 1,
            personal_desc_catalog: vec!["similar".to_string(), "contrasting".to_string()],
            flow_catalog: DEFAULT_FLOWS.iter().map(|s| s.to_string()).collect(),
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            global_dedup: false,
            name_handling: NameHandling::Placeholder,
            drop_topics: Vec::new(),
            extra_avoid_topics: Vec::new(),
            seed: 0,
            backend: BackendConfig::default(),
            output_dir: PathBuf::from("out"),
            stage_temperatures: StageTemperatures::default(),
            max_parse_retries: 3,
            strict_parse: false,
            min_stage_yield: 0.5,
            templates_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn parse_mode(&self) -> ParseMode {
        if self.strict_parse {
            ParseMode::Strict
        } else {
            ParseMode::Lenient
        }
    }

    /// All constraint violations, empty when the config is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.relationships.is_empty() {
            problems.push("relationships must be non-empty".to_string());
        }
        if self.relationships.iter().any(|r| r.trim().is_empty()) {
            problems.push("relationship labels must be non-empty".to_string());
        }
        if self.pairs_per_relationship < 1 {
            problems.push("pairs_per_relationship must be >= 1".to_string());
        }
        if self.personal_desc_catalog.is_empty() {
            problems.push("personal_desc_catalog must be non-empty".to_string());
        }
        if self.flow_catalog.is_empty() {
            problems.push("flow_catalog must be non-empty".to_string());
        }
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold <= 1.0) {
            problems.push(format!("dedup_threshold {} outside (0, 1]", self.dedup_threshold));
        }
        if self.backend.parallelism < 1 {
            problems.push("backend.parallelism must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.min_stage_yield) {
            problems.push(format!("min_stage_yield {} outside [0, 1]", self.min_stage_yield));
        }
        problems
    }
}
