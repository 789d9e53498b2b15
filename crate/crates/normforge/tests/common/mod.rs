//! Shared helpers for integration tests: fixture loading and mock-backed
//! pipeline construction.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use normforge::gateway::{BackendConfig, Gateway, MockScript, ScriptedBackend};
use normforge::pipeline::{Pipeline, PipelineConfig};

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn e2e_script() -> MockScript {
    MockScript::load(&fixture_path("e2e_script.json")).expect("fixture script loads")
}

pub fn e2e_config(output_dir: &Path) -> PipelineConfig {
    let mut config = PipelineConfig::load(&fixture_path("e2e_config.json")).expect("fixture config loads");
    config.output_dir = output_dir.to_path_buf();
    config
}

pub struct MockRun {
    pub pipeline: Pipeline,
    pub gateway: Arc<Gateway>,
    pub backend: Arc<ScriptedBackend>,
}

pub fn mock_pipeline(config: PipelineConfig, script: MockScript) -> MockRun {
    let backend = Arc::new(ScriptedBackend::new(script));
    let backend_config = BackendConfig { backoff_base_ms: 1, ..config.backend.clone() };
    let gateway = Arc::new(Gateway::new(backend.clone(), backend_config));
    let pipeline = Pipeline::new(config, gateway.clone()).expect("valid config");
    MockRun { pipeline, gateway, backend }
}
