//! Pipeline integration tests over the scripted backend: stage behavior,
//! fault injection, resume granularity, and the analyze/export paths.

mod common;

use std::collections::BTreeMap;

use common::{e2e_config, e2e_script, fixture_path, mock_pipeline};
use normforge::domain::{ConversationStatus, SituationStatus};
use normforge::gateway::{MockScript, ScriptEntry, ScriptMatcher};
use normforge::metrics::{self, Corpus};
use normforge::pipeline::{
    export_dataset, read_jsonl, ConversationRecord, ExportRecord, PipelineConfig, PipelineError,
    RecordStatus, Stage, StagePlan,
};

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().expect("tempdir")
}

#[tokio::test]
async fn full_mock_run_produces_expected_records() {
    let dir = tmp();
    let run = mock_pipeline(e2e_config(dir.path()), e2e_script());
    let manifest = run.pipeline.run().await.expect("pipeline run");

    assert_eq!(manifest.counts.pairs, 2);
    assert_eq!(manifest.counts.situations_kept, 9);
    assert_eq!(manifest.counts.situations_dropped_duplicate, 1);
    assert_eq!(manifest.counts.conversations_attempted, 9);
    assert_eq!(manifest.counts.conversations_accepted, 8);
    assert_eq!(manifest.counts.conversations_rejected, 1);
    assert_eq!(manifest.counts.conversations_failed, 0);
    assert_eq!(manifest.counts.norm_annotations, 8);
    assert_eq!(manifest.counts.violations, 8);
    assert_eq!(manifest.counts.interventions, 4);
    assert_eq!(manifest.counts.interventions_failed, 0);

    // The duplicate situation carries its embedding and dropped status.
    let records: Vec<normforge::pipeline::SituationRecord> =
        read_jsonl(&dir.path().join("situations.jsonl")).unwrap();
    assert_eq!(records.len(), 10);
    let dropped: Vec<_> = records
        .iter()
        .filter(|r| r.situation.status == SituationStatus::DroppedDuplicate)
        .collect();
    assert_eq!(dropped.len(), 1);
    assert!(dropped[0].situation.embedding.is_some());
    assert!(dropped[0].situation.normalized_text.contains("PersonB left the kitchen"));
}

#[tokio::test]
async fn rejected_conversation_is_checkpointed_with_reason() {
    let dir = tmp();
    let run = mock_pipeline(e2e_config(dir.path()), e2e_script());
    run.pipeline.run().await.unwrap();
    let records: Vec<ConversationRecord> = read_jsonl(&dir.path().join("conversations.jsonl")).unwrap();
    let rejected: Vec<_> = records
        .iter()
        .filter(|r| r.conversation.status == ConversationStatus::Rejected)
        .collect();
    assert_eq!(rejected.len(), 1);
    assert!(rejected[0].failure_reason.as_deref().unwrap().contains("gate"));
    let gate = rejected[0].conversation.gate.expect("gate present");
    assert!(!gate.approved);
    assert_eq!(gate.situation_score, 2);
}

#[tokio::test]
async fn malformed_pair_block_retried_once() {
    let dir = tmp();
    let mut script = e2e_script();
    // First response for parent-child is unparseable prose, then the real block.
    let good = script.entries[0].responses[0].clone();
    script.entries[0].responses = vec!["Here are some people I imagined for you.".into(), good];
    let run = mock_pipeline(e2e_config(dir.path()), script);
    let manifest = run.pipeline.run().await.unwrap();
    assert_eq!(manifest.counts.pairs, 2);
    let requests = run.backend.recorded_requests();
    let char_requests = requests
        .iter()
        .filter(|r| r.prompt.contains("relationship of parent-child"))
        .count();
    assert_eq!(char_requests, 2, "one failed parse plus one retry");
    // Parse retries are re-requests, not transport retries.
    assert_eq!(run.gateway.stats().retries, 0);
    assert_eq!(run.gateway.stats().failures, 0);
}

#[tokio::test]
async fn exhausted_parse_retries_fail_characters_stage() {
    let dir = tmp();
    let mut config = e2e_config(dir.path());
    config.relationships = vec!["parent-child".into()];
    let script = MockScript::new(vec![ScriptEntry::new(
        ScriptMatcher::Substring("relationship of parent-child".into()),
        "never a valid block",
    )]);
    let run = mock_pipeline(config, script);
    match run.pipeline.run().await {
        Err(PipelineError::StageFailed { stage, produced, .. }) => {
            assert_eq!(stage, "characters");
            assert_eq!(produced, 0);
        }
        other => panic!("expected StageFailed, got {other:?}"),
    }
    // 1 initial + 3 parse retries.
    assert_eq!(run.backend.recorded_requests().len(), 4);
}

#[tokio::test]
async fn empty_relationships_rejected_before_any_call() {
    let dir = tmp();
    let mut config = e2e_config(dir.path());
    config.relationships = vec![];
    let backend = std::sync::Arc::new(normforge::gateway::ScriptedBackend::new(MockScript::new(vec![])));
    let gateway = std::sync::Arc::new(normforge::gateway::Gateway::new(
        backend.clone(),
        config.backend.clone(),
    ));
    match normforge::pipeline::Pipeline::new(config, gateway) {
        Err(PipelineError::Config(message)) => assert!(message.contains("relationships")),
        other => panic!("expected Config error, got {:?}", other.err()),
    }
    assert!(backend.recorded_requests().is_empty());
}

#[tokio::test]
async fn unknown_speaker_fails_the_record_not_the_stage() {
    let dir = tmp();
    let mut script = e2e_script();
    // Dana/Felix transcript narrated by an outsider fails speaker validation
    // on every parse attempt.
    let entry = script
        .entries
        .iter_mut()
        .find(|e| matches!(&e.matcher, ScriptMatcher::Substring(s) if s.contains("Dana and Felix")))
        .unwrap();
    entry.responses = vec!["Narrator (calm): They argued about the hedge for a while.".into()];
    let run = mock_pipeline(e2e_config(dir.path()), script);
    let manifest = run.pipeline.run().await.unwrap();
    assert_eq!(manifest.counts.conversations_failed, 5);
    assert_eq!(manifest.counts.conversations_accepted, 4);
    assert_eq!(manifest.counts.conversations_rejected, 0);
    let records: Vec<ConversationRecord> = read_jsonl(&dir.path().join("conversations.jsonl")).unwrap();
    let failed: Vec<_> = records
        .iter()
        .filter(|r| r.conversation.status == ConversationStatus::Failed)
        .collect();
    assert!(failed.iter().all(|r| r.failure_reason.is_some()));
}

#[tokio::test]
async fn intervention_continuation_failure_keeps_annotation() {
    let dir = tmp();
    let mut script = e2e_script();
    let entry = script
        .entries
        .iter_mut()
        .find(|e| matches!(&e.matcher, ScriptMatcher::Substring(s) if s.contains("Continue this conversation")))
        .unwrap();
    entry.responses = vec!["no transcript here, just refusal".into()];
    let run = mock_pipeline(e2e_config(dir.path()), script);
    let manifest = run.pipeline.run().await.unwrap();
    assert_eq!(manifest.counts.norm_annotations, 8);
    assert_eq!(manifest.counts.violations, 8);
    assert_eq!(manifest.counts.interventions, 0);
    assert_eq!(manifest.counts.interventions_failed, 4);
    let interventions: Vec<normforge::pipeline::InterventionOutcome> =
        read_jsonl(&dir.path().join("interventions.jsonl")).unwrap();
    assert!(interventions.iter().all(|i| i.status == RecordStatus::Failed));
    assert!(interventions.iter().all(|i| i.failure_reason.is_some()));
}

#[tokio::test]
async fn stage_restriction_generates_only_selected() {
    let dir = tmp();
    let run = mock_pipeline(e2e_config(dir.path()), e2e_script());
    let manifest = run
        .pipeline
        .run_plan(&StagePlan::from_stages(&[Stage::Characters]))
        .await
        .unwrap();
    assert_eq!(manifest.counts.pairs, 2);
    assert_eq!(manifest.counts.situations_kept, 0);
    assert_eq!(manifest.counts.conversations_attempted, 0);
    assert!(dir.path().join("pairs.jsonl").exists());
    assert!(!dir.path().join("situations.jsonl").exists());
    assert!(!dir.path().join("conversations.jsonl").exists());
    // Only the two character requests went out.
    assert_eq!(run.backend.recorded_requests().len(), 2);
}

#[tokio::test]
async fn norms_and_intervene_halves_run_separately() {
    let dir = tmp();
    {
        let run = mock_pipeline(e2e_config(dir.path()), e2e_script());
        run.pipeline
            .run_plan(&StagePlan::from_stages(&[
                Stage::Characters,
                Stage::Situations,
                Stage::Conversations,
            ]))
            .await
            .unwrap();
        assert!(!dir.path().join("norms.jsonl").exists());
    }
    {
        let run = mock_pipeline(e2e_config(dir.path()), e2e_script());
        let manifest = run
            .pipeline
            .run_plan(&StagePlan { discover_norms: true, ..StagePlan::none() })
            .await
            .unwrap();
        assert_eq!(manifest.counts.norm_annotations, 8);
        assert_eq!(manifest.counts.interventions, 0);
        assert!(!dir.path().join("interventions.jsonl").exists());
    }
    {
        let run = mock_pipeline(e2e_config(dir.path()), e2e_script());
        let manifest = run
            .pipeline
            .run_plan(&StagePlan { intervene: true, ..StagePlan::none() })
            .await
            .unwrap();
        assert_eq!(manifest.counts.interventions, 4);
        // Intervention continuations only: 4 requests.
        assert_eq!(run.backend.recorded_requests().len(), 4);
    }
}

#[tokio::test]
async fn drop_topics_mark_situations_before_dedup() {
    let dir = tmp();
    let mut config = e2e_config(dir.path());
    config.drop_topics = vec!["casserole".into()];
    let run = mock_pipeline(config, e2e_script());
    let manifest = run.pipeline.run().await.unwrap();
    assert_eq!(manifest.counts.situations_dropped_topic, 1);
    assert_eq!(manifest.counts.situations_kept, 8);
    // The casserole conversation never ran, so nothing is rejected.
    assert_eq!(manifest.counts.conversations_attempted, 8);
    assert_eq!(manifest.counts.conversations_rejected, 0);
}

#[tokio::test]
async fn export_joins_violations_and_interventions() {
    let dir = tmp();
    let run = mock_pipeline(e2e_config(dir.path()), e2e_script());
    run.pipeline.run().await.unwrap();
    let out = dir.path().join("export.jsonl");
    let count = export_dataset(dir.path(), &out).unwrap();
    assert_eq!(count, 8);
    let records: Vec<ExportRecord> = read_jsonl(&out).unwrap();
    assert_eq!(records.len(), 8);
    let with_interventions =
        records.iter().filter(|r| r.intervention.is_some()).count();
    assert_eq!(with_interventions, 4);
    let with_violations = records.iter().filter(|r| !r.violations.is_empty()).count();
    assert_eq!(with_violations, 4);
    assert!(records.iter().all(|r| r.conversation.status == ConversationStatus::Accepted));
}

#[tokio::test]
async fn analyze_inputs_are_recomputable_from_checkpoints() {
    let dir = tmp();
    let run = mock_pipeline(e2e_config(dir.path()), e2e_script());
    run.pipeline.run().await.unwrap();

    let data = normforge::pipeline::RunData::load(dir.path()).unwrap();
    let accepted: Vec<_> = data.accepted_conversations().into_iter().cloned().collect();
    assert_eq!(accepted.len(), 8);
    let mut violations_by_conv = BTreeMap::new();
    for norm in data.ok_norms() {
        violations_by_conv.insert(norm.conv_id.clone(), norm.violations.len());
    }
    let stats = metrics::dataset_stats(&accepted, &violations_by_conv).unwrap();
    assert_eq!(stats.dialogues, 8);
    assert_eq!(stats.avg_violations_per_dialogue, 1.0);
    // 4 conversations of 5 turns and 4 of 4 turns.
    assert_eq!(stats.utterances, 36);
    assert_eq!(stats.avg_uttr_per_dialogue, 4.5);

    let corpus = Corpus::from_conversations(accepted.iter());
    let dd2 = metrics::distinct_n(&corpus, 2);
    assert!(dd2 > 0.0 && dd2 <= 1.0);
    assert!(metrics::entropy_geomean(&corpus).unwrap() > 0.0);
}

#[tokio::test]
async fn seeded_flow_assignment_is_stable_across_runs() {
    let dir_a = tmp();
    let dir_b = tmp();
    let run_a = mock_pipeline(e2e_config(dir_a.path()), e2e_script());
    run_a.pipeline.run().await.unwrap();
    let run_b = mock_pipeline(e2e_config(dir_b.path()), e2e_script());
    run_b.pipeline.run().await.unwrap();
    let flows = |dir: &std::path::Path| -> Vec<String> {
        let records: Vec<ConversationRecord> = read_jsonl(&dir.join("conversations.jsonl")).unwrap();
        records
            .iter()
            .map(|r| r.conversation.flow.as_ref().unwrap().description.clone())
            .collect()
    };
    assert_eq!(flows(dir_a.path()), flows(dir_b.path()));
}

#[test]
fn fixture_config_is_valid() {
    let config = PipelineConfig::load(&fixture_path("e2e_config.json")).unwrap();
    assert!(config.validate().is_empty());
    assert_eq!(config.seed, 7);
}
