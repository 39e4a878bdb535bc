//! Scripted add/update/delete timelines for simulated sources.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{random_fields, random_type, rng_for};
use crate::model::{MetadataRecord, RecordKey};

/// What a step does.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum StepAction {
    /// New record; stored with version 0 and `timestamp_ms = at_ms`.
    Add {
        record: MetadataRecord,
    },
    /// New content for an existing record; version is bumped and the stamp is
    /// `at_ms - backdate_ms`, modelling a source whose clock runs behind.
    Update {
        record: MetadataRecord,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        backdate_ms: Option<i64>,
    },
    Delete {
        key: RecordKey,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub at_ms: i64,
    #[serde(flatten)]
    pub action: StepAction,
}

impl ScriptStep {
    pub fn key(&self) -> RecordKey {
        match &self.action {
            StepAction::Add { record } | StepAction::Update { record, .. } => record.key(),
            StepAction::Delete { key } => key.clone(),
        }
    }

    pub fn is_delete(&self) -> bool {
        matches!(self.action, StepAction::Delete { .. })
    }

    pub fn is_backdated(&self) -> bool {
        matches!(self.action, StepAction::Update { backdate_ms: Some(d), .. } if d > 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScriptError {
    #[error("step {step}: {key} does not exist")]
    ScriptTargetMissing { step: usize, key: RecordKey },
    #[error("step {step}: {key} already exists")]
    ScriptTargetExists { step: usize, key: RecordKey },
    #[error("step {step}: at_ms goes backwards")]
    OutOfOrder { step: usize },
    #[error("step {step}: negative backdate or non-positive resulting timestamp")]
    BadBackdate { step: usize },
}

/// Ordered steps with non-decreasing `at_ms`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MutationScript {
    pub steps: Vec<ScriptStep>,
}

/// Knobs for [`MutationScript::random`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptParams {
    pub steps: usize,
    pub start_ms: i64,
    /// Steps are spaced uniformly in `1..=2 * mean_gap_ms`.
    pub mean_gap_ms: i64,
    pub delete_fraction: f64,
    pub backdate_fraction: f64,
    pub update_fraction: f64,
    /// Back-dated updates are stamped up to this far before `at_ms`.
    pub max_backdate_ms: i64,
}

impl Default for ScriptParams {
    fn default() -> Self {
        Self {
            steps: 500,
            start_ms: super::corpus::SIM_YEAR_END_MS,
            mean_gap_ms: 10_000,
            delete_fraction: 0.15,
            backdate_fraction: 0.08,
            update_fraction: 0.40,
            max_backdate_ms: 45_000,
        }
    }
}

impl MutationScript {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        Self { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last_at_ms(&self) -> Option<i64> {
        self.steps.last().map(|s| s.at_ms)
    }

    /// Static checks; target existence is checked when the step runs.
    pub fn validate(&self) -> Result<(), ScriptError> {
        for (i, pair) in self.steps.windows(2).enumerate() {
            if pair[1].at_ms < pair[0].at_ms {
                return Err(ScriptError::OutOfOrder { step: i + 1 });
            }
        }
        for (i, step) in self.steps.iter().enumerate() {
            if let StepAction::Update { backdate_ms: Some(d), .. } = step.action {
                if d < 0 || step.at_ms - d <= 0 {
                    return Err(ScriptError::BadBackdate { step: i });
                }
            }
        }
        Ok(())
    }

    /// A random timeline over `initial`, valid by construction: it tracks the
    /// live key set so updates and deletes always hit existing records.
    pub fn random(seed: u64, source_id: &str, initial: &[MetadataRecord], params: ScriptParams) -> Self {
        let mut rng = rng_for(seed, source_id, 1);
        let mut live: Vec<RecordKey> = initial.iter().map(MetadataRecord::key).collect();
        let mut current: HashMap<RecordKey, MetadataRecord> = initial.iter().map(|r| (r.key(), r.clone())).collect();
        let mut next_id = initial.len();
        let mut at_ms = params.start_ms;
        let mut steps = Vec::with_capacity(params.steps);

        for _ in 0..params.steps {
            at_ms += rng.random_range(1..=2 * params.mean_gap_ms.max(1));
            let roll: f64 = rng.random();
            let action = if live.is_empty()
                || roll >= params.delete_fraction + params.backdate_fraction + params.update_fraction
            {
                let id = format!("{source_id}-{next_id}");
                next_id += 1;
                let record = MetadataRecord {
                    record_type: random_type(&mut rng),
                    fields: random_fields(&mut rng, source_id, &id),
                    id,
                    version: 0,
                    source_node: source_id.to_string(),
                    timestamp_ms: at_ms,
                };
                live.push(record.key());
                current.insert(record.key(), record.clone());
                StepAction::Add { record }
            } else if roll < params.delete_fraction {
                let key = live.swap_remove(rng.random_range(0..live.len()));
                current.remove(&key);
                StepAction::Delete { key }
            } else {
                let key = &live[rng.random_range(0..live.len())];
                let mut record = current[key].clone();
                let revised = random_fields(&mut rng, source_id, &record.id);
                record.fields.insert("variable".into(), revised["variable"].clone());
                record.fields.insert("title".into(), revised["title"].clone());
                record.version += 1;
                record.timestamp_ms = at_ms;
                current.insert(key.clone(), record.clone());
                let backdate_ms = (roll < params.delete_fraction + params.backdate_fraction)
                    .then(|| rng.random_range(1..=params.max_backdate_ms.max(1)));
                StepAction::Update { record, backdate_ms }
            };
            steps.push(ScriptStep { at_ms, action });
        }
        Self { steps }
    }
}
