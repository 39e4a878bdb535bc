use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use super::script::{MutationScript, ScriptError, StepAction};
use crate::cluster::InventoryItem;
use crate::harvest::{harvest_order, HarvestPage, InventoryPage, PageRequest, SourceClient, SourceError};
use crate::model::{MetadataRecord, RecordKey};

/// Injected misbehaviour for a simulated source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FaultMode {
    #[default]
    None,
    Unreachable,
    Slow {
        latency_ms: u64,
    },
    /// Search pages come back in reverse order.
    PageOrderViolation,
}

/// A simulated source index node.
#[derive(Debug, Clone, Default)]
pub struct SimNode {
    pub source_id: String,
    pub store: BTreeMap<RecordKey, MetadataRecord>,
    pub sim_clock_ms: i64,
    pub fault: FaultMode,
    script: MutationScript,
    script_pos: usize,
}

impl SimNode {
    pub fn new(source_id: impl Into<String>, records: impl IntoIterator<Item = MetadataRecord>) -> Self {
        let store: BTreeMap<RecordKey, MetadataRecord> = records.into_iter().map(|r| (r.key(), r)).collect();
        let sim_clock_ms = store.values().map(|r| r.timestamp_ms).max().unwrap_or(0);
        Self { source_id: source_id.into(), store, sim_clock_ms, ..Self::default() }
    }

    /// Attaches the timeline that [`SimNode::advance`] plays.
    pub fn with_script(mut self, script: MutationScript) -> Self {
        self.script = script;
        self.script_pos = 0;
        self
    }

    pub fn script(&self) -> &MutationScript {
        &self.script
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    /// Plays the attached script up to `to_ms` and moves the clock there.
    pub fn advance(&mut self, to_ms: i64) -> Result<usize, ScriptError> {
        let script = std::mem::take(&mut self.script);
        let applied = self.apply_script(&script, to_ms);
        self.script = script;
        applied
    }

    /// Runs every not-yet-applied step with `at_ms <= up_to_ms`.
    ///
    /// Progress is tracked on the node, so the same script must be passed on
    /// every call. On error the failing step stays pending.
    pub fn apply_script(&mut self, script: &MutationScript, up_to_ms: i64) -> Result<usize, ScriptError> {
        let mut applied = 0;
        while let Some(step) = script.steps.get(self.script_pos) {
            if step.at_ms > up_to_ms {
                break;
            }
            let index = self.script_pos;
            let key = step.key();
            match &step.action {
                StepAction::Add { record } => {
                    if self.store.contains_key(&key) {
                        return Err(ScriptError::ScriptTargetExists { step: index, key });
                    }
                    let mut record = record.clone();
                    record.version = 0;
                    record.timestamp_ms = step.at_ms;
                    record.source_node = self.source_id.clone();
                    self.store.insert(key, record);
                }
                StepAction::Update { record, backdate_ms } => {
                    let Some(prior) = self.store.get(&key) else {
                        return Err(ScriptError::ScriptTargetMissing { step: index, key });
                    };
                    let stamp = step.at_ms - backdate_ms.unwrap_or(0);
                    if stamp <= 0 {
                        return Err(ScriptError::BadBackdate { step: index });
                    }
                    let mut record = record.clone();
                    record.version = prior.version + 1;
                    record.timestamp_ms = stamp;
                    record.source_node = self.source_id.clone();
                    self.store.insert(key, record);
                }
                StepAction::Delete { .. } => {
                    if self.store.remove(&key).is_none() {
                        return Err(ScriptError::ScriptTargetMissing { step: index, key });
                    }
                }
            }
            self.script_pos += 1;
            applied += 1;
        }
        self.sim_clock_ms = self.sim_clock_ms.max(up_to_ms);
        Ok(applied)
    }

    /// Records in `[from_ms, to_ms)` in harvest order, windowed by offset/limit.
    pub fn serve_search_page(&self, req: PageRequest) -> HarvestPage {
        let mut hits: Vec<&MetadataRecord> =
            self.store.values().filter(|r| r.timestamp_ms >= req.from_ms && r.timestamp_ms < req.to_ms).collect();
        hits.sort_by(|a, b| harvest_order(a, b));
        HarvestPage {
            num_found: hits.len() as u64,
            offset: req.offset as u64,
            docs: hits.into_iter().skip(req.offset).take(req.limit).cloned().collect(),
        }
    }

    /// All `(type, id, digest)` in key order, windowed by offset/limit.
    pub fn serve_inventory(&self, offset: usize, limit: usize) -> InventoryPage {
        InventoryPage {
            num_found: self.store.len() as u64,
            items: self
                .store
                .iter()
                .skip(offset)
                .take(limit)
                .map(|(key, r)| InventoryItem { key: key.clone(), digest: r.digest() })
                .collect(),
        }
    }

    pub fn serve_fetch(&self, keys: &[RecordKey]) -> Vec<MetadataRecord> {
        keys.iter().filter_map(|k| self.store.get(k).cloned()).collect()
    }
}

/// Shared handle to a [`SimNode`] that speaks the harvest protocol in-process,
/// honouring the node's fault mode.
#[derive(Clone)]
pub struct SimSource {
    node: Arc<RwLock<SimNode>>,
}

impl SimSource {
    pub fn new(node: SimNode) -> Self {
        Self { node: Arc::new(RwLock::new(node)) }
    }

    pub fn node(&self) -> &Arc<RwLock<SimNode>> {
        &self.node
    }

    pub fn source_id(&self) -> String {
        self.node.read().source_id.clone()
    }

    pub fn set_fault(&self, fault: FaultMode) {
        self.node.write().fault = fault;
    }

    pub fn advance(&self, to_ms: i64) -> Result<usize, ScriptError> {
        self.node.write().advance(to_ms)
    }

    fn gate(&self) -> Result<FaultMode, SourceError> {
        let fault = self.node.read().fault;
        match fault {
            FaultMode::Unreachable => Err(SourceError::Unreachable(self.source_id())),
            FaultMode::Slow { latency_ms } => {
                std::thread::sleep(Duration::from_millis(latency_ms));
                Ok(fault)
            }
            other => Ok(other),
        }
    }
}

impl SourceClient for SimSource {
    fn search_page(&self, req: PageRequest) -> Result<HarvestPage, SourceError> {
        let fault = self.gate()?;
        let mut page = self.node.read().serve_search_page(req);
        if fault == FaultMode::PageOrderViolation {
            page.docs.reverse();
        }
        Ok(page)
    }

    fn inventory_page(&self, offset: usize, limit: usize) -> Result<InventoryPage, SourceError> {
        self.gate()?;
        Ok(self.node.read().serve_inventory(offset, limit))
    }

    fn fetch(&self, keys: &[RecordKey]) -> Result<Vec<MetadataRecord>, SourceError> {
        self.gate()?;
        Ok(self.node.read().serve_fetch(keys))
    }
}
