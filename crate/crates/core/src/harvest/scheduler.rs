use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use super::{HarvestError, Harvester, ReconcileStats, SourceClient, SourceNodeConfig, SyncStats};

/// Longest back-off after repeated failures, in poll intervals.
const MAX_BACKOFF_INTERVALS: u64 = 8;

/// Time source for the scheduler.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> i64;
    /// Returns once `now_ms() >= deadline_ms` or `stop` is set.
    fn sleep_until(&self, deadline_ms: i64, stop: &AtomicBool);
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> i64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as i64).unwrap_or(0)
    }

    fn sleep_until(&self, deadline_ms: i64, stop: &AtomicBool) {
        while !stop.load(Ordering::SeqCst) {
            let left = deadline_ms - self.now_ms();
            if left <= 0 {
                return;
            }
            std::thread::sleep(Duration::from_millis(left.min(100) as u64));
        }
    }
}

/// A clock that only moves when told to.
pub struct ManualClock {
    now: Mutex<i64>,
    moved: Condvar,
}

impl ManualClock {
    pub fn new(start_ms: i64) -> Self {
        Self { now: Mutex::new(start_ms), moved: Condvar::new() }
    }

    pub fn advance(&self, by_ms: i64) {
        *self.now.lock() += by_ms;
        self.moved.notify_all();
    }

    pub fn set(&self, ms: i64) {
        *self.now.lock() = ms;
        self.moved.notify_all();
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> i64 {
        *self.now.lock()
    }

    fn sleep_until(&self, deadline_ms: i64, stop: &AtomicBool) {
        let mut now = self.now.lock();
        while *now < deadline_ms && !stop.load(Ordering::SeqCst) {
            self.moved.wait_for(&mut now, Duration::from_millis(20));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleKind {
    FullHarvest,
    IncrementalSync,
}

/// Per-source counters exposed on the status endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TaskStatus {
    pub source_id: String,
    pub cycles: u64,
    pub full_harvests: u64,
    pub sync_attempts: u64,
    pub reconciles: u64,
    pub failures: u64,
    pub consecutive_failures: u64,
    pub next_due_ms: i64,
    pub last_error: Option<String>,
    pub last_sync: Option<SyncStats>,
    pub last_reconcile: Option<ReconcileStats>,
}

struct TaskState {
    next_due_ms: i64,
    status: TaskStatus,
}

/// One source's harvest loop state. Its mutex serialises every operation on the source.
pub struct SourceTask {
    config: SourceNodeConfig,
    client: Arc<dyn SourceClient>,
    state: Mutex<TaskState>,
}

impl SourceTask {
    pub fn config(&self) -> &SourceNodeConfig {
        &self.config
    }

    pub fn status(&self) -> TaskStatus {
        let s = self.state.lock();
        TaskStatus { next_due_ms: s.next_due_ms, ..s.status.clone() }
    }
}

/// Runs full harvest, periodic incremental sync, and every-Nth-cycle reconcile per source.
pub struct Scheduler {
    harvester: Arc<Harvester>,
    tasks: Vec<Arc<SourceTask>>,
    reconcile_every: u64,
}

impl Scheduler {
    pub fn new(harvester: Arc<Harvester>, reconcile_every: u64) -> Self {
        Self { harvester, tasks: Vec::new(), reconcile_every: reconcile_every.max(1) }
    }

    /// Registers a source whose first cycle is due at `start_ms`.
    pub fn add_source(&mut self, config: SourceNodeConfig, client: Arc<dyn SourceClient>, start_ms: i64) {
        let status = TaskStatus { source_id: config.source_id.clone(), ..TaskStatus::default() };
        self.tasks.push(Arc::new(SourceTask {
            config,
            client,
            state: Mutex::new(TaskState { next_due_ms: start_ms, status }),
        }));
    }

    pub fn harvester(&self) -> &Arc<Harvester> {
        &self.harvester
    }

    pub fn tasks(&self) -> &[Arc<SourceTask>] {
        &self.tasks
    }

    pub fn statuses(&self) -> Vec<TaskStatus> {
        self.tasks.iter().map(|t| t.status()).collect()
    }

    fn task(&self, source_id: &str) -> Option<&Arc<SourceTask>> {
        self.tasks.iter().find(|t| t.config.source_id == source_id)
    }

    /// One scheduled cycle: full harvest when no cursor exists, otherwise an
    /// incremental sync followed, every `reconcile_every` syncs, by a reconcile.
    fn run_cycle(&self, task: &SourceTask, state: &mut TaskState) -> Result<CycleKind, HarvestError> {
        let cfg = &task.config;
        let client = task.client.as_ref();
        state.status.cycles += 1;
        if self.harvester.cursors().get(&cfg.source_id).is_none() {
            state.status.full_harvests += 1;
            state.status.last_sync = Some(self.harvester.full_harvest(cfg, client)?);
            return Ok(CycleKind::FullHarvest);
        }
        state.status.sync_attempts += 1;
        state.status.last_sync = Some(self.harvester.incremental_sync(cfg, client)?);
        if state.status.sync_attempts.is_multiple_of(self.reconcile_every) {
            state.status.reconciles += 1;
            state.status.last_reconcile = Some(self.harvester.reconcile(cfg, client)?);
        }
        Ok(CycleKind::IncrementalSync)
    }

    fn run_scheduled(&self, task: &SourceTask) {
        let mut state = task.state.lock();
        let due = state.next_due_ms;
        let interval = task.config.poll_interval_ms as i64;
        match self.run_cycle(task, &mut state) {
            Ok(_) => {
                state.status.consecutive_failures = 0;
                state.status.last_error = None;
                state.next_due_ms = due + interval;
            }
            Err(e) => {
                tracing::warn!(source = %task.config.source_id, error = %e, "harvest cycle failed; will retry");
                state.status.failures += 1;
                state.status.consecutive_failures += 1;
                state.status.last_error = Some(e.to_string());
                let backoff = 1u64 << (state.status.consecutive_failures - 1).min(3);
                state.next_due_ms = due + interval * backoff.min(MAX_BACKOFF_INTERVALS) as i64;
            }
        }
    }

    /// Runs every cycle due at or before `now_ms`, earliest first. Deterministic;
    /// returns the number of cycles run.
    pub fn run_due(&self, now_ms: i64) -> usize {
        let mut ran = 0;
        loop {
            let next = self
                .tasks
                .iter()
                .map(|t| (t.state.lock().next_due_ms, t))
                .filter(|(due, _)| *due <= now_ms)
                .min_by_key(|(due, _)| *due);
            let Some((_, task)) = next else { break };
            self.run_scheduled(task);
            ran += 1;
        }
        ran
    }

    /// Service loop: one thread per source until `stop` is set. Sources never
    /// wait on each other; writes still serialise inside the cluster.
    pub fn run(&self, clock: &dyn Clock, stop: &AtomicBool) {
        std::thread::scope(|scope| {
            for task in &self.tasks {
                scope.spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        let due = task.state.lock().next_due_ms;
                        clock.sleep_until(due, stop);
                        if stop.load(Ordering::SeqCst) {
                            break;
                        }
                        self.run_scheduled(task);
                    }
                });
            }
        });
    }

    /// On-demand harvest outside the schedule (the admin endpoint).
    pub fn trigger(&self, source_id: &str, full: bool) -> Option<Result<SyncStats, HarvestError>> {
        let task = self.task(source_id)?;
        let _serialised = task.state.lock();
        let cfg = &task.config;
        let client = task.client.as_ref();
        Some(if full || self.harvester.cursors().get(source_id).is_none() {
            self.harvester.full_harvest(cfg, client)
        } else {
            self.harvester.incremental_sync(cfg, client)
        })
    }
}
