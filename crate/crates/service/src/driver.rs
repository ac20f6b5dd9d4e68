//! Pipeline thread behind the API.

use std::sync::Arc;

use log::{info, warn};
use trafficsift_core::pipeline::{run_step, should_stop, ExpertPolicy, PipelineState, StepReport, StopRule};
use trafficsift_core::{Error, Result};

use crate::hub::{ApiSnapshot, Hub, RunStatus};

pub struct Driver {
    state: Option<PipelineState>,
    reports: Vec<StepReport>,
    rule: StopRule,
    hub: Arc<Hub>,
}

impl Driver {
    /// Publishes the initial snapshot and returns the driver with its hub.
    pub fn new(state: PipelineState, rule: StopRule) -> (Self, Arc<Hub>) {
        let hub = Arc::new(Hub::new(ApiSnapshot::initial(&state)));
        let driver = Self {
            state: Some(state),
            reports: Vec::new(),
            rule,
            hub: Arc::clone(&hub),
        };
        (driver, hub)
    }

    pub fn state(&self) -> Option<&PipelineState> {
        self.state.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.state.as_ref().is_none_or(|s| should_stop(s, &self.rule))
    }

    /// Applies staged verdicts and runs one step. Returns false once the stop
    /// rule holds, without running anything.
    pub fn step(&mut self) -> Result<bool> {
        if self.is_finished() {
            self.hub.set_status(RunStatus::Done);
            return Ok(false);
        }
        let mut state = self.state.take().ok_or_else(|| Error::InvalidInput("pipeline state was lost".into()))?;
        self.hub.set_status(RunStatus::Training);
        for (gid, verdict) in self.hub.staged() {
            if let Err(e) = state.stage_verdict(gid, verdict) {
                warn!("dropping staged verdict for group {gid}: {e}");
            }
        }
        let (state, report) = match run_step(state) {
            Ok(v) => v,
            Err(e) => {
                self.hub.fail(e.to_string());
                return Err(e);
            }
        };
        info!(
            "step {}: accepted {}, unknown {}, deferred {}",
            report.step, report.counts.accepted, report.counts.detected_unknown, report.counts.deferred
        );
        self.reports.push(report);
        let mut snapshot = ApiSnapshot::after_step(&state, self.reports.clone()).inspect_err(|e| self.hub.fail(e.to_string()))?;
        if should_stop(&state, &self.rule) {
            snapshot.status = RunStatus::Done;
        } else if state.policy == ExpertPolicy::External && !snapshot.all_pending_staged() {
            snapshot.status = RunStatus::AwaitingExpert;
        }
        self.hub.publish(snapshot);
        self.state = Some(state);
        Ok(true)
    }

    /// Runs until the stop rule holds or the hub shuts down. With an external
    /// expert, each step waits until every pending group has a verdict.
    pub fn run(mut self) -> Result<(PipelineState, Vec<StepReport>)> {
        loop {
            if self.hub.is_shut_down() || !self.step()? {
                break;
            }
            let external = self.state.as_ref().is_some_and(|s| s.policy == ExpertPolicy::External);
            if external && !self.is_finished() && !self.hub.wait_for_verdicts() {
                break;
            }
        }
        self.hub.set_status(RunStatus::Done);
        let state = self.state.ok_or_else(|| Error::InvalidInput("pipeline state was lost".into()))?;
        Ok((state, self.reports))
    }
}
