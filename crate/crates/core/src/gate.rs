//! Step clock shared by the workers of one run. It decides when a step's
//! embeddings may be read, when a step's embedding gradients may be
//! applied, and where the pipeline pauses for evaluation, checkpoints and
//! fault injection. Payloads never pass through it.
//!
//! Reads for step `t` see exactly the commits of steps `< t - cap`: a read
//! waits until those are applied, and the commit of step `s` waits until
//! every read of steps `<= s + cap` has finished.

use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, MutexGuard};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GatePlan {
    pub total_steps: u64,
    pub staleness_cap: u64,
    pub workers: usize,
    pub samples_per_step: usize,
    /// `hooks[s]`: the pipeline drains after step `s` so the clock owner
    /// can inspect or modify state.
    pub hooks: Vec<bool>,
    /// Longest any participant may wait before the run is declared stuck.
    pub stall_timeout: Duration,
}

struct State {
    commits: u64,
    reads: Vec<usize>,
    staged: Vec<usize>,
    loss: Vec<(f64, usize)>,
    aborted: Option<String>,
    reload: Vec<bool>,
    dense_checkpoint: Option<(u64, Vec<f32>)>,
}

pub struct StepGate {
    plan: GatePlan,
    state: Mutex<State>,
    cv: Condvar,
}

impl StepGate {
    pub fn new(plan: GatePlan) -> Result<Self> {
        if plan.hooks.len() as u64 != plan.total_steps || plan.workers == 0 || plan.samples_per_step == 0 {
            return Err(Error::Config("inconsistent step plan".into()));
        }
        let t = plan.total_steps as usize;
        Ok(Self {
            state: Mutex::new(State {
                commits: 0,
                reads: vec![0; t],
                staged: vec![0; t],
                loss: vec![(0.0, 0); t],
                aborted: None,
                reload: vec![false; plan.workers],
                dense_checkpoint: None,
            }),
            plan,
            cv: Condvar::new(),
        })
    }

    pub fn plan(&self) -> &GatePlan {
        &self.plan
    }

    pub fn is_hook(&self, step: u64) -> bool {
        self.plan.hooks.get(step as usize).copied().unwrap_or(false)
    }

    fn wait_until(&self, what: &str, mut ready: impl FnMut(&State) -> bool) -> Result<MutexGuard<'_, State>> {
        let deadline = Instant::now() + self.plan.stall_timeout;
        let mut st = self.state.lock();
        loop {
            if let Some(r) = &st.aborted {
                return Err(Error::Aborted(r.clone()));
            }
            if ready(&st) {
                return Ok(st);
            }
            if self.cv.wait_until(&mut st, deadline).timed_out() {
                if ready(&st) {
                    return Ok(st);
                }
                return Err(Error::SyncFailure(format!(
                    "{what} stalled for {:?} at {} commits",
                    self.plan.stall_timeout, st.commits
                )));
            }
        }
    }

    /// Block until step `t` may read embeddings.
    pub fn wait_pull(&self, t: u64) -> Result<()> {
        let cap = self.plan.staleness_cap;
        self.wait_until("embedding read", |s| s.commits + cap >= t).map(drop)
    }

    pub fn read_done(&self, t: u64, samples: usize) {
        let mut st = self.state.lock();
        if let Some(r) = st.reads.get_mut(t as usize) {
            *r += samples;
        }
        drop(st);
        self.cv.notify_all();
    }

    /// A worker finished step `t`: gradients staged, dense update done.
    pub fn staged(&self, t: u64, loss_sum: f64, samples: usize) {
        let mut st = self.state.lock();
        if let Some(s) = st.staged.get_mut(t as usize) {
            *s += 1;
        }
        if let Some(l) = st.loss.get_mut(t as usize) {
            l.0 += loss_sum;
            l.1 += samples;
        }
        drop(st);
        self.cv.notify_all();
    }

    /// Block until step `s` may be committed.
    pub fn wait_committable(&self, s: u64) -> Result<()> {
        let (k, n, cap) = (self.plan.workers, self.plan.samples_per_step, self.plan.staleness_cap);
        let last = (s + cap).min(self.plan.total_steps - 1) as usize;
        self.wait_until("commit", |st| {
            st.commits == s && st.staged[s as usize] == k && st.reads[..=last].iter().all(|&r| r >= n)
        })
        .map(drop)
    }

    pub fn mark_committed(&self, s: u64) {
        self.state.lock().commits = s + 1;
        self.cv.notify_all();
    }

    pub fn commits(&self) -> u64 {
        self.state.lock().commits
    }

    /// Block until step `s` and its hook have completed.
    pub fn wait_committed(&self, s: u64) -> Result<()> {
        self.wait_until("hook barrier", |st| st.commits > s).map(drop)
    }

    /// Mean training loss of step `s` over all samples that trained.
    pub fn step_loss(&self, s: u64) -> Option<f64> {
        let (sum, n) = self.state.lock().loss[s as usize];
        (n > 0).then(|| sum / n as f64)
    }

    pub fn abort(&self, reason: impl Into<String>) {
        let mut st = self.state.lock();
        if st.aborted.is_none() {
            st.aborted = Some(reason.into());
        }
        drop(st);
        self.cv.notify_all();
    }

    pub fn aborted(&self) -> Option<String> {
        self.state.lock().aborted.clone()
    }

    pub fn check(&self) -> Result<()> {
        match self.aborted() {
            Some(r) => Err(Error::Aborted(r)),
            None => Ok(()),
        }
    }

    pub fn store_dense_checkpoint(&self, step: u64, params: Vec<f32>) {
        self.state.lock().dense_checkpoint = Some((step, params));
    }

    pub fn dense_checkpoint(&self) -> Option<(u64, Vec<f32>)> {
        self.state.lock().dense_checkpoint.clone()
    }

    /// Every replica reloads the dense checkpoint before its next step.
    pub fn request_reload(&self) {
        self.state.lock().reload.iter_mut().for_each(|r| *r = true);
    }

    pub fn take_reload(&self, rank: usize) -> bool {
        std::mem::take(&mut self.state.lock().reload[rank])
    }
}
