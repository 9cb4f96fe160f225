//! Per-id logical clock for embedding updates and the delay statistics
//! derived from it. Every id's version is the number of commits that have
//! written it; a gradient computed from a read at version `v` and applied
//! when the id is at version `c` has delay `c - v`.

use std::collections::HashMap;

use parking_lot::Mutex;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ids::mix64;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StalenessStats {
    /// `histogram[d]` counts applied gradients with delay `d`.
    pub histogram: Vec<u64>,
    pub max: u64,
    pub count: u64,
}

impl StalenessStats {
    pub fn new() -> Self {
        Self::default()
    }

    fn add(&mut self, delay: u64, n: u64) {
        let d = delay as usize;
        if self.histogram.len() <= d {
            self.histogram.resize(d + 1, 0);
        }
        self.histogram[d] += n;
        self.count += n;
        self.max = self.max.max(delay);
    }

    pub fn merge(&mut self, other: &StalenessStats) {
        for (d, &n) in other.histogram.iter().enumerate() {
            if n > 0 {
                self.add(d as u64, n);
            }
        }
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let total: u64 = self.histogram.iter().enumerate().map(|(d, &n)| d as u64 * n).sum();
        total as f64 / self.count as f64
    }
}

pub fn record_staleness(stats: &mut StalenessStats, read_version: u64, current_version: u64) -> Result<()> {
    if current_version < read_version {
        return Err(Error::ClockConsistency(format!(
            "write at version {current_version} precedes its read at version {read_version}"
        )));
    }
    stats.add(current_version - read_version, 1);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClockEvent {
    Read { id: u64, version: u32 },
    Apply { id: u64, read_version: u32 },
    Commit { step: u64, ids: Vec<u64> },
}

const CLOCK_SHARDS: usize = 64;

/// Version clock shared by every PS node of a run. It lives outside the
/// nodes so that a node restored from a checkpoint keeps a monotone clock.
pub struct StalenessTracker {
    versions: Vec<Mutex<HashMap<u64, u32>>>,
    stats: Mutex<StalenessStats>,
    log: Mutex<Option<Vec<ClockEvent>>>,
}

impl Default for StalenessTracker {
    fn default() -> Self {
        Self::new()
    }
}

impl StalenessTracker {
    pub fn new() -> Self {
        Self {
            versions: (0..CLOCK_SHARDS).map(|_| Mutex::new(HashMap::new())).collect(),
            stats: Mutex::new(StalenessStats::new()),
            log: Mutex::new(None),
        }
    }

    fn shard(&self, id: u64) -> &Mutex<HashMap<u64, u32>> {
        &self.versions[(mix64(id) % CLOCK_SHARDS as u64) as usize]
    }

    pub fn version(&self, id: u64) -> u32 {
        self.shard(id).lock().get(&id).copied().unwrap_or(0)
    }

    /// Versions observed by a read of `ids`.
    pub fn read(&self, ids: &[u64]) -> Vec<u32> {
        let v: Vec<u32> = ids.iter().map(|&id| self.version(id)).collect();
        if let Some(log) = self.log.lock().as_mut() {
            log.extend(ids.iter().zip(&v).map(|(&id, &version)| ClockEvent::Read { id, version }));
        }
        v
    }

    /// Record the delay of each applied gradient `(ids[i], read_versions[i])`,
    /// then advance the version of every distinct id once.
    pub fn commit(&self, step: u64, ids: &[u64], read_versions: &[u32]) -> Result<StalenessStats> {
        let mut local = StalenessStats::new();
        for (&id, &rv) in ids.iter().zip(read_versions) {
            record_staleness(&mut local, rv as u64, self.version(id) as u64)?;
        }
        let mut distinct = ids.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        for &id in &distinct {
            *self.shard(id).lock().entry(id).or_insert(0) += 1;
        }
        if let Some(log) = self.log.lock().as_mut() {
            log.extend(
                ids.iter()
                    .zip(read_versions)
                    .map(|(&id, &read_version)| ClockEvent::Apply { id, read_version }),
            );
            log.push(ClockEvent::Commit { step, ids: distinct });
        }
        self.stats.lock().merge(&local);
        Ok(local)
    }

    pub fn stats(&self) -> StalenessStats {
        self.stats.lock().clone()
    }

    pub fn enable_log(&self) {
        *self.log.lock() = Some(Vec::new());
    }

    pub fn take_log(&self) -> Vec<ClockEvent> {
        self.log.lock().as_mut().map(std::mem::take).unwrap_or_default()
    }
}
