//! Parameter-free motion-discontinuity monitor over tracked joints.
//!
//! Keeps a ring buffer of recent joint snapshots. The near distance is the
//! mean displacement of the current frame against the last N snapshots; the
//! far distance is the same against lags N+1..N+M. The reset decision
//! compares recent displacement against the far window's baseline motion:
//! when the current frame has moved far from its recent history while that
//! history itself was quiet, the stream has a discontinuity and the
//! detector's external hidden state should be zeroed.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Which joints the analyzer watches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackedJoints {
    All,
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerConfig {
    /// Near window N (frames), lags 1..N.
    pub near_window: usize,
    /// Far window M (frames), lags N+1..N+M.
    pub far_window: usize,
    /// Sensitivity threshold on the near/far ratio.
    pub alpha: f64,
    /// Motion floor: suppresses resets when nearly motionless and floors the
    /// ratio denominator, in normalized joint-distance units.
    pub motion_floor: f64,
    pub tracked_joints: TrackedJoints,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        AnalyzerConfig {
            near_window: 3,
            far_window: 9,
            alpha: 2.0,
            motion_floor: 1e-3,
            tracked_joints: TrackedJoints::All,
        }
    }
}

impl AnalyzerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.near_window == 0 || self.far_window == 0 {
            return Err(Error::Config("analyzer windows must be ≥ 1".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config("analyzer alpha must be positive".into()));
        }
        if self.motion_floor < 0.0 {
            return Err(Error::Config("motion floor must be nonnegative".into()));
        }
        if let TrackedJoints::Indices(idx) = &self.tracked_joints {
            if idx.is_empty() {
                return Err(Error::Config("tracked joint list is empty".into()));
            }
        }
        Ok(())
    }

    fn capacity(&self) -> usize {
        self.near_window + self.far_window
    }
}

/// Ring buffer of tracked-joint snapshots, newest at the back.
///
/// The buffer holds history only: callers check [`AnalyzerState::should_reset`]
/// against the incoming frame first, then push it.
#[derive(Debug, Clone)]
pub struct AnalyzerState {
    buffer: VecDeque<Vec<f64>>,
    capacity: usize,
    snapshot_len: Option<usize>,
}

/// Extract the tracked-joint coordinates from a flat frame of joints×3 reals.
fn extract(joints: &[f64], tracked: &TrackedJoints) -> Result<Vec<f64>> {
    if joints.len() % 3 != 0 {
        return Err(Error::Shape {
            context: "analyzer frame (joints × 3)",
            expected: (joints.len() / 3 + 1) * 3,
            got: joints.len(),
        });
    }
    match tracked {
        TrackedJoints::All => Ok(joints.to_vec()),
        TrackedJoints::Indices(idx) => {
            let num_joints = joints.len() / 3;
            let mut out = Vec::with_capacity(idx.len() * 3);
            for &j in idx {
                if j >= num_joints {
                    return Err(Error::Shape {
                        context: "tracked joint index",
                        expected: num_joints,
                        got: j,
                    });
                }
                out.extend_from_slice(&joints[j * 3..j * 3 + 3]);
            }
            Ok(out)
        }
    }
}

/// Mean per-joint Euclidean distance between two snapshots.
fn snapshot_distance(a: &[f64], b: &[f64]) -> f64 {
    let joints = a.len() / 3;
    let mut sum = 0.0;
    for j in 0..joints {
        let dx = a[j * 3] - b[j * 3];
        let dy = a[j * 3 + 1] - b[j * 3 + 1];
        let dz = a[j * 3 + 2] - b[j * 3 + 2];
        sum += (dx * dx + dy * dy + dz * dz).sqrt();
    }
    sum / joints as f64
}

impl AnalyzerState {
    pub fn new(config: &AnalyzerConfig) -> Self {
        AnalyzerState {
            buffer: VecDeque::with_capacity(config.capacity()),
            capacity: config.capacity(),
            snapshot_len: None,
        }
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Snapshot `lag` frames ago (lag 1 = most recent push).
    pub fn snapshot_at_lag(&self, lag: usize) -> Option<&Vec<f64>> {
        if lag == 0 || lag > self.buffer.len() {
            return None;
        }
        self.buffer.get(self.buffer.len() - lag)
    }

    /// Append the current frame, evicting the oldest snapshot when full.
    pub fn push_frame(&mut self, joints: &[f64], config: &AnalyzerConfig) -> Result<()> {
        let snap = extract(joints, &config.tracked_joints)?;
        if let Some(expected) = self.snapshot_len {
            if snap.len() != expected {
                return Err(Error::Shape {
                    context: "analyzer snapshot layout",
                    expected,
                    got: snap.len(),
                });
            }
        } else {
            self.snapshot_len = Some(snap.len());
        }
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(snap);
        Ok(())
    }

    fn mean_distance_over_lags(
        &self,
        current: &[f64],
        config: &AnalyzerConfig,
        lag_from: usize,
        lag_to: usize,
    ) -> Result<Option<f64>> {
        if self.buffer.len() < lag_to {
            return Ok(None); // warm-up, caller skips gating
        }
        let cur = extract(current, &config.tracked_joints)?;
        if let Some(expected) = self.snapshot_len {
            if cur.len() != expected {
                return Err(Error::Shape {
                    context: "analyzer snapshot layout",
                    expected,
                    got: cur.len(),
                });
            }
        }
        Ok(Some(self.mean_distance_to_reference(&cur, lag_from, lag_to)))
    }

    /// Mean distance from `reference` to the snapshots at the given lag range.
    /// Assumes the buffer holds at least `lag_to` frames.
    fn mean_distance_to_reference(&self, reference: &[f64], lag_from: usize, lag_to: usize) -> f64 {
        let mut sum = 0.0;
        for lag in lag_from..=lag_to {
            sum += snapshot_distance(reference, self.snapshot_at_lag(lag).unwrap());
        }
        sum / (lag_to - lag_from + 1) as f64
    }

    /// Mean distance from the current joints to the last N snapshots.
    /// `None` while the buffer is still warming up.
    pub fn near_mean_distance(
        &self,
        current: &[f64],
        config: &AnalyzerConfig,
    ) -> Result<Option<f64>> {
        self.mean_distance_over_lags(current, config, 1, config.near_window)
    }

    /// Mean distance to snapshots at lags N+1..N+M.
    pub fn far_mean_distance(
        &self,
        current: &[f64],
        config: &AnalyzerConfig,
    ) -> Result<Option<f64>> {
        self.mean_distance_over_lags(
            current,
            config,
            config.near_window + 1,
            config.near_window + config.far_window,
        )
    }

    /// Whether the incoming frame constitutes a motion discontinuity.
    ///
    /// False during warm-up. Read-only: does not push the frame.
    ///
    /// The numerator is the near mean distance. The denominator measures the
    /// far window's own motion: distances are taken from the snapshot at lag
    /// N (the frame just before the near window) rather than from the
    /// current frame, so a sudden jump out of a quiet pose yields a near-zero
    /// denominator and fires, while any sustained motion keeps the ratio at
    /// roughly (N+1)/(M+1) and stays silent. With a current-frame reference
    /// the ratio could never exceed 1 on an onset.
    pub fn should_reset(&self, current: &[f64], config: &AnalyzerConfig) -> Result<bool> {
        let (n, m) = (config.near_window, config.far_window);
        if self.buffer.len() < n + m {
            return Ok(false);
        }
        let near = match self.near_mean_distance(current, config)? {
            Some(d) => d,
            None => return Ok(false),
        };
        if near <= config.motion_floor {
            return Ok(false);
        }
        let reference = self.snapshot_at_lag(n).unwrap().clone();
        let far_baseline = self.mean_distance_to_reference(&reference, n + 1, n + m);
        Ok(near / far_baseline.max(config.motion_floor) > config.alpha)
    }
}
