//! GPU power and energy accounting.
//!
//! Power is linear in utilization between the idle and full-load draw.
//! Utilization is piecewise constant between simulation events, so energy is
//! integrated exactly over the recorded steps.

use serde::{Deserialize, Serialize};

use crate::model::PowerSpec;
use crate::scalar::Scalar;

/// Watts drawn at utilization `busy` in [0, 1].
pub fn instantaneous_power<T: Scalar>(busy: T, spec: &PowerSpec<T>) -> T {
    assert!(
        busy >= T::zero() && busy <= T::one(),
        "utilization must be in [0, 1], got {busy}"
    );
    spec.p_idle + (spec.p_max - spec.p_idle) * busy
}

/// Piecewise-constant utilization over `[start, end]`.
///
/// Step `i` holds its value from its own time until the next step's time
/// (or `end` for the last one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusyTimeline<T: Scalar = f64> {
    pub start: T,
    pub end: T,
    pub steps: Vec<(T, T)>,
}

impl<T: Scalar> BusyTimeline<T> {
    pub fn new(start: T) -> Self {
        Self {
            start,
            end: start,
            steps: Vec::new(),
        }
    }

    /// Records that utilization becomes `busy` at time `t`.
    pub fn push(&mut self, t: T, busy: T) {
        debug_assert!(self.steps.last().is_none_or(|&(last, _)| t >= last));
        match self.steps.last_mut() {
            Some(last) if last.0 == t => last.1 = busy,
            Some(last) if last.1 == busy => {}
            _ => self.steps.push((t, busy)),
        }
        if t > self.end {
            self.end = t;
        }
    }

    pub fn close(&mut self, end: T) {
        self.end = end;
    }

    pub fn duration(&self) -> T {
        self.end - self.start
    }

    /// Iterates `(busy, seconds)` pieces.
    pub fn pieces(&self) -> impl Iterator<Item = (T, T)> + '_ {
        self.steps.iter().enumerate().map(move |(i, &(t, busy))| {
            let until = self.steps.get(i + 1).map_or(self.end, |s| s.0);
            (busy, until - t)
        })
    }

    /// Time-averaged utilization.
    pub fn mean(&self) -> T {
        let d = self.duration();
        if d > T::zero() {
            self.pieces().fold(T::zero(), |acc, (b, dt)| acc + b * dt) / d
        } else {
            self.steps.first().map_or(T::zero(), |s| s.1)
        }
    }

    /// Splits the window at `t`, duplicating the active step.
    pub fn split_at(&self, t: T) -> (Self, Self) {
        assert!(t >= self.start && t <= self.end);
        let mut left = Self::new(self.start);
        let mut right = Self::new(t);
        for &(ts, b) in &self.steps {
            if ts < t {
                left.steps.push((ts, b));
            } else {
                right.steps.push((ts, b));
            }
        }
        if right.steps.first().is_none_or(|s| s.0 > t) {
            if let Some(&(_, b)) = left.steps.last() {
                right.steps.insert(0, (t, b));
            }
        }
        left.end = t;
        right.end = self.end;
        (left, right)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerReport<T: Scalar = f64> {
    pub avg_power: T,
    pub peak_power: T,
    pub energy: T,
    pub energy_per_frame: T,
    pub perf_per_watt: T,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PowerError {
    #[error("utilization timeline is empty")]
    EmptyTimeline,
}

/// Energy in joules over the timeline.
pub fn energy<T: Scalar>(timeline: &BusyTimeline<T>, spec: &PowerSpec<T>) -> T {
    timeline
        .pieces()
        .fold(T::zero(), |acc, (b, dt)| acc + instantaneous_power(b, spec) * dt)
}

/// Integrates power over the measured window for a run at `fps` frames/s.
///
/// With no frames, `perf_per_watt` is 0 and `energy_per_frame` infinite.
pub fn power_report<T: Scalar>(
    timeline: &BusyTimeline<T>,
    fps: T,
    spec: &PowerSpec<T>,
) -> Result<PowerReport<T>, PowerError> {
    if timeline.steps.is_empty() {
        return Err(PowerError::EmptyTimeline);
    }
    let e = energy(timeline, spec);
    let duration = timeline.duration();
    let peak = timeline
        .pieces()
        .map(|(b, _)| instantaneous_power(b, spec))
        .fold(T::neg_infinity(), T::max);
    let avg = if duration > T::zero() {
        // Clamp away rounding so the envelope invariant holds exactly.
        (e / duration).max(spec.p_idle).min(spec.p_max)
    } else {
        instantaneous_power(timeline.steps[0].1, spec)
    };
    let frames = fps * duration;
    Ok(PowerReport {
        avg_power: avg,
        peak_power: peak,
        energy: e,
        energy_per_frame: if frames > T::zero() {
            e / frames
        } else {
            T::infinity()
        },
        perf_per_watt: if avg > T::zero() { fps / avg } else { T::zero() },
    })
}
