//! Choosing the adjacent frames that supply parallax for a keyframe.

use std::fmt;
use std::str::FromStr;

use crate::geometry::relative_angle_translation;
use crate::rasterio::Trajectory;
use crate::{Error, Result};

/// Slack on the motion thresholds so that a motion of exactly `t_min`
/// accumulated in floating point still counts.
pub const THRESHOLD_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectionMode {
    /// Every `fixed_step`-th frame around the keyframe.
    #[default]
    Fixed,
    /// Frames that moved enough since the last accepted frame.
    Adaptive,
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "adaptive" => Ok(Self::Adaptive),
            _ => Err(Error::Config(format!("unknown selection mode {s:?}"))),
        }
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed",
            Self::Adaptive => "adaptive",
        })
    }
}

/// Reference pose for the adaptive motion test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Anchor {
    /// The previously accepted frame on the same side.
    #[default]
    Previous,
    /// Always the keyframe.
    Keyframe,
}

impl FromStr for Anchor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "previous" => Ok(Self::Previous),
            "keyframe" => Ok(Self::Keyframe),
            _ => Err(Error::Config(format!("unknown anchor {s:?}"))),
        }
    }
}

impl fmt::Display for Anchor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Previous => "previous",
            Self::Keyframe => "keyframe",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionPolicy {
    pub mode: SelectionMode,
    /// Frames used in total, keyframe included.
    pub n_frames: usize,
    pub fixed_step: usize,
    /// Minimum rotation, radians.
    pub theta_min: f64,
    /// Minimum translation, meters.
    pub t_min: f64,
    pub anchor: Anchor,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self {
            mode: SelectionMode::Fixed,
            n_frames: 5,
            fixed_step: 5,
            theta_min: 0.05,
            t_min: 0.05,
            anchor: Anchor::Previous,
        }
    }
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::Config(format!("n_frames must be >= 2, got {}", self.n_frames)));
        }
        if self.fixed_step < 1 {
            return Err(Error::Config("fixed_step must be >= 1".into()));
        }
        if !(self.theta_min >= 0.0) || !(self.t_min >= 0.0) {
            return Err(Error::Config(format!(
                "motion thresholds must be >= 0 (theta_min={}, t_min={})",
                self.theta_min, self.t_min
            )));
        }
        Ok(())
    }

    /// Number of frames before the keyframe when `needed` are wanted. The
    /// extra frame of an odd count goes before the keyframe.
    fn split(needed: usize) -> usize {
        needed.div_ceil(2)
    }
}

/// Selected adjacent frames, ascending, keyframe excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub indices: Vec<usize>,
    /// Fewer than `n_frames - 1` frames could be found.
    pub shortfall: bool,
}

pub fn select_frames(traj: &Trajectory, keyframe: usize, policy: &SelectionPolicy) -> Result<Selection> {
    policy.validate()?;
    if keyframe >= traj.len() {
        return Err(Error::input(format!(
            "keyframe {keyframe} out of range for a {}-frame trajectory",
            traj.len()
        )));
    }
    let needed = policy.n_frames - 1;
    let mut indices = match policy.mode {
        SelectionMode::Fixed => fixed(traj.len(), keyframe, needed, policy.fixed_step),
        SelectionMode::Adaptive => adaptive(traj, keyframe, needed, policy),
    };
    indices.sort_unstable();
    Ok(Selection {
        shortfall: indices.len() < needed,
        indices,
    })
}

fn fixed(len: usize, keyframe: usize, needed: usize, step: usize) -> Vec<usize> {
    let before = SelectionPolicy::split(needed);
    let after = needed - before;
    let back = (1..=before).filter_map(|j| keyframe.checked_sub(j * step));
    let fwd = (1..=after)
        .map(|j| keyframe + j * step)
        .filter(|&i| i < len);
    back.chain(fwd).collect()
}

fn moved_enough(traj: &Trajectory, a: usize, b: usize, policy: &SelectionPolicy) -> bool {
    let (angle, dist) = relative_angle_translation(traj.pose(a), traj.pose(b));
    angle + THRESHOLD_SLACK >= policy.theta_min || dist + THRESHOLD_SLACK >= policy.t_min
}

/// Scans outward from the keyframe on each side, accepting frames that moved
/// enough since the side's anchor. Each side gets the same quota as the fixed
/// policy, so a side that runs out is not compensated by the other.
fn adaptive(traj: &Trajectory, keyframe: usize, needed: usize, policy: &SelectionPolicy) -> Vec<usize> {
    let before = SelectionPolicy::split(needed);
    let scan = |order: &mut dyn Iterator<Item = usize>, quota: usize| {
        let mut anchor = keyframe;
        let mut out = Vec::with_capacity(quota);
        for i in order {
            if out.len() == quota {
                break;
            }
            if moved_enough(traj, i, anchor, policy) {
                out.push(i);
                if policy.anchor == Anchor::Previous {
                    anchor = i;
                }
            }
        }
        out
    };
    let mut accepted = scan(&mut (0..keyframe).rev(), before);
    accepted.extend(scan(&mut (keyframe + 1..traj.len()), needed - before));
    accepted
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_trajectory, TrajectoryKind};
    use nalgebra::Vector3;

    fn constant_velocity(n: usize, v: f64) -> Trajectory {
        make_trajectory(
            &TrajectoryKind::ConstantVelocity {
                velocity: Vector3::new(v, 0.0, 0.0),
                angular_velocity: Vector3::zeros(),
            },
            n,
            1.0 / 30.0,
        )
        .unwrap()
    }

    fn adaptive_policy() -> SelectionPolicy {
        SelectionPolicy {
            mode: SelectionMode::Adaptive,
            ..SelectionPolicy::default()
        }
    }

    /// Independent reference: greedy chain per side, then interleave.
    fn reference_scan(traj: &Trajectory, key: usize, policy: &SelectionPolicy) -> Vec<usize> {
        let chain = |order: Vec<usize>| {
            let mut anchor = key;
            let mut out = Vec::new();
            for i in order {
                let (a, d) = relative_angle_translation(traj.pose(i), traj.pose(anchor));
                if a + THRESHOLD_SLACK >= policy.theta_min || d + THRESHOLD_SLACK >= policy.t_min {
                    out.push(i);
                    if policy.anchor == Anchor::Previous {
                        anchor = i;
                    }
                }
            }
            out
        };
        let before = chain((0..key).rev().collect());
        let after = chain((key + 1..traj.len()).collect());
        let needed = policy.n_frames - 1;
        let quota = needed.div_ceil(2);
        let mut out: Vec<usize> = before.into_iter().take(quota).collect();
        out.extend(after.into_iter().take(needed - quota));
        out.sort_unstable();
        out
    }

    #[test]
    fn stationary_sequence_selects_nothing() {
        let traj = constant_velocity(20, 0.0);
        let s = select_frames(&traj, 10, &adaptive_policy()).unwrap();
        assert!(s.indices.is_empty());
        assert!(s.shortfall);
    }

    #[test]
    fn fixed_interval_around_middle_frame() {
        let traj = constant_velocity(30, 0.01);
        let s = select_frames(&traj, 15, &SelectionPolicy::default()).unwrap();
        assert_eq!(s.indices, vec![5, 10, 20, 25]);
        assert!(!s.shortfall);
    }

    #[test]
    fn fixed_interval_truncates_at_bounds() {
        let traj = constant_velocity(30, 0.01);
        let s = select_frames(&traj, 3, &SelectionPolicy::default()).unwrap();
        assert_eq!(s.indices, vec![8, 13]);
        assert!(s.shortfall);
    }

    #[test]
    fn keyframe_out_of_range() {
        let traj = constant_velocity(5, 0.01);
        assert!(matches!(
            select_frames(&traj, 5, &SelectionPolicy::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn invalid_policy_is_a_config_error() {
        let traj = constant_velocity(5, 0.01);
        let p = SelectionPolicy {
            n_frames: 1,
            ..SelectionPolicy::default()
        };
        assert!(matches!(select_frames(&traj, 2, &p), Err(Error::Config(_))));
    }

    #[test]
    fn adaptive_reduces_to_fixed_on_constant_velocity() {
        for &(v, step) in &[(0.01, 5usize), (0.013, 3), (0.05, 1), (0.007, 7)] {
            let traj = constant_velocity(60, v);
            for n_frames in 2..=7 {
                let adaptive = SelectionPolicy {
                    mode: SelectionMode::Adaptive,
                    n_frames,
                    theta_min: 1.0,
                    t_min: v * step as f64,
                    ..SelectionPolicy::default()
                };
                let fixed = SelectionPolicy {
                    n_frames,
                    fixed_step: step,
                    ..SelectionPolicy::default()
                };
                assert_eq!(
                    select_frames(&traj, 30, &adaptive).unwrap(),
                    select_frames(&traj, 30, &fixed).unwrap(),
                    "v={v} step={step} n={n_frames}"
                );
            }
        }
    }

    #[test]
    fn adaptive_matches_reference_scan_on_stop_and_go() {
        for phase in 0..6 {
            let traj = make_trajectory(
                &TrajectoryKind::StopAndGo {
                    velocity: Vector3::new(0.02, 0.0, 0.0),
                    move_frames: 2,
                    dwell_frames: 4,
                    phase,
                },
                40,
                1.0 / 30.0,
            )
            .unwrap();
            for anchor in [Anchor::Previous, Anchor::Keyframe] {
                for key in [0, 7, 20, 39] {
                    let policy = SelectionPolicy {
                        anchor,
                        theta_min: 0.05,
                        t_min: 0.05,
                        ..adaptive_policy()
                    };
                    let got = select_frames(&traj, key, &policy).unwrap();
                    assert_eq!(got.indices, reference_scan(&traj, key, &policy));
                }
            }
        }
    }

    #[test]
    fn accepted_frames_clear_thresholds_pairwise() {
        let traj = make_trajectory(
            &TrajectoryKind::StopAndGo {
                velocity: Vector3::new(0.015, 0.005, 0.0),
                move_frames: 3,
                dwell_frames: 5,
                phase: 2,
            },
            80,
            1.0 / 30.0,
        )
        .unwrap();
        let policy = SelectionPolicy {
            n_frames: 7,
            ..adaptive_policy()
        };
        let key = 40;
        let s = select_frames(&traj, key, &policy).unwrap();
        assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
        let before: Vec<usize> = s.indices.iter().copied().filter(|&i| i < key).rev().collect();
        let after: Vec<usize> = s.indices.iter().copied().filter(|&i| i > key).collect();
        for side in [before, after] {
            let mut prev = key;
            for i in side {
                let (a, d) = relative_angle_translation(traj.pose(i), traj.pose(prev));
                assert!(a + THRESHOLD_SLACK >= policy.theta_min || d + THRESHOLD_SLACK >= policy.t_min);
                prev = i;
            }
        }
    }

    #[test]
    fn pure_rotation_triggers_acceptance() {
        let traj = make_trajectory(
            &TrajectoryKind::ConstantVelocity {
                velocity: Vector3::zeros(),
                angular_velocity: Vector3::new(0.0, 0.02, 0.0),
            },
            30,
            1.0 / 30.0,
        )
        .unwrap();
        let s = select_frames(&traj, 15, &adaptive_policy()).unwrap();
        assert_eq!(s.indices, vec![9, 12, 18, 21]);
    }

    #[test]
    fn adaptive_truncates_at_sequence_bounds_like_fixed() {
        let traj = constant_velocity(30, 0.05);
        let s = select_frames(&traj, 1, &adaptive_policy()).unwrap();
        assert_eq!(s.indices, vec![0, 2, 3]);
        assert!(s.shortfall);
        let fixed = SelectionPolicy {
            fixed_step: 1,
            ..SelectionPolicy::default()
        };
        assert_eq!(select_frames(&traj, 1, &fixed).unwrap(), s);
    }
}
