//! Core scene representation: agents on a shared discrete time grid with
//! presence masks, an observation/future split, and coordinate normalization.
//!
//! All agents in a [`Scene`] share the same grid of `t_h + t_f` steps. The
//! first `t_h` steps are observed, the remaining `t_f` steps are the future
//! horizon. The target agent (the one whose future is predicted) must be
//! present at every step; neighbors may be partially present, with the mask
//! authoritative and a padding value of `0.0` at absent slots.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Padding written into position slots where an agent is absent.
pub const PADDING: [f64; 2] = [0.0, 0.0];

/// Number of per-step input features: position (x, y) plus displacement (dx, dy).
pub const INPUT_FEATURES: usize = 4;

/// A multi-agent trajectory scene on a shared time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Stable identifier, used for canonical ordering.
    pub id: u64,
    /// Agent identifiers, sorted ascending.
    pub agent_ids: Vec<i64>,
    /// Per-agent positions over `t_h + t_f` steps, in meters.
    pub positions: Vec<Vec<[f64; 2]>>,
    /// Per-agent presence mask per step.
    pub presence: Vec<Vec<bool>>,
    /// Index (into `agent_ids`) of the target agent.
    pub target_index: usize,
    /// Observed step count.
    pub t_h: usize,
    /// Future step count.
    pub t_f: usize,
    /// Step duration in seconds.
    pub dt: f64,
}

/// One agent's raw input to [`build_scene`]: positions indexed by grid step.
#[derive(Debug, Clone)]
pub struct AgentTrack {
    pub id: i64,
    /// (step, position) samples; steps outside `0..t_h + t_f` are ignored.
    pub points: Vec<(usize, [f64; 2])>,
}

impl Scene {
    pub fn total_steps(&self) -> usize {
        self.t_h + self.t_f
    }

    pub fn n_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn obs(&self) -> ObservationWindow<'_> {
        ObservationWindow { scene: self }
    }

    pub fn future(&self) -> FutureWindow<'_> {
        FutureWindow { scene: self }
    }

    pub fn is_present(&self, agent: usize, step: usize) -> bool {
        self.presence[agent][step]
    }

    /// Position of an agent at a grid step, or `None` when absent.
    pub fn pos(&self, agent: usize, step: usize) -> Option<[f64; 2]> {
        if self.presence[agent][step] {
            Some(self.positions[agent][step])
        } else {
            None
        }
    }

    /// Number of observed steps at which an agent is present.
    pub fn observed_steps(&self, agent: usize) -> usize {
        self.presence[agent][..self.t_h].iter().filter(|p| **p).count()
    }

    /// Last observed step at which an agent is present.
    pub fn last_observed_step(&self, agent: usize) -> Option<usize> {
        (0..self.t_h).rev().find(|&t| self.presence[agent][t])
    }

    /// Checks all structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.t_h == 0 || self.t_f == 0 {
            return Err(Error::EmptyGrid);
        }
        let n = self.agent_ids.len();
        let steps = self.total_steps();
        if self.positions.len() != n || self.presence.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "scene {} has {} ids but {} position tracks and {} masks",
                self.id,
                n,
                self.positions.len(),
                self.presence.len()
            )));
        }
        for a in 0..n {
            if self.positions[a].len() != steps || self.presence[a].len() != steps {
                return Err(Error::ShapeMismatch(format!(
                    "agent {} does not cover the {}-step grid",
                    self.agent_ids[a], steps
                )));
            }
        }
        if self.target_index >= n {
            return Err(Error::MissingTarget);
        }
        if !self.presence[self.target_index].iter().all(|p| *p) {
            return Err(Error::MissingTarget);
        }
        if self.agent_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("agent ids must be unique and sorted".into()));
        }
        Ok(())
    }

    /// Translates every present position by `v`. Padding slots are untouched.
    pub fn shift(&self, v: [f64; 2]) -> Scene {
        let mut out = self.clone();
        for a in 0..out.n_agents() {
            for t in 0..out.total_steps() {
                if out.presence[a][t] {
                    out.positions[a][t][0] += v[0];
                    out.positions[a][t][1] += v[1];
                }
            }
        }
        out
    }
}

/// View over the first `t_h` grid steps.
#[derive(Debug, Clone, Copy)]
pub struct ObservationWindow<'a> {
    scene: &'a Scene,
}

impl<'a> ObservationWindow<'a> {
    pub fn len(&self) -> usize {
        self.scene.t_h
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn present(&self, agent: usize, k: usize) -> bool {
        debug_assert!(k < self.len());
        self.scene.presence[agent][k]
    }

    pub fn pos(&self, agent: usize, k: usize) -> Option<[f64; 2]> {
        self.scene.pos(agent, k)
    }
}

/// View over the last `t_f` grid steps.
#[derive(Debug, Clone, Copy)]
pub struct FutureWindow<'a> {
    scene: &'a Scene,
}

impl<'a> FutureWindow<'a> {
    pub fn len(&self) -> usize {
        self.scene.t_f
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn present(&self, agent: usize, k: usize) -> bool {
        debug_assert!(k < self.len());
        self.scene.presence[agent][self.scene.t_h + k]
    }

    pub fn pos(&self, agent: usize, k: usize) -> Option<[f64; 2]> {
        debug_assert!(k < self.len());
        self.scene.pos(agent, self.scene.t_h + k)
    }

    /// Target agent positions over the future horizon. The target is present
    /// everywhere, so this is total.
    pub fn target_positions(&self) -> Vec<[f64; 2]> {
        let s = self.scene;
        (0..s.t_f)
            .map(|k| s.positions[s.target_index][s.t_h + k])
            .collect()
    }
}

/// Offset recorded by [`normalize`], sufficient to invert it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    /// World position subtracted from every coordinate.
    pub offset: [f64; 2],
}

/// Assembles a [`Scene`] from per-agent step-indexed tracks.
///
/// The target track must cover every step of the grid. Neighbor tracks are
/// clipped to the grid and padded with zeros where absent. Agents are stored
/// sorted by id so tie-breaking by index is deterministic.
pub fn build_scene(tracks: &[AgentTrack], target: i64, t_h: usize, t_f: usize) -> Result<Scene> {
    if t_h == 0 || t_f == 0 {
        return Err(Error::EmptyGrid);
    }
    let steps = t_h + t_f;
    let mut sorted: Vec<&AgentTrack> = tracks.iter().collect();
    sorted.sort_by_key(|t| t.id);
    sorted.dedup_by_key(|t| t.id);

    let mut agent_ids = Vec::with_capacity(sorted.len());
    let mut positions = Vec::with_capacity(sorted.len());
    let mut presence = Vec::with_capacity(sorted.len());
    let mut target_index = None;
    for track in &sorted {
        let mut pos = vec![PADDING; steps];
        let mut mask = vec![false; steps];
        for &(step, p) in &track.points {
            if step < steps {
                pos[step] = p;
                mask[step] = true;
            }
        }
        if track.id == target {
            if !mask.iter().all(|m| *m) {
                return Err(Error::MissingTarget);
            }
            target_index = Some(agent_ids.len());
        }
        agent_ids.push(track.id);
        positions.push(pos);
        presence.push(mask);
    }
    let target_index = target_index.ok_or(Error::MissingTarget)?;
    let scene = Scene {
        id: 0,
        agent_ids,
        positions,
        presence,
        target_index,
        t_h,
        t_f,
        dt: 1.0,
    };
    scene.validate()?;
    Ok(scene)
}

/// Translates the scene so the target's position at the last observed step is
/// the origin. Returns the translated scene and the record needed to invert.
pub fn normalize(scene: &Scene) -> (Scene, NormalizationRecord) {
    let anchor = scene.positions[scene.target_index][scene.t_h - 1];
    let normalized = scene.shift([-anchor[0], -anchor[1]]);
    (normalized, NormalizationRecord { offset: anchor })
}

/// Inverts [`normalize`].
pub fn denormalize(scene: &Scene, record: &NormalizationRecord) -> Scene {
    scene.shift(record.offset)
}

/// Per-agent observed input features: `[x, y, dx, dy]` per step, with the
/// displacement taken from the previous present step and zero at an agent's
/// first present step. Absent steps are zero rows; padding values are never
/// read, so the features are invariant to whatever is stored there.
pub fn obs_features(scene: &Scene) -> Vec<Array2<f64>> {
    let n = scene.n_agents();
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let mut feat = Array2::zeros((scene.t_h, INPUT_FEATURES));
        for t in 0..scene.t_h {
            if !scene.presence[a][t] {
                continue;
            }
            let p = scene.positions[a][t];
            feat[[t, 0]] = p[0];
            feat[[t, 1]] = p[1];
            if t > 0 && scene.presence[a][t - 1] {
                let q = scene.positions[a][t - 1];
                feat[[t, 2]] = p[0] - q[0];
                feat[[t, 3]] = p[1] - q[1];
            }
        }
        out.push(feat);
    }
    out
}

/// Presence of each agent per observed step as a 0/1 matrix (agents x t_h).
pub fn obs_presence_matrix(scene: &Scene) -> Array2<f64> {
    let n = scene.n_agents();
    let mut m = Array2::zeros((n, scene.t_h));
    for a in 0..n {
        for t in 0..scene.t_h {
            if scene.presence[a][t] {
                m[[a, t]] = 1.0;
            }
        }
    }
    m
}
