//! Synthetic multi-agent scenes with a planted leader/follower structure.
//!
//! Each scene contains a target agent that retraces a leader's path with a
//! fixed step delay, plus unrelated distractor agents kept clear of the
//! leader path. Branch scenes plant two leaders that diverge at a junction,
//! only one of which the target follows. The planted per-step ground truth
//! makes tracing accuracy measurable without real data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::Result;
use crate::scene::{build_scene, AgentTrack, Scene};

/// Shape of the leader path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathFamily {
    Straight,
    Arc,
    SCurve,
    Branch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_distractors: usize,
    /// Steps the target lags the leader along the shared path. Must be >= 1.
    pub follow_delay: usize,
    /// Std-dev of Gaussian noise added to the target's positions, meters.
    pub noise_sigma: f64,
    pub path_family: PathFamily,
    pub seed: u64,
    pub t_h: usize,
    pub t_f: usize,
    pub dt: f64,
    /// Minimum clearance between distractor paths and the leader path.
    pub exclusion_radius: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_distractors: 3,
            follow_delay: 6,
            noise_sigma: 0.0,
            path_family: PathFamily::Straight,
            seed: 0,
            t_h: 8,
            t_f: 12,
            dt: 0.4,
            exclusion_radius: 15.0,
        }
    }
}

/// A generated scene plus the planted predecessor per future step.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub scene: Scene,
    /// Agent index (into the scene) of the planted predecessor, per future step.
    pub true_predecessor: Vec<Option<usize>>,
}

/// Sidecar record pairing a scene id with its planted labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: u64,
    pub true_predecessor: Vec<Option<usize>>,
}

const TARGET_ID: i64 = 0;
const LEADER_A_ID: i64 = 1;
const LEADER_B_ID: i64 = 2;
const DISTRACTOR_BASE_ID: i64 = 10;
const SPEED_RANGE: std::ops::Range<f64> = 0.8..1.6;

fn headings(
    rng: &mut ChaCha8Rng,
    family: PathFamily,
    n_segments: usize,
) -> Vec<f64> {
    let theta0 = rng.gen_range(0.0..std::f64::consts::TAU);
    match family {
        PathFamily::Straight | PathFamily::Branch => vec![theta0; n_segments],
        PathFamily::Arc => {
            let mag = rng.gen_range(0.08..0.35);
            let kappa = if rng.gen_bool(0.5) { mag } else { -mag };
            (0..n_segments).map(|j| theta0 + kappa * j as f64).collect()
        }
        PathFamily::SCurve => {
            let mag = rng.gen_range(0.08..0.35);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let flip = rng.gen_range(n_segments / 3..(2 * n_segments) / 3 + 1);
            let mut theta = theta0;
            let mut out = Vec::with_capacity(n_segments);
            for j in 0..n_segments {
                out.push(theta);
                let k = if j < flip { sign * mag } else { -sign * mag };
                theta += k;
            }
            out
        }
    }
}

fn walk(start: [f64; 2], ds: f64, headings: &[f64]) -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(headings.len() + 1);
    pts.push(start);
    let mut p = start;
    for &theta in headings {
        p = [p[0] + ds * theta.cos(), p[1] + ds * theta.sin()];
        pts.push(p);
    }
    pts
}

fn min_dist_to(points: &[[f64; 2]], targets: &[[f64; 2]]) -> f64 {
    let mut best = f64::INFINITY;
    for p in points {
        for q in targets {
            let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            if d < best {
                best = d;
            }
        }
    }
    best
}

fn gen_distractors(
    rng: &mut ChaCha8Rng,
    params: &SynthParams,
    protected: &[[f64; 2]],
    total_steps: usize,
) -> Vec<AgentTrack> {
    let mut tracks = Vec::with_capacity(params.n_distractors);
    for d in 0..params.n_distractors {
        let mut chosen = None;
        for _ in 0..200 {
            let speed = rng.gen_range(SPEED_RANGE);
            let ds = speed * params.dt;
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let start = [rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0)];
            let pts = walk(start, ds, &vec![theta; total_steps - 1]);
            if min_dist_to(&pts, protected) >= params.exclusion_radius {
                chosen = Some(pts);
                break;
            }
        }
        let pts = chosen.unwrap_or_else(|| {
            // Guaranteed-clear fallback: march parallel to x far outside the
            // protected bounding box.
            let max_y = protected.iter().map(|p| p[1]).fold(f64::MIN, f64::max);
            let start = [0.0, max_y + 3.0 * params.exclusion_radius + d as f64 * 5.0];
            let ds = 1.2 * params.dt;
            walk(start, ds, &vec![0.0; total_steps - 1])
        });
        tracks.push(AgentTrack {
            id: DISTRACTOR_BASE_ID + d as i64,
            points: pts.into_iter().take(total_steps).enumerate().collect(),
        });
    }
    tracks
}

fn noisy(rng: &mut ChaCha8Rng, sigma: f64, p: [f64; 2]) -> [f64; 2] {
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("valid sigma");
        [p[0] + n.sample(rng), p[1] + n.sample(rng)]
    } else {
        p
    }
}

/// Generates a scene where the target retraces a single leader's path,
/// delayed by `follow_delay` steps. The leader is the planted predecessor at
/// every future step.
pub fn gen_follow_scene(params: &SynthParams) -> Result<SynthScene> {
    assert!(params.follow_delay >= 1, "follow_delay must be >= 1");
    assert!(params.noise_sigma >= 0.0, "noise_sigma must be >= 0");
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let total = params.t_h + params.t_f;
    let n_points = total + params.follow_delay;

    let speed = rng.gen_range(SPEED_RANGE);
    let ds = speed * params.dt;
    let start = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
    let hs = headings(&mut rng, params.path_family, n_points - 1);
    let path = walk(start, ds, &hs);

    let leader: Vec<(usize, [f64; 2])> = (0..total)
        .map(|k| (k, path[k + params.follow_delay]))
        .collect();
    let target: Vec<(usize, [f64; 2])> = (0..total)
        .map(|k| (k, noisy(&mut rng, params.noise_sigma, path[k])))
        .collect();

    let mut tracks = vec![
        AgentTrack { id: TARGET_ID, points: target },
        AgentTrack { id: LEADER_A_ID, points: leader },
    ];
    tracks.extend(gen_distractors(&mut rng, params, &path, total));

    let scene = build_scene(&tracks, TARGET_ID, params.t_h, params.t_f)?;
    let mut scene = scene;
    scene.dt = params.dt;
    let leader_idx = scene.agent_ids.iter().position(|&id| id == LEADER_A_ID).unwrap();
    Ok(SynthScene {
        scene,
        true_predecessor: vec![Some(leader_idx); params.t_f],
    })
}

/// Generates a scene with two leaders that share a straight approach and
/// diverge at a junction. The target follows one branch (chosen from the
/// seed), delayed by `follow_delay` steps. Before and at the junction both
/// traces are equidistant from the target, so the planted label there is the
/// lower agent index; past the junction it is the followed leader.
pub fn gen_branch_scene(params: &SynthParams) -> Result<SynthScene> {
    assert!(params.follow_delay >= 1, "follow_delay must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let total = params.t_h + params.t_f;
    let n_points = total + params.follow_delay;

    let speed = rng.gen_range(SPEED_RANGE);
    let ds = speed * params.dt;
    let start = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
    let theta0 = rng.gen_range(0.0..std::f64::consts::TAU);
    let phi = rng.gen_range(30f64.to_radians()..70f64.to_radians());

    // Junction in the target's future, and early enough that the leaders'
    // observed traces extend strictly past it.
    let j_lo = params.t_h;
    let j_hi = (params.t_h + params.t_f).saturating_sub(3).min(params.t_h - 2 + params.follow_delay).max(j_lo);
    let junction = rng.gen_range(j_lo..=j_hi);
    let follow_a = rng.gen_bool(0.5);

    let branch_headings = |branch_phi: f64| -> Vec<f64> {
        (0..n_points - 1)
            .map(|j| if j < junction { theta0 } else { theta0 + branch_phi })
            .collect()
    };
    let path_a = walk(start, ds, &branch_headings(phi));
    let path_b = walk(start, ds, &branch_headings(-phi));
    let followed = if follow_a { &path_a } else { &path_b };

    let leader_a: Vec<(usize, [f64; 2])> = (0..total)
        .map(|k| (k, path_a[k + params.follow_delay]))
        .collect();
    let leader_b: Vec<(usize, [f64; 2])> = (0..total)
        .map(|k| (k, path_b[k + params.follow_delay]))
        .collect();
    let target: Vec<(usize, [f64; 2])> = (0..total)
        .map(|k| (k, noisy(&mut rng, params.noise_sigma, followed[k])))
        .collect();

    let mut protected: Vec<[f64; 2]> = path_a.clone();
    protected.extend_from_slice(&path_b);

    let mut tracks = vec![
        AgentTrack { id: TARGET_ID, points: target },
        AgentTrack { id: LEADER_A_ID, points: leader_a },
        AgentTrack { id: LEADER_B_ID, points: leader_b },
    ];
    tracks.extend(gen_distractors(&mut rng, params, &protected, total));

    let mut scene = build_scene(&tracks, TARGET_ID, params.t_h, params.t_f)?;
    scene.dt = params.dt;
    let idx_a = scene.agent_ids.iter().position(|&id| id == LEADER_A_ID).unwrap();
    let idx_b = scene.agent_ids.iter().position(|&id| id == LEADER_B_ID).unwrap();
    let followed_idx = if follow_a { idx_a } else { idx_b };
    let tie_idx = idx_a.min(idx_b);

    let true_predecessor = (0..params.t_f)
        .map(|t| {
            let grid_step = params.t_h + t;
            if grid_step <= junction {
                Some(tie_idx)
            } else {
                Some(followed_idx)
            }
        })
        .collect();
    Ok(SynthScene { scene, true_predecessor })
}

/// Generates one scene of the given family.
pub fn gen_scene(params: &SynthParams) -> Result<SynthScene> {
    match params.path_family {
        PathFamily::Branch => gen_branch_scene(params),
        _ => gen_follow_scene(params),
    }
}

/// Generates `n` scenes, cycling through `families`, with per-scene seeds
/// drawn from a master stream so the whole dataset is a pure function of
/// `params.seed`.
pub fn gen_dataset(
    params: &SynthParams,
    n: usize,
    families: &[PathFamily],
) -> Result<Vec<SynthScene>> {
    assert!(!families.is_empty());
    let mut master = ChaCha8Rng::seed_from_u64(params.seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut p = *params;
        p.seed = master.gen();
        p.path_family = families[i % families.len()];
        let mut s = gen_scene(&p)?;
        s.scene.id = i as u64;
        out.push(s);
    }
    Ok(out)
}

pub fn scenes_of(dataset: &[SynthScene]) -> Vec<Scene> {
    dataset.iter().map(|s| s.scene.clone()).collect()
}

/// Writes the planted-label sidecar, one JSON record per line.
pub fn write_truth_sidecar<W: Write>(mut writer: W, dataset: &[SynthScene]) -> Result<()> {
    for s in dataset {
        let rec = TruthRecord {
            id: s.scene.id,
            true_predecessor: s.true_predecessor.clone(),
        };
        serde_json::to_writer(&mut writer, &rec)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_truth_sidecar_file<P: AsRef<Path>>(path: P, dataset: &[SynthScene]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_truth_sidecar(std::io::BufWriter::new(file), dataset)
}

pub fn read_truth_sidecar<R: Read>(reader: R) -> Result<Vec<TruthRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(reader).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn read_truth_sidecar_file<P: AsRef<Path>>(path: P) -> Result<Vec<TruthRecord>> {
    let file = std::fs::File::open(path)?;
    read_truth_sidecar(file)
}
