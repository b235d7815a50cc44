//! Trajectory file ingestion: whitespace-separated `frame agent x y` records,
//! down-sampling, sliding-window scene extraction, leave-one-out partitioning,
//! and the canonical line-oriented scene archive (one JSON record per line).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::{build_scene, AgentTrack, Scene};

/// One parsed trajectory record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawTrack {
    pub frame: i64,
    pub agent: i64,
    pub x: f64,
    pub y: f64,
}

/// Windowing configuration. Step counts are derived from rate and horizon
/// seconds and must come out integral.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetConfig {
    pub rate_hz: f64,
    pub obs_seconds: f64,
    pub pred_seconds: f64,
    /// Window start stride, in steps.
    pub window_stride: usize,
}

impl DatasetConfig {
    /// 2.5 Hz, 3.2 s observed, 4.8 s predicted: 8 + 12 steps.
    pub fn eth_ucy() -> Self {
        DatasetConfig {
            rate_hz: 2.5,
            obs_seconds: 3.2,
            pred_seconds: 4.8,
            window_stride: 1,
        }
    }

    /// 2 Hz, 2 s observed, 6 s predicted: 4 + 12 steps.
    pub fn nuscenes_like() -> Self {
        DatasetConfig {
            rate_hz: 2.0,
            obs_seconds: 2.0,
            pred_seconds: 6.0,
            window_stride: 1,
        }
    }

    fn steps(&self, seconds: f64, what: &str) -> Result<usize> {
        let raw = self.rate_hz * seconds;
        let rounded = raw.round();
        if (raw - rounded).abs() > 1e-9 || rounded < 1.0 {
            return Err(Error::Config(format!(
                "{what} horizon of {seconds} s at {} Hz is not a positive whole number of steps",
                self.rate_hz
            )));
        }
        Ok(rounded as usize)
    }

    pub fn t_h(&self) -> Result<usize> {
        self.steps(self.obs_seconds, "observation")
    }

    pub fn t_f(&self) -> Result<usize> {
        self.steps(self.pred_seconds, "prediction")
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        if self.rate_hz <= 0.0 {
            return Err(Error::Config("rate_hz must be positive".into()));
        }
        if self.window_stride == 0 {
            return Err(Error::Config("window_stride must be at least 1".into()));
        }
        self.t_h()?;
        self.t_f()?;
        Ok(())
    }
}

/// Parses whitespace-separated `frame agent x y` lines from a reader.
/// Records come back sorted by (agent, frame).
pub fn parse_tsv<R: Read>(reader: R) -> Result<Vec<RawTrack>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 columns, found {}", cols.len()),
            });
        }
        let frame = parse_integral(cols[0]).ok_or_else(|| Error::Parse {
            line: lineno,
            msg: format!("invalid frame `{}`", cols[0]),
        })?;
        let agent = parse_integral(cols[1]).ok_or_else(|| Error::Parse {
            line: lineno,
            msg: format!("invalid agent id `{}`", cols[1]),
        })?;
        let x: f64 = cols[2]
            .parse()
            .map_err(|_| Error::NonNumericCoordinate { line: lineno })?;
        let y: f64 = cols[3]
            .parse()
            .map_err(|_| Error::NonNumericCoordinate { line: lineno })?;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::NonNumericCoordinate { line: lineno });
        }
        out.push(RawTrack { frame, agent, x, y });
    }
    out.sort_by_key(|r| (r.agent, r.frame));
    for w in out.windows(2) {
        if w[0].agent == w[1].agent && w[0].frame == w[1].frame {
            // Line numbers are lost after sorting; report the colliding key.
            return Err(Error::DuplicateRecord { line: 0 });
        }
    }
    Ok(out)
}

// ETH/UCY files store frames/ids as floats like "840.0".
fn parse_integral(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    let f: f64 = s.parse().ok()?;
    if f.is_finite() && f.fract() == 0.0 {
        Some(f as i64)
    } else {
        None
    }
}

/// Loads a trajectory file from disk. See [`parse_tsv`].
pub fn load_tsv<P: AsRef<Path>>(path: P) -> Result<Vec<RawTrack>> {
    let file = std::fs::File::open(path)?;
    parse_tsv(file)
}

/// Smallest positive frame delta across the file, used as the base grid step.
pub fn base_frame_step(tracks: &[RawTrack]) -> i64 {
    let mut frames: Vec<i64> = tracks.iter().map(|t| t.frame).collect();
    frames.sort_unstable();
    frames.dedup();
    frames
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|d| *d > 0)
        .min()
        .unwrap_or(1)
}

/// Keeps every `keep_every`-th frame of the base grid: frames where
/// `frame % (keep_every * base_step) == 0`. `keep_every = 1` is the identity.
pub fn downsample(tracks: &[RawTrack], keep_every: usize) -> Vec<RawTrack> {
    assert!(keep_every >= 1, "keep_every must be at least 1");
    if keep_every == 1 {
        return tracks.to_vec();
    }
    let step = base_frame_step(tracks) * keep_every as i64;
    tracks
        .iter()
        .filter(|t| t.frame % step == 0)
        .copied()
        .collect()
}

/// Cuts sliding windows into scenes: one scene per (agent, window start)
/// where that agent covers all `t_h + t_f` steps. The covering agent becomes
/// the target; every co-occurring agent becomes a neighbor. Output order is
/// canonical: by target agent id, then window start frame.
pub fn sliding_windows(tracks: &[RawTrack], config: &DatasetConfig) -> Result<Vec<Scene>> {
    config.validate()?;
    let t_h = config.t_h()?;
    let t_f = config.t_f()?;
    let total = t_h + t_f;
    if tracks.is_empty() {
        return Ok(Vec::new());
    }
    let step = base_frame_step(tracks);

    let mut by_agent: BTreeMap<i64, Vec<(i64, [f64; 2])>> = BTreeMap::new();
    for t in tracks {
        by_agent.entry(t.agent).or_default().push((t.frame, [t.x, t.y]));
    }
    for pts in by_agent.values_mut() {
        pts.sort_by_key(|(f, _)| *f);
    }

    let mut scenes = Vec::new();
    for (&target_id, pts) in &by_agent {
        // Contiguous runs on the regular grid.
        let mut run_start = 0;
        let mut runs = Vec::new();
        for i in 1..=pts.len() {
            if i == pts.len() || pts[i].0 - pts[i - 1].0 != step {
                if i - run_start >= total {
                    runs.push((run_start, i));
                }
                run_start = i;
            }
        }
        for (lo, hi) in runs {
            let mut offset = 0;
            while lo + offset + total <= hi {
                let start_frame = pts[lo + offset].0;
                let scene = cut_window(&by_agent, target_id, start_frame, step, t_h, t_f)?;
                let mut scene = scene;
                scene.dt = config.dt();
                scenes.push(scene);
                offset += config.window_stride;
            }
        }
    }
    for (i, s) in scenes.iter_mut().enumerate() {
        s.id = i as u64;
    }
    Ok(scenes)
}

fn cut_window(
    by_agent: &BTreeMap<i64, Vec<(i64, [f64; 2])>>,
    target: i64,
    start_frame: i64,
    step: i64,
    t_h: usize,
    t_f: usize,
) -> Result<Scene> {
    let total = (t_h + t_f) as i64;
    let mut agent_tracks = Vec::new();
    for (&id, pts) in by_agent {
        let mut points = Vec::new();
        for &(frame, pos) in pts {
            let rel = frame - start_frame;
            if rel >= 0 && rel < total * step && rel % step == 0 {
                points.push(((rel / step) as usize, pos));
            }
        }
        if !points.is_empty() {
            agent_tracks.push(AgentTrack { id, points });
        }
    }
    build_scene(&agent_tracks, target, t_h, t_f)
}

/// Leave-one-out split over named scene groups. Scenes from `held_out` form
/// the test set; all other groups form the training set. Ids are re-assigned
/// sequentially per set, in group-name order.
pub fn leave_one_out_split(
    subsets: &BTreeMap<String, Vec<Scene>>,
    held_out: &str,
) -> Result<(Vec<Scene>, Vec<Scene>)> {
    if !subsets.contains_key(held_out) {
        return Err(Error::UnknownSubset(held_out.to_string()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (name, scenes) in subsets {
        let dst = if name == held_out { &mut test } else { &mut train };
        dst.extend(scenes.iter().cloned());
    }
    for (i, s) in train.iter_mut().enumerate() {
        s.id = i as u64;
    }
    for (i, s) in test.iter_mut().enumerate() {
        s.id = i as u64;
    }
    Ok((train, test))
}

/// Writes scenes as one JSON record per line.
pub fn write_archive<W: Write>(mut writer: W, scenes: &[Scene]) -> Result<()> {
    for scene in scenes {
        serde_json::to_writer(&mut writer, scene)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_archive_file<P: AsRef<Path>>(path: P, scenes: &[Scene]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_archive(std::io::BufWriter::new(file), scenes)
}

/// Reads a scene archive written by [`write_archive`].
pub fn read_archive<R: Read>(reader: R) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for line in BufReader::new(reader).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line)?;
        scene.validate()?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn read_archive_file<P: AsRef<Path>>(path: P) -> Result<Vec<Scene>> {
    let file = std::fs::File::open(path)?;
    read_archive(file)
}
