//! Deterministic SVG rendering of a scene with optional predictions:
//! observed tracks, ground-truth future in green, predicted modes in red,
//! labeled predecessors highlighted.

use crate::mdn::LaplaceMixture;
use crate::scene::Scene;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 720.0;
const MARGIN: f64 = 40.0;

struct Frame {
    min: [f64; 2],
    scale: f64,
}

impl Frame {
    fn fit(points: &[[f64; 2]]) -> Frame {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for c in 0..2 {
                min[c] = min[c].min(p[c]);
                max[c] = max[c].max(p[c]);
            }
        }
        if !min[0].is_finite() {
            min = [0.0, 0.0];
            max = [1.0, 1.0];
        }
        let span = (max[0] - min[0]).max(max[1] - min[1]).max(1e-6);
        let scale = (WIDTH - 2.0 * MARGIN) / span;
        Frame { min, scale }
    }

    fn to_svg(&self, p: [f64; 2]) -> (f64, f64) {
        (
            MARGIN + (p[0] - self.min[0]) * self.scale,
            HEIGHT - MARGIN - (p[1] - self.min[1]) * self.scale,
        )
    }
}

fn polyline(frame: &Frame, points: &[[f64; 2]], style: &str) -> String {
    if points.len() < 2 {
        if let Some(&p) = points.first() {
            let (x, y) = frame.to_svg(p);
            return format!("<circle cx=\"{x:.3}\" cy=\"{y:.3}\" r=\"2.5\" {style}/>\n");
        }
        return String::new();
    }
    let coords: Vec<String> = points
        .iter()
        .map(|p| {
            let (x, y) = frame.to_svg(*p);
            format!("{x:.3},{y:.3}")
        })
        .collect();
    format!(
        "<polyline points=\"{}\" fill=\"none\" {style}/>\n",
        coords.join(" ")
    )
}

/// Present-contiguous segments of one agent's positions over a step range.
fn segments(scene: &Scene, agent: usize, from: usize, to: usize) -> Vec<Vec<[f64; 2]>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    for t in from..to {
        if scene.presence[agent][t] {
            current.push(scene.positions[agent][t]);
        } else if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Renders the scene as a standalone SVG document. Byte-identical output for
/// identical inputs.
pub fn plot_scene(
    scene: &Scene,
    mixture: Option<&LaplaceMixture>,
    labels: Option<&[Option<usize>]>,
) -> String {
    let mut all_points: Vec<[f64; 2]> = Vec::new();
    for a in 0..scene.n_agents() {
        for t in 0..scene.total_steps() {
            if scene.presence[a][t] {
                all_points.push(scene.positions[a][t]);
            }
        }
    }
    if let Some(mix) = mixture {
        for mode in &mix.mu {
            all_points.extend(mode.iter().copied());
        }
    }
    let frame = Frame::fit(&all_points);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    let labeled: std::collections::BTreeSet<usize> = labels
        .map(|l| l.iter().flatten().copied().collect())
        .unwrap_or_default();

    // Neighbor observed tracks (labeled predecessors in orange).
    for a in 0..scene.n_agents() {
        if a == scene.target_index {
            continue;
        }
        let style = if labeled.contains(&a) {
            "stroke=\"#ff7f0e\" stroke-width=\"2.2\""
        } else {
            "stroke=\"#999999\" stroke-width=\"1.4\""
        };
        for seg in segments(scene, a, 0, scene.t_h) {
            svg.push_str(&polyline(&frame, &seg, style));
        }
        if let Some(t) = scene.last_observed_step(a) {
            let (x, y) = frame.to_svg(scene.positions[a][t]);
            let fill = if labeled.contains(&a) { "#ff7f0e" } else { "#999999" };
            svg.push_str(&format!(
                "<circle cx=\"{x:.3}\" cy=\"{y:.3}\" r=\"3.5\" fill=\"{fill}\"/>\n"
            ));
        }
    }

    // Target observed track.
    for seg in segments(scene, scene.target_index, 0, scene.t_h) {
        svg.push_str(&polyline(
            &frame,
            &seg,
            "stroke=\"#1f77b4\" stroke-width=\"2.6\"",
        ));
    }

    // Predicted modes in red.
    if let Some(mix) = mixture {
        let anchor = scene.positions[scene.target_index][scene.t_h - 1];
        for mode in &mix.mu {
            let mut pts = vec![anchor];
            pts.extend(mode.iter().copied());
            svg.push_str(&polyline(
                &frame,
                &pts,
                "stroke=\"#d62728\" stroke-width=\"1.3\" stroke-opacity=\"0.55\"",
            ));
        }
    }

    // Ground-truth future in green, drawn over the modes.
    {
        let mut pts = vec![scene.positions[scene.target_index][scene.t_h - 1]];
        pts.extend(
            segments(scene, scene.target_index, scene.t_h, scene.total_steps())
                .into_iter()
                .flatten(),
        );
        svg.push_str(&polyline(
            &frame,
            &pts,
            "stroke=\"#2ca02c\" stroke-width=\"2.6\"",
        ));
    }

    svg.push_str("</svg>\n");
    svg
}
