//! Static SVG figures: trajectory overlays and reward curves.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};
use crate::eval::TrajectoryRecord;
use crate::geometry::Vec2;
use crate::trainer::IterationMetrics;
use crate::world::OccupancyWorld;

/// Parses a JSON-lines file, reporting the first malformed line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "file contains no records".into(),
        });
    }
    Ok(out)
}

pub fn read_trajectories(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    read_jsonl(path)
}

pub fn read_metrics(path: &Path) -> Result<Vec<IterationMetrics>> {
    read_jsonl(path)
}

const PX_PER_M: f64 = 40.0;
const MARGIN: f64 = 20.0;

struct Frame {
    x0: f64,
    y0: f64,
    height: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        MARGIN + (v - self.x0) * PX_PER_M
    }

    // SVG y grows downward.
    fn y(&self, v: f64) -> f64 {
        MARGIN + (self.height - (v - self.y0)) * PX_PER_M
    }

    fn points(&self, pts: &[Vec2]) -> String {
        let mut s = String::new();
        for p in pts {
            let _ = write!(s, "{:.2},{:.2} ", self.x(p.x), self.y(p.y));
        }
        s.trim_end().to_string()
    }
}

/// World obstacles, the first record's reference path and every trajectory.
/// Successful trajectories are drawn in blue, failures in red.
pub fn trajectory_svg(world: Option<&OccupancyWorld>, records: &[TrajectoryRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::EmptyResults);
    }
    let (x0, y0, w, h) = match world {
        Some(w) => (0.0, 0.0, w.width(), w.height()),
        None => {
            let all = records.iter().flat_map(|r| r.trajectory.iter().chain(r.path.iter().flatten()));
            let (mut lo, mut hi) = (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
            for p in all.chain(records.iter().flat_map(|r| [&r.start, &r.goal])) {
                lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
                hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
            }
            (lo.x - 0.5, lo.y - 0.5, hi.x - lo.x + 1.0, hi.y - lo.y + 1.0)
        }
    };
    let f = Frame { x0, y0, height: h };
    let (wpx, hpx) = (w * PX_PER_M + 2.0 * MARGIN, h * PX_PER_M + 2.0 * MARGIN);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{wpx:.0}\" height=\"{hpx:.0}\" viewBox=\"0 0 {wpx:.0} {hpx:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    if let Some(world) = world {
        s.push_str("<g id=\"obstacles\" fill=\"#444\">\n");
        let (nx, ny) = world.grid_size();
        let r = world.resolution();
        let cells = world.cells();
        for j in 0..ny {
            let mut i = 0;
            while i < nx {
                if !cells[j * nx + i] {
                    i += 1;
                    continue;
                }
                let start = i;
                while i < nx && cells[j * nx + i] {
                    i += 1;
                }
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\"/>",
                    f.x(start as f64 * r),
                    f.y((j + 1) as f64 * r),
                    (i - start) as f64 * r * PX_PER_M,
                    r * PX_PER_M
                );
            }
        }
        s.push_str("</g>\n");
    }
    s.push_str("<g id=\"trajectories\" fill=\"none\" stroke-width=\"1.2\" stroke-opacity=\"0.6\">\n");
    for r in records {
        let color = if r.success { "#1f5fbf" } else { "#c0392b" };
        let _ = writeln!(s, "<polyline stroke=\"{color}\" points=\"{}\"/>", f.points(&r.trajectory));
    }
    s.push_str("</g>\n");
    if let Some(path) = &records[0].path {
        let _ = writeln!(
            s,
            "<polyline id=\"reference\" fill=\"none\" stroke=\"#27ae60\" stroke-width=\"2.5\" stroke-dasharray=\"6 4\" points=\"{}\"/>",
            f.points(path)
        );
    }
    let mut marked: Vec<Vec2> = Vec::new();
    for r in records {
        for (p, color) in [(r.start, "#000"), (r.goal, "#e67e22")] {
            if marked.iter().any(|m| m.distance(p) < 1e-9) {
                continue;
            }
            marked.push(p);
            let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\"/>", f.x(p.x), f.y(p.y));
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// One labeled series: one or more runs (seeds) of (iteration, value) points.
pub struct CurveSeries {
    pub label: String,
    pub runs: Vec<Vec<(f64, f64)>>,
}

const PALETTE: [&str; 6] = ["#1f5fbf", "#c0392b", "#27ae60", "#8e44ad", "#e67e22", "#16a085"];

/// Mean curve per series with a min–max band across runs.
pub fn curves_svg(series: &[CurveSeries], y_label: &str) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.runs.is_empty() || s.runs.iter().any(|r| r.is_empty())) {
        return Err(Error::EmptyResults);
    }
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 20.0, 40.0);
    let pts = series.iter().flat_map(|s| s.runs.iter().flatten());
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if xmax <= xmin {
        xmax = xmin + 1.0;
    }
    if ymax <= ymin {
        ymax = ymin + 1.0;
    }
    let px = |x: f64| left + (x - xmin) / (xmax - xmin) * (w - left - right);
    let py = |y: f64| top + (1.0 - (y - ymin) / (ymax - ymin)) * (h - top - bottom);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let _ = writeln!(
        s,
        "<g stroke=\"#000\"><line x1=\"{left}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\"/><line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{b}\"/></g>",
        b = h - bottom,
        r = w - right
    );
    let _ = writeln!(
        s,
        "<g font-size=\"11\" font-family=\"sans-serif\"><text x=\"{left}\" y=\"{:.0}\">{xmin}</text><text x=\"{:.0}\" y=\"{:.0}\" text-anchor=\"end\">{xmax}</text><text x=\"{:.0}\" y=\"{:.0}\" text-anchor=\"end\">{ymax:.3}</text><text x=\"{:.0}\" y=\"{:.0}\" text-anchor=\"end\">{ymin:.3}</text><text x=\"{:.0}\" y=\"{:.0}\" text-anchor=\"middle\">iteration</text><text x=\"12\" y=\"{:.0}\" transform=\"rotate(-90 12 {:.0})\" text-anchor=\"middle\">{y_label}</text></g>",
        h - bottom + 16.0,
        w - right,
        h - bottom + 16.0,
        left - 4.0,
        top + 10.0,
        left - 4.0,
        h - bottom,
        (left + w - right) / 2.0,
        h - 6.0,
        h / 2.0,
        h / 2.0
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        // Align runs by index; truncate to the shortest.
        let n = ser.runs.iter().map(Vec::len).min().unwrap_or(0);
        let mut mean = Vec::with_capacity(n);
        let mut lo = Vec::with_capacity(n);
        let mut hi = Vec::with_capacity(n);
        for i in 0..n {
            let x = ser.runs[0][i].0;
            let ys: Vec<f64> = ser.runs.iter().map(|r| r[i].1).collect();
            mean.push((x, ys.iter().sum::<f64>() / ys.len() as f64));
            lo.push((x, ys.iter().cloned().fold(f64::INFINITY, f64::min)));
            hi.push((x, ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max)));
        }
        let coords = |v: &[(f64, f64)]| {
            v.iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect::<Vec<_>>()
                .join(" ")
        };
        if ser.runs.len() > 1 {
            let mut band: Vec<(f64, f64)> = hi.clone();
            band.extend(lo.iter().rev());
            let _ = writeln!(s, "<polygon class=\"band\" fill=\"{color}\" fill-opacity=\"0.2\" stroke=\"none\" points=\"{}\"/>", coords(&band));
        }
        let _ = writeln!(
            s,
            "<polyline class=\"series\" data-label=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            escape(&ser.label),
            coords(&mean)
        );
        let ly = top + 16.0 * k as f64 + 8.0;
        let _ = writeln!(
            s,
            "<g font-size=\"11\" font-family=\"sans-serif\"><line x1=\"{:.0}\" y1=\"{ly:.0}\" x2=\"{:.0}\" y2=\"{ly:.0}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{:.0}\" y=\"{:.0}\">{}</text></g>",
            w - right + 10.0,
            w - right + 30.0,
            w - right + 34.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Scenario;

    fn record(k: usize) -> TrajectoryRecord {
        TrajectoryRecord {
            terrain: 0,
            episode: k,
            world_seed: 1,
            scenario: Scenario::Optimal,
            success: k % 2 == 0,
            start: Vec2::new(1.0, 1.0),
            goal: Vec2::new(5.0, 5.0),
            path: Some(vec![Vec2::new(1.0, 1.0), Vec2::new(5.0, 5.0)]),
            trajectory: vec![Vec2::new(1.0, 1.0), Vec2::new(2.0, 1.5 + 0.01 * k as f64), Vec2::new(5.0, 5.0)],
        }
    }

    #[test]
    fn one_polyline_per_trajectory_plus_reference() {
        let recs: Vec<_> = (0..100).map(record).collect();
        let svg = trajectory_svg(None, &recs).unwrap();
        assert_eq!(svg.matches("<polyline stroke=").count(), 100);
        assert_eq!(svg.matches("id=\"reference\"").count(), 1);
    }

    #[test]
    fn curves_have_one_series_per_label() {
        let s = vec![
            CurveSeries {
                label: "a".into(),
                runs: vec![vec![(1.0, 0.1), (2.0, 0.2)], vec![(1.0, 0.3), (2.0, 0.1)]],
            },
            CurveSeries {
                label: "b".into(),
                runs: vec![vec![(1.0, 0.0), (2.0, 0.5)]],
            },
        ];
        let svg = curves_svg(&s, "reward").unwrap();
        assert_eq!(svg.matches("class=\"series\"").count(), 2);
        assert_eq!(svg.matches("class=\"band\"").count(), 1);
    }

    #[test]
    fn empty_and_malformed_inputs_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(read_trajectories(&p).is_err());
        std::fs::write(&p, format!("{}\nnot json\n", serde_json::to_string(&record(0)).unwrap())).unwrap();
        match read_trajectories(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {:?}", other.map(|v| v.len())),
        }
    }
}
