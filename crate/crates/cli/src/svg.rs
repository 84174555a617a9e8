//! Hand-written SVG plots: the arena with the executed path, and stacked
//! signal strips over time.

use std::fmt::Write as _;

use gsmppi::scenarios::{ObstacleSpec, WallSpec};
use gsmppi::TrajectoryLog;

const LEVEL_SET_POINTS: usize = 128;
const SIZE: f64 = 640.0;

/// Points `q` with `|| diag(a) (q - center) ||_p = c`.
pub fn level_set(a: [f64; 2], center: [f64; 2], c: f64, p: f64) -> Vec<[f64; 2]> {
    (0..LEVEL_SET_POINTS)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / LEVEL_SET_POINTS as f64;
            let e = 2.0 / p;
            let dx = c * t.cos().signum() * t.cos().abs().powf(e);
            let dy = c * t.sin().signum() * t.sin().abs().powf(e);
            [center[0] + dx / a[0], center[1] + dy / a[1]]
        })
        .collect()
}

struct Frame {
    lo: [f64; 2],
    scale: f64,
}

impl Frame {
    fn px(&self, q: [f64; 2]) -> (f64, f64) {
        (
            (q[0] - self.lo[0]) * self.scale,
            SIZE - (q[1] - self.lo[1]) * self.scale,
        )
    }
}

fn points(frame: &Frame, pts: impl IntoIterator<Item = [f64; 2]>) -> String {
    let mut s = String::new();
    for q in pts {
        let (x, y) = frame.px(q);
        write!(s, "{x:.2},{y:.2} ").unwrap();
    }
    s.pop();
    s
}

pub fn arena(
    obstacles: &[ObstacleSpec],
    wall: &WallSpec,
    log: &TrajectoryLog,
    goal: [f64; 2],
    hash: &str,
    seed: u64,
) -> String {
    let half = [wall.c / wall.ax, wall.c / wall.ay];
    let span = 2.1 * half[0].max(half[1]);
    let frame = Frame {
        lo: [-span / 2.0, -span / 2.0],
        scale: SIZE / span,
    };

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )
    .unwrap();
    writeln!(out, "<!-- config_hash={hash} seed={seed} -->").unwrap();
    writeln!(
        out,
        r##"<rect width="100%" height="100%" fill="#ffffff"/>"##
    )
    .unwrap();
    writeln!(
        out,
        r##"<polygon points="{}" fill="none" stroke="#333333" stroke-width="2"/>"##,
        points(
            &frame,
            level_set([wall.ax, wall.ay], [0.0, 0.0], wall.c, wall.p)
        )
    )
    .unwrap();
    for o in obstacles {
        writeln!(
            out,
            r##"<polygon points="{}" fill="#c0c0c0" stroke="#555555" stroke-width="1"/>"##,
            points(&frame, level_set([o.ax, o.ay], [o.bx, o.by], o.c, o.p))
        )
        .unwrap();
    }

    let path = log
        .steps
        .iter()
        .map(|s| [s.x[0], s.x[1]])
        .chain(std::iter::once([log.final_state[0], log.final_state[1]]));
    writeln!(
        out,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        points(&frame, path)
    )
    .unwrap();

    let mark = |out: &mut String, q: [f64; 2], color: &str| {
        let (x, y) = frame.px(q);
        writeln!(
            out,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="5" fill="{color}"/>"#
        )
        .unwrap();
    };
    if let Some(first) = log.steps.first() {
        mark(&mut out, [first.x[0], first.x[1]], "#2ca02c");
    }
    mark(&mut out, goal, "#d62728");
    out.push_str("</svg>\n");
    out
}

const STRIP_W: f64 = 800.0;
const STRIP_H: f64 = 90.0;
const MARGIN: f64 = 70.0;

pub fn signals(log: &TrajectoryLog, hash: &str, seed: u64) -> String {
    type Getter = fn(&gsmppi::closed_loop::StepRecord) -> f64;
    let strips: [(&str, Getter); 9] = [
        ("h", |s| s.h),
        ("min b", |s| s.min_cascade),
        ("min h_j", |s| s.min_constraint),
        ("nu", |s| s.x[2]),
        ("theta", |s| s.x[3]),
        ("v1", |s| s.v[0]),
        ("v2", |s| s.v[1]),
        ("u1", |s| s.u[0]),
        ("u2", |s| s.u[1]),
    ];
    let height = strips.len() as f64 * (STRIP_H + 20.0) + 20.0;
    let t_end = log.final_time.max(1e-9);

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{height}" viewBox="0 0 {w} {height}">"#,
        w = STRIP_W + MARGIN + 10.0
    )
    .unwrap();
    writeln!(out, "<!-- config_hash={hash} seed={seed} -->").unwrap();
    writeln!(
        out,
        r##"<rect width="100%" height="100%" fill="#ffffff"/>"##
    )
    .unwrap();

    for (i, (label, get)) in strips.iter().enumerate() {
        let top = 20.0 + i as f64 * (STRIP_H + 20.0);
        let values: Vec<f64> = log.steps.iter().map(get).collect();
        let (mut lo, mut hi) = values
            .iter()
            .fold((0.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi - lo < 1e-12 {
            lo -= 1.0;
            hi += 1.0;
        }
        let y = |v: f64| top + STRIP_H - (v - lo) / (hi - lo) * STRIP_H;
        writeln!(
            out,
            r##"<rect x="{MARGIN}" y="{top}" width="{STRIP_W}" height="{STRIP_H}" fill="none" stroke="#999999"/>"##
        )
        .unwrap();
        writeln!(
            out,
            r##"<line x1="{MARGIN}" y1="{z:.2}" x2="{x2}" y2="{z:.2}" stroke="#bbbbbb" stroke-dasharray="4 3"/>"##,
            z = y(0.0),
            x2 = MARGIN + STRIP_W
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="4" y="{:.1}" font-size="12" font-family="sans-serif">{label}</text>"#,
            top + STRIP_H / 2.0
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="4" y="{:.1}" font-size="9" font-family="sans-serif">[{lo:.3}, {hi:.3}]</text>"#,
            top + STRIP_H / 2.0 + 14.0
        )
        .unwrap();
        let mut pts = String::new();
        for (s, v) in log.steps.iter().zip(&values) {
            write!(pts, "{:.2},{:.2} ", MARGIN + s.t / t_end * STRIP_W, y(*v)).unwrap();
        }
        writeln!(
            out,
            r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1.2"/>"##,
            pts.trim_end()
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}
