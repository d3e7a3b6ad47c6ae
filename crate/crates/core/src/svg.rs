//! Deterministic hand-written SVG plots, one titled `<g>` per series.

use std::fmt::Write as _;

use crate::data::Task;
use crate::diagnose::{ExtrapolationReport, PolarProjection, Verdict};
use crate::interpret::{ImportanceTable, ParallelTable, ProfileSegment};
use crate::unwrapper::GridEnumeration;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 600.0;

const LEFT: f64 = 70.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Fill color for the series of rank `rank`.
pub fn color(rank: usize) -> String {
    if rank < PALETTE.len() {
        return PALETTE[rank].to_string();
    }
    let hue = ((rank as f64 * 0.618_033_988_749_895) % 1.0) * 360.0;
    let (r, g, b) = hsl(hue, 0.55, 0.5 + 0.15 * ((rank / 7) % 2) as f64);
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn hsl(h: f64, s: f64, l: f64) -> (u8, u8, u8) {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    let q = |v: f64| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    (q(r), q(g), q(b))
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn f(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e4).contains(&a) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        if s == "-0.000" {
            "0.000".into()
        } else {
            s
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Scale {
    lo: f64,
    hi: f64,
    p0: f64,
    p1: f64,
}

impl Scale {
    fn new(lo: f64, hi: f64, p0: f64, p1: f64) -> Self {
        let (lo, hi) = padded(lo, hi);
        Self { lo, hi, p0, p1 }
    }

    fn map(&self, v: f64) -> f64 {
        self.p0 + (v - self.lo) / (self.hi - self.lo) * (self.p1 - self.p0)
    }

    fn ticks(&self, n: usize) -> Vec<f64> {
        (0..=n).map(|k| self.lo + (self.hi - self.lo) * k as f64 / n as f64).collect()
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo <= f64::EPSILON * lo.abs().max(hi.abs()).max(1.0) {
        let d = lo.abs().max(1.0) * 0.5;
        return (lo - d, hi + d);
    }
    let d = (hi - lo) * 0.05;
    (lo - d, hi + d)
}

struct Doc {
    out: String,
}

impl Doc {
    fn new(title: &str) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
            w = WIDTH,
            h = HEIGHT
        );
        let _ = writeln!(out, "<title>{}</title>", esc(title));
        let _ = writeln!(out, r##"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>"##);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="28" text-anchor="middle" font-size="16">{}</text>"#,
            f(WIDTH / 2.0),
            esc(title)
        );
        Self { out }
    }

    fn open(&mut self, title: &str) {
        let _ = writeln!(self.out, "<g><title>{}</title>", esc(title));
    }

    fn close(&mut self) {
        self.out.push_str("</g>\n");
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
        let _ = writeln!(
            self.out,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{stroke}" stroke-width="{}"/>"#,
            f(x1),
            f(y1),
            f(x2),
            f(y2),
            f(width)
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.out,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{fill}"/>"#,
            f(x),
            f(y),
            f(w.max(0.0)),
            f(h.max(0.0))
        );
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str, opacity: f64) {
        let _ = writeln!(
            self.out,
            r#"<circle cx="{}" cy="{}" r="{}" fill="{fill}" fill-opacity="{}"/>"#,
            f(x),
            f(y),
            f(r),
            f(opacity)
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64, opacity: f64) {
        let p: Vec<String> = pts.iter().map(|&(x, y)| format!("{},{}", f(x), f(y))).collect();
        let _ = writeln!(
            self.out,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{}" stroke-opacity="{}"/>"#,
            p.join(" "),
            f(width),
            f(opacity)
        );
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.out,
            r#"<text x="{}" y="{}" text-anchor="{anchor}">{}</text>"#,
            f(x),
            f(y),
            esc(s)
        );
    }

    fn rotated_text(&mut self, x: f64, y: f64, s: &str) {
        let _ = writeln!(
            self.out,
            r#"<text x="{x}" y="{y}" text-anchor="middle" transform="rotate(-90 {x} {y})">{}</text>"#,
            esc(s),
            x = f(x),
            y = f(y)
        );
    }

    fn axes(&mut self, xs: &Scale, ys: &Scale, xlabel: &str, ylabel: &str) {
        self.open("axes");
        let (x0, x1) = (xs.p0, xs.p1);
        let (y0, y1) = (ys.p0, ys.p1);
        self.line(x0, y0, x1, y0, "#000000", 1.0);
        self.line(x0, y0, x0, y1, "#000000", 1.0);
        for t in xs.ticks(5) {
            let px = xs.map(t);
            self.line(px, y0, px, y0 + 5.0, "#000000", 1.0);
            self.text(px, y0 + 18.0, "middle", &label(t));
        }
        for t in ys.ticks(5) {
            let py = ys.map(t);
            self.line(x0 - 5.0, py, x0, py, "#000000", 1.0);
            self.text(x0 - 8.0, py + 4.0, "end", &label(t));
        }
        self.text((x0 + x1) / 2.0, y0 + 40.0, "middle", xlabel);
        self.rotated_text(16.0, (y0 + y1) / 2.0, ylabel);
        self.close();
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
}

/// Centered marginal lines per region with each region's density strip below.
pub fn profile_svg(segments: &[ProfileSegment], feature_name: &str) -> String {
    let mut doc = Doc::new(&format!("Local profile of {feature_name}"));
    let (xlo, xhi) = min_max(segments.iter().flat_map(|s| [s.x_min, s.x_max]));
    let (ylo, yhi) = min_max(segments.iter().flat_map(|s| [s.value(s.x_min), s.value(s.x_max)]));
    let strip_top = HEIGHT - BOTTOM - 90.0;
    let xs = Scale::new(xlo, xhi, LEFT, WIDTH - RIGHT);
    let ys = Scale::new(ylo, yhi, strip_top - 20.0, TOP);
    doc.axes(&xs, &ys, feature_name, "centered contribution");
    let band = if segments.is_empty() { 0.0 } else { 80.0 / segments.len() as f64 };
    for (rank, s) in segments.iter().enumerate() {
        let c = color(rank);
        doc.open(&format!("region {} (n={}, slope={})", s.region, s.count, label(s.slope)));
        doc.polyline(
            &[
                (xs.map(s.x_min), ys.map(s.value(s.x_min))),
                (xs.map(s.x_max), ys.map(s.value(s.x_max))),
            ],
            &c,
            2.0,
            1.0,
        );
        let base = strip_top + band * (rank + 1) as f64;
        let pts: Vec<(f64, f64)> = s
            .density_grid()
            .iter()
            .zip(&s.density)
            .map(|(&x, &d)| (xs.map(x), base - 0.9 * band * d))
            .collect();
        doc.polyline(&pts, &c, 1.0, 0.8);
        doc.close();
    }
    doc.finish()
}

/// Horizontal bars, intercept first, then features by decreasing importance.
pub fn importance_svg(table: &ImportanceTable) -> String {
    let mut doc = Doc::new("Joint importance");
    let mut bars = vec![("intercept".to_string(), table.ji_intercept)];
    bars.extend(table.order.iter().map(|&j| (table.feature_names[j].clone(), table.ji_features[j])));
    let hi = bars.iter().map(|b| b.1).fold(0.0, f64::max);
    let left = 160.0;
    let xs = Scale {
        lo: 0.0,
        hi: if hi > 0.0 { hi } else { 1.0 },
        p0: left,
        p1: WIDTH - RIGHT,
    };
    let step = (HEIGHT - TOP - BOTTOM) / bars.len() as f64;
    doc.open("axes");
    doc.line(left, TOP, left, HEIGHT - BOTTOM, "#000000", 1.0);
    doc.line(left, HEIGHT - BOTTOM, WIDTH - RIGHT, HEIGHT - BOTTOM, "#000000", 1.0);
    for t in xs.ticks(5) {
        doc.text(xs.map(t), HEIGHT - BOTTOM + 18.0, "middle", &label(t));
    }
    doc.text((left + WIDTH - RIGHT) / 2.0, HEIGHT - BOTTOM + 40.0, "middle", "joint importance");
    doc.close();
    for (rank, (name, v)) in bars.iter().enumerate() {
        let y = TOP + step * rank as f64;
        doc.open(&format!("{name}: {}", label(*v)));
        doc.rect(left, y + 0.15 * step, xs.map(*v) - left, 0.7 * step, &color(rank));
        doc.text(left - 8.0, y + 0.5 * step + 4.0, "end", name);
        doc.close();
    }
    doc.finish()
}

/// One polyline per region across per-axis min-max scales; stroke width
/// grows with the region's instance count.
pub fn parallel_svg(table: &ParallelTable) -> String {
    let mut doc = Doc::new("Local linear coefficients");
    let m = table.axes.len();
    let ranges: Vec<(f64, f64)> = (0..m)
        .map(|a| {
            let (lo, hi) = min_max(table.rows.iter().map(|r| r.values[a]));
            padded(lo, hi)
        })
        .collect();
    let px = |a: usize| {
        if m <= 1 {
            WIDTH / 2.0
        } else {
            LEFT + (WIDTH - LEFT - RIGHT) * a as f64 / (m - 1) as f64
        }
    };
    doc.open("axes");
    for (a, name) in table.axes.iter().enumerate() {
        doc.line(px(a), TOP, px(a), HEIGHT - BOTTOM, "#000000", 1.0);
        doc.text(px(a), HEIGHT - BOTTOM + 20.0, "middle", name);
        doc.text(px(a), TOP - 6.0, "middle", &label(ranges[a].1));
        doc.text(px(a), HEIGHT - BOTTOM + 36.0, "middle", &label(ranges[a].0));
    }
    doc.close();
    let max_count = table.rows.iter().map(|r| r.count).max().unwrap_or(1).max(1);
    for (rank, r) in table.rows.iter().enumerate() {
        let pts: Vec<(f64, f64)> = r
            .values
            .iter()
            .enumerate()
            .map(|(a, &v)| {
                let s = Scale {
                    lo: ranges[a].0,
                    hi: ranges[a].1,
                    p0: HEIGHT - BOTTOM,
                    p1: TOP,
                };
                (px(a), s.map(v))
            })
            .collect();
        doc.open(&format!("region {} (n={})", r.region, r.count));
        doc.polyline(&pts, &color(rank), 0.5 + 3.5 * r.count as f64 / max_count as f64, 0.7);
        doc.close();
    }
    doc.finish()
}

/// Regions at their projected angle and radius; single-class or
/// single-instance regions in grey.
pub fn polar_svg(proj: &PolarProjection) -> String {
    let title = if proj.sqrt_radius {
        "Polar projection (sqrt radius)"
    } else {
        "Polar projection"
    };
    let mut doc = Doc::new(title);
    let (cx, cy, rad) = (WIDTH / 2.0, (HEIGHT + TOP) / 2.0, (HEIGHT - TOP - 40.0) / 2.0);
    let rmax = proj.points.iter().map(|p| p.radius).fold(0.0, f64::max);
    let rmax = if rmax > 0.0 { rmax } else { 1.0 };
    doc.open("axes");
    for k in 1..=4 {
        let r = rad * k as f64 / 4.0;
        let _ = writeln!(
            doc.out,
            r##"<circle cx="{}" cy="{}" r="{}" fill="none" stroke="#cccccc"/>"##,
            f(cx),
            f(cy),
            f(r)
        );
        doc.text(cx + r + 2.0, cy - 2.0, "start", &label(rmax * k as f64 / 4.0));
    }
    doc.line(cx - rad, cy, cx + rad, cy, "#cccccc", 1.0);
    doc.line(cx, cy - rad, cx, cy + rad, "#cccccc", 1.0);
    if proj.degenerate {
        doc.text(cx, HEIGHT - 12.0, "middle", "no spread to project; all angles 0");
    }
    doc.close();
    let max_count = proj.points.iter().map(|p| p.count).max().unwrap_or(1).max(1) as f64;
    for (rank, p) in proj.points.iter().enumerate() {
        let r = rad * p.radius / rmax;
        let (x, y) = (cx + r * p.angle.cos(), cy - r * p.angle.sin());
        let fill = if p.single_flag { "#999999".to_string() } else { color(rank) };
        let title = format!(
            "region {} (n={}, angle={}, radius={}{})",
            p.region,
            p.count,
            label(p.angle),
            label(p.radius),
            if p.single_flag { ", single" } else { "" }
        );
        doc.open(&title);
        doc.circle(x, y, 2.0 + 8.0 * (p.count as f64 / max_count).sqrt(), &fill, 0.7);
        doc.close();
    }
    doc.finish()
}

/// Paired local and global performance bars per region with the threshold.
pub fn extrapolation_svg(report: &ExtrapolationReport) -> String {
    let metric = match report.task {
        Task::Classification => "AUC",
        Task::Regression => "MSE",
    };
    let mut doc = Doc::new(&format!("Local vs global {metric}"));
    let threshold = match report.task {
        Task::Classification => Some(report.thresholds.auc),
        Task::Regression => report.network_perf.map(|p| p * report.thresholds.mse_factor),
    };
    let (_, hi) = min_max(
        report
            .rows
            .iter()
            .flat_map(|r| [r.local_perf, r.global_perf])
            .flatten()
            .chain(threshold),
    );
    let hi = if report.task == Task::Classification {
        1.0
    } else if hi.is_finite() && hi > 0.0 {
        hi * 1.05
    } else {
        1.0
    };
    let n = report.rows.len().max(1);
    let xs = Scale {
        lo: 0.0,
        hi: n as f64,
        p0: LEFT,
        p1: WIDTH - RIGHT,
    };
    let ys = Scale {
        lo: 0.0,
        hi,
        p0: HEIGHT - BOTTOM,
        p1: TOP,
    };
    doc.axes(&xs, &ys, "region rank", metric);
    if let Some(t) = threshold {
        doc.open(&format!("threshold {}", label(t)));
        doc.line(LEFT, ys.map(t), WIDTH - RIGHT, ys.map(t), "#d62728", 1.0);
        doc.close();
    }
    let step = (WIDTH - LEFT - RIGHT) / n as f64;
    for (rank, r) in report.rows.iter().enumerate() {
        let x = LEFT + step * rank as f64;
        doc.open(&format!(
            "region {} (n={}, local={}, global={}, {})",
            r.region,
            r.count,
            r.local_perf.map_or("NA".into(), label),
            r.global_perf.map_or("NA".into(), label),
            r.verdict.as_str()
        ));
        let fill_global = match r.verdict {
            Verdict::Poor => "#d62728",
            Verdict::Good => "#2ca02c",
            Verdict::Extraordinary => "#9467bd",
            Verdict::Undefined => "#999999",
        };
        if let Some(v) = r.local_perf {
            let y = ys.map(v.min(hi));
            doc.rect(x + 0.1 * step, y, 0.4 * step, HEIGHT - BOTTOM - y, "#1f77b4");
        }
        if let Some(v) = r.global_perf {
            let y = ys.map(v.min(hi));
            doc.rect(x + 0.5 * step, y, 0.4 * step, HEIGHT - BOTTOM - y, fill_global);
        }
        doc.close();
    }
    doc.finish()
}

/// Largest square side used to draw a grid enumeration.
pub const MAP_PIXELS: usize = 250;

/// Regions of a 2-D input grid, ranked by area, with a legend listing every
/// distinct pattern.
pub fn regionmap_svg(grid: &GridEnumeration, names: [&str; 2]) -> String {
    let mut doc = Doc::new("Activation regions");
    let areas = grid.areas();
    let mut ranked: Vec<usize> = (0..grid.patterns.len()).collect();
    ranked.sort_by(|&a, &b| areas[b].cmp(&areas[a]).then(a.cmp(&b)));
    let mut rank_of = vec![0; ranked.len()];
    for (r, &id) in ranked.iter().enumerate() {
        rank_of[id] = r;
    }
    let side = HEIGHT - TOP - BOTTOM;
    let xs = Scale {
        lo: grid.bounds[0].0,
        hi: grid.bounds[0].1,
        p0: LEFT,
        p1: LEFT + side,
    };
    let ys = Scale {
        lo: grid.bounds[1].0,
        hi: grid.bounds[1].1,
        p0: TOP + side,
        p1: TOP,
    };
    let res = grid.resolution;
    let d = res.min(MAP_PIXELS);
    let px = side / d as f64;
    let sample = |k: usize| {
        if d == 1 {
            0
        } else {
            (k * (res - 1) + (d - 1) / 2) / (d - 1)
        }
    };
    let mut runs: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); ranked.len()];
    for r in 0..d {
        let row = sample(r);
        let mut c = 0;
        while c < d {
            let id = grid.cells[row * res + sample(c)] as usize;
            let start = c;
            while c < d && grid.cells[row * res + sample(c)] as usize == id {
                c += 1;
            }
            runs[id].push((r, start, c - start));
        }
    }
    doc.axes(&xs, &ys, names[0], names[1]);
    let legend_x = LEFT + side + 30.0;
    let step = (side / ranked.len() as f64).min(20.0);
    for (rank, &id) in ranked.iter().enumerate() {
        let c = color(rank_of[id]);
        doc.open(&format!("region {rank}: {} (area {})", grid.patterns[id], areas[id]));
        for &(r, c0, len) in &runs[id] {
            doc.rect(LEFT + c0 as f64 * px, TOP + side - (r + 1) as f64 * px, len as f64 * px, px, &c);
        }
        let y = TOP + step * rank as f64;
        doc.rect(legend_x, y, step * 0.8, step * 0.8, &c);
        doc.text(legend_x + step, y + step * 0.7, "start", &format!("region {rank}"));
        doc.close();
    }
    doc.finish()
}
