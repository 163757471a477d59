//! Static SVG figures: per-profile prediction intervals, study intervals beside
//! the target interval, and coverage boxplots.
//!
//! Output is plain markup with a fixed view box, coordinates printed to two
//! decimals and elements emitted in a fixed order, so identical inputs give
//! identical bytes. Each figure records the digest of the run that produced it.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::bart::interpolated_quantile;
use crate::io::PredictionRow;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Linear map from data values to the vertical pixel axis.
struct YScale {
    lo: f64,
    hi: f64,
}

impl YScale {
    fn covering(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (-1.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        Self { lo: lo - pad, hi: hi + pad }
    }

    fn px(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (v - self.lo) / (self.hi - self.lo) * (HEIGHT - 2.0 * MARGIN)
    }
}

struct Svg {
    out: String,
}

impl Svg {
    fn new(title: &str, digest: &str) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" width=\"{WIDTH}\" height=\"{HEIGHT}\">"
        );
        let _ = writeln!(out, "<metadata>run-digest: {}</metadata>", escape(digest));
        let _ = writeln!(out, "<title>{}</title>", escape(title));
        let _ = writeln!(out, "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
        Self { out }
    }

    fn line(&mut self, class: &str, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
        let _ = writeln!(
            self.out,
            "<line class=\"{class}\" x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" stroke=\"{stroke}\" stroke-width=\"{width}\"/>"
        );
    }

    fn dot(&mut self, class: &str, x: f64, y: f64, fill: &str) {
        let _ = writeln!(
            self.out,
            "<circle class=\"{class}\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2\" fill=\"{fill}\"/>"
        );
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.out,
            "<text x=\"{x:.2}\" y=\"{y:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"{anchor}\">{}</text>",
            escape(s)
        );
    }

    fn y_axis(&mut self, scale: &YScale, label: &str) {
        self.line("axis", MARGIN, MARGIN, MARGIN, HEIGHT - MARGIN, "black", 1.0);
        for i in 0..=4 {
            let v = scale.lo + (scale.hi - scale.lo) * f64::from(i) / 4.0;
            let y = scale.px(v);
            self.line("tick", MARGIN - 4.0, y, MARGIN, y, "black", 1.0);
            self.text(MARGIN - 6.0, y + 4.0, "end", &format!("{v:.2}"));
        }
        self.text(MARGIN, MARGIN - 10.0, "start", label);
    }

    fn zero_line(&mut self, scale: &YScale) {
        if scale.lo <= 0.0 && 0.0 <= scale.hi {
            let y = scale.px(0.0);
            self.line("zero", MARGIN, y, WIDTH - MARGIN, y, "gray", 1.0);
        }
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn slot_x(i: usize, n: usize) -> f64 {
    MARGIN + (i as f64 + 0.5) * (WIDTH - 2.0 * MARGIN) / n.max(1) as f64
}

/// One vertical interval per profile, profiles ordered by pooled estimate,
/// with a horizontal line at zero. Profiles without an interval get only a dot.
pub fn prediction_interval_svg(rows: &[PredictionRow], digest: &str) -> String {
    let mut order: Vec<&PredictionRow> = rows.iter().collect();
    order.sort_by(|a, b| {
        a.tau_pooled
            .total_cmp(&b.tau_pooled)
            .then(a.profile_id.cmp(&b.profile_id))
    });
    let scale = YScale::covering(
        rows.iter()
            .flat_map(|r| {
                let (lo, hi) = r.interval.map_or((r.tau_pooled, r.tau_pooled), |(l, h, _)| (l, h));
                [lo, hi, r.tau_pooled, 0.0]
            }),
    );
    let mut svg = Svg::new("Prediction intervals by profile", digest);
    svg.y_axis(&scale, "CATE");
    svg.zero_line(&scale);
    for (i, r) in order.iter().enumerate() {
        let x = slot_x(i, order.len());
        if let Some((lo, hi, _)) = r.interval {
            svg.line("pi", x, scale.px(lo), x, scale.px(hi), "steelblue", 1.5);
        }
        svg.dot("center", x, scale.px(r.tau_pooled), "black");
    }
    svg.text(WIDTH / 2.0, HEIGHT - 15.0, "middle", "profiles ordered by pooled estimate");
    svg.finish()
}

/// `(center, lower, upper)` of one interval.
pub type Interval = (f64, f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct CompareGroup {
    pub profile_id: u32,
    /// `(study_id, interval)` normal confidence intervals.
    pub studies: Vec<(u32, Interval)>,
    pub target: Interval,
}

/// Per selected profile: the study confidence intervals, then the target
/// prediction interval, grouped left to right.
pub fn compare_intervals_svg(groups: &[CompareGroup], digest: &str) -> String {
    let scale = YScale::covering(groups.iter().flat_map(|g| {
        g.studies
            .iter()
            .flat_map(|(_, (_, lo, hi))| [*lo, *hi])
            .chain([g.target.1, g.target.2, 0.0])
    }));
    let n_slots: usize = groups.iter().map(|g| g.studies.len() + 2).sum();
    let mut svg = Svg::new("Study confidence intervals and target prediction interval", digest);
    svg.y_axis(&scale, "CATE");
    svg.zero_line(&scale);
    let mut slot = 0;
    for g in groups {
        let first = slot;
        for (study_id, (c, lo, hi)) in &g.studies {
            let x = slot_x(slot, n_slots);
            svg.line("study-ci", x, scale.px(*lo), x, scale.px(*hi), "gray", 1.5);
            svg.dot("center", x, scale.px(*c), "black");
            svg.text(x, HEIGHT - MARGIN + 14.0, "middle", &format!("s{study_id}"));
            slot += 1;
        }
        let x = slot_x(slot, n_slots);
        let (c, lo, hi) = g.target;
        svg.line("target-pi", x, scale.px(lo), x, scale.px(hi), "firebrick", 2.5);
        svg.dot("center", x, scale.px(c), "black");
        svg.text(x, HEIGHT - MARGIN + 14.0, "middle", "target");
        let mid = 0.5 * (slot_x(first, n_slots) + x);
        svg.text(mid, HEIGHT - MARGIN + 30.0, "middle", &format!("profile {}", g.profile_id));
        slot += 2;
    }
    svg.finish()
}

/// One box (quartiles, median, whiskers at min and max) per labelled group.
pub fn coverage_boxplot_svg(groups: &[(String, Vec<f64>)], digest: &str) -> String {
    let scale = YScale { lo: 0.0, hi: 1.05 };
    let mut svg = Svg::new("Per-profile coverage", digest);
    svg.y_axis(&scale, "coverage");
    let nominal = scale.px(0.95);
    svg.line("nominal", MARGIN, nominal, WIDTH - MARGIN, nominal, "gray", 1.0);
    for (i, (label, values)) in groups.iter().enumerate() {
        let x = slot_x(i, groups.len());
        let mut v: Vec<f64> = values.iter().copied().filter(|c| c.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        svg.text(x, HEIGHT - MARGIN + 14.0, "middle", label);
        if v.is_empty() {
            continue;
        }
        let q = |p: f64| interpolated_quantile(&v, p);
        let (q1, med, q3) = (q(0.25), q(0.5), q(0.75));
        let half = 0.25 * (WIDTH - 2.0 * MARGIN) / groups.len() as f64;
        svg.line("whisker", x, scale.px(v[0]), x, scale.px(q1), "black", 1.0);
        svg.line("whisker", x, scale.px(q3), x, scale.px(v[v.len() - 1]), "black", 1.0);
        let _ = writeln!(
            svg.out,
            "<rect class=\"box\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"lightsteelblue\" stroke=\"black\"/>",
            x - half,
            scale.px(q3),
            2.0 * half,
            scale.px(q1) - scale.px(q3)
        );
        svg.line("median", x - half, scale.px(med), x + half, scale.px(med), "black", 2.0);
    }
    svg.finish()
}
