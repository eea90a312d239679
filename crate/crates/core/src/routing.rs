//! Threshold routing between a small and a large model, with reliability,
//! call-rate and analytic latency accounting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset used for the top of the default threshold grid: `1 + EPS` routes
/// every prompt to the large model.
pub const GRID_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutePolicy {
    pub alpha: f64,
}

/// Small iff `score >= alpha`.
pub fn route(score: f64, policy: &RoutePolicy) -> Result<Decision> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::OutOfRange(format!("score {score} outside [0, 1]")));
    }
    Ok(if score >= policy.alpha { Decision::Small } else { Decision::Large })
}

/// Fraction of prompts whose final answer is acceptable, treating the large
/// model as always correct.
pub fn reliability(decisions: &[Decision], labels: &[u8]) -> Result<f64> {
    reliability_with(decisions, labels, 1.0)
}

/// As [`reliability`] with a large model that succeeds with probability
/// `large_accuracy`.
pub fn reliability_with(decisions: &[Decision], labels: &[u8], large_accuracy: f64) -> Result<f64> {
    if decisions.len() != labels.len() {
        return Err(Error::LengthMismatch { left: decisions.len(), right: labels.len() });
    }
    if decisions.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_unit(large_accuracy, "large-model accuracy")?;
    let mut fails = 0usize;
    let mut large = 0usize;
    for (&d, &l) in decisions.iter().zip(labels) {
        if l > 1 {
            return Err(Error::InvalidLabel(l));
        }
        match d {
            Decision::Small if l == 0 => fails += 1,
            Decision::Large => large += 1,
            Decision::Small => {}
        }
    }
    Ok(reliability_from_counts(decisions.len(), fails, large, large_accuracy))
}

fn reliability_from_counts(n: usize, small_fails: usize, large: usize, large_accuracy: f64) -> f64 {
    let lost = small_fails as f64 + (1.0 - large_accuracy) * large as f64;
    (n as f64 - lost) / n as f64
}

pub fn call_rate(decisions: &[Decision]) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::EmptyInput);
    }
    let large = decisions.iter().filter(|&&d| d == Decision::Large).count();
    Ok(large as f64 / decisions.len() as f64)
}

fn check_unit(v: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::OutOfRange(format!("{what} {v} outside [0, 1]")));
    }
    Ok(())
}

/// Per-model time to first token and time per output token, plus the mean
/// output length `L`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub ttft_small: f64,
    pub tpot_small: f64,
    pub ttft_large: f64,
    pub tpot_large: f64,
    pub mean_output_len: f64,
}

impl Default for LatencyProfile {
    fn default() -> Self {
        Self {
            ttft_small: 100.0,
            tpot_small: 10.0,
            ttft_large: 300.0,
            tpot_large: 30.0,
            mean_output_len: 101.0,
        }
    }
}

impl LatencyProfile {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ttft_small, self.tpot_small, self.ttft_large, self.tpot_large];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidConfig("latency profile times must be positive".into()));
        }
        if !(self.mean_output_len.is_finite() && self.mean_output_len >= 1.0) {
            return Err(Error::InvalidConfig("mean output length must be at least 1".into()));
        }
        Ok(())
    }

    /// `TTFT + (L - 1) TPOT` of the small model.
    pub fn total_small(&self) -> f64 {
        self.ttft_small + (self.mean_output_len - 1.0) * self.tpot_small
    }

    pub fn total_large(&self) -> f64 {
        self.ttft_large + (self.mean_output_len - 1.0) * self.tpot_large
    }
}

/// External router decides before any prefill: `(1 - c) T_s + c T_l`.
pub fn expected_latency_pre_router(c: f64, profile: &LatencyProfile) -> Result<f64> {
    check_unit(c, "call rate")?;
    profile.validate()?;
    Ok((1.0 - c) * profile.total_small() + c * profile.total_large())
}

/// The small model always prefills (producing the score), then either
/// keeps decoding or hands over: `TTFT_s + (1 - c)(L - 1) TPOT_s + c T_l`.
pub fn expected_latency_prefill_aware(c: f64, profile: &LatencyProfile) -> Result<f64> {
    check_unit(c, "call rate")?;
    profile.validate()?;
    let decode_small = (1.0 - c) * (profile.mean_output_len - 1.0) * profile.tpot_small;
    Ok(profile.ttft_small + decode_small + c * profile.total_large())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub alpha: f64,
    pub reliability: f64,
    pub call_rate: f64,
    pub latency_introlm: f64,
    pub latency_pre_router: f64,
}

/// `{0} ∪ distinct scores ∪ {1 + GRID_EPS}`, ascending.
pub fn default_grid(scores: &[f64]) -> Vec<f64> {
    let mut grid: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
    grid.push(0.0);
    grid.push(1.0 + GRID_EPS);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

fn check_grid(grid: &[f64]) -> Result<()> {
    let (Some(&first), Some(&last)) = (grid.first(), grid.last()) else {
        return Err(Error::BadGrid("empty grid".into()));
    };
    if grid.iter().any(|a| !a.is_finite()) {
        return Err(Error::BadGrid("non-finite threshold".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::BadGrid("thresholds must be strictly ascending".into()));
    }
    if first > 0.0 || last <= 1.0 {
        return Err(Error::BadGrid(format!("grid [{first}, {last}] must span [0, 1 + eps]")));
    }
    Ok(())
}

/// Options for [`sweep`].
#[derive(Clone, Debug, PartialEq)]
pub struct SweepOptions {
    pub profile: LatencyProfile,
    pub large_accuracy: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { profile: LatencyProfile::default(), large_accuracy: 1.0 }
    }
}

/// One operating point per threshold in `grid`.
pub fn sweep(scores: &[f64], labels: &[u8], grid: &[f64], opts: &SweepOptions) -> Result<Vec<TradeoffPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch { left: scores.len(), right: labels.len() });
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    for &s in scores {
        check_unit(s, "score")?;
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidLabel(l));
    }
    check_grid(grid)?;
    opts.profile.validate()?;
    check_unit(opts.large_accuracy, "large-model accuracy")?;
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Walk thresholds upwards; `below` counts prompts with score < alpha.
    let mut below = 0usize;
    let mut fails_below = 0usize;
    let total_fails = labels.iter().filter(|&&l| l == 0).count();
    let mut out = Vec::with_capacity(grid.len());
    for &alpha in grid {
        while below < n && scores[order[below]] < alpha {
            if labels[order[below]] == 0 {
                fails_below += 1;
            }
            below += 1;
        }
        let c = below as f64 / n as f64;
        out.push(TradeoffPoint {
            alpha,
            reliability: reliability_from_counts(n, total_fails - fails_below, below, opts.large_accuracy),
            call_rate: c,
            latency_introlm: expected_latency_prefill_aware(c, &opts.profile)?,
            latency_pre_router: expected_latency_pre_router(c, &opts.profile)?,
        });
    }
    Ok(out)
}

pub fn sweep_csv(points: &[TradeoffPoint]) -> String {
    let mut out = String::from("alpha,reliability,call_rate,latency_introlm,latency_pre_router\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.alpha, p.reliability, p.call_rate, p.latency_introlm, p.latency_pre_router
        );
    }
    out
}

/// Reliability of `points` linearly interpolated at call rate `c`. Points
/// must come from one sweep (call rate non-decreasing).
pub fn reliability_at(points: &[TradeoffPoint], c: f64) -> Option<f64> {
    let first = points.first()?;
    if c <= first.call_rate {
        return (c >= first.call_rate - 1e-15).then_some(first.reliability);
    }
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        if c <= b.call_rate {
            if b.call_rate == a.call_rate {
                return Some(b.reliability);
            }
            let t = (c - a.call_rate) / (b.call_rate - a.call_rate);
            return Some(a.reliability + t * (b.reliability - a.reliability));
        }
    }
    None
}

/// True if curve `a` reaches at least `b`'s reliability (minus `tol`) at
/// every call rate where `b` has a point.
pub fn frontier_dominates(a: &[TradeoffPoint], b: &[TradeoffPoint], tol: f64) -> bool {
    b.iter().all(|p| reliability_at(a, p.call_rate).is_some_and(|r| r >= p.reliability - tol))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Panel {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Panel {
    fn px(&self, x: f64) -> f64 {
        self.x0 + (x - self.xr.0) / (self.xr.1 - self.xr.0).max(1e-12) * self.w
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 + self.h - (y - self.yr.0) / (self.yr.1 - self.yr.0).max(1e-12) * self.h
    }

    fn axes(&self, out: &mut String, xlabel: &str, ylabel: &str) {
        let _ = writeln!(
            out,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#333"/>"##,
            self.x0, self.y0, self.w, self.h
        );
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = self.xr.0 + t * (self.xr.1 - self.xr.0);
            let yv = self.yr.0 + t * (self.yr.1 - self.yr.0);
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
                self.px(xv),
                self.y0 + self.h + 14.0,
                tick(xv)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#,
                self.x0 - 4.0,
                self.py(yv) + 3.0,
                tick(yv)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"#,
            self.x0 + self.w / 2.0,
            self.y0 + self.h + 32.0,
            escape(xlabel)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
            self.x0 - 40.0,
            self.y0 + self.h / 2.0,
            self.x0 - 40.0,
            self.y0 + self.h / 2.0,
            escape(ylabel)
        );
    }

    fn line(&self, out: &mut String, pts: &[(f64, f64)], color: &str, dashed: bool) {
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y))).collect();
        let dash = if dashed { r#" stroke-dasharray="5,3""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
            coords.join(" ")
        );
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Two-panel chart: reliability against call rate, and reliability against
/// expected latency (solid: prefill-aware routing, dashed: external router).
pub fn sweep_svg(series: &[(String, Vec<TradeoffPoint>)]) -> String {
    let all = series.iter().flat_map(|(_, p)| p.iter());
    let (mut rmin, mut lmin, mut lmax) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for p in all {
        rmin = rmin.min(p.reliability);
        lmin = lmin.min(p.latency_introlm.min(p.latency_pre_router));
        lmax = lmax.max(p.latency_introlm.max(p.latency_pre_router));
    }
    if !lmin.is_finite() {
        (lmin, lmax) = (0.0, 1.0);
    }
    let yr = ((rmin - 0.02).max(0.0), 1.0);
    let left = Panel { x0: 60.0, y0: 30.0, w: 300.0, h: 240.0, xr: (0.0, 1.0), yr };
    let right = Panel { x0: 440.0, y0: 30.0, w: 300.0, h: 240.0, xr: (lmin, lmax), yr };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="800" height="{}" viewBox="0 0 800 {}">"#,
        330 + 16 * series.len(),
        330 + 16 * series.len()
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    left.axes(&mut out, "Call rate", "Reliability");
    right.axes(&mut out, "Expected latency", "Reliability");
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let rc: Vec<(f64, f64)> = pts.iter().map(|p| (p.call_rate, p.reliability)).collect();
        left.line(&mut out, &rc, color, false);
        let li: Vec<(f64, f64)> = pts.iter().map(|p| (p.latency_introlm, p.reliability)).collect();
        let lp: Vec<(f64, f64)> = pts.iter().map(|p| (p.latency_pre_router, p.reliability)).collect();
        right.line(&mut out, &li, color, false);
        right.line(&mut out, &lp, color, true);
        let y = 320.0 + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="60" y1="{y:.1}" x2="80" y2="{y:.1}" stroke="{color}" stroke-width="2"/><text x="86" y="{:.1}" font-size="11">{}</text>"#,
            y + 4.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn route_boundaries() {
        let s = RoutePolicy { alpha: 0.0 };
        assert_eq!(route(0.0, &s).unwrap(), Decision::Small);
        let l = RoutePolicy { alpha: 1.0 + GRID_EPS };
        assert_eq!(route(1.0, &l).unwrap(), Decision::Large);
        assert_eq!(route(0.4, &RoutePolicy { alpha: 0.4 }).unwrap(), Decision::Small);
        assert!(route(1.5, &s).is_err());
    }

    #[test]
    fn reliability_and_call_rate_formulas() {
        use Decision::*;
        assert_eq!(reliability(&[Large; 4], &[1, 0, 1, 0]).unwrap(), 1.0);
        assert_eq!(reliability(&[Small; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(call_rate(&[Small, Small]).unwrap(), 0.0);
        assert_eq!(call_rate(&[Small, Large]).unwrap(), 0.5);
        assert!(call_rate(&[]).is_err());
        assert!(matches!(reliability(&[Small], &[1, 0]), Err(Error::LengthMismatch { .. })));
        assert_eq!(reliability_with(&[Large, Large], &[1, 1], 0.5).unwrap(), 0.5);
    }

    #[test]
    fn worked_latency_example() {
        let p = LatencyProfile::default();
        assert_eq!(expected_latency_pre_router(0.25, &p).unwrap(), 1650.0);
        assert_eq!(expected_latency_prefill_aware(0.25, &p).unwrap(), 1675.0);
        assert_eq!(expected_latency_pre_router(0.0, &p).unwrap(), p.total_small());
        assert_eq!(expected_latency_prefill_aware(0.0, &p).unwrap(), p.total_small());
        assert_eq!(expected_latency_prefill_aware(1.0, &p).unwrap(), p.ttft_small + p.total_large());
        let one = LatencyProfile { mean_output_len: 1.0, ..p };
        assert_eq!(expected_latency_pre_router(0.5, &one).unwrap(), 0.5 * 100.0 + 0.5 * 300.0);
        assert!(expected_latency_pre_router(1.2, &one).is_err());
    }

    #[test]
    fn grid_validation() {
        let s = [0.2, 0.9];
        let l = [0, 1];
        let o = SweepOptions::default();
        assert!(matches!(sweep(&s, &l, &[0.0, 0.5], &o), Err(Error::BadGrid(_))));
        assert!(matches!(sweep(&s, &l, &[0.5, 0.0, 1.1], &o), Err(Error::BadGrid(_))));
        assert!(matches!(sweep(&s, &l, &[0.1, 1.1], &o), Err(Error::BadGrid(_))));
        let pts = sweep(&s, &l, &default_grid(&s), &o).unwrap();
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[0].call_rate, 0.0);
        assert_eq!(pts[0].reliability, 0.5);
        assert_eq!(pts.last().unwrap().reliability, 1.0);
        assert_eq!(pts.last().unwrap().call_rate, 1.0);
    }

    #[test]
    fn svg_has_one_polyline_per_curve() {
        let s = [0.2, 0.5, 0.9];
        let pts = sweep(&s, &[0, 1, 1], &default_grid(&s), &SweepOptions::default()).unwrap();
        let svg = sweep_svg(&[("a".into(), pts.clone()), ("b<".into(), pts)]);
        assert_eq!(svg.matches("<polyline").count(), 6);
        assert!(svg.contains("b&lt;"));
    }
}
