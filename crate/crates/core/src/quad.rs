//! Composite Gauss–Legendre rules on the quasimomentum interval.
//!
//! Subintervals that end at a break point (a multiple eigenvalue or a
//! singular quasimomentum) are graded toward that end by a sigmoidal
//! change of variables, which turns algebraic endpoint singularities into
//! smooth integrands.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;

/// Grading exponent of the sigmoidal map.
pub const GRADING: i32 = 4;

/// A quadrature rule as parallel node/weight arrays.
#[derive(Clone, Debug, Default)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn extend(&mut self, other: Rule) {
        self.nodes.extend(other.nodes);
        self.weights.extend(other.weights);
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.iter().map(|(x, w)| w * f(x)).sum()
    }
}

/// Nodes and weights on `[-1, 1]`, ascending.
pub fn legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let degree = NonZeroUsize::new(order.max(2)).expect("nonzero");
    let mut pairs: Vec<(f64, f64)> = GaussLegendre::new(degree).into_node_weight_pairs().into_vec();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `panels` equal Gauss–Legendre panels on `[a, b]`.
pub fn composite(a: f64, b: f64, panels: usize, order: usize) -> Rule {
    let (x, w) = legendre(order);
    let panels = panels.max(1);
    let h = (b - a) / panels as f64;
    let mut rule = Rule::default();
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for (xi, wi) in x.iter().zip(&w) {
            rule.nodes.push(lo + 0.5 * h * (xi + 1.0));
            rule.weights.push(0.5 * h * wi);
        }
    }
    rule
}

/// `s^p / (s^p + (1-s)^p)` and its derivative.
fn sigmoid(s: f64) -> (f64, f64) {
    let p = GRADING;
    let a = s.powi(p);
    let b = (1.0 - s).powi(p);
    let den = a + b;
    let da = p as f64 * s.powi(p - 1);
    let db = -(p as f64) * (1.0 - s).powi(p - 1);
    (a / den, (da * den - a * (da + db)) / (den * den))
}

/// Rule on `[a, b]` graded toward the flagged ends.
pub fn graded(a: f64, b: f64, panels: usize, order: usize, left: bool, right: bool) -> Rule {
    if !left && !right {
        return composite(a, b, panels, order);
    }
    let base = composite(0.0, 1.0, panels, order);
    let len = b - a;
    let mut rule = Rule::default();
    for (s, w) in base.iter() {
        // One-sided grading uses the left or right half of the sigmoid.
        let (u, du) = match (left, right) {
            (true, true) => sigmoid(s),
            (true, false) => {
                let (v, dv) = sigmoid(0.5 * s);
                (2.0 * v, dv)
            }
            _ => {
                let (v, dv) = sigmoid(0.5 + 0.5 * s);
                (2.0 * v - 1.0, dv)
            }
        };
        rule.nodes.push(a + len * u);
        rule.weights.push(len * du * w);
    }
    rule
}

/// Sorted, deduplicated break points strictly inside `(lo, hi)`.
fn interior(breaks: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut v: Vec<f64> = breaks.iter().copied().filter(|&b| b > lo + 1e-12 && b < hi - 1e-12).collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    v
}

/// Rule on `[lo, hi]` split at `breaks`, graded toward every break point
/// and toward `lo`/`hi` when those are listed as singular.
pub fn split_rule(lo: f64, hi: f64, breaks: &[f64], panels: usize, order: usize) -> Rule {
    let is_break = |x: f64| breaks.iter().any(|&b| (b - x).abs() < 1e-12);
    let mut pts = vec![lo];
    pts.extend(interior(breaks, lo, hi));
    pts.push(hi);
    let total = hi - lo;
    let mut rule = Rule::default();
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        // Panels in proportion to length, at least one.
        let p = ((panels as f64 * (b - a) / total).ceil() as usize).max(1);
        rule.extend(graded(a, b, p, order, is_break(a), is_break(b)));
    }
    rule
}

/// Rule on the quasimomentum interval `(-π, π]`. Break points are taken
/// modulo `2π`; a break at `±π` grades both ends.
pub fn quasimomentum_rule(breaks: &[f64], panels: usize, order: usize) -> Rule {
    let mut b: Vec<f64> = breaks.iter().map(|&t| crate::floquet::wrap_t(t)).collect();
    if b.iter().any(|&t| (t - PI).abs() < 1e-12) {
        b.push(-PI);
    }
    split_rule(-PI, PI, &b, panels, order)
}

/// Pieces of `(a, b)` inside `(-π, π]`, split where it wraps across `±π`.
pub fn wrap_interval(a: f64, b: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let (mut a, mut b) = (a, b);
    while a < -PI {
        a += 2.0 * PI;
        b += 2.0 * PI;
    }
    while a >= PI {
        a -= 2.0 * PI;
        b -= 2.0 * PI;
    }
    if b <= PI {
        out.push((a, b));
    } else {
        out.push((a, PI));
        out.push((-PI, b - 2.0 * PI));
    }
    out
}
