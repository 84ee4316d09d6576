//! Maximisation over a box of controls: tensor grid search followed by
//! cyclic golden-section refinement around the best node.

use crate::error::{LabError, Result};
use crate::model::{Control, ControlBox};

pub const DEFAULT_NODES: usize = 64;
const GOLDEN_ITERS: usize = 80;
const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Tensor grid over a bounded control box.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    nodes: usize,
}

impl ControlGrid {
    pub fn new(bounds: &ControlBox, nodes_per_dim: usize) -> Result<Self> {
        if nodes_per_dim == 0 {
            return Err(LabError::Configuration("control grid needs at least one node per coordinate".into()));
        }
        if bounds.lower.iter().chain(&bounds.upper).any(|v| !v.is_finite()) {
            return Err(LabError::Configuration("control grid needs finite bounds".into()));
        }
        Ok(Self { lower: bounds.lower.clone(), upper: bounds.upper.clone(), nodes: nodes_per_dim })
    }

    pub fn with_default_nodes(bounds: &ControlBox) -> Result<Self> {
        Self::new(bounds, DEFAULT_NODES)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn nodes_per_dim(&self) -> usize {
        self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn cell(&self, d: usize) -> f64 {
        if self.nodes == 1 {
            self.upper[d] - self.lower[d]
        } else {
            (self.upper[d] - self.lower[d]) / (self.nodes - 1) as f64
        }
    }

    fn coord(&self, d: usize, i: usize) -> f64 {
        if self.nodes == 1 {
            0.5 * (self.lower[d] + self.upper[d])
        } else if i + 1 == self.nodes {
            self.upper[d]
        } else {
            self.lower[d] + i as f64 * self.cell(d)
        }
    }

    /// Grid node with flat index `flat` (first coordinate varies slowest).
    pub fn point(&self, mut flat: usize, out: &mut Control) {
        out.clear();
        out.resize(self.dim(), 0.0);
        for d in (0..self.dim()).rev() {
            out[d] = self.coord(d, flat % self.nodes);
            flat /= self.nodes;
        }
    }

    /// Calls `visit` on every grid node.
    pub fn for_each_point(&self, mut visit: impl FnMut(&[f64])) {
        let mut u = Control::new();
        for flat in 0..self.len() {
            self.point(flat, &mut u);
            visit(&u);
        }
    }

    pub fn clamp(&self, u: &mut [f64]) {
        for ((v, lo), hi) in u.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Maximises `objective` over the box. `extra` candidates (e.g. a known
    /// maximiser) are clamped into the box and compete with the refined node.
    /// NaN objective values count as `−∞`.
    pub fn maximize(&self, objective: impl Fn(&[f64]) -> f64, extra: &[Control]) -> Result<(Control, f64)> {
        if self.is_empty() || self.dim() == 0 {
            return Err(LabError::Configuration("empty control grid".into()));
        }
        let score = |u: &[f64]| {
            let v = objective(u);
            if v.is_nan() {
                f64::NEG_INFINITY
            } else {
                v
            }
        };

        let mut best = Control::new();
        let mut best_val = f64::NEG_INFINITY;
        let mut u = Control::new();
        for flat in 0..self.len() {
            self.point(flat, &mut u);
            let v = score(&u);
            if v > best_val || best.is_empty() {
                best_val = v;
                best.clone_from(&u);
            }
        }

        let sweeps = if self.dim() == 1 { 1 } else { 4 };
        let mut cur = best.clone();
        let mut cur_val = best_val;
        for _ in 0..sweeps {
            for d in 0..self.dim() {
                let lo = (cur[d] - self.cell(d)).max(self.lower[d]);
                let hi = (cur[d] + self.cell(d)).min(self.upper[d]);
                let (x, v) = golden_1d(|s| {
                    let mut w = cur.clone();
                    w[d] = s;
                    score(&w)
                }, lo, hi);
                if v > cur_val {
                    cur[d] = x;
                    cur_val = v;
                }
            }
        }
        best = cur;
        best_val = cur_val;

        for cand in extra {
            if cand.len() != self.dim() {
                continue;
            }
            let mut c = cand.clone();
            self.clamp(&mut c);
            let v = score(&c);
            if v > best_val {
                best_val = v;
                best = c;
            }
        }
        Ok((best, best_val))
    }
}

/// Golden-section search for a maximum of `f` on `[lo, hi]`; returns the best
/// point evaluated, endpoints included.
fn golden_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    let (mut a, mut b) = (lo, hi);
    let mut best = (a, f(a));
    let fb = f(b);
    if fb > best.1 {
        best = (b, fb);
    }
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..GOLDEN_ITERS {
        if fc > best.1 {
            best = (c, fc);
        }
        if fd > best.1 {
            best = (d, fd);
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        if (b - a).abs() <= 1e-15 * (1.0 + a.abs()) {
            break;
        }
    }
    for (x, v) in [(c, fc), (d, fd)] {
        if v > best.1 {
            best = (x, v);
        }
    }
    best
}
