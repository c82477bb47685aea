//! Empirical measures and the bounded-Lipschitz and Kantorovich distances.
//!
//! The bounded-Lipschitz distance
//!
//! ```text
//! |mu - nu|_BL = sup { <f, mu> - <f, nu> : Lip f + sup |f| <= 1 }
//! ```
//!
//! is evaluated as `max_alpha OT(alpha)`, where `OT(alpha)` is the same
//! supremum over `Lip f <= alpha`, `|f| <= 1 - alpha` on the pooled support.
//! Because the charges `mu - nu` sum to zero, `OT(alpha)` is the optimal
//! transport cost for the metric `min(alpha d, 2 (1 - alpha))`, which makes
//! it concave in `alpha`.
//!
//! * On the line `OT(alpha)` is a chain problem solved exactly by a slope
//!   trick dynamic programme in `O(m)` after sorting.
//! * In higher dimension it is a transport problem solved exactly by
//!   successive shortest paths on the pooled support (capped in size).
//! * The sliced estimator takes the largest (or the mean) exact line
//!   distance over random projections; it is a lower estimate.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weighted atoms in `R^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Equal weights. `points` is row-major, `dim` entries per atom.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::domain("points must form a non-empty m x k array"));
        }
        let m = points.len() / dim;
        Self::weighted(dim, points, vec![1.0 / m as f64; m])
    }

    pub fn weighted(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() != dim * weights.len() || weights.is_empty() {
            return Err(Error::domain("points and weights do not match"));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("samples must be finite"));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::domain("weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!("weights sum to {total}, not 1")));
        }
        Ok(EmpiricalMeasure { dim, points, weights })
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        Self::uniform(1, values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::domain("rows have different lengths"));
        }
        Self::uniform(dim, rows.concat())
    }

    pub fn dirac(point: Vec<f64>) -> Result<Self> {
        let dim = point.len();
        Self::weighted(dim, point, vec![1.0])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same atoms, new weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::weighted(self.dim, self.points.clone(), weights)
    }

    /// Push-forward under `x -> <dir, x>`.
    pub fn project(&self, dir: &[f64]) -> Self {
        let points = self
            .points
            .chunks_exact(self.dim)
            .map(|p| p.iter().zip(dir).map(|(a, b)| a * b).sum())
            .collect();
        EmpiricalMeasure { dim: 1, points, weights: self.weights.clone() }
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (p, w) in self.points.chunks_exact(self.dim).zip(&self.weights) {
            for (a, x) in m.iter_mut().zip(p) {
                *a += w * x;
            }
        }
        m
    }

    /// One sample per line. A header line is optional; a column named
    /// `weight` holds weights (normalised on read), all others are coordinates.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
        let mut weight_col = None;
        if let Some(first) = lines.peek() {
            let fields: Vec<&str> = first.split(',').map(str::trim).collect();
            if fields.iter().any(|f| f.parse::<f64>().is_err()) {
                weight_col = fields.iter().position(|f| f.eq_ignore_ascii_case("weight"));
                lines.next();
            }
        }
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut dim = None;
        for (ln, line) in lines.enumerate() {
            let vals = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::domain(format!("row {}: {e}", ln + 1)))?;
            let k = vals.len() - usize::from(weight_col.is_some());
            if *dim.get_or_insert(k) != k {
                return Err(Error::domain(format!("row {} has {} coordinates", ln + 1, k)));
            }
            for (j, v) in vals.into_iter().enumerate() {
                if Some(j) == weight_col {
                    weights.push(v);
                } else {
                    points.push(v);
                }
            }
        }
        let dim = dim.ok_or_else(|| Error::domain("no samples"))?;
        match weight_col {
            None => Self::uniform(dim, points),
            Some(_) => {
                let total: f64 = weights.iter().sum();
                if !(total > 0.0) {
                    return Err(Error::domain("weights must have positive sum"));
                }
                Self::weighted(dim, points, weights.iter().map(|w| w / total).collect())
            }
        }
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ExactLp,
    #[serde(rename = "chain-1d")]
    Chain1d,
    Sliced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    Exact,
    LowerEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub value: f64,
    pub method: Method,
    pub bound_kind: BoundKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_slices: Option<usize>,
    /// 95% half-width of the Monte Carlo component (slices or bootstrap).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_half_width: Option<f64>,
    /// Optimal Lipschitz share of the budget (mean over slices if sliced).
    pub alpha: f64,
}

impl DistanceReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlOptions {
    /// Largest pooled support handed to the exact transport solver.
    pub cap: usize,
    pub slices: usize,
    pub seed: u64,
    /// Width to which the optimal `alpha` is bracketed.
    pub alpha_tol: f64,
    /// Use the sliced estimator even when the exact solver would fit.
    pub prefer_sliced: bool,
    /// How slice values are combined.
    pub reduce: SliceReduce,
}

/// Every slice is a lower estimate, so their maximum is one too and sits
/// much closer to the true distance than their mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SliceReduce {
    #[default]
    Max,
    Mean,
}

impl Default for BlOptions {
    fn default() -> Self {
        BlOptions {
            cap: 512,
            slices: 128,
            seed: 0,
            alpha_tol: 1e-10,
            prefer_sliced: false,
            reduce: SliceReduce::Max,
        }
    }
}

const COARSE_ALPHA: usize = 16;

/// Maximise a concave function on `[0, 1]`: coarse scan, then golden
/// section inside the bracket around the best scan point.
fn maximize_concave<F: FnMut(f64) -> f64>(mut f: F, tol: f64) -> (f64, f64) {
    let vals: Vec<f64> = (0..=COARSE_ALPHA).map(|i| f(i as f64 / COARSE_ALPHA as f64)).collect();
    let (imax, &vmax) = vals
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty scan");
    let mut best = (imax as f64 / COARSE_ALPHA as f64, vmax);
    let mut lo = imax.saturating_sub(1) as f64 / COARSE_ALPHA as f64;
    let mut hi = (imax + 1).min(COARSE_ALPHA) as f64 / COARSE_ALPHA as f64;
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
        for (x, v) in [(x1, f1), (x2, f2)] {
            if v > best.1 {
                best = (x, v);
            }
        }
    }
    best
}

/// Bracket half-width and tolerance for warm-started replicate solves.
const WARM_WIDTH: f64 = 0.02;
const WARM_TOL: f64 = 1e-5;

/// Like [`maximize_concave`], but starting from a bracket around `hint`
/// that is widened until it holds the maximum.
fn maximize_concave_near<F: FnMut(f64) -> f64>(mut f: F, hint: f64, tol: f64) -> (f64, f64) {
    let mid = hint.clamp(0.0, 1.0);
    let fm = f(mid);
    let mut best = (mid, fm);
    let mut w = WARM_WIDTH;
    let (mut lo, mut hi);
    loop {
        lo = (mid - w).max(0.0);
        hi = (mid + w).min(1.0);
        let (fl, fh) = (f(lo), f(hi));
        for (x, v) in [(lo, fl), (hi, fh)] {
            if v > best.1 {
                best = (x, v);
            }
        }
        // concavity: the maximum lies in [lo, hi] once both ends are no higher
        if (fl <= fm || lo == 0.0) && (fh <= fm || hi == 1.0) {
            break;
        }
        w *= 4.0;
    }
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
        for (x, v) in [(x1, f1), (x2, f2)] {
            if v > best.1 {
                best = (x, v);
            }
        }
    }
    best
}

/// How to look for the best budget split `alpha`.
#[derive(Clone, Copy, Debug)]
enum Search {
    Full(f64),
    Near(f64),
}

impl Search {
    fn run<F: FnMut(f64) -> f64>(self, f: F) -> (f64, f64) {
        match self {
            Search::Full(tol) => maximize_concave(f, tol),
            Search::Near(hint) => maximize_concave_near(f, hint, WARM_TOL),
        }
    }
}

/// `max sum_i c_i f_i` subject to `|f_{i+1} - f_i| <= alpha g_i` and
/// `|f_i| <= 1 - alpha`.
///
/// Dynamic programme over the value function `V_i(y)`, the best partial
/// objective with `f_i = y`. `V_i` is concave and piecewise linear; its
/// kinks are kept as `(position, slope change)` in two stacks, left and
/// right of the maximum, each with a lazy shift. Passing a gap dilates the
/// maximum plateau by `alpha g`; adding `c y` walks the maximum across
/// kinks. Kinks are only ever pushed next to the maximum, so both stacks
/// stay sorted and every move is O(1). The box `|y| <= 1 - alpha` acts as
/// a kink of infinite weight; kinks pushed past it by dilation are dead.
fn chain_value(c: &[f64], gaps: &[f64], alpha: f64) -> f64 {
    let b = 1.0 - alpha;
    if b <= 0.0 || c.is_empty() {
        return 0.0;
    }
    // (stored position, slope change); absolute position = stored + shift
    let mut left: Vec<(f64, f64)> = Vec::with_capacity(c.len());
    let mut right: Vec<(f64, f64)> = Vec::with_capacity(c.len());
    let (mut off_l, mut off_r) = (0.0, 0.0);
    let mut peak = 0.0;
    for (i, &ci) in c.iter().enumerate() {
        if i > 0 {
            let w = alpha * gaps[i - 1];
            off_l -= w;
            off_r += w;
        }
        if ci > 0.0 {
            let mut s = ci;
            let mut pos = match right.last() {
                Some(&(p, _)) if p + off_r < b => p + off_r,
                _ => b,
            };
            let mut val = peak + ci * pos;
            loop {
                let (x, d) = match right.last() {
                    Some(&(p, d)) if p + off_r < b => {
                        right.pop();
                        (p + off_r, d)
                    }
                    _ => (b, f64::INFINITY),
                };
                val += s * (x - pos);
                pos = x;
                if d >= s {
                    left.push((x - off_l, s));
                    if d.is_finite() && d > s {
                        right.push((x - off_r, d - s));
                    }
                    break;
                }
                s -= d;
                left.push((x - off_l, d));
            }
            peak = val;
        } else if ci < 0.0 {
            let mut s = -ci;
            let mut pos = match left.last() {
                Some(&(p, _)) if p + off_l > -b => p + off_l,
                _ => -b,
            };
            let mut val = peak + ci * pos;
            loop {
                let (x, d) = match left.last() {
                    Some(&(p, d)) if p + off_l > -b => {
                        left.pop();
                        (p + off_l, d)
                    }
                    _ => (-b, f64::INFINITY),
                };
                val += s * (pos - x);
                pos = x;
                if d >= s {
                    right.push((x - off_r, s));
                    if d.is_finite() && d > s {
                        left.push((x - off_l, d - s));
                    }
                    break;
                }
                s -= d;
                right.push((x - off_r, d));
            }
            peak = val;
        }
    }
    peak.max(0.0)
}

/// Pooled sorted support of two 1-D samples.
#[derive(Clone, Debug)]
struct ChainKernel {
    gaps: Vec<f64>,
    mu_idx: Vec<u32>,
    nu_idx: Vec<u32>,
    n: usize,
}

impl ChainKernel {
    fn new(mu: &[f64], nu: &[f64]) -> Self {
        let mut all: Vec<(f64, u32, bool)> = mu
            .iter()
            .enumerate()
            .map(|(i, &x)| (x, i as u32, true))
            .chain(nu.iter().enumerate().map(|(i, &x)| (x, i as u32, false)))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut gaps = Vec::new();
        let mut mu_idx = vec![0; mu.len()];
        let mut nu_idx = vec![0; nu.len()];
        let mut n = 0usize;
        let mut last = f64::NAN;
        for &(x, i, is_mu) in &all {
            if n == 0 || x != last {
                if n > 0 {
                    gaps.push(x - last);
                }
                n += 1;
                last = x;
            }
            if is_mu {
                mu_idx[i as usize] = (n - 1) as u32;
            } else {
                nu_idx[i as usize] = (n - 1) as u32;
            }
        }
        ChainKernel { gaps, mu_idx, nu_idx, n }
    }

    fn charges(&self, mu_w: &[f64], nu_w: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; self.n];
        for (&i, w) in self.mu_idx.iter().zip(mu_w) {
            c[i as usize] += w;
        }
        for (&i, w) in self.nu_idx.iter().zip(nu_w) {
            c[i as usize] -= w;
        }
        c
    }

    fn solve(&self, mu_w: &[f64], nu_w: &[f64], search: Search) -> (f64, f64) {
        let c = self.charges(mu_w, nu_w);
        if c.iter().all(|&x| x.abs() < 1e-15) {
            return (0.0, 0.0);
        }
        search.run(|a| chain_value(&c, &self.gaps, a))
    }
}

/// Exact transport on a pooled support in `R^k`.
#[derive(Clone, Debug)]
struct TransportKernel {
    dist: Vec<f64>,
    mu_idx: Vec<usize>,
    nu_idx: Vec<usize>,
    n: usize,
}

impl TransportKernel {
    fn new(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Self {
        let k = mu.dim();
        let mut pooled: Vec<Vec<f64>> = Vec::new();
        // Linear scan is fine at the support sizes this solver accepts.
        let mut index = |p: &[f64]| match pooled.iter().position(|q| q == p) {
            Some(i) => i,
            None => {
                pooled.push(p.to_vec());
                pooled.len() - 1
            }
        };
        let mu_idx: Vec<usize> = (0..mu.len()).map(|i| index(mu.point(i))).collect();
        let nu_idx: Vec<usize> = (0..nu.len()).map(|i| index(nu.point(i))).collect();
        let n = pooled.len();
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let d = (0..k).map(|c| (pooled[i][c] - pooled[j][c]).powi(2)).sum::<f64>().sqrt();
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        TransportKernel { dist, mu_idx, nu_idx, n }
    }

    fn solve(&self, mu_w: &[f64], nu_w: &[f64], search: Search) -> (f64, f64) {
        let mut c = vec![0.0; self.n];
        for (&i, w) in self.mu_idx.iter().zip(mu_w) {
            c[i] += w;
        }
        for (&i, w) in self.nu_idx.iter().zip(nu_w) {
            c[i] -= w;
        }
        let src: Vec<usize> = (0..self.n).filter(|&i| c[i] > 1e-15).collect();
        let snk: Vec<usize> = (0..self.n).filter(|&i| c[i] < -1e-15).collect();
        if src.is_empty() || snk.is_empty() {
            return (0.0, 0.0);
        }
        let supply: Vec<f64> = src.iter().map(|&i| c[i]).collect();
        let demand: Vec<f64> = snk.iter().map(|&j| -c[j]).collect();
        let d: Vec<f64> = src
            .iter()
            .flat_map(|&i| snk.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.dist[i * self.n + j])
            .collect();
        search.run(|a| {
            let cost: Vec<f64> = d.iter().map(|&x| (a * x).min(2.0 * (1.0 - a))).collect();
            transport_cost(&supply, &demand, &cost)
        })
    }
}

/// Minimum cost of moving `supply` onto `demand` (equal totals) with
/// row-major `cost[i * t + j]`, by successive shortest paths with
/// potentials and dense Dijkstra.
fn transport_cost(supply: &[f64], demand: &[f64], cost: &[f64]) -> f64 {
    let s = supply.len();
    let t = demand.len();
    let tiny = 1e-15;
    // node ids: 0 = super source, 1..=s sources, s+1..=s+t sinks, s+t+1 super sink
    let nv = s + t + 2;
    let sink = nv - 1;
    let mut rs = supply.to_vec();
    let mut rd = demand.to_vec();
    let mut flow = vec![0.0; s * t];
    let mut pot = vec![0.0; nv];
    let mut dist = vec![f64::INFINITY; nv];
    let mut prev = vec![usize::MAX; nv];
    let mut done = vec![false; nv];
    let total: f64 = supply.iter().sum();
    let mut moved = 0.0;
    while moved < total * (1.0 - 1e-13) {
        dist.fill(f64::INFINITY);
        prev.fill(usize::MAX);
        done.fill(false);
        dist[0] = 0.0;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..nv {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX || u == sink {
                break;
            }
            done[u] = true;
            let du = dist[u];
            let relax = |v: usize, c: f64, dist: &mut Vec<f64>, prev: &mut Vec<usize>| {
                let nd = du + (c + pot[u] - pot[v]).max(0.0);
                if nd < dist[v] {
                    dist[v] = nd;
                    prev[v] = u;
                }
            };
            if u == 0 {
                for i in 0..s {
                    if rs[i] > tiny {
                        relax(1 + i, 0.0, &mut dist, &mut prev);
                    }
                }
            } else if u <= s {
                let i = u - 1;
                for j in 0..t {
                    relax(1 + s + j, cost[i * t + j], &mut dist, &mut prev);
                }
            } else {
                let j = u - 1 - s;
                for i in 0..s {
                    if flow[i * t + j] > tiny {
                        relax(1 + i, -cost[i * t + j], &mut dist, &mut prev);
                    }
                }
                if rd[j] > tiny {
                    relax(sink, 0.0, &mut dist, &mut prev);
                }
            }
        }
        if !dist[sink].is_finite() {
            break;
        }
        // bottleneck
        let mut amount = f64::INFINITY;
        let mut v = sink;
        while v != 0 {
            let u = prev[v];
            if u == 0 {
                amount = amount.min(rs[v - 1]);
            } else if v == sink {
                amount = amount.min(rd[u - 1 - s]);
            } else if u > s {
                // backward edge sink u -> source v
                amount = amount.min(flow[(v - 1) * t + (u - 1 - s)]);
            }
            v = u;
        }
        let mut v = sink;
        while v != 0 {
            let u = prev[v];
            if u == 0 {
                rs[v - 1] -= amount;
            } else if v == sink {
                rd[u - 1 - s] -= amount;
            } else if u <= s {
                flow[(u - 1) * t + (v - 1 - s)] += amount;
            } else {
                flow[(v - 1) * t + (u - 1 - s)] -= amount;
            }
            v = u;
        }
        moved += amount;
        let dt = dist[sink];
        for v in 0..nv {
            pot[v] += dist[v].min(dt);
        }
    }
    flow.iter().zip(cost).map(|(f, c)| f.max(0.0) * c).sum()
}

fn unit_direction(dim: usize, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// A distance problem with fixed atoms and adjustable weights, so that
/// bootstrap replicates only pay for the solve.
#[derive(Clone, Debug)]
pub struct BlKernel {
    inner: KernelKind,
    alpha_tol: f64,
}

#[derive(Clone, Debug)]
enum KernelKind {
    Chain(ChainKernel),
    Transport(TransportKernel),
    Sliced(Vec<ChainKernel>, SliceReduce),
}

impl BlKernel {
    /// Exact on the line, exact transport when the pooled support fits in
    /// `opts.cap`, sliced otherwise (or when `opts.prefer_sliced`).
    pub fn new(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, opts: &BlOptions) -> Result<Self> {
        if mu.dim() != nu.dim() {
            return Err(Error::domain("measures live in different dimensions"));
        }
        let inner = if mu.dim() == 1 {
            KernelKind::Chain(ChainKernel::new(mu.points(), nu.points()))
        } else if !opts.prefer_sliced && mu.len() + nu.len() <= opts.cap {
            KernelKind::Transport(TransportKernel::new(mu, nu))
        } else {
            Self::sliced_kind(mu, nu, opts)?
        };
        Ok(BlKernel { inner, alpha_tol: opts.alpha_tol })
    }

    fn exact(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, opts: &BlOptions) -> Result<Self> {
        if mu.dim() != nu.dim() {
            return Err(Error::domain("measures live in different dimensions"));
        }
        let inner = if mu.dim() == 1 {
            KernelKind::Chain(ChainKernel::new(mu.points(), nu.points()))
        } else {
            let t = TransportKernel::new(mu, nu);
            if t.n > opts.cap {
                return Err(Error::SupportCap { size: t.n, cap: opts.cap });
            }
            KernelKind::Transport(t)
        };
        Ok(BlKernel { inner, alpha_tol: opts.alpha_tol })
    }

    fn sliced_kind(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, opts: &BlOptions) -> Result<KernelKind> {
        if opts.slices == 0 {
            return Err(Error::domain("need at least one slice"));
        }
        let kernels = (0..opts.slices as u64)
            .into_par_iter()
            .map(|s| {
                let dir = unit_direction(mu.dim(), opts.seed, s);
                ChainKernel::new(mu.project(&dir).points(), nu.project(&dir).points())
            })
            .collect();
        Ok(KernelKind::Sliced(kernels, opts.reduce))
    }

    pub fn method(&self) -> Method {
        match self.inner {
            KernelKind::Chain(_) => Method::Chain1d,
            KernelKind::Transport(_) => Method::ExactLp,
            KernelKind::Sliced(..) => Method::Sliced,
        }
    }

    pub fn bound_kind(&self) -> BoundKind {
        match self.inner {
            KernelKind::Sliced(..) => BoundKind::LowerEstimate,
            _ => BoundKind::Exact,
        }
    }

    /// Distance for the given atom weights.
    pub fn evaluate(&self, mu_w: &[f64], nu_w: &[f64]) -> f64 {
        self.report(mu_w, nu_w).value
    }

    /// Best split per sub-problem (one per slice when sliced), used to
    /// warm-start [`evaluate_near`](Self::evaluate_near).
    pub fn alphas(&self, mu_w: &[f64], nu_w: &[f64]) -> Vec<f64> {
        let full = Search::Full(self.alpha_tol);
        match &self.inner {
            KernelKind::Chain(k) => vec![k.solve(mu_w, nu_w, full).0],
            KernelKind::Transport(k) => vec![k.solve(mu_w, nu_w, full).0],
            KernelKind::Sliced(ks, _) => ks.par_iter().map(|k| k.solve(mu_w, nu_w, full).0).collect(),
        }
    }

    /// Distance for reweighted atoms, searching near known good splits.
    /// Cheaper than [`evaluate`](Self::evaluate) and accurate to the
    /// resolution of a bootstrap.
    pub fn evaluate_near(&self, mu_w: &[f64], nu_w: &[f64], hints: &[f64]) -> f64 {
        let v = match &self.inner {
            KernelKind::Chain(k) => k.solve(mu_w, nu_w, Search::Near(hints[0])).1,
            KernelKind::Transport(k) => k.solve(mu_w, nu_w, Search::Near(hints[0])).1,
            KernelKind::Sliced(ks, reduce) => {
                let vals: Vec<f64> = ks
                    .par_iter()
                    .zip(hints)
                    .map(|(k, &h)| k.solve(mu_w, nu_w, Search::Near(h)).1)
                    .collect();
                match reduce {
                    SliceReduce::Max => vals.into_iter().fold(0.0, f64::max),
                    SliceReduce::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
                }
            }
        };
        v.clamp(0.0, 2.0)
    }

    pub fn report(&self, mu_w: &[f64], nu_w: &[f64]) -> DistanceReport {
        let (value, alpha, n_slices, ci) = match &self.inner {
            KernelKind::Chain(k) => {
                let (a, v) = k.solve(mu_w, nu_w, Search::Full(self.alpha_tol));
                (v, a, None, None)
            }
            KernelKind::Transport(k) => {
                let (a, v) = k.solve(mu_w, nu_w, Search::Full(self.alpha_tol));
                (v, a, None, None)
            }
            KernelKind::Sliced(ks, reduce) => {
                let r: Vec<(f64, f64)> =
                    ks.par_iter().map(|k| k.solve(mu_w, nu_w, Search::Full(self.alpha_tol))).collect();
                if *reduce == SliceReduce::Max {
                    let best = r.iter().copied().fold((0.0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
                    return DistanceReport {
                        value: best.1.clamp(0.0, 2.0),
                        method: Method::Sliced,
                        bound_kind: BoundKind::LowerEstimate,
                        n_slices: Some(r.len()),
                        ci_half_width: None,
                        alpha: best.0,
                    };
                }
                let n = r.len() as f64;
                let mean = r.iter().map(|x| x.1).sum::<f64>() / n;
                let alpha = r.iter().map(|x| x.0).sum::<f64>() / n;
                let var = if r.len() > 1 {
                    r.iter().map(|x| (x.1 - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                (mean, alpha, Some(r.len()), Some(1.96 * (var / n).sqrt()))
            }
        };
        DistanceReport {
            value: value.clamp(0.0, 2.0),
            method: self.method(),
            bound_kind: self.bound_kind(),
            n_slices,
            ci_half_width: ci,
            alpha,
        }
    }
}

/// Exact bounded-Lipschitz distance (pooled support capped at 512 in
/// dimension > 1).
pub fn bl_distance_exact(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<DistanceReport> {
    bl_distance_exact_with(mu, nu, &BlOptions::default())
}

pub fn bl_distance_exact_with(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    opts: &BlOptions,
) -> Result<DistanceReport> {
    let k = BlKernel::exact(mu, nu, opts)?;
    Ok(k.report(mu.weights(), nu.weights()))
}

/// Sliced lower estimate: the largest exact line distance over `n_slices`
/// random projections. In dimension one this is the exact value.
pub fn bl_distance_sliced(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    n_slices: usize,
    seed: u64,
) -> Result<DistanceReport> {
    if mu.dim() != nu.dim() {
        return Err(Error::domain("measures live in different dimensions"));
    }
    if mu.dim() == 1 {
        return bl_distance_exact(mu, nu);
    }
    let opts = BlOptions { slices: n_slices, seed, ..BlOptions::default() };
    let k = BlKernel { inner: BlKernel::sliced_kind(mu, nu, &opts)?, alpha_tol: opts.alpha_tol };
    Ok(k.report(mu.weights(), nu.weights()))
}

/// Exact on the line, otherwise as configured in `opts`.
pub fn bl_distance(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    opts: &BlOptions,
) -> Result<DistanceReport> {
    Ok(BlKernel::new(mu, nu, opts)?.report(mu.weights(), nu.weights()))
}

/// Exact `W_1` on the line: integral of `|F_mu - F_nu|`.
pub fn kantorovich_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim() != 1 || nu.dim() != 1 {
        return Err(Error::domain("Kantorovich distance is implemented on the line only"));
    }
    let mut all: Vec<(f64, f64)> = mu
        .points()
        .iter()
        .zip(mu.weights())
        .map(|(&x, &w)| (x, w))
        .chain(nu.points().iter().zip(nu.weights()).map(|(&x, &w)| (x, -w)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cdf = 0.0;
    let mut total = 0.0;
    for w in all.windows(2) {
        cdf += w[0].1;
        total += cdf.abs() * (w[1].0 - w[0].0);
    }
    Ok(total)
}

/// Bootstrap over path indices.
///
/// Each replicate draws multinomial counts over the `n_paths` paired
/// samples (shared by every law in the family, so common random numbers
/// stay paired) and independent counts over the `n_ref` reference samples,
/// then evaluates `stat`. Returns `(estimate, lo, hi, diff_lo, diff_hi)`
/// per component, where the `diff` interval is for `stat[i] - stat[i+1]`.
#[derive(Clone, Debug, Serialize)]
pub struct BootstrapSummary {
    pub estimate: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// `estimate[i] - estimate[i + 1]`.
    pub diff: Vec<f64>,
    pub diff_lo: Vec<f64>,
    pub diff_hi: Vec<f64>,
    pub replicates: usize,
}

impl BootstrapSummary {
    /// Every consecutive difference has a 95% interval above zero.
    pub fn strictly_decreasing(&self) -> bool {
        self.diff_lo.iter().all(|&x| x > 0.0)
    }
}

fn multinomial_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    let inc = 1.0 / n as f64;
    for _ in 0..n {
        w[rng.random_range(0..n)] += inc;
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = pos.ceil() as usize;
    sorted[i] + (sorted[j] - sorted[i]) * (pos - i as f64)
}

pub fn paired_bootstrap<F>(
    n_paths: usize,
    n_ref: usize,
    replicates: usize,
    seed: u64,
    stat: F,
) -> Result<BootstrapSummary>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64> + Sync,
{
    if n_paths == 0 || n_ref == 0 {
        return Err(Error::domain("bootstrap needs samples"));
    }
    let estimate = stat(&vec![1.0 / n_paths as f64; n_paths], &vec![1.0 / n_ref as f64; n_ref]);
    let m = estimate.len();
    let reps: Vec<Vec<f64>> = (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r);
            let wp = multinomial_weights(&mut rng, n_paths);
            let wr = multinomial_weights(&mut rng, n_ref);
            stat(&wp, &wr)
        })
        .collect();
    let column = |f: &dyn Fn(&[f64]) -> f64| {
        let mut v: Vec<f64> = reps.iter().map(|r| f(r)).collect();
        v.sort_by(f64::total_cmp);
        (percentile(&v, 0.025), percentile(&v, 0.975))
    };
    let mut lo = Vec::with_capacity(m);
    let mut hi = Vec::with_capacity(m);
    for i in 0..m {
        let (a, b) = column(&|r| r[i]);
        lo.push(a);
        hi.push(b);
    }
    let mut diff = Vec::new();
    let mut diff_lo = Vec::new();
    let mut diff_hi = Vec::new();
    for i in 0..m.saturating_sub(1) {
        diff.push(estimate[i] - estimate[i + 1]);
        let (a, b) = column(&|r| r[i] - r[i + 1]);
        diff_lo.push(a);
        diff_hi.push(b);
    }
    Ok(BootstrapSummary { estimate, lo, hi, diff, diff_lo, diff_hi, replicates })
}

#[derive(Clone, Debug, Serialize)]
pub struct CurveRow {
    pub eps: f64,
    pub distance: DistanceReport,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceCurve {
    pub rows: Vec<CurveRow>,
    pub bootstrap: BootstrapSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveOptions {
    pub bl: BlOptions,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for CurveOptions {
    fn default() -> Self {
        CurveOptions { bl: BlOptions::default(), replicates: 200, seed: 0 }
    }
}

fn check_family(laws: &[&EmpiricalMeasure], reference: &EmpiricalMeasure) -> Result<()> {
    let n = laws.first().ok_or_else(|| Error::domain("empty law family"))?.len();
    if laws.iter().any(|l| l.len() != n || l.dim() != reference.dim()) {
        return Err(Error::domain("laws must share sample count and dimension"));
    }
    Ok(())
}

/// Distance from each `law(eps)` to `reference`, with a bootstrap over
/// paired path indices (the laws are assumed to be driven by common noise,
/// path `i` of every law sharing trajectory id `i`).
pub fn convergence_curve(
    laws: &[(f64, EmpiricalMeasure)],
    reference: &EmpiricalMeasure,
    opts: &CurveOptions,
) -> Result<ConvergenceCurve> {
    let refs: Vec<&EmpiricalMeasure> = laws.iter().map(|l| &l.1).collect();
    check_family(&refs, reference)?;
    let kernels = laws
        .iter()
        .map(|(_, l)| BlKernel::new(l, reference, &opts.bl))
        .collect::<Result<Vec<_>>>()?;
    let n = laws[0].1.len();
    let hints: Vec<Vec<f64>> = laws
        .iter()
        .zip(&kernels)
        .map(|((_, l), k)| k.alphas(l.weights(), reference.weights()))
        .collect();
    let boot = paired_bootstrap(n, reference.len(), opts.replicates, opts.seed, |wp, wr| {
        kernels.iter().zip(&hints).map(|(k, h)| k.evaluate_near(wp, wr, h)).collect()
    })?;
    let rows = laws
        .iter()
        .zip(&kernels)
        .enumerate()
        .map(|(i, ((eps, l), k))| CurveRow {
            eps: *eps,
            distance: k.report(l.weights(), reference.weights()),
            ci_lo: boot.lo[i],
            ci_hi: boot.hi[i],
        })
        .collect();
    Ok(ConvergenceCurve { rows, bootstrap: boot })
}

#[derive(Clone, Debug, Serialize)]
pub struct SupRow {
    pub eps: f64,
    pub sup: f64,
    /// Grid index attaining the sup.
    pub argmax: usize,
    pub per_tau: Vec<f64>,
    pub method: Method,
    pub bound_kind: BoundKind,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct UniformCurve {
    pub rows: Vec<SupRow>,
    pub bootstrap: BootstrapSummary,
}

/// `sup_tau |law(eps, tau) - reference(tau)|_BL` on a common `tau` grid.
/// Path indices are paired across `eps` and across `tau`.
pub fn uniform_in_time_sup(
    laws: &[(f64, Vec<EmpiricalMeasure>)],
    reference: &[EmpiricalMeasure],
    opts: &CurveOptions,
) -> Result<UniformCurve> {
    if reference.is_empty() || laws.is_empty() {
        return Err(Error::domain("empty time grid"));
    }
    if laws.iter().any(|(_, g)| g.len() != reference.len()) {
        return Err(Error::domain("time grids of laws and reference differ"));
    }
    let n = laws[0].1[0].len();
    let nr = reference[0].len();
    if reference.iter().any(|r| r.len() != nr) {
        return Err(Error::domain("reference sample counts differ across the grid"));
    }
    for (_, g) in laws {
        let refs: Vec<&EmpiricalMeasure> = g.iter().collect();
        check_family(&refs, &reference[0])?;
        if g[0].len() != n {
            return Err(Error::domain("laws must share sample count"));
        }
    }
    let kernels = laws
        .iter()
        .map(|(_, g)| {
            g.iter()
                .zip(reference)
                .map(|(l, r)| BlKernel::new(l, r, &opts.bl))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let sup_of = |ks: &[BlKernel], wp: &[f64], wr: &[f64]| -> Vec<f64> {
        ks.iter().map(|k| k.evaluate(wp, wr)).collect()
    };
    let uw = vec![1.0 / n as f64; n];
    let urw = vec![1.0 / nr as f64; nr];
    let hints: Vec<Vec<Vec<f64>>> =
        kernels.iter().map(|ks| ks.iter().map(|k| k.alphas(&uw, &urw)).collect()).collect();
    let boot = paired_bootstrap(n, nr, opts.replicates, opts.seed, |wp, wr| {
        kernels
            .iter()
            .zip(&hints)
            .map(|(ks, hs)| {
                ks.iter().zip(hs).map(|(k, h)| k.evaluate_near(wp, wr, h)).fold(0.0, f64::max)
            })
            .collect()
    })?;
    let rows = laws
        .iter()
        .zip(&kernels)
        .enumerate()
        .map(|(i, ((eps, _), ks))| {
            let per_tau = sup_of(ks, &uw, &urw);
            let (argmax, sup) = per_tau
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            SupRow {
                eps: *eps,
                sup,
                argmax,
                per_tau,
                method: ks[0].method(),
                bound_kind: ks[0].bound_kind(),
                ci_lo: boot.lo[i],
                ci_hi: boot.hi[i],
            }
        })
        .collect();
    Ok(UniformCurve { rows, bootstrap: boot })
}
