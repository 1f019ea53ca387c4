//! Linear quantile regression by exact vertex descent.
//!
//! The weighted check-loss objective `Σ wᵢ ρ_τ(yᵢ − xᵢᵀb)` is convex and
//! piecewise linear, and some minimizer interpolates `p` observations (a
//! vertex). The solver keeps such a basis of `p` interpolated rows together
//! with the inverse of their design block. At each step it computes the
//! directional derivative along every edge that releases one basis row, takes
//! the steepest descending edge, and performs an exact weighted-median line
//! search over the breakpoints along that edge (Barrodale–Roberts style).
//! Optimality is certified when no edge descends. The inverse is updated by
//! rank-one pivots and refactored periodically.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use nalgebra::DMatrix;

use crate::error::{AlqrError, Result};
use crate::linalg::{dot, weighted_least_squares, Design};
use crate::model::validate_tau;

/// Check loss `ρ_τ(u) = u·(τ − I(u ≤ 0))`.
#[inline]
pub fn check_loss(u: f64, tau: f64) -> f64 {
    u * (tau - if u <= 0.0 { 1.0 } else { 0.0 })
}

/// Weighted mean check loss of residuals.
pub fn mean_check_loss(residuals: &[f64], tau: f64, weights: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (r, w) in residuals.iter().zip(weights) {
        num += w * check_loss(*r, tau);
        den += w;
    }
    num / den
}

#[derive(Debug, Clone, PartialEq)]
pub struct QrSolution {
    pub coefficients: Vec<f64>,
    /// Attained weighted mean check loss.
    pub objective: f64,
    /// Rows interpolated at the returned vertex.
    pub basis: Vec<usize>,
    pub iterations: usize,
}

const REFACTOR_EVERY: usize = 64;

/// Minimizes `Σ wᵢ ρ_τ(yᵢ − xᵢᵀb) / Σ wᵢ` exactly.
///
/// Rows with zero weight are ignored. At flat optima the solver walks to a
/// vertex from which no optimal edge is lexicographically decreasing, so the
/// reported coefficients are the smallest minimizer reachable along optimal
/// edges (for an intercept-only model: the lower order statistic).
pub fn fit_parametric_qr(x: &Design, y: &[f64], tau: f64, weights: &[f64]) -> Result<QrSolution> {
    Simplex::new(x, y, tau, weights, None)?.run()
}

/// As [`fit_parametric_qr`], starting from the rows in `hint` (a previous
/// optimal basis) where they are linearly independent.
pub fn fit_parametric_qr_warm(x: &Design, y: &[f64], tau: f64, weights: &[f64], hint: &[usize]) -> Result<QrSolution> {
    Simplex::new(x, y, tau, weights, Some(hint))?.run()
}

/// A breakpoint of the line search, ordered by step then row.
struct Breakpoint {
    t: f64,
    i: usize,
    inc: f64,
}

impl PartialEq for Breakpoint {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Breakpoint {}

impl PartialOrd for Breakpoint {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Breakpoint {
    fn cmp(&self, other: &Self) -> Ordering {
        self.t.total_cmp(&other.t).then(self.i.cmp(&other.i))
    }
}

struct Simplex<'a> {
    x: &'a Design,
    y: &'a [f64],
    w: &'a [f64],
    tau: f64,
    p: usize,
    active: Vec<usize>,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    /// Column-major inverse of the basis block: column `k` is `binv[k*p..(k+1)*p]`.
    binv: Vec<f64>,
    b: Vec<f64>,
    r: Vec<f64>,
    /// Per row: 2 basis, 1 positive residual, -1 negative, 0 degenerate.
    class: Vec<i8>,
    /// `Σ wᵢ ψ(rᵢ) xᵢ` over non-basic, non-degenerate rows, kept in step
    /// with `class`.
    grad: Vec<f64>,
    zero_tol: f64,
    /// Σ wᵢ|xᵢ| per column, used to scale derivative tolerances.
    abs_weighted_x: Vec<f64>,
    iterations: usize,
    max_iter: usize,
}

impl<'a> Simplex<'a> {
    fn new(x: &'a Design, y: &'a [f64], tau: f64, w: &'a [f64], hint: Option<&[usize]>) -> Result<Self> {
        validate_tau(tau)?;
        let n = x.nrows();
        let p = x.ncols();
        if y.len() != n || w.len() != n {
            return Err(AlqrError::LengthMismatch("design, outcome and weights disagree".into()));
        }
        if p == 0 {
            return Err(AlqrError::InvalidConfig("quantile regression needs at least one column".into()));
        }
        let active: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
        if active.len() < p {
            return Err(AlqrError::RankDeficient);
        }
        let yscale = active.iter().fold(1.0f64, |m, &i| m.max(y[i].abs()));
        let mut abs_weighted_x = vec![0.0; p];
        for &i in &active {
            for (k, v) in x.row(i).iter().enumerate() {
                abs_weighted_x[k] += w[i] * v.abs();
            }
        }
        let mut s = Simplex {
            x,
            y,
            w,
            tau,
            p,
            active,
            basis: Vec::new(),
            in_basis: vec![false; n],
            binv: vec![0.0; p * p],
            b: vec![0.0; p],
            r: vec![0.0; n],
            class: vec![0; n],
            grad: vec![0.0; p],
            zero_tol: 1e-11 * yscale,
            abs_weighted_x,
            iterations: 0,
            max_iter: 50 * (n + p) + 1000,
        };
        s.basis = s.initial_basis(hint)?;
        for &i in &s.basis {
            s.in_basis[i] = true;
        }
        s.refactor()?;
        Ok(s)
    }

    /// Greedily collects `p` independent rows: hinted rows first, then rows
    /// ordered by their absolute least-squares residual.
    fn initial_basis(&self, hint: Option<&[usize]>) -> Result<Vec<usize>> {
        let p = self.p;
        let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(p);
        let mut chosen = Vec::with_capacity(p);
        let mut taken = vec![false; self.x.nrows()];
        let try_row = |i: usize, ortho: &mut Vec<Vec<f64>>, chosen: &mut Vec<usize>, taken: &mut Vec<bool>| {
            if taken[i] || self.w[i] <= 0.0 {
                return;
            }
            let row = self.x.row(i);
            let norm0 = dot(row, row).sqrt();
            if norm0 == 0.0 {
                return;
            }
            let mut v = row.to_vec();
            for _ in 0..2 {
                for q in ortho.iter() {
                    let c = dot(q, &v);
                    for (vk, qk) in v.iter_mut().zip(q) {
                        *vk -= c * qk;
                    }
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-9 * norm0 {
                for vk in v.iter_mut() {
                    *vk /= norm;
                }
                ortho.push(v);
                chosen.push(i);
                taken[i] = true;
            }
        };
        if let Some(h) = hint {
            for &i in h {
                if i < self.x.nrows() && chosen.len() < p {
                    try_row(i, &mut ortho, &mut chosen, &mut taken);
                }
            }
        }
        if chosen.len() < p {
            let coef = weighted_least_squares(self.x, self.y, self.w).map_err(|_| AlqrError::RankDeficient)?;
            let mut order: Vec<(f64, usize)> =
                self.active.iter().map(|&i| ((self.y[i] - dot(self.x.row(i), &coef)).abs(), i)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (_, i) in order {
                if chosen.len() == p {
                    break;
                }
                try_row(i, &mut ortho, &mut chosen, &mut taken);
            }
        }
        if chosen.len() < p {
            return Err(AlqrError::RankDeficient);
        }
        Ok(chosen)
    }

    /// Recomputes the basis inverse, coefficients and residuals from scratch.
    fn refactor(&mut self) -> Result<()> {
        let p = self.p;
        let xh = DMatrix::from_fn(p, p, |r, c| self.x.get(self.basis[r], c));
        let inv = xh.try_inverse().ok_or(AlqrError::RankDeficient)?;
        for k in 0..p {
            for r in 0..p {
                self.binv[k * p + r] = inv[(r, k)];
            }
        }
        for k in 0..p {
            let mut s = 0.0;
            for m in 0..p {
                s += inv[(k, m)] * self.y[self.basis[m]];
            }
            self.b[k] = s;
        }
        for &i in &self.active {
            self.r[i] = self.y[i] - dot(self.x.row(i), &self.b);
        }
        for &i in &self.basis {
            self.r[i] = 0.0;
        }
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        for k in 0..self.active.len() {
            let i = self.active[k];
            let c = self.classify(i);
            self.class[i] = c;
            self.add_contribution(i, c, 1.0);
        }
        Ok(())
    }

    #[inline]
    fn classify(&self, i: usize) -> i8 {
        if self.in_basis[i] {
            2
        } else if self.r[i].abs() <= self.zero_tol {
            0
        } else if self.r[i] > 0.0 {
            1
        } else {
            -1
        }
    }

    #[inline]
    fn add_contribution(&mut self, i: usize, class: i8, sign: f64) {
        let psi = match class {
            1 => self.tau,
            -1 => self.tau - 1.0,
            _ => return,
        };
        let f = sign * self.w[i] * psi;
        for (g, xk) in self.grad.iter_mut().zip(self.x.row(i)) {
            *g += f * xk;
        }
    }

    #[inline]
    fn col(&self, k: usize) -> &[f64] {
        &self.binv[k * self.p..(k + 1) * self.p]
    }

    /// Directional derivatives `(g⁺, g⁻)` for releasing each basis row, plus
    /// the tolerance under which a derivative counts as zero.
    fn derivatives(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let p = self.p;
        let tau = self.tau;
        let v = &self.grad;
        let degenerate: Vec<usize> = self.active.iter().copied().filter(|&i| self.class[i] == 0).collect();
        let mut gp = vec![0.0; p];
        let mut gm = vec![0.0; p];
        let mut tol = vec![0.0; p];
        for j in 0..p {
            let cj = self.col(j);
            let z = dot(cj, v);
            let wh = self.w[self.basis[j]];
            gp[j] = -z + (1.0 - tau) * wh;
            gm[j] = z + tau * wh;
            let scale: f64 = cj.iter().zip(&self.abs_weighted_x).map(|(a, b)| a.abs() * b).sum::<f64>() + wh;
            tol[j] = 1e-10 * scale;
        }
        for &i in &degenerate {
            let xi = self.x.row(i);
            let wi = self.w[i];
            for j in 0..p {
                let c = dot(xi, self.col(j));
                if c > 0.0 {
                    gp[j] += wi * (1.0 - tau) * c;
                    gm[j] += wi * tau * c;
                } else {
                    gp[j] -= wi * tau * c;
                    gm[j] -= wi * (1.0 - tau) * c;
                }
            }
        }
        (gp, gm, tol)
    }

    /// Exact line search along `d = s·binv[:, j]` starting with slope `g0`.
    /// Returns the step and the entering row.
    fn line_search(&self, j: usize, s: f64, g0: f64) -> Option<(f64, usize, Vec<f64>)> {
        let d: Vec<f64> = self.col(j).iter().map(|v| s * v).collect();
        let mut c = vec![0.0; self.x.nrows()];
        let mut bps: Vec<(f64, usize, f64)> = Vec::new();
        for &i in &self.active {
            let ci = dot(self.x.row(i), &d);
            c[i] = ci;
            if self.in_basis[i] || ci == 0.0 {
                continue;
            }
            let ri = self.r[i];
            if ri.abs() <= self.zero_tol {
                continue;
            }
            let t = ri / ci;
            if t > 0.0 {
                bps.push((t, i, self.w[i] * ci.abs()));
            }
        }
        let slope_tol = 1e-12 * (g0.abs() + bps.iter().map(|b| b.2).sum::<f64>());
        // Only a short prefix of the sorted breakpoints is usually visited.
        let mut heap: BinaryHeap<Reverse<Breakpoint>> =
            bps.into_iter().map(|(t, i, inc)| Reverse(Breakpoint { t, i, inc })).collect();
        let mut slope = g0;
        while let Some(Reverse(bp)) = heap.pop() {
            slope += bp.inc;
            if slope >= -slope_tol {
                return Some((bp.t, bp.i, c));
            }
        }
        None
    }

    /// Moves to the adjacent vertex where row `enter` replaces basis slot `j`.
    fn pivot(&mut self, j: usize, s: f64, t: f64, enter: usize, c: &[f64]) -> Result<()> {
        let p = self.p;
        let leave = self.basis[j];
        for k in 0..p {
            self.b[k] += t * s * self.binv[j * p + k];
        }
        for &i in &self.active {
            self.r[i] -= t * c[i];
        }
        self.r[enter] = 0.0;
        self.r[leave] = -t * s;
        for &h in &self.basis {
            if h != leave {
                self.r[h] = 0.0;
            }
        }
        let xe = self.x.row(enter).to_vec();
        let u: Vec<f64> = self.col(j).to_vec();
        let denom = dot(&xe, &u);
        if denom.abs() < 1e-300 {
            return Err(AlqrError::RankDeficient);
        }
        for k in 0..p {
            if k == j {
                continue;
            }
            let f = dot(&xe, self.col(k)) / denom;
            for r in 0..p {
                self.binv[k * p + r] -= f * u[r];
            }
        }
        for r in 0..p {
            self.binv[j * p + r] = u[r] / denom;
        }
        self.basis[j] = enter;
        self.in_basis[leave] = false;
        self.in_basis[enter] = true;
        for k in 0..self.active.len() {
            let i = self.active[k];
            let new = self.classify(i);
            let old = self.class[i];
            if new != old {
                self.add_contribution(i, old, -1.0);
                self.add_contribution(i, new, 1.0);
                self.class[i] = new;
            }
        }
        self.iterations += 1;
        if self.iterations.is_multiple_of(REFACTOR_EVERY) {
            self.refactor()?;
        }
        Ok(())
    }

    fn run(mut self) -> Result<QrSolution> {
        // Descent phase.
        loop {
            if self.iterations >= self.max_iter {
                return Err(AlqrError::NotConverged { iterations: self.iterations });
            }
            let (gp, gm, tol) = self.derivatives();
            // Steepest edge: rank descending edges by slope per unit length
            // of the coefficient step.
            let mut best: Option<(f64, usize, f64, f64)> = None;
            for j in 0..self.p {
                let norm = dot(self.col(j), self.col(j)).sqrt();
                for (g, s) in [(gp[j], 1.0), (gm[j], -1.0)] {
                    let rate = g / norm;
                    if g < -tol[j] && best.is_none_or(|(br, _, _, _)| rate < br) {
                        best = Some((rate, j, s, g));
                    }
                }
            }
            let Some((_, j, s, g)) = best else { break };
            match self.line_search(j, s, g) {
                Some((t, enter, c)) => self.pivot(j, s, t, enter, &c)?,
                None => return Err(AlqrError::NotConverged { iterations: self.iterations }),
            }
        }
        // Flat-optimum walk towards the lexicographically smallest vertex.
        let mut flat_moves = 0;
        'walk: while flat_moves < 10 * self.p + 10 {
            let (gp, gm, tol) = self.derivatives();
            for j in 0..self.p {
                for (g, s) in [(gp[j], 1.0), (gm[j], -1.0)] {
                    if g.abs() > tol[j] || !lex_negative(self.col(j), s) {
                        continue;
                    }
                    if let Some((t, enter, c)) = self.line_search(j, s, 0.0) {
                        self.pivot(j, s, t, enter, &c)?;
                        flat_moves += 1;
                        continue 'walk;
                    }
                }
            }
            break;
        }
        self.refactor()?;
        let mut num = 0.0;
        let mut den = 0.0;
        for &i in &self.active {
            num += self.w[i] * check_loss(self.r[i], self.tau);
            den += self.w[i];
        }
        Ok(QrSolution { coefficients: self.b, objective: num / den, basis: self.basis, iterations: self.iterations })
    }
}

/// Whether `s·col` points in a lexicographically decreasing direction.
fn lex_negative(col: &[f64], s: f64) -> bool {
    let scale = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for v in col {
        if v.abs() > 1e-12 * scale {
            return s * v < 0.0;
        }
    }
    false
}

/// Sandwich standard errors for all coefficients of a quantile regression,
/// `τ(1−τ)/f² · (XᵀWX)⁻¹ XᵀW²X (XᵀWX)⁻¹`, with `f` the residual density at 0.
pub fn qr_sandwich_se(x: &Design, weights: &[f64], tau: f64, density: f64) -> Result<Vec<f64>> {
    let p = x.ncols();
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut bm = DMatrix::<f64>::zeros(p, p);
    for i in 0..x.nrows() {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let r = x.row(i);
        for j in 0..p {
            for k in 0..p {
                a[(j, k)] += w * r[j] * r[k];
                bm[(j, k)] += w * w * r[j] * r[k];
            }
        }
    }
    let ainv = a.try_inverse().ok_or(AlqrError::RankDeficient)?;
    let v = &ainv * bm * &ainv * (tau * (1.0 - tau) / (density * density));
    Ok((0..p).map(|j| v[(j, j)].max(0.0).sqrt()).collect())
}
