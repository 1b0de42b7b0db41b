//! Offset quantile (pinball) regression.
//!
//! A smoothed IRLS pass finds a good starting point, a simplex-type descent
//! over vertices (sets of `m` interpolated rows) then reaches an exact
//! minimizer, and a subgradient pass verifies optimality. The quantile level
//! is nudged down by [`QuantileSolverConfig::left_shift`] during the descent
//! so that, when the minimizer is not unique, the vertex at the low end is
//! returned (the left endpoint for an intercept-only fit).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::basis::DesignMatrix;
use super::least_squares::{dot, OffsetFit};
use crate::error::{Error, Result};
use crate::loss::LossSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantileSolverConfig {
    pub irls_iters: usize,
    /// Cap on vertex pivots; 0 means `20 (n + m)`.
    pub max_pivots: usize,
    /// Accepted subgradient gap per row.
    pub tolerance_per_row: f64,
    pub left_shift: f64,
}

impl Default for QuantileSolverConfig {
    fn default() -> Self {
        Self {
            irls_iters: 40,
            max_pivots: 0,
            tolerance_per_row: 1e-6,
            left_shift: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct QuantileSolution {
    pub beta: Vec<f64>,
    pub basis: Vec<usize>,
    pub gap: f64,
    pub iterations: usize,
}

/// Row-major copy of a design plus targets, with room to overwrite the last
/// target when used for augmented problems.
#[derive(Debug, Clone)]
pub(crate) struct QuantileLp {
    m: usize,
    rows: Vec<f64>,
    z: Vec<f64>,
}

impl QuantileLp {
    pub fn new(design: &DesignMatrix, targets: &[f64]) -> Result<Self> {
        if targets.len() != design.nrows() {
            return Err(Error::invalid(format!(
                "{} targets for {} design rows",
                targets.len(),
                design.nrows()
            )));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("non-finite quantile target"));
        }
        let m = design.ncols();
        let mut rows = Vec::with_capacity(design.nrows() * m);
        for i in 0..design.nrows() {
            rows.extend(design.values().row(i).iter());
        }
        Ok(Self {
            m,
            rows,
            z: targets.to_vec(),
        })
    }

    /// Append a row whose target is set later with [`QuantileLp::set_last`].
    pub fn with_extra_row(mut self, phi: &[f64]) -> Result<Self> {
        if phi.len() != self.m || phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "augmenting row has the wrong dimension or is non-finite",
            ));
        }
        self.rows.extend_from_slice(phi);
        self.z.push(0.0);
        Ok(self)
    }

    pub fn set_last(&mut self, target: f64) {
        let n = self.z.len();
        self.z[n - 1] = target;
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.m..(i + 1) * self.m]
    }

    fn scale(&self) -> f64 {
        1.0 + self.z.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    fn residuals(&self, z: &[f64], beta: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|i| z[i] - dot(self.row(i), beta))
            .collect()
    }

    pub fn objective(&self, beta: &[f64], alpha: f64) -> f64 {
        let tau = 1.0 - alpha;
        self.residuals(&self.z, beta)
            .iter()
            .map(|&r| if r >= 0.0 { tau * r } else { (tau - 1.0) * r })
            .sum()
    }

    pub fn solve(
        &self,
        alpha: f64,
        cfg: &QuantileSolverConfig,
        warm: Option<&[usize]>,
    ) -> Result<QuantileSolution> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!(
                "alpha must lie in (0, 1), got {alpha}"
            )));
        }
        let n = self.n();
        if n < self.m {
            return Err(Error::domain(format!(
                "{n} rows cannot determine {} coefficients",
                self.m
            )));
        }
        let tau = 1.0 - alpha;
        let tau_shifted = (tau - cfg.left_shift).max(0.5 * tau);
        let max_pivots = if cfg.max_pivots == 0 {
            20 * (n + self.m)
        } else {
            cfg.max_pivots
        };
        let tolerance = cfg.tolerance_per_row * n as f64;

        let mut iterations = 0;
        let start = match warm.filter(|b| self.valid_basis(b)) {
            Some(b) => b.to_vec(),
            None => {
                let beta0 = self.irls(tau, cfg.irls_iters);
                iterations += cfg.irls_iters;
                self.greedy_basis(&self.residuals(&self.z, &beta0))?
            }
        };
        let (basis, pivots) = self.descend(&self.z, tau_shifted, start, max_pivots)?;
        iterations += pivots;
        let beta = self.vertex(&self.z, &basis)?;
        let zero_tol = 1e-12 * self.scale();
        let gap = self.certify(&beta, tau, zero_tol, &basis)?;
        if gap <= tolerance {
            return Ok(QuantileSolution {
                beta,
                basis,
                gap,
                iterations,
            });
        }

        // degenerate vertex: break ties in the targets, descend, then return
        // to the original targets from the tie-broken basis
        let eps = 1e-7 * self.scale();
        let z_pert: Vec<f64> = self
            .z
            .iter()
            .enumerate()
            .map(|(i, v)| v + eps * ((i * 7919 % n) as f64 + 1.0) / n as f64)
            .collect();
        let (basis, more) = self.descend(&z_pert, tau_shifted, basis, max_pivots)?;
        iterations += more;
        let (basis, more) = self.descend(&self.z, tau_shifted, basis, max_pivots)?;
        iterations += more;
        let beta = self.vertex(&self.z, &basis)?;
        let gap = self.certify(&beta, tau, zero_tol, &basis)?;
        if gap <= tolerance {
            Ok(QuantileSolution {
                beta,
                basis,
                gap,
                iterations,
            })
        } else {
            Err(Error::NonConvergence { iterations, gap })
        }
    }

    /// Residuals below this are zero: an absolute floor plus rounding
    /// relative to the row's terms.
    fn row_zero_tol(&self, i: usize, beta: &[f64], floor: f64) -> f64 {
        let magnitude: f64 = self
            .row(i)
            .iter()
            .zip(beta)
            .map(|(p, b)| (p * b).abs())
            .sum();
        floor + 1e-13 * (self.z[i].abs() + magnitude)
    }

    /// Sup-norm stationarity violation at the vertex of `basis`, with the
    /// best multipliers in `[tau - 1, tau]` for the zero-residual rows.
    /// Exact when at most one row off the basis has a zero residual.
    fn certify(&self, beta: &[f64], tau: f64, zero_tol: f64, basis: &[usize]) -> Result<f64> {
        let m = self.m;
        let (lo, hi) = (tau - 1.0, tau);
        let mut in_basis = vec![false; self.n()];
        basis.iter().for_each(|&i| in_basis[i] = true);
        let r = self.residuals(&self.z, beta);
        let mut c = DVector::<f64>::zeros(m);
        let mut extra = Vec::new();
        for (i, &ri) in r.iter().enumerate() {
            if in_basis[i] {
                continue;
            }
            if ri.abs() <= self.row_zero_tol(i, beta, zero_tol) {
                extra.push(i);
                continue;
            }
            let a = if ri > 0.0 { tau } else { tau - 1.0 };
            for (cj, pj) in c.iter_mut().zip(self.row(i)) {
                *cj += a * pj;
            }
        }
        if extra.len() > 1 {
            return Ok(self.vertex_gap(beta, tau, zero_tol, basis));
        }
        let bt_lu = self.basis_matrix(basis).transpose().lu();
        let solve = |v: &DVector<f64>| {
            bt_lu
                .solve(v)
                .ok_or_else(|| Error::domain("singular vertex basis"))
        };
        // basis multipliers: a_B = a0 - g t for the extra row's multiplier t
        let a0 = solve(&(-&c))?;
        let (g, t) = match extra.first() {
            None => (DVector::zeros(m), 0.0),
            Some(&e) => {
                let phi = DVector::from_column_slice(self.row(e));
                let g = solve(&phi)?;
                let (mut t_lo, mut t_hi) = (lo, hi);
                for j in 0..m {
                    if g[j].abs() <= 1e-300 {
                        continue;
                    }
                    let (u, v) = ((a0[j] - hi) / g[j], (a0[j] - lo) / g[j]);
                    t_lo = t_lo.max(u.min(v));
                    t_hi = t_hi.min(u.max(v));
                }
                let t = if t_lo <= t_hi {
                    0.5 * (t_lo + t_hi)
                } else {
                    // infeasible: take the least violating end
                    let viol = |t: f64| {
                        (0..m)
                            .map(|j| {
                                let a = a0[j] - g[j] * t;
                                (lo - a).max(a - hi).max(0.0)
                            })
                            .fold(0.0, f64::max)
                    };
                    if viol(t_lo.clamp(lo, hi)) <= viol(t_hi.clamp(lo, hi)) {
                        t_lo.clamp(lo, hi)
                    } else {
                        t_hi.clamp(lo, hi)
                    }
                };
                if let Some(&e) = extra.first() {
                    for (cj, pj) in c.iter_mut().zip(self.row(e)) {
                        *cj += t * pj;
                    }
                }
                (g, t)
            }
        };
        let a = (a0 - g * t).map(|v| v.clamp(lo, hi));
        Ok((c + self.basis_matrix(basis).transpose() * a).amax())
    }

    fn valid_basis(&self, b: &[usize]) -> bool {
        if b.len() != self.m || b.iter().any(|&i| i >= self.n()) {
            return false;
        }
        let mut s = b.to_vec();
        s.sort_unstable();
        s.dedup();
        s.len() == self.m && self.basis_matrix(b).lu().try_inverse().is_some()
    }

    fn basis_matrix(&self, basis: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.m, |k, j| self.row(basis[k])[j])
    }

    fn vertex(&self, z: &[f64], basis: &[usize]) -> Result<Vec<f64>> {
        let zb = DVector::from_fn(self.m, |k, _| z[basis[k]]);
        self.basis_matrix(basis)
            .lu()
            .solve(&zb)
            .map(|b| b.iter().copied().collect())
            .ok_or_else(|| Error::domain("singular vertex basis"))
    }

    /// Majorize-minimize on `rho(r) <= r^2 / (4 |r_k|) + (tau - 1/2) r`.
    fn irls(&self, tau: f64, iters: usize) -> Vec<f64> {
        let m = self.m;
        let n = self.n();
        let floor = 1e-8 * self.scale();
        let mut beta = vec![0.0; m];
        let mut eps = f64::INFINITY;
        for it in 0..=iters {
            let r = self.residuals(&self.z, &beta);
            if it == 0 {
                eps = (r.iter().map(|v| v.abs()).sum::<f64>() / n as f64).max(floor);
            }
            let mut a = DMatrix::<f64>::zeros(m, m);
            let mut b = DVector::<f64>::zeros(m);
            for (i, ri) in r.iter().enumerate() {
                let w = if it == 0 { 1.0 } else { 1.0 / (eps + ri.abs()) };
                let phi = self.row(i);
                for j in 0..m {
                    b[j] += w * self.z[i] * phi[j];
                    if it > 0 {
                        b[j] += (2.0 * tau - 1.0) * phi[j];
                    }
                    for k in 0..=j {
                        a[(j, k)] += w * phi[j] * phi[k];
                    }
                }
            }
            let trace: f64 = (0..m).map(|j| a[(j, j)]).sum();
            for j in 0..m {
                a[(j, j)] += 1e-12 * trace.max(1.0);
                for k in 0..j {
                    a[(k, j)] = a[(j, k)];
                }
            }
            match a.cholesky() {
                Some(c) => beta = c.solve(&b).iter().copied().collect(),
                None => break,
            }
            if it > 0 {
                eps = (eps * 0.5).max(floor);
            }
        }
        beta
    }

    /// `m` rows with the smallest absolute residuals that are linearly
    /// independent.
    fn greedy_basis(&self, r: &[f64]) -> Result<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.n()).collect();
        order.sort_by(|&a, &b| r[a].abs().total_cmp(&r[b].abs()).then(a.cmp(&b)));
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(self.m);
        let mut basis = Vec::with_capacity(self.m);
        for i in order {
            let phi = self.row(i);
            let norm0 = dot(phi, phi).sqrt();
            if norm0 == 0.0 {
                continue;
            }
            let mut v = phi.to_vec();
            for _ in 0..2 {
                for qk in &q {
                    let c = dot(qk, &v);
                    for (vj, qj) in v.iter_mut().zip(qk) {
                        *vj -= c * qj;
                    }
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-8 * norm0 {
                v.iter_mut().for_each(|x| *x /= norm);
                q.push(v);
                basis.push(i);
                if basis.len() == self.m {
                    return Ok(basis);
                }
            }
        }
        Err(Error::domain(
            "design is rank deficient; quantile offset is not identifiable",
        ))
    }

    /// Vertex-to-vertex descent with exact line search along edges.
    fn descend(
        &self,
        z: &[f64],
        tau: f64,
        mut basis: Vec<usize>,
        max_pivots: usize,
    ) -> Result<(Vec<usize>, usize)> {
        let n = self.n();
        let m = self.m;
        let phi_max = self.rows.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let opt_tol = 1e-12 * n as f64 * phi_max.max(1.0);
        let zero_tol = 1e-12 * (1.0 + z.iter().fold(0.0_f64, |a, v| a.max(v.abs())));
        let mut in_basis = vec![false; n];
        for pivots in 0..=max_pivots {
            in_basis.iter_mut().for_each(|b| *b = false);
            basis.iter().for_each(|&i| in_basis[i] = true);
            let minv = self
                .basis_matrix(&basis)
                .lu()
                .try_inverse()
                .ok_or_else(|| Error::domain("singular vertex basis"))?;
            let zb = DVector::from_fn(m, |k, _| z[basis[k]]);
            let beta: Vec<f64> = (&minv * zb).iter().copied().collect();
            let mut r = self.residuals(z, &beta);
            for (i, ri) in r.iter_mut().enumerate() {
                let magnitude: f64 = self
                    .row(i)
                    .iter()
                    .zip(&beta)
                    .map(|(p, b)| (p * b).abs())
                    .sum();
                if in_basis[i] || ri.abs() <= zero_tol + 1e-13 * (z[i].abs() + magnitude) {
                    *ri = 0.0;
                }
            }

            let mut c = DVector::<f64>::zeros(m);
            let mut zeros = Vec::new();
            for i in 0..n {
                if in_basis[i] {
                    continue;
                }
                let w = if r[i] > 0.0 {
                    -tau
                } else if r[i] < 0.0 {
                    1.0 - tau
                } else {
                    zeros.push(i);
                    continue;
                };
                for (cj, pj) in c.iter_mut().zip(self.row(i)) {
                    *cj += w * pj;
                }
            }
            let h = minv.tr_mul(&c);
            let mut zp = vec![0.0; m];
            let mut zm = vec![0.0; m];
            for &i in &zeros {
                let w = minv.tr_mul(&DVector::from_column_slice(self.row(i)));
                for j in 0..m {
                    zp[j] += (-tau * w[j]).max((1.0 - tau) * w[j]);
                    zm[j] += (tau * w[j]).max(-(1.0 - tau) * w[j]);
                }
            }
            let mut best = (0.0, 0usize, 1.0);
            for j in 0..m {
                let up = h[j] + (1.0 - tau) + zp[j];
                let down = -h[j] + tau + zm[j];
                if up < best.0 {
                    best = (up, j, 1.0);
                }
                if down < best.0 {
                    best = (down, j, -1.0);
                }
            }
            let (slope0, leave, sigma) = best;
            if slope0 >= -opt_tol {
                return Ok((basis, pivots));
            }
            let d: Vec<f64> = minv.column(leave).iter().map(|v| sigma * v).collect();
            let mut breaks: Vec<(f64, usize, f64)> = Vec::new();
            for i in 0..n {
                if in_basis[i] || r[i] == 0.0 {
                    continue;
                }
                let g = dot(self.row(i), &d);
                if g != 0.0 && (r[i] > 0.0) == (g > 0.0) {
                    breaks.push((r[i] / g, i, g.abs()));
                }
            }
            breaks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut slope = slope0;
            let mut enter = None;
            for &(_, i, g) in &breaks {
                slope += g;
                if slope >= 0.0 {
                    enter = Some(i);
                    break;
                }
            }
            match enter {
                Some(i) => basis[leave] = i,
                None => {
                    return Err(Error::domain(
                        "quantile objective is unbounded along an edge; design is rank deficient",
                    ))
                }
            }
        }
        Err(Error::NonConvergence {
            iterations: max_pivots,
            gap: f64::NAN,
        })
    }

    /// Sup-norm distance from zero to the subdifferential of the pinball
    /// objective at `beta`: zero-residual rows (those in `interpolated`, or
    /// within rounding of zero) contribute any multiplier in
    /// `[tau - 1, tau]`, chosen by bounded least squares.
    fn vertex_gap(&self, beta: &[f64], tau: f64, zero_tol: f64, interpolated: &[usize]) -> f64 {
        let m = self.m;
        let r = self.residuals(&self.z, beta);
        let mut c = DVector::<f64>::zeros(m);
        let mut zeros = Vec::new();
        for (i, &ri) in r.iter().enumerate() {
            if interpolated.contains(&i) || ri.abs() <= self.row_zero_tol(i, beta, zero_tol) {
                zeros.push(i);
                continue;
            }
            let a = if ri > 0.0 { tau } else { tau - 1.0 };
            for (cj, pj) in c.iter_mut().zip(self.row(i)) {
                *cj += a * pj;
            }
        }
        if zeros.is_empty() {
            return c.amax();
        }
        let k = zeros.len();
        let pz = DMatrix::from_fn(m, k, |j, l| self.row(zeros[l])[j]);
        let (lo, hi) = (tau - 1.0, tau);
        let mut a: Vec<f64> = match pz.clone().svd(true, true).solve(&(-&c), 1e-12) {
            Ok(sol) => sol.iter().map(|v| v.clamp(lo, hi)).collect(),
            Err(_) => vec![tau - 0.5; k],
        };
        let mut resid = &c + &pz * DVector::from_column_slice(&a);
        let norms: Vec<f64> = (0..k).map(|l| pz.column(l).norm_squared()).collect();
        for _ in 0..200 {
            if resid.amax() <= 1e-14 {
                break;
            }
            for l in 0..k {
                if norms[l] == 0.0 {
                    continue;
                }
                let col = pz.column(l);
                let step = -col.dot(&resid) / norms[l];
                let new = (a[l] + step).clamp(lo, hi);
                let delta = new - a[l];
                if delta != 0.0 {
                    resid += col * delta;
                    a[l] = new;
                }
            }
        }
        resid.amax()
    }
}

/// Minimize `sum_i pinball_{1-alpha}(phi_i^T beta, z_i)`, where `z_i` are the
/// offset-form targets (score or outcome minus the model prediction).
pub fn fit_offset_quantile(
    targets: &[f64],
    design: &DesignMatrix,
    alpha: f64,
    cfg: &QuantileSolverConfig,
) -> Result<OffsetFit> {
    let lp = QuantileLp::new(design, targets)?;
    let sol = lp.solve(alpha, cfg, None)?;
    Ok(OffsetFit {
        beta: sol.beta,
        loss: LossSpec::Pinball { alpha },
        optimality_gap: sol.gap,
        ridge: 0.0,
        iterations: sol.iterations,
        normal_rhs: Vec::new(),
    })
}

/// Pinball objective of `beta` on the offset-form problem.
pub fn quantile_objective(
    targets: &[f64],
    design: &DesignMatrix,
    alpha: f64,
    beta: &[f64],
) -> Result<f64> {
    Ok(QuantileLp::new(design, targets)?.objective(beta, alpha))
}
