//! The convex compact parameter domain and projection in a weighted norm.
//!
//! `q_project` solves `argmin_{y in D} (x - y)' Q (x - y)` for a symmetric
//! positive-definite `Q`. Boxes with diagonal `Q` clamp componentwise; balls
//! reduce to a scalar secular equation; boxes with general `Q` run Dykstra's
//! alternating projections over the coordinate slabs in the `Q`-metric.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Membership tolerance for feasibility checks.
pub const MEMBERSHIP_TOL: f64 = 1e-12;
/// Iteration cap for the active-set box solver (finite in exact arithmetic;
/// the cap only guards against floating-point cycling).
const ACTIVE_SET_MAX_ITERS: usize = 10_000;

/// Convex compact parameter set: an axis-aligned box or a Euclidean ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(try_from = "DomainRaw", into = "DomainRaw")]
pub enum DomainSet {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DomainRaw {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl From<DomainSet> for DomainRaw {
    fn from(d: DomainSet) -> Self {
        match d {
            DomainSet::Box { lower, upper } => DomainRaw::Box { lower, upper },
            DomainSet::Ball { center, radius } => DomainRaw::Ball { center, radius },
        }
    }
}

impl TryFrom<DomainRaw> for DomainSet {
    type Error = Error;
    fn try_from(r: DomainRaw) -> Result<Self> {
        match r {
            DomainRaw::Box { lower, upper } => DomainSet::new_box(lower, upper),
            DomainRaw::Ball { center, radius } => DomainSet::new_ball(center, radius),
        }
    }
}

impl DomainSet {
    pub fn new_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::config("domain box: bounds must be nonempty and equal length"));
        }
        for (i, (lo, hi)) in lower.iter().zip(upper.iter()).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::config(format!(
                    "domain box: bounds must be finite (component {i})"
                )));
            }
            if !(lo < hi) {
                return Err(Error::config(format!(
                    "domain box: lower < upper violated at component {i}: [{lo}, {hi}]"
                )));
            }
        }
        Ok(DomainSet::Box { lower, upper })
    }

    /// Symmetric box `|x_i| <= half_width`.
    pub fn symmetric_box(dim: usize, half_width: f64) -> Result<Self> {
        DomainSet::new_box(vec![-half_width; dim], vec![half_width; dim])
    }

    pub fn new_ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::config("domain ball: center must be nonempty"));
        }
        if center.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("domain ball: center must be finite"));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::config(format!(
                "domain ball: radius must be positive and finite, got {radius}"
            )));
        }
        Ok(DomainSet::Ball { center, radius })
    }

    pub fn dim(&self) -> usize {
        match self {
            DomainSet::Box { lower, .. } => lower.len(),
            DomainSet::Ball { center, .. } => center.len(),
        }
    }

    /// Geometric center (box midpoint or ball center).
    pub fn center(&self) -> DVector<f64> {
        match self {
            DomainSet::Box { lower, upper } => DVector::from_iterator(
                lower.len(),
                lower.iter().zip(upper.iter()).map(|(a, b)| 0.5 * (a + b)),
            ),
            DomainSet::Ball { center, .. } => DVector::from_column_slice(center),
        }
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        match self {
            DomainSet::Box { lower, upper } => x
                .iter()
                .enumerate()
                .all(|(i, &v)| v >= lower[i] - tol && v <= upper[i] + tol),
            DomainSet::Ball { center, radius } => {
                let c = DVector::from_column_slice(center);
                (x - c).norm() <= radius + tol
            }
        }
    }

    /// Strict interior membership with margin `tol`.
    pub fn contains_interior(&self, x: &DVector<f64>, tol: f64) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        match self {
            DomainSet::Box { lower, upper } => x
                .iter()
                .enumerate()
                .all(|(i, &v)| v > lower[i] + tol && v < upper[i] - tol),
            DomainSet::Ball { center, radius } => {
                let c = DVector::from_column_slice(center);
                (x - c).norm() < radius - tol
            }
        }
    }

    /// Exact feasibility repair: componentwise clamp (box) or radial shrink
    /// (ball). Only moves points by at most their constraint violation.
    fn snap(&self, x: &mut DVector<f64>) {
        match self {
            DomainSet::Box { lower, upper } => {
                for i in 0..x.len() {
                    x[i] = x[i].clamp(lower[i], upper[i]);
                }
            }
            DomainSet::Ball { center, radius } => {
                let c = DVector::from_column_slice(center);
                let d = &*x - &c;
                let n = d.norm();
                if n > *radius {
                    *x = c + d * (*radius / n);
                }
            }
        }
    }

    /// Range `(min, max)` of the linear functional `phi' x` over the set.
    pub fn inner_range(&self, phi: &DVector<f64>) -> (f64, f64) {
        match self {
            DomainSet::Box { lower, upper } => {
                let mut lo = 0.0;
                let mut hi = 0.0;
                for i in 0..phi.len() {
                    let a = phi[i] * lower[i];
                    let b = phi[i] * upper[i];
                    lo += a.min(b);
                    hi += a.max(b);
                }
                (lo, hi)
            }
            DomainSet::Ball { center, radius } => {
                let c = DVector::from_column_slice(center);
                let mid = phi.dot(&c);
                let half = radius * phi.norm();
                (mid - half, mid + half)
            }
        }
    }

    /// Draw a uniform sample from the set.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            DomainSet::Box { lower, upper } => DVector::from_iterator(
                lower.len(),
                lower
                    .iter()
                    .zip(upper.iter())
                    .map(|(&a, &b)| rng.gen_range(a..b)),
            ),
            DomainSet::Ball { center, radius } => {
                let m = center.len();
                let mut dir = DVector::from_iterator(
                    m,
                    (0..m).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)),
                );
                let n = dir.norm();
                if n == 0.0 {
                    dir[0] = 1.0;
                } else {
                    dir /= n;
                }
                let r = *radius * rng.gen::<f64>().powf(1.0 / m as f64);
                DVector::from_column_slice(center) + dir * r
            }
        }
    }

    /// Vertices of a box domain (errors for balls or high dimension).
    pub fn vertices(&self) -> Result<Vec<DVector<f64>>> {
        match self {
            DomainSet::Box { lower, upper } => {
                let m = lower.len();
                if m > 20 {
                    return Err(Error::config(
                        "vertex enumeration limited to dimension <= 20",
                    ));
                }
                let mut out = Vec::with_capacity(1 << m);
                for mask in 0u64..(1u64 << m) {
                    let v = DVector::from_iterator(
                        m,
                        (0..m).map(|i| {
                            if mask >> i & 1 == 1 {
                                upper[i]
                            } else {
                                lower[i]
                            }
                        }),
                    );
                    out.push(v);
                }
                Ok(out)
            }
            DomainSet::Ball { .. } => Err(Error::config("ball domain has no vertices")),
        }
    }
}

/// Exact bound `sup_{x in D} |phi' x|`.
pub fn sup_abs_inner(phi: &DVector<f64>, domain: &DomainSet) -> f64 {
    let (lo, hi) = domain.inner_range(phi);
    hi.abs().max(lo.abs())
}

fn check_spd(q: &DMatrix<f64>) -> Result<()> {
    if q.nrows() != q.ncols() {
        return Err(Error::config("q_project: Q must be square"));
    }
    let sym = q.clone().symmetric_eigen();
    let max = sym.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = sym.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 1e-12 * max.max(0.0)) {
        return Err(Error::config(format!(
            "q_project: Q not positive definite (eig range [{min:e}, {max:e}])"
        )));
    }
    Ok(())
}

fn q_norm(q: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (q * v).dot(v).max(0.0).sqrt()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

/// Exact projection of `x` onto the box in the Q-metric: a primal active-set
/// method for the box-constrained quadratic program
/// `min (y - x)' Q (y - x)  s.t.  lower <= y <= upper`.
///
/// Each iteration solves the free subsystem exactly, so the method is robust
/// to badly conditioned metrics (where alternating-projection schemes stall);
/// it terminates finitely for strictly convex objectives.
fn active_set_box(
    x: &DVector<f64>,
    q: &DMatrix<f64>,
    lower: &[f64],
    upper: &[f64],
) -> Result<DVector<f64>> {
    let m = x.len();
    let mut state: Vec<Bound> = (0..m)
        .map(|i| {
            if x[i] <= lower[i] {
                Bound::Lower
            } else if x[i] >= upper[i] {
                Bound::Upper
            } else {
                Bound::Free
            }
        })
        .collect();
    let mut y = DVector::from_fn(m, |i, _| x[i].clamp(lower[i], upper[i]));

    for _ in 0..ACTIVE_SET_MAX_ITERS {
        // solve the equality-constrained subproblem on the free set
        let free: Vec<usize> = (0..m).filter(|&i| state[i] == Bound::Free).collect();
        let mut y_target = y.clone();
        if !free.is_empty() {
            let nf = free.len();
            // Q_FF (y_F - x_F) = -Q_FA (y_A - x_A)
            let mut qff = DMatrix::zeros(nf, nf);
            let mut rhs = DVector::zeros(nf);
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    qff[(a, b)] = q[(i, j)];
                }
                let mut acc = 0.0;
                for j in 0..m {
                    if state[j] != Bound::Free {
                        acc += q[(i, j)] * (y[j] - x[j]);
                    }
                }
                rhs[a] = -acc;
            }
            let sol = qff
                .cholesky()
                .ok_or_else(|| {
                    Error::numeric("q_project: free-set subsystem not positive definite")
                })?
                .solve(&rhs);
            for (a, &i) in free.iter().enumerate() {
                y_target[i] = x[i] + sol[a];
            }
        }

        // walk toward the target until the first bound blocks
        let mut alpha = 1.0f64;
        let mut blocker: Option<(usize, Bound)> = None;
        for &i in free.iter() {
            let d = y_target[i] - y[i];
            if d < 0.0 && y_target[i] < lower[i] {
                let a = (lower[i] - y[i]) / d;
                if a < alpha {
                    alpha = a;
                    blocker = Some((i, Bound::Lower));
                }
            } else if d > 0.0 && y_target[i] > upper[i] {
                let a = (upper[i] - y[i]) / d;
                if a < alpha {
                    alpha = a;
                    blocker = Some((i, Bound::Upper));
                }
            }
        }
        for &i in free.iter() {
            y[i] += alpha * (y_target[i] - y[i]);
        }
        if let Some((i, side)) = blocker {
            y[i] = match side {
                Bound::Lower => lower[i],
                Bound::Upper => upper[i],
                Bound::Free => unreachable!(),
            };
            state[i] = side;
            continue;
        }

        // at the free-set optimum: check multiplier signs on active bounds
        let grad = q * (&y - x);
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..m {
            let violation = match state[i] {
                Bound::Lower => (-grad[i]).max(0.0), // need grad >= 0 at lower
                Bound::Upper => grad[i].max(0.0),    // need grad <= 0 at upper
                Bound::Free => 0.0,
            };
            if violation > 1e-13 && worst.map_or(true, |(_, v)| violation > v) {
                worst = Some((i, violation));
            }
        }
        match worst {
            Some((i, _)) => {
                state[i] = Bound::Free;
            }
            None => {
                for i in 0..m {
                    y[i] = y[i].clamp(lower[i], upper[i]);
                }
                return Ok(y);
            }
        }
    }
    Err(Error::numeric_with(
        "q_project: active-set iteration cap reached",
        q_norm(q, &(&y - x)),
    ))
}

/// Projection of `x` onto the ball in the Q-metric: the stationarity system
/// `Q(y - x) + t (y - c) = 0` reduces to a monotone scalar equation in `t`.
fn project_ball(
    x: &DVector<f64>,
    q: &DMatrix<f64>,
    center: &[f64],
    radius: f64,
) -> DVector<f64> {
    let c = DVector::from_column_slice(center);
    let sym = q.clone().symmetric_eigen();
    let lam = &sym.eigenvalues;
    let z = sym.eigenvectors.transpose() * (x - &c);
    let dist = |t: f64| -> f64 {
        let mut s = 0.0;
        for i in 0..z.len() {
            let r = lam[i] * z[i] / (lam[i] + t);
            s += r * r;
        }
        s.sqrt()
    };
    // dist(0) > radius (x outside), dist is strictly decreasing to 0
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while dist(hi) > radius {
        hi *= 2.0;
        if hi > 1e300 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dist(mid) > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    let mut w = DVector::zeros(z.len());
    for i in 0..z.len() {
        w[i] = lam[i] * z[i] / (lam[i] + t);
    }
    c + &sym.eigenvectors * w
}

/// `argmin_{y in D} (x - y)' Q (x - y)` for symmetric positive-definite `Q`.
pub fn q_project(x: &DVector<f64>, q: &DMatrix<f64>, domain: &DomainSet) -> Result<DVector<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("q_project: x must be finite"));
    }
    if x.len() != domain.dim() || q.nrows() != x.len() {
        return Err(Error::config("q_project: dimension mismatch"));
    }
    if domain.contains(x, 0.0) {
        return Ok(x.clone());
    }
    check_spd(q)?;
    match domain {
        DomainSet::Box { lower, upper } => {
            let diagonal = {
                let mut diag = true;
                for i in 0..q.nrows() {
                    for j in 0..q.ncols() {
                        if i != j && q[(i, j)] != 0.0 {
                            diag = false;
                        }
                    }
                }
                diag
            };
            if diagonal {
                // separable objective: componentwise clamp
                let mut y = x.clone();
                domain.snap(&mut y);
                Ok(y)
            } else {
                active_set_box(x, q, lower, upper)
            }
        }
        DomainSet::Ball { center, radius } => {
            let mut y = project_ball(x, q, center, *radius);
            domain.snap(&mut y);
            Ok(y)
        }
    }
}

/// `max_{theta in D} (theta - a)' Q (theta - a)`: vertex enumeration for
/// boxes (the quadratic is convex, so the maximum sits at a vertex); for
/// balls, eigen decomposition plus a scalar secular equation.
pub fn max_quadratic_over(q: &DMatrix<f64>, a: &DVector<f64>, domain: &DomainSet) -> Result<f64> {
    match domain {
        DomainSet::Box { .. } => {
            let mut best = f64::NEG_INFINITY;
            for v in domain.vertices()? {
                let d = &v - a;
                best = best.max((q * &d).dot(&d));
            }
            Ok(best)
        }
        DomainSet::Ball { center, radius } => {
            let c = DVector::from_column_slice(center);
            let sym = q.clone().symmetric_eigen();
            let lam = &sym.eigenvalues;
            let lam_max = lam.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let d = sym.eigenvectors.transpose() * (&c - a);
            // maximizer on the sphere: theta - c = sum_i lam_i d_i/(t - lam_i) v_i
            // with multiplier t >= lam_max and squared radius r^2
            let norm2 = |t: f64| -> f64 {
                let mut s = 0.0;
                for i in 0..d.len() {
                    let r = lam[i] * d[i] / (t - lam[i]);
                    s += r * r;
                }
                s
            };
            let r2 = radius * radius;
            let eps = 1e-12 * lam_max.abs().max(1.0);
            let near = norm2(lam_max + eps);
            let value_at = |w: &DVector<f64>| -> f64 {
                // w holds theta - c in the eigenbasis
                let mut s = 0.0;
                for i in 0..w.len() {
                    let e = w[i] + d[i];
                    s += lam[i] * e * e;
                }
                s
            };
            if near <= r2 {
                // hard case: pad with a top-eigenvector component
                let mut w = DVector::zeros(d.len());
                let mut used = 0.0;
                for i in 0..d.len() {
                    if (lam_max - lam[i]).abs() > eps {
                        w[i] = lam[i] * d[i] / (lam_max - lam[i]);
                        used += w[i] * w[i];
                    }
                }
                let pad = (r2 - used).max(0.0).sqrt();
                // either sign of the pad is feasible; take the larger value
                let mut best = f64::NEG_INFINITY;
                for sign in [-1.0, 1.0] {
                    let mut wt = w.clone();
                    for i in 0..d.len() {
                        if (lam_max - lam[i]).abs() <= eps {
                            wt[i] = sign * pad;
                            break;
                        }
                    }
                    best = best.max(value_at(&wt));
                }
                Ok(best)
            } else {
                let mut lo = lam_max + eps;
                let mut hi = lo.max(1.0);
                while norm2(hi) > r2 {
                    hi *= 2.0;
                    if hi > 1e300 {
                        break;
                    }
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if norm2(mid) > r2 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let t = 0.5 * (lo + hi);
                let mut w = DVector::zeros(d.len());
                for i in 0..d.len() {
                    w[i] = lam[i] * d[i] / (t - lam[i]);
                }
                Ok(value_at(&w))
            }
        }
    }
}
