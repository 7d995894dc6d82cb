//! Saturation and link functions.
//!
//! An observation passes through a saturation map `S` that clamps the latent
//! value to constants outside an observable band. Given the noise law, the
//! conditional mean of the saturated output is the link `G(x) = E[S(x + e)]`;
//! this module evaluates `G`, its derivative, the conditional variance
//! `sigma(x) = Var[S(x + e)]`, higher central moments, and derivative bounds
//! over symmetric intervals.
//!
//! Gaussian noise uses closed forms in the normal CDF/density; tabulated noise
//! integrates the band term with adaptive quadrature (absolute tolerance
//! 1e-10) over linearly interpolated CDF/density grids.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;
use crate::special::{std_normal_cdf, std_normal_pdf, std_normal_sf};

/// Default quadrature tolerance for tabulated-noise link evaluations.
pub const QUAD_TOL: f64 = 1e-10;
/// Default tolerance for derivative-bound searches.
pub const BOUNDS_TOL: f64 = 1e-8;

// ---------------------------------------------------------------------------
// SaturationSpec
// ---------------------------------------------------------------------------

/// One step's saturation map: identity on `[l, u]`, constant `L` below and
/// `U` above. `l` may be `-inf` and `u` may be `+inf`; an infinite threshold
/// disables the corresponding clamp entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRaw", into = "SpecRaw")]
pub struct SaturationSpec {
    threshold_lo: f64,
    threshold_hi: f64,
    clamp_lo: f64,
    clamp_hi: f64,
}

#[derive(Serialize, Deserialize)]
struct SpecRaw {
    #[serde(with = "crate::float_serde")]
    l: f64,
    #[serde(with = "crate::float_serde")]
    u: f64,
    #[serde(rename = "L", with = "crate::float_serde")]
    clamp_lo: f64,
    #[serde(rename = "U", with = "crate::float_serde")]
    clamp_hi: f64,
}

impl From<SaturationSpec> for SpecRaw {
    fn from(s: SaturationSpec) -> Self {
        SpecRaw {
            l: s.threshold_lo,
            u: s.threshold_hi,
            clamp_lo: s.clamp_lo,
            clamp_hi: s.clamp_hi,
        }
    }
}

impl TryFrom<SpecRaw> for SaturationSpec {
    type Error = Error;
    fn try_from(r: SpecRaw) -> Result<Self> {
        SaturationSpec::new(r.l, r.u, r.clamp_lo, r.clamp_hi)
    }
}

impl SaturationSpec {
    /// Build and validate a saturation map with thresholds `l <= u` and clamp
    /// values `L <= l`, `U >= u`. Finite thresholds require finite clamps.
    pub fn new(l: f64, u: f64, clamp_lo: f64, clamp_hi: f64) -> Result<Self> {
        for (name, v) in [("l", l), ("u", u), ("L", clamp_lo), ("U", clamp_hi)] {
            if v.is_nan() {
                return Err(Error::config(format!("saturation spec: {name} is NaN")));
            }
        }
        if l == f64::INFINITY || u == f64::NEG_INFINITY {
            return Err(Error::config(
                "saturation spec: l must be < +inf and u > -inf",
            ));
        }
        if !(clamp_lo <= l && l <= u && u <= clamp_hi) {
            return Err(Error::config(format!(
                "saturation spec: ordering L <= l <= u <= U violated: \
                 L={clamp_lo}, l={l}, u={u}, U={clamp_hi}"
            )));
        }
        if l.is_finite() && !clamp_lo.is_finite() {
            return Err(Error::config(
                "saturation spec: finite l requires finite L",
            ));
        }
        if u.is_finite() && !clamp_hi.is_finite() {
            return Err(Error::config(
                "saturation spec: finite u requires finite U",
            ));
        }
        Ok(SaturationSpec {
            threshold_lo: l,
            threshold_hi: u,
            clamp_lo,
            clamp_hi,
        })
    }

    /// Unsaturated spec: the identity map (classical linear regression).
    pub fn linear() -> Self {
        SaturationSpec {
            threshold_lo: f64::NEG_INFINITY,
            threshold_hi: f64::INFINITY,
            clamp_lo: f64::NEG_INFINITY,
            clamp_hi: f64::INFINITY,
        }
    }

    /// Binary sensor at threshold zero: output 0 below, 1 above.
    pub fn binary() -> Self {
        SaturationSpec {
            threshold_lo: 0.0,
            threshold_hi: 0.0,
            clamp_lo: 0.0,
            clamp_hi: 1.0,
        }
    }

    /// Censored spec: clamps equal the thresholds.
    pub fn censored(l: f64, u: f64) -> Result<Self> {
        SaturationSpec::new(l, u, l, u)
    }

    pub fn l(&self) -> f64 {
        self.threshold_lo
    }
    pub fn u(&self) -> f64 {
        self.threshold_hi
    }
    pub fn clamp_lo(&self) -> f64 {
        self.clamp_lo
    }
    pub fn clamp_hi(&self) -> f64 {
        self.clamp_hi
    }

    pub fn is_linear(&self) -> bool {
        self.threshold_lo == f64::NEG_INFINITY && self.threshold_hi == f64::INFINITY
    }

    /// Smallest interval containing all possible outputs.
    pub fn output_range(&self) -> (f64, f64) {
        let lo = if self.threshold_lo.is_finite() {
            self.clamp_lo
        } else {
            f64::NEG_INFINITY
        };
        let hi = if self.threshold_hi.is_finite() {
            self.clamp_hi
        } else {
            f64::INFINITY
        };
        (lo, hi)
    }
}

/// Apply the saturation map.
pub fn saturate(x: f64, spec: &SaturationSpec) -> f64 {
    if x < spec.threshold_lo {
        spec.clamp_lo
    } else if x > spec.threshold_hi {
        spec.clamp_hi
    } else {
        x
    }
}

// ---------------------------------------------------------------------------
// NoiseModel
// ---------------------------------------------------------------------------

/// Conditional law of the observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian {
        variance: f64,
    },
    /// Grids `x`, `cdf`, `pdf` of equal length; values between grid points are
    /// linearly interpolated, outside the grid the density is zero.
    Tabulated {
        x: Vec<f64>,
        cdf: Vec<f64>,
        pdf: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NoiseRaw", into = "NoiseRaw")]
pub struct NoiseModel {
    pub kind: NoiseKind,
    /// Moment guard: the noise is assumed to have finite `2 + eta` moments.
    pub eta: f64,
}

#[derive(Serialize, Deserialize)]
struct NoiseRaw {
    #[serde(flatten)]
    kind: NoiseKind,
    #[serde(default = "default_eta")]
    eta: f64,
}

fn default_eta() -> f64 {
    1.0
}

impl From<NoiseModel> for NoiseRaw {
    fn from(n: NoiseModel) -> Self {
        NoiseRaw {
            kind: n.kind,
            eta: n.eta,
        }
    }
}

impl TryFrom<NoiseRaw> for NoiseModel {
    type Error = Error;
    fn try_from(r: NoiseRaw) -> Result<Self> {
        let model = NoiseModel {
            kind: r.kind,
            eta: r.eta,
        };
        model.validate()?;
        Ok(model)
    }
}

impl NoiseModel {
    pub fn gaussian(variance: f64) -> Result<Self> {
        let m = NoiseModel {
            kind: NoiseKind::Gaussian { variance },
            eta: 1.0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn tabulated(x: Vec<f64>, cdf: Vec<f64>, pdf: Vec<f64>) -> Result<Self> {
        let m = NoiseModel {
            kind: NoiseKind::Tabulated { x, cdf, pdf },
            eta: 1.0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        self.eta = eta;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::config("noise model: eta must be positive"));
        }
        match &self.kind {
            NoiseKind::Gaussian { variance } => {
                if !(*variance > 0.0 && variance.is_finite()) {
                    return Err(Error::config(format!(
                        "noise model: gaussian variance must be positive and finite, got {variance}"
                    )));
                }
            }
            NoiseKind::Tabulated { x, cdf, pdf } => {
                if x.len() < 2 || x.len() != cdf.len() || x.len() != pdf.len() {
                    return Err(Error::config(
                        "noise model: tabulated grids need equal length >= 2",
                    ));
                }
                if x.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::config(
                        "noise model: tabulated x grid must be strictly increasing",
                    ));
                }
                if x.iter().any(|v| !v.is_finite())
                    || cdf.iter().any(|v| !v.is_finite())
                    || pdf.iter().any(|v| !v.is_finite())
                {
                    return Err(Error::config("noise model: tabulated grids must be finite"));
                }
                if cdf.windows(2).any(|w| w[1] < w[0]) {
                    return Err(Error::config("noise model: CDF grid must be nondecreasing"));
                }
                if cdf[0].abs() > 1e-6 || (cdf[cdf.len() - 1] - 1.0).abs() > 1e-6 {
                    return Err(Error::config(
                        "noise model: CDF grid must run from 0 to 1",
                    ));
                }
                if pdf.iter().any(|&v| v < 0.0) {
                    return Err(Error::config("noise model: pdf grid must be nonnegative"));
                }
                let mass = trapezoid(x, pdf);
                if (mass - 1.0).abs() > 1e-6 {
                    return Err(Error::config(format!(
                        "noise model: pdf must integrate to 1 within 1e-6, got {mass}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self.kind, NoiseKind::Gaussian { .. })
    }

    fn sd(&self) -> f64 {
        match &self.kind {
            NoiseKind::Gaussian { variance } => variance.sqrt(),
            NoiseKind::Tabulated { .. } => unreachable!("sd only used on gaussian paths"),
        }
    }

    /// Noise CDF.
    pub fn cdf(&self, t: f64) -> f64 {
        match &self.kind {
            NoiseKind::Gaussian { .. } => std_normal_cdf(t / self.sd()),
            NoiseKind::Tabulated { x, cdf, .. } => interp(x, cdf, t, 0.0, 1.0),
        }
    }

    /// Noise survival function `1 - CDF`, tail-accurate for gaussian noise.
    pub fn sf(&self, t: f64) -> f64 {
        match &self.kind {
            NoiseKind::Gaussian { .. } => std_normal_sf(t / self.sd()),
            NoiseKind::Tabulated { x, cdf, .. } => 1.0 - interp(x, cdf, t, 0.0, 1.0),
        }
    }

    /// Noise density.
    pub fn pdf(&self, t: f64) -> f64 {
        match &self.kind {
            NoiseKind::Gaussian { .. } => {
                let s = self.sd();
                std_normal_pdf(t / s) / s
            }
            NoiseKind::Tabulated { x, pdf, .. } => interp(x, pdf, t, 0.0, 0.0),
        }
    }

    /// Mean of the noise (0 for gaussian; grid moment for tabulated).
    pub fn mean(&self) -> f64 {
        match &self.kind {
            NoiseKind::Gaussian { .. } => 0.0,
            NoiseKind::Tabulated { x, pdf, .. } => cell_moment(x, pdf, |t| t),
        }
    }

    /// Variance of the noise.
    pub fn variance(&self) -> f64 {
        match &self.kind {
            NoiseKind::Gaussian { variance } => *variance,
            NoiseKind::Tabulated { x, pdf, .. } => {
                let m = self.mean();
                cell_moment(x, pdf, |t| (t - m) * (t - m))
            }
        }
    }

    /// Fourth central moment of the noise.
    pub fn fourth_moment(&self) -> f64 {
        match &self.kind {
            NoiseKind::Gaussian { variance } => 3.0 * variance * variance,
            NoiseKind::Tabulated { x, pdf, .. } => {
                let m = self.mean();
                cell_moment(x, pdf, |t| (t - m).powi(4))
            }
        }
    }

    /// Support of the density (finite only for tabulated noise).
    pub fn support(&self) -> (f64, f64) {
        match &self.kind {
            NoiseKind::Gaussian { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            NoiseKind::Tabulated { x, .. } => (x[0], x[x.len() - 1]),
        }
    }

    /// Draw one sample (inverse-CDF transform for tabulated noise).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.kind {
            NoiseKind::Gaussian { .. } => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                z * self.sd()
            }
            NoiseKind::Tabulated { x, cdf, .. } => {
                let p: f64 = rng.gen();
                inverse_cdf(x, cdf, p)
            }
        }
    }
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (ys[0] + ys[1]) * (xs[1] - xs[0]))
        .sum()
}

/// Per-cell 3-point Gauss-Legendre; exact for `weight(t) * h(t)` with linear
/// weight and polynomial `h` up to degree 4.
fn cell_moment<H: Fn(f64) -> f64>(x: &[f64], pdf: &[f64], h: H) -> f64 {
    const NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
    const WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
    let mut total = 0.0;
    for (xs, ps) in x.windows(2).zip(pdf.windows(2)) {
        let (a, b) = (xs[0], xs[1]);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let slope = (ps[1] - ps[0]) / (b - a);
        for (&n, &w) in NODES.iter().zip(WEIGHTS.iter()) {
            let t = mid + half * n;
            let f = ps[0] + slope * (t - a);
            total += w * half * f * h(t);
        }
    }
    total
}

fn interp(x: &[f64], y: &[f64], t: f64, below: f64, above: f64) -> f64 {
    if t <= x[0] {
        return if t < x[0] { below } else { y[0] };
    }
    if t >= x[x.len() - 1] {
        return if t > x[x.len() - 1] {
            above
        } else {
            y[y.len() - 1]
        };
    }
    let i = match x.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
        Ok(i) => return y[i],
        Err(i) => i - 1,
    };
    let w = (t - x[i]) / (x[i + 1] - x[i]);
    y[i] + w * (y[i + 1] - y[i])
}

fn inverse_cdf(x: &[f64], cdf: &[f64], p: f64) -> f64 {
    if p <= cdf[0] {
        return x[0];
    }
    if p >= cdf[cdf.len() - 1] {
        return x[x.len() - 1];
    }
    let i = cdf.partition_point(|&c| c < p) - 1;
    let span = cdf[i + 1] - cdf[i];
    if span <= 0.0 {
        return x[i];
    }
    x[i] + (p - cdf[i]) * (x[i + 1] - x[i]) / span
}

// ---------------------------------------------------------------------------
// Link functions
// ---------------------------------------------------------------------------

/// Derivative bounds of the link on a symmetric interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBounds {
    /// Infimum of `G'` on `[-M, M]`.
    pub g_lo: f64,
    /// Supremum of `G'` on `[-M, M]`.
    pub g_hi: f64,
    /// Evaluation radius `M`.
    pub m_radius: f64,
    /// Lipschitz constant of `G'` on `[-M, M]` (sup of `|G''|`).
    pub rho: f64,
}

/// Band probability `P(lx <= e <= ux)`, evaluated through the survival
/// function when both arguments are positive so the tails keep relative
/// accuracy.
fn band_prob(noise: &NoiseModel, lx: f64, ux: f64) -> f64 {
    if lx == f64::NEG_INFINITY && ux == f64::INFINITY {
        1.0
    } else if lx == f64::NEG_INFINITY {
        noise.cdf(ux)
    } else if ux == f64::INFINITY {
        noise.sf(lx)
    } else if lx > 0.0 {
        (noise.sf(lx) - noise.sf(ux)).max(0.0)
    } else {
        (noise.cdf(ux) - noise.cdf(lx)).max(0.0)
    }
}

/// Conditional mean of the saturated output, `G(x) = E[S(x + e)]`.
pub fn g_mean(x: f64, spec: &SaturationSpec, noise: &NoiseModel) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::config(format!("g_mean: x must be finite, got {x}")));
    }
    if spec.is_linear() {
        // exact identity-link degeneration
        return Ok(x + noise.mean());
    }
    let (l, u) = (spec.threshold_lo, spec.threshold_hi);
    let lx = l - x;
    let ux = u - x;
    let mut total = 0.0;
    if l.is_finite() {
        total += spec.clamp_lo * noise.cdf(lx);
    }
    if u.is_finite() {
        total += spec.clamp_hi * noise.sf(ux);
    }
    if l < u {
        match &noise.kind {
            NoiseKind::Gaussian { variance } => {
                let sd = variance.sqrt();
                let dp = band_prob(noise, lx, ux);
                total += x * dp;
                let lo_term = if l.is_finite() {
                    sd * std_normal_pdf(lx / sd)
                } else {
                    0.0
                };
                let hi_term = if u.is_finite() {
                    sd * std_normal_pdf(ux / sd)
                } else {
                    0.0
                };
                total += lo_term - hi_term;
            }
            NoiseKind::Tabulated { .. } => {
                total += band_integral(noise, x, l, u, |t| t)?;
            }
        }
    }
    Ok(total)
}

/// Integral of `h(t) * f(t - x)` over the observable band, clipped to the
/// noise support, with quadrature seeded at interpolation knots.
fn band_integral<H: Fn(f64) -> f64>(
    noise: &NoiseModel,
    x: f64,
    l: f64,
    u: f64,
    h: H,
) -> Result<f64> {
    let (slo, shi) = noise.support();
    let a = l.max(x + slo);
    let b = u.min(x + shi);
    if a >= b {
        return Ok(0.0);
    }
    let splits: Vec<f64> = match &noise.kind {
        // split at every interpolation knot: the integrand is polynomial on
        // each cell, where the Kronrod rule is exact
        NoiseKind::Tabulated { x: grid, .. } => grid.iter().map(|g| x + g).collect(),
        NoiseKind::Gaussian { .. } => Vec::new(),
    };
    quad::integrate_with_splits(|t| h(t) * noise.pdf(t - x), a, b, QUAD_TOL, &splits)
}

/// Derivative of the link: band probability plus boundary-density terms from
/// clamp/threshold gaps.
pub fn g_deriv(x: f64, spec: &SaturationSpec, noise: &NoiseModel) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::config(format!("g_deriv: x must be finite, got {x}")));
    }
    if spec.is_linear() {
        return Ok(1.0);
    }
    let (l, u) = (spec.threshold_lo, spec.threshold_hi);
    let mut d = band_prob(noise, l - x, u - x);
    if l.is_finite() {
        d += (l - spec.clamp_lo) * noise.pdf(l - x);
    }
    if u.is_finite() {
        d += (spec.clamp_hi - u) * noise.pdf(u - x);
    }
    Ok(d)
}

/// Conditional variance of the saturated output,
/// `sigma(x) = E[(S(x + e) - G(x))^2]`.
pub fn sigma_var(x: f64, spec: &SaturationSpec, noise: &NoiseModel) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::config(format!(
            "sigma_var: x must be finite, got {x}"
        )));
    }
    if spec.is_linear() {
        return Ok(noise.variance());
    }
    let g = g_mean(x, spec, noise)?;
    let (l, u) = (spec.threshold_lo, spec.threshold_hi);
    let lx = l - x;
    let ux = u - x;
    let mut total = 0.0;
    if l.is_finite() {
        let d = spec.clamp_lo - g;
        total += d * d * noise.cdf(lx);
    }
    if u.is_finite() {
        let d = spec.clamp_hi - g;
        total += d * d * noise.sf(ux);
    }
    if l < u {
        match &noise.kind {
            NoiseKind::Gaussian { variance } => {
                // integral of (s + c)^2 f(s) over the band, c = x - G(x)
                let sd = variance.sqrt();
                let c = x - g;
                let dp = band_prob(noise, lx, ux);
                let pdf_lo = if l.is_finite() {
                    std_normal_pdf(lx / sd)
                } else {
                    0.0
                };
                let pdf_hi = if u.is_finite() {
                    std_normal_pdf(ux / sd)
                } else {
                    0.0
                };
                let first = sd * (pdf_lo - pdf_hi);
                let edge_hi = if u.is_finite() { ux * pdf_hi / sd } else { 0.0 };
                let edge_lo = if l.is_finite() { lx * pdf_lo / sd } else { 0.0 };
                let second = variance * dp - variance * (edge_hi - edge_lo);
                total += c * c * dp + 2.0 * c * first + second;
            }
            NoiseKind::Tabulated { .. } => {
                total += band_integral(noise, x, l, u, |t| (t - g) * (t - g))?;
            }
        }
    }
    Ok(total.max(0.0))
}

/// Fourth central moment of the saturated output,
/// `E[(S(x + e) - G(x))^4]`, by quadrature.
pub fn fourth_central(x: f64, spec: &SaturationSpec, noise: &NoiseModel) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::config(format!(
            "fourth_central: x must be finite, got {x}"
        )));
    }
    if spec.is_linear() {
        return Ok(noise.fourth_moment());
    }
    let g = g_mean(x, spec, noise)?;
    let (l, u) = (spec.threshold_lo, spec.threshold_hi);
    let mut total = 0.0;
    if l.is_finite() {
        total += (spec.clamp_lo - g).powi(4) * noise.cdf(l - x);
    }
    if u.is_finite() {
        total += (spec.clamp_hi - g).powi(4) * noise.sf(u - x);
    }
    if l < u {
        let (a, b) = match &noise.kind {
            NoiseKind::Gaussian { variance } => {
                let r = 14.0 * variance.sqrt();
                (l.max(x - r), u.min(x + r))
            }
            NoiseKind::Tabulated { .. } => (l, u),
        };
        if a < b {
            total += band_integral(noise, x, a, b, |t| (t - g).powi(4))?;
        }
    }
    Ok(total.max(0.0))
}

// ---------------------------------------------------------------------------
// Derivative bounds
// ---------------------------------------------------------------------------

fn golden_extremum<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64, maximize: bool) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let sign = if maximize { -1.0 } else { 1.0 };
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = sign * f(c);
    let mut fd = sign * f(d);
    while (b - a).abs() > BOUNDS_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = sign * f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = sign * f(d);
        }
    }
    let xm = 0.5 * (a + b);
    (xm, f(xm))
}

/// Grid search with golden-section refinement of the bracketed extrema.
fn grid_extrema<F: Fn(f64) -> f64>(f: &F, m: f64, points: usize) -> (f64, f64) {
    let n = points.max(3);
    let step = 2.0 * m / (n - 1) as f64;
    let mut min_v = f64::INFINITY;
    let mut max_v = f64::NEG_INFINITY;
    let mut min_i = 0usize;
    let mut max_i = 0usize;
    for i in 0..n {
        let x = -m + step * i as f64;
        let v = f(x);
        if v < min_v {
            min_v = v;
            min_i = i;
        }
        if v > max_v {
            max_v = v;
            max_i = i;
        }
    }
    let bracket = |i: usize| {
        let lo = if i == 0 { -m } else { -m + step * (i - 1) as f64 };
        let hi = if i == n - 1 {
            m
        } else {
            -m + step * (i + 1) as f64
        };
        (lo, hi)
    };
    let (blo, bhi) = bracket(min_i);
    let (_, vmin) = golden_extremum(f, blo, bhi, false);
    let (blo, bhi) = bracket(max_i);
    let (_, vmax) = golden_extremum(f, blo, bhi, true);
    (vmin.min(min_v), vmax.max(max_v))
}

/// Infimum and supremum of `G'` over `[-m, m]`.
///
/// Closed-form extremum placement for gaussian noise whenever the derivative
/// is monotone or unimodal (pure band, or single threshold); grid search with
/// golden-section refinement (step `m/2048`) otherwise.
pub fn g_deriv_range(m: f64, spec: &SaturationSpec, noise: &NoiseModel) -> Result<(f64, f64)> {
    if !(m >= 0.0) || !m.is_finite() {
        return Err(Error::config(format!(
            "g_deriv_range: radius must be finite and nonnegative, got {m}"
        )));
    }
    if spec.is_linear() {
        return Ok((1.0, 1.0));
    }
    if m == 0.0 {
        let g = g_deriv(0.0, spec, noise)?;
        return Ok((g, g));
    }
    let (l, u) = (spec.threshold_lo, spec.threshold_hi);
    let no_bumps = (!l.is_finite() || spec.clamp_lo == l) && (!u.is_finite() || spec.clamp_hi == u);
    if noise.is_gaussian() {
        let eval = |x: f64| g_deriv(x, spec, noise).expect("finite x");
        if l == u {
            // single-threshold spec: G' is a scaled density peaked at x = l
            let peak = l.clamp(-m, m);
            let ends = eval(-m).min(eval(m));
            return Ok((eval(-m).min(eval(m)).min(ends), eval(peak)));
        }
        if no_bumps {
            // pure band probability: monotone for one-sided bands, unimodal
            // with mode at the band midpoint otherwise
            let lo = eval(-m).min(eval(m));
            let hi = if l.is_finite() && u.is_finite() {
                eval((0.5 * (l + u)).clamp(-m, m))
            } else {
                eval(-m).max(eval(m))
            };
            return Ok((lo, hi));
        }
    }
    let f = |x: f64| g_deriv(x, spec, noise).expect("finite x");
    Ok(grid_extrema(&f, m, 2049))
}

/// Full derivative bounds on `[-M, M]`, including the Lipschitz constant of
/// `G'` (sup of `|G''|`, estimated numerically from central differences).
///
/// Errors with an assumption violation when the lower bound is not positive,
/// except for gaussian noise with a non-degenerate clamp range, where
/// positivity holds analytically even if the value underflows.
pub fn g_bounds(m: f64, spec: &SaturationSpec, noise: &NoiseModel) -> Result<LinkBounds> {
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::config(format!(
            "g_bounds: radius must be positive and finite, got {m}"
        )));
    }
    let (g_lo, g_hi) = g_deriv_range(m, spec, noise)?;
    let analytic_positive = noise.is_gaussian() && spec.clamp_hi > spec.clamp_lo;
    if g_lo <= 0.0 && !analytic_positive {
        return Err(Error::assumption(format!(
            "link derivative lower bound {g_lo:e} is not positive on [-{m}, {m}]"
        )));
    }
    let rho = if spec.is_linear() {
        0.0
    } else {
        let h = 1e-5;
        let g2 = |x: f64| {
            let a = g_deriv(x + h, spec, noise).expect("finite x");
            let b = g_deriv(x - h, spec, noise).expect("finite x");
            ((a - b) / (2.0 * h)).abs()
        };
        let (_, sup) = grid_extrema(&g2, m, 1025);
        sup
    };
    Ok(LinkBounds {
        g_lo,
        g_hi,
        m_radius: m,
        rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_0_15() -> SaturationSpec {
        SaturationSpec::censored(0.0, 15.0).unwrap()
    }

    fn unit_gauss() -> NoiseModel {
        NoiseModel::gaussian(1.0).unwrap()
    }

    #[test]
    fn saturate_clamps() {
        let s = spec_0_15();
        assert_eq!(saturate(-3.0, &s), 0.0);
        assert_eq!(saturate(7.0, &s), 7.0);
        assert_eq!(saturate(20.0, &s), 15.0);
        let lin = SaturationSpec::linear();
        assert_eq!(saturate(-1e9, &lin), -1e9);
    }

    #[test]
    fn spec_validation() {
        assert!(SaturationSpec::new(1.0, 0.0, 0.0, 2.0).is_err()); // l > u
        assert!(SaturationSpec::new(0.0, 1.0, 0.5, 2.0).is_err()); // L > l
        assert!(SaturationSpec::new(0.0, 1.0, f64::NEG_INFINITY, 2.0).is_err()); // finite l, infinite L
        assert!(SaturationSpec::new(f64::INFINITY, f64::INFINITY, 0.0, 1.0).is_err());
        assert!(SaturationSpec::new(0.0, f64::NAN, 0.0, 1.0).is_err());
        assert!(SaturationSpec::new(-1.0, 1.0, -2.0, 2.0).is_ok());
    }

    #[test]
    fn linear_spec_is_exact_identity() {
        let lin = SaturationSpec::linear();
        let noise = unit_gauss();
        for x in [-7.3, 0.0, 2.5, 100.0] {
            assert_eq!(g_mean(x, &lin, &noise).unwrap(), x);
            assert_eq!(g_deriv(x, &lin, &noise).unwrap(), 1.0);
            assert_eq!(sigma_var(x, &lin, &noise).unwrap(), 1.0);
        }
        assert_eq!(fourth_central(0.3, &lin, &noise).unwrap(), 3.0);
    }

    #[test]
    fn binary_spec_matches_probit_formulas() {
        let b = SaturationSpec::binary();
        let noise = unit_gauss();
        for i in 0..101 {
            let x = -5.0 + 0.1 * f64::from(i);
            let g = g_mean(x, &b, &noise).unwrap();
            let want_g = 1.0 - std_normal_cdf(-x);
            assert!((g - want_g).abs() < 1e-14, "G({x})");
            let s = sigma_var(x, &b, &noise).unwrap();
            let f = std_normal_cdf(-x);
            assert!((s - f * (1.0 - f)).abs() < 1e-14, "sigma({x})");
            let d = g_deriv(x, &b, &noise).unwrap();
            assert!((d - std_normal_pdf(-x)).abs() < 1e-14, "G'({x})");
        }
    }

    // frozen values computed with an independent scipy quadrature oracle
    const CENSORED_REF: &[(f64, f64, f64, f64)] = &[
        // (x, G, sigma, m4)
        (0.0, 3.989_422_804_014_327e-1, 3.408_450_569_081_047e-1, 6.282_343_968_087_701e-1),
        (7.5, 7.5, 9.999_999_999_998_72e-1, 2.999_999_999_985_238),
        (-3.0, 3.821_543_170_477_238e-4, 2.032_890_385_648_857e-4, 1.480_598_295_077_183e-4),
        (3.0, 3.000_382_154_317_047, 9.975_034_929_753_048e-1, 2.945_727_570_992_188),
        (14.0, 1.391_668_452_941_231e1, 7.510_878_078_416_09e-1, 1.557_187_947_442_633),
        (16.0, 1.491_668_452_941_231e1, 6.839_831_570_452_315e-2, 1.072_975_891_879_838e-1),
        (-0.7, 1.428_793_768_106_102e-1, 1.215_335_721_378_576e-1, 2.049_761_949_823_157e-1),
    ];

    #[test]
    fn censored_gaussian_matches_frozen_oracle() {
        let s = spec_0_15();
        let noise = unit_gauss();
        for &(x, g, sg, m4) in CENSORED_REF {
            assert!((g_mean(x, &s, &noise).unwrap() - g).abs() < 1e-10, "G({x})");
            assert!(
                (sigma_var(x, &s, &noise).unwrap() - sg).abs() < 1e-10,
                "sigma({x})"
            );
            assert!(
                (fourth_central(x, &s, &noise).unwrap() - m4).abs() < 1e-8,
                "m4({x})"
            );
        }
        for &(x, want) in &[
            (0.0, 0.5),
            (7.5, 9.999_999_999_999_363e-1),
            (-3.0, 1.349_898_031_630_103e-3),
            (14.0, 8.413_447_460_685_429e-1),
        ] {
            assert!((g_deriv(x, &s, &noise).unwrap() - want).abs() < 1e-12, "G'({x})");
        }
    }

    #[test]
    fn g_mean_monotone_and_in_range() {
        let s = spec_0_15();
        let noise = unit_gauss();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=200 {
            let x = -10.0 + 0.15 * f64::from(i);
            let g = g_mean(x, &s, &noise).unwrap();
            assert!(g >= prev - 1e-12, "monotone at {x}");
            assert!((0.0..=15.0).contains(&g), "range at {x}");
            prev = g;
        }
    }

    #[test]
    fn derivative_consistent_with_finite_difference() {
        let s = spec_0_15();
        let noise = unit_gauss();
        let h = 1e-5;
        for i in 0..=100 {
            let x = -10.0 + 0.2 * f64::from(i);
            let fd =
                (g_mean(x + h, &s, &noise).unwrap() - g_mean(x - h, &s, &noise).unwrap()) / (2.0 * h);
            let d = g_deriv(x, &s, &noise).unwrap();
            assert!((fd - d).abs() < 1e-6, "fd mismatch at {x}: {fd} vs {d}");
        }
    }

    #[test]
    fn bounds_linear_and_binary() {
        let noise = unit_gauss();
        let lin = g_bounds(5.0, &SaturationSpec::linear(), &noise).unwrap();
        assert_eq!((lin.g_lo, lin.g_hi, lin.rho), (1.0, 1.0, 0.0));

        let b = g_bounds(2.0, &SaturationSpec::binary(), &noise).unwrap();
        assert!((b.g_hi - std_normal_pdf(0.0)).abs() < 1e-9);
        assert!((b.g_lo - std_normal_pdf(2.0)).abs() < 1e-9);
    }

    #[test]
    fn bounds_censored_match_grid_oracle() {
        let s = spec_0_15();
        let noise = unit_gauss();
        let b = g_bounds(10.0, &s, &noise).unwrap();
        // dense grid oracle
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..=20_000 {
            let x = -10.0 + 20.0 * f64::from(i) / 20_000.0;
            let d = g_deriv(x, &s, &noise).unwrap();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        assert!((b.g_lo - lo).abs() < 1e-6, "g_lo {} vs {}", b.g_lo, lo);
        assert!((b.g_hi - hi).abs() < 1e-6, "g_hi {} vs {}", b.g_hi, hi);
        // censored-gaussian curvature has the closed form f(l-x) - f(u-x)
        let mut rho_oracle: f64 = 0.0;
        for i in 0..=20_000 {
            let x = -10.0 + 20.0 * f64::from(i) / 20_000.0;
            let g2 = std_normal_pdf(-x) - std_normal_pdf(15.0 - x);
            rho_oracle = rho_oracle.max(g2.abs());
        }
        assert!((b.rho - rho_oracle).abs() < 1e-5, "rho {} vs {}", b.rho, rho_oracle);
    }

    #[test]
    fn general_clamp_gap_bounds_use_grid() {
        // clamp values detached from the thresholds: bump terms active
        let s = SaturationSpec::new(0.0, 4.0, -1.0, 6.0).unwrap();
        let noise = unit_gauss();
        let b = g_bounds(6.0, &s, &noise).unwrap();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..=30_000 {
            let x = -6.0 + 12.0 * f64::from(i) / 30_000.0;
            let d = g_deriv(x, &s, &noise).unwrap();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        assert!((b.g_lo - lo).abs() < 1e-6);
        assert!((b.g_hi - hi).abs() < 1e-6);
    }

    #[test]
    fn underflowed_gaussian_lower_bound_is_not_an_error() {
        // huge radius: the band probability at the far end underflows, but
        // positivity is analytic for gaussian noise
        let b = g_bounds(60.0, &spec_0_15(), &unit_gauss()).unwrap();
        assert!(b.g_lo >= 0.0);
        assert!(b.g_hi > 0.9);
    }

    #[test]
    fn degenerate_constant_spec_fails_assumption() {
        let s = SaturationSpec::new(0.0, 0.0, 0.0, 0.0).unwrap();
        let err = g_bounds(1.0, &s, &unit_gauss()).unwrap_err();
        assert_eq!(err.exit_code(), 5);
    }

    #[test]
    fn tabulated_gaussian_grid_tracks_closed_form() {
        // dense tabulation of N(0,1) on [-9, 9]
        let n = 6001;
        let xs: Vec<f64> = (0..n).map(|i| -9.0 + 18.0 * i as f64 / (n - 1) as f64).collect();
        let cdf: Vec<f64> = xs.iter().map(|&t| std_normal_cdf(t)).collect();
        let pdf: Vec<f64> = xs.iter().map(|&t| std_normal_pdf(t)).collect();
        let tab = NoiseModel::tabulated(xs, cdf, pdf).unwrap();
        let gauss = unit_gauss();
        let s = spec_0_15();
        for x in [-2.0, 0.0, 1.3, 7.5, 14.2] {
            let gt = g_mean(x, &s, &tab).unwrap();
            let gg = g_mean(x, &s, &gauss).unwrap();
            assert!((gt - gg).abs() < 1e-5, "G tab vs gauss at {x}: {gt} vs {gg}");
            let st = sigma_var(x, &s, &tab).unwrap();
            let sg = sigma_var(x, &s, &gauss).unwrap();
            assert!((st - sg).abs() < 1e-5, "sigma tab vs gauss at {x}");
        }
    }

    #[test]
    fn tabulated_validation_rejects_bad_grids() {
        let xs = vec![-1.0, 0.0, 1.0];
        assert!(NoiseModel::tabulated(xs.clone(), vec![0.0, 0.6, 0.5], vec![0.3, 0.4, 0.3]).is_err());
        assert!(NoiseModel::tabulated(xs.clone(), vec![0.1, 0.5, 1.0], vec![0.3, 0.4, 0.3]).is_err());
        assert!(NoiseModel::tabulated(xs.clone(), vec![0.0, 0.5, 1.0], vec![0.3, -0.1, 0.3]).is_err());
        // mass far from 1
        assert!(NoiseModel::tabulated(xs, vec![0.0, 0.5, 1.0], vec![0.1, 0.1, 0.1]).is_err());
        assert!(NoiseModel::gaussian(0.0).is_err());
        assert!(NoiseModel::gaussian(-1.0).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_censored_spec() -> impl Strategy<Value = SaturationSpec> {
            (-5.0f64..5.0, 0.1f64..20.0)
                .prop_map(|(l, width)| SaturationSpec::censored(l, l + width).unwrap())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn mean_monotone_and_in_clamp_range(
                spec in arb_censored_spec(),
                var in 0.2f64..4.0,
                x1 in -12.0f64..12.0,
                gap in 0.0f64..6.0,
            ) {
                let noise = NoiseModel::gaussian(var).unwrap();
                let x2 = x1 + gap;
                let g1 = g_mean(x1, &spec, &noise).unwrap();
                let g2 = g_mean(x2, &spec, &noise).unwrap();
                prop_assert!(g1 <= g2 + 1e-12);
                prop_assert!(g1 >= spec.clamp_lo() - 1e-12 && g1 <= spec.clamp_hi() + 1e-12);
            }

            #[test]
            fn derivative_matches_finite_difference(
                spec in arb_censored_spec(),
                var in 0.2f64..4.0,
                x in -10.0f64..10.0,
            ) {
                let noise = NoiseModel::gaussian(var).unwrap();
                let h = 1e-5;
                let fd = (g_mean(x + h, &spec, &noise).unwrap()
                    - g_mean(x - h, &spec, &noise).unwrap())
                    / (2.0 * h);
                let d = g_deriv(x, &spec, &noise).unwrap();
                prop_assert!((fd - d).abs() < 1e-6, "fd {fd} vs {d} at {x}");
            }

            #[test]
            fn variance_positive_inside_range(
                spec in arb_censored_spec(),
                var in 0.2f64..4.0,
                x in -8.0f64..8.0,
            ) {
                let noise = NoiseModel::gaussian(var).unwrap();
                prop_assert!(sigma_var(x, &spec, &noise).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn spec_json_roundtrip_with_infinities() {
        let s = SaturationSpec::linear();
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("\"-inf\"") && j.contains("\"inf\""));
        let back: SaturationSpec = serde_json::from_str(&j).unwrap();
        assert_eq!(s, back);
        // deserialization revalidates
        let bad = r#"{"l": 2.0, "u": 1.0, "L": 0.0, "U": 3.0}"#;
        assert!(serde_json::from_str::<SaturationSpec>(bad).is_err());
    }
}
