//! Studentized range distribution by nested adaptive Gauss–Kronrod quadrature.
#![allow(clippy::excessive_precision)]

use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
// 7-point Gauss weights at XGK[1], XGK[3], XGK[5], XGK[7]
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let dx = h * XGK[i];
        let s = f(c - dx) + f(c + dx);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

struct Quad {
    tol: f64,
    max_depth: u32,
    worst: f64,
}

impl Quad {
    fn run<F: Fn(f64) -> f64>(&mut self, f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (v, err) = gk15(f, a, b);
        if err <= tol.max(4.0 * f64::EPSILON * v.abs()) || depth >= self.max_depth {
            if err > tol.max(4.0 * f64::EPSILON * v.abs()) {
                self.worst = self.worst.max(err);
            }
            return v;
        }
        let m = 0.5 * (a + b);
        self.run(f, a, m, 0.5 * tol, depth + 1) + self.run(f, m, b, 0.5 * tol, depth + 1)
    }
}

/// Integrates `f` over `[a, b]` to absolute tolerance `tol`; returns the value
/// and the largest unresolved local error estimate (0 when converged).
pub(crate) fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> (f64, f64) {
    let mut q = Quad {
        tol,
        max_depth: 30,
        worst: 0.0,
    };
    let v = q.run(&f, a, b, q.tol, 0);
    (v, q.worst)
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `Phi(z) - Phi(z - w)` without cancellation in the upper tail.
fn band(z: f64, w: f64) -> f64 {
    if z - w > 0.0 {
        norm_cdf(w - z) - norm_cdf(-z)
    } else {
        norm_cdf(z) - norm_cdf(z - w)
    }
}

const INNER_TOL: f64 = 1e-11;
const OUTER_TOL: f64 = 1e-9;

/// Range distribution of `k` standard normals: `P(range <= w)`.
fn range_cdf_inf(w: f64, k: u32) -> (f64, f64) {
    if w <= 0.0 {
        return (0.0, 0.0);
    }
    let km1 = (k - 1) as i32;
    let (v, err) = integrate(|z| norm_pdf(z) * band(z, w).powi(km1), -8.5, 8.5, INNER_TOL);
    ((k as f64 * v).clamp(0.0, 1.0), k as f64 * err)
}

/// CDF of the studentized range `Q(k, df)` at `q`. `df` may be
/// `f64::INFINITY`, which gives the normal-range distribution.
pub fn studentized_range_cdf(q: f64, k: u32, df: f64) -> Result<f64> {
    if !(q >= 0.0) || k < 2 || !(df >= 1.0) {
        return Err(Error::Stats(format!(
            "studentized range needs q >= 0, k >= 2, df >= 1 (got q={q}, k={k}, df={df})"
        )));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if q.is_infinite() {
        return Ok(1.0);
    }
    if df.is_infinite() {
        let (v, err) = range_cdf_inf(q, k);
        return converged(v, err, q, k, df);
    }
    // density of s = sqrt(chi2_df / df)
    let half = 0.5 * df;
    let log_norm = half * df.ln() - ln_gamma(half) - (half - 1.0) * std::f64::consts::LN_2;
    let dens = |s: f64| {
        if s <= 0.0 {
            return if df == 1.0 { (log_norm).exp() } else { 0.0 };
        }
        (log_norm + (df - 1.0) * s.ln() - half * s * s).exp()
    };
    let sd = (1.0 / (2.0 * df)).sqrt().max(0.05);
    let lo = (1.0 - 10.0 * sd).max(0.0);
    let hi = 1.0 + 12.0 * sd;
    let inner_err = std::cell::Cell::new(0.0f64);
    let (v, err) = integrate(
        |s| {
            let (p, e) = range_cdf_inf(q * s, k);
            inner_err.set(inner_err.get().max(e));
            dens(s) * p
        },
        lo,
        hi,
        OUTER_TOL,
    );
    converged(v.clamp(0.0, 1.0), err + inner_err.get() * (hi - lo), q, k, df)
}

fn converged(v: f64, err: f64, q: f64, k: u32, df: f64) -> Result<f64> {
    if err > 1e-6 {
        return Err(Error::Numeric(format!(
            "studentized range integral did not converge (q={q}, k={k}, df={df}, error estimate {err:.3e})"
        )));
    }
    Ok(v)
}

/// Upper-tail probability `P(Q > q)`.
pub fn studentized_range_sf(q: f64, k: u32, df: f64) -> Result<f64> {
    Ok((1.0 - studentized_range_cdf(q, k, df)?).clamp(0.0, 1.0))
}

/// Quantile of the studentized range by bisection (`|error| < 1e-9` in q).
pub fn studentized_range_quantile(p: f64, k: u32, df: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Stats(format!("quantile needs p in (0, 1), got {p}")));
    }
    let mut hi = 1.0;
    while studentized_range_cdf(hi, k, df)? < p {
        hi *= 2.0;
        if hi > 1e4 {
            return Err(Error::Numeric(format!("no quantile bracket for p={p}, k={k}, df={df}")));
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if studentized_range_cdf(mid, k, df)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
