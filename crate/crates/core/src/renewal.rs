//! Exponential alternating renewal process.
//!
//! Each latent dimension alternates between an active period of length
//! `X ~ Exp(lambda1)` and an inactive period of length `Y ~ Exp(lambda2)`,
//! starting active at `t = 0`. This module holds the closed forms for the
//! availability `A(t)`, the dropout rate `p = 1 - A(T)` and the renewal
//! function `m(t) = E[N(t)]`, the `(p, m) -> (lambda1, lambda2)` solver, path
//! sampling, and brute-force Monte-Carlo estimators used to check the closed
//! forms.

use rand::Rng;

use crate::error::{Error, Result};

/// Default cap on switch events per dimension per path.
pub const DEFAULT_EVENT_CAP: usize = 1_000_000;

/// Grid points closer than this are merged.
pub const GRID_DEDUP_TOL: f64 = 1e-12;

/// Upper end of the admissible domain for `(lambda1 + lambda2) * T`.
pub const MAX_RATE_HORIZON: f64 = 1e9;

const SOLVER_MAX_ITER: usize = 200;
const SOLVER_M_TOL: f64 = 1e-12;
const FORWARD_TOL: f64 = 1e-10;

/// Rates of the active (`lambda1`) and inactive (`lambda2`) period lengths.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RenewalRates {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl RenewalRates {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(Self { lambda1, lambda2 })
    }

    fn total(&self) -> f64 {
        self.lambda1 + self.lambda2
    }
}

/// User-facing dropout hyperparameters: terminal dropout rate `p`, expected
/// renewal count `m` on `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DropoutSpec {
    pub p: f64,
    pub m: f64,
    pub horizon: f64,
}

impl DropoutSpec {
    pub fn new(p: f64, m: f64, horizon: f64) -> Result<Self> {
        let spec = Self { p, m, horizon };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "p must lie in (0, 1), got {}",
                self.p
            )));
        }
        if !(self.m.is_finite() && self.m > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "m must be finite and > 0, got {}",
                self.m
            )));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "T must be finite and > 0, got {}",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

/// `x - (1 - e^{-x})`, accurate for small `x`.
fn excess(x: f64) -> f64 {
    if x < 0.1 {
        // x^2/2 - x^3/6 + ... through x^9, Horner form
        let mut acc = 0.0;
        let mut fact = 362_880.0; // 9!
        for k in (2..=9).rev() {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            acc = acc * x + sign / fact;
            fact /= k as f64;
        }
        acc * x * x
    } else {
        x + (-x).exp_m1()
    }
}

/// Probability that a dimension is active at time `t`.
pub fn availability(rates: &RenewalRates, t: f64) -> f64 {
    let u = rates.total();
    rates.lambda2 / u + rates.lambda1 / u * (-u * t).exp()
}

/// Probability that a dimension is inactive at the horizon.
pub fn dropout_rate(rates: &RenewalRates, horizon: f64) -> f64 {
    let u = rates.total();
    rates.lambda1 / u * -(-u * horizon).exp_m1()
}

/// Expected number of completed active+inactive cycles in `[0, t]`.
pub fn expected_renewals(rates: &RenewalRates, t: f64) -> f64 {
    let u = rates.total();
    rates.lambda1 * rates.lambda2 / (u * u) * excess(u * t)
}

/// Forward residuals `(dropout_rate - p, expected_renewals - m)`.
pub fn forward_residuals(rates: &RenewalRates, spec: &DropoutSpec) -> (f64, f64) {
    (
        dropout_rate(rates, spec.horizon) - spec.p,
        expected_renewals(rates, spec.horizon) - spec.m,
    )
}

/// Closed-form large-horizon pair `(m / ((1-p) T), m / (p T))`.
pub fn approx_rates(spec: &DropoutSpec) -> RenewalRates {
    RenewalRates {
        lambda1: spec.m / ((1.0 - spec.p) * spec.horizon),
        lambda2: spec.m / (spec.p * spec.horizon),
    }
}

/// The dropout-rate equation pins the active fraction `f = lambda1 / u` once
/// the dimensionless total rate `x = u T` is fixed. This reduces the 2-D system
/// to `renewals(x) = m` on `(x_min, MAX_RATE_HORIZON]`.
struct Reduced {
    p: f64,
}

impl Reduced {
    fn x_min(&self) -> f64 {
        -(-self.p).ln_1p()
    }

    /// `(f, 1 - f)` at `x`.
    fn fractions(&self, x: f64) -> (f64, f64) {
        let s = -(-x).exp_m1();
        (self.p / s, (s - self.p) / s)
    }

    fn renewals(&self, x: f64) -> f64 {
        let (f, g) = self.fractions(x);
        f * g * excess(x)
    }

    fn rates(&self, x: f64, horizon: f64) -> RenewalRates {
        let u = x / horizon;
        let (f, g) = self.fractions(x);
        RenewalRates {
            lambda1: f * u,
            lambda2: g * u,
        }
    }
}

/// Solves for the rates that realize `spec` exactly.
pub fn solve_rates(spec: &DropoutSpec) -> Result<RenewalRates> {
    spec.validate()?;
    let red = Reduced { p: spec.p };
    let target = spec.m;
    let tol = SOLVER_M_TOL * target.max(1.0);
    let h = |x: f64| red.renewals(x) - target;

    let lo = red.x_min();
    let guess = approx_rates(spec);
    let mut hi = ((guess.lambda1 + guess.lambda2) * spec.horizon)
        .max(2.0 * lo)
        .min(MAX_RATE_HORIZON);
    let mut h_hi = h(hi);
    while h_hi < 0.0 {
        if hi >= MAX_RATE_HORIZON {
            let rates = red.rates(MAX_RATE_HORIZON, spec.horizon);
            let (p_residual, m_residual) = forward_residuals(&rates, spec);
            return Err(Error::NoSolution {
                p: spec.p,
                m: spec.m,
                horizon: spec.horizon,
                p_residual,
                m_residual,
            });
        }
        hi = (hi * 2.0).min(MAX_RATE_HORIZON);
        h_hi = h(hi);
    }

    let (x, iterations) = brent(h, lo, -target, hi, h_hi, tol, SOLVER_MAX_ITER);
    let rates = red.rates(x, spec.horizon);
    let (p_residual, m_residual) = forward_residuals(&rates, spec);
    let ok = rates.lambda1 > 0.0
        && rates.lambda2 > 0.0
        && rates.lambda1.is_finite()
        && rates.lambda2.is_finite()
        && p_residual.abs() <= FORWARD_TOL
        && m_residual.abs() <= FORWARD_TOL * target.max(1.0);
    if !ok {
        return Err(Error::NonConvergence {
            iterations,
            p_residual,
            m_residual,
        });
    }
    Ok(rates)
}

/// Brent's bracketing root finder on `[a, b]` with `f(a) < 0 < f(b)`.
/// Returns the best abscissa and the iteration count.
fn brent(
    f: impl Fn(f64) -> f64,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    ftol: f64,
    max_iter: usize,
) -> (f64, usize) {
    let (mut a, mut fa, mut b, mut fb) = (a, fa, b, fb);
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for iter in 1..=max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let xtol = 2.0 * f64::EPSILON * b.abs();
        let half = 0.5 * (c - b);
        if fb.abs() <= ftol || half.abs() <= xtol {
            return (b, iter);
        }
        if e.abs() >= xtol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * half * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * half * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * half * q - (xtol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = half;
                e = d;
            }
        } else {
            d = half;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > xtol {
            d
        } else {
            xtol.copysign(half)
        };
        fb = f(b);
    }
    (b, max_iter)
}

fn exp_draw<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    // U on (0, 1]
    let u = 1.0 - rng.random::<f64>();
    -u.ln() / rate
}

/// Per-dimension switch times of a sampled indicator `I(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorPath {
    dims: usize,
    horizon: f64,
    switch_times: Vec<Vec<f64>>,
}

impl IndicatorPath {
    /// Builds a path from explicit switch times, one strictly increasing
    /// sequence in `(0, horizon)` per dimension.
    pub fn from_switch_times(horizon: f64, switch_times: Vec<Vec<f64>>) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon {horizon}")));
        }
        if switch_times.is_empty() {
            return Err(Error::InvalidParameter("path needs at least one dimension".into()));
        }
        for (i, times) in switch_times.iter().enumerate() {
            if times.iter().any(|&t| !(t > 0.0 && t < horizon)) {
                return Err(Error::InvalidParameter(format!(
                    "dimension {i}: switch times must lie in (0, {horizon})"
                )));
            }
            if times.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidParameter(format!(
                    "dimension {i}: switch times must be strictly increasing"
                )));
            }
        }
        Ok(Self {
            dims: switch_times.len(),
            horizon,
            switch_times,
        })
    }

    /// A path with no switches: every dimension active on `[0, horizon]`.
    pub fn always_active(dims: usize, horizon: f64) -> Self {
        Self {
            dims,
            horizon,
            switch_times: vec![Vec::new(); dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn switch_times(&self, dim: usize) -> &[f64] {
        &self.switch_times[dim]
    }

    pub fn total_switches(&self) -> usize {
        self.switch_times.iter().map(Vec::len).sum()
    }

    /// Completed renewals of `dim`, i.e. the number of `S_{2n} <= T`.
    pub fn renewals(&self, dim: usize) -> usize {
        self.switch_times[dim].len() / 2
    }

    /// Indicator value per dimension at `t`.
    pub fn indicator_at(&self, t: f64) -> Result<Vec<bool>> {
        if !(t >= 0.0 && t <= self.horizon) {
            return Err(Error::OutOfHorizon {
                t,
                horizon: self.horizon,
            });
        }
        Ok(self.mask_at(t))
    }

    pub(crate) fn mask_at(&self, t: f64) -> Vec<bool> {
        self.switch_times
            .iter()
            .map(|times| times.partition_point(|&s| s <= t) % 2 == 0)
            .collect()
    }
}

/// Samples an independent alternating renewal path for each of `dims`
/// dimensions on `[0, horizon]`.
pub fn sample_indicator_path<R: Rng + ?Sized>(
    rates: &RenewalRates,
    horizon: f64,
    dims: usize,
    rng: &mut R,
) -> Result<IndicatorPath> {
    sample_indicator_path_capped(rates, horizon, dims, DEFAULT_EVENT_CAP, rng)
}

pub fn sample_indicator_path_capped<R: Rng + ?Sized>(
    rates: &RenewalRates,
    horizon: f64,
    dims: usize,
    event_cap: usize,
    rng: &mut R,
) -> Result<IndicatorPath> {
    let mut switch_times = Vec::with_capacity(dims);
    for dim in 0..dims {
        let mut times = Vec::new();
        let mut t = 0.0;
        let mut active = true;
        loop {
            t += exp_draw(rng, if active { rates.lambda1 } else { rates.lambda2 });
            if t >= horizon {
                break;
            }
            if times.len() == event_cap {
                return Err(Error::EventCapExceeded {
                    dim,
                    cap: event_cap,
                });
            }
            times.push(t);
            active = !active;
        }
        switch_times.push(times);
    }
    Ok(IndicatorPath {
        dims,
        horizon,
        switch_times,
    })
}

/// Union of `base_grid` and every switch time of `path`, sorted, with points
/// closer than [`GRID_DEDUP_TOL`] merged (base-grid points win).
pub fn merged_event_grid(path: &IndicatorPath, base_grid: &[f64]) -> Vec<f64> {
    if path.total_switches() == 0 {
        return base_grid.to_vec();
    }
    let mut points: Vec<(f64, bool)> = base_grid.iter().map(|&t| (t, true)).collect();
    for times in &path.switch_times {
        points.extend(times.iter().map(|&t| (t, false)));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));

    let mut merged: Vec<(f64, bool)> = Vec::with_capacity(points.len());
    for (t, is_base) in points {
        match merged.last_mut() {
            Some(last) if t - last.0 <= GRID_DEDUP_TOL => {
                if is_base && !last.1 {
                    *last = (t, true);
                }
            }
            _ => merged.push((t, is_base)),
        }
    }
    merged.into_iter().map(|(t, _)| t).collect()
}

fn simulate_single<R: Rng + ?Sized>(rates: &RenewalRates, horizon: f64, rng: &mut R) -> (bool, u64) {
    let mut t = 0.0;
    let mut active = true;
    let mut switches = 0u64;
    loop {
        t += exp_draw(rng, if active { rates.lambda1 } else { rates.lambda2 });
        if t > horizon {
            return (active, switches / 2);
        }
        switches += 1;
        active = !active;
    }
}

/// Brute-force estimate of `A(horizon)` with its binomial standard error.
pub fn mc_estimate_availability<R: Rng + ?Sized>(
    rates: &RenewalRates,
    horizon: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    check_samples(n_samples)?;
    let active = (0..n_samples)
        .filter(|_| simulate_single(rates, horizon, rng).0)
        .count();
    let value = active as f64 / n_samples as f64;
    Ok(McEstimate {
        value,
        std_error: (value * (1.0 - value) / n_samples as f64).sqrt(),
        n_samples,
    })
}

/// Brute-force estimate of `E[N(horizon)]` with its sample standard error.
pub fn mc_estimate_renewals<R: Rng + ?Sized>(
    rates: &RenewalRates,
    horizon: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    check_samples(n_samples)?;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        let n = simulate_single(rates, horizon, rng).1 as f64;
        sum += n;
        sum_sq += n * n;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(McEstimate {
        value: mean,
        std_error: (var / n).sqrt(),
        n_samples,
    })
}

fn check_samples(n: usize) -> Result<()> {
    if n < 100 {
        return Err(Error::InvalidParameter(format!(
            "Monte-Carlo estimates need at least 100 samples, got {n}"
        )));
    }
    Ok(())
}
