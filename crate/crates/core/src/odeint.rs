//! Fixed-step integration of `dz/dt = I(t) ∘ gamma(t, z)` and exact reverse
//! passes through the recorded discretization.
//!
//! In event-aligned mode every switch time of the indicator path is inserted
//! into the uniform base grid, so the mask is constant on every step and the
//! scheme integrates the piecewise dynamics without mask-placement error. The
//! fixed-grid mode reads the mask at each uniform step's left endpoint instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{drift_input, HiddenMasks, MlpCache, MlpParams};
use crate::renewal::{merged_event_grid, IndicatorPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepScheme {
    pub method: Method,
    /// Number of uniform base steps over `[0, T]`.
    pub steps: usize,
}

impl StepScheme {
    pub fn new(method: Method, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("step count must be >= 1".into()));
        }
        Ok(Self { method, steps })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    #[default]
    EventAligned,
    FixedGrid,
}

/// `steps + 1` points `k * (T / steps)`, with the last point pinned to `T`.
pub fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
    let h = horizon / steps as f64;
    let mut grid: Vec<f64> = (0..steps).map(|k| k as f64 * h).collect();
    grid.push(horizon);
    grid
}

/// The drift network plus the optional naive-dropout hidden masks frozen for
/// one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Drift<'a> {
    pub params: &'a MlpParams,
    pub hidden_masks: Option<&'a HiddenMasks>,
}

impl<'a> Drift<'a> {
    pub fn plain(params: &'a MlpParams) -> Self {
        Self {
            params,
            hidden_masks: None,
        }
    }

    fn eval(&self, t: f64, z: &[f64]) -> MlpCache {
        self.params.forward_cached(&drift_input(t, z), self.hidden_masks)
    }

    /// Accumulates `d<cot, gamma>/dtheta` into `grads`, returns `d<cot, gamma>/dz`.
    fn vjp(&self, cache: &MlpCache, cot: &[f64], grads: &mut MlpParams) -> Vec<f64> {
        let mut g = self
            .params
            .backward_accumulate(cache, cot, self.hidden_masks, grads);
        g.remove(0);
        g
    }

    fn fingerprint(&self) -> u64 {
        let mut h = WordHash::default();
        for s in self.params.slices() {
            s.iter().for_each(|v| h.write(v.to_bits()));
        }
        if let Some(masks) = self.hidden_masks {
            masks.iter().flatten().for_each(|v| h.write(v.to_bits()));
        }
        h.0
    }

    fn check(&self, d: usize) -> Result<()> {
        if self.params.input_dim() != d + 1 || self.params.output_dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "drift maps {} -> {}, state has {d} entries",
                self.params.input_dim(),
                self.params.output_dim()
            )));
        }
        if let Some(masks) = self.hidden_masks {
            let widths = self.params.hidden_widths();
            if masks.len() != widths.len() || masks.iter().zip(&widths).any(|(m, &w)| m.len() != w) {
                return Err(Error::ShapeMismatch("hidden masks do not match drift widths".into()));
            }
        }
        Ok(())
    }
}

/// Word-at-a-time multiplicative hash of parameter bit patterns.
struct WordHash(u64);

impl Default for WordHash {
    fn default() -> Self {
        WordHash(0xcbf2_9ce4_8422_2325)
    }
}

impl WordHash {
    fn write(&mut self, v: u64) {
        self.0 = (self.0 ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(29);
    }
}

/// One step of the recorded solve.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub h: f64,
    pub mask: Vec<bool>,
    /// State at the start of the step.
    pub state: Vec<f64>,
    /// Drift evaluations of the step (one for Euler, four for RK4).
    caches: Vec<MlpCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTape {
    method: Method,
    horizon: f64,
    records: Vec<StepRecord>,
    final_state: Vec<f64>,
    fingerprint: u64,
}

impl TrajectoryTape {
    pub fn method(&self) -> Method {
        self.method
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn final_state(&self) -> &[f64] {
        &self.final_state
    }

    /// Step start times followed by `T`.
    pub fn grid(&self) -> Vec<f64> {
        let mut g: Vec<f64> = self.records.iter().map(|r| r.t).collect();
        g.push(self.horizon);
        g
    }

    /// Every recorded state, initial through final.
    pub fn states(&self) -> Vec<&[f64]> {
        let mut s: Vec<&[f64]> = self.records.iter().map(|r| r.state.as_slice()).collect();
        s.push(&self.final_state);
        s
    }
}

/// Options for [`integrate_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub scheme: StepScheme,
    pub horizon: f64,
    pub grid: GridMode,
}

/// Solves the plain (no path) or masked dynamics on `[0, T]` with event-aligned
/// stepping.
pub fn integrate(
    drift: &MlpParams,
    z0: &[f64],
    scheme: StepScheme,
    horizon: f64,
    path: Option<&IndicatorPath>,
) -> Result<(Vec<f64>, TrajectoryTape)> {
    let opts = SolveOptions {
        scheme,
        horizon,
        grid: GridMode::EventAligned,
    };
    integrate_with(&Drift::plain(drift), z0, &opts, path)
}

pub fn integrate_with(
    drift: &Drift<'_>,
    z0: &[f64],
    opts: &SolveOptions,
    path: Option<&IndicatorPath>,
) -> Result<(Vec<f64>, TrajectoryTape)> {
    let d = z0.len();
    drift.check(d)?;
    if opts.scheme.steps == 0 {
        return Err(Error::Config("step count must be >= 1".into()));
    }
    if !(opts.horizon.is_finite() && opts.horizon > 0.0) {
        return Err(Error::InvalidParameter(format!("horizon {}", opts.horizon)));
    }
    if let Some(path) = path {
        if path.dims() != d {
            return Err(Error::ShapeMismatch(format!(
                "path has {} dimensions, state has {d}",
                path.dims()
            )));
        }
        if path.horizon() != opts.horizon {
            return Err(Error::InvalidParameter(format!(
                "path horizon {} differs from solve horizon {}",
                path.horizon(),
                opts.horizon
            )));
        }
    }

    let base = uniform_grid(opts.horizon, opts.scheme.steps);
    let grid = match (path, opts.grid) {
        (Some(path), GridMode::EventAligned) => merged_event_grid(path, &base),
        _ => base,
    };
    let all_active = vec![true; d];

    let mut records = Vec::with_capacity(grid.len() - 1);
    let mut z = z0.to_vec();
    for w in grid.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        let mask = match (path, opts.grid) {
            (None, _) => all_active.clone(),
            // steps never straddle a switch, the midpoint is the safe probe
            (Some(path), GridMode::EventAligned) => path.mask_at(t + 0.5 * h),
            (Some(path), GridMode::FixedGrid) => path.mask_at(t),
        };
        let (next, caches) = match opts.scheme.method {
            Method::Euler => euler_step(drift, t, &z, &mask, h),
            Method::Rk4 => rk4_step(drift, t, &z, &mask, h),
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t: t + h });
        }
        records.push(StepRecord {
            t,
            h,
            mask,
            state: std::mem::replace(&mut z, next),
            caches,
        });
    }
    let tape = TrajectoryTape {
        method: opts.scheme.method,
        horizon: opts.horizon,
        records,
        final_state: z.clone(),
        fingerprint: drift.fingerprint(),
    };
    Ok((z, tape))
}

fn euler_step(drift: &Drift<'_>, t: f64, z: &[f64], mask: &[bool], h: f64) -> (Vec<f64>, Vec<MlpCache>) {
    let cache = drift.eval(t, z);
    let next = z
        .iter()
        .zip(&cache.output)
        .zip(mask)
        .map(|((&zi, &gi), &on)| if on { zi + h * gi } else { zi })
        .collect();
    (next, vec![cache])
}

fn masked(k: &[f64], mask: &[bool]) -> Vec<f64> {
    k.iter()
        .zip(mask)
        .map(|(&v, &on)| if on { v } else { 0.0 })
        .collect()
}

fn offset(z: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    z.iter().zip(k).map(|(zi, ki)| zi + a * ki).collect()
}

fn rk4_step(
    drift: &Drift<'_>,
    t: f64,
    z: &[f64],
    mask: &[bool],
    h: f64,
) -> (Vec<f64>, Vec<MlpCache>) {
    let half = 0.5 * h;
    let c1 = drift.eval(t, z);
    let k1 = masked(&c1.output, mask);
    let c2 = drift.eval(t + half, &offset(z, half, &k1));
    let k2 = masked(&c2.output, mask);
    let c3 = drift.eval(t + half, &offset(z, half, &k2));
    let k3 = masked(&c3.output, mask);
    let c4 = drift.eval(t + h, &offset(z, h, &k3));
    let k4 = masked(&c4.output, mask);
    let next = (0..z.len())
        .map(|i| {
            if mask[i] {
                z[i] + h * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0
            } else {
                z[i]
            }
        })
        .collect();
    (next, vec![c1, c2, c3, c4])
}

/// Reverse pass through a recorded solve. Returns the drift parameter
/// gradient and `dL/dz0`.
pub fn integrate_backward(
    drift: &MlpParams,
    tape: &TrajectoryTape,
    dl_dzt: &[f64],
) -> Result<(MlpParams, Vec<f64>)> {
    integrate_backward_with(&Drift::plain(drift), tape, dl_dzt)
}

pub fn integrate_backward_with(
    drift: &Drift<'_>,
    tape: &TrajectoryTape,
    dl_dzt: &[f64],
) -> Result<(MlpParams, Vec<f64>)> {
    if dl_dzt.len() != tape.final_state.len() {
        return Err(Error::TapeMismatch(format!(
            "cotangent has {} entries, tape state has {}",
            dl_dzt.len(),
            tape.final_state.len()
        )));
    }
    if drift.fingerprint() != tape.fingerprint {
        return Err(Error::TapeMismatch(
            "drift parameters differ from those used to record the tape".into(),
        ));
    }
    let mut grads = drift.params.zeros_like();
    let mut adj = dl_dzt.to_vec();
    for rec in tape.records.iter().rev() {
        adj = match tape.method {
            Method::Euler => euler_backward(drift, rec, adj, &mut grads),
            Method::Rk4 => rk4_backward(drift, rec, adj, &mut grads),
        };
    }
    Ok((grads, adj))
}

fn mask_cot(v: &[f64], mask: &[bool], scale: f64) -> Vec<f64> {
    v.iter()
        .zip(mask)
        .map(|(&x, &on)| if on { scale * x } else { 0.0 })
        .collect()
}

fn euler_backward(drift: &Drift<'_>, rec: &StepRecord, adj: Vec<f64>, grads: &mut MlpParams) -> Vec<f64> {
    let cot = mask_cot(&adj, &rec.mask, rec.h);
    if cot.iter().all(|&c| c == 0.0) {
        return adj;
    }
    let dz = drift.vjp(&rec.caches[0], &cot, grads);
    adj.iter().zip(&dz).map(|(a, b)| a + b).collect()
}

fn rk4_backward(drift: &Drift<'_>, rec: &StepRecord, adj: Vec<f64>, grads: &mut MlpParams) -> Vec<f64> {
    if rec.mask.iter().all(|&on| !on) {
        return adj;
    }
    let h = rec.h;
    let half = 0.5 * h;
    let c = &rec.caches;
    let mut dz = adj.clone();

    // bar k_s before masking: the mask is applied again inside mask_cot
    let mut dk1 = mask_cot(&adj, &rec.mask, h / 6.0);
    let mut dk2 = mask_cot(&adj, &rec.mask, h / 3.0);
    let mut dk3 = dk2.clone();
    let dk4 = dk1.clone();

    let dy4 = drift.vjp(&c[3], &dk4, grads);
    for i in 0..dz.len() {
        dz[i] += dy4[i];
        dk3[i] += if rec.mask[i] { h * dy4[i] } else { 0.0 };
    }
    let dk3 = mask_cot(&dk3, &rec.mask, 1.0);
    let dy3 = drift.vjp(&c[2], &dk3, grads);
    for i in 0..dz.len() {
        dz[i] += dy3[i];
        dk2[i] += if rec.mask[i] { half * dy3[i] } else { 0.0 };
    }
    let dk2 = mask_cot(&dk2, &rec.mask, 1.0);
    let dy2 = drift.vjp(&c[1], &dk2, grads);
    for i in 0..dz.len() {
        dz[i] += dy2[i];
        dk1[i] += if rec.mask[i] { half * dy2[i] } else { 0.0 };
    }
    let dk1 = mask_cot(&dk1, &rec.mask, 1.0);
    let dy1 = drift.vjp(&c[0], &dk1, grads);
    for i in 0..dz.len() {
        dz[i] += dy1[i];
    }
    dz
}

/// One Euler step of the masked dynamics, `z + h * (mask ∘ gamma(t, z))`.
/// With `h = 1` this is a residual block with dropout on its branch.
pub fn discrete_equivalence_step(
    drift: &MlpParams,
    t: f64,
    z: &[f64],
    mask: &[bool],
    h: f64,
) -> Result<Vec<f64>> {
    let d = Drift::plain(drift);
    d.check(z.len())?;
    if mask.len() != z.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask has {} entries, state has {}",
            mask.len(),
            z.len()
        )));
    }
    Ok(euler_step(&d, t, z, mask, h).0)
}
