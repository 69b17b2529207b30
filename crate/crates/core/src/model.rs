//! The classification pipeline `x -> zeta(x) = z(0) -> ODE solve -> z(T) -> MLP -> logits`
//! under one of three dropout modes.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{
    affine_backward, affine_forward, classifier_backward, cross_entropy, cross_entropy_backward,
    init_affine, init_mlp, Activation, AffineParams, Checkpoint, HiddenMasks, MlpParams,
};
use crate::odeint::{
    integrate_backward_with, integrate_with, Drift, GridMode, SolveOptions, StepScheme,
    TrajectoryTape,
};
use crate::renewal::{sample_indicator_path, solve_rates, DropoutSpec, IndicatorPath, RenewalRates};
use crate::stream::stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DropoutMode {
    None,
    /// Renewal-process masks on the latent dynamics.
    Continuum { p: f64, m: f64 },
    /// Inverted Bernoulli dropout on the drift network's hidden units.
    NaiveDrift { p: f64 },
}

impl DropoutMode {
    pub fn name(&self) -> &'static str {
        match self {
            DropoutMode::None => "none",
            DropoutMode::Continuum { .. } => "continuum",
            DropoutMode::NaiveDrift { .. } => "naive_drift",
        }
    }
}

fn default_drift_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_classifier_hidden() -> Vec<usize> {
    vec![64]
}

fn default_tanh() -> Activation {
    Activation::Tanh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_x: usize,
    pub d_z: usize,
    pub n_classes: usize,
    pub horizon: f64,
    pub scheme: StepScheme,
    #[serde(default)]
    pub grid: GridMode,
    pub dropout: DropoutMode,
    #[serde(default = "default_drift_hidden")]
    pub drift_hidden: Vec<usize>,
    #[serde(default = "default_tanh")]
    pub drift_activation: Activation,
    #[serde(default = "default_classifier_hidden")]
    pub classifier_hidden: Vec<usize>,
    #[serde(default = "default_tanh")]
    pub classifier_activation: Activation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("d_x", self.d_x), ("d_z", self.d_z)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be >= 2".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be > 0, got {}", self.horizon)));
        }
        if self.scheme.steps == 0 {
            return Err(Error::Config("scheme.steps must be >= 1".into()));
        }
        if self.drift_hidden.contains(&0) || self.classifier_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        match self.dropout {
            DropoutMode::None => {}
            DropoutMode::Continuum { p, m } => DropoutSpec::new(p, m, self.horizon)
                .map(|_| ())
                .map_err(|e| Error::Config(e.to_string()))?,
            DropoutMode::NaiveDrift { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::Config(format!("naive dropout p must lie in [0, 1), got {p}")));
                }
                if self.drift_hidden.is_empty() {
                    return Err(Error::Config("naive drift dropout needs a hidden layer".into()));
                }
            }
        }
        Ok(())
    }

    pub fn drift_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.d_z + 1];
        s.extend(&self.drift_hidden);
        s.push(self.d_z);
        s
    }

    pub fn classifier_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.d_z];
        s.extend(&self.classifier_hidden);
        s.push(self.n_classes);
        s
    }

    /// Architecture fields recorded in checkpoints.
    pub fn descriptor(&self) -> BTreeMap<String, String> {
        let join = |v: Vec<usize>| v.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        BTreeMap::from([
            ("d_x".to_string(), self.d_x.to_string()),
            ("d_z".to_string(), self.d_z.to_string()),
            ("n_classes".to_string(), self.n_classes.to_string()),
            ("drift_sizes".to_string(), join(self.drift_sizes())),
            ("drift_activation".to_string(), self.drift_activation.name().to_string()),
            ("classifier_sizes".to_string(), join(self.classifier_sizes())),
            (
                "classifier_activation".to_string(),
                self.classifier_activation.name().to_string(),
            ),
        ])
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub zeta: AffineParams,
    pub gamma: MlpParams,
    pub mlp: MlpParams,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            zeta: AffineParams::zeros(self.zeta.output_dim(), self.zeta.input_dim()),
            gamma: self.gamma.zeros_like(),
            mlp: self.mlp.zeros_like(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.zeta.param_count() + self.gamma.param_count() + self.mlp.param_count()
    }

    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        [self.zeta.weight.as_slice(), self.zeta.bias.as_slice()]
            .into_iter()
            .chain(self.gamma.slices())
            .chain(self.mlp.slices())
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        [self.zeta.weight.as_mut_slice(), self.zeta.bias.as_mut_slice()]
            .into_iter()
            .chain(self.gamma.slices_mut())
            .chain(self.mlp.slices_mut())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().flat_map(|s| s.iter().copied()).collect()
    }

    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut rest = values;
        for s in self.slices_mut() {
            let (head, tail) = rest.split_at(s.len());
            s.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// `self += scale * other`, slice by slice.
    pub fn add_scaled(&mut self, scale: f64, other: &ModelParams) {
        for (a, b) in self.slices_mut().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }
}

/// Per-forward-pass randomness, frozen so that a pass can be replayed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StochasticDraw {
    pub path: Option<IndicatorPath>,
    pub hidden_masks: Option<HiddenMasks>,
}

/// Everything the reverse pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    x: Vec<f64>,
    draw: StochasticDraw,
    tape: TrajectoryTape,
    pub latent: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    pub fn tape(&self) -> &TrajectoryTape {
        &self.tape
    }

    pub fn draw(&self) -> &StochasticDraw {
        &self.draw
    }
}

/// A validated configuration with its renewal rates resolved once.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    rates: Option<RenewalRates>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let rates = match config.dropout {
            DropoutMode::Continuum { p, m } => Some(solve_rates(&DropoutSpec::new(p, m, config.horizon)?)?),
            _ => None,
        };
        Ok(Self { config, rates })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Resolved `(lambda1, lambda2)` in continuum mode.
    pub fn rates(&self) -> Option<RenewalRates> {
        self.rates
    }

    pub fn is_continuum(&self) -> bool {
        self.rates.is_some()
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ModelParams> {
        let c = &self.config;
        Ok(ModelParams {
            zeta: init_affine(c.d_z, c.d_x, rng)?,
            gamma: init_mlp(&c.drift_sizes(), c.drift_activation, rng)?,
            mlp: init_mlp(&c.classifier_sizes(), c.classifier_activation, rng)?,
        })
    }

    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let c = &self.config;
        let ok = params.zeta.input_dim() == c.d_x
            && params.zeta.output_dim() == c.d_z
            && mlp_matches(&params.gamma, &c.drift_sizes(), c.drift_activation)
            && mlp_matches(&params.mlp, &c.classifier_sizes(), c.classifier_activation);
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("parameters do not match the model configuration".into()))
        }
    }

    /// Samples the randomness of one training-mode forward pass.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<StochasticDraw> {
        let c = &self.config;
        Ok(match c.dropout {
            DropoutMode::None => StochasticDraw::default(),
            DropoutMode::Continuum { .. } => {
                let rates = self.rates.expect("continuum rates resolved at construction");
                StochasticDraw {
                    path: Some(sample_indicator_path(&rates, c.horizon, c.d_z, rng)?),
                    hidden_masks: None,
                }
            }
            DropoutMode::NaiveDrift { p } => {
                let keep = 1.0 - p;
                let scale = 1.0 / keep;
                let masks = c
                    .drift_hidden
                    .iter()
                    .map(|&w| {
                        (0..w)
                            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                            .collect()
                    })
                    .collect();
                StochasticDraw {
                    path: None,
                    hidden_masks: Some(masks),
                }
            }
        })
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            scheme: self.config.scheme,
            horizon: self.config.horizon,
            grid: self.config.grid,
        }
    }

    /// `z(T)` for input `x` under a given draw.
    pub fn terminal_latent(&self, params: &ModelParams, x: &[f64], draw: &StochasticDraw) -> Result<Vec<f64>> {
        Ok(self.latent_with_tape(params, x, draw)?.0)
    }

    fn latent_with_tape(
        &self,
        params: &ModelParams,
        x: &[f64],
        draw: &StochasticDraw,
    ) -> Result<(Vec<f64>, TrajectoryTape)> {
        let z0 = affine_forward(&params.zeta, x)?;
        let drift = Drift {
            params: &params.gamma,
            hidden_masks: draw.hidden_masks.as_ref(),
        };
        integrate_with(&drift, &z0, &self.solve_options(), draw.path.as_ref())
    }

    pub fn classify(&self, params: &ModelParams, latent: &[f64]) -> Result<Vec<f64>> {
        params.mlp.forward(latent)
    }

    /// Forward pass under a fixed draw.
    pub fn forward_with(&self, params: &ModelParams, x: &[f64], draw: StochasticDraw) -> Result<ForwardTrace> {
        if x.len() != self.config.d_x {
            return Err(Error::ShapeMismatch(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.config.d_x
            )));
        }
        let (latent, tape) = self.latent_with_tape(params, x, &draw)?;
        let logits = self.classify(params, &latent)?;
        Ok(ForwardTrace {
            x: x.to_vec(),
            draw,
            tape,
            latent,
            logits,
        })
    }

    /// Training-mode forward pass with fresh randomness from `rng`.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        params: &ModelParams,
        x: &[f64],
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let draw = self.draw(rng)?;
        self.forward_with(params, x, draw)
    }

    /// Deterministic logits with dropout disabled. Continuum models must use
    /// Monte-Carlo inference instead.
    pub fn forward_eval(&self, params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
        if self.is_continuum() {
            return Err(Error::WrongMode(
                "continuum models predict through Monte-Carlo inference",
            ));
        }
        Ok(self.forward_with(params, x, StochasticDraw::default())?.logits)
    }

    /// Gradients of `<dlogits, logits>` through a recorded pass.
    pub fn backward(&self, params: &ModelParams, trace: &ForwardTrace, dlogits: &[f64]) -> Result<ModelParams> {
        let head = classifier_backward(&params.mlp, &trace.latent, dlogits)?;
        let drift = Drift {
            params: &params.gamma,
            hidden_masks: trace.draw.hidden_masks.as_ref(),
        };
        let (gamma, dz0) = integrate_backward_with(&drift, &trace.tape, &head.input)?;
        let zeta = affine_backward(&params.zeta, &trace.x, &dz0)?;
        Ok(ModelParams {
            zeta: zeta.params,
            gamma,
            mlp: head.params,
        })
    }

    /// Cross-entropy and its full gradient for one sample under a fixed draw.
    pub fn sample_loss_and_grads(
        &self,
        params: &ModelParams,
        x: &[f64],
        label: usize,
        draw: StochasticDraw,
    ) -> Result<(f64, ModelParams)> {
        let trace = self.forward_with(params, x, draw)?;
        let loss = cross_entropy(&trace.logits, label)?;
        let dlogits = cross_entropy_backward(&trace.logits, label)?;
        Ok((loss, self.backward(params, &trace, &dlogits)?))
    }

    /// Mean cross-entropy over a batch and its gradient. Slot `i` draws its
    /// randomness from `stream(seeds[i], 0)`; samples run in parallel and are
    /// reduced in slot order.
    pub fn loss_and_grads(
        &self,
        params: &ModelParams,
        xs: &[&[f64]],
        labels: &[usize],
        seeds: &[u64],
    ) -> Result<(f64, ModelParams)> {
        if xs.is_empty() {
            return Err(Error::EmptyInput);
        }
        if xs.len() != labels.len() || xs.len() != seeds.len() {
            return Err(Error::LengthMismatch(format!(
                "{} inputs, {} labels, {} seeds",
                xs.len(),
                labels.len(),
                seeds.len()
            )));
        }
        let per_sample: Vec<Result<(f64, ModelParams)>> = (0..xs.len())
            .into_par_iter()
            .map(|i| {
                let draw = self.draw(&mut stream(seeds[i], 0))?;
                self.sample_loss_and_grads(params, xs[i], labels[i], draw)
            })
            .collect();
        let n = xs.len() as f64;
        let mut total = 0.0;
        let mut grads = params.zeros_like();
        for r in per_sample {
            let (loss, g) = r?;
            total += loss;
            grads.add_scaled(1.0, &g);
        }
        for s in grads.slices_mut() {
            s.iter_mut().for_each(|v| *v /= n);
        }
        Ok((total / n, grads))
    }

    pub fn to_checkpoint(&self, params: &ModelParams) -> Result<Checkpoint> {
        self.check_params(params)?;
        Ok(Checkpoint {
            descriptor: self.config.descriptor(),
            values: params.flatten(),
        })
    }

    /// Restores parameters, rejecting checkpoints written for another
    /// architecture. Descriptor keys outside the architecture are ignored.
    pub fn from_checkpoint(&self, ckpt: &Checkpoint) -> Result<ModelParams> {
        for (k, want) in self.config.descriptor() {
            match ckpt.descriptor.get(&k) {
                Some(got) if *got == want => {}
                got => {
                    return Err(Error::CheckpointMismatch(format!(
                        "{k}: checkpoint has {got:?}, config needs {want:?}"
                    )))
                }
            }
        }
        let mut params = self.init_params(&mut stream(0, 0))?;
        params
            .assign(&ckpt.values)
            .map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
        Ok(params)
    }
}

fn mlp_matches(mlp: &MlpParams, sizes: &[usize], hidden: Activation) -> bool {
    let layers = mlp.layers();
    layers.len() + 1 == sizes.len()
        && layers.iter().enumerate().all(|(k, l)| {
            let act = if k + 1 == layers.len() { Activation::Identity } else { hidden };
            l.weight.cols() == sizes[k] && l.weight.rows() == sizes[k + 1] && l.activation == act
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odeint::Method;

    fn config(dropout: DropoutMode, method: Method) -> ModelConfig {
        ModelConfig {
            d_x: 3,
            d_z: 4,
            n_classes: 3,
            horizon: 1.0,
            scheme: StepScheme::new(method, 6).unwrap(),
            grid: GridMode::EventAligned,
            dropout,
            drift_hidden: vec![8],
            drift_activation: Activation::Tanh,
            classifier_hidden: vec![5],
            classifier_activation: Activation::Tanh,
        }
    }

    fn setup(dropout: DropoutMode, method: Method, seed: u64) -> (Model, ModelParams) {
        let model = Model::new(config(dropout, method)).unwrap();
        let params = model.init_params(&mut stream(seed, 1)).unwrap();
        (model, params)
    }

    const X: [f64; 3] = [0.3, -0.7, 1.1];

    #[test]
    fn config_validation() {
        let mut c = config(DropoutMode::Continuum { p: 1.5, m: 10.0 }, Method::Euler);
        assert!(matches!(Model::new(c.clone()), Err(Error::Config(_))));
        c.dropout = DropoutMode::NaiveDrift { p: 1.0 };
        assert!(matches!(Model::new(c.clone()), Err(Error::Config(_))));
        c.dropout = DropoutMode::None;
        c.n_classes = 1;
        assert!(Model::new(c).is_err());
    }

    #[test]
    fn config_json_round_trip_and_unknown_keys() {
        let c = config(DropoutMode::Continuum { p: 0.3, m: 10.0 }, Method::Rk4);
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains(r#""kind":"continuum""#));
        assert_eq!(serde_json::from_str::<ModelConfig>(&text).unwrap(), c);
        let bad = text.replacen('{', r#"{"depth":3,"#, 1);
        assert!(serde_json::from_str::<ModelConfig>(&bad).is_err());
        let minimal = r#"{"d_x":2,"d_z":3,"n_classes":2,"horizon":1.0,
            "scheme":{"method":"euler","steps":10},"dropout":{"kind":"none"}}"#;
        let m: ModelConfig = serde_json::from_str(minimal).unwrap();
        assert_eq!(m.drift_hidden, vec![64, 64]);
        assert_eq!(m.classifier_hidden, vec![64]);
        assert_eq!(m.grid, GridMode::EventAligned);
    }

    #[test]
    fn rates_are_resolved_once() {
        let (model, _) = setup(DropoutMode::Continuum { p: 0.5, m: 50.0 }, Method::Euler, 0);
        let r = model.rates().unwrap();
        assert!((r.lambda1 - r.lambda2).abs() < 1e-6 * r.lambda1);
        let spec = DropoutSpec::new(0.5, 50.0, 1.0).unwrap();
        let (dp, dm) = crate::renewal::forward_residuals(&r, &spec);
        assert!(dp.abs() < 1e-10 && dm.abs() < 1e-10 * 50.0);
    }

    #[test]
    fn naive_zero_and_continuum_without_switches_match_plain() {
        for method in [Method::Euler, Method::Rk4] {
            let (none, params) = setup(DropoutMode::None, method, 2);
            let (naive, _) = setup(DropoutMode::NaiveDrift { p: 0.0 }, method, 2);
            let (cont, _) = setup(DropoutMode::Continuum { p: 0.3, m: 5.0 }, method, 2);
            let a = none.forward_train(&params, &X, &mut stream(9, 0)).unwrap();
            let b = naive.forward_train(&params, &X, &mut stream(9, 0)).unwrap();
            let draw = StochasticDraw {
                path: Some(IndicatorPath::always_active(4, 1.0)),
                hidden_masks: None,
            };
            let c = cont.forward_with(&params, &X, draw).unwrap();
            assert_eq!(a.tape().states(), b.tape().states());
            assert_eq!(a.tape().states(), c.tape().states());
            assert_eq!(a.logits, c.logits);
        }
    }

    #[test]
    fn forward_is_deterministic_under_seed() {
        let (model, params) = setup(DropoutMode::Continuum { p: 0.3, m: 10.0 }, Method::Rk4, 3);
        let a = model.forward_train(&params, &X, &mut stream(4, 4)).unwrap();
        let b = model.forward_train(&params, &X, &mut stream(4, 4)).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn eval_modes() {
        let (none, params) = setup(DropoutMode::None, Method::Euler, 5);
        let eval = none.forward_eval(&params, &X).unwrap();
        let train = none.forward_train(&params, &X, &mut stream(0, 0)).unwrap();
        assert_eq!(eval, train.logits);
        let (naive, _) = setup(DropoutMode::NaiveDrift { p: 0.4 }, Method::Euler, 5);
        assert_eq!(naive.forward_eval(&params, &X).unwrap(), eval);
        let (cont, _) = setup(DropoutMode::Continuum { p: 0.4, m: 5.0 }, Method::Euler, 5);
        assert!(matches!(cont.forward_eval(&params, &X), Err(Error::WrongMode(_))));
    }

    #[test]
    fn naive_masks_are_inverted_bernoulli() {
        let (model, _) = setup(DropoutMode::NaiveDrift { p: 0.25 }, Method::Euler, 0);
        let draw = model.draw(&mut stream(1, 0)).unwrap();
        let masks = draw.hidden_masks.unwrap();
        assert_eq!(masks.len(), 1);
        assert!(masks[0].iter().all(|&m| m == 0.0 || m == 1.0 / 0.75));
    }

    #[test]
    fn zero_classifier_gives_log_k() {
        for dropout in [DropoutMode::None, DropoutMode::Continuum { p: 0.3, m: 10.0 }] {
            let (model, mut params) = setup(dropout, Method::Rk4, 6);
            let last = params.mlp.layers().len() - 1;
            let layer = &mut params.mlp.layers_mut()[last];
            layer.weight.as_mut_slice().fill(0.0);
            layer.bias.fill(0.0);
            let (loss, _) = model.loss_and_grads(&params, &[&X], &[1], &[7]).unwrap();
            assert!((loss - 3f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicated_slot_with_same_seed_matches_single() {
        let (model, params) = setup(DropoutMode::Continuum { p: 0.3, m: 10.0 }, Method::Euler, 7);
        let (one, g1) = model.loss_and_grads(&params, &[&X], &[2], &[11]).unwrap();
        let (two, g2) = model.loss_and_grads(&params, &[&X, &X], &[2, 2], &[11, 11]).unwrap();
        assert_eq!(one, two);
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
        let (other, _) = model.loss_and_grads(&params, &[&X, &X], &[2, 2], &[11, 12]).unwrap();
        assert_ne!(one, other);
    }

    pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let modes = [
            DropoutMode::None,
            DropoutMode::NaiveDrift { p: 0.3 },
            DropoutMode::Continuum { p: 0.3, m: 8.0 },
        ];
        for (k, dropout) in modes.into_iter().enumerate() {
            for method in [Method::Euler, Method::Rk4] {
                let (model, params) = setup(dropout, method, 20 + k as u64);
                let draw = model.draw(&mut stream(30, k as u64)).unwrap();
                let (_, g) = model.sample_loss_and_grads(&params, &X, 1, draw.clone()).unwrap();
                let analytic = g.flatten();
                let flat = params.flatten();
                let mut probe = params.clone();
                let h = 1e-5;
                for i in 0..flat.len() {
                    let mut v = flat.clone();
                    v[i] = flat[i] + h;
                    probe.assign(&v).unwrap();
                    let up = model.sample_loss_and_grads(&probe, &X, 1, draw.clone()).unwrap().0;
                    v[i] = flat[i] - h;
                    probe.assign(&v).unwrap();
                    let down = model.sample_loss_and_grads(&probe, &X, 1, draw.clone()).unwrap().0;
                    let fd = (up - down) / (2.0 * h);
                    assert!(
                        rel_err(analytic[i], fd) < 1e-5,
                        "{dropout:?} {method:?} param {i}: {} vs {fd}",
                        analytic[i]
                    );
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let (model, params) = setup(DropoutMode::None, Method::Euler, 8);
        let dir = tempfile::tempdir().unwrap();
        model.to_checkpoint(&params).unwrap().write(dir.path(), "ck").unwrap();
        let back = model.from_checkpoint(&Checkpoint::read(dir.path(), "ck").unwrap()).unwrap();
        assert_eq!(back, params);
        let mut other = config(DropoutMode::None, Method::Euler);
        other.drift_hidden = vec![9];
        let other = Model::new(other).unwrap();
        let err = other.from_checkpoint(&Checkpoint::read(dir.path(), "ck").unwrap());
        assert!(matches!(err, Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn flatten_assign_round_trip() {
        let (_, params) = setup(DropoutMode::None, Method::Euler, 9);
        let mut copy = params.zeros_like();
        copy.assign(&params.flatten()).unwrap();
        assert_eq!(copy, params);
        assert!(copy.assign(&[1.0]).is_err());
    }
}
