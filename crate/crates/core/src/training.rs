//! Training: momentum SGD, the one-cycle learning rate, per-method update
//! steps and the epoch loop.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks;
use crate::data::{augment_pad_crop, LabeledDataset};
use crate::error::{Result, SlatError};
use crate::metrics::{Evaluator, MetricSink};
use crate::models::{Deltas, Model};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Standard,
    FgsmAt,
    FgsmRs,
    PgdAt,
    Slat,
    SlatFastGa,
    FgsmRsLatent,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Standard,
        Method::FgsmAt,
        Method::FgsmRs,
        Method::PgdAt,
        Method::Slat,
        Method::SlatFastGa,
        Method::FgsmRsLatent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::FgsmAt => "fgsm_at",
            Method::FgsmRs => "fgsm_rs",
            Method::PgdAt => "pgd_at",
            Method::Slat => "slat",
            Method::SlatFastGa => "slat_fast_ga",
            Method::FgsmRsLatent => "fgsm_rs_latent",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = SlatError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SlatError::InvalidArgument(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub method: Method,
    pub epochs: usize,
    pub batch: usize,
    pub lr_max: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub peak_fraction: f64,
    pub epsilon: f64,
    /// FGSM-AT step; `None` means `epsilon`.
    pub fgsm_alpha: Option<f64>,
    /// FGSM-RS step; `None` means `1.25 * epsilon`.
    pub rs_alpha: Option<f64>,
    pub pgd_steps: usize,
    /// PGD-AT step; `None` means `2 * epsilon / 10`.
    pub pgd_alpha: Option<f64>,
    /// Per-site latent step sizes; empty means the model's own.
    pub eta: BTreeMap<usize, f64>,
    pub lambda_ga: f64,
    pub seed: u64,
    /// Steps between metric records; 0 records once per epoch.
    pub checkpoint_every: usize,
    pub clamp: Option<(f64, f64)>,
    pub augment_pad: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            method: Method::Standard,
            epochs: 30,
            batch: 128,
            lr_max: 0.2,
            momentum: 0.9,
            weight_decay: 5e-4,
            peak_fraction: 12.0 / 30.0,
            epsilon: 8.0 / 255.0,
            fgsm_alpha: None,
            rs_alpha: None,
            pgd_steps: 7,
            pgd_alpha: None,
            eta: BTreeMap::new(),
            lambda_ga: 0.0,
            seed: 0,
            checkpoint_every: 0,
            clamp: None,
            augment_pad: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs < 1 {
            errs.push("train.epochs must be >= 1".to_string());
        }
        if self.batch < 1 {
            errs.push("train.batch must be >= 1".to_string());
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            errs.push(format!("train.lr_max must be > 0, got {}", self.lr_max));
        }
        if !(self.peak_fraction > 0.0 && self.peak_fraction < 1.0) {
            errs.push(format!("train.peak_fraction must lie in (0, 1), got {}", self.peak_fraction));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            errs.push(format!("train.epsilon must be >= 0, got {}", self.epsilon));
        }
        if !(self.lambda_ga >= 0.0) {
            errs.push(format!("train.lambda_ga must be >= 0, got {}", self.lambda_ga));
        }
        if self.pgd_steps < 1 {
            errs.push("train.pgd_steps must be >= 1".to_string());
        }
        if let Some((k, e)) = self.eta.iter().find(|(_, e)| !(**e >= 0.0)) {
            errs.push(format!("eta for site {k} must be >= 0, got {e}"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SlatError::Validation(errs))
        }
    }

    pub fn fgsm_step_size(&self) -> f64 {
        self.fgsm_alpha.unwrap_or(self.epsilon)
    }

    pub fn rs_step_size(&self) -> f64 {
        self.rs_alpha.unwrap_or(1.25 * self.epsilon)
    }

    pub fn pgd_step_size(&self) -> f64 {
        self.pgd_alpha.unwrap_or(2.0 * self.epsilon / 10.0)
    }

    /// Site step sizes used for `model`, checked against its sites.
    pub fn effective_eta(&self, model: &Model) -> Result<BTreeMap<usize, f64>> {
        if self.eta.is_empty() {
            return Ok(model.eta().clone());
        }
        if let Some(&k) = self.eta.keys().find(|k| !model.sites().contains(k)) {
            return Err(SlatError::UnknownSite(k));
        }
        Ok(self.eta.clone())
    }
}

/// Piecewise-linear one-cycle schedule: 0 to `lr_max` over the first
/// `peak_fraction` of training, then back to 0.
pub fn cyclic_lr(step: usize, total_steps: usize, lr_max: f64, peak_fraction: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let t = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let peak = peak_fraction * total;
    if t <= peak {
        lr_max * t / peak
    } else {
        lr_max * (total - t) / (total - peak)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    /// Updates applied so far; reported when a gradient is non-finite.
    pub steps: usize,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        OptimizerState {
            velocity: model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            steps: 0,
        }
    }
}

/// `v <- momentum * v + (g + weight_decay * p); p <- p - lr * v`.
///
/// Non-finite gradients leave parameters and state untouched.
pub fn sgd_update(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(SlatError::shape("sgd_update", params.len(), grads.len()));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(SlatError::shape("sgd_update", p.shape(), g.shape()));
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(SlatError::NonFiniteGradient { step: state.steps });
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + (gv + weight_decay * *pv);
            *pv -= lr * *vv;
        }
    }
    state.steps += 1;
    Ok(())
}

fn apply_update(model: &mut Model, grads: &[Tensor], state: &mut OptimizerState, spec: &TrainSpec, lr: f64) -> Result<()> {
    let mut values: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    sgd_update(&mut values, grads, state, lr, spec.momentum, spec.weight_decay)?;
    for (p, v) in model.params_mut().iter_mut().zip(values) {
        p.value = v;
    }
    Ok(())
}

/// Mean loss and parameter gradients at `x` (optionally with latent deltas).
fn loss_and_grads(model: &Model, x: &Tensor, y: &[usize], deltas: Option<&Deltas>) -> Result<(f64, Vec<Tensor>)> {
    let mut pass = model.forward_with_latents(x, deltas)?;
    let loss = pass.mean_loss(y)?;
    let targets = pass.params.clone();
    pass.tape.backward_to(loss, &targets)?;
    Ok((pass.tape.value(loss).item(), pass.param_grads()))
}

fn clamp_input(x: Tensor, clamp: Option<(f64, f64)>) -> Tensor {
    match clamp {
        Some((lo, hi)) => x.clamp(lo, hi),
        None => x,
    }
}

/// Splits SLAT deltas into the clamped input perturbation and the latent ones.
fn slat_inputs(x: &Tensor, mut deltas: Deltas, clamp: Option<(f64, f64)>) -> Result<(Tensor, Deltas)> {
    let x_adv = match deltas.remove(&0) {
        Some(d0) => clamp_input(x.add(&d0)?, clamp),
        None => x.clone(),
    };
    Ok((x_adv, deltas))
}

/// Training loss and parameter gradients for one batch under `spec.method`.
///
/// `seed` drives any randomness in the adversary. The model is not modified.
pub fn method_gradients(model: &Model, x: &Tensor, y: &[usize], spec: &TrainSpec, seed: u64) -> Result<(f64, Vec<Tensor>)> {
    let eps = spec.epsilon;
    match spec.method {
        Method::Standard => loss_and_grads(model, x, y, None),
        Method::FgsmAt => {
            let x_adv = attacks::fgsm(model, x, y, spec.fgsm_step_size(), spec.clamp)?;
            loss_and_grads(model, &x_adv, y, None)
        }
        Method::FgsmRs => {
            let x_adv = attacks::r_fgsm(model, x, y, eps, spec.rs_step_size(), spec.clamp, seed)?;
            loss_and_grads(model, &x_adv, y, None)
        }
        Method::PgdAt => {
            let x_adv = attacks::pgd(model, x, y, eps, spec.pgd_step_size(), spec.pgd_steps, 1, spec.clamp, seed)?;
            loss_and_grads(model, &x_adv, y, None)
        }
        Method::Slat => {
            let eta = spec.effective_eta(model)?;
            let grads = attacks::site_gradients(model, x, y)?;
            let deltas = attacks::deltas_from_gradients(&grads, &eta)?;
            let (x_adv, latent) = slat_inputs(x, deltas, spec.clamp)?;
            loss_and_grads(model, &x_adv, y, Some(&latent))
        }
        Method::SlatFastGa => fast_ga_gradients(model, x, y, spec),
        Method::FgsmRsLatent => {
            let eta = spec.effective_eta(model)?;
            let grads = attacks::site_gradients(model, x, y)?;
            let mut deltas = attacks::deltas_from_gradients(&grads, &eta)?;
            deltas.remove(&0);
            let x_adv = attacks::r_fgsm(model, x, y, eps, spec.rs_step_size(), spec.clamp, seed)?;
            loss_and_grads(model, &x_adv, y, Some(&deltas))
        }
    }
}

/// SLAT objective plus `lambda * (1 - cos(g_clean, g_adv))`, where `g_clean`
/// is the input gradient from the perturbation pass (held constant) and
/// `g_adv` the input gradient of the perturbed loss (differentiated through).
///
/// Returns the total loss and parameter gradients.
pub fn fast_ga_gradients(model: &Model, x: &Tensor, y: &[usize], spec: &TrainSpec) -> Result<(f64, Vec<Tensor>)> {
    if !model.supports_double_backward() {
        return Err(SlatError::UnsupportedOps(format!(
            "fast gradient alignment needs dense/softplus layers only; `{}` has others",
            model.name()
        )));
    }
    let eta = spec.effective_eta(model)?;
    let grads = attacks::site_gradients(model, x, y)?;
    let deltas = attacks::deltas_from_gradients(&grads, &eta)?;
    let (x_adv, latent) = slat_inputs(x, deltas, spec.clamp)?;
    if spec.lambda_ga == 0.0 {
        return loss_and_grads(model, &x_adv, y, Some(&latent));
    }
    let b = y.len() as f64;
    let mut pass = model.forward_with_latents(&x_adv, Some(&latent))?;
    let sum = pass.loss(y)?;
    let g_adv = pass.tape.grad_graph(sum, pass.input)?;
    let g_clean = pass.tape.constant(grads.input.clone());
    let cos_sum = pass.tape.cosine_sum(g_adv, g_clean)?;
    let adv = pass.tape.scale(sum, 1.0 / b);
    let penalty = pass.tape.scale(cos_sum, -spec.lambda_ga / b);
    let total = pass.tape.add(adv, penalty)?;
    let targets = pass.params.clone();
    pass.tape.backward_to(total, &targets)?;
    let value = pass.tape.value(total).item() + spec.lambda_ga;
    Ok((value, pass.param_grads()))
}

/// The fast-GA total loss at a batch without computing parameter gradients.
pub fn fast_ga_loss(model: &Model, x: &Tensor, y: &[usize], spec: &TrainSpec) -> Result<f64> {
    fast_ga_gradients(model, x, y, spec).map(|(l, _)| l)
}

/// Learning rate and adversary seed for one update.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    pub lr: f64,
    pub seed: u64,
}

/// One optimisation step with `spec.method`; returns the training loss.
pub fn train_step(
    model: &mut Model,
    state: &mut OptimizerState,
    x: &Tensor,
    y: &[usize],
    spec: &TrainSpec,
    ctx: StepContext,
) -> Result<f64> {
    let (loss, grads) = method_gradients(model, x, y, spec, ctx.seed)?;
    if !loss.is_finite() {
        return Err(SlatError::NonFiniteGradient { step: state.steps });
    }
    apply_update(model, &grads, state, spec, ctx.lr)?;
    Ok(loss)
}

macro_rules! method_step {
    ($(#[$doc:meta])* $name:ident, $method:expr) => {
        $(#[$doc])*
        pub fn $name(
            model: &mut Model,
            state: &mut OptimizerState,
            x: &Tensor,
            y: &[usize],
            spec: &TrainSpec,
            ctx: StepContext,
        ) -> Result<f64> {
            let spec = TrainSpec { method: $method, ..spec.clone() };
            train_step(model, state, x, y, &spec, ctx)
        }
    };
}

method_step!(standard_step, Method::Standard);
method_step!(fgsm_at_step, Method::FgsmAt);
method_step!(fgsm_rs_step, Method::FgsmRs);
method_step!(pgd_at_step, Method::PgdAt);
method_step!(
    /// One SLAT iteration: clean pass for site gradients, sign perturbations at
    /// every site, perturbed pass, update. Two forwards and two backwards.
    slat_step,
    Method::Slat
);
method_step!(slat_fast_ga_step, Method::SlatFastGa);
method_step!(fgsm_rs_latent_step, Method::FgsmRsLatent);

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub steps_per_epoch: usize,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Runs `spec.epochs` epochs of seeded shuffled mini-batch training.
///
/// Metrics are recorded before the first update, every `checkpoint_every`
/// steps (once per epoch when 0) and after the last update. A non-finite
/// loss or gradient aborts the run after flushing the sink.
pub fn train(
    model: &mut Model,
    data: &LabeledDataset,
    spec: &TrainSpec,
    evaluator: Option<&Evaluator>,
    sink: &mut dyn MetricSink,
) -> Result<TrainReport> {
    spec.validate()?;
    if data.is_empty() {
        return Err(SlatError::InvalidArgument("training set is empty".into()));
    }
    spec.effective_eta(model)?;
    let per_epoch = steps_per_epoch(data.len(), spec.batch);
    let total = per_epoch * spec.epochs;
    let every = if spec.checkpoint_every == 0 { per_epoch } else { spec.checkpoint_every };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut state = OptimizerState::new(model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(total);

    let emit = |model: &Model, step: usize, lr: f64, sink: &mut dyn MetricSink| -> Result<()> {
        if let Some(ev) = evaluator {
            let rec = ev.evaluate(model, step, step as f64 / per_epoch as f64, lr)?;
            sink.record(&rec)?;
        }
        Ok(())
    };
    emit(model, 0, 0.0, sink)?;
    let mut last_recorded = 0;

    let mut step = 0;
    let mut lr = 0.0;
    for _ in 0..spec.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(spec.batch) {
            let (mut x, y) = data.batch(chunk);
            let seed: u64 = rng.random();
            if spec.augment_pad > 0 && x.rank() == 4 {
                x = augment_pad_crop(&x, spec.augment_pad, &mut rng);
            }
            lr = cyclic_lr(step + 1, total, spec.lr_max, spec.peak_fraction);
            let loss = match train_step(model, &mut state, &x, &y, spec, StepContext { lr, seed }) {
                Ok(l) => l,
                Err(e) => {
                    sink.flush()?;
                    return Err(match e {
                        SlatError::NonFiniteGradient { .. } => SlatError::NonFiniteGradient { step },
                        other => other,
                    });
                }
            };
            losses.push(loss);
            step += 1;
            if step % every == 0 {
                emit(model, step, lr, sink)?;
                last_recorded = step;
            }
        }
    }
    if last_recorded != step {
        emit(model, step, lr, sink)?;
    }
    sink.flush()?;
    Ok(TrainReport {
        steps: step,
        steps_per_epoch: per_epoch,
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{pass_counts, reset_pass_counts};
    use crate::models::{build_linear, build_toy_mlp, Activation};

    #[test]
    fn cyclic_lr_shape() {
        assert_eq!(cyclic_lr(0, 100, 0.2, 0.4), 0.0);
        assert_eq!(cyclic_lr(40, 100, 0.2, 0.4), 0.2);
        assert!((cyclic_lr(20, 100, 0.2, 0.4) - 0.1).abs() < 1e-15);
        assert_eq!(cyclic_lr(100, 100, 0.2, 0.4), 0.0);
    }

    #[test]
    fn sgd_hand_computation() {
        let mut p = vec![Tensor::from_vec(vec![1.0])];
        let g = vec![Tensor::from_vec(vec![1.0])];
        let mut st = OptimizerState { velocity: vec![Tensor::from_vec(vec![0.0])], steps: 0 };
        sgd_update(&mut p, &g, &mut st, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-15);
        sgd_update(&mut p, &g, &mut st, 0.1, 0.9, 0.0).unwrap();
        assert!((st.velocity[0].data()[0] - 1.9).abs() < 1e-15);
        assert!((p[0].data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_and_zero_lr() {
        let mut p = vec![Tensor::from_vec(vec![2.0])];
        let mut st = OptimizerState { velocity: vec![Tensor::from_vec(vec![0.0])], steps: 0 };
        sgd_update(&mut p, &[Tensor::from_vec(vec![0.0])], &mut st, 0.0, 0.9, 5e-4).unwrap();
        assert_eq!(p[0].data()[0], 2.0);
        assert_eq!(st.velocity[0].data()[0], 1e-3);
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut p = vec![Tensor::from_vec(vec![1.0])];
        let mut st = OptimizerState { velocity: vec![Tensor::from_vec(vec![0.0])], steps: 3 };
        let err = sgd_update(&mut p, &[Tensor::from_vec(vec![f64::NAN])], &mut st, 0.1, 0.9, 0.0);
        assert!(matches!(err, Err(SlatError::NonFiniteGradient { step: 3 })));
        assert_eq!(p[0].data()[0], 1.0);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("fgsm".parse::<Method>().is_err());
    }

    #[test]
    fn slat_costs_two_forwards_two_backwards() {
        let mut m = build_toy_mlp(8, Activation::Relu, 0).unwrap();
        let mut st = OptimizerState::new(&m);
        let x = Tensor::from_rows(&[vec![0.5, 0.01], vec![-0.7, -0.03]]).unwrap();
        let spec = TrainSpec { method: Method::Slat, epsilon: 0.1, ..Default::default() };
        reset_pass_counts();
        slat_step(&mut m, &mut st, &x, &[1, 0], &spec, StepContext { lr: 0.1, seed: 0 }).unwrap();
        let c = pass_counts();
        assert_eq!((c.forward, c.backward), (2, 2));
    }

    #[test]
    fn fast_ga_on_linear_model_has_no_penalty() {
        let m = build_linear(3, 2, 1).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.4, -0.2, 0.0]]).unwrap();
        let y = [0, 1];
        let with = TrainSpec { method: Method::SlatFastGa, epsilon: 0.1, lambda_ga: 0.5, ..Default::default() };
        let without = TrainSpec { lambda_ga: 0.0, ..with.clone() };
        let a = fast_ga_loss(&m, &x, &y, &with).unwrap();
        let b = fast_ga_loss(&m, &x, &y, &without).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn fast_ga_rejects_relu() {
        let m = build_toy_mlp(4, Activation::Relu, 0).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2]]).unwrap();
        let spec = TrainSpec { method: Method::SlatFastGa, lambda_ga: 1.0, ..Default::default() };
        assert!(matches!(fast_ga_loss(&m, &x, &[0], &spec), Err(SlatError::UnsupportedOps(_))));
    }

    #[test]
    fn validation_lists_every_problem() {
        let spec = TrainSpec { epochs: 0, batch: 0, lr_max: 0.0, ..Default::default() };
        match spec.validate() {
            Err(SlatError::Validation(v)) => assert_eq!(v.len(), 3),
            other => panic!("{other:?}"),
        }
    }
}
