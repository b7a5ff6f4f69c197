//! Adversary generators: FGSM, FGSM from a random start, PGD with restarts,
//! and the latent sign-of-gradient perturbations used by SLAT.
//!
//! All attacks operate on batches and use the summed cross-entropy, so the
//! input gradient of every example is exactly the gradient of its own loss.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::row_cosine;
use crate::error::{Result, SlatError};
use crate::models::{Deltas, Model};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    RFgsm,
    Pgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// l-infinity radius in input units.
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub restarts: usize,
    pub clamp: Option<(f64, f64)>,
    pub seed: u64,
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec {
            kind: AttackKind::Fgsm,
            epsilon,
            alpha: epsilon,
            steps: 1,
            restarts: 1,
            clamp: None,
            seed: 0,
        }
    }

    /// FGSM from a uniform random start; `alpha = 1.25 * epsilon` by default.
    pub fn r_fgsm(epsilon: f64, seed: u64) -> Self {
        AttackSpec {
            kind: AttackKind::RFgsm,
            alpha: 1.25 * epsilon,
            seed,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn pgd(epsilon: f64, alpha: f64, steps: usize, restarts: usize, seed: u64) -> Self {
        AttackSpec {
            kind: AttackKind::Pgd,
            epsilon,
            alpha,
            steps,
            restarts,
            clamp: None,
            seed,
        }
    }

    pub fn with_clamp(mut self, clamp: Option<(f64, f64)>) -> Self {
        self.clamp = clamp;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            errs.push(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.restarts < 1 {
            errs.push("restarts must be >= 1".to_string());
        }
        if self.kind != AttackKind::Fgsm && !(self.alpha > 0.0) {
            errs.push(format!("alpha must be > 0, got {}", self.alpha));
        }
        if self.kind == AttackKind::Pgd && self.steps < 1 {
            errs.push("pgd steps must be >= 1".to_string());
        }
        if let Some((lo, hi)) = self.clamp {
            if lo > hi {
                errs.push(format!("clamp range [{lo}, {hi}] is empty"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SlatError::Validation(errs))
        }
    }

    pub fn run(&self, model: &Model, x: &Tensor, y: &[usize]) -> Result<Tensor> {
        self.validate()?;
        match self.kind {
            AttackKind::Fgsm => fgsm(model, x, y, self.epsilon, self.clamp),
            AttackKind::RFgsm => r_fgsm(model, x, y, self.epsilon, self.alpha, self.clamp, self.seed),
            AttackKind::Pgd => pgd(
                model,
                x,
                y,
                self.epsilon,
                self.alpha,
                self.steps,
                self.restarts,
                self.clamp,
                self.seed,
            ),
        }
    }
}

/// Gradients of the loss at the input and at every injection site, from one sweep.
#[derive(Clone, Debug)]
pub struct SiteGradients {
    pub loss: f64,
    pub input: Tensor,
    pub sites: BTreeMap<usize, Tensor>,
}

pub fn site_gradients(model: &Model, x: &Tensor, y: &[usize]) -> Result<SiteGradients> {
    let mut pass = model.forward_with_latents(x, None)?;
    let loss = pass.loss(y)?;
    let mut targets: Vec<_> = pass.tape.sites().values().copied().collect();
    targets.push(pass.input);
    pass.tape.backward_to(loss, &targets)?;
    let sites = pass
        .tape
        .sites()
        .keys()
        .map(|&k| Ok((k, pass.tape.site_grad(k)?.clone())))
        .collect::<Result<_>>()?;
    Ok(SiteGradients {
        loss: pass.tape.value(loss).item(),
        input: pass.tape.grad(pass.input).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())),
        sites,
    })
}

pub fn input_gradient(model: &Model, x: &Tensor, y: &[usize]) -> Result<Tensor> {
    let mut pass = model.forward_with_latents(x, None)?;
    let loss = pass.loss(y)?;
    pass.tape.backward_to(loss, &[pass.input])?;
    Ok(pass.tape.grad(pass.input).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Cross-entropy of every example.
pub fn per_example_loss(model: &Model, x: &Tensor, y: &[usize]) -> Result<Vec<f64>> {
    let logits = model.predict(x)?;
    per_example_xent(&logits, y)
}

pub(crate) fn per_example_xent(logits: &Tensor, y: &[usize]) -> Result<Vec<f64>> {
    let classes = logits.row_len();
    y.iter()
        .enumerate()
        .map(|(i, &label)| {
            if label >= classes {
                return Err(SlatError::LabelOutOfRange { label, classes });
            }
            let z = logits.row(i);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[label])
        })
        .collect()
}

fn apply_clamp(x: Tensor, clamp: Option<(f64, f64)>) -> Tensor {
    match clamp {
        Some((lo, hi)) => x.clamp(lo, hi),
        None => x,
    }
}

/// `clamp(x + epsilon * sign(grad_x L))`.
pub fn fgsm(model: &Model, x: &Tensor, y: &[usize], epsilon: f64, clamp: Option<(f64, f64)>) -> Result<Tensor> {
    let g = input_gradient(model, x, y)?;
    fgsm_from_gradient(x, &g, epsilon, clamp)
}

pub(crate) fn fgsm_from_gradient(x: &Tensor, g: &Tensor, epsilon: f64, clamp: Option<(f64, f64)>) -> Result<Tensor> {
    let stepped = x.zip_map(g, |v, d| v + epsilon * crate::tensor::sign(d))?;
    Ok(apply_clamp(stepped, clamp))
}

fn uniform_ball(shape: &[usize], epsilon: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut d = Tensor::zeros(shape);
    for v in d.data_mut() {
        *v = epsilon * (2.0 * rng.random::<f64>() - 1.0);
    }
    d
}

/// One projected sign step: `delta <- clip(delta + alpha * sign(g), -eps, eps)`, then the input clamp.
fn projected_step(x: &Tensor, delta: &Tensor, g: &Tensor, epsilon: f64, alpha: f64, clamp: Option<(f64, f64)>) -> Result<Tensor> {
    let moved = delta.zip_map(g, |d, gv| (d + alpha * crate::tensor::sign(gv)).clamp(-epsilon, epsilon))?;
    let xa = apply_clamp(x.add(&moved)?, clamp);
    xa.sub(x)
}

pub fn r_fgsm(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
    alpha: f64,
    clamp: Option<(f64, f64)>,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = apply_clamp(x.add(&uniform_ball(x.shape(), epsilon, &mut rng))?, clamp);
    let delta = start.sub(x)?;
    let g = input_gradient(model, &start, y)?;
    let delta = projected_step(x, &delta, &g, epsilon, alpha, clamp)?;
    x.add(&delta)
}

/// PGD with random restarts; each example keeps the restart with the highest
/// loss, ties going to the earliest restart.
#[allow(clippy::too_many_arguments)]
pub fn pgd(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
    alpha: f64,
    steps: usize,
    restarts: usize,
    clamp: Option<(f64, f64)>,
    seed: u64,
) -> Result<Tensor> {
    if steps < 1 || restarts < 1 {
        return Err(SlatError::InvalidArgument("pgd needs steps >= 1 and restarts >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = x.clone();
    let mut best_loss = vec![f64::NEG_INFINITY; x.batch()];
    for _ in 0..restarts {
        let start = apply_clamp(x.add(&uniform_ball(x.shape(), epsilon, &mut rng))?, clamp);
        let mut delta = start.sub(x)?;
        for _ in 0..steps {
            let xa = x.add(&delta)?;
            let g = input_gradient(model, &xa, y)?;
            delta = projected_step(x, &delta, &g, epsilon, alpha, clamp)?;
        }
        let xa = x.add(&delta)?;
        let losses = per_example_loss(model, &xa, y)?;
        for (i, &l) in losses.iter().enumerate() {
            if l > best_loss[i] {
                best_loss[i] = l;
                best.row_mut(i).copy_from_slice(xa.row(i));
            }
        }
    }
    Ok(best)
}

/// `eta * sign(g)` elementwise.
pub fn sign_step(g: &Tensor, eta: f64) -> Tensor {
    g.map(|v| eta * crate::tensor::sign(v))
}

/// Latent perturbations `delta_k = eta_k * sign(grad_{h_k} L)` for every site in `eta`,
/// all taken from one backward sweep at the clean input.
pub fn latent_deltas(model: &Model, x: &Tensor, y: &[usize], eta: &BTreeMap<usize, f64>) -> Result<Deltas> {
    if let Some(&k) = eta.keys().find(|k| !model.sites().contains(k)) {
        return Err(SlatError::UnknownSite(k));
    }
    let grads = site_gradients(model, x, y)?;
    deltas_from_gradients(&grads, eta)
}

pub fn deltas_from_gradients(grads: &SiteGradients, eta: &BTreeMap<usize, f64>) -> Result<Deltas> {
    eta.iter()
        .map(|(&k, &e)| {
            let g = grads.sites.get(&k).ok_or(SlatError::UnknownSite(k))?;
            Ok((k, sign_step(g, e)))
        })
        .collect()
}

/// Per-example cosine between two batches of gradients.
pub fn batch_cosines(a: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..a.batch()).map(|i| row_cosine(a.row(i), b.row(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_linear, build_toy_mlp, Activation};

    fn batch() -> (Tensor, Vec<usize>) {
        (Tensor::from_rows(&[vec![0.2, -0.4], vec![0.9, 0.1], vec![-0.3, 0.5]]).unwrap(), vec![0, 1, 1])
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let m = build_toy_mlp(6, Activation::Relu, 0).unwrap();
        let (x, y) = batch();
        assert_eq!(fgsm(&m, &x, &y, 0.0, None).unwrap(), x);
        assert_eq!(r_fgsm(&m, &x, &y, 0.0, 0.1, None, 4).unwrap(), x);
        assert_eq!(pgd(&m, &x, &y, 0.0, 0.1, 3, 2, None, 4).unwrap(), x);
    }

    #[test]
    fn r_fgsm_is_seeded() {
        let m = build_toy_mlp(6, Activation::Relu, 0).unwrap();
        let (x, y) = batch();
        let a = r_fgsm(&m, &x, &y, 0.1, 0.125, None, 7).unwrap();
        assert_eq!(a, r_fgsm(&m, &x, &y, 0.1, 0.125, None, 7).unwrap());
        assert_ne!(a, r_fgsm(&m, &x, &y, 0.1, 0.125, None, 8).unwrap());
    }

    #[test]
    fn attacks_stay_in_ball_and_range() {
        let m = build_toy_mlp(6, Activation::Softplus, 2).unwrap();
        let x = Tensor::from_rows(&[vec![0.02, 0.5], vec![0.99, 0.3]]).unwrap();
        let y = vec![0, 1];
        let clamp = Some((0.0, 1.0));
        for xa in [
            fgsm(&m, &x, &y, 0.1, clamp).unwrap(),
            r_fgsm(&m, &x, &y, 0.1, 0.125, clamp, 1).unwrap(),
            pgd(&m, &x, &y, 0.1, 0.03, 10, 3, clamp, 1).unwrap(),
        ] {
            assert!(xa.sub(&x).unwrap().linf_norm() <= 0.1 + 1e-12);
            assert!(xa.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn latent_delta_definition() {
        let grads = SiteGradients {
            loss: 0.0,
            input: Tensor::zeros(&[1, 3]),
            sites: [(0, Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.0]).unwrap())].into(),
        };
        let d = deltas_from_gradients(&grads, &[(0, 0.1)].into()).unwrap();
        assert_eq!(d[&0].data(), &[0.1, -0.1, 0.0]);
    }

    #[test]
    fn zero_eta_gives_zero_deltas() {
        let m = build_toy_mlp(5, Activation::Relu, 1).unwrap();
        let (x, y) = batch();
        let d = latent_deltas(&m, &x, &y, &[(0, 0.0), (1, 0.0)].into()).unwrap();
        assert!(d.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(matches!(latent_deltas(&m, &x, &y, &[(3, 0.1)].into()), Err(SlatError::UnknownSite(3))));
    }

    #[test]
    fn input_site_delta_matches_fgsm() {
        let m = build_toy_mlp(5, Activation::Relu, 1).unwrap();
        let (x, y) = batch();
        let d = latent_deltas(&m, &x, &y, &[(0, 0.07)].into()).unwrap();
        let xa = fgsm(&m, &x, &y, 0.07, None).unwrap();
        assert_eq!(x.add(&d[&0]).unwrap(), xa);
    }

    #[test]
    fn spec_validation() {
        assert!(AttackSpec::pgd(0.1, 0.0, 5, 1, 0).validate().is_err());
        assert!(AttackSpec::pgd(0.1, 0.01, 0, 1, 0).validate().is_err());
        assert!(AttackSpec::pgd(-0.1, 0.01, 1, 1, 0).validate().is_err());
        assert!(AttackSpec::pgd(0.1, 0.01, 1, 0, 0).validate().is_err());
        assert!(AttackSpec::r_fgsm(8.0 / 255.0, 0).validate().is_ok());
        assert!((AttackSpec::r_fgsm(0.1, 0).alpha - 0.125).abs() < 1e-15);
    }

    #[test]
    fn fgsm_on_linear_model_is_analytic() {
        let m = build_linear(4, 2, 5).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let g = input_gradient(&m, &x, &[1]).unwrap();
        let xa = fgsm(&m, &x, &[1], 0.05, None).unwrap();
        for j in 0..4 {
            let want = x.data()[j] + 0.05 * crate::tensor::sign(g.data()[j]);
            assert_eq!(xa.data()[j], want);
        }
    }
}
