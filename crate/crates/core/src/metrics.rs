//! Robustness and local-linearity measurements, metric records and their CSV form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackSpec};
use crate::data::rademacher;
use crate::error::{Result, SlatError};
use crate::models::Model;
use crate::tensor::Tensor;

/// Rows evaluated per forward pass by the batched helpers.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: f64,
    pub clean_acc: f64,
    pub pgd_acc: f64,
    pub adv_loss: f64,
    pub grad_align: f64,
    pub l1_grad_norms: BTreeMap<usize, f64>,
    pub logits_l2: f64,
    pub lr: f64,
}

impl MetricRecord {
    pub fn csv_header(sites: impl IntoIterator<Item = usize>) -> String {
        let mut h = String::from("step,epoch,clean_acc,pgd_acc,adv_loss,grad_align");
        for k in sites {
            let _ = write!(h, ",l1_grad_k{k}");
        }
        h.push_str(",logits_l2,lr");
        h
    }

    /// Floats use the shortest representation that parses back to the same value.
    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{},{},{},{},{}",
            self.step, self.epoch, self.clean_acc, self.pgd_acc, self.adv_loss, self.grad_align
        );
        for v in self.l1_grad_norms.values() {
            let _ = write!(r, ",{v}");
        }
        let _ = write!(r, ",{},{}", self.logits_l2, self.lr);
        r
    }
}

pub fn metrics_to_csv(records: &[MetricRecord]) -> String {
    let sites: Vec<usize> = records.first().map(|r| r.l1_grad_norms.keys().copied().collect()).unwrap_or_default();
    let mut out = MetricRecord::csv_header(sites);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(SlatError::Parse { line: 1, message: "missing header".into() })?;
    let cols: Vec<&str> = header.split(',').collect();
    let fixed = ["step", "epoch", "clean_acc", "pgd_acc", "adv_loss", "grad_align"];
    if cols.len() < 8 || cols[..6] != fixed || cols[cols.len() - 2..] != ["logits_l2", "lr"] {
        return Err(SlatError::Parse { line: 1, message: format!("unexpected header `{header}`") });
    }
    let sites: Vec<usize> = cols[6..cols.len() - 2]
        .iter()
        .map(|c| {
            c.strip_prefix("l1_grad_k")
                .and_then(|k| k.parse().ok())
                .ok_or_else(|| SlatError::Parse { line: 1, message: format!("bad column `{c}`") })
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| SlatError::Parse { line: i + 1, message: m };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(bad(format!("expected {} fields, got {}", cols.len(), fields.len())));
        }
        let f = |j: usize| fields[j].parse::<f64>().map_err(|e| bad(format!("{}: {e}", cols[j])));
        let n = fields.len();
        out.push(MetricRecord {
            step: fields[0].parse().map_err(|e| bad(format!("step: {e}")))?,
            epoch: f(1)?,
            clean_acc: f(2)?,
            pgd_acc: f(3)?,
            adv_loss: f(4)?,
            grad_align: f(5)?,
            l1_grad_norms: sites.iter().enumerate().map(|(j, &k)| Ok((k, f(6 + j)?))).collect::<Result<_>>()?,
            logits_l2: f(n - 2)?,
            lr: f(n - 1)?,
        });
    }
    Ok(out)
}

pub trait MetricSink {
    fn record(&mut self, record: &MetricRecord) -> Result<()>;

    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

impl MetricSink for Vec<MetricRecord> {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Streams records as CSV; the header is written with the first record.
pub struct CsvSink<W: Write> {
    out: W,
    header_written: bool,
}

impl<W: Write> CsvSink<W> {
    pub fn new(out: W) -> Self {
        CsvSink { out, header_written: false }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricSink for CsvSink<W> {
    fn record(&mut self, r: &MetricRecord) -> Result<()> {
        if !self.header_written {
            writeln!(self.out, "{}", MetricRecord::csv_header(r.l1_grad_norms.keys().copied()))?;
            self.header_written = true;
        }
        writeln!(self.out, "{}", r.csv_row())?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Records into two sinks at once.
pub struct Tee<'a>(pub &'a mut dyn MetricSink, pub &'a mut dyn MetricSink);

impl MetricSink for Tee<'_> {
    fn record(&mut self, r: &MetricRecord) -> Result<()> {
        self.0.record(r)?;
        self.1.record(r)
    }

    fn flush(&mut self) -> Result<()> {
        self.0.flush()?;
        self.1.flush()
    }
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(EVAL_CHUNK).map(move |s| (s..(s + EVAL_CHUNK).min(n)).collect())
}

fn count_correct(logits: &Tensor, y: &[usize]) -> usize {
    logits.argmax_rows().iter().zip(y).filter(|(p, &t)| **p == Some(t)).count()
}

/// Fraction of rows whose unique argmax is the label; ties count as wrong.
pub fn accuracy(model: &Model, x: &Tensor, y: &[usize]) -> Result<f64> {
    let mut correct = 0;
    for idx in chunks(y.len()) {
        let xs = x.select_rows(&idx);
        let ys: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        correct += count_correct(&model.predict(&xs)?, &ys);
    }
    Ok(correct as f64 / y.len() as f64)
}

/// Accuracy on the attack's worst-case adversaries, and their mean loss.
pub fn robust_accuracy_and_loss(model: &Model, x: &Tensor, y: &[usize], attack: &AttackSpec) -> Result<(f64, f64)> {
    attack.validate()?;
    let (mut correct, mut loss) = (0, 0.0);
    for (c, idx) in chunks(y.len()).enumerate() {
        let xs = x.select_rows(&idx);
        let ys: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let spec = AttackSpec { seed: attack.seed.wrapping_add(c as u64), ..attack.clone() };
        let xa = spec.run(model, &xs, &ys)?;
        let logits = model.predict(&xa)?;
        correct += count_correct(&logits, &ys);
        loss += attacks::per_example_xent(&logits, &ys)?.iter().sum::<f64>();
    }
    let n = y.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

pub fn robust_accuracy(model: &Model, x: &Tensor, y: &[usize], attack: &AttackSpec) -> Result<f64> {
    robust_accuracy_and_loss(model, x, y, attack).map(|(a, _)| a)
}

/// Mean cosine between input gradients at `x` and at `x + gamma`, `gamma ~ U[-eps, eps]^d`.
pub fn grad_alignment(model: &Model, x: &Tensor, y: &[usize], epsilon: f64, seed: u64) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return Err(SlatError::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gamma = Tensor::zeros(x.shape());
    for v in gamma.data_mut() {
        *v = epsilon * (2.0 * rng.random::<f64>() - 1.0);
    }
    let g0 = attacks::input_gradient(model, x, y)?;
    let g1 = attacks::input_gradient(model, &x.add(&gamma)?, y)?;
    let cos = attacks::batch_cosines(&g0, &g1);
    Ok(cos.iter().sum::<f64>() / cos.len() as f64)
}

/// Per-site mean over examples of the l1 norm of the clean loss gradient.
pub fn feature_grad_l1(model: &Model, x: &Tensor, y: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let grads = attacks::site_gradients(model, x, y)?;
    let n = y.len() as f64;
    Ok(grads.sites.iter().map(|(&k, g)| (k, g.l1_norm() / n)).collect())
}

/// `|L(h_k + e) - L(h_k) - <grad_{h_k} L, e>|` for the summed batch loss, with
/// the perturbation injected at site `k`.
pub fn linear_approx_error(model: &Model, x: &Tensor, y: &[usize], k: usize, eps: &Tensor) -> Result<f64> {
    if !model.sites().contains(&k) {
        return Err(SlatError::UnknownSite(k));
    }
    let mut clean = model.forward_with_latents(x, None)?;
    let l0 = clean.loss(y)?;
    let site = clean.tape.site(k)?;
    clean.tape.backward_to(l0, &[site])?;
    let g = clean.tape.site_grad(k)?;
    if g.shape() != eps.shape() {
        return Err(SlatError::shape("linear_approx_error", g.shape(), eps.shape()));
    }
    let lin = g.dot(eps);
    let l0 = clean.tape.value(l0).item();
    let mut pert = model.forward_with_latents(x, Some(&[(k, eps.clone())].into()))?;
    let l1 = pert.loss(y)?;
    let l1 = pert.tape.value(l1).item();
    Ok((l1 - l0 - lin).abs())
}

/// Mean loss on `x + a * sign(grad_x L) + b * r` over an `n x n` grid of
/// `a, b` in `[0, epsilon]`; `r` is a seeded Rademacher direction.
#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeGrid {
    pub adv_axis: Vec<f64>,
    pub rand_axis: Vec<f64>,
    /// `values[i][j]` at `adv_axis[i]`, `rand_axis[j]`.
    pub values: Vec<Vec<f64>>,
}

fn linspace(hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| hi * i as f64 / (n - 1) as f64).collect()
}

fn mean_loss(model: &Model, x: &Tensor, y: &[usize]) -> Result<f64> {
    let logits = model.predict(x)?;
    Ok(attacks::per_example_xent(&logits, y)?.iter().sum::<f64>() / y.len() as f64)
}

pub fn loss_landscape(model: &Model, x: &Tensor, y: &[usize], epsilon: f64, n: usize, seed: u64) -> Result<LandscapeGrid> {
    if n < 2 {
        return Err(SlatError::InvalidArgument(format!("landscape grid needs n >= 2, got {n}")));
    }
    let s = attacks::input_gradient(model, x, y)?.sign();
    let r = rademacher(x.shape(), seed);
    let axis = linspace(epsilon, n);
    let mut values = vec![vec![0.0; n]; n];
    for (i, &a) in axis.iter().enumerate() {
        for (j, &b) in axis.iter().enumerate() {
            let xp = if i == 0 && j == 0 {
                x.clone()
            } else {
                x.zip_map(&s, |v, sv| v + a * sv)?.zip_map(&r, |v, rv| v + b * rv)?
            };
            values[i][j] = mean_loss(model, &xp, y)?;
        }
    }
    Ok(LandscapeGrid { adv_axis: axis.clone(), rand_axis: axis, values })
}

impl LandscapeGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("adv\\rand");
        for b in &self.rand_axis {
            let _ = write!(out, ",{b}");
        }
        out.push('\n');
        for (a, row) in self.adv_axis.iter().zip(&self.values) {
            let _ = write!(out, "{a}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Least-squares plane fit `c0 + c1 a + c2 b` over the grid; returns
    /// `||residual|| / ||L - mean(L)||` (0 for a flat surface).
    pub fn plane_fit_residual(&self) -> f64 {
        let mut pts = Vec::new();
        for (a, row) in self.adv_axis.iter().zip(&self.values) {
            for (b, &v) in self.rand_axis.iter().zip(row) {
                pts.push((*a, *b, v));
            }
        }
        plane_residual(&pts)
    }

    /// The same fit restricted to the adversarial-direction slice (`b = 0`).
    pub fn adv_slice_residual(&self) -> f64 {
        let pts: Vec<(f64, f64, f64)> = self.adv_axis.iter().zip(&self.values).map(|(&a, row)| (a, 0.0, row[0])).collect();
        plane_residual(&pts)
    }
}

fn plane_residual(pts: &[(f64, f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mean = |f: &dyn Fn(&(f64, f64, f64)) -> f64| pts.iter().map(f).sum::<f64>() / n;
    let (ma, mb, mv) = (mean(&|p| p.0), mean(&|p| p.1), mean(&|p| p.2));
    let (mut saa, mut sab, mut sbb, mut sav, mut sbv, mut svv) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for &(a, b, v) in pts {
        let (a, b, v) = (a - ma, b - mb, v - mv);
        saa += a * a;
        sab += a * b;
        sbb += b * b;
        sav += a * v;
        sbv += b * v;
        svv += v * v;
    }
    if svv == 0.0 {
        return 0.0;
    }
    let det = saa * sbb - sab * sab;
    let (c1, c2) = if det.abs() > 1e-300 {
        ((sav * sbb - sbv * sab) / det, (sbv * saa - sav * sab) / det)
    } else if saa > 0.0 {
        (sav / saa, 0.0)
    } else if sbb > 0.0 {
        (0.0, sbv / sbb)
    } else {
        (0.0, 0.0)
    };
    let rss: f64 = pts
        .iter()
        .map(|&(a, b, v)| {
            let e = (v - mv) - c1 * (a - ma) - c2 * (b - mb);
            e * e
        })
        .sum();
    (rss / svv).sqrt()
}

/// Mean l2 distance between logits at the FGSM and the R+FGSM adversary.
pub fn logits_l2_distance(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
    alpha: f64,
    clamp: Option<(f64, f64)>,
    seed: u64,
) -> Result<f64> {
    let a = model.predict(&attacks::fgsm(model, x, y, epsilon, clamp)?)?;
    let b = model.predict(&attacks::r_fgsm(model, x, y, epsilon, alpha, clamp, seed)?)?;
    let d = a.sub(&b)?;
    Ok((0..d.batch()).map(|i| d.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / d.batch() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitThresholds {
    /// Steps spanned by one comparison window.
    pub window: usize,
    pub pgd_drop: f64,
    pub clean_tolerance: f64,
}

impl Default for OverfitThresholds {
    fn default() -> Self {
        OverfitThresholds { window: usize::MAX, pgd_drop: 0.3, clean_tolerance: 0.05 }
    }
}

impl OverfitThresholds {
    pub fn with_window(window: usize) -> Self {
        OverfitThresholds { window, ..Default::default() }
    }
}

/// Earliest step at which PGD accuracy sits more than `pgd_drop` below a
/// record at most `window` steps earlier, while clean accuracy fell by no
/// more than `clean_tolerance` over the same span.
pub fn detect_catastrophic_overfitting(records: &[MetricRecord], t: &OverfitThresholds) -> Option<usize> {
    records
        .iter()
        .enumerate()
        .find(|(j, late)| {
            records[..*j].iter().any(|early| {
                late.step - early.step <= t.window
                    && early.pgd_acc - late.pgd_acc > t.pgd_drop
                    && early.clean_acc - late.clean_acc <= t.clean_tolerance
            })
        })
        .map(|(_, r)| r.step)
}

/// Probe grid for [`boundary_nonrobust_ratio`]: `res x res` points over
/// `center +- half_width` on each axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeGrid {
    pub half_width: [f64; 2],
    pub res: usize,
}

impl ProbeGrid {
    /// Covers both class means out to three standard deviations.
    pub fn for_toy(mu: [f64; 2], sigma: [f64; 2]) -> Self {
        ProbeGrid {
            half_width: [mu[0].abs() + 3.0 * sigma[0], mu[1].abs() + 3.0 * sigma[1]],
            res: 401,
        }
    }
}

/// Fits a line through the zero crossings of the logit difference on the
/// probe grid and returns `|n_y| / |n_x|` for its normal, capped at 1e6.
pub fn boundary_nonrobust_ratio(model: &Model, grid: &ProbeGrid) -> Result<f64> {
    if model.input_shape() != [2] || model.classes() != 2 {
        return Err(SlatError::InvalidArgument("boundary ratio needs a 2-input binary model".into()));
    }
    let n = grid.res.max(2);
    let xs: Vec<f64> = (0..n).map(|i| -grid.half_width[0] + 2.0 * grid.half_width[0] * i as f64 / (n - 1) as f64).collect();
    let ys: Vec<f64> = (0..n).map(|i| -grid.half_width[1] + 2.0 * grid.half_width[1] * i as f64 / (n - 1) as f64).collect();
    // margin[i][j] at (xs[i], ys[j])
    let mut margin = vec![vec![0.0; n]; n];
    for (i, &px) in xs.iter().enumerate() {
        let rows: Vec<Vec<f64>> = ys.iter().map(|&py| vec![px, py]).collect();
        let logits = model.predict(&Tensor::from_rows(&rows)?)?;
        for j in 0..n {
            margin[i][j] = logits.row(j)[1] - logits.row(j)[0];
        }
    }
    let mut pts = Vec::new();
    let cross = |a: f64, b: f64| a / (a - b);
    for i in 0..n {
        for j in 0..n {
            let m = margin[i][j];
            if i + 1 < n && (m > 0.0) != (margin[i + 1][j] > 0.0) {
                let t = cross(m, margin[i + 1][j]);
                pts.push((xs[i] + t * (xs[i + 1] - xs[i]), ys[j]));
            }
            if j + 1 < n && (m > 0.0) != (margin[i][j + 1] > 0.0) {
                let t = cross(m, margin[i][j + 1]);
                pts.push((xs[i], ys[j] + t * (ys[j + 1] - ys[j])));
            }
        }
    }
    if pts.len() < 2 {
        return Err(SlatError::DegenerateBoundary);
    }
    let k = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / k, pts.iter().map(|p| p.1).sum::<f64>() / k);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(px, py) in &pts {
        sxx += (px - mx) * (px - mx);
        sxy += (px - mx) * (py - my);
        syy += (py - my) * (py - my);
    }
    // Principal direction of the crossing cloud is the boundary tangent.
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (tx, ty) = (theta.cos(), theta.sin());
    let (nx, ny) = (-ty, tx);
    const CAP: f64 = 1e6;
    if nx.abs() * CAP <= ny.abs() {
        return Ok(CAP);
    }
    Ok((ny.abs() / nx.abs()).min(CAP))
}

/// Per-checkpoint evaluation on a fixed held-out batch.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub epsilon: f64,
    pub pgd: AttackSpec,
    /// Examples (from the front of the set) used by the gradient metrics.
    pub probe_size: usize,
    pub rs_alpha: f64,
    pub seed: u64,
}

impl Evaluator {
    /// PGD-20 with one restart and step `2.5 * epsilon / 20`.
    pub fn new(x: Tensor, y: Vec<usize>, epsilon: f64, clamp: Option<(f64, f64)>, seed: u64) -> Self {
        Evaluator {
            x,
            y,
            epsilon,
            pgd: AttackSpec::pgd(epsilon, 2.5 * epsilon / 20.0, 20, 1, seed).with_clamp(clamp),
            probe_size: 128,
            rs_alpha: 1.25 * epsilon,
            seed,
        }
    }

    fn probe(&self) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..self.probe_size.min(self.y.len())).collect();
        (self.x.select_rows(&idx), self.y[..idx.len()].to_vec())
    }

    pub fn evaluate(&self, model: &Model, step: usize, epoch: f64, lr: f64) -> Result<MetricRecord> {
        let clean_acc = accuracy(model, &self.x, &self.y)?;
        let (pgd_acc, adv_loss) = robust_accuracy_and_loss(model, &self.x, &self.y, &self.pgd)?;
        let (px, py) = self.probe();
        Ok(MetricRecord {
            step,
            epoch,
            clean_acc,
            pgd_acc,
            adv_loss,
            grad_align: grad_alignment(model, &px, &py, self.epsilon, self.seed)?,
            l1_grad_norms: feature_grad_l1(model, &px, &py)?,
            logits_l2: logits_l2_distance(model, &px, &py, self.epsilon, self.rs_alpha, self.pgd.clamp, self.seed)?,
            lr,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_linear, build_toy_mlp, Activation};

    fn rec(step: usize, clean: f64, pgd: f64) -> MetricRecord {
        MetricRecord {
            step,
            epoch: step as f64 / 10.0,
            clean_acc: clean,
            pgd_acc: pgd,
            adv_loss: 0.5,
            grad_align: 0.9,
            l1_grad_norms: [(0, 1.5), (1, 0.25)].into(),
            logits_l2: 0.1,
            lr: 0.2 / 3.0,
        }
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let rs = vec![rec(0, 0.5, 0.1), rec(10, 0.1 + 0.2, 1.0 / 3.0)];
        let text = metrics_to_csv(&rs);
        assert!(text.starts_with("step,epoch,clean_acc,pgd_acc,adv_loss,grad_align,l1_grad_k0,l1_grad_k1,logits_l2,lr\n"));
        assert_eq!(parse_metrics_csv(&text).unwrap(), rs);
    }

    #[test]
    fn detector_thresholds() {
        let flat: Vec<_> = (0..5).map(|i| rec(i * 10, 0.9, 0.45)).collect();
        assert_eq!(detect_catastrophic_overfitting(&flat, &OverfitThresholds::with_window(20)), None);
        let crash = vec![rec(0, 0.9, 0.45), rec(10, 0.9, 0.44), rec(20, 0.88, 0.02), rec(30, 0.9, 0.01)];
        assert_eq!(detect_catastrophic_overfitting(&crash, &OverfitThresholds::with_window(10)), Some(20));
        let clean_fell = vec![rec(0, 0.9, 0.45), rec(10, 0.5, 0.02)];
        assert_eq!(detect_catastrophic_overfitting(&clean_fell, &OverfitThresholds::with_window(10)), None);
    }

    #[test]
    fn linear_model_metrics() {
        let m = build_linear(3, 2, 4).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.5, -0.2], vec![0.3, 0.0, 0.9]]).unwrap();
        let y = [1, 0];
        // Binary softmax: the input gradient is always a multiple of w1 - w0 with a label-fixed sign.
        assert!((grad_alignment(&m, &x, &y, 0.3, 1).unwrap() - 1.0).abs() < 1e-9);
        let w = m.params()[0].value.data().to_vec();
        let d = [w[3] - w[0], w[4] - w[1], w[5] - w[2]];
        // A direction orthogonal to w1 - w0 leaves the logit margin, hence the loss, unchanged.
        let o = [d[1], -d[0], 0.0];
        let e = Tensor::from_rows(&[o.map(|v| 0.01 * v).to_vec(), o.map(|v| -0.03 * v).to_vec()]).unwrap();
        assert!(linear_approx_error(&m, &x, &y, 0, &e).unwrap() < 1e-12);
        assert_eq!(linear_approx_error(&m, &x, &y, 0, &Tensor::zeros(&[2, 3])).unwrap(), 0.0);
    }

    #[test]
    fn landscape_origin_is_clean_loss() {
        let m = build_toy_mlp(6, Activation::Softplus, 3).unwrap();
        let x = Tensor::from_rows(&[vec![0.2, 0.01], vec![-0.4, 0.03]]).unwrap();
        let y = [1, 0];
        let g = loss_landscape(&m, &x, &y, 0.1, 5, 0).unwrap();
        assert_eq!(g.values[0][0], mean_loss(&m, &x, &y).unwrap());
        assert_eq!(g.to_csv().lines().count(), 6);
    }

    #[test]
    fn plane_residual_of_plane_is_zero() {
        let axis = linspace(1.0, 4);
        let values = axis.iter().map(|a| axis.iter().map(|b| 1.0 + 2.0 * a - b).collect()).collect();
        let g = LandscapeGrid { adv_axis: axis.clone(), rand_axis: axis.clone(), values };
        assert!(g.plane_fit_residual() < 1e-12);
        let values = axis.iter().map(|a| axis.iter().map(|_| a * a).collect()).collect();
        let g = LandscapeGrid { adv_axis: axis.clone(), rand_axis: axis, values };
        assert!(g.adv_slice_residual() > 0.05);
    }

    #[test]
    fn boundary_ratio_axes() {
        // margin = w1 . x - w0 . x with w rows [out, in]
        let mut m = build_linear(2, 2, 0).unwrap();
        let grid = ProbeGrid { half_width: [1.0, 1.0], res: 41 };
        m.params_mut()[0].value = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(boundary_nonrobust_ratio(&m, &grid).unwrap() < 1e-12);
        m.params_mut()[0].value = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(boundary_nonrobust_ratio(&m, &grid).unwrap(), 1e6);
        m.params_mut()[0].value = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 2.0]).unwrap();
        assert!((boundary_nonrobust_ratio(&m, &grid).unwrap() - 2.0).abs() < 1e-9);
        m.params_mut()[0].value = Tensor::zeros(&[2, 2]);
        m.params_mut()[1].value = Tensor::from_vec(vec![0.0, 1.0]);
        assert!(matches!(boundary_nonrobust_ratio(&m, &grid), Err(SlatError::DegenerateBoundary)));
    }
}
