use super::tape::{NodeId, Tape};
use crate::error::{Result, SlatError};
use crate::tensor::Tensor;

/// Central-difference gradient of the scalar graph built by `build` at `point`.
pub fn central_difference<F>(build: &F, point: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.var(p);
        let out = build(&mut tape, x)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(SlatError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };
    let mut grad = Tensor::zeros(point.shape());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        grad.data_mut()[i] = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    Ok(grad)
}

/// Max over coordinates of `|analytic - fd| / max(1, |fd|)`.
pub fn grad_check<F>(build: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(SlatError::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let x = tape.var(point.clone());
    let out = build(&mut tape, x)?;
    tape.backward_to(out, &[x])?;
    let analytic = tape.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));
    let numeric = central_difference(&build, point, h)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_graph_is_exact() {
        let w = Tensor::new(vec![1, 3], vec![0.5, -2.0, 1.25]).unwrap();
        let err = grad_check(
            |t, x| {
                let w = t.constant(w.clone());
                let b = t.constant(Tensor::from_vec(vec![0.1]));
                let y = t.dense(x, w, b)?;
                Ok(t.sum(y))
            },
            &Tensor::from_vec(vec![0.3, 0.7, -1.1]),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let r = grad_check(|t, x| Ok(t.sum(x)), &Tensor::from_vec(vec![1.0]), 0.0);
        assert!(r.is_err());
    }
}
