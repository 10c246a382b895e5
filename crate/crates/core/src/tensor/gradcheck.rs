use super::{Result, Tape, Tensor, TensorError, Var};

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    let v = tape.value(y).item()?;
    if !v.is_finite() {
        return Err(TensorError::NonFinite {
            op: "grad_check objective".into(),
        });
    }
    Ok(v)
}

/// Central-difference gradient of a scalar function.
pub fn numeric_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(out)
}

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    if !tape.value(y).item()?.is_finite() {
        return Err(TensorError::NonFinite {
            op: "grad_check objective".into(),
        });
    }
    let analytic = tape.backward(y)?.get_or_zeros(&tape, xv);
    let numeric = numeric_gradient(&f, x, eps)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max))
}
