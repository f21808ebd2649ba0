use super::{Tape, Tensor, TensorError, Var};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Largest `|a − n| / max(1, |a|, |n|)` over all elements.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub pass: bool,
}

fn evaluate<F, E>(f: &F, x: &Tensor) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, xv)?;
    Ok(tape.value(y).item()?)
}

/// Checks the gradient of a scalar function `f` at `x` by central differences
/// with step `h`, passing when every element's relative error is below `tol`.
///
/// `f` is evaluated twice at `x` first; if the two values differ the function
/// is not deterministic and no comparison is attempted.
pub fn grad_check<F, E>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradReport, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    let base = tape.value(y).item()?;
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let again = evaluate(&f, x)?;
    if again.to_bits() != base.to_bits() {
        return Err(TensorError::NonDeterministic((again - base).abs()).into());
    }

    let mut probe = x.clone();
    let mut max_rel_err = 0.0_f64;
    let mut worst_index = 0;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if rel > max_rel_err || rel.is_nan() {
            max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
            worst_index = i;
        }
    }
    Ok(GradReport {
        max_rel_err,
        worst_index,
        checked: x.numel(),
        pass: max_rel_err < tol,
    })
}
