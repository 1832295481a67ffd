use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, x: Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let out = f(&mut tape, xv)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::contract(format!("grad_check closure returned shape {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Compare the tape gradient of `f` at `x` with central differences and
/// return the largest elementwise relative error.
///
/// `f` receives a fresh tape and the leaf holding its input, and returns the
/// scalar it computed.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    let base = tape.value(out).data()[0];
    let grads = tape.backward(out)?;
    let zero = Tensor::zeros(x.shape());
    let analytic = grads.get(xv).unwrap_or(&zero);

    let again = eval_scalar(&f, x.clone())?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::InconsistentEvaluation(format!(
            "two evaluations at the same point gave {base} and {again}"
        )));
    }

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = eval_scalar(&f, probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let lo = eval_scalar(&f, probe.clone())?;
        probe.data_mut()[i] = orig;
        let fd = (hi - lo) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], fd));
    }
    Ok(worst)
}

/// Run [`grad_check`] against each input of a multi-input function in turn,
/// holding the others constant. Returns one error per input.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    (0..inputs.len())
        .map(|which| {
            grad_check(
                |tape, x| {
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| if j == which { x } else { tape.constant(t.clone()) })
                        .collect();
                    f(tape, &vars)
                },
                &inputs[which],
                eps,
            )
        })
        .collect()
}
