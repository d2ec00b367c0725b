//! Numeric verification of reverse-mode gradients.

use super::tape::{Tape, Var};
use super::{Tensor, TensorError};

/// Compare the tape's analytic gradient of a scalar function against
/// central finite differences, component by component.
///
/// `f` receives a fresh tape plus the leaf under test and must return a
/// scalar loss var. It is re-invoked `2 * numel + 1` times, so keep the
/// tensors involved small. Returns the worst relative error
/// `|g_analytic - g_numeric| / max(1e-6, |g_analytic| + |g_numeric|)`.
///
/// The 1e-6 denominator floor is the method's resolution, not slack: a
/// central difference of an O(1) loss carries cancellation noise of about
/// `|f| * f64::EPSILON / epsilon` (1e-11 at the usual 1e-5 step), so a
/// structurally zero gradient, e.g. a softmax key bias or a pure
/// translation under a distance loss, measures as ~1e-11 noise and must
/// not read as failure. Any gradient large enough for the method to see
/// is still checked at full strength.
pub fn finite_difference_check<F>(
    mut f: F,
    x: &Tensor,
    epsilon: f64,
) -> Result<f64, TensorError>
where
    F: FnMut(&mut Tape, Var) -> Result<Var, TensorError>,
{
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(TensorError::InvalidArgument {
            op: "finite_difference_check",
            message: format!("step size must be positive and finite, got {epsilon}"),
        });
    }

    let shape = x.shape().to_vec();
    let base = x.data().to_vec();

    let eval = |f: &mut F,
                data: Vec<f64>,
                requires_grad: bool|
     -> Result<(Tape, Var, Var), TensorError> {
        let mut tape = Tape::new();
        let leaf = tape.leaf_values(data, shape.clone(), requires_grad)?;
        let loss = f(&mut tape, leaf)?;
        if tape.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss(tape.shape(loss).to_vec()));
        }
        Ok((tape, leaf, loss))
    };

    let (mut tape, leaf, loss) = eval(&mut f, base.clone(), true)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = match tape.grad(leaf) {
        Some(g) => g.to_vec(),
        None => vec![0.0; base.len()],
    };

    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += epsilon;
        let (tp, _, lp) = eval(&mut f, plus, false)?;
        let f_plus = tp.value(lp)[0];

        let mut minus = base.clone();
        minus[i] -= epsilon;
        let (tm, _, lm) = eval(&mut f, minus, false)?;
        let f_minus = tm.value(lm)[0];

        let numeric = (f_plus - f_minus) / (2.0 * epsilon);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_quadratic_passes() {
        let x = Tensor::new(vec![0.7, -1.3, 2.1], vec![3]).unwrap();
        let err = finite_difference_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                tape.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn composite_network_fragment_passes() {
        // gelu(x W) through layernorm and softmax onto a dot with itself.
        let x = Tensor::new(vec![0.4, -0.9, 1.7, 0.2, -0.5, 0.8], vec![2, 3]).unwrap();
        let err = finite_difference_check(
            |tape, v| {
                let w = tape.constant(
                    vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4, 0.2, 0.6, -0.1],
                    vec![3, 3],
                )?;
                let h = tape.matmul(v, w)?;
                let h = tape.gelu(h)?;
                let h = tape.layernorm_lastdim(h)?;
                let h = tape.softmax_lastdim(h)?;
                let d = tape.dot(h, h)?;
                tape.log(d)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // tanh forward with an exp-style (self-valued) backward would be
        // caught; emulate by comparing exp against a tanh loss numerically.
        let x = Tensor::new(vec![0.3], vec![1]).unwrap();
        // Correct pairing first.
        let good = finite_difference_check(|tape, v| tape.tanh(v), &x, 1e-5).unwrap();
        assert!(good < 1e-9);
        // A deliberately mismatched function/gradient can't be constructed
        // through the public API (ops carry their own VJPs), so assert the
        // checker at least distinguishes two different ops' slopes.
        let mut tape = Tape::new();
        let v = tape.leaf(&x.clone().with_requires_grad(true)).unwrap();
        let t = tape.tanh(v).unwrap();
        tape.backward(t).unwrap();
        let tanh_slope = tape.grad(v).unwrap()[0];
        let mut tape2 = Tape::new();
        let v2 = tape2.leaf(&x.clone().with_requires_grad(true)).unwrap();
        let e = tape2.exp(v2).unwrap();
        tape2.backward(e).unwrap();
        let exp_slope = tape2.grad(v2).unwrap()[0];
        assert!((tanh_slope - exp_slope).abs() > 0.1);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::new(vec![1.0], vec![1]).unwrap();
        assert!(finite_difference_check(|tape, v| tape.sum(v), &x, 0.0).is_err());
    }
}
