use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Compares tape gradients of a scalar function against central differences.
///
/// Returns `max_i |analytic_i − cd_i| / max(|analytic_i|, |cd_i|, 1e-8)`. The
/// step actually taken is measured after rounding to `f32`, so the difference
/// quotient divides by the real perturbation rather than the nominal `eps`.
pub fn grad_check<F>(function: F, input: &Tensor, eps: f32) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, NodeId) -> Result<NodeId>,
{
    if !input.is_finite() {
        return Err(Error::Numeric { step: 0, message: "grad_check input is not finite".into() });
    }
    let eval = |x: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let node = tape.constant(x);
        let out = function(&mut tape, node)?;
        let v = tape.value(out).item().ok_or_else(|| Error::contract("grad_check function must be scalar"))?;
        Ok(v as f64)
    };

    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let loss = function(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(x).expect("leaf gradient is always present").clone();

    let mut worst = 0.0f64;
    for i in 0..input.len() {
        let mut plus = input.clone();
        let mut minus = input.clone();
        plus.data_mut()[i] += eps;
        minus.data_mut()[i] -= eps;
        let h = plus.data()[i] as f64 - minus.data()[i] as f64;
        let cd = (eval(plus)? - eval(minus)?) / h;
        let a = analytic.data()[i] as f64;
        if !cd.is_finite() || !a.is_finite() {
            return Err(Error::Numeric { step: i, message: "non-finite gradient in grad_check".into() });
        }
        let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::vector(vec![0.5, -1.5, 2.0]).unwrap();
        let input = Tensor::vector(vec![0.3, 0.1, -0.7]).unwrap();
        let err = grad_check(
            |tape, x| {
                let c = tape.constant(w.clone());
                let m = tape.mul(x, c)?;
                Ok(tape.sum(m))
            },
            &input,
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn rejects_non_finite_input() {
        let input = Tensor::vector(vec![f32::NAN]).unwrap();
        assert!(grad_check(|t, x| Ok(t.sum(x)), &input, 1e-3).is_err());
    }
}
