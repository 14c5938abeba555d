//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error across all parameter coordinates.
    pub max_rel_err: f64,
    /// (parameter index, flat coordinate) of the worst error.
    pub worst: Option<(usize, usize)>,
    /// Worst relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub pass: bool,
}

/// Compare analytic gradients of a scalar function against central finite
/// differences, coordinate by coordinate.
///
/// `f` must be deterministic: any sampling noise has to be baked into the
/// closure so that repeated evaluations see identical draws. The relative
/// error of a coordinate is `|a - fd| / max(|a|, |fd|, 1)`, which degrades to
/// an absolute comparison for tiny gradients where finite differences lose
/// precision.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&tape, &vars)?;
        if tape.shape_of(out).iter().product::<usize>() != 1 {
            return Err(Error::shape("grad_check", "function output must be scalar".to_string()));
        }
        let mut grads = tape.backward(out)?;
        vars.iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape_of(v).as_slice())))
            .collect::<Vec<_>>()
    };

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(tape.value_scalar(out))
    };

    let mut probe: Vec<Tensor> = params.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut per_param = vec![0.0f64; params.len()];
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.numel() {
            let orig = param.data()[ci];
            probe[pi].data_mut()[ci] = orig + step;
            let fp = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig - step;
            let fm = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let a = analytic[pi].data()[ci];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if rel > per_param[pi] {
                per_param[pi] = rel;
            }
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((pi, ci));
            }
        }
    }
    Ok(GradCheckReport { max_rel_err, worst, per_param: per_param.clone(), pass: max_rel_err <= tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_at_two() {
        // f(x) = x^3 at x = 2: analytic 12 vs central FD agree to ~1e-10.
        let report = grad_check(
            |tape, vars| {
                let sq = tape.square(vars[0]);
                tape.mul(sq, vars[0])
            },
            &[Tensor::scalar(2.0)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn catches_wrong_gradient() {
        // Pretend d/dx of 2x is 1 by building x + constant-detached x.
        let report = grad_check(
            |tape, vars| {
                let detached = tape.constant(tape.value(vars[0]));
                tape.add(vars[0], detached)
            },
            &[Tensor::scalar(1.5)],
            1e-5,
            1e-6,
        )
        .unwrap();
        // Analytic sees 1, FD sees 2.
        assert!(!report.pass);
        assert!(report.max_rel_err > 0.4);
    }
}
