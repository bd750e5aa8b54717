//! Finite-difference verification of tape gradients.

use super::tape::{Precision, Tape, Var};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-3;

/// Gradient magnitudes below this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(f: &F, params: &[ParamSpec]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference(Precision::F64);
    let vars = params
        .iter()
        .map(|p| tape.param_f64(p.shape.clone(), p.data.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    Ok(tape.scalar(loss))
}

/// Compares tape gradients of the scalar `f` against central differences,
/// evaluating everything in 64-bit mode.
pub fn grad_check<F>(f: F, params: &[ParamSpec], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::F64);
    let vars = params
        .iter()
        .map(|p| tape.param_f64(p.shape.clone(), p.data.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every param has a gradient");
        for i in 0..params[pi].data.len() {
            let orig = params[pi].data[i];
            probe[pi].data[i] = orig + FD_STEP;
            let up = evaluate(&f, &probe)?;
            probe[pi].data[i] = orig - FD_STEP;
            let down = evaluate(&f, &probe)?;
            probe[pi].data[i] = orig;

            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = params[pi].name.clone();
                report.worst_index = i;
            }
            if err > tolerance {
                return Err(Error::GradMismatch {
                    param: params[pi].name.clone(),
                    index: i,
                    analytic: analytic[i],
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // Offset passes gradient straight through; scaling by a detached copy
        // of x makes the tape gradient half the true derivative of x².
        let f = |t: &mut Tape, p: &[Var]| {
            let c = t.detach(p[0]);
            let sq = t.mul(p[0], c)?;
            t.mean(sq)
        };
        let params = [ParamSpec::new("x", vec![1], vec![1.5])];
        assert!(matches!(grad_check(f, &params, 1e-3), Err(Error::GradMismatch { .. })));
    }

    #[test]
    fn accepts_a_correct_gradient() {
        let f = |t: &mut Tape, p: &[Var]| {
            let sq = t.mul(p[0], p[0])?;
            t.mean(sq)
        };
        let params = [ParamSpec::new("x", vec![3], vec![1.5, -0.2, 0.7])];
        let r = grad_check(f, &params, 1e-6).unwrap();
        assert_eq!(r.checked, 3);
    }
}
