use super::{OpKind, Tape, Tensor, Var};
use crate::error::Result;

/// Result of comparing autodiff gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Worst relative error per input tensor.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// |a − b| / max(1e-8, |a| + |b|)
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Checks the gradient of the scalar `f(x)` against central differences
/// (f(x+he) − f(x−he)) / 2h.
pub fn finite_difference_check<F>(x: &Tensor, step: f64, mut f: F) -> Result<FdReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_many(std::slice::from_ref(x), step, None, |tape, vars| {
        f(tape, vars[0])
    })
}

/// Multi-input version of [`finite_difference_check`]. `f` receives one
/// leaf per input. With `max_coords`, at most that many evenly spaced
/// coordinates are probed per input.
pub fn finite_difference_check_many<F>(
    inputs: &[Tensor],
    step: f64,
    max_coords: Option<usize>,
    f: F,
) -> Result<FdReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_difference_check_faulty(inputs, step, max_coords, None, f)
}

/// As [`finite_difference_check_many`], but the analytic pass runs on a tape
/// whose backward for `fault` is sign-flipped.
pub fn finite_difference_check_faulty<F>(
    inputs: &[Tensor],
    step: f64,
    max_coords: Option<usize>,
    fault: Option<OpKind>,
    mut f: F,
) -> Result<FdReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let mut tape = fault.map_or_else(Tape::new, Tape::with_fault);
        let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let mut grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, x)| grads.take(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };

    let mut values = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_rel_err = 0.0;
    let mut worst = (0, 0);
    let mut coords_checked = 0;
    for i in 0..inputs.len() {
        let n = inputs[i].numel();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut input_max = 0.0f64;
        for j in (0..n).step_by(stride) {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + step;
            let plus = evaluate(&mut f, &values)?;
            values[i].data_mut()[j] = orig - step;
            let minus = evaluate(&mut f, &values)?;
            values[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[i].data()[j], numeric);
            if err > max_rel_err {
                max_rel_err = err;
                worst = (i, j);
            }
            input_max = input_max.max(err);
            coords_checked += 1;
        }
        per_input.push(input_max);
    }
    Ok(FdReport {
        per_input,
        max_rel_err,
        worst,
        coords_checked,
    })
}

fn evaluate<F>(f: &mut F, values: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::create(&[7], Fill::Uniform { lo: -2.0, hi: 2.0 }, 1).unwrap();
        let w = Tensor::create(&[7], Fill::Uniform { lo: -2.0, hi: 2.0 }, 2).unwrap();
        let report = finite_difference_check(&x, 1e-3, |tape, x| {
            let w = tape.constant(w.clone());
            let p = tape.mul(x, w)?;
            tape.sum(p)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-10, "{report:?}");
        assert_eq!(report.coords_checked, 7);
    }

    #[test]
    fn quadratic_function() {
        let x = Tensor::create(&[5], Fill::Uniform { lo: -2.0, hi: 2.0 }, 3).unwrap();
        let report = finite_difference_check(&x, 1e-3, |tape, x| {
            let sq = tape.mul(x, x)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-8, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = Tensor::create(&[4], Fill::Uniform { lo: 0.5, hi: 2.0 }, 3).unwrap();
        let report =
            finite_difference_check_faulty(&[x], 1e-3, None, Some(OpKind::Scale), |tape, v| {
                let y = tape.scale(v[0], 3.0)?;
                tape.sum(y)
            })
            .unwrap();
        assert!((report.max_rel_err - 1.0).abs() < 1e-9);
    }
}
