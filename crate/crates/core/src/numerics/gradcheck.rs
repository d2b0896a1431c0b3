use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Name of the input or parameter holding the worst element.
    pub worst: String,
}

/// Denominator floor for the relative error.
const ABS_FLOOR: f64 = 1e-8;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Central-difference check of a scalar function of `inputs`.
///
/// `f` must build a one-element output from the given leaf handles. The
/// report carries the largest relative error over every input element.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.input(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.input(&t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: String::new(),
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = format!("input{i}[{j}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    Ok(report)
}

/// Central-difference check of a scalar loss with respect to the trainable
/// parameters of `store`.
///
/// At most `per_param` elements of each parameter are probed, spread evenly
/// across the tensor, which keeps whole-network checks affordable.
pub fn finite_diff_check_params<F>(store: &mut ParamStore<f64>, f: F, eps: f64, per_param: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    store.zero_grads();
    tape.write_param_grads(&grads, store);

    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: String::new(),
    };
    for id in ids {
        let n = store.get(id).value.numel();
        let analytic = store.get(id).value.grad.clone().unwrap_or_else(|| vec![0.0; n]);
        let probes = per_param.min(n).max(1);
        for p in 0..probes {
            let j = p * n / probes;
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + eps;
            let plus = {
                let mut t = Tape::new();
                let o = f(&mut t, store)?;
                t.value(o)[0]
            };
            store.get_mut(id).value.data_mut()[j] = orig - eps;
            let minus = {
                let mut t = Tape::new();
                let o = f(&mut t, store)?;
                t.value(o)[0]
            };
            store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let e = rel_err(analytic[j], numeric);
            report.checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = format!("{}[{j}]: analytic {:e}, numeric {numeric:e}", store.get(id).name, analytic[j]);
            }
        }
    }
    store.zero_grads();
    Ok(report)
}
