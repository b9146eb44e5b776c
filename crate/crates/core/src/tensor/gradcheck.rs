//! Central finite-difference gradient checking in double precision.

use super::{Binding, ParamStore, Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation applied in each direction.
    pub step: f64,
    /// Denominator floor of the relative error, so that gradients near zero
    /// are compared absolutely.
    pub floor: f64,
    /// At most this many coordinates per input are probed (evenly spaced).
    pub max_probes_per_input: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            floor: 1e-3,
            max_probes_per_input: usize::MAX,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub probed: usize,
    /// Probes skipped because a perturbation flipped a ReLU.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.probed > 0 && self.max_relative_error <= tolerance
    }
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F, E>(f: &F, inputs: &[Tensor<f64>]) -> Result<(Tape<f64>, Vec<Var>, Var), E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(TensorError::NonScalarLoss(tape.shape(loss).to_vec()).into());
    }
    Ok((tape, vars, loss))
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences on every (or every probed) coordinate of `inputs`.
///
/// `f` must be deterministic: it is re-run for every perturbation. Probes
/// whose `±step` perturbation changes the sign pattern of any ReLU are
/// skipped, since the loss is not differentiable across the kink.
pub fn check_gradients<F, E>(
    inputs: &[Tensor<f64>],
    config: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let (tape, vars, loss) = evaluate(&f, inputs)?;
    let grads = tape.backward(loss)?;
    let pattern = tape.relu_pattern();
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("inputs are tracked").clone();
        let len = inputs[k].len();
        let probes = len.min(config.max_probes_per_input.max(1));
        for p in 0..probes {
            let idx = p * len / probes;
            let original = inputs[k].data()[idx];
            let mut side = |delta: f64| -> Result<(f64, bool), E> {
                work[k].data_mut()[idx] = original + delta;
                let (t, _, l) = evaluate(&f, &work)?;
                Ok((t.value(l).data()[0], t.relu_pattern() == pattern))
            };
            let (plus, same_plus) = side(config.step)?;
            let (minus, same_minus) = side(-config.step)?;
            work[k].data_mut()[idx] = original;
            if !(same_plus && same_minus) {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * config.step);
            let err = relative_error(analytic.data()[idx], numeric, config.floor);
            report.probed += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((k, idx));
            }
        }
    }
    Ok(report)
}

/// [`check_gradients`] over every parameter of `store`; `f` receives a
/// binding whose handles point at the (possibly perturbed) parameters.
pub fn check_param_gradients<F, E>(
    store: &ParamStore<f64>,
    config: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &Binding) -> Result<Var, E>,
    E: From<TensorError>,
{
    let inputs: Vec<Tensor<f64>> = store.iter().map(|p| p.tensor.clone()).collect();
    check_gradients(&inputs, config, |tape, vars| {
        f(tape, &Binding::from_vars(vars.to_vec()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_a_wrong_gradient_fails() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = check_gradients(
            std::slice::from_ref(&x),
            &GradCheckConfig::default(),
            |tape, v| -> Result<Var> {
                let sq = tape.hadamard(v[0], v[0])?;
                Ok(tape.sum(sq))
            },
        )
        .unwrap();
        assert_eq!(report.probed, 3);
        assert!(report.passes(1e-8));
        assert!(relative_error(1.0, 1.1, 1e-3) > 0.09);
    }

    #[test]
    fn relu_kinks_are_skipped() {
        let x = Tensor::new(&[2], vec![1e-4, 1.0]).unwrap();
        let report = check_gradients(
            &[x],
            &GradCheckConfig::default(),
            |tape, v| -> Result<Var> {
                let r = tape.relu(v[0]);
                Ok(tape.sum(r))
            },
        )
        .unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.probed, 1);
    }
}
