//! Central finite-difference gradient verification.
//!
//! The checker never touches the reverse pass it is validating: it rebuilds
//! the forward computation from scratch for every perturbed input, so it
//! stays an independent oracle for `Tape::backward`.

use super::{Tape, Tensor, TensorError, Var};

/// Default perturbation step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Worst relative error across all checked inputs and elements.
    pub max_rel_error: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Relative error with an absolute fallback for small gradients:
/// `|a - n| / max(|a|, |n|, 1)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central finite differences of `f` at `inputs`, one gradient vector per
/// input tensor.
pub fn numeric_gradients<F>(f: &mut F, inputs: &[Tensor], step: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for (idx, input) in inputs.iter().enumerate() {
        let mut grad = vec![0.0; input.numel()];
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            perturb(&mut plus[idx], e, step);
            perturb(&mut minus[idx], e, -step);
            grad[e] = (f(&plus) - f(&minus)) / (2.0 * step);
        }
        grads.push(grad);
    }
    grads
}

fn perturb(t: &mut Tensor, element: usize, delta: f64) {
    let mut values = t.values().to_vec();
    values[element] += delta;
    *t = Tensor::new(t.shape().to_vec(), values)
        .expect("perturbation keeps shape")
        .with_grad();
}

/// Compares tape gradients against central finite differences.
///
/// `build` must construct the forward pass on the given tape from the leaf
/// vars handed to it (one per input, in order) and return the scalar loss
/// var. It is invoked once for the analytic gradients and `2 * numel` more
/// times for the numeric ones.
pub fn check<F>(build: F, inputs: &[Tensor], step: f64) -> Result<GradcheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let run = |tensors: &[Tensor]| -> Result<(Tape, Vec<Var>, Var), TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad()))
            .collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };

    let (mut tape, vars, loss) = run(inputs)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut eval = |tensors: &[Tensor]| -> f64 {
        let (tape, _, loss) = run(tensors).expect("forward succeeded once; shapes unchanged");
        tape.scalar_value(loss)
    };
    let numeric = numeric_gradients(&mut eval, inputs, step);

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let a = if a.is_empty() {
            // No gradient flowed to this input: treat as all zeros.
            vec![0.0; n.len()]
        } else {
            a.clone()
        };
        for (e, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let rel = relative_error(av, nv);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, e);
                report.analytic_at_worst = av;
                report.numeric_at_worst = nv;
            }
        }
    }
    Ok(report)
}
