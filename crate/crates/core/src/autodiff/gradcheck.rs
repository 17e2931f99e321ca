//! Central finite-difference oracle for checking tape gradients.

use super::{Tape, Tensor, Var};

/// Outcome of a gradient check, one entry per input tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`; zero when both
    /// gradients vanish.
    pub relative_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of the scalar `f` with central differences
/// of step `h` taken independently on every input element.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> GradCheck
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars);
        tape.backward(out)
            .expect("gradient check requires a scalar output");
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect::<Vec<_>>()
    };

    let eval = |probe: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };

    let mut probe = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let mut g = Tensor::zeros(input.shape());
        for e in 0..input.numel() {
            let x0 = input.data()[e];
            probe[k].data_mut()[e] = x0 + h;
            let up = eval(&probe);
            probe[k].data_mut()[e] = x0 - h;
            let down = eval(&probe);
            probe[k].data_mut()[e] = x0;
            g.data_mut()[e] = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }

    let relative_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .collect();
    GradCheck {
        analytic,
        numeric,
        relative_errors,
    }
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}
