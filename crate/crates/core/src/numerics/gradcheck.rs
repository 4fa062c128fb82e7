//! Central finite-difference checking of tape gradients.
//!
//! The check only ever evaluates forward passes for the numeric side, so it
//! stays independent of the backward rules it verifies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};

/// Outcome of comparing analytic and numeric gradients for every input.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Relative error per input: `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, 1e-6)`.
    /// The floor keeps gradients that vanish identically (for example a key
    /// bias under softmax shift invariance) from reading as 100% error.
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Random `rows x cols` matrix with entries in `[-1, 1)`.
pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Checks `d/dx sum(R * f(x))` for a fixed random weighting `R`, comparing
/// the tape gradient against central differences with step `h`.
///
/// `f` must be deterministic: it is re-run for every perturbation.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, seed: u64, f: F) -> GradCheck
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let weights = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&tape, &vars).value();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(out.shape().to_vec(), (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&tape, &vars);
        out.value().zip_map(&weights, |a, b| a * b).sum()
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&tape, &vars);
    let loss = out.mul(tape.constant(weights.clone())).sum();
    tape.backward(loss);

    let mut rel_errors = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad_or_zeros(*var);
        let mut numeric = Tensor::zeros(inputs[i].shape().to_vec());
        let mut xs = inputs.to_vec();
        for j in 0..inputs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - h;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            numeric.data_mut()[j] = (up - down) / (2.0 * h);
        }
        let diff = analytic.zip_map(&numeric, |a, b| a - b).norm();
        let scale = analytic.norm().max(numeric.norm()).max(1e-6);
        rel_errors.push(diff / scale);
    }
    GradCheck { rel_errors }
}
