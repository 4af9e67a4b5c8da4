use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)` over checked parameters.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Perturbations that flipped a ReLU on/off pattern; central differences
    /// are meaningless across a kink, so those parameters are resampled.
    pub skipped_kinks: usize,
    /// `(tensor index, element index)` of the worst parameter.
    pub worst: Option<(usize, usize)>,
}

/// Compares reverse-mode gradients against central differences on a random
/// subset of at least `samples` parameters (all of them if there are fewer).
///
/// `build` evaluates the loss for the given parameter values and returns the
/// graph, the scalar loss node, and one leaf per parameter tensor.
pub fn finite_diff_check<T, F>(
    params: &mut [Tensor<T>],
    mut build: F,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&[Tensor<T>]) -> Result<(Graph<T>, Var, Vec<Var>)>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Invalid(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let (mut graph, loss, leaves) = build(params)?;
    if leaves.len() != params.len() {
        return Err(Error::Invalid("one leaf per parameter tensor expected".into()));
    }
    graph.backward(loss)?;
    let base_pattern = graph.relu_pattern();
    let analytic: Vec<Option<Vec<f64>>> = leaves
        .iter()
        .map(|&v| graph.grad(v).ok().map(|g| g.iter().map(|x| x.as_f64()).collect()))
        .collect();
    drop(graph);

    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for (ti, t) in params.iter().enumerate() {
        if t.requires_grad {
            candidates.extend((0..t.numel()).map(|e| (ti, e)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = sample(&mut rng, candidates.len(), candidates.len());

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    let mut eval = |params: &[Tensor<T>]| -> Result<(f64, u64)> {
        let (g, l, _) = build(params)?;
        Ok((g.value(l).data()[0].as_f64(), g.relu_pattern()))
    };
    for idx in order.iter() {
        if report.checked >= samples {
            break;
        }
        let (ti, ei) = candidates[idx];
        let original = params[ti].data()[ei];
        let plus = T::from_f64(original.as_f64() + epsilon);
        let minus = T::from_f64(original.as_f64() - epsilon);
        params[ti].data_mut()[ei] = plus;
        let lp = eval(params);
        params[ti].data_mut()[ei] = minus;
        let lm = eval(params);
        params[ti].data_mut()[ei] = original;
        let ((lp, pp), (lm, pm)) = (lp?, lm?);
        if pp != base_pattern || pm != base_pattern {
            report.skipped_kinks += 1;
            continue;
        }
        let step = plus.as_f64() - minus.as_f64();
        let fd = (lp - lm) / step;
        let ad = analytic[ti].as_ref().map_or(0.0, |g| g[ei]);
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
        if rel > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(rel);
            report.worst = Some((ti, ei));
        }
        report.checked += 1;
    }
    Ok(report)
}
