//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{invalid, Result};

/// Gradient magnitudes below this are compared on an absolute scale.
pub const GRADCHECK_FLOOR: f64 = 1e-3;
/// Smallest step tried when the stencil straddles a branch point.
const MIN_STEP_RATIO: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` with the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Elements whose stencil crossed a LeakyReLU/abs sign change or a
    /// max-pool winner change at the requested step and were re-measured
    /// with a smaller step on a single smooth piece.
    pub refined: usize,
    /// Elements sitting on a branch point even at the smallest step.
    pub skipped: usize,
}

/// `|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok((g.value(loss).value(), g.branch_fingerprint()))
}

/// Compares the reverse-mode gradient of the scalar `f(inputs)` against
/// central differences with the given `step`. Central differences are only
/// an oracle on a smooth piece, so an element whose stencil changes branch
/// is re-measured with steps shrinking by 10x. With `sample = Some((k, seed))`
/// only `k` randomly chosen elements per input are perturbed.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F, step: f64, sample_per_input: Option<(usize, u64)>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let center = g.branch_fingerprint();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        refined: 0,
        skipped: 0,
    };
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let n = inputs[i].data().len();
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(v).unwrap_or(&zeros);
        let idx: Vec<usize> = match sample_per_input {
            Some((k, seed)) if k < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9));
                sample(&mut rng, n, k).into_vec()
            }
            _ => (0..n).collect(),
        };
        for j in idx {
            let x = inputs[i].data()[j];
            let mut h = step;
            let numeric = loop {
                work[i].data_mut()[j] = x + h;
                let (plus, fp_plus) = evaluate(&work, &f)?;
                work[i].data_mut()[j] = x - h;
                let (minus, fp_minus) = evaluate(&work, &f)?;
                work[i].data_mut()[j] = x;
                if fp_plus == center && fp_minus == center {
                    break Some((plus - minus) / (2.0 * h));
                }
                h /= 10.0;
                if h < step * MIN_STEP_RATIO {
                    break None;
                }
            };
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            if h < step {
                report.refined += 1;
            }
            let err = relative_error(analytic.data()[j], numeric);
            if !(err <= report.max_rel_err) {
                report.max_rel_err = err;
                report.worst = Some((i, j));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Shape;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.3, -0.7, 1.1, 2.0]).unwrap();
        let ok = gradcheck(
            std::slice::from_ref(&x),
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            1e-4,
            None,
        )
        .unwrap();
        assert!(ok.max_rel_err < 1e-6);
        assert_eq!(ok.checked, 4);
        // a constant path has zero analytic gradient but a non-zero numeric one
        let bad = gradcheck(
            std::slice::from_ref(&x),
            |g, v| {
                let c = g.input(g.value(v[0]).clone());
                let sq = g.mul(c, c)?;
                Ok(g.sum(sq))
            },
            1e-4,
            None,
        )
        .unwrap();
        assert!(bad.max_rel_err > 0.5);
    }

    #[test]
    fn stencil_across_kink_is_refined() {
        // |x| at 5e-5: a 1e-4 stencil straddles zero
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![5e-5, 0.4]).unwrap();
        let r = gradcheck(
            std::slice::from_ref(&x),
            |g, v| {
                let a = g.abs(v[0]);
                Ok(g.sum(a))
            },
            1e-4,
            None,
        )
        .unwrap();
        assert_eq!((r.refined, r.skipped), (1, 0));
        assert!(r.max_rel_err < 1e-9);
        let at_kink = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.0]).unwrap();
        let r = gradcheck(
            std::slice::from_ref(&at_kink),
            |g, v| {
                let a = g.abs(v[0]);
                Ok(g.sum(a))
            },
            1e-4,
            None,
        )
        .unwrap();
        assert_eq!((r.checked, r.skipped), (0, 1));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
        assert!((relative_error(0.0, 1e-6) - 1e-3).abs() < 1e-12);
    }
}
