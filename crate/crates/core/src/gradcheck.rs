//! Central finite differences, the independent oracle for [`crate::tape`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Target, TargetSpace};
use crate::tensor::Tensor;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite-difference probe at coordinate {i}"),
            });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `max_i |a_i - b_i| / max_i |b_i|`, i.e. the deviation relative to the
/// reference gradient's largest component. Falls back to the absolute
/// deviation when the reference is identically zero.
pub fn relative_deviation(analytic: &Tensor, reference: &Tensor) -> f64 {
    let diff = analytic.max_abs_diff(reference);
    let scale = reference.max_abs();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Minimum distance from ReLU / max-pool kinks for a sample point to count
/// as smooth.
pub const KINK_MARGIN: f64 = 1e-3;
/// Probe step used by [`check_model`].
pub const CHECK_STEP: f64 = 1e-6;
/// Failure threshold used by the `check` command.
pub const CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub model: String,
    pub points: usize,
    pub step: f64,
    pub max_relative_deviation: f64,
    /// Smallest kink margin among the accepted sample points; `None` for
    /// models without kinks.
    pub min_kink_margin: Option<f64>,
    /// Points that had to be accepted below [`KINK_MARGIN`].
    pub rough_points: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_relative_deviation <= tolerance
    }
}

/// Compares tape gradients of the full model against central differences
/// at `points` random inputs drawn uniformly from `[-1, 1]`. Each point is
/// resampled (up to 100 times) until every ReLU input and max-pool window
/// is at least [`KINK_MARGIN`] from a kink. The output component checked
/// cycles through the model's outputs.
pub fn check_model(model: &Model, points: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = crate::fixtures::rng(seed);
    let view = model.split(0)?;
    let space = match model.layers().last() {
        Some(l) if l.is_normalization() => TargetSpace::Prob,
        _ => TargetSpace::Logit,
    };
    let outputs = model.output_shape().iter().product::<usize>();
    let sample = |rng: &mut rand_chacha::ChaCha8Rng| {
        let n = model.input_shape().iter().product();
        Tensor::new(
            model.input_shape().to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .expect("input shape")
    };

    let mut worst = 0.0f64;
    let mut min_margin = f64::INFINITY;
    let mut rough = 0;
    for p in 0..points {
        let target = Target {
            index: p % outputs,
            space,
        };
        let mut best: Option<(f64, Tensor)> = None;
        for _ in 0..100 {
            let x = sample(&mut rng);
            let margin = view.forward_tail(&x, target)?.eval.tape.kink_margin();
            if best.as_ref().is_none_or(|(m, _)| margin > *m) {
                best = Some((margin, x));
            }
            if margin >= KINK_MARGIN {
                break;
            }
        }
        let (margin, x) = best.expect("at least one sample");
        if margin < KINK_MARGIN {
            rough += 1;
            log::warn!("gradient check point {p}: kink margin {margin:e} below {KINK_MARGIN:e}");
        }
        min_margin = min_margin.min(margin);
        let analytic = view.tail_gradient(&x, target)?;
        let numeric = finite_diff_gradient(|t| view.tail_value(t, target), &x, CHECK_STEP)?;
        worst = worst.max(relative_deviation(&analytic, &numeric));
    }
    Ok(GradCheckReport {
        model: model.name().to_string(),
        points,
        step: CHECK_STEP,
        max_relative_deviation: worst,
        min_kink_margin: min_margin.is_finite().then_some(min_margin),
        rough_points: rough,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sigmoid;

    #[test]
    fn linear_model_checks_clean() {
        let m = crate::fixtures::linear(&[&[2.0, -3.0], &[0.5, 1.0]], &[0.1, 0.0]);
        let r = check_model(&m, 20, 1).unwrap();
        assert!(r.max_relative_deviation < 1e-9, "{r:?}");
        assert_eq!(r.rough_points, 0);
        assert_eq!(r.min_kink_margin, None);
        let back: GradCheckReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn square() {
        let g = finite_diff_gradient(|x| Ok(x.data()[0] * x.data()[0]), &Tensor::scalar(3.0), 1e-5)
            .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let g = finite_diff_gradient(
            |x| Ok(x.data().iter().map(|&v| sigmoid(v)).sum()),
            &Tensor::scalar(0.0),
            1e-5,
        )
        .unwrap();
        assert!((g.data()[0] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_probe() {
        let x = Tensor::scalar(0.0);
        assert!(finite_diff_gradient(|_| Ok(0.0), &x, 0.0).is_err());
        let err = finite_diff_gradient(|t| Ok(1.0 / t.data()[0].abs().min(0.0)), &x, 1e-3)
            .err()
            .unwrap();
        assert!(err.is_numerical());
    }
}
