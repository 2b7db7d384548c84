//! Central finite-difference check of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Number of coordinates to probe; all of them when larger than the parameter count.
    pub coords: usize,
    pub seed: u64,
    /// Replacement draws allowed per rejected coordinate.
    pub max_retries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            coords: 64,
            seed: 0,
            max_retries: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates dropped because the loss has a kink there.
    pub kinks: usize,
    /// Coordinates dropped because the derivative sits below the difference noise floor.
    pub below_noise: usize,
}

/// Max over probed coordinates of `|analytic − numeric| / max(1e-8, |numeric|)`.
///
/// A coordinate is rejected and redrawn when its one-sided differences disagree
/// (ReLU kink, max tie) or when both gradients are within the rounding noise of
/// the central difference, where the relative error is meaningless.
pub fn grad_check<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    analytic: &[f64],
    params: &[f64],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let n = params.len();
    if analytic.len() != n {
        return Err(Error::GradCheck(format!("{} analytic entries for {n} parameters", analytic.len())));
    }
    if n == 0 {
        return Err(Error::GradCheck("no parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let order: Vec<usize> = sample(&mut rng, n, n).into_iter().collect();
    let want = opts.coords.min(n);
    let budget = want + want * opts.max_retries;

    let mut p = params.to_vec();
    let f0 = f(&p);
    if !f0.is_finite() {
        return Err(Error::GradCheck(format!("loss is {f0} at the probe")));
    }
    let noise = 1e3 * f64::EPSILON * f0.abs().max(1.0) / opts.h;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        kinks: 0,
        below_noise: 0,
    };
    for &i in order.iter().take(budget) {
        if report.checked == want {
            break;
        }
        let orig = p[i];
        p[i] = orig + opts.h;
        let fp = f(&p);
        p[i] = orig - opts.h;
        let fm = f(&p);
        p[i] = orig;
        let numeric = (fp - fm) / (2.0 * opts.h);
        let fwd = (fp - f0) / opts.h;
        let bwd = (f0 - fm) / opts.h;
        let scale = fwd.abs().max(bwd.abs()).max(noise);
        if (fwd - bwd).abs() > 0.05 * scale + 10.0 * noise {
            report.kinks += 1;
            continue;
        }
        if numeric.abs() < noise && analytic[i].abs() < noise {
            report.below_noise += 1;
            continue;
        }
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
        }
    }
    if report.checked == 0 {
        return Err(Error::GradCheck(format!(
            "no usable coordinate ({} kinks, {} below noise)",
            report.kinks, report.below_noise
        )));
    }
    Ok(report)
}
