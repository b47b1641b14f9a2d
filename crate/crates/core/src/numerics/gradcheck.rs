//! Central-difference gradient verification.

use rand::Rng;

use super::Parameterized;
use crate::error::{Error, Result};

/// One checked coordinate.
#[derive(Debug, Clone)]
pub struct GradSample {
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Distinct parameter names that were sampled at least once.
    pub fn groups_covered(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.samples.iter().map(|s| s.parameter.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names
    }
}

pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8)
}

/// Compares the gradients currently stored in `model`'s parameters against
/// central differences of `loss` on `n_samples` randomly drawn coordinates.
///
/// Coordinates are drawn round-robin over parameter groups so every group is
/// covered once `n_samples` reaches the group count. The caller must have
/// populated the analytic gradients of `loss` beforehand. `loss` must be
/// deterministic; it is evaluated twice at the base point and the check is
/// refused if the values differ.
pub fn finite_diff_check<P, F, R>(
    model: &mut P,
    mut loss: F,
    n_samples: usize,
    h: f64,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    P: Parameterized,
    F: FnMut(&P) -> Result<f64>,
    R: Rng + ?Sized,
{
    let first = loss(model)?;
    let second = loss(model)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministicLoss);
    }

    let groups: Vec<(String, usize)> = model
        .parameters()
        .into_iter()
        .filter(|(_, p)| !p.is_empty())
        .map(|(n, p)| (n, p.len()))
        .collect();
    if groups.is_empty() {
        return Err(Error::validation("model has no parameters to check"));
    }

    let mut picks = Vec::with_capacity(n_samples);
    for k in 0..n_samples {
        let g = k % groups.len();
        picks.push((g, rng.gen_range(0..groups[g].1)));
    }

    let mut samples = Vec::with_capacity(n_samples);
    for (g, idx) in picks {
        let name = groups[g].0.clone();
        let (orig, analytic) = with_param(model, &name, |p| {
            (p.value.as_slice()[idx], p.grad.as_slice()[idx])
        });
        with_param(model, &name, |p| p.value.as_mut_slice()[idx] = orig + h);
        let plus = loss(model);
        with_param(model, &name, |p| p.value.as_mut_slice()[idx] = orig - h);
        let minus = loss(model);
        with_param(model, &name, |p| p.value.as_mut_slice()[idx] = orig);
        let numeric = (plus? - minus?) / (2.0 * h);
        samples.push(GradSample {
            parameter: name,
            index: idx,
            analytic,
            numeric,
            rel_error: relative_error(numeric, analytic),
        });
    }
    Ok(GradCheckReport { samples })
}

fn with_param<P, T>(model: &mut P, name: &str, f: impl FnOnce(&mut super::Parameter) -> T) -> T
where
    P: Parameterized,
{
    let mut params = model.parameters_mut();
    let (_, p) = params
        .iter_mut()
        .find(|(n, _)| n == name)
        .expect("parameter listed by parameters()");
    f(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, Parameter};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Quadratic {
        theta: Parameter,
    }

    impl Parameterized for Quadratic {
        fn parameters(&self) -> Vec<(String, &Parameter)> {
            vec![("theta".into(), &self.theta)]
        }
        fn parameters_mut(&mut self) -> Vec<(String, &mut Parameter)> {
            vec![("theta".into(), &mut self.theta)]
        }
    }

    fn half_square(q: &Quadratic) -> f64 {
        0.5 * q.theta.value.as_slice().iter().map(|t| t * t).sum::<f64>()
    }

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut q = Quadratic {
            theta: Parameter::new(Matrix::from_vec(1, 10, vals.clone()).unwrap(), true),
        };
        q.theta.grad = Matrix::from_vec(1, 10, vals).unwrap();
        let report = finite_diff_check(&mut q, |q| Ok(half_square(q)), 20, 1e-5, &mut rng).unwrap();
        assert!(report.max_rel_error() < 1e-9, "{:?}", report.worst());
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut q = Quadratic {
            theta: Parameter::new(Matrix::filled(1, 3, 1.0), true),
        };
        q.theta.grad = Matrix::filled(1, 3, 2.0);
        let report = finite_diff_check(&mut q, |q| Ok(half_square(q)), 3, 1e-5, &mut rng).unwrap();
        assert!(report.max_rel_error() > 0.4);
    }

    #[test]
    fn nondeterministic_loss_is_refused() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut noise = ChaCha8Rng::seed_from_u64(5);
        let mut q = Quadratic {
            theta: Parameter::new(Matrix::filled(1, 3, 1.0), true),
        };
        let res = finite_diff_check(
            &mut q,
            |q| Ok(half_square(q) + noise.gen::<f64>()),
            3,
            1e-5,
            &mut rng,
        );
        assert!(matches!(res, Err(Error::NonDeterministicLoss)));
    }

    #[test]
    fn check_restores_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut q = Quadratic {
            theta: Parameter::new(Matrix::filled(1, 3, 0.3), true),
        };
        q.theta.grad = Matrix::filled(1, 3, 0.3);
        finite_diff_check(&mut q, |q| Ok(half_square(q)), 6, 1e-5, &mut rng).unwrap();
        assert_eq!(q.theta.value, Matrix::filled(1, 3, 0.3));
    }
}
