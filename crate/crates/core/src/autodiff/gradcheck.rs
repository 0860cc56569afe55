use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::{Error, Result, Scalar, Tensor};

/// Gradients smaller than this are compared absolutely: below it the
/// central difference is dominated by rounding noise.
pub const DENOM_FLOOR: f64 = 1e-6;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, DENOM_FLOOR)`.
    pub max_rel_error: f64,
    /// `(parameter index, flat element)` attaining the maximum.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

fn eval<T, F>(f: &F, params: &[Tensor<T>]) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.variable(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Autodiff("checked function must return a scalar".into()));
    }
    let x = v.data()[0];
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("function value {x}")));
    }
    Ok(x)
}

/// Checks every element of every parameter.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], epsilon: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let picks: Vec<Vec<usize>> = params.iter().map(|p| (0..p.len()).collect()).collect();
    check(f, params, epsilon, &picks)
}

/// Checks at most `per_tensor` randomly chosen elements of each parameter.
pub fn grad_check_sampled<T, F>(
    f: F,
    params: &[Tensor<T>],
    epsilon: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            if p.len() <= per_tensor {
                (0..p.len()).collect()
            } else {
                let mut v = sample(&mut rng, p.len(), per_tensor).into_vec();
                v.sort_unstable();
                v
            }
        })
        .collect();
    check(f, params, epsilon, &picks)
}

fn check<T, F>(f: F, params: &[Tensor<T>], epsilon: f64, picks: &[Vec<usize>]) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.variable(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).data()[0].is_finite() {
        return Err(Error::NonFinite("function value".into()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let eps = T::lit(epsilon);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, elems) in picks.iter().enumerate() {
        for &e in elems {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + eps;
            let plus = eval(&f, &work)?;
            work[pi].data_mut()[e] = orig - eps;
            let minus = eval(&f, &work)?;
            work[pi].data_mut()[e] = orig;

            let numeric = (plus - minus).as_f64() / (2.0 * epsilon);
            let a = analytic[pi].data()[e].as_f64();
            let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, e));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let r = grad_check(
            |t: &mut Tape<f64>, v: &[Var]| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[Tensor::scalar(2.0)],
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn rejects_bad_epsilon_and_non_finite() {
        let f = |t: &mut Tape<f64>, v: &[Var]| t.sum(v[0]);
        assert!(grad_check(f, &[Tensor::scalar(1.0)], 0.0).is_err());
        let g = |t: &mut Tape<f64>, v: &[Var]| t.sum(v[0]);
        assert!(matches!(
            grad_check(g, &[Tensor::scalar(f64::INFINITY)], 1e-4),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at exactly 0 from the left has subgradient 0, numeric gives 0.5
        let r = grad_check(
            |t: &mut Tape<f64>, v: &[Var]| {
                let y = t.relu(v[0])?;
                t.sum(y)
            },
            &[Tensor::scalar(0.0)],
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.5);
    }
}
