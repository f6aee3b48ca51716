use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Bound, DiffArray, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_eps<S: Scalar>(eps: S) -> Result<()> {
    if eps < S::lit(1e-7) || eps > S::lit(1e-4) {
        return Err(Error::Invalid(format!("grad_check eps {eps} outside [1e-7, 1e-4]")));
    }
    Ok(())
}

fn evaluate<S: Scalar, F>(f: &F, xs: &[DiffArray<S>]) -> Result<S>
where
    F: Fn(&mut Tape<S>, &[DiffArray<S>]) -> Result<DiffArray<S>>,
{
    let mut tape = Tape::new();
    let bound: Vec<_> = xs.iter().map(|x| tape.constant(x)).collect();
    let y = f(&mut tape, &bound)?;
    if y.len() != 1 {
        return Err(Error::Invalid(format!("grad_check needs a scalar output, got {:?}", y.shape())));
    }
    let v = y.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Largest `|analytic - central difference| / max(1, |analytic|)` over every
/// coordinate of `x`.
pub fn grad_check<S: Scalar, F>(f: F, x: &DiffArray<S>, eps: S) -> Result<S>
where
    F: Fn(&mut Tape<S>, &DiffArray<S>) -> Result<DiffArray<S>>,
{
    grad_check_many(|t, xs| f(t, &xs[0]), std::slice::from_ref(x), eps, None, 0)
}

/// [`grad_check_many`] over the parameters of `store` whose key starts with
/// one of `prefixes` (all parameters when empty). The closure receives every
/// parameter bound on the tape.
pub fn grad_check_params<S: Scalar, F>(
    store: &ParamStore<S>,
    prefixes: &[&str],
    f: F,
    eps: S,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<S>
where
    F: Fn(&mut Tape<S>, &Bound<S>) -> Result<DiffArray<S>>,
{
    let (checked, fixed): (Vec<_>, Vec<_>) = store
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .partition(|(k, _)| prefixes.is_empty() || prefixes.iter().any(|p| k.starts_with(p)));
    if checked.is_empty() {
        return Err(Error::Invalid(format!("no parameters match {prefixes:?}")));
    }
    let keys: Vec<String> = checked.iter().map(|(k, _)| k.clone()).collect();
    let xs: Vec<DiffArray<S>> = checked.into_iter().map(|(_, v)| v).collect();
    grad_check_many(
        |t, params| {
            let mut arrays: Vec<(String, DiffArray<S>)> = keys.iter().cloned().zip(params.iter().cloned()).collect();
            arrays.extend(fixed.iter().map(|(k, v)| (k.clone(), t.constant(v))));
            f(t, &Bound::from_arrays(arrays))
        },
        &xs,
        eps,
        max_coords,
        seed,
    )
}

/// Multi-input variant. With `max_coords = Some(k)`, at most `k` coordinates
/// per input are probed, chosen by `seed`.
pub fn grad_check_many<S: Scalar, F>(
    f: F,
    xs: &[DiffArray<S>],
    eps: S,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<S>
where
    F: Fn(&mut Tape<S>, &[DiffArray<S>]) -> Result<DiffArray<S>>,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let bound: Vec<_> = xs.iter().map(|x| tape.param(x)).collect();
    let y = f(&mut tape, &bound)?;
    if y.len() != 1 || !y.item().is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {:?}", y.values())));
    }
    let grads = tape.backward(&y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let two = S::lit(2.0);
    let mut worst = S::zero();
    for (which, x) in xs.iter().enumerate() {
        let analytic = grads.get(&bound[which]);
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < x.len() => sample(&mut rng, x.len(), k).into_vec(),
            _ => (0..x.len()).collect(),
        };
        for i in coords {
            let mut probe = xs.to_vec();
            let mut plus = x.to_vec();
            plus[i] += eps;
            probe[which] = DiffArray::new(x.shape().to_vec(), plus)?;
            let fp = evaluate(&f, &probe)?;
            let mut minus = x.to_vec();
            minus[i] -= eps;
            probe[which] = DiffArray::new(x.shape().to_vec(), minus)?;
            let fm = evaluate(&f, &probe)?;
            let numeric = (fp - fm) / (two * eps);
            let a = analytic.values()[i];
            let err = (a - numeric).abs() / S::one().max(a.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = DiffArray::new(vec![1], vec![3.0f64]).unwrap();
        let err = grad_check(|t, x| {
            let y = t.mul(x, x)?;
            t.sum(&y)
        }, &x, 1e-5)
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn abs_sum_recovers_sign() {
        let x = DiffArray::new(vec![4], vec![1.5f64, -0.7, 2.0, -3.1]).unwrap();
        let err = grad_check(|t, x| {
            let y = t.abs(x)?;
            t.sum(&y)
        }, &x, 1e-6)
        .unwrap();
        assert!(err < 1e-6);
        let mut tape = Tape::new();
        let xb = tape.param(&x);
        let y = tape.abs(&xb).unwrap();
        let s = tape.sum(&y).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.get(&xb).values(), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn eps_range_enforced() {
        let x = DiffArray::new(vec![1], vec![1.0f64]).unwrap();
        assert!(grad_check(|t, x| t.sum(x), &x, 1e-3).is_err());
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = DiffArray::new(vec![1], vec![1000.0f64]).unwrap();
        let r = grad_check(|t, x| {
            let y = t.exp(x)?;
            t.sum(&y)
        }, &x, 1e-6);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
