//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{EetError, Result};
use crate::params::ParamSet;

/// Smallest coordinate sample a check may use when not checking everything.
pub const MIN_SAMPLED_COORDS: usize = 64;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many coordinates, sampled uniformly; `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub total: usize,
    pub step: f64,
    pub tol: f64,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    pub passed: bool,
}

/// `|a − b| / max(1, |a|, |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Compares `analytic` against central differences of `f` around `params`.
///
/// `f` is evaluated twice at `params` first; differing results mean `f` is
/// not deterministic and the check is refused.
pub fn grad_check<F>(
    mut f: F,
    analytic: &ParamSet,
    params: &ParamSet,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(opts.step > 0.0 && opts.step <= 1e-2) {
        return Err(EetError::contract(format!(
            "finite-difference step {} outside (0, 1e-2]",
            opts.step
        )));
    }
    if !analytic.same_layout(params) {
        return Err(EetError::contract(
            "analytic gradient layout differs from parameters",
        ));
    }
    let first = f(params)?;
    let second = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(EetError::contract(format!(
            "function is not deterministic: {first} then {second}"
        )));
    }

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, (_, t))| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let total = coords.len();
    let chosen: Vec<(usize, usize)> = match opts.max_coords {
        Some(n) if n < total => {
            let n = n.max(MIN_SAMPLED_COORDS).min(total);
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picks: Vec<usize> = sample(&mut rng, total, n).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let names: Vec<&str> = params.names().collect();
    let analytic_values: Vec<&[f64]> = analytic.iter().map(|(_, t)| t.data()).collect();
    let mut probe = params.clone();
    let mut max_rel_err = 0.0;
    let mut worst = None;
    for &(p, i) in &chosen {
        let name = names[p];
        let original = params.get(name).expect("name from params").data()[i];
        probe.get_mut(name).unwrap().data_mut()[i] = original + opts.step;
        let plus = f(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[i] = original - opts.step;
        let minus = f(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic_values[p][i];
        let err = relative_error(a, numeric);
        if err > max_rel_err || worst.is_none() {
            max_rel_err = f64::max(err, max_rel_err);
            worst = Some(Mismatch {
                param: name.to_string(),
                index: i,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(GradCheckReport {
        checked: chosen.len(),
        total,
        step: opts.step,
        tol: opts.tol,
        max_rel_err,
        worst,
        passed: max_rel_err < opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn bowl_params() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap());
        p.insert(
            "b",
            Tensor::new(vec![2, 2], vec![1.0, 0.0, -0.25, 3.0]).unwrap(),
        );
        p
    }

    // f = Σ c_i x_i² with c_i = 1 + index.
    fn bowl(p: &ParamSet) -> f64 {
        p.iter()
            .flat_map(|(_, t)| t.data().iter())
            .enumerate()
            .map(|(i, v)| (1.0 + i as f64) * v * v)
            .sum()
    }

    fn bowl_grad(p: &ParamSet) -> ParamSet {
        let mut g = p.clone();
        let mut k = 0;
        for (_, t) in g.iter_mut() {
            for v in t.data_mut() {
                *v *= 2.0 * (1.0 + k as f64);
                k += 1;
            }
        }
        g
    }

    #[test]
    fn quadratic_bowl_is_exact() {
        let p = bowl_params();
        let opts = GradCheckOptions {
            step: 1e-3,
            tol: 1e-8,
            ..Default::default()
        };
        let report = grad_check(|q| Ok(bowl(q)), &bowl_grad(&p), &p, &opts).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_err < 1e-8);
        assert_eq!(report.checked, 7);
    }

    #[test]
    fn wrong_gradient_fails() {
        let p = bowl_params();
        let mut g = bowl_grad(&p);
        g.get_mut("b").unwrap().data_mut()[3] += 1.0;
        let report = grad_check(|q| Ok(bowl(q)), &g, &p, &GradCheckOptions::default()).unwrap();
        assert!(!report.passed);
        let worst = report.worst.unwrap();
        assert_eq!((worst.param.as_str(), worst.index), ("b", 3));
    }

    #[test]
    fn nondeterministic_function_is_refused() {
        let p = bowl_params();
        let mut calls = 0.0;
        let res = grad_check(
            |q| {
                calls += 1.0;
                Ok(bowl(q) + calls)
            },
            &bowl_grad(&p),
            &p,
            &GradCheckOptions::default(),
        );
        assert!(matches!(res, Err(EetError::Contract(_))));
    }

    #[test]
    fn step_out_of_range_is_refused() {
        let p = bowl_params();
        for step in [0.0, 0.5] {
            let opts = GradCheckOptions {
                step,
                ..Default::default()
            };
            assert!(grad_check(|q| Ok(bowl(q)), &bowl_grad(&p), &p, &opts).is_err());
        }
    }

    #[test]
    fn sampling_checks_at_least_the_minimum() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::full(&[200], 0.3));
        let opts = GradCheckOptions {
            max_coords: Some(10),
            ..Default::default()
        };
        let report = grad_check(|q| Ok(bowl(q)), &bowl_grad(&p), &p, &opts).unwrap();
        assert_eq!(report.checked, MIN_SAMPLED_COORDS);
        assert_eq!(report.total, 200);
        assert!(report.passed);
    }
}
