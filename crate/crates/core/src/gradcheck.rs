//! Central finite-difference oracle for gradients produced by [`Graph::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Result, XftError};
use crate::tensor::{Scalar, Tensor};

/// Denominator floor in the relative error, so that a pair of vanishing
/// gradients counts as agreement.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Which parameter elements to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Probes {
    All,
    /// `count` elements drawn uniformly over all parameter elements.
    Random { count: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: usize,
    /// `(param, element, analytic, numeric)` at the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + REL_ERR_FLOOR)
}

/// Compares the reverse-mode gradient of the scalar built by `f` with central
/// differences of step `h`. `f` receives the graph and one tracked leaf per
/// entry of `params`, and must be deterministic.
pub fn finite_diff_check<T, F>(f: F, params: &[Tensor<T>], h: f64, probes: Probes) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(XftError::Contract(format!("finite difference step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| g.grad(v).expect("tracked leaf")).collect();

    let eval = |ps: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).data()[0].as_f64())
    };

    let sites: Vec<(usize, usize)> = match probes {
        Probes::All => params
            .iter()
            .enumerate()
            .flat_map(|(p, t)| (0..t.len()).map(move |e| (p, e)))
            .collect(),
        Probes::Random { count, seed } => {
            let total: usize = params.iter().map(|t| t.len()).sum();
            if total == 0 {
                Vec::new()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..count)
                    .map(|_| {
                        let mut flat = rng.gen_range(0..total);
                        let mut p = 0;
                        while flat >= params[p].len() {
                            flat -= params[p].len();
                            p += 1;
                        }
                        (p, flat)
                    })
                    .collect()
            }
        }
    };

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, probes: sites.len(), worst: None };
    for (p, e) in sites {
        let orig = work[p].data()[e];
        work[p].data_mut()[e] = T::of(orig.as_f64() + h);
        let plus = eval(&work)?;
        work[p].data_mut()[e] = T::of(orig.as_f64() - h);
        let minus = eval(&work)?;
        work[p].data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[p].data()[e].as_f64();
        let err = rel_err(a, numeric);
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((p, e, a, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::<f64>::vector(vec![0.5, -1.25, 2.0, 3.5]);
        let r = finite_diff_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            1e-3,
            Probes::All,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::<f64>::vector(vec![1.0, 2.0]);
        let r = finite_diff_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &[x],
            1e-3,
            Probes::All,
        )
        .unwrap();
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let w = Tensor::<f64>::from_rows(&[&[0.3, -0.2, 0.9], &[1.1, 0.4, -0.7]]);
        let x = Tensor::<f64>::from_rows(&[&[0.5, -1.0], &[2.0, 0.25], &[-0.3, 0.8]]);
        let r = finite_diff_check(
            |g, v| {
                let logits = g.matmul(v[1], v[0])?;
                let p = g.softmax(logits)?;
                g.cross_entropy(p, &[2, 0, 1], &[1.0 / 3.0; 3])
            },
            &[w, x],
            1e-3,
            Probes::All,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::<f64>::scalar(1.0);
        assert!(finite_diff_check(|g, v| Ok(g.sum(v[0])), &[x], 0.0, Probes::All).is_err());
    }
}
