//! Central finite-difference verification of analytic gradients.
//!
//! The check runs the model closure once for analytic gradients, then
//! perturbs a sample of parameter entries one at a time and compares. It is
//! only meaningful in 64-bit precision, which is the only precision this
//! crate computes in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::params::ParamSet;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Relative step: h = rel_step · (1 + |p|).
    pub rel_step: f64,
    /// Cap on entries sampled per parameter tensor; large tensors are
    /// subsampled deterministically from `seed`.
    pub max_entries_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            rel_step: 1e-5,
            max_entries_per_param: 16,
            seed: 0x9d5c,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// `f(params, want_grads)` evaluates the scalar loss; when `want_grads` is
/// true it must also return gradient buffers indexed by `ParamId` (the
/// `zero_grads` layout). Parameters are restored exactly after each probe.
/// Relative error uses `|a−d| / max(|a|, |d|, 1e-6)` so that near-zero
/// gradients do not blow up the ratio.
pub fn grad_check<F>(
    params: &mut ParamSet,
    mut f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet, bool) -> Result<(f64, Option<Vec<Vec<f64>>>)>,
{
    let (loss0, grads) = f(params, true)?;
    if !loss0.is_finite() {
        return Err(Error::numeric(format!(
            "grad check aborted: base loss is {loss0}"
        )));
    }
    let grads = grads.ok_or_else(|| {
        Error::numeric("grad check: closure returned no gradients".to_string())
    })?;
    if grads.len() != params.len() {
        return Err(Error::shape(format!(
            "grad check: {} gradient buffers for {} parameters",
            grads.len(),
            params.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };

    for (id, grad) in grads.iter().enumerate() {
        let n = params.tensor(id).numel();
        if grad.len() != n {
            return Err(Error::shape(format!(
                "grad check: gradient for '{}' has {} values, parameter has {n}",
                params.name(id),
                grad.len()
            )));
        }
        let picks: Vec<usize> = if n <= cfg.max_entries_per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, cfg.max_entries_per_param).into_vec()
        };
        for i in picks {
            let p0 = params.tensor(id).data()[i];
            let h = cfg.rel_step * (1.0 + p0.abs());

            params.tensor_mut(id).data_mut()[i] = p0 + h;
            let (lp, _) = f(params, false)?;
            params.tensor_mut(id).data_mut()[i] = p0 - h;
            let (lm, _) = f(params, false)?;
            params.tensor_mut(id).data_mut()[i] = p0;

            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::numeric(format!(
                    "grad check aborted: perturbed loss not finite at '{}'[{i}]",
                    params.name(id)
                )));
            }
            let fd = (lp - lm) / (2.0 * h);
            let a = grads[id][i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            report.entries_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = params.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Accumulate a graph's parameter gradients into the zero_grads layout.
    fn collect(params: &ParamSet, g: &Graph) -> Vec<Vec<f64>> {
        let mut out = params.zero_grads();
        for (id, grad) in g.param_grads() {
            for (o, gv) in out[id].iter_mut().zip(grad) {
                *o += gv;
            }
        }
        out
    }

    #[test]
    fn affine_gradients_match_to_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::randn(&[2, 4], 0.5, &mut rng)).unwrap();
        ps.add("b", Tensor::randn(&[4], 0.5, &mut rng)).unwrap();
        let x = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let target = Tensor::zeros(&[3, 4]);

        let report = grad_check(
            &mut ps,
            |ps, want| {
                let mut g = Graph::new(ps);
                let xv = g.input(x.clone());
                let w = g.param(0);
                let b = g.param(1);
                let y = g.affine(xv, w, b)?;
                let t = g.input(target.clone());
                let loss = g.mae(y, t)?;
                let lv = g.value(loss).data()[0];
                if want {
                    g.backward(loss)?;
                    Ok((lv, Some(collect(ps, &g))))
                } else {
                    Ok((lv, None))
                }
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }

    #[test]
    fn softmax_ce_composite_matches_to_1e5() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::randn(&[3, 4], 0.5, &mut rng)).unwrap();
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let targets = vec![1usize, 0, 3, 2];
        let mask = vec![true, true, false, true];

        let report = grad_check(
            &mut ps,
            |ps, want| {
                let mut g = Graph::new(ps);
                let xv = g.input(x.clone());
                let w = g.param(0);
                let z = g.matmul(xv, w)?;
                let loss = g.masked_ce(z, &targets, &mask, 4)?;
                let lv = g.value(loss).data()[0];
                if want {
                    g.backward(loss)?;
                    Ok((lv, Some(collect(ps, &g))))
                } else {
                    Ok((lv, None))
                }
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn layer_norm_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::randn(&[3, 6], 1.0, &mut rng)).unwrap();
        ps.add("gamma", Tensor::randn(&[6], 0.3, &mut rng)).unwrap();
        ps.add("beta", Tensor::randn(&[6], 0.3, &mut rng)).unwrap();
        let target = Tensor::randn(&[3, 6], 1.0, &mut rng);

        let report = grad_check(
            &mut ps,
            |ps, want| {
                let mut g = Graph::new(ps);
                let x = g.param(0);
                let ga = g.param(1);
                let be = g.param(2);
                let y = g.layer_norm(x, ga, be, 1e-5)?;
                let t = g.input(target.clone());
                let loss = g.mae(y, t)?;
                let lv = g.value(loss).data()[0];
                if want {
                    g.backward(loss)?;
                    Ok((lv, Some(collect(ps, &g))))
                } else {
                    Ok((lv, None))
                }
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn bce_and_gelu_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::randn(&[3, 5], 0.5, &mut rng)).unwrap();
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let targets = vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let include = vec![true, true, true, false, true, true, true, true, false, true];

        let report = grad_check(
            &mut ps,
            |ps, want| {
                let mut g = Graph::new(ps);
                let xv = g.input(x.clone());
                let w = g.param(0);
                let z0 = g.matmul(xv, w)?;
                let z = g.gelu(z0);
                let loss = g.bce_logits(z, &targets, &include)?;
                let lv = g.value(loss).data()[0];
                if want {
                    g.backward(loss)?;
                    Ok((lv, Some(collect(ps, &g))))
                } else {
                    Ok((lv, None))
                }
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn aborts_on_non_finite_loss() {
        let mut ps = ParamSet::new();
        ps.add("p", Tensor::scalar(1.0)).unwrap();
        let err = grad_check(
            &mut ps,
            |_, _| Ok((f64::NAN, Some(vec![vec![0.0]]))),
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err.category(), "numeric");
    }
}
