//! Finite-difference verification of reverse-mode gradients.
//!
//! Runs in f64 only: central differences at f32 drown in rounding error.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};

pub const DEFAULT_H: f64 = 1e-5;

/// Worst-case comparison between reverse-mode and central-difference
/// gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub worst_rel_err: f64,
    /// Parameter name and flat element index where the worst error occurred.
    pub worst_at: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the reverse-mode gradient of `f` against central finite
/// differences (f(p+h) - f(p-h)) / 2h for every element of every parameter.
///
/// `f` must build the loss from scratch on each call: it receives a graph
/// plus the bound parameters and returns the scalar loss node.
pub fn grad_check<F>(store: &ParamStore<f64>, h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::InvalidArgument {
            op: "grad_check",
            msg: format!("step size {h} outside [1e-6, 1e-4]"),
        });
    }

    // Analytic pass.
    let mut graph = Graph::new();
    let bound = graph.bind(store);
    let loss = f(&mut graph, &bound)?;
    if graph.value(loss).len() != 1 || !graph.value(loss).item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let grads = graph.backward(loss)?;

    let eval = |store: &ParamStore<f64>, f: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let b = g.bind(store);
        let loss = f(&mut g, &b)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut worst_at = None;
    let mut checked = 0usize;
    let mut perturbed = store.clone();
    for (id, entry) in store.entries() {
        for i in 0..entry.tensor.len() {
            let orig = entry.tensor.data()[i];
            perturbed.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&perturbed, &mut f)?;
            perturbed.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&perturbed, &mut f)?;
            perturbed.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads
                .get(bound.var(id))
                .map(|g| g.data()[i])
                .unwrap_or(0.0);
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            let rel = (numeric - analytic).abs() / denom;
            checked += 1;
            if rel > worst {
                worst = rel;
                worst_at = Some((entry.name.clone(), i));
            }
        }
    }

    Ok(GradCheckReport {
        worst_rel_err: worst,
        worst_at,
        checked,
    })
}

/// Negative-control fixture: sum of squares whose backward rule is
/// deliberately wrong by a factor of two. The checker must flag it.
pub fn corrupted_sum_of_squares(g: &mut Graph<f64>, p: Var) -> Var {
    use crate::tensor::Tensor;
    let v = g.value(p);
    let total: f64 = v.data().iter().map(|x| x * x).sum();
    let rule = move |ctx: &crate::graph::BackCtx<'_, f64>| {
        let g0 = ctx.out_grad.item();
        let wrong: Vec<f64> = ctx.inputs[0].data().iter().map(|x| 4.0 * x * g0).collect();
        vec![Some(
            Tensor::new(ctx.inputs[0].shape().to_vec(), wrong).expect("same shape"),
        )]
    };
    g.insert(Tensor::scalar(total), vec![p], Some(Box::new(rule)), false)
}

/// Convenience wrapper that fails with [`Error::GradCheckFailed`] when the
/// worst relative error exceeds `tolerance`.
pub fn assert_grad_check<F>(
    context: &str,
    store: &ParamStore<f64>,
    h: f64,
    tolerance: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let report = grad_check(store, h, f)?;
    if report.worst_rel_err > tolerance {
        return Err(Error::GradCheckFailed {
            context: format!(
                "{context}, worst at {:?}",
                report.worst_at.as_ref().map(|(n, i)| format!("{n}[{i}]"))
            ),
            worst: report.worst_rel_err,
            tolerance,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_is_exact_under_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.register("p", Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng), true);
        let report = grad_check(&store, DEFAULT_H, |g, b| {
            let p = b.var(store.id_by_name("p").unwrap());
            let sq = g.mul(p, p)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(
            report.worst_rel_err < 1e-8,
            "quadratics should be exact, got {}",
            report.worst_rel_err
        );
    }

    #[test]
    fn rejects_out_of_range_step() {
        let store = ParamStore::<f64>::new();
        assert!(grad_check(&store, 1e-2, |g, _| {
            let c = g.constant(Tensor::scalar(0.0));
            Ok(g.sum(c))
        })
        .is_err());
    }

    #[test]
    fn detects_a_corrupted_backward_rule() {
        let mut store = ParamStore::new();
        store.register(
            "p",
            Tensor::<f64>::new(vec![2], vec![1.5, -0.5]).unwrap(),
            true,
        );
        let report = grad_check(&store, DEFAULT_H, |g, b| {
            let p = b.var(store.id_by_name("p").unwrap());
            Ok(corrupted_sum_of_squares(g, p))
        })
        .unwrap();
        assert!(
            report.worst_rel_err > 0.3,
            "corrupted rule slipped through: {}",
            report.worst_rel_err
        );
    }

    /// Loss = sum(W . op_output) with random fixed W, so every output
    /// element carries an O(1) weight and the check is well conditioned.
    fn check_primitive<F>(name: &str, seed: u64, store: ParamStore<f64>, out_shape: &[usize], f: F)
    where
        F: Fn(&mut Graph<f64>, &Bound) -> crate::error::Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let weights = Tensor::<f64>::randn(out_shape, 1.0, &mut rng);
        let report = grad_check(&store, DEFAULT_H, |g, b| {
            let out = f(g, b)?;
            let w = g.constant(weights.clone());
            let weighted = g.mul(out, w)?;
            Ok(g.sum(weighted))
        })
        .unwrap();
        assert!(
            report.worst_rel_err < 1e-5,
            "{name} seed {seed}: {} at {:?}",
            report.worst_rel_err,
            report.worst_at
        );
    }

    #[test]
    fn gradients_of_primitives_match_finite_differences() {
        // randomized property over 20 seeds, every primitive within 1e-5
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
            let b2 = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
            // bounded away from zero for div
            let mut bdiv = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
            for v in bdiv.data_mut() {
                *v = *v + 0.5 * v.signum();
            }
            let mm_a = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
            let mm_b = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
            let gain = Tensor::<f64>::randn(&[5], 0.5, &mut rng);
            let bias = Tensor::<f64>::randn(&[5], 0.5, &mut rng);
            // strictly positive base for pow
            let mut pos = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
            for v in pos.data_mut() {
                *v = v.abs() + 0.2;
            }

            let two = |n1: &str, t1: &Tensor<f64>, n2: &str, t2: &Tensor<f64>| {
                let mut s = ParamStore::new();
                s.register(n1, t1.clone(), true);
                s.register(n2, t2.clone(), true);
                s
            };
            let one = |t: &Tensor<f64>| {
                let mut s = ParamStore::new();
                s.register("x", t.clone(), true);
                s
            };
            let xv = |s: &ParamStore<f64>, b: &Bound| b.var(s.id_by_name("x").unwrap());

            {
                let s = two("a", &a, "b", &b2);
                let (ia, ib) = (s.id_by_name("a").unwrap(), s.id_by_name("b").unwrap());
                check_primitive("add", seed, s.clone(), &[4, 5], |g, b| {
                    g.add(b.var(ia), b.var(ib))
                });
                check_primitive("sub", seed, s.clone(), &[4, 5], |g, b| {
                    g.sub(b.var(ia), b.var(ib))
                });
                check_primitive("mul", seed, s.clone(), &[4, 5], |g, b| {
                    g.mul(b.var(ia), b.var(ib))
                });
                check_primitive("min_elem", seed, s.clone(), &[4, 5], |g, b| {
                    g.min_elem(b.var(ia), b.var(ib))
                });
                check_primitive("max_elem", seed, s, &[4, 5], |g, b| {
                    g.max_elem(b.var(ia), b.var(ib))
                });
            }
            {
                let s = two("a", &a, "b", &bdiv);
                let (ia, ib) = (s.id_by_name("a").unwrap(), s.id_by_name("b").unwrap());
                check_primitive("div", seed, s, &[4, 5], |g, b| g.div(b.var(ia), b.var(ib)));
            }
            {
                let s = two("a", &mm_a, "b", &mm_b);
                let (ia, ib) = (s.id_by_name("a").unwrap(), s.id_by_name("b").unwrap());
                check_primitive("matmul", seed, s, &[4, 3], |g, b| {
                    g.matmul(b.var(ia), b.var(ib))
                });
            }
            {
                let s = one(&a);
                check_primitive("scale", seed, s.clone(), &[4, 5], |g, b| {
                    Ok(g.scale(xv(&s, b), -1.7))
                });
                check_primitive("add_scalar", seed, s.clone(), &[4, 5], |g, b| {
                    Ok(g.add_scalar(xv(&s, b), 0.3))
                });
                check_primitive("gelu", seed, s.clone(), &[4, 5], |g, b| Ok(g.gelu(xv(&s, b))));
                check_primitive("sigmoid", seed, s.clone(), &[4, 5], |g, b| {
                    Ok(g.sigmoid(xv(&s, b)))
                });
                check_primitive("softplus", seed, s.clone(), &[4, 5], |g, b| {
                    Ok(g.softplus(xv(&s, b)))
                });
                check_primitive("softmax", seed, s.clone(), &[4, 5], |g, b| {
                    g.softmax(xv(&s, b), None)
                });
                let mask = [
                    true, false, true, true, false, true, true, true, false, true, true, false,
                    true, true, true, true, true, false, true, true,
                ];
                check_primitive("softmax_masked", seed, s.clone(), &[4, 5], move |g, b| {
                    g.softmax(xv(&s, b), Some(&mask))
                });
            }
            {
                let s = one(&pos);
                check_primitive("pow_scalar", seed, s.clone(), &[4, 5], |g, b| {
                    Ok(g.pow_scalar(xv(&s, b), 1.7))
                });
            }
            {
                let mut s = ParamStore::new();
                s.register("x", a.clone(), true);
                s.register("gain", gain.clone(), true);
                s.register("bias", bias.clone(), false);
                let (ix, ig, ib) = (
                    s.id_by_name("x").unwrap(),
                    s.id_by_name("gain").unwrap(),
                    s.id_by_name("bias").unwrap(),
                );
                check_primitive("layer_norm", seed, s.clone(), &[4, 5], |g, b| {
                    g.layer_norm(b.var(ix), b.var(ig), b.var(ib), 1e-5)
                });
                check_primitive("add_bias", seed, s, &[4, 5], |g, b| {
                    g.add_bias(b.var(ix), b.var(ib))
                });
            }
        }
    }

    #[test]
    fn conv_and_pool_gradients() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = Tensor::<f64>::randn(&[8, 3], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[3, 3, 4], 0.5, &mut rng);
            let wb = Tensor::<f64>::randn(&[4], 0.5, &mut rng);
            let dw = Tensor::<f64>::randn(&[3, 3], 0.5, &mut rng);
            let valid = [true, true, true, true, true, true, true, false];

            let mut s = ParamStore::new();
            s.register("x", x, true);
            s.register("w", w, true);
            s.register("wb", wb, false);
            s.register("dw", dw, true);
            let (ix, iw, iwb, idw) = (
                s.id_by_name("x").unwrap(),
                s.id_by_name("w").unwrap(),
                s.id_by_name("wb").unwrap(),
                s.id_by_name("dw").unwrap(),
            );

            check_primitive("conv1d", seed, s.clone(), &[8, 4], |g, b| {
                g.conv1d(b.var(ix), b.var(iw), Some(b.var(iwb)), 1, 1, false)
            });
            check_primitive("conv1d_stride2", seed, s.clone(), &[4, 4], |g, b| {
                g.conv1d(b.var(ix), b.var(iw), Some(b.var(iwb)), 2, 1, false)
            });
            check_primitive("conv1d_depthwise", seed, s.clone(), &[8, 3], |g, b| {
                g.conv1d(b.var(ix), b.var(idw), None, 1, 1, true)
            });
            check_primitive("zero_rows", seed, s.clone(), &[8, 3], move |g, b| {
                g.zero_rows(b.var(ix), &valid)
            });
            check_primitive("max_pool2", seed, s.clone(), &[4, 3], move |g, b| {
                g.max_pool2(b.var(ix), &valid)
            });
        }
    }
}
