//! Central-difference verification of analytic gradients.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::Tensor;
use crate::error::{ensure_contract, Result};

/// Worst coordinate of one parameter.
#[derive(Clone, Debug)]
pub struct ParamError {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Worst coordinate per parameter, in name order.
    pub per_param: Vec<ParamError>,
}

/// Loss evaluation hook. Called with `want_grads = true` exactly once to
/// obtain the loss and its analytic parameter gradients; subsequent probe
/// calls pass `false` and may skip the backward pass.
pub type LossEval<'e> =
    dyn FnMut(&ParamStore, bool) -> Result<(f64, Option<Vec<(String, Tensor)>>)> + 'e;

/// Compares the analytic gradient of every parameter coordinate against the
/// central difference `(L(θ+h) − L(θ−h)) / 2h`, reporting
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check(store: &mut ParamStore, h: f64, eval: &mut LossEval) -> Result<GradCheckReport> {
    ensure_contract!(
        (1e-6..=1e-3).contains(&h),
        "step size h must lie in [1e-6, 1e-3], got {h:e}"
    );
    let (loss0, grads) = eval(store, true)?;
    ensure_contract!(loss0.is_finite(), "loss evaluated to {loss0}");
    let grads: BTreeMap<String, Tensor> = grads
        .ok_or_else(|| {
            crate::error::Error::Contract("loss evaluation returned no gradients".into())
        })?
        .into_iter()
        .collect();

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut report = GradCheckReport::default();

    for name in names {
        let len = store.value(&name)?.len();
        let mut worst: Option<ParamError> = None;
        for i in 0..len {
            let orig = store.value(&name)?.data()[i];
            store.value_mut(&name)?.data_mut()[i] = orig + h;
            let (lp, _) = eval(store, false)?;
            store.value_mut(&name)?.data_mut()[i] = orig - h;
            let (lm, _) = eval(store, false)?;
            store.value_mut(&name)?.data_mut()[i] = orig;
            ensure_contract!(
                lp.is_finite() && lm.is_finite(),
                "probe of {name:?}[{i}] produced non-finite loss"
            );
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[i]);
            let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
            if worst.as_ref().is_none_or(|w| rel > w.rel_err) {
                worst = Some(ParamError {
                    name: name.clone(),
                    index: i,
                    analytic,
                    numeric,
                    rel_err: rel,
                });
            }
        }
        if let Some(w) = worst {
            report.max_rel_err = report.max_rel_err.max(w.rel_err);
            report.per_param.push(w);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::graph::{Executor, GraphExec, Var};
    use crate::tensor::kernels::OffsetField;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn linear_loss_is_exact_to_rounding() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        store
            .insert("a", Tensor::from_fn(&[3], |_| rng.gen_range(-1.0..1.0)))
            .unwrap();
        store
            .insert("b", Tensor::from_fn(&[2, 2], |_| rng.gen_range(-1.0..1.0)))
            .unwrap();
        let report = grad_check(&mut store, 1e-5, &mut |s: &ParamStore, want| {
            let loss: f64 = s.iter().map(|(_, t)| t.data().iter().sum::<f64>()).sum();
            let grads = want.then(|| {
                s.iter()
                    .map(|(n, t)| (n.to_string(), Tensor::filled(t.shape(), 1.0)))
                    .collect()
            });
            Ok((loss, grads))
        })
        .unwrap();
        assert!(
            report.max_rel_err <= 1e-10,
            "linear rel err {:e}",
            report.max_rel_err
        );
    }

    #[test]
    fn quadratic_loss_within_1e9_at_h_1e5() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        store
            .insert("w", Tensor::from_fn(&[5], |_| rng.gen_range(-2.0..2.0)))
            .unwrap();
        let report = grad_check(&mut store, 1e-5, &mut |s: &ParamStore, want| {
            let w = s.value("w")?;
            let loss: f64 = w.data().iter().map(|x| x * x).sum();
            let grads =
                want.then(|| vec![("w".to_string(), w.map(|x| 2.0 * x))]);
            Ok((loss, grads))
        })
        .unwrap();
        assert!(
            report.max_rel_err <= 1e-9,
            "quadratic rel err {:e}",
            report.max_rel_err
        );
    }

    #[test]
    fn rejects_out_of_range_step() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[1])).unwrap();
        let r = grad_check(&mut store, 1e-2, &mut |_s: &ParamStore, _| {
            Ok((0.0, Some(vec![])))
        });
        assert!(r.is_err());
    }

    /// Runs grad_check on a one-op graph: the op output is reduced to a
    /// scalar by mean absolute difference against a constant far below its
    /// range, which is smooth and linear there.
    fn check_graph_op(
        store: &mut ParamStore,
        build: impl Fn(&mut GraphExec) -> crate::error::Result<Var>,
    ) -> f64 {
        let report = grad_check(store, 1e-5, &mut |s: &ParamStore, want| {
            let mut ex = GraphExec::new(s);
            let out = build(&mut ex)?;
            let floor = ex.graph.leaf(Tensor::filled(&ex.shape(&out), -25.0), false);
            let loss = ex.graph.mean_abs_diff(out, floor)?;
            let loss_val = ex.value(loss).data()[0];
            let grads = if want {
                let g = ex.backward(loss)?;
                Some(ex.param_grads(&g))
            } else {
                None
            };
            Ok((loss_val, grads))
        })
        .unwrap();
        report.max_rel_err
    }

    fn seeded_store(entries: &[(&str, &[usize])], seed: u64) -> ParamStore {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in entries {
            // keep values away from activation kinks and ties
            let t = Tensor::from_fn(shape, |_| {
                let v: f64 = rng.gen_range(0.2..1.5);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            });
            store.insert(name, t).unwrap();
        }
        store
    }

    #[test]
    fn conv2d_gradient_matches_central_differences() {
        for stride in [1usize, 2] {
            let mut store = seeded_store(
                &[("x", &[2, 5, 6]), ("w", &[3, 2, 3, 3]), ("b", &[3])],
                10 + stride as u64,
            );
            let err = check_graph_op(&mut store, |ex| {
                let (x, w, b) = (ex.param("x")?, ex.param("w")?, ex.param("b")?);
                ex.conv2d(&x, &w, &b, stride)
            });
            assert!(err < 1e-5, "conv stride {stride} rel err {err:e}");
        }
    }

    #[test]
    fn activation_gradients_match_central_differences() {
        let mut store = seeded_store(&[("x", &[2, 4, 4])], 20);
        let err = check_graph_op(&mut store, |ex| {
            let x = ex.param("x")?;
            ex.leaky_relu(&x, 0.1)
        });
        assert!(err < 1e-5, "leaky_relu rel err {err:e}");

        let err = check_graph_op(&mut store, |ex| {
            let x = ex.param("x")?;
            ex.sigmoid(&x)
        });
        assert!(err < 1e-5, "sigmoid rel err {err:e}");

        let err = check_graph_op(&mut store, |ex| {
            let x = ex.param("x")?;
            ex.scale(&x, 2.0)
        });
        assert!(err < 1e-5, "scale rel err {err:e}");
    }

    #[test]
    fn arithmetic_and_layout_gradients_match_central_differences() {
        let mut store = seeded_store(&[("a", &[2, 3, 3]), ("b", &[2, 3, 3])], 30);
        let err = check_graph_op(&mut store, |ex| {
            let (a, b) = (ex.param("a")?, ex.param("b")?);
            ex.add(&a, &b)
        });
        assert!(err < 1e-5, "add rel err {err:e}");

        let err = check_graph_op(&mut store, |ex| {
            let (a, b) = (ex.param("a")?, ex.param("b")?);
            ex.mul(&a, &b)
        });
        assert!(err < 1e-5, "mul rel err {err:e}");

        let err = check_graph_op(&mut store, |ex| {
            let (a, b) = (ex.param("a")?, ex.param("b")?);
            ex.concat_channels(&a, &b)
        });
        assert!(err < 1e-5, "concat rel err {err:e}");

        let mut store = seeded_store(&[("x", &[4, 3, 3])], 31);
        let err = check_graph_op(&mut store, |ex| {
            let x = ex.param("x")?;
            ex.pixel_shuffle(&x)
        });
        assert!(err < 1e-5, "pixel_shuffle rel err {err:e}");

        let mut store = seeded_store(&[("s", &[2, 4, 4])], 32);
        let off = OffsetField {
            h: 3,
            w: 3,
            dx: vec![0, 1, -1, 2, 0, 5, -7, 1, 0],
            dy: vec![1, 0, 0, -1, 2, 0, 1, -6, 0],
        };
        let err = check_graph_op(&mut store, move |ex| {
            let s = ex.param("s")?;
            ex.gather(&s, &off)
        });
        assert!(err < 1e-5, "gather rel err {err:e}");
    }

    #[test]
    fn attention_and_fusion_gradients_match_central_differences() {
        let mut store = seeded_store(
            &[
                ("q", &[3, 3, 3]),
                ("k0", &[3, 3, 3]),
                ("k1", &[3, 3, 3]),
                ("k2", &[3, 3, 3]),
            ],
            40,
        );
        let err = check_graph_op(&mut store, |ex| {
            let q = ex.param("q")?;
            let ks = vec![ex.param("k0")?, ex.param("k1")?, ex.param("k2")?];
            ex.attention(&q, &ks)
        });
        assert!(err < 1e-5, "attention rel err {err:e}");

        let mut store = seeded_store(
            &[
                ("q", &[2, 3, 3]),
                ("k0", &[2, 3, 3]),
                ("k1", &[2, 3, 3]),
                ("v0", &[2, 3, 3]),
                ("v1", &[2, 3, 3]),
            ],
            41,
        );
        let err = check_graph_op(&mut store, |ex| {
            let q = ex.param("q")?;
            let ks = vec![ex.param("k0")?, ex.param("k1")?];
            let vs = vec![ex.param("v0")?, ex.param("v1")?];
            let att = ex.attention(&q, &ks)?;
            ex.fuse(&att, &vs)
        });
        assert!(err < 1e-5, "attention+fuse rel err {err:e}");
    }

    #[test]
    fn mean_abs_diff_gradient_matches_away_from_ties() {
        let mut store = seeded_store(&[("a", &[2, 3, 3])], 50);
        let b = store.value("a").unwrap().map(|v| v + 3.0);
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        let b = b.map(|v| v + rng.gen_range(0.1..0.5));
        store.insert("b", b).unwrap();
        let report = grad_check(&mut store, 1e-5, &mut |s: &ParamStore, want| {
            let mut ex = GraphExec::new(s);
            let a = ex.param("a")?;
            let b = ex.param("b")?;
            let loss = ex.mean_abs_diff(&a, &b)?;
            let loss_val = ex.value(loss).data()[0];
            let grads = if want {
                let g = ex.backward(loss)?;
                Some(ex.param_grads(&g))
            } else {
                None
            };
            Ok((loss_val, grads))
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "mean_abs_diff rel err {:e}",
            report.max_rel_err
        );
    }
}
