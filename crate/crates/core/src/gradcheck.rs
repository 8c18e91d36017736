//! Central finite-difference oracle for tape gradients.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Max relative error per named parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub per_param: BTreeMap<String, f64>,
}

impl GradReport {
    pub fn max(&self) -> f64 {
        self.per_param.values().copied().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// `f` receives a fresh graph and the bound parameter handles and returns a
/// scalar loss node. For each parameter the error is
/// `max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, max_i |analytic_i|, 1e-12)`,
/// i.e. relative to the scale of that parameter's gradient.
pub fn grad_check<F>(params: &BTreeMap<String, Tensor<f64>>, eps: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, Var>) -> Result<Var>,
{
    let eval = |ps: &BTreeMap<String, Tensor<f64>>, with_grad: bool| -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: BTreeMap<String, Var> = ps
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone().with_grad(with_grad))))
            .collect();
        let loss = f(&mut g, &vars)?;
        let value = g.value(loss).item();
        let mut grads = BTreeMap::new();
        if with_grad {
            g.backward(loss)?;
            for (k, &v) in &vars {
                let n = ps[k].len();
                grads.insert(k.clone(), g.grad(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec));
            }
        }
        Ok((value, grads))
    };
    let (_, analytic) = eval(params, true)?;
    let mut report = GradReport::default();
    let mut work = params.clone();
    for (name, an) in &analytic {
        let mut numeric = vec![0.0; an.len()];
        for (i, num) in numeric.iter_mut().enumerate() {
            let orig = work[name].data()[i];
            work.get_mut(name).expect("param").data_mut()[i] = orig + eps;
            let (up, _) = eval(&work, false)?;
            work.get_mut(name).expect("param").data_mut()[i] = orig - eps;
            let (down, _) = eval(&work, false)?;
            work.get_mut(name).expect("param").data_mut()[i] = orig;
            *num = (up - down) / (2.0 * eps);
        }
        let scale = numeric.iter().chain(an.iter()).fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
        let err = an.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        report.per_param.insert(name.clone(), err / scale);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{AttentionShape, ScanShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn params(rng: &mut ChaCha8Rng, specs: &[(&str, &[usize])]) -> BTreeMap<String, Tensor<f64>> {
        specs.iter().map(|(k, s)| (k.to_string(), rand_t(rng, s))).collect()
    }

    #[test]
    fn square_at_three() {
        let p = BTreeMap::from([("x".to_string(), Tensor::scalar(3.0))]);
        let r = grad_check(&p, 1e-3, |g, v| g.mul(v["x"], v["x"])).unwrap();
        assert!(r.max() < 1e-6);
    }

    #[test]
    fn elementwise_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = params(&mut rng, &[("a", &[3, 4]), ("b", &[4])]);
        let r = grad_check(&p, 1e-3, |g, v| {
            let s = g.add(v["a"], v["b"])?;
            let m = g.mul(s, v["a"])?;
            let e = g.silu(m);
            let sp = g.softplus(e);
            let sg = g.sigmoid(v["a"]);
            let ex = g.exp(sg);
            let lg = g.log(ex);
            let d = g.sub(sp, lg)?;
            let n = g.neg(d);
            let sc = g.scale(n, 0.7);
            let sm = g.softmax_rows(sc);
            let w = g.mul(sm, v["a"])?;
            Ok(g.mean(w))
        })
        .unwrap();
        assert!(r.max() < 1e-5, "{r:?}");
    }

    #[test]
    fn matmul_norm_embedding_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = params(&mut rng, &[("e", &[6, 4]), ("w", &[4, 6]), ("n", &[4])]);
        let r = grad_check(&p, 1e-3, |g, v| {
            let x = g.embedding(v["e"], &[1, 5, 0, 2])?;
            let x = g.rms_norm(x, v["n"], 1e-6)?;
            let l = g.matmul(x, v["w"])?;
            g.cross_entropy(l, &[5, 0, 3, 3])
        })
        .unwrap();
        assert!(r.max() < 1e-5, "{r:?}");
    }

    #[test]
    fn attention_rope_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = params(
            &mut rng,
            &[("q", &[5, 8]), ("k", &[5, 4]), ("v", &[5, 4]), ("cw", &[8, 3]), ("cb", &[8])],
        );
        let r = grad_check(&p, 1e-3, |g, v| {
            let shape = AttentionShape {
                heads: 4,
                kv_heads: 2,
                head_dim: 2,
                scale: 0.7,
            };
            let q = g.rope(v["q"], 4, 2, 100.0, 0);
            let k = g.rope(v["k"], 2, 2, 100.0, 0);
            let a = g.causal_attention(q, k, v["v"], shape)?;
            let c = g.causal_conv(a, v["cw"], v["cb"])?;
            let c = g.silu(c);
            let sq = g.mul(c, c)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max() < 1e-5, "{r:?}");
    }

    #[test]
    fn scan_with_initial_state_and_head_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (t, h, n, ns) = (5, 2, 3, 4);
        let mut p = params(
            &mut rng,
            &[
                ("x", &[t, h * n]),
                ("b", &[t, h * n]),
                ("c", &[t, h * ns]),
                ("dt", &[t, h * ns]),
                ("alog", &[h, n, ns]),
                ("h0", &[h, n, ns]),
                ("rb", &[h, n, ns]),
            ],
        );
        // keep log-decays in a moderate range
        for x in p.get_mut("alog").unwrap().data_mut() {
            *x *= 0.5;
        }
        let r = grad_check(&p, 1e-3, |g, v| {
            let b = g.head_matmul(v["b"], v["rb"], h)?;
            let d = g.softplus(v["dt"]);
            let e = g.exp(v["alog"]);
            let a = g.neg(e);
            let shape = ScanShape {
                heads: h,
                channels: n,
                state: ns,
            };
            let y = g.ssm_scan(v["x"], b, v["c"], d, a, Some(v["h0"]), shape)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max() < 1e-5, "{r:?}");
    }

    #[test]
    fn fused_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let p = params(&mut rng, &[("l", &[6, 5])]);
        let mut teacher = vec![0.0; 3 * 5];
        for row in teacher.chunks_exact_mut(5) {
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            crate::tensor::log_softmax(&logits, row);
            for x in row.iter_mut() {
                *x = x.exp();
            }
        }
        let r = grad_check(&p, 1e-3, |g, v| {
            let kd = g.kd_loss(v["l"], 2, &[1, 4, 0], &teacher, 1.0, 0.1)?;
            let lp = g.sequence_log_prob(v["l"], 3, &[2, 2])?;
            let lp = g.scale(lp, 0.3);
            g.add(kd, lp)
        })
        .unwrap();
        assert!(r.max() < 1e-5, "{r:?}");
    }
}
