//! Cross-attention decoder over the working memory.
//!
//! Each block: `q = W_q·x`, keys `M·W_kᵀ`, values `M·W_vᵀ`, scaled dot-product
//! attention, `u = x + W_o·ctx`, then `y = u + W_2·leaky_relu(W_1·u + b_1) + b_2`.
//! Optional layer norms follow each residual. The last block's attention
//! weights are returned with the feature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{
    layer_norm, layer_norm_backward, leaky_relu, leaky_relu_backward, linear, linear_backward, softmax,
    softmax_backward, LayerNormCache,
};
use crate::tensor::{axpy, dot, ParamStore, Scalar, Tensor2D};

pub const FFN_SLOPE: f64 = 0.01;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub layer_norm: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            layer_norm: false,
        }
    }
}

pub fn decoder_param_shapes(prefix: &str, d: usize, cfg: &DecoderConfig) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    for l in 0..cfg.layers {
        let n = |s: &str| format!("{prefix}.l{l}.{s}");
        out.extend([
            (n("w_q"), d, d),
            (n("w_k"), d, d),
            (n("w_v"), d, d),
            (n("w_o"), d, d),
            (n("w1"), 2 * d, d),
            (n("b1"), 2 * d, 1),
            (n("w2"), d, 2 * d),
            (n("b2"), d, 1),
        ]);
        if cfg.layer_norm {
            out.extend([(n("ln1_g"), d, 1), (n("ln1_b"), d, 1), (n("ln2_g"), d, 1), (n("ln2_b"), d, 1)]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult<T> {
    pub feature: Vec<T>,
    /// Attention weights aligned with the memory rows.
    pub scores: Vec<T>,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    x: Vec<T>,
    q: Vec<T>,
    k: Tensor2D<T>,
    v: Tensor2D<T>,
    alpha: Vec<T>,
    ctx: Vec<T>,
    u: Vec<T>,
    ln1: Option<LayerNormCache<T>>,
    hid: Vec<T>,
    act: Vec<T>,
    ln2: Option<LayerNormCache<T>>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    memory: Tensor2D<T>,
    layers: Vec<LayerCache<T>>,
}

pub fn decode<T: Scalar>(
    p: &ParamStore<T>,
    prefix: &str,
    cfg: &DecoderConfig,
    query: &[T],
    memory: &Tensor2D<T>,
) -> Result<(DecodeResult<T>, DecoderCache<T>)> {
    if memory.rows() == 0 {
        return Err(Error::Domain("decode over an empty memory".into()));
    }
    if query.len() != memory.cols() {
        return Err(Error::dim("decode", format!("query {}", query.len()), format!("memory {memory}")));
    }
    let d = query.len();
    let inv_sqrt_d = T::one() / T::of(d as f64).sqrt();
    let zeros_d = vec![T::zero(); d];
    let mut x = query.to_vec();
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut scores = Vec::new();
    for l in 0..cfg.layers {
        let n = |s: &str| format!("{prefix}.l{l}.{s}");
        let q = p.value(&n("w_q")).matvec(&x)?;
        let k = memory.matmul_t(p.value(&n("w_k")))?;
        let v = memory.matmul_t(p.value(&n("w_v")))?;
        let logits: Vec<T> = (0..k.rows()).map(|r| dot(k.row(r), &q) * inv_sqrt_d).collect();
        let alpha = softmax(&logits)?;
        let mut ctx = vec![T::zero(); d];
        for (r, &a) in alpha.iter().enumerate() {
            axpy(&mut ctx, a, v.row(r));
        }
        let mut u = linear(p.value(&n("w_o")), &zeros_d, &ctx)?;
        axpy(&mut u, T::one(), &x);
        let ln1 = if cfg.layer_norm {
            let (y, c) = layer_norm(&u, p.value(&n("ln1_g")).data(), p.value(&n("ln1_b")).data(), T::of(LN_EPS));
            u = y;
            Some(c)
        } else {
            None
        };
        let hid = linear(p.value(&n("w1")), p.value(&n("b1")).data(), &u)?;
        let act = leaky_relu(&hid, T::of(FFN_SLOPE));
        let mut y = linear(p.value(&n("w2")), p.value(&n("b2")).data(), &act)?;
        axpy(&mut y, T::one(), &u);
        let ln2 = if cfg.layer_norm {
            let (o, c) = layer_norm(&y, p.value(&n("ln2_g")).data(), p.value(&n("ln2_b")).data(), T::of(LN_EPS));
            y = o;
            Some(c)
        } else {
            None
        };
        scores = alpha.clone();
        layers.push(LayerCache {
            x: std::mem::replace(&mut x, y),
            q,
            k,
            v,
            alpha,
            ctx,
            u,
            ln1,
            hid,
            act,
            ln2,
        });
    }
    Ok((
        DecodeResult { feature: x, scores },
        DecoderCache {
            memory: memory.clone(),
            layers,
        },
    ))
}

/// Returns `(d_query, d_memory)`. The attention weights handed to the
/// forgetting module carry no gradient.
pub fn decode_backward<T: Scalar>(
    p: &ParamStore<T>,
    g: &mut ParamStore<T>,
    prefix: &str,
    cache: &DecoderCache<T>,
    dfeature: &[T],
) -> (Vec<T>, Tensor2D<T>) {
    let mem = &cache.memory;
    let d = mem.cols();
    let inv_sqrt_d = T::one() / T::of(d as f64).sqrt();
    let mut dmem = Tensor2D::zeros(mem.rows(), d);
    let mut dy = dfeature.to_vec();
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let n = |s: &str| format!("{prefix}.l{l}.{s}");
        if let Some(c) = &lc.ln2 {
            let gain = p.value(&n("ln2_g")).data().to_vec();
            let mut gg = vec![T::zero(); d];
            let mut gb = vec![T::zero(); d];
            dy = layer_norm_backward(c, &gain, &dy, &mut gg, &mut gb);
            axpy(g.grad_mut(&n("ln2_g")).data_mut(), T::one(), &gg);
            axpy(g.grad_mut(&n("ln2_b")).data_mut(), T::one(), &gb);
        }
        // y = u + W2·act + b2
        let mut du = dy.clone();
        let dact = ffn_backward(p, g, &n("w2"), &n("b2"), &lc.act, &dy);
        let dhid = leaky_relu_backward(&lc.hid, &dact, T::of(FFN_SLOPE));
        let du_ffn = ffn_backward(p, g, &n("w1"), &n("b1"), &lc.u, &dhid);
        axpy(&mut du, T::one(), &du_ffn);
        if let Some(c) = &lc.ln1 {
            let gain = p.value(&n("ln1_g")).data().to_vec();
            let mut gg = vec![T::zero(); d];
            let mut gb = vec![T::zero(); d];
            du = layer_norm_backward(c, &gain, &du, &mut gg, &mut gb);
            axpy(g.grad_mut(&n("ln1_g")).data_mut(), T::one(), &gg);
            axpy(g.grad_mut(&n("ln1_b")).data_mut(), T::one(), &gb);
        }
        // u = x + W_o·ctx
        let mut dx = du.clone();
        g.grad_mut(&n("w_o")).add_outer(&du, &lc.ctx, T::one());
        let dctx = p.value(&n("w_o")).matvec_t(&du).expect("d");
        let rows = lc.alpha.len();
        let mut dv = Tensor2D::zeros(rows, d);
        let mut dalpha = Vec::with_capacity(rows);
        for r in 0..rows {
            axpy(dv.row_mut(r), lc.alpha[r], &dctx);
            dalpha.push(dot(&dctx, lc.v.row(r)));
        }
        let dlogits = softmax_backward(&lc.alpha, &dalpha);
        let mut dk = Tensor2D::zeros(rows, d);
        let mut dq = vec![T::zero(); d];
        for r in 0..rows {
            let s = dlogits[r] * inv_sqrt_d;
            axpy(dk.row_mut(r), s, &lc.q);
            axpy(&mut dq, s, lc.k.row(r));
        }
        g.grad_mut(&n("w_q")).add_outer(&dq, &lc.x, T::one());
        axpy(&mut dx, T::one(), &p.value(&n("w_q")).matvec_t(&dq).expect("d"));
        g.grad_mut(&n("w_k")).add_tmatmul(&dk, mem);
        g.grad_mut(&n("w_v")).add_tmatmul(&dv, mem);
        dmem.add_assign(&dk.matmul(p.value(&n("w_k"))).expect("rows x d")).expect("rows x d");
        dmem.add_assign(&dv.matmul(p.value(&n("w_v"))).expect("rows x d")).expect("rows x d");
        dy = dx;
    }
    (dy, dmem)
}

fn ffn_backward<T: Scalar>(p: &ParamStore<T>, g: &mut ParamStore<T>, w: &str, b: &str, x: &[T], dy: &[T]) -> Vec<T> {
    let mut gb = vec![T::zero(); dy.len()];
    let dx = linear_backward(p.value(w), x, dy, g.grad_mut(w), &mut gb);
    axpy(g.grad_mut(b).data_mut(), T::one(), &gb);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use crate::tensor::grad_check;
    use crate::testutil::*;

    fn params(seed: u64, d: usize, cfg: &DecoderConfig) -> ParamStore<f64> {
        let mut rng = stream(seed, Stream::Init, 0);
        rand_params(&mut rng, &decoder_param_shapes("dec", d, cfg), 0.4)
    }

    #[test]
    fn single_row_memory_scores_one() {
        let cfg = DecoderConfig::default();
        let p = params(1, 4, &cfg);
        let m = Tensor2D::from_vec(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (r, _) = decode(&p, "dec", &cfg, &[1.0, 0.0, 0.0, 0.0], &m).unwrap();
        assert_eq!(r.scores, vec![1.0]);
    }

    #[test]
    fn identical_keys_give_uniform_scores() {
        let cfg = DecoderConfig::default();
        let p = params(2, 3, &cfg);
        let m = Tensor2D::from_rows(&vec![vec![0.5, -0.1, 0.2]; 5], 3).unwrap();
        let (r, _) = decode(&p, "dec", &cfg, &[0.3, 0.3, 0.9], &m).unwrap();
        for s in r.scores {
            assert!((s - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_memory_is_domain_error() {
        let cfg = DecoderConfig::default();
        let p = params(3, 3, &cfg);
        let m = Tensor2D::zeros(0, 3);
        assert!(matches!(decode(&p, "dec", &cfg, &[0.0; 3], &m), Err(Error::Domain(_))));
    }

    #[test]
    fn scores_match_scaled_dot_product() {
        let cfg = DecoderConfig::default();
        let mut rng = stream(4, Stream::Sampling, 0);
        let d = 6;
        let p = params(4, d, &cfg);
        let m = rand_tensor(&mut rng, 5, d, 1.0);
        let x = rand_vec(&mut rng, d);
        let (r, _) = decode(&p, "dec", &cfg, &x, &m).unwrap();
        let q = p.value("dec.l0.w_q").matvec(&x).unwrap();
        let logits: Vec<f64> = (0..5)
            .map(|i| dot(&p.value("dec.l0.w_k").matvec(m.row(i)).unwrap(), &q) / (d as f64).sqrt())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for i in 0..5 {
            assert!((r.scores[i] - logits[i].exp() / z).abs() < 1e-12);
        }
        assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream(5, Stream::Sampling, 0);
        for cfg in [
            DecoderConfig::default(),
            DecoderConfig { layers: 2, layer_norm: true },
        ] {
            let d = 4;
            let mut p = params(5, d, &cfg);
            if cfg.layer_norm {
                // keep gains away from zero so the check is well conditioned
                for (name, prm) in p.iter_mut() {
                    if name.ends_with("_g") {
                        prm.value.data_mut().iter_mut().for_each(|v| *v += 1.0);
                    }
                }
            }
            let m = rand_tensor(&mut rng, 4, d, 1.0);
            let x = rand_vec(&mut rng, d);
            let w = rand_vec(&mut rng, d);
            let (_, cache) = decode(&p, "dec", &cfg, &x, &m).unwrap();
            let mut g = p.clone();
            let (dx, dm) = decode_backward(&p, &mut g, "dec", &cache, &w);
            let loss = |q: &ParamStore<f64>, x: &[f64], m: &Tensor2D<f64>| dot(&decode(q, "dec", &cfg, x, m).unwrap().0.feature, &w);
            let report = grad_check(|q| Ok(loss(q, &x, &m)), &with_grads(&p, &g), 1e-6).unwrap();
            assert!(report.max_relative_error < 1e-5, "{cfg:?} {report:?}");
            for i in 0..d {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += 1e-6;
                xm[i] -= 1e-6;
                let num = (loss(&p, &xp, &m) - loss(&p, &xm, &m)) / 2e-6;
                assert!((num - dx[i]).abs() < 1e-7);
            }
            for i in 0..m.len() {
                let (mut mp, mut mm) = (m.clone(), m.clone());
                mp.data_mut()[i] += 1e-6;
                mm.data_mut()[i] -= 1e-6;
                let num = (loss(&p, &x, &mp) - loss(&p, &x, &mm)) / 2e-6;
                assert!((num - dm.data()[i]).abs() < 1e-7);
            }
        }
    }
}
