//! LSTM policy head: `[f_cur; f_goal; e_cur]` → projection → LSTM cell → action logits.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::sim::Action;
use crate::tensor::ops::{linear, linear_backward, sigmoid, softmax};
use crate::tensor::{axpy, ParamStore, Scalar};

pub fn policy_param_shapes(d: usize, d_h: usize) -> Vec<(String, usize, usize)> {
    vec![
        ("pol.w_in".into(), d_h, 3 * d),
        ("pol.b_in".into(), d_h, 1),
        ("pol.lstm.w_x".into(), 4 * d_h, d_h),
        ("pol.lstm.w_h".into(), 4 * d_h, d_h),
        ("pol.lstm.b".into(), 4 * d_h, 1),
        ("pol.w_out".into(), Action::COUNT, d_h),
        ("pol.b_out".into(), Action::COUNT, 1),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Scalar> PolicyState<T> {
    pub fn zeros(d_h: usize) -> Self {
        Self {
            h: vec![T::zero(); d_h],
            c: vec![T::zero(); d_h],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(&self.c).all(|v| v.is_finite())
    }
}

/// Probabilities in [`Action`] index order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionDist<T> {
    pub probs: [T; Action::COUNT],
}

impl<T: Scalar> ActionDist<T> {
    pub fn from_logits(logits: &[T]) -> Result<Self> {
        if logits.len() != Action::COUNT {
            return Err(Error::dim("action logits", logits.len(), Action::COUNT));
        }
        let p = softmax(logits)?;
        Ok(Self {
            probs: [p[0], p[1], p[2], p[3]],
        })
    }

    pub fn uniform() -> Self {
        Self {
            probs: [T::of(0.25); Action::COUNT],
        }
    }

    pub fn prob(&self, a: Action) -> T {
        self.probs[a.index()]
    }

    /// Argmax with ties going to the lowest action index.
    pub fn greedy(&self) -> Action {
        let mut best = 0;
        for i in 1..Action::COUNT {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        Action::ALL[best]
    }

    /// Inverse-CDF sampling.
    pub fn sample(&self, rng: &mut crate::rng::Rng) -> Action {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p.as_f64();
            if u < acc {
                return Action::ALL[i];
            }
        }
        // rounding left the cumulative sum just under one
        let last = (0..Action::COUNT).rev().find(|&i| self.probs[i] > T::zero()).unwrap_or(0);
        Action::ALL[last]
    }
}

#[derive(Debug, Clone)]
pub struct PolicyCache<T> {
    input: Vec<T>,
    x: Vec<T>,
    h_prev: Vec<T>,
    c_prev: Vec<T>,
    i: Vec<T>,
    f: Vec<T>,
    g: Vec<T>,
    o: Vec<T>,
    tanh_c: Vec<T>,
    h: Vec<T>,
    pub dist: ActionDist<T>,
}

pub fn policy_step<T: Scalar>(
    p: &ParamStore<T>,
    state: &PolicyState<T>,
    f_cur: &[T],
    f_goal: &[T],
    e_cur: &[T],
) -> Result<(ActionDist<T>, PolicyState<T>, PolicyCache<T>)> {
    let d = f_cur.len();
    if f_goal.len() != d || e_cur.len() != d {
        return Err(Error::dim(
            "policy_step",
            format!("f_cur {d}"),
            format!("f_goal {}, e_cur {}", f_goal.len(), e_cur.len()),
        ));
    }
    let input = [f_cur, f_goal, e_cur].concat();
    let x = linear(p.value("pol.w_in"), p.value("pol.b_in").data(), &input)?;
    let d_h = x.len();
    if state.h.len() != d_h || state.c.len() != d_h {
        return Err(Error::dim("policy_step", format!("state {}", state.h.len()), format!("d_h {d_h}")));
    }
    let mut z = linear(p.value("pol.lstm.w_x"), p.value("pol.lstm.b").data(), &x)?;
    axpy(&mut z, T::one(), &p.value("pol.lstm.w_h").matvec(&state.h)?);
    let i: Vec<T> = z[..d_h].iter().map(|&v| sigmoid(v)).collect();
    let f: Vec<T> = z[d_h..2 * d_h].iter().map(|&v| sigmoid(v)).collect();
    let g: Vec<T> = z[2 * d_h..3 * d_h].iter().map(|&v| v.tanh()).collect();
    let o: Vec<T> = z[3 * d_h..].iter().map(|&v| sigmoid(v)).collect();
    let c: Vec<T> = (0..d_h).map(|k| f[k] * state.c[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<T> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<T> = (0..d_h).map(|k| o[k] * tanh_c[k]).collect();
    let logits = linear(p.value("pol.w_out"), p.value("pol.b_out").data(), &h)?;
    let dist = ActionDist::from_logits(&logits)?;
    let next = PolicyState { h: h.clone(), c };
    Ok((
        dist,
        next,
        PolicyCache {
            input,
            x,
            h_prev: state.h.clone(),
            c_prev: state.c.clone(),
            i,
            f,
            g,
            o,
            tanh_c,
            h,
            dist,
        },
    ))
}

/// Gradients flowing out of one policy step.
#[derive(Debug, Clone)]
pub struct PolicyGrads<T> {
    pub f_cur: Vec<T>,
    pub f_goal: Vec<T>,
    pub h_prev: Vec<T>,
    pub c_prev: Vec<T>,
}

/// `dh_next`/`dc_next` are the gradients arriving from the following step.
pub fn policy_backward<T: Scalar>(
    p: &ParamStore<T>,
    g: &mut ParamStore<T>,
    cache: &PolicyCache<T>,
    dlogits: &[T],
    dh_next: &[T],
    dc_next: &[T],
) -> PolicyGrads<T> {
    let d_h = cache.h.len();
    let mut gb = vec![T::zero(); Action::COUNT];
    let mut dh = linear_backward(p.value("pol.w_out"), &cache.h, dlogits, g.grad_mut("pol.w_out"), &mut gb);
    axpy(g.grad_mut("pol.b_out").data_mut(), T::one(), &gb);
    axpy(&mut dh, T::one(), dh_next);
    let one = T::one();
    let mut dz = vec![T::zero(); 4 * d_h];
    let mut dc_prev = vec![T::zero(); d_h];
    for k in 0..d_h {
        let do_ = dh[k] * cache.tanh_c[k];
        let dc = dh[k] * cache.o[k] * (one - cache.tanh_c[k] * cache.tanh_c[k]) + dc_next[k];
        let di = dc * cache.g[k];
        let df = dc * cache.c_prev[k];
        let dg = dc * cache.i[k];
        dc_prev[k] = dc * cache.f[k];
        dz[k] = di * cache.i[k] * (one - cache.i[k]);
        dz[d_h + k] = df * cache.f[k] * (one - cache.f[k]);
        dz[2 * d_h + k] = dg * (one - cache.g[k] * cache.g[k]);
        dz[3 * d_h + k] = do_ * cache.o[k] * (one - cache.o[k]);
    }
    let mut gb = vec![T::zero(); 4 * d_h];
    let dx = linear_backward(p.value("pol.lstm.w_x"), &cache.x, &dz, g.grad_mut("pol.lstm.w_x"), &mut gb);
    axpy(g.grad_mut("pol.lstm.b").data_mut(), T::one(), &gb);
    g.grad_mut("pol.lstm.w_h").add_outer(&dz, &cache.h_prev, T::one());
    let h_prev = p.value("pol.lstm.w_h").matvec_t(&dz).expect("4 d_h");
    let mut gb = vec![T::zero(); d_h];
    let dinput = linear_backward(p.value("pol.w_in"), &cache.input, &dx, g.grad_mut("pol.w_in"), &mut gb);
    axpy(g.grad_mut("pol.b_in").data_mut(), T::one(), &gb);
    let d = dinput.len() / 3;
    PolicyGrads {
        f_cur: dinput[..d].to_vec(),
        f_goal: dinput[d..2 * d].to_vec(),
        h_prev,
        c_prev: dc_prev,
    }
}
