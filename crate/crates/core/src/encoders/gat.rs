//! GATv2 message passing over the working-memory graph.
//!
//! `e_ij = aᵀ·leaky_relu(W_l·h_i + W_r·h_j)`, normalized by a softmax over
//! the neighbours of `i` (self included), and `out_i = Σ_j α_ij·W_r·h_j`.
//! With several heads the head outputs are averaged.

use crate::error::{Error, Result};
use crate::tensor::ops::{leaky_relu_grad, leaky_relu_scalar, softmax, softmax_backward};
use crate::tensor::{axpy, dot, ParamStore, Scalar, Tensor2D};

pub const GAT_SLOPE: f64 = 0.2;

pub fn gat_param_shapes(prefix: &str, d: usize, heads: usize) -> Vec<(String, usize, usize)> {
    (0..heads)
        .flat_map(|k| {
            [
                (format!("{prefix}.h{k}.w_l"), d, d),
                (format!("{prefix}.h{k}.w_r"), d, d),
                (format!("{prefix}.h{k}.a"), d, 1),
            ]
        })
        .collect()
}

/// Sorted neighbour lists with self-loops from an undirected edge list.
pub fn neighbors(n: usize, edges: &[(usize, usize)]) -> Result<Vec<Vec<usize>>> {
    let mut nbrs: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(Error::Consistency(format!("edge ({a}, {b}) outside {n} rows")));
        }
        if a != b {
            nbrs[a].push(b);
            nbrs[b].push(a);
        }
    }
    for l in &mut nbrs {
        l.sort_unstable();
        l.dedup();
    }
    Ok(nbrs)
}

/// Working-memory adjacency: STM edges among the first `n_stm` rows, plus a
/// last row joined to every STM row, plus self-loops.
pub fn wm_neighbors(n_stm: usize, stm_edges: &[(usize, usize)]) -> Result<Vec<Vec<usize>>> {
    if let Some(&(a, b)) = stm_edges.iter().find(|&&(a, b)| a >= n_stm || b >= n_stm) {
        return Err(Error::Consistency(format!("STM edge ({a}, {b}) outside {n_stm} rows")));
    }
    let mut edges = stm_edges.to_vec();
    edges.extend((0..n_stm).map(|i| (i, n_stm)));
    neighbors(n_stm + 1, &edges)
}

#[derive(Debug, Clone)]
struct HeadCache<T> {
    l: Tensor2D<T>,
    r: Tensor2D<T>,
    /// `alpha[i][k]` weights neighbour `nbrs[i][k]`.
    alpha: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct GatCache<T> {
    h: Tensor2D<T>,
    nbrs: Vec<Vec<usize>>,
    heads: Vec<HeadCache<T>>,
}

impl<T> GatCache<T> {
    /// Attention weights of head `k` for target row `i`, aligned with its neighbour list.
    pub fn attention(&self, k: usize, i: usize) -> (&[usize], &[T]) {
        (&self.nbrs[i], &self.heads[k].alpha[i])
    }
}

pub fn gatv2_forward<T: Scalar>(
    p: &ParamStore<T>,
    prefix: &str,
    heads: usize,
    h: &Tensor2D<T>,
    nbrs: &[Vec<usize>],
) -> Result<(Tensor2D<T>, GatCache<T>)> {
    let n = h.rows();
    if nbrs.len() != n {
        return Err(Error::Consistency(format!("{} neighbour lists for {n} rows", nbrs.len())));
    }
    if let Some(j) = nbrs.iter().flatten().find(|&&j| j >= n) {
        return Err(Error::Consistency(format!("neighbour {j} outside {n} rows")));
    }
    let slope = T::of(GAT_SLOPE);
    let inv_heads = T::one() / T::of(heads as f64);
    let mut out = Tensor2D::zeros(n, h.cols());
    let mut caches = Vec::with_capacity(heads);
    let mut s = vec![T::zero(); h.cols()];
    for k in 0..heads {
        let w_l = p.value(&format!("{prefix}.h{k}.w_l"));
        let w_r = p.value(&format!("{prefix}.h{k}.w_r"));
        let a = p.value(&format!("{prefix}.h{k}.a")).data();
        let l = h.matmul_t(w_l)?;
        let r = h.matmul_t(w_r)?;
        let mut alpha = Vec::with_capacity(n);
        for (i, nb) in nbrs.iter().enumerate() {
            let li = l.row(i);
            let e: Vec<T> = nb
                .iter()
                .map(|&j| {
                    for ((sv, &x), &y) in s.iter_mut().zip(li).zip(r.row(j)) {
                        *sv = leaky_relu_scalar(x + y, slope);
                    }
                    dot(a, &s)
                })
                .collect();
            let al = softmax(&e)?;
            let oi = out.row_mut(i);
            for (&j, &w) in nb.iter().zip(&al) {
                axpy(oi, w * inv_heads, r.row(j));
            }
            alpha.push(al);
        }
        caches.push(HeadCache { l, r, alpha });
    }
    Ok((
        out,
        GatCache {
            h: h.clone(),
            nbrs: nbrs.to_vec(),
            heads: caches,
        },
    ))
}

/// Accumulates parameter gradients into `g` and returns the input gradient.
pub fn gatv2_backward<T: Scalar>(
    p: &ParamStore<T>,
    g: &mut ParamStore<T>,
    prefix: &str,
    cache: &GatCache<T>,
    dout: &Tensor2D<T>,
) -> Tensor2D<T> {
    let (n, d) = cache.h.shape();
    let slope = T::of(GAT_SLOPE);
    let inv_heads = T::one() / T::of(cache.heads.len() as f64);
    let mut dh = Tensor2D::zeros(n, d);
    for (k, hc) in cache.heads.iter().enumerate() {
        let wl_name = format!("{prefix}.h{k}.w_l");
        let wr_name = format!("{prefix}.h{k}.w_r");
        let a_name = format!("{prefix}.h{k}.a");
        let a = p.value(&a_name).data();
        let mut dl = Tensor2D::zeros(n, d);
        let mut dr = Tensor2D::zeros(n, d);
        let mut da = vec![T::zero(); d];
        let mut s = vec![T::zero(); d];
        for (i, nb) in cache.nbrs.iter().enumerate() {
            let doi: Vec<T> = dout.row(i).iter().map(|&v| v * inv_heads).collect();
            let al = &hc.alpha[i];
            let mut dalpha = Vec::with_capacity(nb.len());
            for (&j, &w) in nb.iter().zip(al) {
                axpy(dr.row_mut(j), w, &doi);
                dalpha.push(dot(&doi, hc.r.row(j)));
            }
            let de = softmax_backward(al, &dalpha);
            for (&j, &dej) in nb.iter().zip(&de) {
                for ((sv, &x), &y) in s.iter_mut().zip(hc.l.row(i)).zip(hc.r.row(j)) {
                    *sv = x + y;
                }
                for c in 0..d {
                    let z = leaky_relu_scalar(s[c], slope);
                    da[c] += dej * z;
                    let ds = dej * a[c] * leaky_relu_grad(s[c], slope);
                    dl.row_mut(i)[c] += ds;
                    dr.row_mut(j)[c] += ds;
                }
            }
        }
        g.grad_mut(&wl_name).add_tmatmul(&dl, &cache.h);
        g.grad_mut(&wr_name).add_tmatmul(&dr, &cache.h);
        axpy(g.grad_mut(&a_name).data_mut(), T::one(), &da);
        dh.add_assign(&dl.matmul(p.value(&wl_name)).expect("d x d")).expect("n x d");
        dh.add_assign(&dr.matmul(p.value(&wr_name)).expect("d x d")).expect("n x d");
    }
    dh
}

/// Dense reference for [`gatv2_forward`]: a full score matrix with −∞
/// outside the adjacency and a plain softmax per row.
pub fn gatv2_dense_reference(p: &ParamStore<f64>, prefix: &str, heads: usize, h: &Tensor2D<f64>, nbrs: &[Vec<usize>]) -> Tensor2D<f64> {
    let n = h.rows();
    let mut mask = vec![vec![false; n]; n];
    for (i, nb) in nbrs.iter().enumerate() {
        for &j in nb {
            mask[i][j] = true;
        }
    }
    let mut out = Tensor2D::zeros(n, h.cols());
    for k in 0..heads {
        let w_l = p.value(&format!("{prefix}.h{k}.w_l"));
        let w_r = p.value(&format!("{prefix}.h{k}.w_r"));
        let a = p.value(&format!("{prefix}.h{k}.a")).data();
        for i in 0..n {
            let li = w_l.matvec(h.row(i)).expect("square weights");
            let mut e = vec![f64::NEG_INFINITY; n];
            for j in (0..n).filter(|&j| mask[i][j]) {
                let rj = w_r.matvec(h.row(j)).expect("square weights");
                let z: Vec<f64> = li.iter().zip(&rj).map(|(x, y)| leaky_relu_scalar(x + y, GAT_SLOPE)).collect();
                e[j] = dot(a, &z);
            }
            let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = e.iter().map(|&x| (x - m).exp()).collect();
            let sum: f64 = ex.iter().sum();
            for j in 0..n {
                let rj = w_r.matvec(h.row(j)).expect("square weights");
                for c in 0..h.cols() {
                    out.row_mut(i)[c] += ex[j] / sum * rj[c] / heads as f64;
                }
            }
        }
    }
    out
}
