//! Symmetric-normalized graph convolution, the working-memory baseline:
//! `D̂^{-1/2}·(A + I)·D̂^{-1/2}·H·W_g`.

use super::gat::neighbors;
use crate::error::Result;
use crate::tensor::{axpy, ParamStore, Scalar, Tensor2D};

pub fn gcn_param_shapes(prefix: &str, d: usize) -> Vec<(String, usize, usize)> {
    vec![(format!("{prefix}.w"), d, d)]
}

#[derive(Debug, Clone)]
pub struct GcnCache<T> {
    nbrs: Vec<Vec<usize>>,
    inv_sqrt_deg: Vec<T>,
    /// `Â_norm·H`
    agg: Tensor2D<T>,
}

/// `Â_norm·X` for the neighbour lists (self-loops included).
fn propagate<T: Scalar>(nbrs: &[Vec<usize>], inv_sqrt_deg: &[T], x: &Tensor2D<T>) -> Tensor2D<T> {
    let mut out = Tensor2D::zeros(x.rows(), x.cols());
    for (i, nb) in nbrs.iter().enumerate() {
        for &j in nb {
            let w = inv_sqrt_deg[i] * inv_sqrt_deg[j];
            axpy(out.row_mut(i), w, x.row(j));
        }
    }
    out
}

pub fn gcn_forward<T: Scalar>(
    p: &ParamStore<T>,
    prefix: &str,
    h: &Tensor2D<T>,
    edges: &[(usize, usize)],
) -> Result<(Tensor2D<T>, GcnCache<T>)> {
    let nbrs = neighbors(h.rows(), edges)?;
    let inv_sqrt_deg: Vec<T> = nbrs
        .iter()
        .map(|nb| T::one() / T::of(nb.len() as f64).sqrt())
        .collect();
    let agg = propagate(&nbrs, &inv_sqrt_deg, h);
    let out = agg.matmul(p.value(&format!("{prefix}.w")))?;
    Ok((
        out,
        GcnCache {
            nbrs,
            inv_sqrt_deg,
            agg,
        },
    ))
}

pub fn gcn_backward<T: Scalar>(
    p: &ParamStore<T>,
    g: &mut ParamStore<T>,
    prefix: &str,
    cache: &GcnCache<T>,
    dout: &Tensor2D<T>,
) -> Tensor2D<T> {
    let name = format!("{prefix}.w");
    g.grad_mut(&name).add_tmatmul(&cache.agg, dout);
    let dagg = dout.matmul_t(p.value(&name)).expect("n x d");
    // the normalized adjacency is symmetric
    propagate(&cache.nbrs, &cache.inv_sqrt_deg, &dagg)
}
