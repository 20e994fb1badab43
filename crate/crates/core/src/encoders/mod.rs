//! Observation embedding, goal fusion, working-memory generation and the
//! attention decoders.

mod decoder;
mod gat;
mod gcn;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use decoder::{decode, decode_backward, decoder_param_shapes, DecodeResult, DecoderCache, DecoderConfig, FFN_SLOPE};
pub use gat::{gat_param_shapes, gatv2_backward, gatv2_dense_reference, gatv2_forward, neighbors, wm_neighbors, GatCache, GAT_SLOPE};
pub use gcn::{gcn_backward, gcn_forward, gcn_param_shapes, GcnCache};

use crate::error::{Error, Result};
use crate::memory::{ActiveSubgraph, TopoMap};
use crate::rng::{stream, Stream};
use crate::sim::{ObserveConfig, Panorama};
use crate::tensor::ops::linear;
use crate::tensor::{axpy, normalize, ParamStore, Scalar, Tensor2D};

pub const DEFAULT_PROJECTION_SEED: u64 = 7;

/// Frozen random projection of panoramic observations to unit d-vectors.
///
/// The input is `[patch | position bands | heading one-hot]`. Place
/// embeddings use the compass-ordered patch and a zero heading block, so they
/// depend only on the cell; view embeddings use the heading-relative patch
/// and the heading.
#[derive(Debug, Clone)]
pub struct ObservationEncoder {
    obs: ObserveConfig,
    seed: u64,
    position_weight: f64,
    heading_weight: f64,
    projection: Tensor2D<f64>,
}

impl ObservationEncoder {
    pub fn new(d: usize, obs: ObserveConfig, seed: u64) -> Self {
        let cols = obs.patch_len() + obs.position_len() + 4;
        let mut rng = stream(seed, Stream::Projection, 0);
        let scale = 1.0 / (d as f64).sqrt();
        let projection = Tensor2D::from_fn(d, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self {
            obs,
            seed,
            position_weight: 3.0,
            heading_weight: 3.0,
            projection,
        }
    }

    pub fn d(&self) -> usize {
        self.projection.rows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn observe_config(&self) -> &ObserveConfig {
        &self.obs
    }

    fn embed<T: Scalar>(&self, patch: Vec<f64>, pano: &Panorama, heading: Option<usize>) -> Vec<T> {
        let mut x = patch;
        x.extend(pano.position.iter().map(|v| v * self.position_weight));
        let mut h = [0.0; 4];
        if let Some(k) = heading {
            h[k] = self.heading_weight;
        }
        x.extend(h);
        let mut y = self.projection.matvec(&x).expect("input length fixed by the observe config");
        normalize(&mut y);
        y.into_iter().map(T::of).collect()
    }

    /// Heading-invariant embedding of the cell; node features and goal embeddings.
    pub fn encode_place<T: Scalar>(&self, pano: &Panorama) -> Vec<T> {
        self.embed(pano.canonical_patch(), pano, None)
    }

    /// Heading-aware embedding of the current view.
    pub fn encode_view<T: Scalar>(&self, pano: &Panorama) -> Vec<T> {
        self.embed(pano.egocentric_patch(), pano, Some(pano.heading.index()))
    }
}

pub fn fuse_param_shapes(prefix: &str, d: usize) -> Vec<(String, usize, usize)> {
    vec![(format!("{prefix}.w"), d, 2 * d), (format!("{prefix}.b"), d, 1)]
}

/// Row `i` becomes `W·[V_i; e_goal] + b`.
pub fn fuse_goal<T: Scalar>(p: &ParamStore<T>, prefix: &str, v: &Tensor2D<T>, e_goal: &[T]) -> Result<Tensor2D<T>> {
    if e_goal.len() != v.cols() {
        return Err(Error::dim("fuse_goal", format!("V {v}"), format!("e_goal {}", e_goal.len())));
    }
    let w = p.value(&format!("{prefix}.w"));
    let b = p.value(&format!("{prefix}.b")).data();
    let mut out = Tensor2D::zeros(v.rows(), w.rows());
    let mut x = Vec::with_capacity(2 * v.cols());
    for i in 0..v.rows() {
        x.clear();
        x.extend_from_slice(v.row(i));
        x.extend_from_slice(e_goal);
        out.row_mut(i).copy_from_slice(&linear(w, b, &x)?);
    }
    Ok(out)
}

/// Parameter gradients only: node features and goal embeddings are frozen inputs.
pub fn fuse_goal_backward<T: Scalar>(
    p: &ParamStore<T>,
    g: &mut ParamStore<T>,
    prefix: &str,
    v: &Tensor2D<T>,
    e_goal: &[T],
    dout: &Tensor2D<T>,
) {
    let wn = format!("{prefix}.w");
    let bn = format!("{prefix}.b");
    let w = p.value(&wn);
    let mut gb = vec![T::zero(); w.rows()];
    let mut x = Vec::with_capacity(2 * v.cols());
    for i in 0..v.rows() {
        x.clear();
        x.extend_from_slice(v.row(i));
        x.extend_from_slice(e_goal);
        g.grad_mut(&wn).add_outer(dout.row(i), &x, T::one());
        axpy(&mut gb, T::one(), dout.row(i));
    }
    axpy(g.grad_mut(&bn).data_mut(), T::one(), &gb);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WmKind {
    Gatv2,
    Gcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WmConfig {
    pub kind: WmKind,
    pub heads: usize,
}

impl Default for WmConfig {
    fn default() -> Self {
        Self {
            kind: WmKind::Gatv2,
            heads: 1,
        }
    }
}

pub fn wm_param_shapes(d: usize, cfg: &WmConfig) -> Vec<(String, usize, usize)> {
    let mut out = fuse_param_shapes("enc.fuse", d);
    match cfg.kind {
        WmKind::Gatv2 => out.extend(gat_param_shapes("enc.gat", d, cfg.heads)),
        WmKind::Gcn => out.extend(gcn_param_shapes("enc.gcn", d)),
    }
    out
}

/// Encoded retained STM rows followed by the long-term row.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingMemory<T> {
    pub rows: Tensor2D<T>,
    /// Node ids of the STM rows, in row order.
    pub ids: Vec<usize>,
}

#[derive(Debug, Clone)]
enum GraphCache<T> {
    Gat(GatCache<T>),
    Gcn(GcnCache<T>),
}

#[derive(Debug, Clone)]
pub struct WmCache<T> {
    features: Tensor2D<T>,
    e_goal: Vec<T>,
    ltm_enabled: bool,
    graph: GraphCache<T>,
}

#[derive(Debug, Clone)]
pub struct WmOutput<T> {
    pub wm: WorkingMemory<T>,
    /// The next long-term state; `None` when the long-term toggle is off.
    pub ltm_next: Option<Vec<T>>,
}

/// Builds the working memory from the retained STM, the goal embedding and the previous long-term state.
///
/// With `ltm_enabled == false` the long-term input row is zero and no next state is produced.
pub fn wm_forward<T: Scalar>(
    p: &ParamStore<T>,
    cfg: &WmConfig,
    sub: &ActiveSubgraph<T>,
    e_goal: &[T],
    ltm_prev: &[T],
    ltm_enabled: bool,
) -> Result<(WmOutput<T>, WmCache<T>)> {
    let n = sub.len();
    if n == 0 {
        return Err(Error::Domain("working memory needs at least one active node".into()));
    }
    let d = sub.features.cols();
    if ltm_prev.len() != d {
        return Err(Error::dim("wm_forward", format!("ltm {}", ltm_prev.len()), format!("d {d}")));
    }
    let fused = fuse_goal(p, "enc.fuse", &sub.features, e_goal)?;
    let ltm_row: Vec<T> = if ltm_enabled { ltm_prev.to_vec() } else { vec![T::zero(); d] };
    let (rows, ltm_next, graph) = match cfg.kind {
        WmKind::Gatv2 => {
            let mut h = Tensor2D::zeros(n + 1, d);
            h.data_mut()[..n * d].copy_from_slice(fused.data());
            h.row_mut(n).copy_from_slice(&ltm_row);
            let nbrs = wm_neighbors(n, &sub.edges)?;
            let (out, c) = gatv2_forward(p, "enc.gat", cfg.heads, &h, &nbrs)?;
            let next = ltm_enabled.then(|| out.row(n).to_vec());
            (out, next, GraphCache::Gat(c))
        }
        WmKind::Gcn => {
            let (enc, c) = gcn_forward(p, "enc.gcn", &fused, &sub.edges)?;
            let mut rows = Tensor2D::zeros(n + 1, d);
            rows.data_mut()[..n * d].copy_from_slice(enc.data());
            rows.row_mut(n).copy_from_slice(&ltm_row);
            let next = ltm_enabled.then(|| {
                let mut m = vec![T::zero(); d];
                let inv = T::one() / T::of(n as f64);
                for i in 0..n {
                    axpy(&mut m, inv, enc.row(i));
                }
                m
            });
            (rows, next, GraphCache::Gcn(c))
        }
    };
    Ok((
        WmOutput {
            wm: WorkingMemory { rows, ids: sub.ids.clone() },
            ltm_next,
        },
        WmCache {
            features: sub.features.clone(),
            e_goal: e_goal.to_vec(),
            ltm_enabled,
            graph,
        },
    ))
}

/// Backward through [`wm_forward`]; returns the gradient for the previous long-term state
/// (zero when the toggle is off).
pub fn wm_backward<T: Scalar>(
    p: &ParamStore<T>,
    g: &mut ParamStore<T>,
    cache: &WmCache<T>,
    dwm: &Tensor2D<T>,
    dltm_next: Option<&[T]>,
) -> Vec<T> {
    let (n1, d) = dwm.shape();
    let n = n1 - 1;
    let mut dltm_prev = vec![T::zero(); d];
    let dfused = match &cache.graph {
        GraphCache::Gat(c) => {
            let mut dout = dwm.clone();
            if let (true, Some(dl)) = (cache.ltm_enabled, dltm_next) {
                axpy(dout.row_mut(n), T::one(), dl);
            }
            let dh = gatv2_backward(p, g, "enc.gat", c, &dout);
            if cache.ltm_enabled {
                dltm_prev.copy_from_slice(dh.row(n));
            }
            Tensor2D::from_vec(n, d, dh.data()[..n * d].to_vec()).expect("n x d")
        }
        GraphCache::Gcn(c) => {
            let mut denc = Tensor2D::from_vec(n, d, dwm.data()[..n * d].to_vec()).expect("n x d");
            if cache.ltm_enabled {
                if let Some(dl) = dltm_next {
                    let inv = T::one() / T::of(n as f64);
                    for i in 0..n {
                        axpy(denc.row_mut(i), inv, dl);
                    }
                }
                dltm_prev.copy_from_slice(dwm.row(n));
            }
            gcn_backward(p, g, "enc.gcn", c, &denc)
        }
    };
    fuse_goal_backward(p, g, "enc.fuse", &cache.features, &cache.e_goal, &dfused);
    dltm_prev
}

/// One working-memory step on a map: encodes the retained STM with the
/// stored long-term state and writes the next state back.
pub fn generate_wm<T: Scalar>(
    p: &ParamStore<T>,
    cfg: &WmConfig,
    map: &mut TopoMap<T>,
    e_goal: &[T],
) -> Result<WorkingMemory<T>> {
    let sub = map.active_subgraph();
    let (out, _) = wm_forward(p, cfg, &sub, e_goal, map.ltm_read(), true)?;
    if let Some(next) = &out.ltm_next {
        map.ltm_write(next)?;
    }
    Ok(out.wm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{AttentionScores, MapConfig};
    use crate::rng::Rng;
    use crate::sim::{generate_world, observe, AgentPose, Cell, GridWorld, Heading};
    use crate::tensor::{cosine, dot, grad_check};
    use crate::testutil::*;
    use rand::Rng as _;

    fn params(seed: u64, d: usize, cfg: &WmConfig) -> ParamStore<f64> {
        let mut rng = stream(seed, Stream::Init, 0);
        rand_params(&mut rng, &wm_param_shapes(d, cfg), 0.4)
    }

    #[test]
    fn same_pose_same_embedding_and_unit_norm() {
        let w = generate_world(3, 15, 15, 0.2).unwrap();
        let enc = ObservationEncoder::new(32, ObserveConfig::default(), 7);
        let c = w.free_cells()[10];
        let o = observe(&w, AgentPose::new(c, Heading::E), enc.observe_config());
        let a: Vec<f64> = enc.encode_place(&o);
        let b: Vec<f64> = enc.encode_place(&o);
        assert_eq!(a, b);
        assert!((dot(&a, &a) - 1.0).abs() < 1e-9);
        let v: Vec<f64> = enc.encode_view(&o);
        assert!((dot(&v, &v) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn open_origin_embedding_is_stable_across_runs() {
        let w = GridWorld::open(15, 15);
        let pano = observe(&w, AgentPose::new(Cell::new(1, 1), Heading::N), &ObserveConfig::default());
        let a: Vec<f64> = ObservationEncoder::new(32, ObserveConfig::default(), 7).encode_place(&pano);
        let b: Vec<f64> = ObservationEncoder::new(32, ObserveConfig::default(), 7).encode_place(&pano);
        assert_eq!(a, b);
        let c: Vec<f64> = ObservationEncoder::new(32, ObserveConfig::default(), 8).encode_place(&pano);
        assert_ne!(a, c);
    }

    #[test]
    fn disjoint_patches_are_dissimilar() {
        let enc = ObservationEncoder::new(32, ObserveConfig::default(), 7);
        let mut rng = stream(0, Stream::Sampling, 0);
        let mut checked = 0;
        let mut below = 0;
        for seed in 0..20 {
            let w = generate_world(seed, 15, 15, 0.2).unwrap();
            let free = w.free_cells();
            while checked < (seed as usize + 1) * 50 {
                let a = free[rng.random_range(0..free.len())];
                let b = free[rng.random_range(0..free.len())];
                // neighbourhoods of radius 4 do not overlap
                if a.x.abs_diff(b.x) <= 8 && a.y.abs_diff(b.y) <= 8 {
                    continue;
                }
                let cfg = enc.observe_config();
                let ea: Vec<f64> = enc.encode_place(&observe(&w, AgentPose::new(a, Heading::N), cfg));
                let eb: Vec<f64> = enc.encode_place(&observe(&w, AgentPose::new(b, Heading::N), cfg));
                checked += 1;
                if cosine(&ea, &eb) < 0.9 {
                    below += 1;
                }
            }
        }
        assert_eq!(checked, 1000);
        assert!(below >= 995, "{below} of 1000");
    }

    #[test]
    fn view_embedding_depends_on_heading() {
        let w = GridWorld::open(15, 15);
        let enc = ObservationEncoder::new(32, ObserveConfig::default(), 7);
        let n: Vec<f64> = enc.encode_view(&observe(&w, AgentPose::new(Cell::new(7, 7), Heading::N), enc.observe_config()));
        let e: Vec<f64> = enc.encode_view(&observe(&w, AgentPose::new(Cell::new(7, 7), Heading::E), enc.observe_config()));
        assert!(cosine(&n, &e) < 0.99);
    }

    fn fuse_with(w: Tensor2D<f64>, d: usize) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("f.w", w);
        p.insert("f.b", Tensor2D::zeros(d, 1));
        p
    }

    #[test]
    fn fuse_selects_node_or_goal_part() {
        let d = 3;
        let mut rng = stream(1, Stream::Sampling, 0);
        let v = rand_tensor(&mut rng, 4, d, 1.0);
        let goal = rand_vec(&mut rng, d);
        let node_part = fuse_with(Tensor2D::from_fn(d, 2 * d, |r, c| if r == c { 1.0 } else { 0.0 }), d);
        assert_eq!(fuse_goal(&node_part, "f", &v, &goal).unwrap(), v);
        let goal_part = fuse_with(Tensor2D::from_fn(d, 2 * d, |r, c| if r + d == c { 1.0 } else { 0.0 }), d);
        let out = fuse_goal(&goal_part, "f", &v, &goal).unwrap();
        for i in 0..4 {
            assert_eq!(out.row(i), &goal[..]);
        }
        assert!(matches!(fuse_goal(&goal_part, "f", &v, &[0.0; 2]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn fuse_matches_per_row_multiply() {
        let mut rng = stream(2, Stream::Sampling, 0);
        let v = rand_tensor(&mut rng, 3, 8, 1.0);
        let goal = rand_vec(&mut rng, 8);
        let p = rand_params(&mut rng, &fuse_param_shapes("f", 8), 1.0);
        let out = fuse_goal(&p, "f", &v, &goal).unwrap();
        for i in 0..3 {
            for r in 0..8 {
                let mut acc = p.value("f.b").get(r, 0);
                for c in 0..8 {
                    acc += p.value("f.w").get(r, c) * v.get(i, c) + p.value("f.w").get(r, 8 + c) * goal[c];
                }
                assert!((out.get(i, r) - acc).abs() < 1e-14);
            }
        }
    }

    fn map_with(rng: &mut Rng, n: usize, d: usize) -> TopoMap<f64> {
        let mut m = TopoMap::new(MapConfig::new(d));
        let pose = AgentPose::new(Cell::new(1, 1), Heading::N);
        for t in 0..n {
            // random unit vectors in d ≥ 8 are far below the 0.9 similarity threshold
            m.localize_and_update(&unit_vec(rng, d), pose, t).unwrap();
        }
        m
    }

    #[test]
    fn first_step_has_two_rows_and_nonzero_ltm() {
        let cfg = WmConfig::default();
        let p = params(3, 8, &cfg);
        let mut rng = stream(3, Stream::Sampling, 0);
        let mut m = map_with(&mut rng, 1, 8);
        let goal = unit_vec(&mut rng, 8);
        let wm = generate_wm(&p, &cfg, &mut m, &goal).unwrap();
        assert_eq!(wm.rows.rows(), 2);
        assert!(m.ltm_read().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn forgetting_two_of_ten_leaves_nine_rows() {
        let cfg = WmConfig::default();
        let p = params(4, 8, &cfg);
        let mut rng = stream(4, Stream::Sampling, 0);
        let mut m = map_with(&mut rng, 10, 8);
        let ids = m.active_ids();
        let w: Vec<f64> = (1..=10).map(|k| k as f64 / 55.0).collect();
        m.forget(&AttentionScores::from_rows(&ids, &w, 0.0, 0), 0.2).unwrap();
        let wm = generate_wm(&p, &cfg, &mut m, &unit_vec(&mut rng, 8)).unwrap();
        assert_eq!(wm.rows.rows(), 9);
        assert_eq!(wm.ids.len(), 8);
    }

    #[test]
    fn relabelling_nodes_permutes_rows() {
        let cfg = WmConfig::default();
        let d = 8;
        let p = params(5, d, &cfg);
        let mut rng = stream(5, Stream::Sampling, 0);
        let feats: Vec<Vec<f64>> = (0..6).map(|_| unit_vec(&mut rng, d)).collect();
        let goal = unit_vec(&mut rng, d);
        let ltm = rand_vec(&mut rng, d);
        let edges = vec![(0, 1), (1, 2), (2, 3), (1, 4), (4, 5)];
        let perm = [2, 5, 0, 4, 1, 3];
        let sub = ActiveSubgraph {
            ids: (0..6).collect(),
            features: Tensor2D::from_rows(&feats, d).unwrap(),
            edges: edges.clone(),
        };
        let mut pf = vec![vec![]; 6];
        for i in 0..6 {
            pf[perm[i]] = feats[i].clone();
        }
        let psub = ActiveSubgraph {
            ids: (0..6).collect(),
            features: Tensor2D::from_rows(&pf, d).unwrap(),
            edges: edges.iter().map(|&(a, b)| (perm[a].min(perm[b]), perm[a].max(perm[b]))).collect(),
        };
        let (a, _) = wm_forward(&p, &cfg, &sub, &goal, &ltm, true).unwrap();
        let (b, _) = wm_forward(&p, &cfg, &psub, &goal, &ltm, true).unwrap();
        for i in 0..6 {
            for c in 0..d {
                assert!((a.wm.rows.get(i, c) - b.wm.rows.get(perm[i], c)).abs() < 1e-9);
            }
        }
        let la = a.ltm_next.unwrap();
        let lb = b.ltm_next.unwrap();
        for c in 0..d {
            assert!((la[c] - lb[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn wm_backward_matches_finite_differences() {
        let mut rng = stream(6, Stream::Sampling, 0);
        let d = 5;
        for kind in [WmKind::Gatv2, WmKind::Gcn] {
            for ltm_on in [true, false] {
                let cfg = WmConfig { kind, heads: 1 };
                let p = params(6, d, &cfg);
                let sub = ActiveSubgraph {
                    ids: vec![0, 1, 2, 3],
                    features: Tensor2D::from_rows(&(0..4).map(|_| unit_vec(&mut rng, d)).collect::<Vec<_>>(), d).unwrap(),
                    edges: vec![(0, 1), (1, 2), (2, 3)],
                };
                let goal = unit_vec(&mut rng, d);
                let ltm = rand_vec(&mut rng, d);
                let w_rows = rand_tensor(&mut rng, 5, d, 1.0);
                let w_ltm = rand_vec(&mut rng, d);
                let loss = |q: &ParamStore<f64>, ltm: &[f64]| {
                    let (o, _) = wm_forward(q, &cfg, &sub, &goal, ltm, ltm_on).unwrap();
                    dot(o.wm.rows.data(), w_rows.data()) + o.ltm_next.map_or(0.0, |l| dot(&l, &w_ltm))
                };
                let (_, cache) = wm_forward(&p, &cfg, &sub, &goal, &ltm, ltm_on).unwrap();
                let mut g = p.clone();
                let dltm = wm_backward(&p, &mut g, &cache, &w_rows, Some(&w_ltm));
                let report = grad_check(|q| Ok(loss(q, &ltm)), &with_grads(&p, &g), 1e-6).unwrap();
                assert!(report.max_relative_error < 1e-6, "{kind:?} {ltm_on} {report:?}");
                for i in 0..d {
                    let (mut lp, mut lm) = (ltm.clone(), ltm.clone());
                    lp[i] += 1e-6;
                    lm[i] -= 1e-6;
                    let num = (loss(&p, &lp) - loss(&p, &lm)) / 2e-6;
                    assert!((num - dltm[i]).abs() < 1e-7, "{kind:?} {ltm_on}");
                }
            }
        }
    }
}
