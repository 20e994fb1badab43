//! The topological short-term map and the long-term state slot.
//!
//! Nodes are never deleted by forgetting, only flagged; edges are stored in
//! full and filtered by node status on read, so restoring a node brings its
//! edges back exactly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::AgentPose;
use crate::tensor::{dot, Scalar, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeStatus {
    Active,
    Forgotten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord<T> {
    pub id: usize,
    /// Unit-norm place embedding.
    pub feature: Vec<T>,
    /// Ground-truth pose, for analysis only.
    pub pose: AgentPose,
    pub status: NodeStatus,
    pub created_step: usize,
    pub last_updated_step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub d: usize,
    /// Cosine similarity at or above which an observation localizes to a stored node.
    pub tau_sim: f64,
    pub capacity: usize,
}

impl MapConfig {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            tau_sim: 0.9,
            capacity: 100,
        }
    }
}

/// Per-node attention weights over the active nodes at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores<T> {
    pub scores: BTreeMap<usize, T>,
    /// Weight on the long-term row; never forgettable.
    pub ltm: T,
    pub step: usize,
}

impl<T: Scalar> AttentionScores<T> {
    /// Builds scores from a row-aligned weight vector; `ids` names the STM rows.
    pub fn from_rows(ids: &[usize], weights: &[T], ltm: T, step: usize) -> Self {
        Self {
            scores: ids.iter().copied().zip(weights.iter().copied()).collect(),
            ltm,
            step,
        }
    }

    /// Rescales the STM entries to sum to one and drops the LTM weight.
    pub fn renormalized(&self) -> Self {
        let total: T = self.scores.values().copied().sum();
        let scores = if total > T::zero() {
            self.scores.iter().map(|(&k, &v)| (k, v / total)).collect()
        } else {
            let u = T::one() / T::of(self.scores.len().max(1) as f64);
            self.scores.keys().map(|&k| (k, u)).collect()
        };
        Self {
            scores,
            ltm: T::zero(),
            step: self.step,
        }
    }
}

/// Features of the active nodes in id order plus their mutual edges as row pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSubgraph<T> {
    pub ids: Vec<usize>,
    pub features: Tensor2D<T>,
    /// Row-index pairs `(a, b)` with `a < b`.
    pub edges: Vec<(usize, usize)>,
}

impl<T> ActiveSubgraph<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TopoMap<T> {
    config: MapConfig,
    nodes: Vec<NodeRecord<T>>,
    edges: BTreeSet<(usize, usize)>,
    current: Option<usize>,
    ltm: Vec<T>,
    next_id: usize,
    forget_calls: usize,
}

fn edge(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

impl<T: Scalar> TopoMap<T> {
    pub fn new(config: MapConfig) -> Self {
        Self {
            config,
            nodes: Vec::new(),
            edges: BTreeSet::new(),
            current: None,
            ltm: vec![T::zero(); config.d],
            next_id: 0,
            forget_calls: 0,
        }
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    /// Clears nodes and edges and sets the long-term state to `ltm_init` (zeros when `None`).
    pub fn reset(&mut self, ltm_init: Option<&[T]>) {
        self.nodes.clear();
        self.edges.clear();
        self.current = None;
        self.next_id = 0;
        self.ltm = match ltm_init {
            Some(v) => v.to_vec(),
            None => vec![T::zero(); self.config.d],
        };
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeRecord<T>] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Option<&NodeRecord<T>> {
        self.position(id).map(|i| &self.nodes[i])
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn current_node(&self) -> Option<usize> {
        self.current
    }

    pub fn forget_calls(&self) -> usize {
        self.forget_calls
    }

    pub fn active_ids(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.status == NodeStatus::Active)
            .map(|n| n.id)
            .collect()
    }

    pub fn forgotten_ids(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.status == NodeStatus::Forgotten)
            .map(|n| n.id)
            .collect()
    }

    pub fn num_active(&self) -> usize {
        self.nodes.iter().filter(|n| n.status == NodeStatus::Active).count()
    }

    /// Edges whose endpoints are both active.
    pub fn active_edges(&self) -> BTreeSet<(usize, usize)> {
        self.edges
            .iter()
            .copied()
            .filter(|&(a, b)| self.is_active(a) && self.is_active(b))
            .collect()
    }

    pub fn is_active(&self, id: usize) -> bool {
        self.node(id).is_some_and(|n| n.status == NodeStatus::Active)
    }

    fn position(&self, id: usize) -> Option<usize> {
        // ids are assigned increasingly and nodes kept in insertion order
        self.nodes.binary_search_by_key(&id, |n| n.id).ok()
    }

    /// Localizes `feature` against every stored node, active or forgotten.
    ///
    /// A match at or above `tau_sim` becomes current, takes the new feature
    /// and is reactivated; otherwise a new node is appended. Either way an
    /// edge joins the previous and the new current node when they differ.
    pub fn localize_and_update(&mut self, feature: &[T], pose: AgentPose, step: usize) -> Result<usize> {
        if feature.len() != self.config.d {
            return Err(Error::dim("localize", format!("feature {}", feature.len()), format!("d {}", self.config.d)));
        }
        let tau = T::of(self.config.tau_sim);
        let mut best: Option<(usize, T)> = None;
        for (i, n) in self.nodes.iter().enumerate() {
            let s = dot(&n.feature, feature);
            if s >= tau && best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        let id = match best {
            Some((i, _)) => {
                let n = &mut self.nodes[i];
                n.feature.copy_from_slice(feature);
                n.pose = pose;
                n.last_updated_step = step;
                n.status = NodeStatus::Active;
                n.id
            }
            None => self.push_node(feature, pose, step),
        };
        if let Some(prev) = self.current {
            if prev != id {
                self.edges.insert(edge(prev, id));
            }
        }
        self.current = Some(id);
        Ok(id)
    }

    fn push_node(&mut self, feature: &[T], pose: AgentPose, step: usize) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        self.nodes.push(NodeRecord {
            id,
            feature: feature.to_vec(),
            pose,
            status: NodeStatus::Active,
            created_step: step,
            last_updated_step: step,
        });
        id
    }

    /// Permanently removes the oldest non-current nodes until the capacity holds.
    pub fn evict_if_full(&mut self) -> Vec<usize> {
        let mut evicted = Vec::new();
        while self.nodes.len() > self.config.capacity {
            let Some(i) = self
                .nodes
                .iter()
                .enumerate()
                .filter(|(_, n)| Some(n.id) != self.current)
                .min_by_key(|(_, n)| (n.created_step, n.id))
                .map(|(i, _)| i)
            else {
                break;
            };
            let id = self.nodes.remove(i).id;
            self.edges.retain(|&(a, b)| a != id && b != id);
            evicted.push(id);
        }
        evicted
    }

    /// Flags the `floor(p · N_active)` lowest-scoring active nodes as forgotten.
    ///
    /// Ranking is a stable ascending sort on score with lower ids first on
    /// ties. The current node is skipped and the next-lowest node takes its slot.
    pub fn forget(&mut self, scores: &AttentionScores<T>, p: f64) -> Result<Vec<usize>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("forgetting fraction {p} outside [0, 1)")));
        }
        let active = self.active_ids();
        if scores.scores.len() != active.len() || active.iter().any(|id| !scores.scores.contains_key(id)) {
            return Err(Error::Consistency(format!(
                "scores cover {:?} but active nodes are {:?}",
                scores.scores.keys().collect::<Vec<_>>(),
                active
            )));
        }
        self.forget_calls += 1;
        let n = forget_count(p, active.len());
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut ranked = active;
        ranked.sort_by(|a, b| {
            scores.scores[a]
                .partial_cmp(&scores.scores[b])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let chosen: Vec<usize> = ranked
            .into_iter()
            .filter(|&id| Some(id) != self.current)
            .take(n)
            .collect();
        for &id in &chosen {
            let i = self.position(id).expect("active id exists");
            self.nodes[i].status = NodeStatus::Forgotten;
        }
        Ok(chosen)
    }

    /// Reactivates every forgotten node; returns how many changed.
    pub fn restore_all(&mut self) -> usize {
        let mut count = 0;
        for n in &mut self.nodes {
            if n.status == NodeStatus::Forgotten {
                n.status = NodeStatus::Active;
                count += 1;
            }
        }
        count
    }

    pub fn active_subgraph(&self) -> ActiveSubgraph<T> {
        let ids = self.active_ids();
        let d = self.config.d;
        let mut data = Vec::with_capacity(ids.len() * d);
        for n in self.nodes.iter().filter(|n| n.status == NodeStatus::Active) {
            data.extend_from_slice(&n.feature);
        }
        let row: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        let edges = self
            .edges
            .iter()
            .filter_map(|(a, b)| Some((*row.get(a)?, *row.get(b)?)))
            .collect();
        ActiveSubgraph {
            features: Tensor2D::from_vec(ids.len(), d, data).expect("d-sized features"),
            ids,
            edges,
        }
    }

    pub fn ltm_read(&self) -> &[T] {
        &self.ltm
    }

    pub fn ltm_write(&mut self, v: &[T]) -> Result<()> {
        if v.len() != self.config.d {
            return Err(Error::dim("ltm_write", format!("v {}", v.len()), format!("d {}", self.config.d)));
        }
        self.ltm.copy_from_slice(v);
        Ok(())
    }

    pub fn snapshot(&self, step: usize, with_features: bool) -> MapSnapshot {
        MapSnapshot {
            nodes: self
                .nodes
                .iter()
                .map(|n| SnapshotNode {
                    id: n.id,
                    pose: n.pose,
                    status: n.status,
                    created_step: n.created_step,
                    feature: with_features.then(|| n.feature.iter().map(|v| v.as_f64()).collect()),
                })
                .collect(),
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
            current_node: self.current,
            step,
        }
    }
}

/// `floor(p · n)`, tolerant of products like `0.29 · 100 = 28.999…`, and capped at `n − 1`.
pub fn forget_count(p: f64, n: usize) -> usize {
    let raw = (p * n as f64 + 1e-9).floor() as usize;
    raw.min(n.saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotNode {
    pub id: usize,
    pub pose: AgentPose,
    pub status: NodeStatus,
    pub created_step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f64>>,
}

/// JSON export of the map for analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSnapshot {
    pub nodes: Vec<SnapshotNode>,
    pub edges: Vec<[usize; 2]>,
    pub current_node: Option<usize>,
    pub step: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Cell, Heading};
    use proptest::prelude::*;

    fn pose() -> AgentPose {
        AgentPose::new(Cell::new(1, 1), Heading::N)
    }

    fn basis(d: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        v
    }

    /// A map whose nodes `0..n` lie on a path, with node `current` current.
    fn path_map(n: usize, current: usize) -> TopoMap<f64> {
        let mut m = TopoMap::new(MapConfig::new(n.max(1)));
        for k in 0..n {
            m.localize_and_update(&basis(n, k), pose(), k).unwrap();
        }
        m.localize_and_update(&basis(n, current), pose(), n).unwrap();
        m
    }

    fn scores(ids: &[usize], w: &[f64]) -> AttentionScores<f64> {
        AttentionScores::from_rows(ids, w, 0.0, 0)
    }

    #[test]
    fn first_observation_creates_node_zero() {
        let mut m = TopoMap::<f64>::new(MapConfig::new(4));
        assert_eq!(m.localize_and_update(&basis(4, 2), pose(), 0).unwrap(), 0);
        assert_eq!(m.current_node(), Some(0));
        assert!(m.edges().is_empty());
    }

    #[test]
    fn identical_observation_updates_in_place() {
        let mut m = TopoMap::<f64>::new(MapConfig::new(4));
        m.localize_and_update(&basis(4, 0), pose(), 0).unwrap();
        assert_eq!(m.localize_and_update(&basis(4, 0), pose(), 1).unwrap(), 0);
        assert_eq!(m.len(), 1);
        assert_eq!(m.node(0).unwrap().last_updated_step, 1);
    }

    #[test]
    fn orthogonal_observation_adds_node_and_edge() {
        let mut m = TopoMap::<f64>::new(MapConfig::new(4));
        m.localize_and_update(&basis(4, 0), pose(), 0).unwrap();
        assert_eq!(m.localize_and_update(&basis(4, 1), pose(), 1).unwrap(), 1);
        assert_eq!(m.edges().iter().copied().collect::<Vec<_>>(), vec![(0, 1)]);
    }

    #[test]
    fn eviction_at_capacity_100() {
        let mut cfg = MapConfig::new(101);
        cfg.capacity = 100;
        let mut m = TopoMap::<f64>::new(cfg);
        for k in 0..100 {
            m.localize_and_update(&basis(101, k), pose(), k).unwrap();
            assert!(m.evict_if_full().is_empty());
        }
        m.localize_and_update(&basis(101, 100), pose(), 100).unwrap();
        assert_eq!(m.evict_if_full(), vec![0]);
        assert_eq!(m.len(), 100);
        assert!(m.edges().iter().all(|&(a, b)| a != 0 && b != 0));
    }

    #[test]
    fn eviction_skips_current_node() {
        let mut cfg = MapConfig::new(4);
        cfg.capacity = 3;
        let mut m = TopoMap::<f64>::new(cfg);
        for k in 0..3 {
            m.localize_and_update(&basis(4, k), pose(), k).unwrap();
        }
        m.localize_and_update(&basis(4, 0), pose(), 3).unwrap();
        m.push_node(&basis(4, 3), pose(), 4);
        assert_eq!(m.evict_if_full(), vec![1]);
    }

    #[test]
    fn forget_counts() {
        let mut m = path_map(10, 9);
        let ids = m.active_ids();
        let w: Vec<f64> = (0..10).map(|k| k as f64 / 45.0).collect();
        assert_eq!(m.forget(&scores(&ids, &w), 0.2).unwrap(), vec![0, 1]);

        let mut m = path_map(10, 9);
        let before = m.clone();
        assert!(m.forget(&scores(&ids, &w), 0.0).unwrap().is_empty());
        assert_eq!(m.nodes, before.nodes);
        assert_eq!(m.edges, before.edges);

        let mut m = path_map(4, 3);
        let w = [0.25; 4];
        assert!(m.forget(&scores(&m.active_ids(), &w), 0.2).unwrap().is_empty());
    }

    #[test]
    fn forget_substitutes_for_current_node() {
        let mut m = path_map(10, 0);
        let ids = m.active_ids();
        let w: Vec<f64> = (0..10).map(|k| k as f64).collect();
        assert_eq!(m.forget(&scores(&ids, &w), 0.2).unwrap(), vec![1, 2]);
        assert!(m.is_active(0));
    }

    #[test]
    fn forget_ties_break_on_lower_id() {
        let mut m = path_map(6, 5);
        let ids = m.active_ids();
        assert_eq!(m.forget(&scores(&ids, &[0.5; 6]), 0.34).unwrap(), vec![0, 1]);
    }

    #[test]
    fn forget_rejects_mismatched_scores() {
        let mut m = path_map(5, 4);
        let err = m.forget(&scores(&[0, 1, 2], &[0.3; 3]), 0.2).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
        assert!(matches!(m.forget(&scores(&m.active_ids(), &[0.2; 5]), 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn middle_of_path_forgotten_disconnects_ends() {
        let mut m = path_map(3, 2);
        let ids = m.active_ids();
        m.forget(&scores(&ids, &[0.4, 0.1, 0.5]), 0.34).unwrap();
        let sub = m.active_subgraph();
        assert_eq!(sub.ids, vec![0, 2]);
        assert!(sub.edges.is_empty());
    }

    #[test]
    fn restore_all_counts_and_round_trips() {
        let mut m = path_map(10, 9);
        let edges = m.active_edges();
        let ids = m.active_ids();
        let w: Vec<f64> = (0..10).map(|k| ((k * 7) % 10) as f64).collect();
        m.forget(&scores(&ids, &w), 0.3).unwrap();
        assert_eq!(m.forgotten_ids().len(), 3);
        assert_eq!(m.restore_all(), 3);
        assert_eq!(m.restore_all(), 0);
        assert_eq!(m.active_edges(), edges);
        assert_eq!(m.active_ids(), ids);
    }

    #[test]
    fn revisiting_forgotten_node_restores_it() {
        let mut m = path_map(5, 4);
        let ids = m.active_ids();
        m.forget(&scores(&ids, &[0.0, 0.3, 0.3, 0.2, 0.2]), 0.2).unwrap();
        assert!(!m.is_active(0));
        assert_eq!(m.localize_and_update(&basis(5, 0), pose(), 9).unwrap(), 0);
        assert!(m.is_active(0));
        assert!(m.active_edges().contains(&(0, 1)));
        assert!(m.active_edges().contains(&(0, 4)));
    }

    #[test]
    fn ltm_round_trip_and_reset() {
        let mut m = TopoMap::<f64>::new(MapConfig::new(3));
        assert_eq!(m.ltm_read(), &[0.0; 3]);
        m.ltm_write(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(m.ltm_read(), &[1.0, -2.0, 0.5]);
        assert!(m.ltm_write(&[1.0]).is_err());
        m.reset(None);
        assert_eq!(m.ltm_read(), &[0.0; 3]);
    }

    #[test]
    fn snapshot_serializes_without_features_by_default() {
        let m = path_map(3, 2);
        let json = serde_json::to_string(&m.snapshot(7, false)).unwrap();
        assert!(!json.contains("feature"));
        assert!(json.contains("\"current_node\":2"));
        let with = m.snapshot(7, true);
        assert_eq!(with.nodes[1].feature.as_deref(), Some(&[0.0, 1.0, 0.0][..]));
    }

    #[test]
    fn forget_count_floor() {
        assert_eq!(forget_count(0.2, 10), 2);
        assert_eq!(forget_count(0.2, 4), 0);
        assert_eq!(forget_count(0.29, 100), 29);
        assert_eq!(forget_count(0.9, 1), 0);
    }

    fn random_map(n: usize, extra: &[(usize, usize)], current: usize) -> TopoMap<f64> {
        let mut m = path_map(n, current);
        for &(a, b) in extra {
            if a % n != b % n {
                m.edges.insert(edge(a % n, b % n));
            }
        }
        m
    }

    proptest! {
        #[test]
        fn forgetting_removes_exactly_floor_p_n(
            n in 1usize..40,
            p in 0.0f64..0.99,
            cur in 0usize..40,
            w in prop::collection::vec(0u8..5, 40),
        ) {
            let cur = cur % n;
            let mut m = path_map(n, cur);
            let ids = m.active_ids();
            let ws: Vec<f64> = w[..n].iter().map(|&x| x as f64).collect();
            let gone = m.forget(&scores(&ids, &ws), p).unwrap();
            prop_assert_eq!(gone.len(), forget_count(p, n));
            prop_assert!(!gone.contains(&cur));
            prop_assert!(m.is_active(cur));
            // brute force: lowest (score, id) pairs excluding the current node
            let mut order: Vec<usize> = (0..n).filter(|&i| i != cur).collect();
            order.sort_by(|&a, &b| ws[a].partial_cmp(&ws[b]).unwrap().then(a.cmp(&b)));
            prop_assert_eq!(gone, order[..forget_count(p, n)].to_vec());
        }

        #[test]
        fn round_trip_and_subgraph_filter(
            n in 2usize..30,
            extra in prop::collection::vec((0usize..30, 0usize..30), 0..20),
            w in prop::collection::vec(0.0f64..1.0, 30),
            p in 0.0f64..0.9,
        ) {
            let mut m = random_map(n, &extra, n - 1);
            let ids0 = m.active_ids();
            let edges0 = m.active_edges();
            let ids = m.active_ids();
            m.forget(&scores(&ids, &w[..n]), p).unwrap();
            let sub = m.active_subgraph();
            let brute: Vec<usize> = m.nodes().iter().filter(|x| x.status == NodeStatus::Active).map(|x| x.id).collect();
            prop_assert_eq!(&sub.ids, &brute);
            prop_assert!(sub.ids.contains(&(n - 1)));
            for &(a, b) in &sub.edges {
                prop_assert!(a < b && m.edges().contains(&(sub.ids[a], sub.ids[b])));
            }
            m.restore_all();
            prop_assert_eq!(m.active_ids(), ids0);
            prop_assert_eq!(m.active_edges(), edges0);
        }

        #[test]
        fn capacity_always_holds(
            cap in 1usize..12,
            seq in prop::collection::vec(0usize..20, 1..60),
        ) {
            let mut cfg = MapConfig::new(20);
            cfg.capacity = cap;
            let mut m = TopoMap::<f64>::new(cfg);
            for (t, k) in seq.into_iter().enumerate() {
                m.localize_and_update(&basis(20, k), pose(), t).unwrap();
                m.evict_if_full();
                prop_assert!(m.len() <= cap);
                prop_assert!(m.is_active(m.current_node().unwrap()));
                for &(a, b) in m.edges() {
                    prop_assert!(a != b && m.node(a).is_some() && m.node(b).is_some());
                }
            }
        }
    }
}
