use std::collections::VecDeque;

use super::world::{Cell, GridWorld};
use crate::error::{Error, Result};

/// 4-connected BFS hop counts from the nearest of `sources`; `None` where unreachable.
pub fn distance_field(world: &GridWorld, sources: &[Cell]) -> Vec<Option<u32>> {
    let mut dist = vec![None; world.width() * world.height()];
    let mut queue = VecDeque::new();
    for &s in sources {
        if world.is_free(s) && dist[world.index(s)].is_none() {
            dist[world.index(s)] = Some(0);
            queue.push_back(s);
        }
    }
    while let Some(c) = queue.pop_front() {
        let d = dist[world.index(c)].expect("queued cells have a distance");
        for n in world.free_neighbors(c) {
            let i = world.index(n);
            if dist[i].is_none() {
                dist[i] = Some(d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShortestPath {
    /// `None` when the endpoints are disconnected.
    pub hops: Option<usize>,
    /// Meters; `f64::INFINITY` when disconnected.
    pub length_m: f64,
    /// Cells from `a` to `b` inclusive; empty when disconnected.
    pub cells: Vec<Cell>,
}

impl ShortestPath {
    pub fn is_connected(&self) -> bool {
        self.hops.is_some()
    }
}

pub fn shortest_path(world: &GridWorld, a: Cell, b: Cell) -> Result<ShortestPath> {
    for c in [a, b] {
        if world.is_blocked(c) {
            return Err(Error::Domain(format!("path endpoint {c} is not a free cell")));
        }
    }
    let field = distance_field(world, &[b]);
    let Some(total) = field[world.index(a)] else {
        return Ok(ShortestPath {
            hops: None,
            length_m: f64::INFINITY,
            cells: Vec::new(),
        });
    };
    let mut cells = Vec::with_capacity(total as usize + 1);
    let mut cur = a;
    cells.push(cur);
    while cur != b {
        let d = field[world.index(cur)].expect("on a finite path");
        cur = world
            .free_neighbors(cur)
            .find(|&n| field[world.index(n)] == Some(d - 1))
            .expect("BFS field has a descending neighbour");
        cells.push(cur);
    }
    Ok(ShortestPath {
        hops: Some(total as usize),
        length_m: total as f64 * world.cell_size,
        cells,
    })
}
