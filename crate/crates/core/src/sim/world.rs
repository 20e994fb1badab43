use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

pub const WORLD_MAGIC: &str = "MGWORLD1";
pub const DEFAULT_CELL_SIZE: f64 = 0.25;
const GENERATION_RETRIES: u64 = 64;
const MIN_LARGEST_COMPONENT_FRACTION: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn offset(self, dx: i64, dy: i64) -> Option<Cell> {
        let x = self.x as i64 + dx;
        let y = self.y as i64 + dy;
        (x >= 0 && y >= 0).then(|| Cell::new(x as usize, y as usize))
    }

    pub fn euclidean_cells(self, other: Cell) -> f64 {
        let dx = self.x as f64 - other.x as f64;
        let dy = self.y as f64 - other.y as f64;
        (dx * dx + dy * dy).sqrt()
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Occupancy grid; `y` grows southward, border cells are always blocked.
#[derive(Debug, Clone, PartialEq)]
pub struct GridWorld {
    pub id: String,
    width: usize,
    height: usize,
    blocked: Vec<bool>,
    pub cell_size: f64,
    pub seed: Option<u64>,
}

impl GridWorld {
    /// A world with closed border and free interior.
    pub fn open(width: usize, height: usize) -> Self {
        let mut w = Self {
            id: format!("open{width}x{height}"),
            width,
            height,
            blocked: vec![false; width * height],
            cell_size: DEFAULT_CELL_SIZE,
            seed: None,
        };
        w.close_border();
        w
    }

    /// Parses rows of `#`/`.`; the border must be closed.
    pub fn from_rows(rows: &[&str], cell_size: f64) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        let mut blocked = Vec::with_capacity(width * height);
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(bad_world(format!(
                    "row {y} has {} cells, expected {width}",
                    row.chars().count()
                )));
            }
            for (x, ch) in row.chars().enumerate() {
                blocked.push(match ch {
                    '#' => true,
                    '.' => false,
                    other => {
                        return Err(bad_world(format!("unexpected {other:?} at ({x}, {y})")));
                    }
                });
            }
        }
        if width < 3 || height < 3 {
            return Err(bad_world(format!("world {width}x{height} is too small")));
        }
        let w = Self {
            id: String::new(),
            width,
            height,
            blocked,
            cell_size,
            seed: None,
        };
        for x in 0..width {
            for y in [0, height - 1] {
                if !w.is_blocked(Cell::new(x, y)) {
                    return Err(bad_world(format!("border open at ({x}, {y})")));
                }
            }
        }
        for y in 0..height {
            for x in [0, width - 1] {
                if !w.is_blocked(Cell::new(x, y)) {
                    return Err(bad_world(format!("border open at ({x}, {y})")));
                }
            }
        }
        Ok(w)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x < self.width && c.y < self.height
    }

    /// Out-of-bounds cells count as blocked.
    pub fn is_blocked(&self, c: Cell) -> bool {
        !self.in_bounds(c) || self.blocked[c.y * self.width + c.x]
    }

    pub fn is_free(&self, c: Cell) -> bool {
        !self.is_blocked(c)
    }

    pub fn set_blocked(&mut self, c: Cell, blocked: bool) {
        let idx = c.y * self.width + c.x;
        self.blocked[idx] = blocked;
    }

    pub fn index(&self, c: Cell) -> usize {
        c.y * self.width + c.x
    }

    pub fn cell_at(&self, idx: usize) -> Cell {
        Cell::new(idx % self.width, idx / self.width)
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.width * self.height)
            .map(|i| self.cell_at(i))
            .filter(|&c| self.is_free(c))
            .collect()
    }

    /// Free 4-neighbours in N, E, S, W order.
    pub fn free_neighbors(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        [(0i64, -1i64), (1, 0), (0, 1), (-1, 0)]
            .into_iter()
            .filter_map(move |(dx, dy)| c.offset(dx, dy))
            .filter(|&n| self.is_free(n))
    }

    /// Free 4-connected components, largest first.
    pub fn components(&self) -> Vec<Vec<Cell>> {
        let mut seen = vec![false; self.width * self.height];
        let mut comps = Vec::new();
        for start in self.free_cells() {
            if seen[self.index(start)] {
                continue;
            }
            let mut comp = vec![start];
            seen[self.index(start)] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(c) = queue.pop_front() {
                for n in self.free_neighbors(c) {
                    let i = self.index(n);
                    if !seen[i] {
                        seen[i] = true;
                        comp.push(n);
                        queue.push_back(n);
                    }
                }
            }
            comps.push(comp);
        }
        comps.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a[0].cmp(&b[0])));
        comps
    }

    fn close_border(&mut self) {
        for x in 0..self.width {
            self.set_blocked(Cell::new(x, 0), true);
            self.set_blocked(Cell::new(x, self.height - 1), true);
        }
        for y in 0..self.height {
            self.set_blocked(Cell::new(0, y), true);
            self.set_blocked(Cell::new(self.width - 1, y), true);
        }
    }

    pub fn to_ascii(&self) -> String {
        let mut s = format!(
            "{WORLD_MAGIC} {} {} {}\n",
            self.width, self.height, self.cell_size
        );
        for y in 0..self.height {
            for x in 0..self.width {
                s.push(if self.is_blocked(Cell::new(x, y)) { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }

    pub fn from_ascii(text: &str, id: impl Into<String>) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad_world("empty file"))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != WORLD_MAGIC {
            return Err(bad_world(format!("bad header {header:?}")));
        }
        let width: usize = parts[1].parse().map_err(|_| bad_world("bad width"))?;
        let height: usize = parts[2].parse().map_err(|_| bad_world("bad height"))?;
        let cell_size: f64 = parts[3].parse().map_err(|_| bad_world("bad cell size"))?;
        if !(cell_size > 0.0) {
            return Err(bad_world("cell size must be positive"));
        }
        let rows: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
        if rows.len() != height {
            return Err(bad_world(format!("{} rows, header says {height}", rows.len())));
        }
        let mut w = Self::from_rows(&rows, cell_size)?;
        if w.width != width {
            return Err(bad_world(format!("{} columns, header says {width}", w.width)));
        }
        w.id = id.into();
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ascii()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_ascii(&text, id)
    }
}

fn bad_world(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "world file",
        detail: detail.into(),
    }
}

/// Seeded obstacle field plus straight room walls with door gaps. Retries
/// until the largest free component holds at least 60% of the free cells.
pub fn generate_world(seed: u64, width: usize, height: usize, density: f64) -> Result<GridWorld> {
    if !(0.0..=0.4).contains(&density) {
        return Err(Error::Domain(format!("obstacle density {density} outside [0, 0.4]")));
    }
    if width < 5 || height < 5 {
        return Err(Error::Domain(format!("world {width}x{height} is too small")));
    }
    for attempt in 0..GENERATION_RETRIES {
        let mut rng = stream(seed, Stream::World, attempt);
        let mut w = GridWorld::open(width, height);
        w.id = format!("w{seed}");
        w.seed = Some(seed);
        if density > 0.0 {
            let walls = (width.min(height) - 2) / 10;
            for _ in 0..walls {
                add_room_wall(&mut w, &mut rng);
            }
            for y in 1..height - 1 {
                for x in 1..width - 1 {
                    if rng.random::<f64>() < density {
                        w.set_blocked(Cell::new(x, y), true);
                    }
                }
            }
        }
        let comps = w.components();
        let free: usize = comps.iter().map(Vec::len).sum();
        if free > 0 && comps[0].len() as f64 >= MIN_LARGEST_COMPONENT_FRACTION * free as f64 {
            return Ok(w);
        }
    }
    Err(Error::Generation(format!(
        "no connected layout for seed {seed} after {GENERATION_RETRIES} attempts"
    )))
}

fn add_room_wall(w: &mut GridWorld, rng: &mut impl Rng) {
    let vertical = rng.random_bool(0.5);
    let (span, across) = if vertical {
        (w.height, w.width)
    } else {
        (w.width, w.height)
    };
    if across < 7 {
        return;
    }
    let at = rng.random_range(3..across - 3);
    let door = rng.random_range(1..span - 2);
    let door_width = rng.random_range(1..=2);
    for i in 1..span - 1 {
        if i >= door && i < door + door_width {
            continue;
        }
        let c = if vertical { Cell::new(at, i) } else { Cell::new(i, at) };
        w.set_blocked(c, true);
    }
}
