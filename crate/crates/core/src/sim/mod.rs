//! Deterministic occupancy-grid world: generation, motion, panoramic
//! observation and the BFS shortest-path oracle.

mod motion;
mod observe;
mod path;
mod world;

pub use motion::{apply_action, success_check, Action, AgentPose, Heading};
pub use observe::{observe, ObserveConfig, Panorama, BLOCKED, FREE, UNKNOWN};
pub use path::{distance_field, shortest_path, ShortestPath};
pub use world::{generate_world, Cell, GridWorld, DEFAULT_CELL_SIZE, WORLD_MAGIC};
