use std::fmt;

use serde::{Deserialize, Serialize};

use super::world::{Cell, GridWorld};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    pub fn index(self) -> usize {
        match self {
            Heading::N => 0,
            Heading::E => 1,
            Heading::S => 2,
            Heading::W => 3,
        }
    }

    pub fn from_index(i: usize) -> Heading {
        Self::ALL[i % 4]
    }

    pub fn left(self) -> Heading {
        Self::from_index(self.index() + 3)
    }

    pub fn right(self) -> Heading {
        Self::from_index(self.index() + 1)
    }

    /// Unit step `(dx, dy)`; `y` grows southward.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Heading::N => (0, -1),
            Heading::E => (1, 0),
            Heading::S => (0, 1),
            Heading::W => (-1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Stop,
    MoveForward,
    TurnLeft,
    TurnRight,
}

impl Action {
    pub const COUNT: usize = 4;
    pub const ALL: [Action; 4] = [
        Action::Stop,
        Action::MoveForward,
        Action::TurnLeft,
        Action::TurnRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Stop => "STOP",
            Action::MoveForward => "MOVE_FORWARD",
            Action::TurnLeft => "TURN_LEFT",
            Action::TurnRight => "TURN_RIGHT",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentPose {
    pub x: usize,
    pub y: usize,
    pub heading: Heading,
}

impl AgentPose {
    pub fn new(cell: Cell, heading: Heading) -> Self {
        Self {
            x: cell.x,
            y: cell.y,
            heading,
        }
    }

    pub fn cell(&self) -> Cell {
        Cell::new(self.x, self.y)
    }
}

/// Blocked forward moves leave the pose unchanged; STOP never moves.
pub fn apply_action(world: &GridWorld, pose: AgentPose, action: Action) -> AgentPose {
    match action {
        Action::Stop => pose,
        Action::TurnLeft => AgentPose {
            heading: pose.heading.left(),
            ..pose
        },
        Action::TurnRight => AgentPose {
            heading: pose.heading.right(),
            ..pose
        },
        Action::MoveForward => {
            let (dx, dy) = pose.heading.delta();
            match pose.cell().offset(dx, dy) {
                Some(next) if world.is_free(next) => AgentPose::new(next, pose.heading),
                _ => pose,
            }
        }
    }
}

/// True iff the Euclidean distance between cell centres, in meters, is at most `radius_m`.
pub fn success_check(cell: Cell, goal: Cell, cell_size: f64, radius_m: f64) -> bool {
    cell.euclidean_cells(goal) * cell_size <= radius_m + 1e-12
}
