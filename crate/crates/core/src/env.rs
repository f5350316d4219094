//! Environments: the nonstationary Four Rooms gridworld and an explicit
//! finite-MDP container used by the exact gradient oracle.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Fixed 13×13 map. `X` is a wall, a space is an open cell.
pub const FOUR_ROOMS_LAYOUT: &str = "\
XXXXXXXXXXXXX
X     X     X
X     X     X
X           X
X     X     X
X     X     X
XX XXXXXX XXX
X     X     X
X     X     X
X           X
X     X     X
X     X     X
XXXXXXXXXXXXX";

pub const GRID_SIZE: usize = 13;
pub const N_CELLS: usize = 104;
pub const N_DIRECTIONS: usize = 4;
pub const DEFAULT_T_MAX: usize = 5000;

/// An open cell of the Four Rooms layout, numbered row-major over open cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; N_DIRECTIONS] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Direction {
        Self::ALL[i]
    }

    fn offset(self) -> (isize, isize) {
        match self {
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FourRoomsState {
    pub agent: Cell,
    /// Never shown to the learner.
    pub goal: Cell,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next: usize,
    pub reward: f64,
    pub done: bool,
}

/// Static geometry of the Four Rooms map with a precomputed move table.
#[derive(Debug, Clone)]
pub struct FourRooms {
    coords: Vec<(usize, usize)>,
    /// `moves[cell][dir]` is the cell reached by a successful move (self when blocked).
    moves: Vec<[usize; N_DIRECTIONS]>,
}

impl Default for FourRooms {
    fn default() -> Self {
        Self::new()
    }
}

impl FourRooms {
    pub fn new() -> Self {
        let grid: Vec<Vec<bool>> = FOUR_ROOMS_LAYOUT
            .lines()
            .map(|row| row.chars().map(|c| c != 'X').collect())
            .collect();
        let mut index = vec![[usize::MAX; GRID_SIZE]; GRID_SIZE];
        let mut coords = Vec::with_capacity(N_CELLS);
        for (r, row) in grid.iter().enumerate() {
            for (c, &open) in row.iter().enumerate() {
                if open {
                    index[r][c] = coords.len();
                    coords.push((r, c));
                }
            }
        }
        let moves = coords
            .iter()
            .enumerate()
            .map(|(cell, &(r, c))| {
                let mut row = [cell; N_DIRECTIONS];
                for dir in Direction::ALL {
                    let (dr, dc) = dir.offset();
                    let (nr, nc) = ((r as isize + dr) as usize, (c as isize + dc) as usize);
                    if grid[nr][nc] {
                        row[dir.index()] = index[nr][nc];
                    }
                }
                row
            })
            .collect();
        Self { coords, moves }
    }

    pub fn n_cells(&self) -> usize {
        self.coords.len()
    }

    pub fn coord(&self, cell: Cell) -> (usize, usize) {
        self.coords[cell.0]
    }

    pub fn cell_at(&self, row: usize, col: usize) -> Option<Cell> {
        self.coords.iter().position(|&rc| rc == (row, col)).map(Cell)
    }

    /// Deterministic effect of a successful move.
    pub fn neighbor(&self, cell: Cell, dir: Direction) -> Cell {
        Cell(self.moves[cell.0][dir.index()])
    }

    /// Agent and goal drawn uniformly; the goal is redrawn until it differs from the start.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> FourRoomsState {
        let agent = Cell(rng.random_range(0..self.n_cells()));
        let mut goal = Cell(rng.random_range(0..self.n_cells()));
        while goal == agent {
            goal = Cell(rng.random_range(0..self.n_cells()));
        }
        FourRoomsState { agent, goal }
    }

    /// Intended direction with probability 2/3, otherwise one of the other three
    /// directions uniformly (1/9 each). Blocked moves leave the agent in place.
    pub fn sample_direction<R: Rng + ?Sized>(&self, action: Direction, rng: &mut R) -> Direction {
        let k = rng.random_range(0..9u32);
        if k < 6 {
            action
        } else {
            let others = (k - 6) as usize;
            Direction::ALL
                .iter()
                .copied()
                .filter(|&d| d != action)
                .nth(others)
                .unwrap()
        }
    }

    pub fn step<R: Rng + ?Sized>(&self, state: &mut FourRoomsState, action: Direction, rng: &mut R) -> StepOutcome {
        debug_assert_ne!(state.agent, state.goal);
        let dir = self.sample_direction(action, rng);
        state.agent = self.neighbor(state.agent, dir);
        let done = state.agent == state.goal;
        StepOutcome {
            next: state.agent.0,
            reward: if done { 1.0 } else { 0.0 },
            done,
        }
    }

    /// Exact one-step distribution over next cells for `action` taken at `cell`.
    pub fn transition_kernel(&self, cell: Cell, action: Direction) -> Vec<f64> {
        let mut dist = vec![0.0; self.n_cells()];
        for dir in Direction::ALL {
            let p = if dir == action { 2.0 / 3.0 } else { 1.0 / 9.0 };
            dist[self.neighbor(cell, dir).0] += p;
        }
        dist
    }
}

/// Episodic environment interface consumed by the learner.
pub trait Environment {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn reset(&mut self) -> usize;
    fn step(&mut self, action: usize) -> StepOutcome;
}

/// Four Rooms with a hidden goal that changes every episode. Owns its random stream.
#[derive(Debug, Clone)]
pub struct FourRoomsEnv {
    rooms: FourRooms,
    state: FourRoomsState,
    rng: ChaCha8Rng,
}

impl FourRoomsEnv {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self {
            rooms: FourRooms::new(),
            state: FourRoomsState {
                agent: Cell(0),
                goal: Cell(1),
            },
            rng,
        }
    }

    pub fn state(&self) -> FourRoomsState {
        self.state
    }

    pub fn rooms(&self) -> &FourRooms {
        &self.rooms
    }
}

impl Environment for FourRoomsEnv {
    fn n_states(&self) -> usize {
        self.rooms.n_cells()
    }

    fn n_actions(&self) -> usize {
        N_DIRECTIONS
    }

    fn reset(&mut self) -> usize {
        self.state = self.rooms.reset(&mut self.rng);
        self.state.agent.0
    }

    fn step(&mut self, action: usize) -> StepOutcome {
        let dir = Direction::from_index(action);
        self.rooms.step(&mut self.state, dir, &mut self.rng)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MdpError {
    #[error("gamma {0} is outside [0, 1]")]
    Gamma(f64),
    #[error("n_states and n_actions must be positive")]
    Empty,
    #[error("{field} has the wrong shape: {detail}")]
    Shape { field: &'static str, detail: String },
    #[error("transition row (state {state}, action {action}) sums to {sum}")]
    RowSum { state: usize, action: usize, sum: f64 },
    #[error("transition entry (state {state}, action {action}, next {next}) is negative or non-finite")]
    Entry { state: usize, action: usize, next: usize },
    #[error("init_dist sums to {0}")]
    InitSum(f64),
    #[error("init_dist entry {0} is negative or non-finite")]
    InitEntry(usize),
    #[error("reward (state {state}, action {action}, next {next}) is not finite")]
    Reward { state: usize, action: usize, next: usize },
    #[error("failed to read MDP document: {0}")]
    Io(String),
    #[error("failed to parse MDP document: {0}")]
    Parse(String),
}

const STOCHASTIC_TOL: f64 = 1e-12;

/// Explicit finite MDP. Tensors are indexed `[state][action][next_state]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<Vec<f64>>>,
    pub gamma: f64,
    pub init_dist: Vec<f64>,
}

impl FiniteMdpSpec {
    pub fn validate(&self) -> Result<(), MdpError> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(MdpError::Empty);
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(MdpError::Gamma(self.gamma));
        }
        check_shape("transition", &self.transition, self.n_states, self.n_actions)?;
        check_shape("reward", &self.reward, self.n_states, self.n_actions)?;
        if self.init_dist.len() != self.n_states {
            return Err(MdpError::Shape {
                field: "init_dist",
                detail: format!("expected {} entries, got {}", self.n_states, self.init_dist.len()),
            });
        }
        for (s, rows) in self.transition.iter().enumerate() {
            for (a, row) in rows.iter().enumerate() {
                if let Some(next) = row.iter().position(|p| !p.is_finite() || *p < 0.0) {
                    return Err(MdpError::Entry {
                        state: s,
                        action: a,
                        next,
                    });
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(MdpError::RowSum {
                        state: s,
                        action: a,
                        sum,
                    });
                }
            }
        }
        for (s, rows) in self.reward.iter().enumerate() {
            for (a, row) in rows.iter().enumerate() {
                if let Some(next) = row.iter().position(|r| !r.is_finite()) {
                    return Err(MdpError::Reward {
                        state: s,
                        action: a,
                        next,
                    });
                }
            }
        }
        if let Some(i) = self.init_dist.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(MdpError::InitEntry(i));
        }
        let sum: f64 = self.init_dist.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(MdpError::InitSum(sum));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, MdpError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| MdpError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, MdpError> {
        let text = std::fs::read_to_string(path).map_err(|e| MdpError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("MDP spec serializes")
    }

    /// Expected immediate reward of taking `action` in `state`.
    pub fn expected_reward(&self, state: usize, action: usize) -> f64 {
        self.transition[state][action]
            .iter()
            .zip(&self.reward[state][action])
            .map(|(p, r)| p * r)
            .sum()
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self { gamma, ..self.clone() }
    }

    /// Dense random MDP: rows drawn uniformly then normalized, rewards in [0, 1],
    /// uniform initial distribution.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Self {
        let mut transition = Vec::with_capacity(n_states);
        let mut reward = Vec::with_capacity(n_states);
        for _ in 0..n_states {
            let mut t_rows = Vec::with_capacity(n_actions);
            let mut r_rows = Vec::with_capacity(n_actions);
            for _ in 0..n_actions {
                let raw: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.05..1.0)).collect();
                let total: f64 = raw.iter().sum();
                let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
                // push the rounding residue into the last entry so the row is stochastic
                let head: f64 = row[..n_states - 1].iter().sum();
                row[n_states - 1] = 1.0 - head;
                t_rows.push(row);
                r_rows.push((0..n_states).map(|_| rng.random_range(0.0..1.0)).collect());
            }
            transition.push(t_rows);
            reward.push(r_rows);
        }
        Self {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            init_dist: vec![1.0 / n_states as f64; n_states],
        }
    }

    /// States that loop to themselves with zero reward under every action.
    pub fn absorbing_states(&self) -> Vec<bool> {
        (0..self.n_states)
            .map(|s| (0..self.n_actions).all(|a| self.transition[s][a][s] == 1.0 && self.reward[s][a][s] == 0.0))
            .collect()
    }

    /// True when every state reaches a zero-reward absorbing state with probability
    /// one under every policy. Required for undiscounted evaluation.
    pub fn is_proper(&self) -> bool {
        let mut marked = self.absorbing_states();
        loop {
            let mut changed = false;
            for s in 0..self.n_states {
                if marked[s] {
                    continue;
                }
                let escapes = (0..self.n_actions).all(|a| {
                    self.transition[s][a]
                        .iter()
                        .enumerate()
                        .any(|(n, &p)| p > 0.0 && marked[n])
                });
                if escapes {
                    marked[s] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        marked.iter().all(|&m| m)
    }
}

fn check_shape(
    field: &'static str,
    tensor: &[Vec<Vec<f64>>],
    n_states: usize,
    n_actions: usize,
) -> Result<(), MdpError> {
    if tensor.len() != n_states {
        return Err(MdpError::Shape {
            field,
            detail: format!("expected {n_states} states, got {}", tensor.len()),
        });
    }
    for (s, rows) in tensor.iter().enumerate() {
        if rows.len() != n_actions {
            return Err(MdpError::Shape {
                field,
                detail: format!("state {s}: expected {n_actions} actions, got {}", rows.len()),
            });
        }
        for (a, row) in rows.iter().enumerate() {
            if row.len() != n_states {
                return Err(MdpError::Shape {
                    field,
                    detail: format!("state {s}, action {a}: expected {n_states} entries, got {}", row.len()),
                });
            }
        }
    }
    Ok(())
}

/// Samples trajectories from a [`FiniteMdpSpec`]. `terminal` states end the episode.
#[derive(Debug, Clone)]
pub struct FiniteMdpEnv {
    spec: FiniteMdpSpec,
    terminal: Vec<bool>,
    state: usize,
    rng: ChaCha8Rng,
}

impl FiniteMdpEnv {
    pub fn new(spec: FiniteMdpSpec, terminal: Vec<bool>, rng: ChaCha8Rng) -> Self {
        assert_eq!(terminal.len(), spec.n_states);
        Self {
            spec,
            terminal,
            state: 0,
            rng,
        }
    }

    fn sample(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        dist.len() - 1
    }
}

impl Environment for FiniteMdpEnv {
    fn n_states(&self) -> usize {
        self.spec.n_states
    }

    fn n_actions(&self) -> usize {
        self.spec.n_actions
    }

    fn reset(&mut self) -> usize {
        self.state = Self::sample(&self.spec.init_dist, &mut self.rng);
        self.state
    }

    fn step(&mut self, action: usize) -> StepOutcome {
        let next = Self::sample(&self.spec.transition[self.state][action], &mut self.rng);
        let reward = self.spec.reward[self.state][action][next];
        self.state = next;
        StepOutcome {
            next,
            reward,
            done: self.terminal[next],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn chain() -> FiniteMdpSpec {
        FiniteMdpSpec {
            n_states: 2,
            n_actions: 1,
            transition: vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]],
            reward: vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 0.0]]],
            gamma: 0.9,
            init_dist: vec![1.0, 0.0],
        }
    }

    #[test]
    fn layout_has_104_cells() {
        let rooms = FourRooms::new();
        assert_eq!(rooms.n_cells(), N_CELLS);
        let mut per_room = [0usize; 4];
        let mut hallways = 0;
        for i in 0..rooms.n_cells() {
            let (r, c) = rooms.coord(Cell(i));
            if r == 6 || c == 6 {
                hallways += 1;
            } else {
                per_room[(r > 6) as usize * 2 + (c > 6) as usize] += 1;
            }
        }
        assert_eq!(per_room, [25; 4]);
        assert_eq!(hallways, 4);
    }

    #[test]
    fn kernel_rows_are_stochastic() {
        let rooms = FourRooms::new();
        for cell in 0..rooms.n_cells() {
            for dir in Direction::ALL {
                let sum: f64 = rooms.transition_kernel(Cell(cell), dir).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corner_blocked_moves_stay() {
        let rooms = FourRooms::new();
        let corner = rooms.cell_at(1, 1).unwrap();
        assert_eq!(rooms.neighbor(corner, Direction::Up), corner);
        assert_eq!(rooms.neighbor(corner, Direction::Left), corner);
        let k = rooms.transition_kernel(corner, Direction::Right);
        // up and left fail in place: 1/9 + 1/9
        assert!((k[corner.0] - 2.0 / 9.0).abs() < 1e-15);
        assert!((k[rooms.cell_at(1, 2).unwrap().0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((k[rooms.cell_at(2, 1).unwrap().0] - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn reset_is_deterministic_and_distinct() {
        let rooms = FourRooms::new();
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let sa = rooms.reset(&mut a);
            assert_eq!(sa, rooms.reset(&mut b));
            assert_ne!(sa.agent, sa.goal);
        }
    }

    #[test]
    fn validate_accepts_chain() {
        assert_eq!(chain().validate(), Ok(()));
    }

    #[test]
    fn validate_names_bad_row() {
        let mut spec = chain();
        spec.transition[1][0] = vec![0.0, 0.9];
        match spec.validate() {
            Err(MdpError::RowSum {
                state: 1,
                action: 0,
                sum,
            }) => assert!((sum - 0.9).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_names_gamma() {
        let spec = chain().with_gamma(1.2);
        assert_eq!(spec.validate(), Err(MdpError::Gamma(1.2)));
        assert!(spec.validate().unwrap_err().to_string().contains("gamma"));
    }

    #[test]
    fn json_round_trip() {
        let spec = chain();
        assert_eq!(FiniteMdpSpec::from_json(&spec.to_json()).unwrap(), spec);
    }

    #[test]
    fn properness() {
        let mut spec = chain();
        assert!(spec.is_proper());
        spec.transition[1][0] = vec![1.0, 0.0];
        assert!(!spec.is_proper());
    }
}
