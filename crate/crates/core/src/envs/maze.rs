//! 2D point-mass maze on the unit square.
//!
//! The agent accelerates a particle among axis-aligned rectangular walls and
//! is rewarded for approaching (dense) or reaching (sparse) the active goal.
//! The goal alternates between two locations: after `swap_after` consecutive
//! steps inside the active goal, the other one becomes active.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    clamp_action, EnvError, ScheduleEntry, ScheduleKind, Transition, World, WorldSchedule,
};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            min: [x0.min(x1), y0.min(y1)],
            max: [x0.max(x1), y0.max(y1)],
        }
    }

    /// Strict interior test; points on the boundary are outside.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] > self.min[0] && p[0] < self.max[0] && p[1] > self.min[1] && p[1] < self.max[1]
    }

    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        let dx = (self.min[0] - p[0]).max(0.0).max(p[0] - self.max[0]);
        let dy = (self.min[1] - p[1]).max(0.0).max(p[1] - self.max[1]);
        dx.hypot(dy)
    }

    fn inflated(&self, margin: f64) -> Rect {
        Rect {
            min: [self.min[0] - margin, self.min[1] - margin],
            max: [self.max[0] + margin, self.max[1] + margin],
        }
    }

    fn overlaps(&self, other: &Rect) -> bool {
        self.min[0] < other.max[0]
            && other.min[0] < self.max[0]
            && self.min[1] < other.max[1]
            && other.min[1] < self.max[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// `-|p - goal| - 1{contact}`
    Dense,
    /// `1{inside goal} - 1{contact}`
    Sparse,
}

/// Layout generation and dynamics constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeParams {
    pub min_walls: usize,
    pub max_walls: usize,
    pub min_wall_len: f64,
    pub max_wall_len: f64,
    pub wall_thickness: f64,
    pub goal_radius: f64,
    pub dt: f64,
    pub max_speed: f64,
    pub swap_after: u32,
    /// Connectivity check resolution (cells per side).
    pub grid: usize,
    /// The two goal locations used by changing-worlds schedules.
    pub fixed_goals: [[f64; 2]; 2],
    pub start: [f64; 2],
    /// Distinct goal pairs cycled by novel-states schedules.
    pub novel_tasks: usize,
}

impl Default for MazeParams {
    fn default() -> Self {
        Self {
            min_walls: 2,
            max_walls: 4,
            min_wall_len: 0.35,
            max_wall_len: 0.65,
            wall_thickness: 0.06,
            goal_radius: 0.1,
            dt: 0.05,
            max_speed: 1.0,
            swap_after: 50,
            grid: 50,
            fixed_goals: [[0.15, 0.15], [0.85, 0.85]],
            start: [0.15, 0.85],
            novel_tasks: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeWorld {
    pub walls: Vec<Rect>,
    pub goals: [[f64; 2]; 2],
    pub goal_radius: f64,
    pub reward_mode: RewardMode,
    pub dt: f64,
    pub max_speed: f64,
    pub swap_after: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    /// Index of the active goal.
    pub goal: u8,
    pub steps_in_goal: u32,
}

impl MazeState {
    pub fn at(pos: [f64; 2]) -> Self {
        Self {
            pos,
            vel: [0.0; 2],
            goal: 0,
            steps_in_goal: 0,
        }
    }
}

impl MazeWorld {
    pub fn open(reward_mode: RewardMode, params: &MazeParams) -> Self {
        Self {
            walls: Vec::new(),
            goals: params.fixed_goals,
            goal_radius: params.goal_radius,
            reward_mode,
            dt: params.dt,
            max_speed: params.max_speed,
            swap_after: params.swap_after,
        }
    }

    pub fn active_goal(&self, state: &MazeState) -> [f64; 2] {
        self.goals[state.goal as usize & 1]
    }

    pub fn is_free(&self, p: [f64; 2]) -> bool {
        (0.0..=1.0).contains(&p[0])
            && (0.0..=1.0).contains(&p[1])
            && !self.walls.iter().any(|w| w.contains(p))
    }

    /// Move along one axis, stopping at the arena edge or the first wall hit.
    fn move_axis(&self, pos: &mut [f64; 2], vel: &mut [f64; 2], axis: usize) -> bool {
        let mut contact = false;
        let mut x = pos[axis] + vel[axis] * self.dt;
        if !(0.0..=1.0).contains(&x) {
            x = x.clamp(0.0, 1.0);
            vel[axis] = 0.0;
            contact = true;
        }
        // Walls are thicker than one step of travel, so the particle can only
        // end up inside a wall it entered from the side it came from.
        for _ in 0..=self.walls.len() {
            let mut p = *pos;
            p[axis] = x;
            let Some(wall) = self.walls.iter().find(|w| w.contains(p)) else {
                break;
            };
            x = if pos[axis] <= wall.min[axis] {
                wall.min[axis]
            } else if pos[axis] >= wall.max[axis] {
                wall.max[axis]
            } else if x - wall.min[axis] < wall.max[axis] - x {
                wall.min[axis]
            } else {
                wall.max[axis]
            };
            vel[axis] = 0.0;
            contact = true;
        }
        pos[axis] = x;
        contact
    }
}

impl World for MazeWorld {
    type State = MazeState;

    fn obs_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    /// Agent position followed by the active goal position.
    fn observe_into(&self, state: &MazeState, out: &mut [f64]) {
        let g = self.active_goal(state);
        out[..4].copy_from_slice(&[state.pos[0], state.pos[1], g[0], g[1]]);
    }

    fn transition(&self, state: &MazeState, action: &[f64]) -> Transition<MazeState> {
        let mut a = [0.0; 2];
        let clamped = clamp_action(action, 1.0, &mut a);
        let mut vel = [0.0; 2];
        for i in 0..2 {
            vel[i] = (state.vel[i] + a[i] * self.dt).clamp(-self.max_speed, self.max_speed);
        }
        let mut pos = state.pos;
        let contact_x = self.move_axis(&mut pos, &mut vel, 0);
        let contact_y = self.move_axis(&mut pos, &mut vel, 1);
        let contact = contact_x || contact_y;

        let goal = self.active_goal(state);
        let dist = (pos[0] - goal[0]).hypot(pos[1] - goal[1]);
        let inside = dist <= self.goal_radius;
        let penalty = if contact { 1.0 } else { 0.0 };
        let reward = match self.reward_mode {
            RewardMode::Dense => -dist - penalty,
            RewardMode::Sparse => f64::from(u8::from(inside)) - penalty,
        };

        let mut next = MazeState {
            pos,
            vel,
            goal: state.goal,
            steps_in_goal: if inside { state.steps_in_goal + 1 } else { 0 },
        };
        if next.steps_in_goal >= self.swap_after {
            next.goal ^= 1;
            next.steps_in_goal = 0;
        }
        Transition {
            next,
            reward,
            contact,
            clamped,
        }
    }

    fn reward_bounds(&self) -> (f64, f64) {
        match self.reward_mode {
            RewardMode::Dense => (-(2f64.sqrt() + 1.0), 0.0),
            RewardMode::Sparse => (-1.0, 1.0),
        }
    }

    /// Push a particle that finds itself inside a newly placed wall out
    /// through the nearest face, and stop it.
    fn reconcile(&self, mut state: MazeState) -> MazeState {
        for _ in 0..=self.walls.len() {
            let Some(wall) = self.walls.iter().find(|w| w.contains(state.pos)) else {
                break;
            };
            let p = state.pos;
            let exits = [
                (p[0] - wall.min[0], 0, wall.min[0]),
                (wall.max[0] - p[0], 0, wall.max[0]),
                (p[1] - wall.min[1], 1, wall.min[1]),
                (wall.max[1] - p[1], 1, wall.max[1]),
            ];
            let (_, axis, edge) = exits
                .into_iter()
                .filter(|&(_, _, edge)| (0.0..=1.0).contains(&edge))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .expect("wall lies inside the arena");
            state.pos[axis] = edge;
            state.vel = [0.0; 2];
        }
        state
    }
}

/// Grid flood fill: the free cells form one connected region and every
/// point in `required` lies in a free cell.
pub fn is_connected(walls: &[Rect], grid: usize, required: &[[f64; 2]]) -> bool {
    let h = 1.0 / grid as f64;
    let blocked = |i: usize, j: usize| {
        let cell = Rect::new(
            i as f64 * h,
            j as f64 * h,
            (i + 1) as f64 * h,
            (j + 1) as f64 * h,
        );
        walls.iter().any(|w| w.overlaps(&cell))
    };
    let mut free = vec![false; grid * grid];
    for i in 0..grid {
        for j in 0..grid {
            free[i * grid + j] = !blocked(i, j);
        }
    }
    let cell_of = |p: [f64; 2]| {
        let i = ((p[0] / h) as usize).min(grid - 1);
        let j = ((p[1] / h) as usize).min(grid - 1);
        i * grid + j
    };
    if required.iter().any(|&p| !free[cell_of(p)]) {
        return false;
    }
    let Some(start) = free.iter().position(|&f| f) else {
        return false;
    };
    let mut seen = vec![false; grid * grid];
    let mut stack = vec![start];
    seen[start] = true;
    let mut count = 0;
    while let Some(c) = stack.pop() {
        count += 1;
        let (i, j) = (c / grid, c % grid);
        let mut push = |ni: usize, nj: usize| {
            let n = ni * grid + nj;
            if free[n] && !seen[n] {
                seen[n] = true;
                stack.push(n);
            }
        };
        if i > 0 {
            push(i - 1, j);
        }
        if i + 1 < grid {
            push(i + 1, j);
        }
        if j > 0 {
            push(i, j - 1);
        }
        if j + 1 < grid {
            push(i, j + 1);
        }
    }
    count == free.iter().filter(|&&f| f).count()
}

const MAX_ATTEMPTS: usize = 10_000;

/// Random walls that keep every `(point, radius)` disk clear and leave the
/// free space connected.
pub fn generate_walls<R: Rng + ?Sized>(
    rng: &mut R,
    params: &MazeParams,
    keep_clear: &[([f64; 2], f64)],
) -> Result<Vec<Rect>, EnvError> {
    let required: Vec<[f64; 2]> = keep_clear.iter().map(|&(p, _)| p).collect();
    for _ in 0..MAX_ATTEMPTS {
        let n = rng.random_range(params.min_walls..=params.max_walls);
        let mut walls: Vec<Rect> = Vec::with_capacity(n);
        let mut tries = 0;
        while walls.len() < n && tries < 200 {
            tries += 1;
            let len = rng.random_range(params.min_wall_len..=params.max_wall_len);
            let t = params.wall_thickness;
            let cx = rng.random_range(0.1..0.9);
            let cy = rng.random_range(0.1..0.9);
            let wall = if rng.random_bool(0.5) {
                Rect::new(cx - len / 2.0, cy - t / 2.0, cx + len / 2.0, cy + t / 2.0)
            } else {
                Rect::new(cx - t / 2.0, cy - len / 2.0, cx + t / 2.0, cy + len / 2.0)
            };
            let wall = Rect {
                min: [wall.min[0].max(0.0), wall.min[1].max(0.0)],
                max: [wall.max[0].min(1.0), wall.max[1].min(1.0)],
            };
            let clear = keep_clear
                .iter()
                .all(|&(p, r)| wall.distance_to(p) > r + 0.05);
            let apart = walls.iter().all(|w| !w.inflated(0.08).overlaps(&wall));
            if clear && apart {
                walls.push(wall);
            }
        }
        if walls.len() == n && is_connected(&walls, params.grid, &required) {
            return Ok(walls);
        }
    }
    Err(EnvError::MazeGeneration(MAX_ATTEMPTS))
}

fn sample_free_point<R: Rng + ?Sized>(rng: &mut R, walls: &[Rect], clearance: f64) -> [f64; 2] {
    loop {
        let p = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        if walls.iter().all(|w| w.distance_to(p) > clearance) {
            return p;
        }
    }
}

/// Seeded maze schedule with one entry every `period` steps.
///
/// Novel states: the walls stay fixed and goal pairs from a pool of
/// `params.novel_tasks` pairs take turns. Changing worlds: the two goals stay
/// fixed and the walls are regenerated every period.
pub fn schedule_worlds(
    kind: ScheduleKind,
    period: u64,
    periods: usize,
    seed: u64,
    reward_mode: RewardMode,
    params: &MazeParams,
) -> Result<WorldSchedule<MazeWorld>, EnvError> {
    if period == 0 {
        return Err(EnvError::ZeroPeriod);
    }
    let mut rng = stream_rng(seed, Stream::Schedule, 0, 0);
    let clearance = params.goal_radius + 0.02;
    let base = MazeWorld::open(reward_mode, params);
    let entries = match kind {
        ScheduleKind::ChangingWorlds => (0..periods)
            .map(|i| {
                let mut keep = vec![
                    (params.fixed_goals[0], clearance),
                    (params.fixed_goals[1], clearance),
                ];
                if i == 0 {
                    keep.push((params.start, 0.05));
                }
                let walls = generate_walls(&mut rng, params, &keep)?;
                Ok(ScheduleEntry {
                    timestep: i as u64 * period,
                    task: i,
                    world: MazeWorld {
                        walls,
                        ..base.clone()
                    },
                })
            })
            .collect::<Result<Vec<_>, EnvError>>()?,
        ScheduleKind::NovelStates => {
            let walls = generate_walls(&mut rng, params, &[(params.start, 0.05)])?;
            let pool: Vec<[[f64; 2]; 2]> = (0..params.novel_tasks.max(1))
                .map(|_| loop {
                    let a = sample_free_point(&mut rng, &walls, clearance);
                    let b = sample_free_point(&mut rng, &walls, clearance);
                    if (a[0] - b[0]).hypot(a[1] - b[1]) >= 0.6
                        && is_connected(&walls, params.grid, &[a, b, params.start])
                    {
                        break [a, b];
                    }
                })
                .collect();
            (0..periods)
                .map(|i| ScheduleEntry {
                    timestep: i as u64 * period,
                    task: i % pool.len(),
                    world: MazeWorld {
                        walls: walls.clone(),
                        goals: pool[i % pool.len()],
                        ..base.clone()
                    },
                })
                .collect()
        }
    };
    Ok(WorldSchedule { entries })
}
