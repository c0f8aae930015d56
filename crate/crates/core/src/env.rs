//! Deterministic key/door/treasure gridworlds and reward-shaping wrappers.
//!
//! Maps are plain ASCII (`#` wall, `.` floor, `S` start, `A` apple, `K` key,
//! `D` door, `T` treasure). The door blocks movement until the agent holds the
//! key; stepping into it with the key opens it permanently for the episode.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

pub const KEY_DOOR_TREASURE_MAP: &str = include_str!("../maps/key_door_treasure.txt");
pub const APPLE_KEY_DOOR_TREASURE_MAP: &str = include_str!("../maps/apple_key_door_treasure.txt");

pub const DEFAULT_TIME_LIMIT: usize = 50;
pub const DEFAULT_DELAY_PERIOD: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Usage(format!("action index {i} out of range 0..4")))
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    Wall,
    Floor,
    Apple,
    Key,
    Door,
    Treasure,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardTable {
    pub apple: f64,
    pub key: f64,
    pub door: f64,
    pub treasure: f64,
}

impl Default for RewardTable {
    fn default() -> Self {
        Self {
            apple: 1.0,
            key: 1.0,
            door: 1.0,
            treasure: 5.0,
        }
    }
}

pub type Pos = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    rows: usize,
    cols: usize,
    cells: Vec<Cell>,
    start: Pos,
    apples: Vec<Pos>,
    key: Option<Pos>,
    door: Option<Pos>,
    pub rewards: RewardTable,
    pub time_limit: usize,
}

impl GridSpec {
    pub fn parse(map: &str, rewards: RewardTable, time_limit: usize) -> Result<Self> {
        let lines: Vec<&str> = map
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.is_empty())
            .collect();
        if lines.is_empty() {
            return Err(Error::Map("map is empty".into()));
        }
        if time_limit == 0 {
            return Err(Error::Map("time limit must be positive".into()));
        }
        let cols = lines[0].chars().count();
        let rows = lines.len();
        let mut cells = Vec::with_capacity(rows * cols);
        let mut start = None;
        let (mut apples, mut keys, mut doors, mut treasures) = (vec![], vec![], vec![], 0usize);
        for (r, line) in lines.iter().enumerate() {
            if line.chars().count() != cols {
                return Err(Error::Map(format!(
                    "row {r} has {} columns, expected {cols} (map must be rectangular)",
                    line.chars().count()
                )));
            }
            for (c, ch) in line.chars().enumerate() {
                let cell = match ch {
                    '#' => Cell::Wall,
                    '.' => Cell::Floor,
                    'S' => {
                        if start.replace((r, c)).is_some() {
                            return Err(Error::Map("more than one start cell `S`".into()));
                        }
                        Cell::Floor
                    }
                    'A' => {
                        apples.push((r, c));
                        Cell::Apple
                    }
                    'K' => {
                        keys.push((r, c));
                        Cell::Key
                    }
                    'D' => {
                        doors.push((r, c));
                        Cell::Door
                    }
                    'T' => {
                        treasures += 1;
                        Cell::Treasure
                    }
                    other => return Err(Error::Map(format!("unexpected character {other:?} at row {r}, column {c}"))),
                };
                cells.push(cell);
            }
        }
        let start = start.ok_or_else(|| Error::Map("no start cell `S`".into()))?;
        if treasures == 0 {
            return Err(Error::Map("no treasure cell `T`".into()));
        }
        if keys.len() > 1 || doors.len() > 1 {
            return Err(Error::Map("at most one key and one door are supported".into()));
        }
        if apples.len() > 64 {
            return Err(Error::Map("at most 64 apples are supported".into()));
        }
        let spec = Self {
            rows,
            cols,
            cells,
            start,
            apples,
            key: keys.first().copied(),
            door: doors.first().copied(),
            rewards,
            time_limit,
        };
        spec.check_reachability()?;
        Ok(spec)
    }

    pub fn from_file(path: impl AsRef<Path>, rewards: RewardTable, time_limit: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, rewards, time_limit)
    }

    pub fn key_door_treasure() -> Self {
        Self::parse(KEY_DOOR_TREASURE_MAP, RewardTable::default(), DEFAULT_TIME_LIMIT).expect("bundled map is valid")
    }

    pub fn apple_key_door_treasure() -> Self {
        Self::parse(APPLE_KEY_DOOR_TREASURE_MAP, RewardTable::default(), DEFAULT_TIME_LIMIT)
            .expect("bundled map is valid")
    }

    /// The door must be the only way to the treasure, and both the key and the
    /// treasure must be reachable once the door is open.
    fn check_reachability(&self) -> Result<()> {
        let closed = self.flood(false);
        let open = self.flood(true);
        let treasure_cells = || (0..self.cells.len()).filter(|&i| self.cells[i] == Cell::Treasure);
        if let Some((r, c)) = self.key {
            if !closed[r * self.cols + c] {
                return Err(Error::Map("key is not reachable from the start".into()));
            }
        }
        if self.door.is_some() {
            if self.key.is_none() {
                return Err(Error::Map("map has a door but no key".into()));
            }
            if treasure_cells().any(|i| closed[i]) {
                return Err(Error::Map("a treasure is reachable without opening the door".into()));
            }
        }
        if !treasure_cells().any(|i| open[i]) {
            return Err(Error::Map("no treasure is reachable from the start".into()));
        }
        Ok(())
    }

    fn flood(&self, door_passable: bool) -> Vec<bool> {
        let mut seen = vec![false; self.cells.len()];
        let mut queue = VecDeque::from([self.start]);
        seen[self.start.0 * self.cols + self.start.1] = true;
        while let Some(p) = queue.pop_front() {
            for a in Action::ALL {
                let Some(q) = self.neighbor(p, a) else { continue };
                let i = q.0 * self.cols + q.1;
                let passable = match self.cells[i] {
                    Cell::Wall => false,
                    Cell::Door => door_passable,
                    _ => true,
                };
                if passable && !seen[i] {
                    seen[i] = true;
                    // treasure ends the episode, so it is never a waypoint
                    if self.cells[i] != Cell::Treasure {
                        queue.push_back(q);
                    }
                }
            }
        }
        seen
    }

    fn neighbor(&self, (r, c): Pos, a: Action) -> Option<Pos> {
        let (dr, dc) = a.delta();
        let r = r.checked_add_signed(dr)?;
        let c = c.checked_add_signed(dc)?;
        (r < self.rows && c < self.cols).then_some((r, c))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn start(&self) -> Pos {
        self.start
    }

    pub fn cell(&self, (r, c): Pos) -> Cell {
        self.cells[r * self.cols + c]
    }

    pub fn apples(&self) -> &[Pos] {
        &self.apples
    }

    pub fn key(&self) -> Option<Pos> {
        self.key
    }

    pub fn door(&self) -> Option<Pos> {
        self.door
    }

    /// Length of the encoded observation: one-hot position, key and door
    /// flags, and one flag per apple.
    pub fn obs_dim(&self) -> usize {
        self.rows * self.cols + 2 + self.apples.len()
    }

    /// Return of an episode that collects every rewarding object.
    pub fn full_collection_return(&self) -> f64 {
        let r = &self.rewards;
        let mut total = r.treasure + r.apple * self.apples.len() as f64;
        if self.key.is_some() {
            total += r.key;
        }
        if self.door.is_some() {
            total += r.door;
        }
        total
    }

    pub fn render(&self, state: &GridState) -> String {
        let mut out = String::with_capacity(self.rows * (self.cols + 1));
        for r in 0..self.rows {
            for c in 0..self.cols {
                let ch = if (r, c) == state.pos {
                    '@'
                } else {
                    match self.cell((r, c)) {
                        Cell::Wall => '#',
                        Cell::Floor => '.',
                        Cell::Apple => {
                            let i = self.apples.iter().position(|&p| p == (r, c)).unwrap();
                            if state.apple_collected(i) {
                                '.'
                            } else {
                                'A'
                            }
                        }
                        Cell::Key if state.has_key => '.',
                        Cell::Key => 'K',
                        Cell::Door if state.door_open => '.',
                        Cell::Door => 'D',
                        Cell::Treasure => 'T',
                    }
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

/// Mutable episode state.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridState {
    pub pos: Pos,
    pub has_key: bool,
    pub door_open: bool,
    /// Bit `i` set once apple `i` has been eaten.
    pub apples_collected: u64,
    pub treasure_collected: bool,
    pub step_count: usize,
    pub done: bool,
}

impl GridState {
    pub fn apple_collected(&self, i: usize) -> bool {
        self.apples_collected >> i & 1 == 1
    }

    /// Discrete identity used for visit counting: position plus all flags.
    pub fn key(&self) -> StateKey {
        StateKey {
            pos: self.pos,
            has_key: self.has_key,
            door_open: self.door_open,
            apples_collected: self.apples_collected,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey {
    pub pos: Pos,
    pub has_key: bool,
    pub door_open: bool,
    pub apples_collected: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepInfo {
    /// Reward produced by the environment itself this step.
    pub raw_reward: f64,
    /// Exploration bonus added on top, if any.
    pub bonus_reward: f64,
    /// Episode ended by the time limit rather than the treasure.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

pub fn encode_obs(state: &GridState, spec: &GridSpec) -> Vec<f64> {
    let mut obs = vec![0.0; spec.obs_dim()];
    encode_obs_into(state, spec, &mut obs);
    obs
}

pub fn encode_obs_into(state: &GridState, spec: &GridSpec, out: &mut [f64]) {
    out.fill(0.0);
    let n_cells = spec.rows * spec.cols;
    out[state.pos.0 * spec.cols + state.pos.1] = 1.0;
    out[n_cells] = f64::from(u8::from(state.has_key));
    out[n_cells + 1] = f64::from(u8::from(state.door_open));
    for i in 0..spec.apples.len() {
        out[n_cells + 2 + i] = f64::from(u8::from(state.apple_collected(i)));
    }
}

/// A single gridworld instance.
#[derive(Clone, Debug)]
pub struct GridWorld {
    spec: Arc<GridSpec>,
    state: GridState,
}

impl GridWorld {
    pub fn new(spec: Arc<GridSpec>) -> Self {
        let state = Self::initial_state(&spec);
        Self { spec, state }
    }

    fn initial_state(spec: &GridSpec) -> GridState {
        GridState {
            pos: spec.start,
            has_key: false,
            door_open: false,
            apples_collected: 0,
            treasure_collected: false,
            step_count: 0,
            done: false,
        }
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    pub fn state(&self) -> &GridState {
        &self.state
    }

    /// Restores the initial state. Transitions are deterministic, so the seed
    /// is accepted for interface stability only.
    pub fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.state = Self::initial_state(&self.spec);
        self.observation()
    }

    pub fn observation(&self) -> Vec<f64> {
        encode_obs(&self.state, &self.spec)
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.state.done {
            return Err(Error::Usage("step called on a finished episode; call reset first".into()));
        }
        let spec = &*self.spec;
        let s = &mut self.state;
        let mut reward = 0.0;
        if let Some(q) = spec.neighbor(s.pos, action) {
            match spec.cell(q) {
                Cell::Wall => {}
                Cell::Door if !s.door_open => {
                    if s.has_key {
                        s.door_open = true;
                        s.pos = q;
                        reward += spec.rewards.door;
                    }
                }
                Cell::Door | Cell::Floor => s.pos = q,
                Cell::Key => {
                    s.pos = q;
                    if !s.has_key {
                        s.has_key = true;
                        reward += spec.rewards.key;
                    }
                }
                Cell::Apple => {
                    s.pos = q;
                    let i = spec.apples.iter().position(|&p| p == q).expect("apple cell is indexed");
                    if !s.apple_collected(i) {
                        s.apples_collected |= 1 << i;
                        reward += spec.rewards.apple;
                    }
                }
                Cell::Treasure => {
                    s.pos = q;
                    s.treasure_collected = true;
                    reward += spec.rewards.treasure;
                }
            }
        }
        s.step_count += 1;
        let truncated = !s.treasure_collected && s.step_count >= spec.time_limit;
        s.done = s.treasure_collected || truncated;
        Ok(StepResult {
            observation: encode_obs(s, spec),
            reward,
            done: s.done,
            info: StepInfo {
                raw_reward: reward,
                bonus_reward: 0.0,
                truncated,
            },
        })
    }
}

/// Withholds rewards and releases their sum every `period` steps or at
/// episode end.
#[derive(Clone, Debug, PartialEq)]
pub struct DelayedReward {
    period: usize,
    accumulated: f64,
    steps: usize,
}

impl DelayedReward {
    pub fn new(period: usize) -> Result<Self> {
        if period == 0 {
            return Err(Error::Config("delayed reward period must be positive".into()));
        }
        Ok(Self {
            period,
            accumulated: 0.0,
            steps: 0,
        })
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn reset(&mut self) {
        self.accumulated = 0.0;
        self.steps = 0;
    }

    pub fn delayed_step(&mut self, mut inner: StepResult) -> StepResult {
        self.accumulated += inner.reward;
        self.steps += 1;
        if inner.done || self.steps.is_multiple_of(self.period) {
            inner.reward = self.accumulated;
            self.accumulated = 0.0;
        } else {
            inner.reward = 0.0;
        }
        if inner.done {
            self.steps = 0;
        }
        inner
    }
}

/// Tabular visit counts N(s) over full gridworld states.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VisitCounter {
    counts: HashMap<StateKey, u64>,
}

impl VisitCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self, key: &StateKey) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    pub fn n_states(&self) -> usize {
        self.counts.len()
    }

    /// Counts the visit to `next_state` and adds `beta / sqrt(N)` to the
    /// reward. `beta == 0` leaves the result untouched (no count either).
    pub fn bonus_step(&mut self, mut inner: StepResult, next_state: &GridState, beta: f64) -> StepResult {
        if beta == 0.0 {
            return inner;
        }
        let n = self.counts.entry(next_state.key()).or_insert(0);
        *n += 1;
        let bonus = beta / (*n as f64).sqrt();
        inner.reward += bonus;
        inner.info.bonus_reward += bonus;
        inner
    }
}
