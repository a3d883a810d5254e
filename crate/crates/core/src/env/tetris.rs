//! Scaled-down Tetris on a 6-wide board with pieces no larger than 2×2.
//!
//! The agent chooses the rotation of the current piece (four actions, in
//! 90° steps); the environment drops it at a uniformly chosen column. The
//! board is tracked as a solid column-height profile, so every row below
//! the lowest column is full and is cleared after each placement.
//!
//! States are quantized to `(stack level, surface pattern, piece)`:
//! the board is read as three column pairs whose height is the taller of
//! the two columns, the stack level is the tallest pair capped at
//! `tolerance + 2`, and the surface pattern records how far each pair sits
//! below the top:
//!
//! | pattern | L | M | R |
//! |---------|---|---|---|
//! | 0       | 0 | 0 | 0 |
//! | 1       | 1 | 0 | 0 |
//! | 2       | 0 | 1 | 0 |
//! | 3       | 0 | 0 | 1 |
//! | 4       | 1 | 1 | 0 |
//! | 5       | 1 | 0 | 1 |
//! | 6       | 0 | 1 | 1 |
//! | 7       | 0 | 2 | 0 |
//!
//! Offsets larger than one are clipped to one except for the middle well
//! `(0, 2, 0)`. Each quantized state is simulated from its canonical board,
//! in which both columns of a pair share the pair height. With 5 stack
//! levels, 8 patterns and 4 pieces there are 160 states and 640
//! state-action pairs.
//!
//! The raw reward is minus the stack height in excess of the tolerance
//! after line clears (heights capped at the board height), averaged over
//! the drop columns. Learners see it rescaled to `[0, 1]` as
//! `1 − excess / (board_height − tolerance)`.

use super::{Environment, TabularMdpSpec};
use crate::error::{Error, Result};

/// Pair offsets `(L, M, R)` below the stack level, indexed by pattern id.
pub const BOARD_PATTERNS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 1, 0],
    [1, 0, 1],
    [0, 1, 1],
    [0, 2, 0],
];

const BOARD_WIDTH: usize = 6;
const NUM_ROTATIONS: usize = 4;
const HEIGHT_TOLERANCE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Piece {
    Square,
    /// One row, two columns.
    HorizontalDomino,
    /// Two rows, one column.
    VerticalDomino,
    Single,
}

impl Piece {
    pub const ALL: [Piece; 4] = [
        Piece::Square,
        Piece::HorizontalDomino,
        Piece::VerticalDomino,
        Piece::Single,
    ];

    /// Per-column `(bottom, top)` occupancy of the piece after `rotation`
    /// quarter turns.
    pub fn profile(self, rotation: usize) -> Vec<(usize, usize)> {
        let quarter = rotation % 2 == 1;
        match (self, quarter) {
            (Piece::Square, _) => vec![(0, 2), (0, 2)],
            (Piece::Single, _) => vec![(0, 1)],
            (Piece::HorizontalDomino, false) | (Piece::VerticalDomino, true) => {
                vec![(0, 1), (0, 1)]
            }
            (Piece::HorizontalDomino, true) | (Piece::VerticalDomino, false) => vec![(0, 2)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniTetrisConfig {
    pub board_width: usize,
    pub board_height: usize,
    pub height_tolerance: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for MiniTetrisConfig {
    fn default() -> Self {
        Self {
            board_width: BOARD_WIDTH,
            board_height: 5,
            height_tolerance: HEIGHT_TOLERANCE,
            num_actions: NUM_ROTATIONS,
            horizon: 10,
            seed: 0,
        }
    }
}

impl MiniTetrisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.board_width != BOARD_WIDTH {
            return Err(Error::InvalidSpec(format!(
                "mini-Tetris board width is fixed at {BOARD_WIDTH}"
            )));
        }
        if self.num_actions != NUM_ROTATIONS {
            return Err(Error::InvalidSpec(format!(
                "mini-Tetris has exactly {NUM_ROTATIONS} rotation actions"
            )));
        }
        if self.height_tolerance != HEIGHT_TOLERANCE {
            return Err(Error::InvalidSpec(format!(
                "mini-Tetris height tolerance is fixed at {HEIGHT_TOLERANCE}"
            )));
        }
        if self.board_height < self.max_level() {
            return Err(Error::InvalidSpec(format!(
                "board height must be at least {}",
                self.max_level()
            )));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidSpec("horizon must be positive".into()));
        }
        Ok(())
    }

    /// Highest quantized stack level.
    pub fn max_level(&self) -> usize {
        self.height_tolerance + 2
    }

    pub fn num_levels(&self) -> usize {
        self.max_level() + 1
    }

    pub fn num_states(&self) -> usize {
        self.num_levels() * BOARD_PATTERNS.len() * Piece::ALL.len()
    }

    /// Largest possible excess height, the rescaling denominator.
    pub fn excess_scale(&self) -> f64 {
        (self.board_height - self.height_tolerance) as f64
    }
}

/// Decoded quantized state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TetrisState {
    pub level: usize,
    pub pattern: usize,
    pub piece: Piece,
}

#[derive(Debug, Clone)]
pub struct MiniTetris {
    config: MiniTetrisConfig,
    spec: TabularMdpSpec,
    raw_rewards: Vec<f64>,
}

impl MiniTetris {
    pub fn new(config: MiniTetrisConfig) -> Result<Self> {
        config.validate()?;
        let num_states = config.num_states();
        let num_actions = config.num_actions;
        let h = config.horizon;

        let mut kernel = vec![0.0; num_states * num_actions * num_states];
        let mut raw = vec![0.0; num_states * num_actions];
        for s in 0..num_states {
            let decoded = decode(&config, s);
            let board = canonical_board(&config, decoded.level, decoded.pattern);
            for a in 0..num_actions {
                let outcomes = placements(&config, &board, decoded.piece, a);
                let p_col = 1.0 / outcomes.len() as f64;
                let mut excess_sum = 0.0;
                for after in &outcomes {
                    excess_sum += excess_height(&config, after) as f64;
                    let (level, pattern) = quantize(&config, after);
                    for piece_id in 0..Piece::ALL.len() {
                        let next = encode(level, pattern, piece_id);
                        kernel[(s * num_actions + a) * num_states + next] +=
                            p_col / Piece::ALL.len() as f64;
                    }
                }
                raw[s * num_actions + a] = -excess_sum / outcomes.len() as f64;
            }
        }

        let scale = config.excess_scale();
        let rewards_one: Vec<f64> = raw.iter().map(|r| 1.0 + r / scale).collect();
        let mut transitions = Vec::with_capacity(h * kernel.len());
        let mut rewards = Vec::with_capacity(h * rewards_one.len());
        for _ in 0..h {
            transitions.extend_from_slice(&kernel);
            rewards.extend_from_slice(&rewards_one);
        }
        let mut initial = vec![0.0; num_states];
        for piece_id in 0..Piece::ALL.len() {
            initial[encode(0, 0, piece_id)] = 1.0 / Piece::ALL.len() as f64;
        }
        let spec = TabularMdpSpec::new(num_states, num_actions, h, transitions, rewards, initial)?;
        Ok(Self {
            config,
            spec,
            raw_rewards: raw,
        })
    }

    pub fn config(&self) -> &MiniTetrisConfig {
        &self.config
    }

    pub fn spec(&self) -> &TabularMdpSpec {
        &self.spec
    }

    pub fn decode(&self, state: usize) -> TetrisState {
        decode(&self.config, state)
    }

    /// Column heights of the canonical board behind `state`.
    pub fn board(&self, state: usize) -> Vec<usize> {
        let d = self.decode(state);
        canonical_board(&self.config, d.level, d.pattern)
    }

    /// Mean of minus the excess height over drop columns.
    pub fn raw_reward(&self, state: usize, action: usize) -> f64 {
        self.raw_rewards[state * self.config.num_actions + action]
    }

    /// Converts a return of rescaled rewards over `steps` steps back to the
    /// negative excess-height scale.
    pub fn to_raw_return(&self, value: f64, steps: usize) -> f64 {
        (value - steps as f64) * self.config.excess_scale()
    }
}

fn encode(level: usize, pattern: usize, piece: usize) -> usize {
    (level * BOARD_PATTERNS.len() + pattern) * Piece::ALL.len() + piece
}

fn decode(_config: &MiniTetrisConfig, state: usize) -> TetrisState {
    let piece = state % Piece::ALL.len();
    let rest = state / Piece::ALL.len();
    TetrisState {
        level: rest / BOARD_PATTERNS.len(),
        pattern: rest % BOARD_PATTERNS.len(),
        piece: Piece::ALL[piece],
    }
}

fn canonical_board(config: &MiniTetrisConfig, level: usize, pattern: usize) -> Vec<usize> {
    let offsets = BOARD_PATTERNS[pattern];
    let mut heights = vec![0; config.board_width];
    for (pair, off) in offsets.iter().enumerate() {
        let h = level.saturating_sub(*off);
        heights[2 * pair] = h;
        heights[2 * pair + 1] = h;
    }
    heights
}

/// Boards after dropping the rotated piece at every admissible column,
/// with full rows cleared and heights capped at the board height.
fn placements(
    config: &MiniTetrisConfig,
    board: &[usize],
    piece: Piece,
    rotation: usize,
) -> Vec<Vec<usize>> {
    let profile = piece.profile(rotation);
    let width = profile.len();
    (0..=config.board_width - width)
        .map(|col| {
            let mut heights = board.to_vec();
            let base = profile
                .iter()
                .enumerate()
                .map(|(dx, (bottom, _))| heights[col + dx].saturating_sub(*bottom))
                .max()
                .unwrap_or(0);
            for (dx, (_, top)) in profile.iter().enumerate() {
                heights[col + dx] = base + top;
            }
            let cleared = *heights.iter().min().unwrap_or(&0);
            for h in heights.iter_mut() {
                *h = (*h - cleared).min(config.board_height);
            }
            heights
        })
        .collect()
}

fn excess_height(config: &MiniTetrisConfig, heights: &[usize]) -> usize {
    heights
        .iter()
        .max()
        .copied()
        .unwrap_or(0)
        .saturating_sub(config.height_tolerance)
}

fn quantize(config: &MiniTetrisConfig, heights: &[usize]) -> (usize, usize) {
    let pairs: Vec<usize> = heights.chunks(2).map(|c| c[0].max(c[1])).collect();
    let top = *pairs.iter().max().unwrap_or(&0);
    let level = top.min(config.max_level());
    let offsets: Vec<usize> = pairs.iter().map(|p| (top - p).min(2)).collect();
    let pattern = if offsets == [0, 2, 0] {
        7
    } else {
        let clipped: Vec<usize> = offsets.iter().map(|o| (*o).min(1)).collect();
        BOARD_PATTERNS
            .iter()
            .position(|p| p[..] == clipped[..])
            .expect("every clipped offset triple with a zero is a listed pattern")
    };
    (level, pattern)
}

impl Environment for MiniTetris {
    fn num_states(&self) -> usize {
        self.spec.num_states()
    }

    fn num_actions(&self) -> usize {
        self.spec.num_actions()
    }

    fn horizon(&self) -> usize {
        self.spec.horizon()
    }

    fn reward(&self, h: usize, state: usize, action: usize) -> f64 {
        self.spec.reward(h, state, action)
    }

    fn sample_initial(&self, rng: &mut dyn rand::RngCore) -> usize {
        self.spec.sample_initial(rng)
    }

    fn sample_next(
        &self,
        h: usize,
        state: usize,
        action: usize,
        rng: &mut dyn rand::RngCore,
    ) -> usize {
        self.spec.sample_next(h, state, action, rng)
    }

    fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }

    fn tabular(&self) -> Option<&TabularMdpSpec> {
        Some(&self.spec)
    }
}
