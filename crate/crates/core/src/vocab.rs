//! Closed token vocabulary of the Grid-Sum task.
//!
//! Layout: five reserved tokens, number tokens `0..=MAX_NUMBER`, one token per
//! grid cell, four directions, four option letters and a few template words.

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const STEP: usize = 3;
pub const LATENT: usize = 4;

/// Largest value representable as a single number token.
pub const MAX_NUMBER: usize = 36;
const NUM_BASE: usize = 5;
const CELL_BASE: usize = NUM_BASE + MAX_NUMBER + 1;
pub const GRID_CELLS: usize = 16;
const DIR_BASE: usize = CELL_BASE + GRID_CELLS;
const LETTER_BASE: usize = DIR_BASE + 4;
pub const QUESTION_MARK: usize = LETTER_BASE + 4;
pub const HAS: usize = QUESTION_MARK + 1;
pub const SUM: usize = HAS + 1;

/// Number of distinct token ids.
pub const VOCAB_SIZE: usize = SUM + 1;

pub const N_OPTIONS: usize = 4;

/// Grid direction, in token order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn delta(self) -> (i32, i32) {
        match self {
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

pub fn number(n: usize) -> usize {
    assert!(n <= MAX_NUMBER, "number {n} has no token");
    NUM_BASE + n
}

pub fn cell(index: usize) -> usize {
    assert!(index < GRID_CELLS, "cell {index} outside the grid");
    CELL_BASE + index
}

pub fn direction(d: Direction) -> usize {
    DIR_BASE + d.index()
}

pub fn letter(option: usize) -> usize {
    assert!(option < N_OPTIONS, "option {option} out of range");
    LETTER_BASE + option
}

/// Inverse of [`letter`].
pub fn option_of(token: usize) -> Option<usize> {
    (LETTER_BASE..LETTER_BASE + N_OPTIONS)
        .contains(&token)
        .then(|| token - LETTER_BASE)
}

/// Inverse of [`number`].
pub fn value_of(token: usize) -> Option<usize> {
    (NUM_BASE..=NUM_BASE + MAX_NUMBER)
        .contains(&token)
        .then(|| token - NUM_BASE)
}

/// Human-readable token name.
pub fn describe(token: usize) -> String {
    match token {
        PAD => "<pad>".into(),
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        STEP => "<step>".into(),
        LATENT => "<latent>".into(),
        QUESTION_MARK => "?".into(),
        HAS => "has".into(),
        SUM => "sum".into(),
        t if value_of(t).is_some() => value_of(t).unwrap().to_string(),
        t if (CELL_BASE..DIR_BASE).contains(&t) => format!("c{}", t - CELL_BASE),
        t if (DIR_BASE..LETTER_BASE).contains(&t) => {
            ["up", "down", "left", "right"][t - DIR_BASE].into()
        }
        t if option_of(t).is_some() => ["A", "B", "C", "D"][option_of(t).unwrap()].into(),
        t => format!("#{t}"),
    }
}
