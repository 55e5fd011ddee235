use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Direction, GRID_CELLS};

pub const GRID_SIDE: usize = 4;

/// Patch marker, encoded as its code in the JSONL grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Marker {
    Start,
    Arrow(Direction),
    Plain,
}

impl Marker {
    pub const COUNT: usize = 6;

    pub fn code(self) -> usize {
        match self {
            Marker::Start => 0,
            Marker::Arrow(d) => 1 + d.index(),
            Marker::Plain => 5,
        }
    }

    pub fn from_code(code: usize) -> Option<Self> {
        match code {
            0 => Some(Marker::Start),
            1..=4 => Direction::from_index(code - 1).map(Marker::Arrow),
            5 => Some(Marker::Plain),
            _ => None,
        }
    }
}

/// 4x4 image: one `(digit, marker)` per cell, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[usize; 2]>", into = "Vec<[usize; 2]>")]
pub struct PatchGrid {
    digits: [u8; GRID_CELLS],
    markers: [Marker; GRID_CELLS],
}

impl PatchGrid {
    pub fn new(digits: [u8; GRID_CELLS], markers: [Marker; GRID_CELLS]) -> Result<Self> {
        if digits.iter().any(|d| *d > 9) {
            return Err(Error::Format("grid digit outside 0..=9".into()));
        }
        let starts = markers.iter().filter(|m| **m == Marker::Start).count();
        if starts != 1 {
            return Err(Error::Format(format!("grid needs exactly one start marker, found {starts}")));
        }
        Ok(Self { digits, markers })
    }

    pub fn digit(&self, cell: usize) -> usize {
        self.digits[cell] as usize
    }

    pub fn marker(&self, cell: usize) -> Marker {
        self.markers[cell]
    }

    pub fn start(&self) -> usize {
        self.markers.iter().position(|m| *m == Marker::Start).unwrap()
    }

    /// Digit codes in patch order.
    pub fn digit_codes(&self) -> Vec<usize> {
        self.digits.iter().map(|d| *d as usize).collect()
    }

    /// Marker codes in patch order.
    pub fn marker_codes(&self) -> Vec<usize> {
        self.markers.iter().map(|m| m.code()).collect()
    }

    pub(crate) fn set_digit(&mut self, cell: usize, digit: u8) {
        self.digits[cell] = digit;
    }
}

impl TryFrom<Vec<[usize; 2]>> for PatchGrid {
    type Error = Error;

    fn try_from(pairs: Vec<[usize; 2]>) -> Result<Self> {
        if pairs.len() != GRID_CELLS {
            return Err(Error::Format(format!("grid has {} cells, expected {GRID_CELLS}", pairs.len())));
        }
        let mut digits = [0u8; GRID_CELLS];
        let mut markers = [Marker::Plain; GRID_CELLS];
        for (i, [d, m]) in pairs.into_iter().enumerate() {
            digits[i] = u8::try_from(d).map_err(|_| Error::Format(format!("digit {d} out of range")))?;
            markers[i] = Marker::from_code(m).ok_or_else(|| Error::Format(format!("unknown marker code {m}")))?;
        }
        Self::new(digits, markers)
    }
}

impl From<PatchGrid> for Vec<[usize; 2]> {
    fn from(g: PatchGrid) -> Self {
        (0..GRID_CELLS).map(|i| [g.digit(i), g.marker(i).code()]).collect()
    }
}

/// Neighbour of `cell` in direction `d`, if it stays on the grid.
pub fn step(cell: usize, d: Direction) -> Option<usize> {
    let (dr, dc) = d.delta();
    let r = (cell / GRID_SIDE) as i32 + dr;
    let c = (cell % GRID_SIDE) as i32 + dc;
    let side = GRID_SIDE as i32;
    ((0..side).contains(&r) && (0..side).contains(&c)).then(|| (r * side + c) as usize)
}

/// Cells reached from `start` by moving `first` and then following the arrow
/// on each visited cell, `hops` moves in total. The start cell is excluded.
pub fn walk(grid: &PatchGrid, start: usize, first: Direction, hops: usize) -> Result<Vec<usize>> {
    let mut path = Vec::with_capacity(hops);
    let mut at = start;
    let mut dir = first;
    for h in 0..hops {
        at = step(at, dir).ok_or_else(|| Error::Spec(format!("hop {h} leaves the grid")))?;
        path.push(at);
        if h + 1 < hops {
            dir = match grid.marker(at) {
                Marker::Arrow(d) => d,
                other => return Err(Error::Spec(format!("cell {at} has no arrow ({other:?})"))),
            };
        }
    }
    Ok(path)
}
