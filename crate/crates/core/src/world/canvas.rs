use serde::{Deserialize, Serialize};

use super::WorldError;

pub const SIDE: usize = 16;
pub const CELLS: usize = SIDE * SIDE;

/// Grayscale image, row-major (`index = y * SIDE + x`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    data: Vec<f64>,
}

impl Canvas {
    pub fn new(data: Vec<f64>) -> Result<Self, WorldError> {
        if data.len() != CELLS {
            return Err(WorldError::BadLength {
                expected: CELLS,
                got: data.len(),
            });
        }
        Ok(Self { data })
    }

    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; CELLS],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * SIDE + x]
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; CELLS];
        for y in 0..SIDE {
            for x in 0..SIDE {
                out[x * SIDE + y] = self.data[y * SIDE + x];
            }
        }
        Self { data: out }
    }

    pub fn bit_eq(&self, other: &Canvas) -> bool {
        self.data
            .iter()
            .zip(&other.data)
            .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Binary structural condition. Construction rejects masks with fewer than
/// [`ConditionMap::MIN_ACTIVE`] or more than [`ConditionMap::MAX_ACTIVE`] cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionMap {
    cells: Vec<bool>,
}

impl ConditionMap {
    pub const MIN_ACTIVE: usize = 8;
    pub const MAX_ACTIVE: usize = 192;

    pub fn new(cells: Vec<bool>) -> Result<Self, WorldError> {
        if cells.len() != CELLS {
            return Err(WorldError::BadLength {
                expected: CELLS,
                got: cells.len(),
            });
        }
        let active = cells.iter().filter(|c| **c).count();
        if !(Self::MIN_ACTIVE..=Self::MAX_ACTIVE).contains(&active) {
            return Err(WorldError::DegenerateCondition {
                active,
                min: Self::MIN_ACTIVE,
                max: Self::MAX_ACTIVE,
            });
        }
        Ok(Self { cells })
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn active(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.cells[y * SIDE + x]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![false; CELLS];
        for y in 0..SIDE {
            for x in 0..SIDE {
                out[x * SIDE + y] = self.cells[y * SIDE + x];
            }
        }
        Self { cells: out }
    }

    pub fn iou(&self, other: &ConditionMap) -> f64 {
        mask_iou(&self.cells, &other.cells)
    }
}

pub(crate) fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
