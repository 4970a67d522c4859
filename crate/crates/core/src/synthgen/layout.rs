use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::N_ROIS;

const TILE_ROWS: usize = 8;
const DEFAULT_LAYOUT_JSON: &str = include_str!("../../data/atlas_layout.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRect {
    pub roi: usize,
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl TileRect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }
}

/// ROI → rectangle assignment on an H×W canvas. Even ROI indices (left
/// hemisphere) occupy the left half, odd indices the mirrored right half.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtlasLayout {
    pub height: usize,
    pub width: usize,
    pub tiles: Vec<TileRect>,
}

fn split_even(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i >= parts - total % parts))
        .collect()
}

impl AtlasLayout {
    /// Row-based tiling: each hemisphere half is cut into 8 bands, each band
    /// into 7 or 8 tiles of near-equal width.
    pub fn grid(height: usize, width: usize) -> Result<Self> {
        let per_half = N_ROIS / 2;
        let half = width / 2;
        let max_per_row = per_half.div_ceil(TILE_ROWS);
        if width % 2 != 0 || half < max_per_row || height < TILE_ROWS {
            return Err(Error::invalid(
                "atlas_layout",
                format!("canvas {height}x{width} too small; need even width ≥ {} and height ≥ {TILE_ROWS}", 2 * max_per_row),
            ));
        }
        let heights = split_even(height, TILE_ROWS);
        let counts: Vec<usize> = (0..TILE_ROWS)
            .map(|r| per_half / TILE_ROWS + usize::from(r < per_half % TILE_ROWS))
            .collect();
        let mut slots = Vec::with_capacity(per_half);
        let mut row0 = 0;
        for (r, &n) in counts.iter().enumerate() {
            let mut col0 = 0;
            for w in split_even(half, n) {
                slots.push((row0, col0, heights[r], w));
                col0 += w;
            }
            row0 += heights[r];
        }
        let mut tiles = Vec::with_capacity(N_ROIS);
        for roi in 0..N_ROIS {
            let (row, col, h, w) = slots[roi / 2];
            let col = if roi % 2 == 0 { col } else { width - col - w };
            tiles.push(TileRect {
                roi,
                row,
                col,
                height: h,
                width: w,
            });
        }
        let layout = Self { height, width, tiles };
        layout.validate()?;
        Ok(layout)
    }

    /// The shipped 64×64 layout.
    pub fn default_64() -> Self {
        serde_json::from_str(DEFAULT_LAYOUT_JSON).expect("shipped atlas layout parses")
    }

    /// Layout for a canvas: the shipped file at 64×64, the generator otherwise.
    pub fn for_canvas(height: usize, width: usize) -> Result<Self> {
        if (height, width) == (64, 64) {
            Ok(Self::default_64())
        } else {
            Self::grid(height, width)
        }
    }

    /// Checks ROI coverage and that tiles partition the canvas.
    pub fn validate(&self) -> Result<()> {
        if self.tiles.len() != N_ROIS {
            return Err(Error::invalid(
                "atlas_layout",
                format!("expected {N_ROIS} tiles, got {}", self.tiles.len()),
            ));
        }
        let mut owner = vec![usize::MAX; self.height * self.width];
        for (i, t) in self.tiles.iter().enumerate() {
            if t.roi != i {
                return Err(Error::invalid("atlas_layout", format!("tile {i} labelled ROI {}", t.roi)));
            }
            if t.height == 0 || t.width == 0 || t.row + t.height > self.height || t.col + t.width > self.width {
                return Err(Error::invalid("atlas_layout", format!("tile {i} outside canvas: {t:?}")));
            }
            let right_half = t.col >= self.width / 2;
            let left_half = t.col + t.width <= self.width / 2;
            if (i % 2 == 1 && !right_half) || (i % 2 == 0 && !left_half) {
                return Err(Error::invalid("atlas_layout", format!("ROI {i} in wrong hemisphere")));
            }
            for r in t.row..t.row + t.height {
                for c in t.col..t.col + t.width {
                    let o = &mut owner[r * self.width + c];
                    if *o != usize::MAX {
                        return Err(Error::invalid(
                            "atlas_layout",
                            format!("tiles {} and {i} overlap at ({r}, {c})", *o),
                        ));
                    }
                    *o = i;
                }
            }
        }
        if let Some(p) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::invalid(
                "atlas_layout",
                format!("pixel ({}, {}) not covered", p / self.width, p % self.width),
            ));
        }
        Ok(())
    }

    pub fn roi_at(&self, row: usize, col: usize) -> Option<usize> {
        self.tiles.iter().position(|t| t.contains(row, col))
    }

    /// Pixel → ROI index, row-major.
    pub fn pixel_owner(&self) -> Vec<usize> {
        let mut owner = vec![usize::MAX; self.height * self.width];
        for t in &self.tiles {
            for r in t.row..t.row + t.height {
                for c in t.col..t.col + t.width {
                    owner[r * self.width + c] = t.roi;
                }
            }
        }
        owner
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_layout_matches_generator() {
        let shipped = AtlasLayout::default_64();
        assert_eq!(shipped, AtlasLayout::grid(64, 64).unwrap());
        shipped.validate().unwrap();
        assert!(shipped.tiles.iter().all(|t| t.height >= 4 && t.width >= 4));
    }

    #[test]
    fn tile_lookup_round_trip() {
        let l = AtlasLayout::default_64();
        for t in &l.tiles {
            for r in t.row..t.row + t.height {
                for c in t.col..t.col + t.width {
                    assert_eq!(l.roi_at(r, c), Some(t.roi));
                }
            }
        }
    }

    #[test]
    fn small_canvases() {
        for (h, w) in [(16, 16), (32, 32), (48, 64)] {
            AtlasLayout::grid(h, w).unwrap().validate().unwrap();
        }
        assert!(AtlasLayout::grid(8, 12).is_err());
    }

    #[test]
    fn overlap_detected() {
        let mut l = AtlasLayout::default_64();
        l.tiles[2].col = l.tiles[0].col;
        l.tiles[2].row = l.tiles[0].row;
        assert!(l.validate().is_err());
    }
}
