//! Tiled feature-map storage.
//!
//! Feature maps are cut into 4x4 tiles, stored per channel as a row-major
//! grid of tiles. Values inside a tile are row-major as well, so intra-tile
//! index `4 * row + col`. Tiles that hang past the logical width or height
//! are zero-filled, and reads of tiles outside the grid return the zero tile.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::QVal;

pub const TILE_DIM: usize = 4;
pub const TILE_LEN: usize = TILE_DIM * TILE_DIM;

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("planar buffer holds {got} values, expected {expected} ({channels}x{height}x{width})")]
    SizeMismatch {
        got: usize,
        expected: usize,
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error("tile ({tx}, {ty}) of channel {channel} is outside the {cols}x{rows} grid")]
    OutOfGrid {
        channel: usize,
        tx: usize,
        ty: usize,
        cols: usize,
        rows: usize,
    },
    #[error("bank {bank} needs {tiles} tiles but holds only {capacity}")]
    BankCapacity {
        bank: usize,
        tiles: usize,
        capacity: usize,
    },
    #[error("bank plan needs {banks} banks to match {staging_units} staging units")]
    BankMismatch { banks: usize, staging_units: usize },
    #[error("malformed tile image: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Intra-tile index of (row, col).
#[inline]
pub const fn tile_index(row: usize, col: usize) -> usize {
    TILE_DIM * row + col
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tile(pub [QVal; TILE_LEN]);

impl Tile {
    pub const ZERO: Tile = Tile([QVal::ZERO; TILE_LEN]);

    pub fn get(&self, row: usize, col: usize) -> QVal {
        self.0[tile_index(row, col)]
    }

    pub fn set(&mut self, row: usize, col: usize, v: QVal) {
        self.0[tile_index(row, col)] = v;
    }

    pub fn nonzero_count(&self) -> usize {
        self.0.iter().filter(|v| !v.is_zero()).count()
    }
}

/// Multi-channel feature map in tiled storage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TiledTensor {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub tile_cols: usize,
    pub tile_rows: usize,
    tiles: Vec<Tile>,
}

impl TiledTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        let tile_cols = width.div_ceil(TILE_DIM);
        let tile_rows = height.div_ceil(TILE_DIM);
        TiledTensor {
            channels,
            width,
            height,
            tile_cols,
            tile_rows,
            tiles: vec![Tile::ZERO; channels * tile_cols * tile_rows],
        }
    }

    /// Storage index of tile (tx, ty) in channel `c`.
    #[inline]
    pub fn linear_index(&self, c: usize, tx: usize, ty: usize) -> usize {
        c * self.tile_rows * self.tile_cols + ty * self.tile_cols + tx
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    /// Tile at (tx, ty); anything outside the grid reads as zero.
    pub fn tile(&self, c: usize, tx: usize, ty: usize) -> Tile {
        if c < self.channels && tx < self.tile_cols && ty < self.tile_rows {
            self.tiles[self.linear_index(c, tx, ty)]
        } else {
            Tile::ZERO
        }
    }

    pub fn tile_mut(&mut self, c: usize, tx: usize, ty: usize) -> Result<&mut Tile, LayoutError> {
        if c >= self.channels || tx >= self.tile_cols || ty >= self.tile_rows {
            return Err(self.out_of_grid(c, tx, ty));
        }
        let i = self.linear_index(c, tx, ty);
        Ok(&mut self.tiles[i])
    }

    /// Logical value at (c, y, x); zero outside the logical extent.
    pub fn get(&self, c: usize, y: usize, x: usize) -> QVal {
        if y >= self.height || x >= self.width {
            return QVal::ZERO;
        }
        self.tile(c, x / TILE_DIM, y / TILE_DIM)
            .get(y % TILE_DIM, x % TILE_DIM)
    }

    fn out_of_grid(&self, c: usize, tx: usize, ty: usize) -> LayoutError {
        LayoutError::OutOfGrid {
            channel: c,
            tx,
            ty,
            cols: self.tile_cols,
            rows: self.tile_rows,
        }
    }

    /// Tiles of one channel restricted to a stripe.
    pub fn stripe_tile_count(&self, stripe: &Stripe) -> usize {
        stripe.num_tile_rows * self.tile_cols * self.channels
    }

    /// Clears every value outside the logical extent.
    pub fn clear_padding(&mut self) {
        let (w, h) = (self.width, self.height);
        for c in 0..self.channels {
            for ty in 0..self.tile_rows {
                for tx in 0..self.tile_cols {
                    let i = self.linear_index(c, tx, ty);
                    let t = &mut self.tiles[i];
                    for r in 0..TILE_DIM {
                        for q in 0..TILE_DIM {
                            if ty * TILE_DIM + r >= h || tx * TILE_DIM + q >= w {
                                t.set(r, q, QVal::ZERO);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Writes the tile image: five little-endian u32 header words
    /// (channels, width, height, tile_cols, tile_rows) then every tile in
    /// storage order as 16 sign-magnitude bytes.
    pub fn write_image<W: Write>(&self, mut w: W) -> Result<(), LayoutError> {
        for v in [
            self.channels,
            self.width,
            self.height,
            self.tile_cols,
            self.tile_rows,
        ] {
            let v = u32::try_from(v).map_err(|_| LayoutError::Image("dimension overflows u32".into()))?;
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.tiles.len() * TILE_LEN);
        for t in &self.tiles {
            buf.extend(t.0.iter().map(|v| v.to_byte()));
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_image<R: Read>(mut r: R) -> Result<Self, LayoutError> {
        let mut header = [0u8; 20];
        r.read_exact(&mut header)
            .map_err(|_| LayoutError::Image("truncated header".into()))?;
        let word = |i: usize| {
            u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap()) as usize
        };
        let (channels, width, height, tile_cols, tile_rows) =
            (word(0), word(1), word(2), word(3), word(4));
        if tile_cols != width.div_ceil(TILE_DIM) || tile_rows != height.div_ceil(TILE_DIM) {
            return Err(LayoutError::Image(format!(
                "tile grid {tile_cols}x{tile_rows} does not match {width}x{height}"
            )));
        }
        let n = channels
            .checked_mul(tile_cols)
            .and_then(|v| v.checked_mul(tile_rows))
            .ok_or_else(|| LayoutError::Image("tile count overflows".into()))?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != n * TILE_LEN {
            return Err(LayoutError::Image(format!(
                "expected {} tile bytes, found {}",
                n * TILE_LEN,
                body.len()
            )));
        }
        let tiles = body
            .chunks_exact(TILE_LEN)
            .map(|chunk| {
                let mut t = Tile::ZERO;
                for (dst, &b) in t.0.iter_mut().zip(chunk) {
                    *dst = QVal::from_byte(b);
                }
                t
            })
            .collect();
        Ok(TiledTensor {
            channels,
            width,
            height,
            tile_cols,
            tile_rows,
            tiles,
        })
    }
}

/// Tiles a channel-major, row-major planar buffer.
pub fn tile_tensor(
    planar: &[QVal],
    channels: usize,
    width: usize,
    height: usize,
) -> Result<TiledTensor, LayoutError> {
    let expected = channels * width * height;
    if planar.len() != expected {
        return Err(LayoutError::SizeMismatch {
            got: planar.len(),
            expected,
            channels,
            height,
            width,
        });
    }
    let mut t = TiledTensor::zeros(channels, height, width);
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                let v = planar[(c * height + y) * width + x];
                let i = t.linear_index(c, x / TILE_DIM, y / TILE_DIM);
                t.tiles[i].set(y % TILE_DIM, x % TILE_DIM, v);
            }
        }
    }
    Ok(t)
}

/// Inverse of [`tile_tensor`]; padding slots are dropped.
pub fn untile_tensor(t: &TiledTensor) -> Vec<QVal> {
    let mut out = Vec::with_capacity(t.channels * t.height * t.width);
    for c in 0..t.channels {
        for y in 0..t.height {
            for x in 0..t.width {
                out.push(t.get(c, y, x));
            }
        }
    }
    out
}

/// 8x8 block assembled from the 2x2 tile neighbourhood anchored at (tx, ty).
pub type Block = [[QVal; 2 * TILE_DIM]; 2 * TILE_DIM];

/// Reads the 8x8 pixel block at (4*tx, 4*ty). The anchor tile must lie in the
/// grid; its right and lower neighbours read as zero when past the edge.
pub fn read_block_2x2(t: &TiledTensor, c: usize, tx: usize, ty: usize) -> Result<Block, LayoutError> {
    if c >= t.channels || tx >= t.tile_cols || ty >= t.tile_rows {
        return Err(t.out_of_grid(c, tx, ty));
    }
    let mut block = [[QVal::ZERO; 2 * TILE_DIM]; 2 * TILE_DIM];
    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let tile = t.tile(c, tx + dx, ty + dy);
        for r in 0..TILE_DIM {
            for q in 0..TILE_DIM {
                block[dy * TILE_DIM + r][dx * TILE_DIM + q] = tile.get(r, q);
            }
        }
    }
    Ok(block)
}

/// Band of tile rows spanning the full width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stripe {
    pub first_tile_row: usize,
    pub num_tile_rows: usize,
}

impl Stripe {
    pub fn end(&self) -> usize {
        self.first_tile_row + self.num_tile_rows
    }
}

/// Splits `tile_rows` into consecutive stripes of at most `max_rows` rows.
pub fn partition_stripes(tile_rows: usize, max_rows: usize) -> Vec<Stripe> {
    let max_rows = max_rows.max(1);
    (0..tile_rows)
        .step_by(max_rows)
        .map(|first| Stripe {
            first_tile_row: first,
            num_tile_rows: max_rows.min(tile_rows - first),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankConfig {
    pub num_banks: usize,
    pub tiles_per_bank: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            num_banks: 4,
            tiles_per_bank: 1 << 20,
        }
    }
}

/// Channel-to-bank assignment with per-bank tile usage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BankPlan {
    pub channels: Vec<Vec<usize>>,
    pub tiles: Vec<usize>,
}

/// Bank (and staging unit) owning channel `c`.
#[inline]
pub fn bank_of(c: usize, banks: usize) -> usize {
    c % banks
}

/// Channels owned by each of `units` staging units, round-robin.
pub fn round_robin_channels(channels: usize, units: usize) -> Vec<Vec<usize>> {
    let mut lists = vec![Vec::new(); units];
    for c in 0..channels {
        lists[bank_of(c, units)].push(c);
    }
    lists
}

/// Assigns the tensor's channels to banks round-robin and checks capacity.
pub fn plan_banks(
    t: &TiledTensor,
    cfg: &BankConfig,
    staging_units: usize,
) -> Result<BankPlan, LayoutError> {
    if staging_units != cfg.num_banks || staging_units == 0 {
        return Err(LayoutError::BankMismatch {
            banks: cfg.num_banks,
            staging_units,
        });
    }
    let channels = round_robin_channels(t.channels, staging_units);
    let per_channel = t.tile_cols * t.tile_rows;
    let tiles: Vec<usize> = channels.iter().map(|l| l.len() * per_channel).collect();
    for (bank, &n) in tiles.iter().enumerate() {
        if n > cfg.tiles_per_bank {
            return Err(LayoutError::BankCapacity {
                bank,
                tiles: n,
                capacity: cfg.tiles_per_bank,
            });
        }
    }
    Ok(BankPlan { channels, tiles })
}
