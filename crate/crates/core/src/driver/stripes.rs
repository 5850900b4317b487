//! Stripe planning for conv layers.
//!
//! A conv layer whose IFM and OFM tiles do not fit the banks is split into
//! stripes of OFM tile rows. A stripe computing OFM rows `[a, b)` needs IFM
//! tile rows `[a, b]` (one halo row below, enough for k <= 4). Every stripe
//! except the last also recomputes the first OFM tile row of the next stripe
//! from its reloaded halo; those MACs are the striping overhead.

use serde::{Deserialize, Serialize};

use crate::layout::{partition_stripes, BankConfig, Stripe, TILE_DIM};
use crate::netmodel::{LayerSpec, NetworkModel, Shape};

use super::DriverError;

/// Calibrated bank preset for the Arria 10 SX660 target.
pub const ARRIA10_SX660: BankConfig = BankConfig {
    num_banks: 4,
    tiles_per_bank: 10_240,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkingSet {
    /// Largest per-bank IFM tile count, halo included.
    pub ifm_tiles: usize,
    /// Largest per-bank OFM tile count.
    pub ofm_tiles: usize,
    /// Dense weight tiles of the whole layer, held in weight scratchpad.
    pub weight_tiles: usize,
}

impl WorkingSet {
    pub fn bank_tiles(&self) -> usize {
        self.ifm_tiles + self.ofm_tiles
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStripes {
    pub layer_index: usize,
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub ifm_tile_rows: usize,
    pub ifm_tile_cols: usize,
    pub ofm_tile_rows: usize,
    pub ofm_tile_cols: usize,
    pub stripes: Vec<Stripe>,
    pub working_sets: Vec<WorkingSet>,
    /// Logical MAC count of the layer.
    pub dense_macs: u64,
    /// MACs spent recomputing halo rows.
    pub overhead_macs: u64,
}

impl LayerStripes {
    /// OFM tile rows computed by stripe `s`, recompute row included.
    pub fn computed_rows(&self, s: usize) -> std::ops::Range<usize> {
        let st = self.stripes[s];
        let extra = usize::from(s + 1 < self.stripes.len());
        st.first_tile_row..st.end() + extra
    }

    /// IFM tile rows a stripe must have on chip.
    pub fn ifm_rows(&self, s: usize) -> std::ops::Range<usize> {
        let r = self.computed_rows(s);
        r.start..(r.end + 1).min(self.ifm_tile_rows)
    }

    pub fn overhead_ratio(&self) -> f64 {
        if self.dense_macs == 0 {
            0.0
        } else {
            self.overhead_macs as f64 / self.dense_macs as f64
        }
    }

    /// Logical output rows inside OFM tile row `ty`.
    pub fn valid_rows(&self, ty: usize) -> usize {
        self.out_height.saturating_sub(ty * TILE_DIM).min(TILE_DIM)
    }

    pub fn valid_cols(&self, tx: usize) -> usize {
        self.out_width.saturating_sub(tx * TILE_DIM).min(TILE_DIM)
    }

    pub fn macs_per_pixel(&self) -> u64 {
        (self.in_channels * self.out_channels * self.kernel * self.kernel) as u64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StripePlan {
    pub layers: Vec<LayerStripes>,
}

impl StripePlan {
    pub fn layer(&self, layer_index: usize) -> Option<&LayerStripes> {
        self.layers.iter().find(|l| l.layer_index == layer_index)
    }

    /// Unweighted mean of per-layer overhead ratios.
    pub fn mean_overhead_ratio(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(LayerStripes::overhead_ratio).sum::<f64>() / self.layers.len() as f64
    }
}

/// Splits `rows` into `count` stripes whose computed row counts (recompute
/// row included) differ by at most one.
pub fn balanced_stripes(rows: usize, count: usize) -> Vec<Stripe> {
    let computed = rows + count - 1;
    let (base, extra) = (computed / count, computed % count);
    let mut first = 0;
    (0..count)
        .map(|s| {
            let c = base + usize::from(s < extra);
            let h = if s + 1 < count { c - 1 } else { rows - first };
            let st = Stripe {
                first_tile_row: first,
                num_tile_rows: h,
            };
            first += h;
            st
        })
        .collect()
}

/// Splits every conv layer into the fewest stripes that fit the banks,
/// balanced so that instances receive similar work.
pub fn plan_stripes(m: &NetworkModel, cfg: &BankConfig) -> Result<StripePlan, DriverError> {
    if cfg.num_banks == 0 {
        return Err(DriverError::Plan("bank config has no banks".into()));
    }
    let shapes = m.shapes()?;
    let mut layers = Vec::new();
    for (i, l) in m.layers.iter().enumerate() {
        let LayerSpec::Conv(c) = &l.spec else {
            continue;
        };
        let (Shape::Spatial { height: ih, width: iw, .. }, Shape::Spatial { height: oh, width: ow, .. }) =
            (shapes[i], shapes[i + 1])
        else {
            unreachable!("conv shapes are spatial");
        };
        let nb = cfg.num_banks;
        let ifm_tile_rows = ih.div_ceil(TILE_DIM);
        let ifm_tile_cols = iw.div_ceil(TILE_DIM);
        let ofm_tile_rows = oh.div_ceil(TILE_DIM);
        let ofm_tile_cols = ow.div_ceil(TILE_DIM);
        let ifm_per_row = c.in_channels.div_ceil(nb) * ifm_tile_cols;
        let ofm_per_row = c.out_channels.div_ceil(nb) * ofm_tile_cols;
        // working set of a stripe computing `rows` OFM tile rows
        let ws = |rows: usize| WorkingSet {
            ifm_tiles: ifm_per_row * (rows + 1).min(ifm_tile_rows),
            ofm_tiles: ofm_per_row * rows,
            weight_tiles: c.in_channels * c.out_channels,
        };
        let cap = cfg.tiles_per_bank;
        let max_rows = if ws(ofm_tile_rows).bank_tiles() <= cap {
            ofm_tile_rows
        } else {
            // non-final stripes compute one extra row
            let fit = (1..ofm_tile_rows).rev().find(|&r| ws(r + 1).bank_tiles() <= cap);
            fit.ok_or_else(|| {
                DriverError::Plan(format!(
                    "layer {}: a single-row stripe needs {} tiles per bank, capacity {}",
                    l.name,
                    ws(2.min(ofm_tile_rows)).bank_tiles(),
                    cap
                ))
            })?
        };
        let stripes = balanced_stripes(ofm_tile_rows, partition_stripes(ofm_tile_rows, max_rows).len());
        let mut ls = LayerStripes {
            layer_index: i,
            name: l.name.clone(),
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            out_height: oh,
            out_width: ow,
            ifm_tile_rows,
            ifm_tile_cols,
            ofm_tile_rows,
            ofm_tile_cols,
            working_sets: Vec::new(),
            stripes,
            dense_macs: 0,
            overhead_macs: 0,
        };
        ls.dense_macs = (oh * ow) as u64 * ls.macs_per_pixel();
        ls.working_sets = (0..ls.stripes.len())
            .map(|s| ws(ls.computed_rows(s).len()))
            .collect();
        ls.overhead_macs = ls.stripes[1..]
            .iter()
            .map(|st| (ls.valid_rows(st.first_tile_row) * ow) as u64 * ls.macs_per_pixel())
            .sum();
        layers.push(ls);
    }
    Ok(StripePlan { layers })
}
