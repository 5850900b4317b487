//! Offline zero-weight packing.
//!
//! Each k x k kernel slice (one filter, one input channel) is placed in a 4x4
//! weight tile at offsets `4*i + j`. Packing keeps only the nonzero weights as
//! (offset, weight) records in ascending offset order. Records for four
//! filters that run concurrently are grouped per input channel; the engine
//! spends `max(4, largest record count)` cycles on such a group.
//!
//! Binary layout of one layer stream:
//!
//! ```text
//! "ZSKP" | version u8 | layer u32 | in_channels u32 | filter_groups u32 | kernel u8
//! then per group, 4 x ( count u8 | count x (offset u8, weight u8) )
//! ```
//!
//! Integers are little-endian, weights are sign-magnitude bytes. Groups are
//! ordered filter-group outer, then channels by staging unit (unit 0 owns
//! channels 0, 4, 8, ...), matching the engine's consumption order. A packed
//! network file is a concatenation of layer streams.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{round_robin_channels, TILE_DIM, TILE_LEN};
use crate::netmodel::{LayerSpec, NetworkModel};
use crate::numerics::QVal;

pub const MAGIC: &[u8; 4] = b"ZSKP";
pub const VERSION: u8 = 1;
/// Filters computed concurrently.
pub const GROUP_FILTERS: usize = 4;
/// Staging units a layer's channels are spread over.
pub const STAGING_UNITS: usize = 4;
/// IFM preload floor: four tiles at one tile per cycle.
pub const MIN_GROUP_CYCLES: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum PackError {
    #[error("offset {offset} out of order after {prev} (offsets must strictly increase)")]
    OffsetOrder { prev: u8, offset: u8 },
    #[error("offset {0} outside the 4x4 tile")]
    OffsetRange(u8),
    #[error("zero-magnitude entry at offset {0}")]
    ZeroEntry(u8),
    #[error("tile has {0} entries, at most 16 allowed")]
    TooManyEntries(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported stream version {0}")]
    Version(u8),
    #[error("truncated stream")]
    Truncated,
    #[error("layer {0}: weights are not quantized")]
    Unquantized(String),
    #[error("layer {layer}: kernel {kernel} does not fit a 4x4 weight tile")]
    KernelTooLarge { layer: String, kernel: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WeightTile(pub [QVal; TILE_LEN]);

impl WeightTile {
    /// Places a row-major k x k kernel at offsets 4*i + j.
    pub fn from_kernel(kernel: &[QVal], k: usize) -> Self {
        assert!(k <= TILE_DIM && kernel.len() == k * k, "kernel must be k x k with k <= 4");
        let mut t = [QVal::ZERO; TILE_LEN];
        for i in 0..k {
            for j in 0..k {
                t[TILE_DIM * i + j] = kernel[i * k + j];
            }
        }
        WeightTile(t)
    }

    pub fn nonzero_count(&self) -> usize {
        self.0.iter().filter(|v| !v.is_zero()).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedEntry {
    pub offset: u8,
    pub weight: QVal,
}

/// Nonzero (offset, weight) records of one weight tile.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedWeightTile {
    pub entries: Vec<PackedEntry>,
}

impl PackedWeightTile {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<(), PackError> {
        if self.entries.len() > TILE_LEN {
            return Err(PackError::TooManyEntries(self.entries.len()));
        }
        let mut prev: Option<u8> = None;
        for e in &self.entries {
            if e.offset as usize >= TILE_LEN {
                return Err(PackError::OffsetRange(e.offset));
            }
            if e.weight.is_zero() {
                return Err(PackError::ZeroEntry(e.offset));
            }
            if let Some(p) = prev {
                if e.offset <= p {
                    return Err(PackError::OffsetOrder {
                        prev: p,
                        offset: e.offset,
                    });
                }
            }
            prev = Some(e.offset);
        }
        Ok(())
    }
}

pub fn pack_tile(w: &WeightTile) -> PackedWeightTile {
    PackedWeightTile {
        entries: w
            .0
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_zero())
            .map(|(i, &v)| PackedEntry {
                offset: i as u8,
                weight: v,
            })
            .collect(),
    }
}

pub fn unpack_tile(p: &PackedWeightTile) -> Result<WeightTile, PackError> {
    p.validate()?;
    let mut t = WeightTile::default();
    for e in &p.entries {
        t.0[e.offset as usize] = e.weight;
    }
    Ok(t)
}

/// Records of four concurrent filters for one input channel.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedWeightGroup {
    pub tiles: [PackedWeightTile; GROUP_FILTERS],
}

impl PackedWeightGroup {
    /// Cycles the group occupies a convolution unit.
    pub fn cycles(&self) -> usize {
        self.tiles
            .iter()
            .map(PackedWeightTile::len)
            .max()
            .unwrap_or(0)
            .max(MIN_GROUP_CYCLES)
    }

    pub fn entry_count(&self) -> usize {
        self.tiles.iter().map(PackedWeightTile::len).sum()
    }
}

/// Channel visiting order: unit 0's channels, then unit 1's, and so on.
pub fn channel_order(in_channels: usize) -> Vec<usize> {
    round_robin_channels(in_channels, STAGING_UNITS)
        .into_iter()
        .flatten()
        .collect()
}

/// Position of channel `c` in [`channel_order`].
pub fn channel_position(in_channels: usize, c: usize) -> usize {
    let unit = c % STAGING_UNITS;
    let before: usize = (0..unit)
        .map(|u| in_channels.saturating_sub(u).div_ceil(STAGING_UNITS))
        .sum();
    before + c / STAGING_UNITS
}

/// Packed weights of one conv layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedLayer {
    pub layer_index: u32,
    pub in_channels: usize,
    pub filter_groups: usize,
    pub kernel: usize,
    /// Stream order: filter group outer, then [`channel_order`].
    pub groups: Vec<PackedWeightGroup>,
}

impl PackedLayer {
    pub fn group(&self, filter_group: usize, channel: usize) -> &PackedWeightGroup {
        &self.groups[filter_group * self.in_channels + channel_position(self.in_channels, channel)]
    }

    pub fn entry_count(&self) -> usize {
        self.groups.iter().map(PackedWeightGroup::entry_count).sum()
    }

    pub fn out_channels_padded(&self) -> usize {
        self.filter_groups * GROUP_FILTERS
    }

    pub fn write<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(18 + self.groups.len() * 4 * 4);
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.extend_from_slice(&self.layer_index.to_le_bytes());
        buf.extend_from_slice(&(self.in_channels as u32).to_le_bytes());
        buf.extend_from_slice(&(self.filter_groups as u32).to_le_bytes());
        buf.push(self.kernel as u8);
        for g in &self.groups {
            for t in &g.tiles {
                buf.push(t.len() as u8);
                for e in &t.entries {
                    buf.push(e.offset);
                    buf.push(e.weight.to_byte());
                }
            }
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    /// Parses one layer stream from the front of `bytes`, returning the rest.
    pub fn read(bytes: &[u8]) -> Result<(PackedLayer, &[u8]), PackError> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(PackError::BadMagic(magic));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(PackError::Version(version));
        }
        let layer_index = r.u32()?;
        let in_channels = r.u32()? as usize;
        let filter_groups = r.u32()? as usize;
        let kernel = r.u8()? as usize;
        let n = in_channels
            .checked_mul(filter_groups)
            .ok_or(PackError::Truncated)?;
        // Each group needs at least four count bytes.
        if n.saturating_mul(GROUP_FILTERS) > bytes.len() {
            return Err(PackError::Truncated);
        }
        let mut groups = Vec::with_capacity(n);
        for _ in 0..n {
            let mut g = PackedWeightGroup::default();
            for t in g.tiles.iter_mut() {
                let count = r.u8()? as usize;
                if count > TILE_LEN {
                    return Err(PackError::TooManyEntries(count));
                }
                let raw = r.take(2 * count)?;
                t.entries = raw
                    .chunks_exact(2)
                    .map(|p| PackedEntry {
                        offset: p[0],
                        weight: QVal::from_byte(p[1]),
                    })
                    .collect();
                t.validate()?;
            }
            groups.push(g);
        }
        let layer = PackedLayer {
            layer_index,
            in_channels,
            filter_groups,
            kernel,
            groups,
        };
        Ok((layer, &bytes[r.pos..]))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PackError> {
        let end = self.pos.checked_add(n).ok_or(PackError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(PackError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, PackError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, PackError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Packed streams for every conv layer of a network.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedNetwork {
    pub layers: Vec<PackedLayer>,
}

impl PackedNetwork {
    pub fn layer(&self, index: usize) -> Option<&PackedLayer> {
        self.layers.iter().find(|l| l.layer_index as usize == index)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        for l in &self.layers {
            l.write(&mut v).expect("writing to a Vec cannot fail");
        }
        v
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, PackError> {
        let mut layers = Vec::new();
        while !bytes.is_empty() {
            let (l, rest) = PackedLayer::read(bytes)?;
            layers.push(l);
            bytes = rest;
        }
        Ok(PackedNetwork { layers })
    }
}

/// Packs a single conv layer's quantized weights.
pub fn pack_conv_layer(
    layer_index: usize,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    weights: &[QVal],
) -> PackedLayer {
    let kk = kernel * kernel;
    assert_eq!(weights.len(), out_channels * in_channels * kk);
    let filter_groups = out_channels.div_ceil(GROUP_FILTERS);
    let order = channel_order(in_channels);
    let mut groups = Vec::with_capacity(filter_groups * in_channels);
    for fg in 0..filter_groups {
        for &c in &order {
            let mut g = PackedWeightGroup::default();
            for (f, slot) in g.tiles.iter_mut().enumerate() {
                let o = fg * GROUP_FILTERS + f;
                if o < out_channels {
                    let base = (o * in_channels + c) * kk;
                    *slot = pack_tile(&WeightTile::from_kernel(&weights[base..base + kk], kernel));
                }
            }
            groups.push(g);
        }
    }
    PackedLayer {
        layer_index: layer_index as u32,
        in_channels,
        filter_groups,
        kernel,
        groups,
    }
}

/// Packs every conv layer; filters are padded up to a multiple of four.
pub fn pack_network(m: &NetworkModel) -> Result<PackedNetwork, PackError> {
    let mut layers = Vec::new();
    for (i, l) in m.layers.iter().enumerate() {
        let LayerSpec::Conv(c) = &l.spec else {
            continue;
        };
        if c.kernel > TILE_DIM {
            return Err(PackError::KernelTooLarge {
                layer: l.name.clone(),
                kernel: c.kernel,
            });
        }
        let (w, _) = m
            .quantized_weights(i)
            .ok_or_else(|| PackError::Unquantized(l.name.clone()))?;
        layers.push(pack_conv_layer(i, c.in_channels, c.out_channels, c.kernel, w));
    }
    Ok(PackedNetwork { layers })
}
