//! Host-side compiler: turns a quantized model and its packed weights into
//! stripes, a DMA plan and per-instance instruction streams.

pub mod fc;
pub mod padpool;
pub mod stripes;

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{round_robin_channels, BankConfig, TILE_DIM};
use crate::netmodel::{ConvSpec, FcSpec, LayerSpec, NetError, NetworkModel, Shape};
use crate::numerics::MAX_MAG;
use crate::packer::{PackedNetwork, GROUP_FILTERS, STAGING_UNITS};

pub use fc::{run_fc_host, FcOutput};
pub use padpool::{lower_maxpool, lower_pad, PadPoolInstr, PadPoolLowering, Selector, TileRef};
pub use stripes::{plan_stripes, LayerStripes, StripePlan, WorkingSet, ARRIA10_SX660};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("stripe planning: {0}")]
    Plan(String),
    #[error("layer {layer}: no packed weight stream")]
    MissingStream { layer: String },
    #[error("layer {layer}: weights not quantized")]
    Unquantized { layer: String },
    #[error("layer {layer}: accumulator range {bound} exceeds 32 bits")]
    AccRange { layer: String, bound: u64 },
    #[error("instances must be 1 or 2, got {0}")]
    Instances(usize),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("program encoding: {0}")]
    Encode(#[from] serde_json::Error),
}

/// One OFM tile of one filter group, summed over all input channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvInstr {
    pub layer: u32,
    pub stripe: u32,
    pub tx: u32,
    pub ty: u32,
    pub filter_group: u32,
    /// Accumulator initial values of the group's four filters.
    pub bias: [i32; GROUP_FILTERS],
    /// The tile row belongs to the next stripe and is recomputed here.
    pub recompute: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvCode {
    pub spec: ConvSpec,
    pub stripes: LayerStripes,
    /// Channels owned by each staging unit.
    pub unit_channels: Vec<Vec<u32>>,
    /// Stripe indices assigned to each instance.
    pub instance_stripes: Vec<Vec<u32>>,
    /// Instruction stream of each instance.
    pub streams: Vec<Vec<ConvInstr>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadPoolCode {
    pub lowering: PadPoolLowering,
    /// Indices into `lowering.tiles` handled by each instance.
    pub instance_tiles: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum HostOp {
    Flatten,
    FullyConnected(FcSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerOp {
    Conv(ConvCode),
    PadPool(PadPoolCode),
    Host(HostOp),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCode {
    pub layer_index: usize,
    pub name: String,
    pub input: Shape,
    pub output: Shape,
    pub op: LayerOp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    In,
    Out,
}

/// Tile rows moved between DRAM and the banks. Listed, not timed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmaTransfer {
    pub layer: u32,
    pub stripe: u32,
    pub instance: u32,
    pub direction: Direction,
    pub tile_rows: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub instances: usize,
    pub bank: BankConfig,
    pub layers: Vec<LayerCode>,
    pub dma: Vec<DmaTransfer>,
}

impl Program {
    pub fn conv_instr_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.op {
                LayerOp::Conv(c) => c.streams.iter().map(Vec::len).sum(),
                _ => 0,
            })
            .sum()
    }

    pub fn padpool_instr_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.op {
                LayerOp::PadPool(p) => p.lowering.instr_count(),
                _ => 0,
            })
            .sum()
    }

    /// IFM tile rows resident for `stripe` of `layer` on `instance`.
    pub fn resident_rows(&self, layer: usize, stripe: usize, instance: usize) -> Option<Range<usize>> {
        self.dma
            .iter()
            .find(|d| {
                d.layer as usize == layer
                    && d.stripe as usize == stripe
                    && d.instance as usize == instance
                    && d.direction == Direction::In
            })
            .map(|d| d.tile_rows.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DriverError> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DriverError> {
        Ok(serde_json::from_slice(bytes)?)
    }

    /// Text listing, one instruction per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "program instances={} tiles_per_bank={}", self.instances, self.bank.tiles_per_bank);
        for l in &self.layers {
            let _ = writeln!(s, "layer {} {} {:?} -> {:?}", l.layer_index, l.name, l.input, l.output);
            match &l.op {
                LayerOp::Conv(c) => {
                    for (inst, stream) in c.streams.iter().enumerate() {
                        for i in stream {
                            let _ = writeln!(
                                s,
                                "  i{} CONV s{} tile=({},{}) fg={} bias={:?}{}",
                                inst,
                                i.stripe,
                                i.tx,
                                i.ty,
                                i.filter_group,
                                i.bias,
                                if i.recompute { " recompute" } else { "" }
                            );
                        }
                    }
                }
                LayerOp::PadPool(p) => {
                    for (inst, tiles) in p.instance_tiles.iter().enumerate() {
                        for &t in tiles {
                            for i in &p.lowering.tiles[t as usize].instrs {
                                let _ = writeln!(
                                    s,
                                    "  i{} PADPOOL {:?} -> {:?} masks={:04x?} sel={}",
                                    inst,
                                    i.src,
                                    i.dst,
                                    i.masks,
                                    selector_string(&i.selectors)
                                );
                            }
                        }
                    }
                }
                LayerOp::Host(op) => {
                    let _ = writeln!(s, "  HOST {op:?}");
                }
            }
        }
        for d in &self.dma {
            let _ = writeln!(
                s,
                "dma layer={} stripe={} i{} {:?} rows={}..{}",
                d.layer, d.stripe, d.instance, d.direction, d.tile_rows.start, d.tile_rows.end
            );
        }
        s
    }
}

fn selector_string(sel: &[Selector]) -> String {
    sel.iter()
        .map(|s| match s {
            Selector::Keep => '.',
            Selector::Max(k) => char::from(b'0' + k),
        })
        .collect()
}

/// Round-robin assignment of `n` items to `instances`.
pub fn round_robin(n: usize, instances: usize) -> Vec<Vec<u32>> {
    let mut v = vec![Vec::new(); instances];
    for i in 0..n {
        v[i % instances].push(i as u32);
    }
    v
}

/// Compiles a quantized model against its packed weights.
pub fn compile(
    m: &NetworkModel,
    packed: &PackedNetwork,
    cfg: &BankConfig,
    instances: usize,
) -> Result<Program, DriverError> {
    if !(1..=2).contains(&instances) {
        return Err(DriverError::Instances(instances));
    }
    let shapes = m.shapes()?;
    let plan = plan_stripes(m, cfg)?;
    let mut layers = Vec::with_capacity(m.layers.len());
    let mut dma = Vec::new();
    for (li, l) in m.layers.iter().enumerate() {
        let (input, output) = (shapes[li], shapes[li + 1]);
        let op = match &l.spec {
            LayerSpec::Conv(spec) => {
                let ls = plan.layer(li).expect("conv layer planned").clone();
                let bound = (MAX_MAG as u64).pow(2) * (spec.kernel * spec.kernel * spec.in_channels) as u64;
                if bound >= 1 << 31 {
                    return Err(DriverError::AccRange {
                        layer: l.name.clone(),
                        bound,
                    });
                }
                let stream = packed.layer(li).ok_or_else(|| DriverError::MissingStream {
                    layer: l.name.clone(),
                })?;
                if stream.in_channels != spec.in_channels
                    || stream.kernel != spec.kernel
                    || stream.filter_groups != spec.out_channels.div_ceil(GROUP_FILTERS)
                {
                    return Err(DriverError::Shape(format!("layer {}: packed stream geometry", l.name)));
                }
                let (_, bias) = m.quantized_weights(li).ok_or_else(|| DriverError::Unquantized {
                    layer: l.name.clone(),
                })?;
                let instance_stripes = round_robin(ls.stripes.len(), instances);
                let mut streams = vec![Vec::new(); instances];
                for (inst, ss) in instance_stripes.iter().enumerate() {
                    for &s in ss {
                        let s = s as usize;
                        let rows = ls.computed_rows(s);
                        dma.push(DmaTransfer {
                            layer: li as u32,
                            stripe: s as u32,
                            instance: inst as u32,
                            direction: Direction::In,
                            tile_rows: ls.ifm_rows(s),
                        });
                        dma.push(DmaTransfer {
                            layer: li as u32,
                            stripe: s as u32,
                            instance: inst as u32,
                            direction: Direction::Out,
                            tile_rows: ls.stripes[s].first_tile_row..ls.stripes[s].end(),
                        });
                        for ty in rows.clone() {
                            for tx in 0..ls.ofm_tile_cols {
                                for fg in 0..stream.filter_groups {
                                    let mut b = [0i32; GROUP_FILTERS];
                                    for (f, slot) in b.iter_mut().enumerate() {
                                        *slot = bias.get(fg * GROUP_FILTERS + f).copied().unwrap_or(0);
                                    }
                                    streams[inst].push(ConvInstr {
                                        layer: li as u32,
                                        stripe: s as u32,
                                        tx: tx as u32,
                                        ty: ty as u32,
                                        filter_group: fg as u32,
                                        bias: b,
                                        recompute: ty >= ls.stripes[s].end(),
                                    });
                                }
                            }
                        }
                    }
                }
                let unit_channels = round_robin_channels(spec.in_channels, STAGING_UNITS)
                    .into_iter()
                    .map(|v| v.into_iter().map(|c| c as u32).collect())
                    .collect();
                LayerOp::Conv(ConvCode {
                    spec: spec.clone(),
                    stripes: ls,
                    unit_channels,
                    instance_stripes,
                    streams,
                })
            }
            LayerSpec::Pad { border } => {
                let (h, w) = spatial_hw(&l.name, input)?;
                padpool_code(lower_pad(h, w, *border), instances)
            }
            LayerSpec::MaxPool { window, stride } => {
                let (h, w) = spatial_hw(&l.name, input)?;
                padpool_code(lower_maxpool(h, w, *window, *stride), instances)
            }
            LayerSpec::Flatten => LayerOp::Host(HostOp::Flatten),
            LayerSpec::FullyConnected(f) => LayerOp::Host(HostOp::FullyConnected(f.clone())),
        };
        layers.push(LayerCode {
            layer_index: li,
            name: l.name.clone(),
            input,
            output,
            op,
        });
    }
    Ok(Program {
        instances,
        bank: *cfg,
        layers,
        dma,
    })
}

fn spatial_hw(name: &str, s: Shape) -> Result<(usize, usize), DriverError> {
    match s {
        Shape::Spatial { height, width, .. } => Ok((height, width)),
        Shape::Flat(_) => Err(DriverError::Shape(format!("layer {name} needs a spatial input"))),
    }
}

/// Splits output tile rows into contiguous chunks, one per instance.
fn padpool_code(lowering: PadPoolLowering, instances: usize) -> LayerOp {
    let cols = lowering.out_width.div_ceil(TILE_DIM).max(1);
    let rows = lowering.tiles.len() / cols;
    let per = rows.div_ceil(instances);
    let instance_tiles = (0..instances)
        .map(|i| {
            let r = (i * per).min(rows)..((i + 1) * per).min(rows);
            (r.start * cols..r.end * cols).map(|t| t as u32).collect()
        })
        .collect();
    LayerOp::PadPool(PadPoolCode {
        lowering,
        instance_tiles,
    })
}
