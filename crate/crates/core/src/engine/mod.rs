//! The accelerator: functional execution of compiled programs and the cycle
//! model.
//!
//! Functional results come from units (staging, convolution, accumulator)
//! exchanging records over bounded FIFOs. Cycle counts come from the
//! per-instruction cost model below, which depends only on the program and
//! the packed weights, so [`estimate`] and [`exec_program`] agree exactly.
//!
//! Cost model, per conv instruction (one OFM tile, one filter group):
//! each staging unit spends `max(4, max nnz of the four filters)` cycles per
//! channel it owns; the instruction takes the slowest unit plus
//! `pipeline_fill`. Weight unpacking costs one cycle per packed entry per
//! staging unit once per stripe and only the part exceeding the stripe's
//! compute time is charged. A pad/pool instruction costs one cycle per group
//! of four channels, plus `pipeline_fill` once per layer. With two instances
//! a layer takes as long as its slower instance.

pub mod conv;
pub mod fifo;
pub mod padpool;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driver::{run_fc_host, ConvCode, DriverError, HostOp, LayerOp, PadPoolCode, Program};
use crate::layout::{untile_tensor, TiledTensor};
use crate::netmodel::{NetworkModel, Shape};
use crate::numerics::QVal;
use crate::oracle::PlanarTensor;
use crate::packer::{PackedLayer, PackedNetwork, MIN_GROUP_CYCLES};

pub use conv::steer;
pub use fifo::{Fifo, QueueOccupancy};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("engine fault in layer {layer} at {instr}: {msg}")]
    Fault { layer: String, instr: String, msg: String },
    #[error("deadlock in layer {layer} at {instr}; queues: {snapshot}")]
    Deadlock { layer: String, instr: String, snapshot: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Driver(#[from] DriverError),
}

/// Synthesized accelerator variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "16-unopt")]
    Unopt16,
    #[serde(rename = "256-unopt")]
    Unopt256,
    #[serde(rename = "256-opt")]
    Opt256,
    #[serde(rename = "512-opt")]
    Opt512,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Unopt16, Variant::Unopt256, Variant::Opt256, Variant::Opt512];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unopt16 => "16-unopt",
            Variant::Unopt256 => "256-unopt",
            Variant::Opt256 => "256-opt",
            Variant::Opt512 => "512-opt",
        }
    }

    pub fn clock_mhz(self) -> f64 {
        match self {
            Variant::Unopt16 | Variant::Unopt256 => 55.0,
            Variant::Opt256 => 150.0,
            Variant::Opt512 => 120.0,
        }
    }

    pub fn instances(self) -> usize {
        if self == Variant::Opt512 {
            2
        } else {
            1
        }
    }

    /// Staging units feeding convolution; 16-unopt has a single sub-module.
    pub fn staging_units(self) -> usize {
        if self == Variant::Unopt16 {
            1
        } else {
            4
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| EngineError::Config(format!("unknown variant {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub variant: Variant,
    pub staging_units: usize,
    pub macs_per_conv_unit: usize,
    pub instances: usize,
    pub fifo_depth: usize,
    pub pipeline_fill: u64,
    pub clock_mhz: f64,
    pub trace: bool,
}

pub const DEFAULT_PIPELINE_FILL: u64 = 12;
pub const DEFAULT_FIFO_DEPTH: usize = 4;

impl EngineConfig {
    pub fn preset(variant: Variant) -> Self {
        EngineConfig {
            variant,
            staging_units: variant.staging_units(),
            macs_per_conv_unit: 64,
            instances: variant.instances(),
            fifo_depth: DEFAULT_FIFO_DEPTH,
            pipeline_fill: DEFAULT_PIPELINE_FILL,
            clock_mhz: variant.clock_mhz(),
            trace: false,
        }
    }

    /// Peak MACs per cycle over all instances.
    pub fn macs_per_cycle(&self) -> u64 {
        let per_instance = if self.staging_units == 1 {
            16
        } else {
            self.staging_units * self.macs_per_conv_unit
        };
        (per_instance * self.instances) as u64
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(1..=2).contains(&self.instances) {
            return Err(EngineError::Config(format!("instances must be 1 or 2, got {}", self.instances)));
        }
        if self.staging_units != 1 && self.staging_units != 4 {
            return Err(EngineError::Config("staging units must be 1 or 4".into()));
        }
        if self.fifo_depth == 0 {
            return Err(EngineError::Config("fifo depth must be positive".into()));
        }
        if !(self.clock_mhz > 0.0 && self.clock_mhz.is_finite()) {
            return Err(EngineError::Config("clock must be positive".into()));
        }
        Ok(())
    }
}

/// Cycle and MAC accounting of one layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCycles {
    pub layer_index: usize,
    pub name: String,
    pub kind: String,
    pub conv_cycles: u64,
    pub unpack_cycles: u64,
    pub padpool_cycles: u64,
    pub fill_cycles: u64,
    pub total_cycles: u64,
    pub dense_macs: u64,
    pub executed_macs: u64,
    pub skipped_macs: u64,
    pub stripe_overhead_macs: u64,
    /// Refused FIFO pushes seen during functional execution.
    pub stall_events: u64,
}

impl LayerCycles {
    pub fn is_conv(&self) -> bool {
        self.kind == "conv"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub variant: Variant,
    pub clock_mhz: f64,
    pub macs_per_cycle: u64,
    pub layers: Vec<LayerCycles>,
}

impl CycleReport {
    pub fn total(&self) -> LayerCycles {
        let mut t = LayerCycles {
            name: "total".into(),
            kind: "total".into(),
            ..Default::default()
        };
        for l in &self.layers {
            t.conv_cycles += l.conv_cycles;
            t.unpack_cycles += l.unpack_cycles;
            t.padpool_cycles += l.padpool_cycles;
            t.fill_cycles += l.fill_cycles;
            t.total_cycles += l.total_cycles;
            t.dense_macs += l.dense_macs;
            t.executed_macs += l.executed_macs;
            t.skipped_macs += l.skipped_macs;
            t.stripe_overhead_macs += l.stripe_overhead_macs;
            t.stall_events += l.stall_events;
        }
        t
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCycles> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &LayerCycles> {
        self.layers.iter().filter(|l| l.is_conv())
    }
}

/// Per-layer constants of the conv cost model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvCost {
    /// Cycles of one instruction of each filter group, fill excluded.
    pub group_cycles: Vec<u64>,
    /// Nonzero weights of each filter group summed over channels.
    pub group_nnz: Vec<u64>,
    /// Unpack cycles of the busiest staging unit for one stripe.
    pub unpack_per_stripe: u64,
}

/// Cost of a group of four filters on a single 16-MAC sub-module.
fn serial_group_cycles(g: &crate::packer::PackedWeightGroup) -> u64 {
    (g.entry_count() as u64).max(MIN_GROUP_CYCLES as u64)
}

pub fn conv_cost(code: &ConvCode, layer: &PackedLayer, cfg: &EngineConfig) -> ConvCost {
    let fgs = layer.filter_groups;
    let mut group_cycles = Vec::with_capacity(fgs);
    let mut group_nnz = Vec::with_capacity(fgs);
    let mut unit_entries = vec![0u64; code.unit_channels.len()];
    let mut serial_entries = 0u64;
    for fg in 0..fgs {
        let mut worst = 0u64;
        let mut serial = 0u64;
        let mut nnz = 0u64;
        for (u, chans) in code.unit_channels.iter().enumerate() {
            let mut unit = 0u64;
            for &c in chans {
                let g = layer.group(fg, c as usize);
                unit += g.cycles() as u64;
                serial += serial_group_cycles(g);
                let e = g.entry_count() as u64;
                unit_entries[u] += e;
                serial_entries += e;
                nnz += e;
            }
            worst = worst.max(unit);
        }
        group_cycles.push(if cfg.staging_units == 1 { serial } else { worst });
        group_nnz.push(nnz);
    }
    let unpack_per_stripe = if cfg.staging_units == 1 {
        serial_entries
    } else {
        unit_entries.into_iter().max().unwrap_or(0)
    };
    ConvCost {
        group_cycles,
        group_nnz,
        unpack_per_stripe,
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct InstanceTime {
    conv: u64,
    fill: u64,
    unpack: u64,
    padpool: u64,
}

impl InstanceTime {
    fn total(&self) -> u64 {
        self.conv + self.fill + self.unpack + self.padpool
    }
}

/// Slowest instance, first on ties.
fn critical(times: &[InstanceTime]) -> InstanceTime {
    let mut best = InstanceTime::default();
    for t in times {
        if t.total() > best.total() {
            best = *t;
        }
    }
    best
}

fn conv_layer_cycles(
    li: usize,
    name: &str,
    code: &ConvCode,
    cost: &ConvCost,
    cfg: &EngineConfig,
    trace: &mut Option<Vec<String>>,
) -> LayerCycles {
    let ls = &code.stripes;
    let mut times = Vec::with_capacity(code.streams.len());
    let mut executed = 0u64;
    for (inst, stream) in code.streams.iter().enumerate() {
        let mut per_stripe = vec![(0u64, 0u64); ls.stripes.len()];
        for i in stream {
            let c = cost.group_cycles[i.filter_group as usize];
            let s = &mut per_stripe[i.stripe as usize];
            s.0 += c;
            s.1 += cfg.pipeline_fill;
            if !i.recompute {
                let pixels = (ls.valid_rows(i.ty as usize) * ls.valid_cols(i.tx as usize)) as u64;
                executed += cost.group_nnz[i.filter_group as usize] * pixels;
            }
            if let Some(t) = trace.as_mut() {
                t.push(format!(
                    "{name} i{inst} s{} CONV tile=({},{}) fg={} cycles={} fill={}{}",
                    i.stripe,
                    i.tx,
                    i.ty,
                    i.filter_group,
                    c,
                    cfg.pipeline_fill,
                    if i.recompute { " recompute" } else { "" }
                ));
            }
        }
        let mut t = InstanceTime::default();
        for &s in &code.instance_stripes[inst] {
            let (c, f) = per_stripe[s as usize];
            t.conv += c;
            t.fill += f;
            t.unpack += cost.unpack_per_stripe.saturating_sub(c + f);
        }
        times.push(t);
    }
    let t = critical(&times);
    LayerCycles {
        layer_index: li,
        name: name.to_string(),
        kind: "conv".into(),
        conv_cycles: t.conv,
        unpack_cycles: t.unpack,
        fill_cycles: t.fill,
        total_cycles: t.total(),
        dense_macs: ls.dense_macs,
        executed_macs: executed,
        skipped_macs: ls.dense_macs - executed,
        stripe_overhead_macs: ls.overhead_macs,
        ..Default::default()
    }
}

fn padpool_layer_cycles(
    li: usize,
    name: &str,
    kind: &str,
    code: &PadPoolCode,
    channels: usize,
    cfg: &EngineConfig,
    trace: &mut Option<Vec<String>>,
) -> LayerCycles {
    let per_instr = channels.div_ceil(padpool::PADPOOL_UNITS) as u64;
    let mut times = Vec::new();
    for (inst, tiles) in code.instance_tiles.iter().enumerate() {
        let mut t = InstanceTime::default();
        for &ti in tiles {
            let tp = &code.lowering.tiles[ti as usize];
            for ins in &tp.instrs {
                t.padpool += per_instr;
                if let Some(tr) = trace.as_mut() {
                    tr.push(format!(
                        "{name} i{inst} PADPOOL out=({},{}) {:?} -> {:?} cycles={per_instr}",
                        tp.out_tx, tp.out_ty, ins.src, ins.dst
                    ));
                }
            }
        }
        if !tiles.is_empty() {
            t.fill = cfg.pipeline_fill;
        }
        times.push(t);
    }
    let t = critical(&times);
    LayerCycles {
        layer_index: li,
        name: name.to_string(),
        kind: kind.to_string(),
        padpool_cycles: t.padpool,
        fill_cycles: t.fill,
        total_cycles: t.total(),
        ..Default::default()
    }
}

fn check_config(p: &Program, cfg: &EngineConfig) -> Result<(), EngineError> {
    cfg.validate()?;
    if p.instances != cfg.instances {
        return Err(EngineError::Config(format!(
            "program compiled for {} instance(s), engine configured for {}",
            p.instances, cfg.instances
        )));
    }
    Ok(())
}

fn packed_layer<'a>(packed: &'a PackedNetwork, li: usize, name: &str) -> Result<&'a PackedLayer, EngineError> {
    packed.layer(li).ok_or_else(|| EngineError::Fault {
        layer: name.to_string(),
        instr: "layer start".into(),
        msg: "missing weight stream".into(),
    })
}

/// Cycle report and optional trace lines from the cost model alone.
pub fn estimate_traced(
    p: &Program,
    packed: &PackedNetwork,
    cfg: &EngineConfig,
) -> Result<(CycleReport, Vec<String>), EngineError> {
    check_config(p, cfg)?;
    let mut trace = cfg.trace.then(Vec::new);
    let mut layers = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        let lc = match &l.op {
            LayerOp::Conv(code) => {
                let cost = conv_cost(code, packed_layer(packed, l.layer_index, &l.name)?, cfg);
                conv_layer_cycles(l.layer_index, &l.name, code, &cost, cfg, &mut trace)
            }
            LayerOp::PadPool(code) => {
                let kind = if l.input.len() < l.output.len() { "pad" } else { "maxpool" };
                let channels = match l.input {
                    Shape::Spatial { channels, .. } => channels,
                    Shape::Flat(_) => 1,
                };
                padpool_layer_cycles(l.layer_index, &l.name, kind, code, channels, cfg, &mut trace)
            }
            LayerOp::Host(op) => LayerCycles {
                layer_index: l.layer_index,
                name: l.name.clone(),
                kind: match op {
                    HostOp::Flatten => "flatten".into(),
                    HostOp::FullyConnected(_) => "fc".into(),
                },
                ..Default::default()
            },
        };
        layers.push(lc);
    }
    let report = CycleReport {
        variant: cfg.variant,
        clock_mhz: cfg.clock_mhz,
        macs_per_cycle: cfg.macs_per_cycle(),
        layers,
    };
    Ok((report, trace.unwrap_or_default()))
}

pub fn estimate(p: &Program, packed: &PackedNetwork, cfg: &EngineConfig) -> Result<CycleReport, EngineError> {
    let cfg = EngineConfig {
        trace: false,
        ..cfg.clone()
    };
    Ok(estimate_traced(p, packed, &cfg)?.0)
}

/// Activation produced by a layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Activation {
    Tiled(TiledTensor),
    Flat(Vec<QVal>),
}

impl Activation {
    pub fn to_planar(&self) -> PlanarTensor {
        match self {
            Activation::Tiled(t) => PlanarTensor {
                channels: t.channels,
                height: t.height,
                width: t.width,
                data: untile_tensor(t),
            },
            Activation::Flat(v) => PlanarTensor::flat(v.clone()),
        }
    }

    fn flatten(&self) -> Vec<QVal> {
        match self {
            Activation::Tiled(t) => untile_tensor(t),
            Activation::Flat(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EngineRun {
    /// Output of every layer, in order.
    pub activations: Vec<Activation>,
    /// Accumulators of the final fully connected layer, if any.
    pub scores: Vec<i32>,
    pub report: CycleReport,
    pub trace: Vec<String>,
}

/// Executes `p` on a tiled input image. Fully connected layers run on the
/// host with the model's quantized weights.
pub fn exec_program(
    p: &Program,
    packed: &PackedNetwork,
    m: &NetworkModel,
    cfg: &EngineConfig,
    input: &TiledTensor,
) -> Result<EngineRun, EngineError> {
    let (mut report, trace) = estimate_traced(p, packed, cfg)?;
    let Some(Shape::Spatial {
        channels,
        height,
        width,
    }) = p.layers.first().map(|l| l.input)
    else {
        return Err(EngineError::Config("program has no spatial input".into()));
    };
    if (input.channels, input.height, input.width) != (channels, height, width) {
        return Err(EngineError::Config(format!(
            "input {}x{}x{} does not match program input {channels}x{height}x{width}",
            input.channels, input.height, input.width
        )));
    }
    let mut cur = Activation::Tiled(input.clone());
    let mut activations = Vec::with_capacity(p.layers.len());
    let mut scores = Vec::new();
    for (k, l) in p.layers.iter().enumerate() {
        let next = match (&l.op, &cur) {
            (LayerOp::Conv(code), Activation::Tiled(ifm)) => {
                let layer = packed_layer(packed, l.layer_index, &l.name)?;
                let (ofm, stalls) = conv::exec_conv_layer(p, l, code, layer, cfg, ifm)?;
                report.layers[k].stall_events = stalls;
                Activation::Tiled(ofm)
            }
            (LayerOp::PadPool(code), Activation::Tiled(ifm)) => {
                Activation::Tiled(padpool::exec_padpool_layer(l, code, ifm)?)
            }
            (LayerOp::Host(HostOp::Flatten), a) => Activation::Flat(a.flatten()),
            (LayerOp::Host(HostOp::FullyConnected(spec)), a) => {
                let (w, b) = m.quantized_weights(l.layer_index).ok_or_else(|| EngineError::Fault {
                    layer: l.name.clone(),
                    instr: "host fc".into(),
                    msg: "no quantized weights".into(),
                })?;
                let out = run_fc_host(spec, w, b, &a.flatten())?;
                scores = out.acc;
                Activation::Flat(out.out)
            }
            _ => {
                return Err(EngineError::Fault {
                    layer: l.name.clone(),
                    instr: "layer start".into(),
                    msg: "engine layer needs a spatial input".into(),
                })
            }
        };
        activations.push(next.clone());
        cur = next;
    }
    Ok(EngineRun {
        activations,
        scores,
        report,
        trace,
    })
}
