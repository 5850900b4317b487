//! Throughput metrics, CSV reports and the engine-vs-oracle self test.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::driver::{compile, DriverError};
use crate::engine::{exec_program, CycleReport, EngineConfig, LayerCycles, Variant};
use crate::layout::{tile_tensor, BankConfig};
use crate::netmodel::NetworkModel;
use crate::oracle::{infer_ref, PlanarTensor};
use crate::packer::pack_network;
use crate::synth::{random_toy_network, ToyLimits};

/// Operations credited per MAC in GOPS figures.
pub const DEFAULT_OPS_PER_MAC: u32 = 1;

/// Cycles an ideal machine needs for the layer's MACs, recompute included.
pub fn ideal_cycles(dense_macs: u64, stripe_overhead_macs: u64, macs_per_cycle: u64) -> u64 {
    (dense_macs + stripe_overhead_macs).div_ceil(macs_per_cycle)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerThroughput {
    pub cycles: LayerCycles,
    pub ideal_cycles: u64,
    pub dense_ops: u64,
    /// Executed ops per second, in GOPS.
    pub gops: f64,
    /// Dense ops per second, skipped MACs counted as performed.
    pub effective_gops: f64,
    pub efficiency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub variant: Variant,
    pub clock_mhz: f64,
    pub ops_per_mac: u32,
    pub macs_per_cycle: u64,
    /// Engine layers in network order; host layers are omitted.
    pub layers: Vec<LayerThroughput>,
    pub total: LayerThroughput,
    pub mean_gops: f64,
    pub mean_effective_gops: f64,
    pub mean_efficiency: f64,
    /// Conv layers with the highest and lowest effective GOPS.
    pub best: Option<String>,
    pub worst: Option<String>,
}

fn throughput(c: &LayerCycles, clock_mhz: f64, ops_per_mac: u32, macs_per_cycle: u64) -> LayerThroughput {
    let ideal = ideal_cycles(c.dense_macs, c.stripe_overhead_macs, macs_per_cycle);
    let dense_ops = c.dense_macs * ops_per_mac as u64;
    let (gops, effective_gops, efficiency) = if c.total_cycles == 0 {
        (0.0, 0.0, 0.0)
    } else {
        let secs = c.total_cycles as f64 / (clock_mhz * 1e6);
        (
            (c.executed_macs * ops_per_mac as u64) as f64 / secs / 1e9,
            dense_ops as f64 / secs / 1e9,
            ideal as f64 / c.total_cycles as f64,
        )
    };
    LayerThroughput {
        cycles: c.clone(),
        ideal_cycles: ideal,
        dense_ops,
        gops,
        effective_gops,
        efficiency,
    }
}

/// Derives throughput figures from a cycle report.
pub fn report(c: &CycleReport, ops_per_mac: u32) -> ThroughputReport {
    let t = |l: &LayerCycles| throughput(l, c.clock_mhz, ops_per_mac, c.macs_per_cycle);
    let layers: Vec<LayerThroughput> = c
        .layers
        .iter()
        .filter(|l| matches!(l.kind.as_str(), "conv" | "pad" | "maxpool"))
        .map(t)
        .collect();
    let conv: Vec<&LayerThroughput> = layers.iter().filter(|l| l.cycles.is_conv()).collect();
    let mean = |f: fn(&LayerThroughput) -> f64| {
        if conv.is_empty() {
            0.0
        } else {
            conv.iter().map(|l| f(l)).sum::<f64>() / conv.len() as f64
        }
    };
    let pick = |better: fn(f64, f64) -> bool| {
        let mut best: Option<&LayerThroughput> = None;
        for l in &conv {
            if best.is_none_or(|b| better(l.effective_gops, b.effective_gops)) {
                best = Some(l);
            }
        }
        best.map(|l| l.cycles.name.clone())
    };
    ThroughputReport {
        variant: c.variant,
        clock_mhz: c.clock_mhz,
        ops_per_mac,
        macs_per_cycle: c.macs_per_cycle,
        total: t(&c.total()),
        mean_gops: mean(|l| l.gops),
        mean_effective_gops: mean(|l| l.effective_gops),
        mean_efficiency: mean(|l| l.efficiency),
        best: pick(|a, b| a > b),
        worst: pick(|a, b| a < b),
        layers,
    }
}

impl ThroughputReport {
    pub fn layer(&self, name: &str) -> Option<&LayerThroughput> {
        self.layers.iter().find(|l| l.cycles.name == name)
    }

    pub fn best_layer(&self) -> Option<&LayerThroughput> {
        self.best.as_deref().and_then(|n| self.layer(n))
    }

    pub fn worst_layer(&self) -> Option<&LayerThroughput> {
        self.worst.as_deref().and_then(|n| self.layer(n))
    }

    /// Writes the per-layer table followed by total, mean, best and worst.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_HEADER)?;
        for l in &self.layers {
            out.write_record(row(&l.cycles.name, l))?;
        }
        out.write_record(row("total", &self.total))?;
        let n = self.layers.iter().filter(|l| l.cycles.is_conv()).count().max(1) as f64;
        let conv = || self.layers.iter().filter(|l| l.cycles.is_conv());
        let avg = |f: fn(&LayerCycles) -> u64| format!("{:.1}", conv().map(|l| f(&l.cycles) as f64).sum::<f64>() / n);
        out.write_record([
            "mean_conv".to_string(),
            avg(|c| c.dense_macs),
            avg(|c| c.executed_macs),
            avg(|c| c.skipped_macs),
            avg(|c| c.stripe_overhead_macs),
            avg(|c| c.conv_cycles),
            avg(|c| c.unpack_cycles),
            avg(|c| c.padpool_cycles),
            avg(|c| c.fill_cycles),
            avg(|c| c.total_cycles),
            format!("{:.3}", self.mean_gops),
            format!("{:.3}", self.mean_effective_gops),
            format!("{:.4}", self.mean_efficiency),
        ])?;
        if let Some(b) = self.best_layer() {
            out.write_record(row(&format!("best:{}", b.cycles.name), b))?;
        }
        if let Some(b) = self.worst_layer() {
            out.write_record(row(&format!("worst:{}", b.cycles.name), b))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

pub const CSV_HEADER: [&str; 13] = [
    "layer",
    "dense_macs",
    "executed_macs",
    "skipped_macs",
    "stripe_overhead_macs",
    "conv_cycles",
    "unpack_cycles",
    "padpool_cycles",
    "fill_cycles",
    "total_cycles",
    "gops",
    "effective_gops",
    "efficiency",
];

fn row(label: &str, l: &LayerThroughput) -> [String; 13] {
    let c = &l.cycles;
    [
        label.to_string(),
        c.dense_macs.to_string(),
        c.executed_macs.to_string(),
        c.skipped_macs.to_string(),
        c.stripe_overhead_macs.to_string(),
        c.conv_cycles.to_string(),
        c.unpack_cycles.to_string(),
        c.padpool_cycles.to_string(),
        c.fill_cycles.to_string(),
        c.total_cycles.to_string(),
        format!("{:.3}", l.gops),
        format!("{:.3}", l.effective_gops),
        format!("{:.4}", l.efficiency),
    ]
}

/// Compiles and runs `m` on the engine and compares every layer's output
/// with the oracle. Returns a description of the first mismatch.
pub fn check_equivalence(
    m: &NetworkModel,
    image: &PlanarTensor,
    bank: &BankConfig,
    cfg: &EngineConfig,
) -> Result<(), String> {
    let packed = pack_network(m).map_err(|e| e.to_string())?;
    let program = compile(m, &packed, bank, cfg.instances).map_err(|e| e.to_string())?;
    let input = tile_tensor(&image.data, image.channels, image.width, image.height).map_err(|e| e.to_string())?;
    let run = exec_program(&program, &packed, m, cfg, &input).map_err(|e| e.to_string())?;
    let want = infer_ref(m, image).map_err(|e| e.to_string())?;
    for (k, (got, exp)) in run.activations.iter().zip(&want.activations).enumerate() {
        if &got.to_planar() != exp {
            return Err(format!("layer {} ({}) differs from the oracle", k, m.layers[k].name));
        }
    }
    if run.scores != want.scores {
        return Err("class scores differ".into());
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelftestSummary {
    pub trials: usize,
    pub passed: usize,
    pub failures: Vec<String>,
}

impl SelftestSummary {
    pub fn ok(&self) -> bool {
        self.passed == self.trials
    }
}

/// Bank capacity small enough to stripe most toy layers, falling back to
/// the default when a single tile row does not fit.
fn toy_bank(m: &NetworkModel, rng: &mut impl Rng) -> BankConfig {
    let cfg = BankConfig {
        num_banks: 4,
        tiles_per_bank: rng.gen_range(4..64),
    };
    match crate::driver::plan_stripes(m, &cfg) {
        Ok(_) => cfg,
        Err(DriverError::Plan(_)) => BankConfig::default(),
        Err(_) => cfg,
    }
}

/// Randomized engine-vs-oracle sweep over toy networks.
pub fn selftest(trials: usize, seed: u64) -> SelftestSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = SelftestSummary {
        trials,
        ..Default::default()
    };
    for t in 0..trials {
        let (m, image) = random_toy_network(&mut rng, ToyLimits::default());
        let bank = toy_bank(&m, &mut rng);
        let variant = if rng.gen_bool(0.5) { Variant::Opt512 } else { Variant::Opt256 };
        let mut cfg = EngineConfig::preset(variant);
        cfg.fifo_depth = rng.gen_range(1..=4);
        match check_equivalence(&m, &image, &bank, &cfg) {
            Ok(()) => s.passed += 1,
            Err(e) => s.failures.push(format!("trial {t}: {e}")),
        }
    }
    s
}
