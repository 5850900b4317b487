//! Command-line front end of the zero-skipping accelerator toolchain.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use zskip::driver::{compile, ARRIA10_SX660};
use zskip::engine::{estimate_traced, exec_program, CycleReport, EngineConfig, Variant};
use zskip::layout::BankConfig;
use zskip::metrics::{report, selftest, DEFAULT_OPS_PER_MAC};
use zskip::netmodel::{
    ingest_image, load_network, prune_magnitude, quantize_network, sparsity_report, vgg16, LayerSpec, LayerWeights, NetworkModel,
    PrunePlan, PruneTarget,
};
use zskip::packer::{pack_network, PackedNetwork};
use zskip::synth::{synthesize_weights, NnzDistribution};

#[derive(Parser)]
#[command(name = "zskip", version, about = "Zero-weight-skipping CNN accelerator toolchain")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Quantize a real-valued model to 8-bit sign+magnitude.
    Quantize {
        #[arg(long)]
        model: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Magnitude-prune conv and FC weights.
    Prune {
        #[arg(long)]
        model: String,
        /// Fraction of weights to zero in every layer.
        #[arg(long, conflicts_with = "threshold")]
        sparsity: Option<f64>,
        /// Zero every weight with |w| below this value.
        #[arg(long)]
        threshold: Option<f64>,
        /// Per-layer override, NAME=FRACTION.
        #[arg(long = "layer", value_parser = parse_layer_target)]
        layers: Vec<(String, f64)>,
        #[arg(long)]
        out: PathBuf,
        /// Write the sparsity report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Pack quantized conv weights into (offset, weight) streams.
    Pack {
        #[arg(long = "in", alias = "model")]
        input: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compile a model into an instruction program.
    Compile {
        #[arg(long)]
        model: String,
        /// Packed weights; packed from the model when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        hw: HwArgs,
        #[command(flatten)]
        synth: SynthArgs,
        /// Binary program output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Text listing output; stdout when neither output is given.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Compile, execute and report.
    Run {
        #[arg(long)]
        model: String,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Raw little-endian f32 image; without it only the cycle model runs.
        #[arg(long)]
        image: Option<PathBuf>,
        #[command(flatten)]
        hw: HwArgs,
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long, default_value_t = DEFAULT_OPS_PER_MAC)]
        ops_per_mac: u32,
        /// Per-instruction trace output.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// CSV output; stdout when absent.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Cycle report output (JSON) for later `report` runs.
        #[arg(long)]
        cycles: Option<PathBuf>,
    },
    /// Re-derive the CSV report from a stored cycle report.
    Report {
        #[arg(long)]
        cycles: PathBuf,
        #[arg(long, default_value_t = DEFAULT_OPS_PER_MAC)]
        ops_per_mac: u32,
        /// Override the clock used for GOPS figures.
        #[arg(long)]
        clock_mhz: Option<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Randomized engine-vs-oracle equivalence sweep.
    Selftest {
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write a built-in network geometry as a model file.
    Preset {
        #[arg(default_value = "vgg16")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct HwArgs {
    #[arg(long, default_value = "256-opt", value_parser = parse_variant)]
    variant: Variant,
    #[arg(long)]
    clock_mhz: Option<f64>,
    /// Tiles per bank; defaults to the arria10-sx660 preset.
    #[arg(long)]
    bank_tiles: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    fifo_depth: Option<usize>,
    #[arg(long)]
    pipeline_fill: Option<u64>,
}

impl HwArgs {
    fn engine(&self) -> EngineConfig {
        let mut cfg = EngineConfig::preset(self.variant);
        if let Some(c) = self.clock_mhz {
            cfg.clock_mhz = c;
        }
        if let Some(i) = self.instances {
            cfg.instances = i;
        }
        if let Some(d) = self.fifo_depth {
            cfg.fifo_depth = d;
        }
        if let Some(f) = self.pipeline_fill {
            cfg.pipeline_fill = f;
        }
        cfg
    }

    fn bank(&self) -> BankConfig {
        BankConfig {
            tiles_per_bank: self.bank_tiles.unwrap_or(ARRIA10_SX660.tiles_per_bank),
            ..ARRIA10_SX660
        }
    }
}

#[derive(Args, Clone)]
struct SynthArgs {
    /// Replace conv weights with seeded synthetic ones of this zero fraction.
    #[arg(long, conflicts_with = "synthetic_nnz")]
    synthetic_sparsity: Option<f64>,
    /// Replace conv weights with synthetic kernels of exactly N nonzeros.
    #[arg(long)]
    synthetic_nnz: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl SynthArgs {
    fn apply(&self, m: NetworkModel) -> NetworkModel {
        let dist = match (self.synthetic_sparsity, self.synthetic_nnz) {
            (Some(s), _) => NnzDistribution::sparsity(s),
            (_, Some(n)) => NnzDistribution::FixedNnz(n),
            _ => return m,
        };
        synthesize_weights(&m, dist, self.seed)
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: zskip::engine::EngineError| e.to_string())
}

fn parse_layer_target(s: &str) -> Result<(String, f64), String> {
    let (name, v) = s.split_once('=').ok_or("expected NAME=FRACTION")?;
    let f: f64 = v.parse().map_err(|_| format!("bad fraction {v}"))?;
    Ok((name.to_string(), f))
}

/// Loads a model file or manifest; `vgg16` names the built-in geometry.
fn load_model(name: &str) -> Result<NetworkModel> {
    if name == "vgg16" && !Path::new(name).exists() {
        return Ok(vgg16());
    }
    load_network(Path::new(name)).with_context(|| format!("loading model {name}"))
}

/// Quantizes real weights. Conv layers must end up with quantized weights;
/// FC layers may stay empty when only the cycle model runs.
fn ready_model(m: NetworkModel) -> Result<NetworkModel> {
    let conv_ready = m
        .layers
        .iter()
        .enumerate()
        .all(|(i, l)| !matches!(l.spec, LayerSpec::Conv(_)) || m.quantized_weights(i).is_some());
    let any_real = m.weights.iter().any(|w| matches!(w, Some(LayerWeights::Real { .. })));
    if conv_ready && !any_real {
        return Ok(m);
    }
    if m.weights.iter().all(Option::is_none) {
        bail!("model has no weights; pass --synthetic-sparsity or --synthetic-nnz");
    }
    Ok(quantize_network(&m)?)
}

fn packed_for(m: &NetworkModel, weights: Option<&Path>) -> Result<PackedNetwork> {
    match weights {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(PackedNetwork::from_bytes(&bytes)?)
        }
        None => Ok(pack_network(m)?),
    }
}

fn write_out(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => Ok(std::io::stdout().write_all(bytes)?),
    }
}

fn emit_report(c: &CycleReport, ops_per_mac: u32, csv: Option<&Path>) -> Result<()> {
    let r = report(c, ops_per_mac);
    write_out(csv, r.to_csv_string().as_bytes())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Quantize { model, out } => {
            let q = quantize_network(&load_model(&model)?)?;
            q.save(&out)?;
        }
        Cmd::Prune {
            model,
            sparsity,
            threshold,
            layers,
            out,
            report,
        } => {
            let mut plan = PrunePlan {
                default: sparsity
                    .map(PruneTarget::Sparsity)
                    .or(threshold.map(PruneTarget::Threshold)),
                ..Default::default()
            };
            for (name, f) in layers {
                plan.per_layer.insert(name, PruneTarget::Sparsity(f));
            }
            let (pruned, rep) = prune_magnitude(&load_model(&model)?, &plan)?;
            pruned.save(&out)?;
            if let Some(p) = report {
                fs::write(&p, serde_json::to_vec_pretty(&rep)?)?;
            }
        }
        Cmd::Pack { input, out } => {
            let m = ready_model(load_model(&input)?)?;
            let packed = pack_network(&m)?;
            fs::write(&out, packed.to_bytes()).with_context(|| format!("writing {}", out.display()))?;
            let rep = sparsity_report(&m);
            for l in rep.layers.iter().filter(|l| l.tile_histogram.len() == 17) {
                eprintln!("{}: {}/{} nonzero", l.name, l.nonzero, l.total);
            }
        }
        Cmd::Compile {
            model,
            weights,
            hw,
            synth,
            out,
            dump,
        } => {
            let m = ready_model(synth.apply(load_model(&model)?))?;
            let packed = packed_for(&m, weights.as_deref())?;
            let cfg = hw.engine();
            let p = compile(&m, &packed, &hw.bank(), cfg.instances)?;
            if let Some(o) = &out {
                fs::write(o, p.to_bytes()?).with_context(|| format!("writing {}", o.display()))?;
            }
            if dump.is_some() || out.is_none() {
                write_out(dump.as_deref(), p.dump().as_bytes())?;
            }
        }
        Cmd::Run {
            model,
            weights,
            image,
            hw,
            synth,
            ops_per_mac,
            trace,
            csv,
            cycles,
        } => {
            let m = ready_model(synth.apply(load_model(&model)?))?;
            let packed = packed_for(&m, weights.as_deref())?;
            let mut cfg = hw.engine();
            cfg.trace = trace.is_some();
            let p = compile(&m, &packed, &hw.bank(), cfg.instances)?;
            let (rep, lines) = match image {
                Some(img) => {
                    let input = ingest_image(&m, &img, &m.input_mean)?;
                    let r = exec_program(&p, &packed, &m, &cfg, &input)?;
                    if !r.scores.is_empty() {
                        let best = r
                            .scores
                            .iter()
                            .enumerate()
                            .max_by_key(|(i, s)| (**s, std::cmp::Reverse(*i)))
                            .map(|(i, _)| i)
                            .unwrap_or(0);
                        eprintln!("top class: {best}");
                    }
                    (r.report, r.trace)
                }
                None => estimate_traced(&p, &packed, &cfg)?,
            };
            if let Some(t) = &trace {
                let mut text = lines.join("\n");
                text.push('\n');
                fs::write(t, text).with_context(|| format!("writing {}", t.display()))?;
            }
            if let Some(c) = &cycles {
                fs::write(c, serde_json::to_vec_pretty(&rep)?)?;
            }
            emit_report(&rep, ops_per_mac, csv.as_deref())?;
        }
        Cmd::Report {
            cycles,
            ops_per_mac,
            clock_mhz,
            csv,
        } => {
            let bytes = fs::read(&cycles).with_context(|| format!("reading {}", cycles.display()))?;
            let mut rep: CycleReport = serde_json::from_slice(&bytes)?;
            if let Some(c) = clock_mhz {
                rep.clock_mhz = c;
            }
            emit_report(&rep, ops_per_mac, csv.as_deref())?;
        }
        Cmd::Selftest { trials, seed } => {
            let s = selftest(trials, seed);
            for f in &s.failures {
                println!("FAIL {f}");
            }
            println!("selftest: {}/{} trials passed", s.passed, s.trials);
            if !s.ok() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Preset { name, out } => {
            if name != "vgg16" {
                bail!("unknown preset {name}");
            }
            vgg16().save(&out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
