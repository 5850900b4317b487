//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zskip::driver::{compile, plan_stripes, ARRIA10_SX660};
use zskip::engine::{estimate, CycleReport, EngineConfig, Variant};
use zskip::layout::{tile_tensor, BankConfig, TiledTensor};
use zskip::metrics::{check_equivalence, report, selftest};
use zskip::netmodel::{vgg16, ConvSpec, Layer, LayerSpec, NetworkModel, ScaleMode};
use zskip::oracle::PlanarTensor;
use zskip::packer::{pack_conv_layer, pack_network, PackedLayer, PackedNetwork};
use zskip::synth::{prune_quantized, synthesize_weights, NnzDistribution};
use zskip::{LayerQuant, QVal};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn conv(name: &str, cin: usize, cout: usize, k: usize) -> Layer {
    Layer {
        name: name.into(),
        spec: LayerSpec::Conv(ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            quant: LayerQuant::new(1.0, 8, true).unwrap(),
            scale_mode: ScaleMode::Fixed,
        }),
    }
}

fn cycles(m: &NetworkModel, bank: &BankConfig, variant: Variant) -> CycleReport {
    let packed = pack_network(m).unwrap();
    let cfg = EngineConfig::preset(variant);
    let p = compile(m, &packed, bank, cfg.instances).unwrap();
    estimate(&p, &packed, &cfg).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let s = selftest(200, 2024);
    let took = start.elapsed();
    ensure(s.ok(), || format!("{}/{} passed, first failure: {:?}", s.passed, s.trials, s.failures.first()))?;
    ensure(took < Duration::from_secs(60), || format!("took {took:.1?}"))?;
    Ok(format!("{}/{} toy networks equal the oracle in {took:.1?}", s.passed, s.trials))
}

fn criterion_2() -> Outcome {
    // one 4x4 layer; every filter holds exactly n nonzeros
    let geom = NetworkModel::new((8, 20, 20), vec![conv("conv", 8, 8, 4)]).unwrap();
    let bank = BankConfig::default();
    let conv_cycles = |d: NnzDistribution, seed: u64| {
        cycles(&synthesize_weights(&geom, d, seed), &bank, Variant::Opt256).layers[0].conv_cycles
    };
    let dense = conv_cycles(NnzDistribution::FixedNnz(16), 1);
    let mut at_floor = 0.0;
    for n in 0..=16 {
        let c = conv_cycles(NnzDistribution::FixedNnz(n), n as u64 + 2);
        let expect_num = 16 - n.max(4) as u64;
        // reduction (dense - c)/dense must equal (16 - max(4,n))/16 exactly
        ensure((dense - c) * 16 == expect_num * dense, || {
            format!("nnz {n}: {c} cycles vs dense {dense}")
        })?;
        if n <= 4 {
            at_floor = 1.0 - c as f64 / dense as f64;
        }
    }
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in 0..40 {
        let d = NnzDistribution::sparsity(rng.gen_range(0.0..=1.0));
        let c = conv_cycles(d, 100 + t);
        worst = worst.max(1.0 - c as f64 / dense as f64);
    }
    ensure(worst <= 0.75 + 1e-12, || format!("random pruning reached {worst:.4}"))?;
    Ok(format!("reduction at <=4 nnz = {at_floor:.4}; max over 40 random prunings = {worst:.4}"))
}

fn criterion_3() -> Outcome {
    let geom = vgg16();
    let dense = cycles(&synthesize_weights(&geom, NnzDistribution::FixedNnz(9), 1), &ARRIA10_SX660, Variant::Opt512);
    let pruned = cycles(&synthesize_weights(&geom, NnzDistribution::FixedNnz(4), 2), &ARRIA10_SX660, Variant::Opt512);
    let (mut d, mut p) = (0u64, 0u64);
    for (a, b) in dense.conv_layers().zip(pruned.conv_layers()) {
        ensure(4 * a.conv_cycles == 9 * b.conv_cycles, || {
            format!("{}: {} vs {}", a.name, a.conv_cycles, b.conv_cycles)
        })?;
        d += a.conv_cycles;
        p += b.conv_cycles;
    }
    let speedup = d as f64 / p as f64;
    let reference = 138.0 / 61.0;
    ensure((speedup - reference).abs() / reference <= 0.01, || format!("speedup {speedup}"))?;
    Ok(format!("conv-only speedup {speedup:.4} on every layer; reference ratio {reference:.4}"))
}

fn criterion_4() -> Outcome {
    let plan = plan_stripes(&vgg16(), &ARRIA10_SX660).map_err(|e| e.to_string())?;
    let per: Vec<String> = plan
        .layers
        .iter()
        .map(|l| format!("{}={:.1}%({})", l.name, 100.0 * l.overhead_ratio(), l.stripes.len()))
        .collect();
    let mean = plan.mean_overhead_ratio();
    println!("    per-layer overhead (stripes): {}", per.join(" "));
    ensure((0.10..=0.20).contains(&mean), || format!("mean overhead {mean:.4}"))?;
    Ok(format!("mean striping overhead {:.2}%", 100.0 * mean))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let geom = vgg16();
    let dense = report(&cycles(&synthesize_weights(&geom, NnzDistribution::dense(), 1), &ARRIA10_SX660, Variant::Opt512), 1);
    let pruned = report(&cycles(&synthesize_weights(&geom, NnzDistribution::FixedNnz(4), 1), &ARRIA10_SX660, Variant::Opt512), 1);
    let best = pruned.best_layer().ok_or("no conv layers")?;
    let took = start.elapsed();
    ensure(dense.clock_mhz == 120.0, || format!("clock {}", dense.clock_mhz))?;
    ensure((30.0..=50.0).contains(&dense.mean_gops), || format!("dense mean {:.2} GOPS", dense.mean_gops))?;
    ensure((110.0..=160.0).contains(&best.effective_gops), || {
        format!("peak {:.2} GOPS on {}", best.effective_gops, best.cycles.name)
    })?;
    ensure(took < Duration::from_secs(300), || format!("took {took:.1?}"))?;
    Ok(format!(
        "dense mean {:.2} GOPS, pruned peak {:.2} effective GOPS on {} ({took:.1?})",
        dense.mean_gops, best.effective_gops, best.cycles.name
    ))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = EngineConfig::preset(Variant::Opt256);
    let mut cases = 0;
    for wh in 1..=4 {
        for ww in 1..=4 {
            for sh in 1..=4 {
                for sw in 1..=4 {
                    for _ in 0..10 {
                        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(wh..=13), rng.gen_range(ww..=13));
                        let m = NetworkModel::new(
                            (c, h, w),
                            vec![Layer {
                                name: "pool".into(),
                                spec: LayerSpec::MaxPool {
                                    window: (wh, ww),
                                    stride: (sh, sw),
                                },
                            }],
                        )
                        .map_err(|e| e.to_string())?;
                        let data = (0..c * h * w).map(|_| QVal::from_byte(rng.gen())).collect();
                        let img = PlanarTensor::new(c, h, w, data).unwrap();
                        check_equivalence(&m, &img, &BankConfig::default(), &cfg)
                            .map_err(|e| format!("window {wh}x{ww} stride {sh}x{sw} on {c}x{h}x{w}: {e}"))?;
                        cases += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{cases} pooling cases equal the oracle"))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t in 0..1000 {
        let (cin, cout, k) = (rng.gen_range(1..=12), rng.gen_range(1..=12), rng.gen_range(1..=4));
        let density = rng.gen_range(0.0..=1.0);
        let w: Vec<QVal> = (0..cin * cout * k * k)
            .map(|_| if rng.gen_bool(density) { QVal::from_byte(rng.gen()) } else { QVal::ZERO })
            .collect();
        let layer = pack_conv_layer(t, cin, cout, k, &w);
        let bytes = layer.to_bytes();
        let (back, rest) = PackedLayer::read(&bytes).map_err(|e| e.to_string())?;
        ensure(rest.is_empty() && back == layer && back.to_bytes() == bytes, || format!("packed case {t}"))?;
        let net = PackedNetwork {
            layers: vec![layer.clone(), layer],
        };
        ensure(PackedNetwork::from_bytes(&net.to_bytes()).ok() == Some(net), || format!("network case {t}"))?;

        let (c, h, wd) = (rng.gen_range(1..=6), rng.gen_range(1..=20), rng.gen_range(1..=20));
        let px: Vec<QVal> = (0..c * h * wd).map(|_| QVal::from_byte(rng.gen())).collect();
        let img = tile_tensor(&px, c, wd, h).map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        img.write_image(&mut buf).map_err(|e| e.to_string())?;
        let back = TiledTensor::read_image(&buf[..]).map_err(|e| e.to_string())?;
        let mut again = Vec::new();
        back.write_image(&mut again).map_err(|e| e.to_string())?;
        ensure(back == img && again == buf, || format!("image case {t}"))?;
    }
    let packed = pack_conv_layer(3, 5, 6, 3, &common::golden_weights());
    ensure(packed.to_bytes() == common::fixture("packed_layer.zskp"), || "packed golden differs".into())?;
    let mut img = Vec::new();
    tile_tensor(&common::golden_image(), 3, 6, 5)
        .unwrap()
        .write_image(&mut img)
        .map_err(|e| e.to_string())?;
    ensure(img == common::fixture("image.tiles"), || "image golden differs".into())?;
    Ok("1000 packed and 1000 image round trips bit-exact; golden files match".into())
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let (model, image) = common::write_toy_model(d);
    let runs: [(&str, Vec<String>); 2] = [
        (
            "toy",
            vec!["--model".into(), common::s(&model).into(), "--image".into(), common::s(&image).into(),
                 "--variant".into(), "512-opt".into(), "--bank-tiles".into(), "30".into()],
        ),
        (
            "vgg16",
            vec!["--model".into(), "vgg16".into(), "--variant".into(), "512-opt".into(),
                 "--synthetic-sparsity".into(), "0.6".into(), "--seed".into(), "9".into()],
        ),
    ];
    let mut sizes = Vec::new();
    for (name, args) in &runs {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let csv = d.join(format!("{name}{rep}.csv"));
            let trace = d.join(format!("{name}{rep}.trace"));
            let mut full: Vec<&str> = vec!["run"];
            full.extend(args.iter().map(String::as_str));
            full.extend(["--csv", common::s(&csv), "--trace", common::s(&trace)]);
            let out = common::zskip(&full);
            ensure(out.status.success(), || format!("{name}: {}", String::from_utf8_lossy(&out.stderr)))?;
            let c = std::fs::read(&csv).map_err(|e| e.to_string())?;
            let t = std::fs::read(&trace).map_err(|e| e.to_string())?;
            ensure(!c.is_empty() && !t.is_empty(), || format!("{name}: empty output"))?;
            outputs.push((c, t));
        }
        ensure(outputs[0] == outputs[1], || format!("{name}: outputs differ between runs"))?;
        sizes.push(format!("{name} csv {} B, trace {} B", outputs[0].0.len(), outputs[0].1.len()));
    }
    Ok(format!("byte-identical reruns ({})", sizes.join("; ")))
}

/// Random stack of pad + 3x3 conv layers with optional 2x2/2 pooling.
fn random_3x3_network(rng: &mut impl Rng) -> NetworkModel {
    let c0 = rng.gen_range(1..=16);
    let (h0, w0) = (rng.gen_range(4..=40), rng.gen_range(4..=40));
    let (mut c, mut h, mut w) = (c0, h0, w0);
    let mut layers = Vec::new();
    for n in 0..rng.gen_range(1..=3) {
        layers.push(Layer {
            name: format!("pad{n}"),
            spec: LayerSpec::Pad { border: 1 },
        });
        let cout = rng.gen_range(1..=24);
        layers.push(conv(&format!("conv{n}"), c, cout, 3));
        c = cout;
        if h >= 4 && w >= 4 && rng.gen_bool(0.5) {
            layers.push(Layer {
                name: format!("pool{n}"),
                spec: LayerSpec::MaxPool {
                    window: (2, 2),
                    stride: (2, 2),
                },
            });
            h /= 2;
            w /= 2;
        }
    }
    NetworkModel::new((c0, h0, w0), layers).expect("well formed")
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let variants = [Variant::Opt256, Variant::Opt512, Variant::Unopt256];
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let mut steps = 0;
    for t in 0..50 {
        let geom = random_3x3_network(&mut rng);
        let variant = variants[t % variants.len()];
        let bank = BankConfig {
            num_banks: 4,
            tiles_per_bank: rng.gen_range(40..400),
        };
        let bank = if plan_stripes(&geom, &bank).is_ok() { bank } else { BankConfig::default() };
        let mut m = synthesize_weights(&geom, NnzDistribution::dense(), t as u64);
        let dense = cycles(&m, &bank, variant);
        let mut prev = dense.total().total_cycles;
        for step in 0..6 {
            m = prune_quantized(&m, rng.gen_range(0.05..=0.6), &mut rng);
            let r = cycles(&m, &bank, variant);
            let total = r.total().total_cycles;
            ensure(total <= prev, || format!("network {t} step {step}: {prev} -> {total} cycles"))?;
            prev = total;
            for (a, b) in dense.conv_layers().zip(r.conv_layers()) {
                let s = a.total_cycles as f64 / b.total_cycles as f64;
                ensure((1.0..=2.25).contains(&s), || format!("network {t} step {step} {}: speedup {s}", a.name))?;
                lo = lo.min(s);
                hi = hi.max(s);
            }
            steps += 1;
        }
    }
    Ok(format!("{steps} pruning steps on 50 networks; layer speedups in [{lo:.3}, {hi:.3}]"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("oracle equivalence", criterion_1),
        ("zero-skip floor and ceiling", criterion_2),
        ("pruned peak speedup", criterion_3),
        ("striping overhead", criterion_4),
        ("throughput plausibility", criterion_5),
        ("pad/pool generality", criterion_6),
        ("format round trips", criterion_7),
        ("determinism", criterion_8),
        ("monotonicity", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS [{took:.1?}] {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL [{took:.1?}] {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
