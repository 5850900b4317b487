//! Engine behaviour against the oracle and the cycle model examples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zskip::driver::compile;
use zskip::engine::{estimate, exec_program, EngineConfig, Variant, DEFAULT_PIPELINE_FILL};
use zskip::layout::{tile_tensor, BankConfig};
use zskip::metrics::{check_equivalence, report};
use zskip::netmodel::{vgg16, ConvSpec, Layer, LayerSpec, LayerWeights, NetworkModel, ScaleMode};
use zskip::numerics::{LayerQuant, QVal};
use zskip::oracle::{infer_ref, PlanarTensor};
use zskip::packer::pack_network;
use zskip::synth::{random_toy_network, synthesize_weights, NnzDistribution, ToyLimits};

fn conv_layer(name: &str, cin: usize, cout: usize, k: usize, shift: u32, relu: bool) -> Layer {
    Layer {
        name: name.into(),
        spec: LayerSpec::Conv(ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            quant: LayerQuant::new(1.0, shift, relu).unwrap(),
            scale_mode: ScaleMode::Fixed,
        }),
    }
}

fn single_conv(cin: usize, cout: usize, hw: usize, k: usize, kernels: &[Vec<i32>]) -> NetworkModel {
    let mut m = NetworkModel::new((cin, hw, hw), vec![conv_layer("conv", cin, cout, k, 0, false)]).unwrap();
    let weights = kernels.iter().flatten().map(|&v| QVal::from_i32(v)).collect();
    m.weights[0] = Some(LayerWeights::Quantized {
        weights,
        bias: vec![0; cout],
    });
    m
}

fn cycles_256(m: &NetworkModel) -> zskip::engine::CycleReport {
    let packed = pack_network(m).unwrap();
    let p = compile(m, &packed, &BankConfig::default(), 1).unwrap();
    estimate(&p, &packed, &EngineConfig::preset(Variant::Opt256)).unwrap()
}

#[test]
fn delta_kernel_copies_input_in_max4_plus_fill() {
    let m = single_conv(1, 1, 4, 1, &[vec![1]]);
    let data: Vec<QVal> = (0..16).map(|v| QVal::from_i32(v * 9 - 60)).collect();
    let img = PlanarTensor::new(1, 4, 4, data.clone()).unwrap();
    let packed = pack_network(&m).unwrap();
    let cfg = EngineConfig::preset(Variant::Opt256);
    let p = compile(&m, &packed, &BankConfig::default(), 1).unwrap();
    let run = exec_program(&p, &packed, &m, &cfg, &tile_tensor(&data, 1, 4, 4).unwrap()).unwrap();
    assert_eq!(run.activations[0].to_planar(), img);
    let l = &run.report.layers[0];
    assert_eq!(l.conv_cycles + l.fill_cycles, 4 + DEFAULT_PIPELINE_FILL);
}

#[test]
fn dense_3x3_four_filters_costs_nine_plus_fill() {
    let m = single_conv(1, 4, 6, 3, &vec![vec![1; 9]; 4]);
    let r = cycles_256(&m);
    assert_eq!(r.layers[0].conv_cycles, 9);
    assert_eq!(r.layers[0].fill_cycles, DEFAULT_PIPELINE_FILL);
}

#[test]
fn sparse_filters_wait_for_the_densest() {
    // nnz {9, 2, 5, 1}
    let mut ks = vec![vec![1; 9], vec![0; 9], vec![0; 9], vec![0; 9]];
    ks[1][..2].fill(3);
    ks[2][..5].fill(-2);
    ks[3][8] = 5;
    let r = cycles_256(&single_conv(1, 4, 6, 3, &ks));
    assert_eq!(r.layers[0].conv_cycles, 9);
    assert_eq!(r.layers[0].executed_macs, 17 * 16);
    assert_eq!(r.layers[0].dense_macs, 36 * 16);
}

#[test]
fn all_zero_group_costs_the_floor() {
    let r = cycles_256(&single_conv(1, 4, 6, 3, &vec![vec![0; 9]; 4]));
    assert_eq!(r.layers[0].conv_cycles, 4);
    assert_eq!(r.layers[0].executed_macs, 0);
}

#[test]
fn toy_pad_conv_matches_oracle() {
    let mut m = NetworkModel::new(
        (2, 5, 5),
        vec![
            Layer {
                name: "pad".into(),
                spec: LayerSpec::Pad { border: 1 },
            },
            conv_layer("conv", 2, 3, 3, 3, true),
        ],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    m.weights[1] = Some(LayerWeights::Quantized {
        weights: (0..54).map(|_| QVal::from_i32(rng.gen_range(-40..=40))).collect(),
        bias: vec![10, -10, 0],
    });
    let img = PlanarTensor::new(2, 5, 5, (0..50).map(|_| QVal::from_byte(rng.gen())).collect()).unwrap();
    for variant in [Variant::Opt256, Variant::Opt512, Variant::Unopt16] {
        check_equivalence(&m, &img, &BankConfig::default(), &EngineConfig::preset(variant)).unwrap();
    }
}

#[test]
fn fifty_random_toy_networks_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for t in 0..50 {
        let (m, img) = random_toy_network(&mut rng, ToyLimits::default());
        let cfg = EngineConfig::preset(if t % 2 == 0 { Variant::Opt256 } else { Variant::Opt512 });
        let bank = BankConfig {
            num_banks: 4,
            tiles_per_bank: 48,
        };
        let bank = if zskip::driver::plan_stripes(&m, &bank).is_ok() {
            bank
        } else {
            BankConfig::default()
        };
        check_equivalence(&m, &img, &bank, &cfg).unwrap_or_else(|e| panic!("trial {t}: {e}"));
    }
}

#[test]
fn run_cycles_equal_estimate_and_outputs_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..10 {
        let (m, img) = random_toy_network(&mut rng, ToyLimits::default());
        let packed = pack_network(&m).unwrap();
        let cfg = EngineConfig::preset(Variant::Opt512);
        let p = compile(&m, &packed, &BankConfig { num_banks: 4, tiles_per_bank: 40 }, 2)
            .or_else(|_| compile(&m, &packed, &BankConfig::default(), 2))
            .unwrap();
        let input = tile_tensor(&img.data, img.channels, img.width, img.height).unwrap();
        let a = exec_program(&p, &packed, &m, &cfg, &input).unwrap();
        let b = exec_program(&p, &packed, &m, &cfg, &input).unwrap();
        assert_eq!(a.activations, b.activations);
        let est = estimate(&p, &packed, &cfg).unwrap();
        for (x, y) in a.report.layers.iter().zip(&est.layers) {
            assert_eq!(x.total_cycles, y.total_cycles);
            assert_eq!(x.executed_macs, y.executed_macs);
        }
        assert_eq!(infer_ref(&m, &img).unwrap().activations.len(), a.activations.len());
    }
}

#[test]
fn non_matching_instances_rejected() {
    let m = single_conv(1, 1, 4, 1, &[vec![1]]);
    let packed = pack_network(&m).unwrap();
    let p = compile(&m, &packed, &BankConfig::default(), 1).unwrap();
    assert!(estimate(&p, &packed, &EngineConfig::preset(Variant::Opt512)).is_err());
}

#[test]
fn dense_vgg_executes_every_mac_below_ideal() {
    let m = synthesize_weights(&vgg16(), NnzDistribution::dense(), 3);
    let packed = pack_network(&m).unwrap();
    let cfg = EngineConfig::preset(Variant::Opt256);
    let p = compile(&m, &packed, &zskip::driver::ARRIA10_SX660, 1).unwrap();
    let c = estimate(&p, &packed, &cfg).unwrap();
    let r = report(&c, 1);
    for l in c.conv_layers() {
        assert_eq!(l.executed_macs, l.dense_macs, "{}", l.name);
        assert_eq!(l.skipped_macs, 0);
    }
    for l in r.layers.iter().filter(|l| l.cycles.is_conv()) {
        assert!(l.efficiency <= 1.0, "{} {}", l.cycles.name, l.efficiency);
        // the gap to ideal is bounded by fill, unpack and edge tiles
        let c = &l.cycles;
        assert!(c.total_cycles >= l.ideal_cycles);
    }
}

#[test]
fn two_instances_split_rows_round_robin() {
    let m = synthesize_weights(&vgg16(), NnzDistribution::sparsity(0.5), 8);
    let packed = pack_network(&m).unwrap();
    let bank = zskip::driver::ARRIA10_SX660;
    let one = {
        let mut cfg = EngineConfig::preset(Variant::Opt256);
        cfg.instances = 1;
        estimate(&compile(&m, &packed, &bank, 1).unwrap(), &packed, &cfg).unwrap()
    };
    let two = {
        let mut cfg = EngineConfig::preset(Variant::Opt256);
        cfg.instances = 2;
        estimate(&compile(&m, &packed, &bank, 2).unwrap(), &packed, &cfg).unwrap()
    };
    let plan = zskip::driver::plan_stripes(&m, &bank).unwrap();
    let mut checked = 0;
    for (a, b) in one.conv_layers().zip(two.conv_layers()) {
        let ls = plan.layer(a.layer_index).unwrap();
        let n = ls.stripes.len();
        if n < 2 {
            continue;
        }
        // critical instance share of computed rows under round-robin stripes
        let rows = |s: usize| ls.computed_rows(s).len();
        let total: usize = (0..n).map(rows).sum();
        let critical = (0..2).map(|i| (i..n).step_by(2).map(rows).sum::<usize>()).max().unwrap();
        let expect = a.conv_cycles as f64 * critical as f64 / total as f64;
        assert!(2 * b.conv_cycles >= a.conv_cycles, "{}", a.name);
        assert!((b.conv_cycles as f64 - expect).abs() <= 0.01 * expect, "{} {} {expect}", a.name, b.conv_cycles);
        checked += 1;
    }
    assert!(checked > 0);
}
