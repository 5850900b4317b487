//! Seeded synthetic weights and random toy networks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::netmodel::{ConvSpec, Layer, LayerSpec, LayerWeights, NetworkModel, ScaleMode, Shape};
use crate::numerics::{LayerQuant, QVal};
use crate::oracle::PlanarTensor;

/// How nonzero positions are drawn inside each k x k kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NnzDistribution {
    /// Each position is nonzero with this probability.
    Bernoulli { density: f64 },
    /// Exactly `min(n, k*k)` positions are nonzero.
    FixedNnz(usize),
}

impl NnzDistribution {
    /// Bernoulli pattern with the given fraction of zero weights.
    pub fn sparsity(fraction: f64) -> Self {
        NnzDistribution::Bernoulli {
            density: (1.0 - fraction).clamp(0.0, 1.0),
        }
    }

    pub fn dense() -> Self {
        NnzDistribution::Bernoulli { density: 1.0 }
    }
}

fn random_weight(rng: &mut impl Rng) -> QVal {
    QVal::new(rng.gen_bool(0.5), rng.gen_range(1..=127))
}

/// Kernel of `k*k` weights with nonzeros drawn from `dist`.
pub fn synth_kernel(k: usize, dist: NnzDistribution, rng: &mut impl Rng) -> Vec<QVal> {
    let kk = k * k;
    let mut out = vec![QVal::ZERO; kk];
    match dist {
        NnzDistribution::Bernoulli { density } => {
            for w in out.iter_mut() {
                if rng.gen_bool(density) {
                    *w = random_weight(rng);
                }
            }
        }
        NnzDistribution::FixedNnz(n) => {
            for i in sample(rng, kk, n.min(kk)) {
                out[i] = random_weight(rng);
            }
        }
    }
    out
}

/// Replaces every conv layer's weights with seeded synthetic quantized
/// weights and zero biases. Other layers are left without weights.
pub fn synthesize_weights(m: &NetworkModel, dist: NnzDistribution, seed: u64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = m.clone();
    for (i, l) in out.layers.iter_mut().enumerate() {
        let LayerSpec::Conv(c) = &mut l.spec else {
            out.weights[i] = None;
            continue;
        };
        c.scale_mode = ScaleMode::Fixed;
        c.quant.weight_scale = 1.0;
        let mut weights = Vec::with_capacity(c.weight_count());
        for _ in 0..c.out_channels * c.in_channels {
            weights.extend(synth_kernel(c.kernel, dist, &mut rng));
        }
        out.weights[i] = Some(LayerWeights::Quantized {
            weights,
            bias: vec![0; c.out_channels],
        });
    }
    out
}

/// Zeroes each nonzero conv weight with probability `fraction`.
pub fn prune_quantized(m: &NetworkModel, fraction: f64, rng: &mut impl Rng) -> NetworkModel {
    let mut out = m.clone();
    for (l, w) in out.layers.iter().zip(out.weights.iter_mut()) {
        if !matches!(l.spec, LayerSpec::Conv(_)) {
            continue;
        }
        if let Some(LayerWeights::Quantized { weights, .. }) = w {
            for v in weights.iter_mut() {
                if !v.is_zero() && rng.gen_bool(fraction) {
                    *v = QVal::ZERO;
                }
            }
        }
    }
    out
}

/// Limits on random toy networks.
#[derive(Clone, Copy, Debug)]
pub struct ToyLimits {
    pub max_channels: usize,
    pub max_size: usize,
    pub max_conv_layers: usize,
    pub max_prune: f64,
}

impl Default for ToyLimits {
    fn default() -> Self {
        ToyLimits {
            max_channels: 8,
            max_size: 16,
            max_conv_layers: 3,
            max_prune: 0.9,
        }
    }
}

/// Random quantized network of 1..=3 conv layers with pads and 2x2/2 pools
/// interleaved, plus a random input image.
pub fn random_toy_network(rng: &mut impl Rng, lim: ToyLimits) -> (NetworkModel, PlanarTensor) {
    let c0 = rng.gen_range(1..=lim.max_channels);
    let (h0, w0) = (rng.gen_range(4..=lim.max_size), rng.gen_range(4..=lim.max_size));
    let convs = rng.gen_range(1..=lim.max_conv_layers);
    let mut layers = Vec::new();
    let (mut c, mut h, mut w) = (c0, h0, w0);
    for n in 0..convs {
        if rng.gen_bool(0.5) && h + 2 <= lim.max_size && w + 2 <= lim.max_size {
            layers.push(Layer {
                name: format!("pad{n}"),
                spec: LayerSpec::Pad { border: 1 },
            });
            h += 2;
            w += 2;
        }
        let k = rng.gen_range(1..=3.min(h).min(w));
        let cout = rng.gen_range(1..=lim.max_channels);
        layers.push(Layer {
            name: format!("conv{n}"),
            spec: LayerSpec::Conv(ConvSpec {
                in_channels: c,
                out_channels: cout,
                kernel: k,
                quant: LayerQuant::new(1.0, rng.gen_range(3..=8), rng.gen_bool(0.7)).unwrap(),
                scale_mode: ScaleMode::Fixed,
            }),
        });
        c = cout;
        h = h - k + 1;
        w = w - k + 1;
        if h >= 2 && w >= 2 && rng.gen_bool(0.5) {
            layers.push(Layer {
                name: format!("pool{n}"),
                spec: LayerSpec::MaxPool {
                    window: (2, 2),
                    stride: (2, 2),
                },
            });
            h = (h - 2) / 2 + 1;
            w = (w - 2) / 2 + 1;
        }
    }
    let mut m = NetworkModel::new((c0, h0, w0), layers).expect("toy network is well formed");
    let density = 1.0 - rng.gen_range(0.0..=lim.max_prune);
    for i in 0..m.layers.len() {
        if let LayerSpec::Conv(spec) = &m.layers[i].spec {
            let weights = (0..spec.weight_count())
                .map(|_| if rng.gen_bool(density) { random_weight(rng) } else { QVal::ZERO })
                .collect();
            let bias = (0..spec.out_channels).map(|_| rng.gen_range(-2000..=2000)).collect();
            m.weights[i] = Some(LayerWeights::Quantized { weights, bias });
        }
    }
    let data = (0..c0 * h0 * w0).map(|_| QVal::from_byte(rng.gen())).collect();
    let image = PlanarTensor::new(c0, h0, w0, data).expect("sized");
    debug_assert!(matches!(m.shapes().unwrap().last(), Some(Shape::Spatial { .. })));
    (m, image)
}
