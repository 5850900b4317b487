//! Naive reference layers in the accelerator's integer arithmetic.
//!
//! Everything here works on planar (channel, row, column) tensors with plain
//! nested loops. It is the ground truth the engine is checked against.

use thiserror::Error;

use crate::driver::fc::{run_fc_host, FcOutput};
use crate::driver::DriverError;
use crate::netmodel::{ConvSpec, LayerSpec, NetworkModel};
use crate::numerics::{mul, requantize, Acc, LayerQuant, QVal};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layer {0} has no quantized weights")]
    MissingWeights(String),
    #[error(transparent)]
    Driver(#[from] DriverError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanarTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<QVal>,
}

impl PlanarTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<QVal>) -> Result<Self, OracleError> {
        if data.len() != channels * height * width {
            return Err(OracleError::Shape(format!(
                "{} values for {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(PlanarTensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        PlanarTensor {
            channels,
            height,
            width,
            data: vec![QVal::ZERO; channels * height * width],
        }
    }

    /// A flat vector viewed as n x 1 x 1.
    pub fn flat(data: Vec<QVal>) -> Self {
        PlanarTensor {
            channels: data.len(),
            height: 1,
            width: 1,
            data,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> QVal {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: QVal) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }
}

/// Pre-requantization accumulators of a stride-1 valid convolution.
pub fn conv2d_acc(
    input: &PlanarTensor,
    spec: &ConvSpec,
    weights: &[QVal],
    bias: &[i32],
) -> Result<Vec<Acc>, OracleError> {
    let k = spec.kernel;
    if input.channels != spec.in_channels {
        return Err(OracleError::Shape(format!(
            "conv expects {} channels, input has {}",
            spec.in_channels, input.channels
        )));
    }
    if input.height < k || input.width < k {
        return Err(OracleError::Shape("input smaller than kernel".into()));
    }
    if weights.len() != spec.weight_count() || bias.len() != spec.out_channels {
        return Err(OracleError::Shape("weight or bias length".into()));
    }
    let (oh, ow) = (input.height - k + 1, input.width - k + 1);
    let mut out = Vec::with_capacity(spec.out_channels * oh * ow);
    for o in 0..spec.out_channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = Acc(bias[o]);
                for c in 0..spec.in_channels {
                    for i in 0..k {
                        for j in 0..k {
                            let w = weights[spec.weight_index(o, c, i, j)];
                            acc.add_product(mul(w, input.at(c, y + i, x + j)));
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Ok(out)
}

pub fn conv2d_ref(
    input: &PlanarTensor,
    spec: &ConvSpec,
    weights: &[QVal],
    bias: &[i32],
    quant: &LayerQuant,
) -> Result<PlanarTensor, OracleError> {
    let acc = conv2d_acc(input, spec, weights, bias)?;
    let k = spec.kernel;
    PlanarTensor::new(
        spec.out_channels,
        input.height - k + 1,
        input.width - k + 1,
        acc.into_iter().map(|a| requantize(a, quant)).collect(),
    )
}

/// Max-pooling in signed-value order.
pub fn maxpool_ref(
    input: &PlanarTensor,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<PlanarTensor, OracleError> {
    let ((wh, ww), (sh, sw)) = (window, stride);
    if wh == 0 || ww == 0 || sh == 0 || sw == 0 || input.height < wh || input.width < ww {
        return Err(OracleError::Shape(format!(
            "window {wh}x{ww} stride {sh}x{sw} on {}x{}",
            input.height, input.width
        )));
    }
    let (oh, ow) = ((input.height - wh) / sh + 1, (input.width - ww) / sw + 1);
    let mut out = PlanarTensor::zeros(input.channels, oh, ow);
    for c in 0..input.channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut m = input.at(c, y * sh, x * sw);
                for i in 0..wh {
                    for j in 0..ww {
                        m = m.max(input.at(c, y * sh + i, x * sw + j));
                    }
                }
                out.set(c, y, x, m);
            }
        }
    }
    Ok(out)
}

/// Zero padding on all four sides.
pub fn pad_ref(input: &PlanarTensor, border: usize) -> PlanarTensor {
    let mut out = PlanarTensor::zeros(
        input.channels,
        input.height + 2 * border,
        input.width + 2 * border,
    );
    for c in 0..input.channels {
        for y in 0..input.height {
            for x in 0..input.width {
                out.set(c, y + border, x + border, input.at(c, y, x));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inference {
    /// Output of every layer, in order. Flat activations are n x 1 x 1.
    pub activations: Vec<PlanarTensor>,
    /// Accumulators of the final fully connected layer, if any.
    pub scores: Vec<i32>,
}

/// Runs the whole network layer by layer on a quantized planar image.
pub fn infer_ref(m: &NetworkModel, image: &PlanarTensor) -> Result<Inference, OracleError> {
    let (c, h, w) = m.input;
    if (image.channels, image.height, image.width) != (c, h, w) {
        return Err(OracleError::Shape("image does not match network input".into()));
    }
    let mut cur = image.clone();
    let mut activations = Vec::with_capacity(m.layers.len());
    let mut scores = Vec::new();
    for (i, l) in m.layers.iter().enumerate() {
        cur = match &l.spec {
            LayerSpec::Conv(spec) => {
                let (wq, b) = m
                    .quantized_weights(i)
                    .ok_or_else(|| OracleError::MissingWeights(l.name.clone()))?;
                conv2d_ref(&cur, spec, wq, b, &spec.quant)?
            }
            LayerSpec::Pad { border } => pad_ref(&cur, *border),
            LayerSpec::MaxPool { window, stride } => maxpool_ref(&cur, *window, *stride)?,
            LayerSpec::Flatten => PlanarTensor::flat(cur.data.clone()),
            LayerSpec::FullyConnected(spec) => {
                let (wq, b) = m
                    .quantized_weights(i)
                    .ok_or_else(|| OracleError::MissingWeights(l.name.clone()))?;
                let FcOutput { acc, out } = run_fc_host(spec, wq, b, &cur.data)?;
                scores = acc;
                PlanarTensor::flat(out)
            }
        };
        activations.push(cur.clone());
    }
    Ok(Inference {
        activations,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{Layer, LayerWeights, ScaleMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qv(v: i32) -> QVal {
        QVal::from_i32(v)
    }

    fn spec(cin: usize, cout: usize, k: usize, shift: u32, relu: bool) -> ConvSpec {
        ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            quant: LayerQuant::new(1.0, shift, relu).unwrap(),
            scale_mode: ScaleMode::Fixed,
        }
    }

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> PlanarTensor {
        let data = (0..c * h * w).map(|_| qv(rng.gen_range(-127..=127))).collect();
        PlanarTensor::new(c, h, w, data).unwrap()
    }

    #[test]
    fn delta_kernel_crops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(&mut rng, 1, 5, 6);
        let s = spec(1, 1, 3, 0, false);
        let mut w = vec![QVal::ZERO; 9];
        w[0] = qv(1);
        let out = conv2d_ref(&input, &s, &w, &[0], &s.quant).unwrap();
        assert_eq!((out.height, out.width), (3, 4));
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(out.at(0, y, x), input.at(0, y, x));
            }
        }
    }

    #[test]
    fn sum_of_nine_ones() {
        let input = PlanarTensor::new(1, 3, 3, vec![qv(1); 9]).unwrap();
        let s = spec(1, 1, 3, 0, false);
        let out = conv2d_ref(&input, &s, &[qv(1); 9], &[0], &s.quant).unwrap();
        assert_eq!(out.data, vec![qv(9)]);
    }

    #[test]
    fn conv_matches_flat_index_recomputation() {
        // Independent recomputation over raw i32 buffers with its own indexing.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_tensor(&mut rng, 2, 6, 6);
        let s = spec(2, 3, 3, 6, false);
        let w: Vec<QVal> = (0..s.weight_count()).map(|_| qv(rng.gen_range(-127..=127))).collect();
        let bias = vec![100, -250, 3];
        let out = conv2d_ref(&input, &s, &w, &bias, &s.quant).unwrap();
        let iv: Vec<i64> = input.data.iter().map(|v| v.to_i32() as i64).collect();
        let wv: Vec<i64> = w.iter().map(|v| v.to_i32() as i64).collect();
        for o in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let mut sum = bias[o] as i64;
                    for idx in 0..18 {
                        let (c, i, j) = (idx / 9, (idx % 9) / 3, idx % 3);
                        sum += wv[o * 18 + idx] * iv[c * 36 + (y + i) * 6 + x + j];
                    }
                    let r = (sum.abs() + 32) >> 6;
                    let r = if sum < 0 { -r } else { r };
                    assert_eq!(out.at(o, y, x), qv(r.clamp(-127, 127) as i32));
                }
            }
        }
    }

    #[test]
    fn conv_is_linear_before_requantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<QVal> = (0..2 * 5 * 5).map(|_| qv(rng.gen_range(-60..=60))).collect();
        let doubled: Vec<QVal> = data.iter().map(|v| qv(2 * v.to_i32())).collect();
        let a = PlanarTensor::new(2, 5, 5, data).unwrap();
        let b = PlanarTensor::new(2, 5, 5, doubled).unwrap();
        let s = spec(2, 2, 2, 0, false);
        let w: Vec<QVal> = (0..s.weight_count()).map(|_| qv(rng.gen_range(-127..=127))).collect();
        let x = conv2d_acc(&a, &s, &w, &[0, 0]).unwrap();
        let y = conv2d_acc(&b, &s, &w, &[0, 0]).unwrap();
        for (p, q) in x.iter().zip(&y) {
            assert_eq!(2 * p.0, q.0);
        }
    }

    #[test]
    fn maxpool_examples() {
        let ramp = PlanarTensor::new(1, 4, 4, (0..16).map(qv).collect()).unwrap();
        let out = maxpool_ref(&ramp, (2, 2), (2, 2)).unwrap();
        // windows {0,1,4,5} {2,3,6,7} {8,9,12,13} {10,11,14,15}
        assert_eq!(out.data, vec![qv(5), qv(7), qv(13), qv(15)]);
        let c = PlanarTensor::new(1, 4, 4, vec![qv(-3); 16]).unwrap();
        assert!(maxpool_ref(&c, (2, 2), (2, 2)).unwrap().data.iter().all(|v| *v == qv(-3)));
        assert_eq!(maxpool_ref(&ramp, (1, 1), (1, 1)).unwrap(), ramp);
        // signed order: -1 beats -100
        let neg = PlanarTensor::new(1, 1, 2, vec![qv(-100), qv(-1)]).unwrap();
        assert_eq!(maxpool_ref(&neg, (1, 2), (1, 1)).unwrap().data, vec![qv(-1)]);
        assert!(maxpool_ref(&ramp, (5, 1), (1, 1)).is_err());
    }

    #[test]
    fn maxpool_never_exceeds_input_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let t = random_tensor(&mut rng, 2, 9, 7);
            let m = *t.data.iter().max().unwrap();
            let out = maxpool_ref(&t, (rng.gen_range(1..=4), rng.gen_range(1..=4)), (2, 3)).unwrap();
            assert!(out.data.iter().all(|v| *v <= m));
        }
    }

    #[test]
    fn pad_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_tensor(&mut rng, 2, 3, 4);
        assert_eq!(pad_ref(&t, 0), t);
        let one = PlanarTensor::new(1, 1, 1, vec![qv(-7)]).unwrap();
        let p = pad_ref(&one, 1);
        assert_eq!((p.height, p.width), (3, 3));
        assert_eq!(p.at(0, 1, 1), qv(-7));
        assert_eq!(p.data.iter().filter(|v| v.is_zero()).count(), 8);
        let p = pad_ref(&t, 2);
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(p.at(c, y + 2, x + 2), t.at(c, y, x));
                }
            }
        }
    }

    fn toy_net() -> NetworkModel {
        let layers = vec![
            Layer {
                name: "pad".into(),
                spec: LayerSpec::Pad { border: 1 },
            },
            Layer {
                name: "conv".into(),
                spec: LayerSpec::Conv(spec(1, 1, 2, 1, true)),
            },
        ];
        let mut m = NetworkModel::new((1, 2, 2), layers).unwrap();
        m.weights[1] = Some(LayerWeights::Quantized {
            weights: vec![qv(1), qv(2), qv(-1), qv(3)],
            bias: vec![1],
        });
        m
    }

    #[test]
    fn two_layer_hand_computed() {
        let m = toy_net();
        let img = PlanarTensor::new(1, 2, 2, vec![qv(4), qv(-2), qv(6), qv(8)]).unwrap();
        let r = infer_ref(&m, &img).unwrap();
        // padded 4x4: row0 zeros, row1 0 4 -2 0, row2 0 6 8 0, row3 zeros
        // out(y,x) = 1 + p(y,x) + 2p(y,x+1) - p(y+1,x) + 3p(y+1,x+1), then >>1 (half away), relu
        let p = |y: usize, x: usize| -> i32 {
            let rows = [[0, 0, 0, 0], [0, 4, -2, 0], [0, 6, 8, 0], [0, 0, 0, 0]];
            rows[y][x]
        };
        let mut want = Vec::new();
        for y in 0..3 {
            for x in 0..3 {
                let a = 1 + p(y, x) + 2 * p(y, x + 1) - p(y + 1, x) + 3 * p(y + 1, x + 1);
                let r = (a.abs() + 1) >> 1;
                want.push(qv(if a < 0 { 0 } else { r }));
            }
        }
        assert_eq!(r.activations[1].data, want);
        // hand-checked corner: 1 + 3*4 = 13 -> 7
        assert_eq!(want[0], qv(7));
    }

    #[test]
    fn zero_image_gives_bias_only() {
        let m = toy_net();
        let r = infer_ref(&m, &PlanarTensor::zeros(1, 2, 2)).unwrap();
        // bias 1 >> 1 rounds half away to 1
        assert!(r.activations[1].data.iter().all(|v| *v == qv(1)));
        let again = infer_ref(&m, &PlanarTensor::zeros(1, 2, 2)).unwrap();
        assert_eq!(r, again);
    }
}
