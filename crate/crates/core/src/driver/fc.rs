//! Fully connected layers, executed on the host.

use crate::netmodel::FcSpec;
use crate::numerics::{mul, requantize, Acc, QVal};

use super::DriverError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FcOutput {
    /// Accumulators before requantization.
    pub acc: Vec<i32>,
    pub out: Vec<QVal>,
}

/// Integer matrix-vector product; `weights` is row-major [out][in].
pub fn run_fc_host(
    spec: &FcSpec,
    weights: &[QVal],
    bias: &[i32],
    input: &[QVal],
) -> Result<FcOutput, DriverError> {
    if input.len() != spec.in_features {
        return Err(DriverError::Shape(format!(
            "fc expects {} inputs, got {}",
            spec.in_features,
            input.len()
        )));
    }
    if weights.len() != spec.in_features * spec.out_features || bias.len() != spec.out_features {
        return Err(DriverError::Shape("fc weight or bias length".into()));
    }
    let acc: Vec<i32> = weights
        .chunks_exact(spec.in_features)
        .zip(bias)
        .map(|(row, &b)| {
            let mut a = Acc(b);
            for (&w, &x) in row.iter().zip(input) {
                a.add_product(mul(w, x));
            }
            a.0
        })
        .collect();
    let out = acc.iter().map(|&a| requantize(Acc(a), &spec.quant)).collect();
    Ok(FcOutput { acc, out })
}
