//! Double-precision reference forward pass shared by gradient-check tests.
//! Written independently of the library's f32 implementation.

use papforge::neural::{Activation, NetSpec};

pub fn ref_activation(act: Activation, x: f64) -> f64 {
    match act {
        Activation::LeakyRelu => {
            if x >= 0.0 {
                x
            } else {
                0.01 * x
            }
        }
        Activation::HardTanh => x.clamp(-1.0, 1.0),
        Activation::Identity => x,
    }
}

/// f64 forward pass over the flat (row-major weights, then bias) layout.
pub fn ref_forward(spec: &NetSpec, params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut current = x.to_vec();
    let mut offset = 0;
    for layer in &spec.layers {
        let (i_dim, o_dim) = (layer.input, layer.output);
        let weights = &params[offset..offset + o_dim * i_dim];
        let bias = &params[offset + o_dim * i_dim..offset + o_dim * i_dim + o_dim];
        offset += o_dim * i_dim + o_dim;
        let mut next = Vec::with_capacity(o_dim);
        for o in 0..o_dim {
            let mut acc = bias[o];
            for i in 0..i_dim {
                acc += current[i] * weights[o * i_dim + i];
            }
            next.push(ref_activation(layer.activation, acc));
        }
        current = next;
    }
    current
}

pub fn widen(params: &[f32]) -> Vec<f64> {
    params.iter().map(|&p| f64::from(p)).collect()
}
