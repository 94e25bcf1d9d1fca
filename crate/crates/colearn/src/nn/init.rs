use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Arch, LayerParams, LayerSpec, NetworkParams};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Xavier/Glorot uniform initialization: weights drawn from
/// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`, biases zero.
/// Deterministic for a given `(arch, seed)`.
pub fn xavier_init<E: Element>(arch: &Arch, seed: u64) -> Result<NetworkParams<E>> {
    arch.volumes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .layers
        .iter()
        .map(|layer| match *layer {
            LayerSpec::Dense { inputs, outputs } => {
                let bound = (6.0 / (inputs + outputs) as f64).sqrt();
                Some(LayerParams {
                    weight: sample_uniform(&mut rng, &[outputs, inputs], bound),
                    bias: Tensor::zeros(&[outputs]),
                    weight_momentum: Tensor::zeros(&[outputs, inputs]),
                    bias_momentum: Tensor::zeros(&[outputs]),
                })
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                let fan_out = out_channels * kernel * kernel;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let shape = [out_channels, in_channels, kernel, kernel];
                Some(LayerParams {
                    weight: sample_uniform(&mut rng, &shape, bound),
                    bias: Tensor::zeros(&[out_channels]),
                    weight_momentum: Tensor::zeros(&shape),
                    bias_momentum: Tensor::zeros(&[out_channels]),
                })
            }
            LayerSpec::MaxPool { .. } | LayerSpec::Relu | LayerSpec::Softmax { .. } => None,
        })
        .collect();
    Ok(NetworkParams::from_layers(layers))
}

fn sample_uniform<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<E> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/volume consistent by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_arch_and_seed_is_bitwise_identical() {
        let arch = Arch::mlp(20, &[10], 4).unwrap();
        let a: NetworkParams<f32> = xavier_init(&arch, 99).unwrap();
        let b: NetworkParams<f32> = xavier_init(&arch, 99).unwrap();
        assert_eq!(a, b);
        let c: NetworkParams<f32> = xavier_init(&arch, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dense_weight_variance_matches_glorot() {
        // U(-b, b) has variance b^2/3 = 2 / (fan_in + fan_out).
        let arch = Arch::mlp(100, &[], 50).unwrap();
        let params: NetworkParams<f64> = xavier_init(&arch, 7).unwrap();
        let w = &params.layers()[0].as_ref().unwrap().weight;
        assert_eq!(w.len(), 5000);
        let mean: f64 = w.data().iter().sum::<f64>() / w.len() as f64;
        let var: f64 =
            w.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 150.0;
        assert!(
            (var - expected).abs() < 0.2 * expected,
            "sample variance {var} vs expected {expected}"
        );
    }

    #[test]
    fn lenet5_conv1_weight_shape_matches_table() {
        let arch = Arch::lenet5(3, 32, 10).unwrap();
        let params: NetworkParams<f32> = xavier_init(&arch, 0).unwrap();
        let conv1 = params.layers()[0].as_ref().unwrap();
        assert_eq!(conv1.weight.shape(), &[6, 3, 5, 5]);
        assert!(conv1.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn malformed_arch_is_rejected() {
        let arch = Arch {
            input: Volume::flat(4),
            layers: vec![
                LayerSpec::Dense {
                    inputs: 5,
                    outputs: 2,
                },
                LayerSpec::Softmax { classes: 2 },
            ],
        };
        assert!(xavier_init::<f32>(&arch, 0).is_err());
    }

    use super::super::Volume;
}
