//! Whole-network forward and backward drivers.
//!
//! `forward` stops at the logits (the trailing softmax layer is a marker for
//! the class count); `softmax`/`softmax_rows` turn logits into probabilities;
//! `backward` starts from a gradient with respect to the logits, which is how
//! the coupled loss drives training.

use super::ops::{
    conv_backward, conv_forward, dense_backward, dense_forward, pool_backward, pool_forward,
    relu_backward, relu_forward, ConvDims,
};
use super::{Arch, Gradients, LayerGrads, LayerSpec, NetworkParams, Volume};
use crate::error::{Error, Result};
use crate::loss::Distribution;
use crate::tensor::{Element, Tensor};

pub(crate) enum LayerCache<E> {
    Dense { input: Tensor<E> },
    Conv { cols: Tensor<E> },
    Pool { argmax: Vec<u32> },
    Relu { active: Vec<bool> },
    Marker,
}

/// Everything the backward pass needs from a forward call, plus the parameter
/// version it was computed against so stale caches are rejected.
pub struct ForwardCache<E> {
    batch: usize,
    version: u64,
    entries: Vec<LayerCache<E>>,
}

impl<E> ForwardCache<E> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn params_version(&self) -> u64 {
        self.version
    }
}

fn check_batch_shape<E: Element>(arch: &Arch, batch: &Tensor<E>) -> Result<usize> {
    let shape = batch.shape();
    if shape.is_empty() {
        return Err(Error::Shape("empty batch tensor".into()));
    }
    let b = shape[0];
    let vol: usize = shape[1..].iter().product();
    if b == 0 || vol != arch.input.elements() {
        return Err(Error::Shape(format!(
            "batch shape {shape:?} does not match input volume {}",
            arch.input
        )));
    }
    Ok(b)
}

fn layer_params<'p, E>(
    params: &'p NetworkParams<E>,
    idx: usize,
    layer: &LayerSpec,
) -> Result<&'p super::LayerParams<E>> {
    params
        .layers()
        .get(idx)
        .and_then(|p| p.as_ref())
        .ok_or_else(|| {
            Error::Contract(format!(
                "missing parameters for layer {idx} ({})",
                layer.name()
            ))
        })
}

/// Runs the network on a batch, returning logits `(B, classes)` and the
/// cache consumed by [`backward`].
pub fn forward<E: Element>(
    arch: &Arch,
    params: &NetworkParams<E>,
    batch: &Tensor<E>,
) -> Result<(Tensor<E>, ForwardCache<E>)> {
    let vols = arch.volumes()?;
    let b = check_batch_shape(arch, batch)?;
    if params.layers().len() != arch.layers.len() {
        return Err(Error::Contract(format!(
            "params have {} layer slots, arch has {}",
            params.layers().len(),
            arch.layers.len()
        )));
    }

    let mut entries = Vec::with_capacity(arch.layers.len());
    let mut cur = batch.clone();
    let mut in_vol = arch.input;
    for (idx, layer) in arch.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Dense { inputs, outputs } => {
                let p = layer_params(params, idx, layer)?;
                let y = dense_forward(&cur, b, inputs, outputs, &p.weight, &p.bias);
                let input = std::mem::replace(&mut cur, y);
                entries.push(LayerCache::Dense { input });
            }
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let p = layer_params(params, idx, layer)?;
                let dims = ConvDims::new(in_vol, out_channels, kernel, stride, padding);
                let (y, cols) = conv_forward(&cur, b, &dims, &p.weight, &p.bias);
                cur = y;
                entries.push(LayerCache::Conv { cols });
            }
            LayerSpec::MaxPool { kernel, stride } => {
                let (y, argmax) = pool_forward(&cur, b, in_vol, kernel, stride);
                cur = y;
                entries.push(LayerCache::Pool { argmax });
            }
            LayerSpec::Relu => {
                let active = relu_forward(&mut cur);
                entries.push(LayerCache::Relu { active });
            }
            LayerSpec::Softmax { classes } => {
                cur = cur.reshaped(&[b, classes])?;
                entries.push(LayerCache::Marker);
            }
        }
        in_vol = vols[idx];
    }

    Ok((
        cur,
        ForwardCache {
            batch: b,
            version: params.version(),
            entries,
        },
    ))
}

/// Forward pass that also returns every post-layer activation (used by
/// activation statistics; not a training path).
pub fn forward_collect<E: Element>(
    arch: &Arch,
    params: &NetworkParams<E>,
    batch: &Tensor<E>,
) -> Result<(Tensor<E>, Vec<Tensor<E>>)> {
    let vols = arch.volumes()?;
    let b = check_batch_shape(arch, batch)?;
    let mut activations = Vec::with_capacity(arch.layers.len());
    let mut cur = batch.clone();
    let mut in_vol = arch.input;
    for (idx, layer) in arch.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Dense { inputs, outputs } => {
                let p = layer_params(params, idx, layer)?;
                cur = dense_forward(&cur, b, inputs, outputs, &p.weight, &p.bias);
            }
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let p = layer_params(params, idx, layer)?;
                let dims = ConvDims::new(in_vol, out_channels, kernel, stride, padding);
                cur = conv_forward(&cur, b, &dims, &p.weight, &p.bias).0;
            }
            LayerSpec::MaxPool { kernel, stride } => {
                cur = pool_forward(&cur, b, in_vol, kernel, stride).0;
            }
            LayerSpec::Relu => {
                relu_forward(&mut cur);
            }
            LayerSpec::Softmax { classes } => {
                cur = cur.reshaped(&[b, classes])?;
            }
        }
        in_vol = vols[idx];
        activations.push(cur.clone());
    }
    Ok((cur, activations))
}

/// Backpropagates a logits gradient through the network, producing gradients
/// for every weight and bias. The input gradient of the first layer is never
/// materialized.
pub fn backward<E: Element>(
    arch: &Arch,
    params: &NetworkParams<E>,
    cache: ForwardCache<E>,
    grad_logits: &Tensor<E>,
) -> Result<Gradients<E>> {
    if cache.version != params.version() {
        return Err(Error::Contract(format!(
            "stale forward cache: computed at params version {}, params now at {}",
            cache.version,
            params.version()
        )));
    }
    if cache.entries.len() != arch.layers.len() {
        return Err(Error::Contract(format!(
            "forward cache has {} entries for a {}-layer architecture",
            cache.entries.len(),
            arch.layers.len()
        )));
    }
    let b = cache.batch;
    let classes = arch.classes();
    if grad_logits.shape() != [b, classes] {
        return Err(Error::Shape(format!(
            "grad_logits shape {:?}, expected [{b}, {classes}]",
            grad_logits.shape()
        )));
    }

    let vols = arch.volumes()?;
    let input_vol = |idx: usize| -> Volume {
        if idx == 0 {
            arch.input
        } else {
            vols[idx - 1]
        }
    };

    let mut grads: Vec<Option<LayerGrads<E>>> = (0..arch.layers.len()).map(|_| None).collect();
    let mut grad = grad_logits.clone();
    let mut entries = cache.entries;

    for idx in (0..arch.layers.len()).rev() {
        let entry = entries.pop().expect("entry count checked above");
        let need_dx = idx > 0;
        match (&arch.layers[idx], entry) {
            (&LayerSpec::Dense { inputs, outputs }, LayerCache::Dense { input }) => {
                let p = layer_params(params, idx, &arch.layers[idx])?;
                let (dw, db, dx) =
                    dense_backward(&grad, &input, b, inputs, outputs, &p.weight, need_dx);
                grads[idx] = Some(LayerGrads { weight: dw, bias: db });
                if let Some(dx) = dx {
                    grad = dx;
                }
            }
            (
                &LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                },
                LayerCache::Conv { cols },
            ) => {
                let p = layer_params(params, idx, &arch.layers[idx])?;
                let dims = ConvDims::new(input_vol(idx), out_channels, kernel, stride, padding);
                let (dw, db, dx) = conv_backward(&grad, &cols, b, &dims, &p.weight, need_dx);
                grads[idx] = Some(LayerGrads { weight: dw, bias: db });
                if let Some(dx) = dx {
                    grad = dx;
                }
            }
            (&LayerSpec::MaxPool { .. }, LayerCache::Pool { argmax }) => {
                grad = pool_backward(&grad, &argmax, b, input_vol(idx));
            }
            (&LayerSpec::Relu, LayerCache::Relu { active }) => {
                relu_backward(&mut grad, &active);
            }
            (&LayerSpec::Softmax { .. }, LayerCache::Marker) => {}
            _ => {
                return Err(Error::Contract(format!(
                    "forward cache entry at layer {idx} does not match the architecture"
                )));
            }
        }
    }

    Ok(Gradients { layers: grads })
}

/// Numerically stable row-wise softmax of a `(B, C)` logits tensor.
pub fn softmax_rows<E: Element>(logits: &Tensor<E>) -> Tensor<E> {
    debug_assert_eq!(logits.shape().len(), 2);
    let mut probs = logits.clone();
    let c = logits.shape()[1];
    for row in probs.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let mut sum = E::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    probs
}

/// Softmax of each batch row as a validated [`Distribution`].
pub fn softmax<E: Element>(logits: &Tensor<E>) -> Result<Vec<Distribution<E>>> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "softmax expects a (batch, classes) tensor, got {:?}",
            logits.shape()
        )));
    }
    logits.ensure_finite("softmax")?;
    let probs = softmax_rows(logits);
    (0..probs.shape()[0])
        .map(|i| Distribution::new(probs.row(i).to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::xavier_init;

    #[test]
    fn zero_params_give_zero_logits() {
        let arch = Arch::mlp(4, &[3], 2).unwrap();
        let mut params: NetworkParams<f64> = xavier_init(&arch, 3).unwrap();
        for layer in params.layers_mut().iter_mut().flatten() {
            layer.weight.data_mut().fill(0.0);
            layer.bias.data_mut().fill(0.0);
        }
        let batch = Tensor::from_vec(&[2, 4], vec![0.5; 8]).unwrap();
        let (logits, _) = forward(&arch, &params, &batch).unwrap();
        assert_eq!(logits.shape(), &[2, 2]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_dense_layer_selects_weight_column() {
        // One-hot input: logits equal the selected weight column plus bias.
        let arch = Arch::new(
            Volume::flat(3),
            vec![
                LayerSpec::Dense {
                    inputs: 3,
                    outputs: 2,
                },
                LayerSpec::Softmax { classes: 2 },
            ],
        )
        .unwrap();
        let mut params: NetworkParams<f64> = xavier_init(&arch, 0).unwrap();
        let w = params.layers_mut()[0].as_mut().unwrap();
        w.weight
            .data_mut()
            .copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]); // rows: outputs
        let batch = Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let (logits, _) = forward(&arch, &params, &batch).unwrap();
        assert_eq!(logits.data(), &[2.0, 5.0]);
    }

    #[test]
    fn forward_matches_scalar_reference_on_random_mlp() {
        let arch = Arch::mlp(5, &[4], 3).unwrap();
        let params: NetworkParams<f64> = xavier_init(&arch, 11).unwrap();
        let batch = Tensor::from_vec(
            &[2, 5],
            (0..10).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let (logits, _) = forward(&arch, &params, &batch).unwrap();

        // Independent per-element evaluation.
        let w0 = params.layers()[0].as_ref().unwrap();
        let w2 = params.layers()[2].as_ref().unwrap();
        for s in 0..2 {
            let x: Vec<f64> = batch.row(s).to_vec();
            let mut h = vec![0.0f64; 4];
            for o in 0..4 {
                let mut acc = w0.bias.data()[o];
                for i in 0..5 {
                    acc += w0.weight.data()[o * 5 + i] * x[i];
                }
                h[o] = acc.max(0.0);
            }
            for o in 0..3 {
                let mut acc = w2.bias.data()[o];
                for i in 0..4 {
                    acc += w2.weight.data()[o * 4 + i] * h[i];
                }
                let got = logits.row(s)[o];
                assert!((got - acc).abs() < 1e-12, "sample {s} logit {o}: {got} vs {acc}");
            }
        }
    }

    #[test]
    fn softmax_is_stable_and_shift_invariant() {
        let logits = Tensor::from_vec(&[2, 2], vec![0.0f64, 0.0, 1000.0, 0.0]).unwrap();
        let p = softmax_rows(&logits);
        assert_eq!(p.row(0), &[0.5, 0.5]);
        assert_eq!(p.row(1), &[1.0, 0.0]);
        assert!(p.all_finite());

        let z = Tensor::from_vec(&[1, 3], vec![0.3f64, -1.2, 2.2]).unwrap();
        let z_shift = Tensor::from_vec(&[1, 3], vec![0.3f64 + 7.5, -1.2 + 7.5, 2.2 + 7.5]).unwrap();
        let a = softmax_rows(&z);
        let b = softmax_rows(&z_shift);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let sum: f64 = a.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_logit_gradient_gives_zero_parameter_gradients() {
        let arch = Arch::mlp(4, &[3], 2).unwrap();
        let params: NetworkParams<f64> = xavier_init(&arch, 5).unwrap();
        let batch = Tensor::from_vec(&[3, 4], vec![0.25; 12]).unwrap();
        let (_, cache) = forward(&arch, &params, &batch).unwrap();
        let grads = backward(&arch, &params, cache, &Tensor::zeros(&[3, 2])).unwrap();
        for g in grads.layers.iter().flatten() {
            assert!(g.weight.data().iter().all(|&v| v == 0.0));
            assert!(g.bias.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let arch = Arch::mlp(4, &[3], 2).unwrap();
        let mut params: NetworkParams<f64> = xavier_init(&arch, 5).unwrap();
        let batch = Tensor::from_vec(&[1, 4], vec![0.25; 4]).unwrap();
        let (_, cache) = forward(&arch, &params, &batch).unwrap();
        params.bump_version();
        let err = backward(&arch, &params, cache, &Tensor::zeros(&[1, 2])).unwrap_err();
        assert!(err.to_string().contains("stale"));
    }
}
