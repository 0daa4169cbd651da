//! Full-precision reference trainer.
//!
//! Trains with exact ReLU and max-pool (no saturation, quantization or
//! noise), softmax cross-entropy averaged over the batch, and mini-batch SGD
//! with momentum. Per-example gradients are computed in parallel and reduced
//! in batch order, so results are independent of the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataio::LabeledDataset;
use crate::network::{
    argmax, conv_forward, CnnConfig, ConvSpec, DenseSpec, LayerSpec, LayerWeights, PoolSpec, Shape,
    Tensor3, WeightSet,
};
use crate::quantization::QuantSpec;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            epochs: 3,
            seed: 0,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    /// `learning_rate` may be zero, which leaves the initialization in place.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidParameter(
                "learning_rate must be non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidParameter(
                "batch_size and epochs must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_weights(config: &CnnConfig, rng: &mut impl Rng) -> Result<WeightSet> {
    let mut w = WeightSet::zeros(config)?;
    for layer in &mut w.layers {
        let (fan_in, fan_out) = layer.kind.fans();
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut layer.weights {
            *v = rng.random_range(-limit..=limit);
        }
    }
    Ok(w)
}

enum Cache {
    Conv {
        input: Tensor3,
    },
    Pool {
        input_shape: Shape,
        argmax: Vec<usize>,
        out: Vec<f64>,
    },
    Dense {
        input: Vec<f64>,
        pre: Vec<f64>,
        relu: bool,
    },
}

fn unbounded() -> QuantSpec {
    QuantSpec::pass_through(f64::MIN, f64::MAX).expect("valid range")
}

fn pool_forward(input: &Tensor3, p: &PoolSpec) -> (Tensor3, Vec<usize>) {
    let out_shape = p.output_shape(input.shape);
    let mut out = Tensor3::zeros(out_shape);
    let mut arg = vec![0; out_shape.len()];
    for c in 0..out_shape.channels {
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let mut best = input.index(c, oy * p.stride, ox * p.stride);
                for dy in 0..p.window {
                    for dx in 0..p.window {
                        let i = input.index(c, oy * p.stride + dy, ox * p.stride + dx);
                        if input.data[i] > input.data[best] {
                            best = i;
                        }
                    }
                }
                let o = out.index(c, oy, ox);
                out.data[o] = input.data[best].max(0.0);
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

fn dense_forward(input: &[f64], w: &LayerWeights) -> Vec<f64> {
    let inputs = input.len();
    w.weights
        .chunks_exact(inputs)
        .zip(&w.bias)
        .map(|(row, b)| row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>() + b)
        .collect()
}

/// Float forward pass; returns the logits and the per-layer caches.
fn forward(
    config: &CnnConfig,
    weights: &WeightSet,
    image: &[f64],
) -> Result<(Vec<f64>, Vec<Cache>)> {
    let quant = unbounded();
    let mut t = Tensor3::new(config.input_shape(), image.to_vec())?;
    let mut caches = Vec::with_capacity(config.layers.len());
    let mut wi = 0;
    let last = config.layers.len() - 1;
    for (li, layer) in config.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv(c) => {
                let next = conv_forward(&t, c, &weights.layers[wi], &quant)?;
                wi += 1;
                caches.push(Cache::Conv { input: t });
                t = next;
            }
            LayerSpec::MaapActPool(p) => {
                let (next, argmax) = pool_forward(&t, p);
                caches.push(Cache::Pool {
                    input_shape: t.shape,
                    argmax,
                    out: next.data.clone(),
                });
                t = next;
            }
            LayerSpec::FullyConnected(d) => {
                let pre = dense_forward(&t.data, &weights.layers[wi]);
                wi += 1;
                let relu = li != last;
                let out: Vec<f64> = if relu {
                    pre.iter().map(|&v| v.max(0.0)).collect()
                } else {
                    pre.clone()
                };
                caches.push(Cache::Dense {
                    input: std::mem::take(&mut t.data),
                    pre,
                    relu,
                });
                t = Tensor3::new(Shape::new(d.outputs, 1, 1), out)?;
            }
        }
    }
    Ok((t.data, caches))
}

fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

fn conv_backward(
    input: &Tensor3,
    c: &ConvSpec,
    w: &LayerWeights,
    grad_out: &Tensor3,
    grad_w: &mut LayerWeights,
    need_input_grad: bool,
) -> Tensor3 {
    let in_shape = input.shape;
    let (pad_y, pad_x) = c.padding_before(in_shape);
    let (kh, kw) = (c.kernel_h, c.kernel_w);
    let mut grad_in = Tensor3::zeros(if need_input_grad {
        in_shape
    } else {
        Shape::new(0, 0, 0)
    });
    let out_shape = grad_out.shape;
    for k in 0..out_shape.channels {
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let g = grad_out.get(k, oy, ox);
                if g == 0.0 {
                    continue;
                }
                grad_w.bias[k] += g;
                for ch in 0..in_shape.channels {
                    for ky in 0..kh {
                        let iy = (oy * c.stride + ky) as isize - pad_y as isize;
                        if iy < 0 || iy >= in_shape.height as isize {
                            continue;
                        }
                        let row = (ch * in_shape.height + iy as usize) * in_shape.width;
                        let wrow = ((k * in_shape.channels + ch) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * c.stride + kx) as isize - pad_x as isize;
                            if ix < 0 || ix >= in_shape.width as isize {
                                continue;
                            }
                            let i = row + ix as usize;
                            grad_w.weights[wrow + kx] += g * input.data[i];
                            if need_input_grad {
                                grad_in.data[i] += g * w.weights[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

fn example_gradients(
    config: &CnnConfig,
    weights: &WeightSet,
    image: &[f64],
    label: usize,
) -> Result<(f64, WeightSet)> {
    let (logits, caches) = forward(config, weights, image)?;
    let (loss, grad_logits) = softmax_xent(&logits, label);
    let mut grads = WeightSet {
        layers: weights
            .layers
            .iter()
            .map(|l| LayerWeights::zeros(l.kind))
            .collect(),
    };
    let shapes = config.layer_shapes()?;
    let mut g = Tensor3::new(*shapes.last().unwrap(), grad_logits)?;
    let mut wi = weights.layers.len();
    for (li, (layer, cache)) in config.layers.iter().zip(&caches).enumerate().rev() {
        g = match (layer, cache) {
            (LayerSpec::Conv(c), Cache::Conv { input }) => {
                wi -= 1;
                conv_backward(
                    input,
                    c,
                    &weights.layers[wi],
                    &g,
                    &mut grads.layers[wi],
                    li > 0,
                )
            }
            (
                LayerSpec::MaapActPool(_),
                Cache::Pool {
                    input_shape,
                    argmax,
                    out,
                },
            ) => {
                let mut gi = Tensor3::zeros(*input_shape);
                for ((&a, &o), &go) in argmax.iter().zip(out).zip(&g.data) {
                    if o > 0.0 {
                        gi.data[a] += go;
                    }
                }
                gi
            }
            (
                LayerSpec::FullyConnected(DenseSpec { inputs, .. }),
                Cache::Dense { input, pre, relu },
            ) => {
                wi -= 1;
                let mut go = g.data;
                if *relu {
                    for (gv, &p) in go.iter_mut().zip(pre) {
                        if p <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
                let w = &weights.layers[wi];
                let gw = &mut grads.layers[wi];
                let mut gi = vec![0.0; *inputs];
                for (o, &gv) in go.iter().enumerate() {
                    gw.bias[o] += gv;
                    let row = &w.weights[o * inputs..(o + 1) * inputs];
                    let grow = &mut gw.weights[o * inputs..(o + 1) * inputs];
                    for i in 0..*inputs {
                        grow[i] += gv * input[i];
                        gi[i] += gv * row[i];
                    }
                }
                let prev = if li == 0 {
                    config.input_shape()
                } else {
                    shapes[li - 1]
                };
                Tensor3::new(prev, gi)?
            }
            _ => unreachable!("cache kind follows layer kind"),
        };
    }
    Ok((loss, grads))
}

/// Mean softmax cross-entropy over `batch` and its analytic gradient.
pub fn loss_and_gradients(
    config: &CnnConfig,
    weights: &WeightSet,
    batch: &[(&[f64], u8)],
) -> Result<(f64, WeightSet)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    weights.validate_for(config)?;
    let per_example: Vec<(f64, WeightSet)> = batch
        .par_iter()
        .map(|(img, label)| example_gradients(config, weights, img, usize::from(*label)))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut iter = per_example.into_iter();
    let (mut loss, mut grads) = iter.next().unwrap();
    for (l, g) in iter {
        loss += l;
        for (acc, v) in grads.values_mut().zip(g.values()) {
            *acc += v;
        }
    }
    grads.values_mut().for_each(|v| *v *= scale);
    Ok((loss * scale, grads))
}

/// Full-precision logits of one image.
pub fn logits(config: &CnnConfig, weights: &WeightSet, image: &[f64]) -> Result<Vec<f64>> {
    Ok(forward(config, weights, image)?.0)
}

/// Full-precision classification accuracy over a dataset.
pub fn software_accuracy(
    config: &CnnConfig,
    weights: &WeightSet,
    data: &LabeledDataset,
) -> Result<f64> {
    let correct: usize = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let z = logits(config, weights, data.image(i))?;
            Ok(usize::from(argmax(&z) == usize::from(data.label(i))))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / data.len() as f64)
}

/// SGD with momentum from a seeded Glorot initialization.
pub fn train(config: &CnnConfig, data: &LabeledDataset, tc: &TrainConfig) -> Result<WeightSet> {
    train_with(config, data, tc, |_, _, _| {})
}

/// Like [`train`], calling `on_batch(epoch, step, batch_loss)` after each
/// update.
pub fn train_with(
    config: &CnnConfig,
    data: &LabeledDataset,
    tc: &TrainConfig,
    mut on_batch: impl FnMut(usize, usize, f64),
) -> Result<WeightSet> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let in_shape = config.input_shape();
    if in_shape.channels != 1 || data.image_shape() != (in_shape.height, in_shape.width) {
        return Err(Error::ShapeMismatch(format!(
            "dataset images {:?} do not match network input {in_shape}",
            data.image_shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut weights = init_weights(config, &mut rng)?;
    let mut velocity = WeightSet {
        layers: weights
            .layers
            .iter()
            .map(|l| LayerWeights::zeros(l.kind))
            .collect(),
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..tc.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for (step, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<(&[f64], u8)> = chunk
                .iter()
                .map(|&i| (data.image(i), data.label(i)))
                .collect();
            let (loss, grads) = loss_and_gradients(config, &weights, &batch)?;
            for ((w, v), g) in weights
                .values_mut()
                .zip(velocity.values_mut())
                .zip(grads.values())
            {
                *v = tc.momentum * *v - tc.learning_rate * g;
                *w += *v;
            }
            on_batch(epoch, step, loss);
        }
    }
    Ok(weights)
}
