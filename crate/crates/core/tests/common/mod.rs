//! Shared fixtures: an independent plain CNN, toy networks, MNIST loading.
#![allow(dead_code)]

use std::path::PathBuf;

use maap_core::dataio::{LabeledDataset, RawImages};
use maap_core::network::{
    self, CnnConfig, ConvSpec, DenseSpec, LayerSpec, Padding, PoolSpec, WeightKind, WeightSet,
};
use maap_core::trainer::{self, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mnist_dir() -> PathBuf {
    std::env::var_os("MAAP_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn load_mnist(prefix: &str) -> maap_core::Result<LabeledDataset> {
    let dir = mnist_dir();
    let pick = |stem: &str| {
        let gz = dir.join(format!("{prefix}-{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(format!("{prefix}-{stem}"))
        }
    };
    LabeledDataset::load(pick("images-idx3-ubyte"), pick("labels-idx1-ubyte"))
}

/// The trained and range-fitted default network, as `maap train` produces it.
pub fn train_default(train: &LabeledDataset) -> maap_core::Result<WeightSet> {
    let config = network::default_config();
    let weights = trainer::train(&config, train, &TrainConfig::default())?;
    let images: Vec<&[f64]> = (0..train.len()).map(|i| train.image(i)).collect();
    network::fit_output_range(&config, &weights, &images, 1.0)
}

/// 8x8 input, two conv/pool stages and two dense layers.
pub fn toy_config() -> CnnConfig {
    let conv = |kernels| {
        LayerSpec::Conv(ConvSpec {
            kernels,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: Padding::Same,
        })
    };
    let pool = LayerSpec::MaapActPool(PoolSpec {
        window: 2,
        stride: 2,
    });
    CnnConfig {
        input_h: 8,
        input_w: 8,
        input_channels: 1,
        layers: vec![
            conv(3),
            pool,
            conv(4),
            pool,
            LayerSpec::FullyConnected(DenseSpec {
                inputs: 16,
                outputs: 12,
            }),
            LayerSpec::FullyConnected(DenseSpec {
                inputs: 12,
                outputs: 10,
            }),
        ],
    }
}

pub fn random_dataset(n: usize, h: usize, w: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..n * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..10u8)).collect();
    LabeledDataset::new(
        RawImages {
            count: n,
            rows: h,
            cols: w,
            pixels,
        },
        labels,
    )
    .unwrap()
}

pub fn random_weights(config: &CnnConfig, scale: f64, seed: u64) -> WeightSet {
    let mut w = WeightSet::zeros(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    w.values_mut()
        .for_each(|v| *v = rng.random_range(-scale..scale));
    w
}

/// Plain CNN with nested-vector tensors: zero-padded correlation, ReLU,
/// max-pool, clamp at `v_sat`; dense outputs clamped to `[0, v_sat]`.
pub fn plain_forward(
    config: &CnnConfig,
    weights: &WeightSet,
    image: &[f64],
    v_sat: f64,
) -> Vec<f64> {
    let (h, w) = (config.input_h, config.input_w);
    let mut act: Vec<Vec<Vec<f64>>> =
        vec![(0..h).map(|y| image[y * w..(y + 1) * w].to_vec()).collect()];
    let mut flat: Option<Vec<f64>> = None;
    let mut params = weights.layers.iter();
    for layer in &config.layers {
        match layer {
            LayerSpec::Conv(c) => {
                let lw = params.next().unwrap();
                let WeightKind::Conv {
                    kernels,
                    in_channels,
                    kernel_h,
                    kernel_w,
                } = lw.kind
                else {
                    panic!("conv weights expected")
                };
                let (ih, iw) = (act[0].len(), act[0][0].len());
                let (oh, ow, py, px) = match c.padding {
                    Padding::Same => {
                        let oh = ih.div_ceil(c.stride);
                        let ow = iw.div_ceil(c.stride);
                        let ty = ((oh - 1) * c.stride + kernel_h).saturating_sub(ih);
                        let tx = ((ow - 1) * c.stride + kernel_w).saturating_sub(iw);
                        (oh, ow, ty / 2, tx / 2)
                    }
                    Padding::Valid => (
                        (ih - kernel_h) / c.stride + 1,
                        (iw - kernel_w) / c.stride + 1,
                        0,
                        0,
                    ),
                };
                let mut out = vec![vec![vec![0.0; ow]; oh]; kernels];
                for (k, plane) in out.iter_mut().enumerate() {
                    for (oy, row) in plane.iter_mut().enumerate() {
                        for (ox, cell) in row.iter_mut().enumerate() {
                            let mut s = 0.0;
                            for (ci, chan) in act.iter().enumerate().take(in_channels) {
                                for ky in 0..kernel_h {
                                    for kx in 0..kernel_w {
                                        let y = (oy * c.stride + ky) as isize - py as isize;
                                        let x = (ox * c.stride + kx) as isize - px as isize;
                                        if y < 0 || x < 0 || y as usize >= ih || x as usize >= iw {
                                            continue;
                                        }
                                        let wi = ((k * in_channels + ci) * kernel_h + ky)
                                            * kernel_w
                                            + kx;
                                        s += lw.weights[wi] * chan[y as usize][x as usize];
                                    }
                                }
                            }
                            *cell = s + lw.bias[k];
                        }
                    }
                }
                act = out;
            }
            LayerSpec::MaapActPool(p) => {
                let (ih, iw) = (act[0].len(), act[0][0].len());
                let (oh, ow) = (
                    (ih - p.window) / p.stride + 1,
                    (iw - p.window) / p.stride + 1,
                );
                act = act
                    .iter()
                    .map(|plane| {
                        (0..oh)
                            .map(|oy| {
                                (0..ow)
                                    .map(|ox| {
                                        let mut m = 0.0f64;
                                        for dy in 0..p.window {
                                            for dx in 0..p.window {
                                                m = m.max(
                                                    plane[oy * p.stride + dy][ox * p.stride + dx]
                                                        .max(0.0),
                                                );
                                            }
                                        }
                                        m.min(v_sat)
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
            }
            LayerSpec::FullyConnected(d) => {
                let lw = params.next().unwrap();
                let input = flat
                    .take()
                    .unwrap_or_else(|| act.iter().flatten().flatten().copied().collect());
                let out = (0..d.outputs)
                    .map(|o| {
                        let s: f64 = (0..d.inputs)
                            .map(|i| lw.weights[o * d.inputs + i] * input[i])
                            .sum();
                        (s + lw.bias[o]).clamp(0.0, v_sat)
                    })
                    .collect();
                flat = Some(out);
            }
        }
    }
    flat.unwrap_or_else(|| act.iter().flatten().flatten().copied().collect())
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Largest relative error between the noiseless full-precision MAAP-CNN and
/// [`plain_forward`] over `n` random images.
pub fn network_oracle_error(n: usize) -> f64 {
    use maap_core::device::DeviceIdealParams;
    use maap_core::network::{DeviceContext, MaapCnn};
    let config = network::default_config();
    let weights = random_weights(&config, 0.15, 11);
    let net = MaapCnn::new(config.clone(), &weights, 32, 1.0).unwrap();
    let data = random_dataset(n, 28, 28, 12);
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut ctx = DeviceContext::ideal(DeviceIdealParams::default());
        let got = net.forward(data.image(i), &mut ctx).unwrap();
        let want = plain_forward(&config, &weights, data.image(i), 1.0);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max(relative_error(*g, *w));
        }
    }
    worst
}

/// Tensors (out of `n` random ones) where the MAAP layer differs from a
/// per-window relu/max/clamp scan.
pub fn maap_layer_oracle_mismatches(n: usize) -> usize {
    use maap_core::device::DeviceIdealParams;
    use maap_core::network::{maap_layer_forward, DeviceContext, Shape, Tensor3};
    use maap_core::quantization::QuantSpec;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut bad = 0;
    for _ in 0..n {
        let window = rng.random_range(1..=3);
        let stride = rng.random_range(1..=3);
        let shape = Shape::new(
            rng.random_range(1..=4),
            rng.random_range(window..=9),
            rng.random_range(window..=9),
        );
        let v_sat = rng.random_range(0.2..2.0);
        let data: Vec<f64> = (0..shape.len())
            .map(|_| rng.random_range(-1.5..2.5))
            .collect();
        let t = Tensor3::new(shape, data).unwrap();
        let pool = PoolSpec { window, stride };
        let mut ctx = DeviceContext::ideal(DeviceIdealParams::new(v_sat).unwrap());
        let adc = QuantSpec::pass_through(0.0, v_sat).unwrap();
        let out = maap_layer_forward(&t, &pool, &mut ctx, &adc).unwrap();
        let (oh, ow) = (
            (shape.height - window) / stride + 1,
            (shape.width - window) / stride + 1,
        );
        let mut expected = Vec::new();
        for c in 0..shape.channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut window_vals = Vec::new();
                    for dy in 0..window {
                        for dx in 0..window {
                            window_vals.push(t.get(c, oy * stride + dy, ox * stride + dx));
                        }
                    }
                    let m = window_vals.iter().map(|v| v.max(0.0)).fold(0.0, f64::max);
                    expected.push(m.min(v_sat));
                }
            }
        }
        if out.shape != Shape::new(shape.channels, oh, ow) || out.data != expected {
            bad += 1;
        }
    }
    bad
}

/// Central-difference check of `loss_and_gradients` on [`toy_config`].
/// Returns the number of components compared and the worst relative error.
pub fn gradient_check() -> (usize, f64) {
    let config = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let weights = trainer::init_weights(&config, &mut rng).unwrap();
    let mut weights = weights;
    // Nonzero biases so no unit sits exactly at a ReLU kink.
    for layer in &mut weights.layers {
        layer
            .bias
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    let data = random_dataset(4, 8, 8, 32);
    let batch: Vec<(&[f64], u8)> = data.iter().collect();
    let (_, grads) = trainer::loss_and_gradients(&config, &weights, &batch).unwrap();
    let analytic: Vec<f64> = grads.values().copied().collect();
    let h = 1e-5;
    let loss_at = |w: &WeightSet| trainer::loss_and_gradients(&config, w, &batch).unwrap().0;
    let mut compared = 0;
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = weights.clone();
        *plus.values_mut().nth(i).unwrap() += h;
        let mut minus = weights.clone();
        *minus.values_mut().nth(i).unwrap() -= h;
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        // Components whose true gradient is zero (dead units) carry no signal.
        if a.abs().max(numeric.abs()) < 1e-7 {
            continue;
        }
        compared += 1;
        worst = worst.max(relative_error(a, numeric));
    }
    (compared, worst)
}
