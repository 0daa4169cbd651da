//! MAAP-CNN dataflow.
//!
//! Convolutions are digital multiplies of quantized weights and inputs whose
//! products are summed as analog currents. Each convolution feeds a group of
//! MAAP sets that apply the saturating ReLU and the winner-take-all pool in
//! one step; their outputs pass through the ADC into SRAM. The final
//! fully-connected layer reads every output through a singleton MAAP set, so
//! device noise and redundancy apply to the whole network.

use crate::device::{redundant_maap, DeviceIdealParams, DeviceVariationSpec};
use crate::experiments::StreamKey;
use crate::quantization::{quantize, quantize_weights, weight_specs, QuantSpec};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: Padding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseSpec {
    pub inputs: usize,
    pub outputs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    MaapActPool(PoolSpec),
    FullyConnected(DenseSpec),
}

/// Activation tensor shape in channel-major order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

impl ConvSpec {
    /// Leading (top/left) zero padding for each axis.
    pub fn padding_before(&self, input: Shape) -> (usize, usize) {
        match self.padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let out = self.output_shape(input);
                let total = |out: usize, k: usize, n: usize| {
                    ((out - 1) * self.stride + k).saturating_sub(n) / 2
                };
                (
                    total(out.height, self.kernel_h, input.height),
                    total(out.width, self.kernel_w, input.width),
                )
            }
        }
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        let dim = |n: usize, k: usize| match self.padding {
            Padding::Same => n.div_ceil(self.stride),
            Padding::Valid if n >= k => (n - k) / self.stride + 1,
            Padding::Valid => 0,
        };
        Shape::new(
            self.kernels,
            dim(input.height, self.kernel_h),
            dim(input.width, self.kernel_w),
        )
    }
}

impl PoolSpec {
    /// Partial windows at the right and bottom edges are dropped.
    pub fn output_shape(&self, input: Shape) -> Shape {
        let dim = |n: usize| {
            if n >= self.window {
                (n - self.window) / self.stride + 1
            } else {
                0
            }
        };
        Shape::new(input.channels, dim(input.height), dim(input.width))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl CnnConfig {
    pub fn input_shape(&self) -> Shape {
        Shape::new(self.input_channels, self.input_h, self.input_w)
    }

    /// Checks the chaining invariants and returns the output shape of every
    /// layer in order.
    pub fn layer_shapes(&self) -> Result<Vec<Shape>> {
        let invalid = |msg: String| Err(Error::InvalidConfig(msg));
        if self.input_shape().is_empty() {
            return invalid("input shape must be non-empty".into());
        }
        if self.layers.is_empty() {
            return invalid("network has no layers".into());
        }
        let mut shape = self.input_shape();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                LayerSpec::Conv(c) => {
                    if c.kernels == 0 || c.kernel_h == 0 || c.kernel_w == 0 || c.stride == 0 {
                        return invalid(format!("layer {i}: conv sizes must be positive"));
                    }
                    if !matches!(self.layers.get(i + 1), Some(LayerSpec::MaapActPool(_))) {
                        return invalid(format!(
                            "layer {i}: convolution must be followed by a MAAP activation-pool layer"
                        ));
                    }
                    c.output_shape(shape)
                }
                LayerSpec::MaapActPool(p) => {
                    if p.window == 0 || p.stride == 0 {
                        return invalid(format!("layer {i}: pool sizes must be positive"));
                    }
                    p.output_shape(shape)
                }
                LayerSpec::FullyConnected(d) => {
                    if d.inputs == 0 || d.outputs == 0 {
                        return invalid(format!("layer {i}: dense sizes must be positive"));
                    }
                    if d.inputs != shape.len() {
                        return invalid(format!(
                            "layer {i}: dense layer expects {} inputs, previous layer yields {}",
                            d.inputs,
                            shape.len()
                        ));
                    }
                    Shape::new(d.outputs, 1, 1)
                }
            };
            if shape.is_empty() {
                return invalid(format!("layer {i}: output shape {shape} is empty"));
            }
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn output_len(&self) -> Result<usize> {
        Ok(self.layer_shapes()?.last().map_or(0, Shape::len))
    }

    /// Parameter shapes of the weighted layers, in layer order.
    pub fn weight_kinds(&self) -> Result<Vec<WeightKind>> {
        let shapes = self.layer_shapes()?;
        let mut input = self.input_shape();
        let mut kinds = Vec::new();
        for (layer, out) in self.layers.iter().zip(&shapes) {
            match layer {
                LayerSpec::Conv(c) => kinds.push(WeightKind::Conv {
                    kernels: c.kernels,
                    in_channels: input.channels,
                    kernel_h: c.kernel_h,
                    kernel_w: c.kernel_w,
                }),
                LayerSpec::FullyConnected(d) => kinds.push(WeightKind::Dense {
                    outputs: d.outputs,
                    inputs: d.inputs,
                }),
                LayerSpec::MaapActPool(_) => {}
            }
            input = *out;
        }
        Ok(kinds)
    }
}

/// 28x28x1 input, two conv(4 kernels, 5x5, same) + 2x2/2 MAAP stages, then a
/// 196 -> 10 fully-connected layer.
pub fn default_config() -> CnnConfig {
    let conv = LayerSpec::Conv(ConvSpec {
        kernels: 4,
        kernel_h: 5,
        kernel_w: 5,
        stride: 1,
        padding: Padding::Same,
    });
    let pool = LayerSpec::MaapActPool(PoolSpec {
        window: 2,
        stride: 2,
    });
    CnnConfig {
        input_h: 28,
        input_w: 28,
        input_channels: 1,
        layers: vec![
            conv,
            pool,
            conv,
            pool,
            LayerSpec::FullyConnected(DenseSpec {
                inputs: 196,
                outputs: 10,
            }),
        ],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightKind {
    /// Kernel tensor laid out `kernels x in_channels x kernel_h x kernel_w`.
    Conv {
        kernels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    /// Matrix laid out `outputs x inputs`.
    Dense { outputs: usize, inputs: usize },
}

impl WeightKind {
    pub fn weight_len(&self) -> usize {
        match *self {
            WeightKind::Conv {
                kernels,
                in_channels,
                kernel_h,
                kernel_w,
            } => kernels * in_channels * kernel_h * kernel_w,
            WeightKind::Dense { outputs, inputs } => outputs * inputs,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            WeightKind::Conv { kernels, .. } => kernels,
            WeightKind::Dense { outputs, .. } => outputs,
        }
    }

    /// `(fan_in, fan_out)` as used by Glorot initialization.
    pub fn fans(&self) -> (usize, usize) {
        match *self {
            WeightKind::Conv {
                kernels,
                in_channels,
                kernel_h,
                kernel_w,
            } => (
                in_channels * kernel_h * kernel_w,
                kernels * kernel_h * kernel_w,
            ),
            WeightKind::Dense { outputs, inputs } => (inputs, outputs),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub kind: WeightKind,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerWeights {
    pub fn zeros(kind: WeightKind) -> Self {
        Self {
            kind,
            weights: vec![0.0; kind.weight_len()],
            bias: vec![0.0; kind.bias_len()],
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Trained parameters of every weighted layer, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    pub layers: Vec<LayerWeights>,
}

impl WeightSet {
    pub fn zeros(config: &CnnConfig) -> Result<Self> {
        Ok(Self {
            layers: config
                .weight_kinds()?
                .into_iter()
                .map(LayerWeights::zeros)
                .collect(),
        })
    }

    pub fn validate_for(&self, config: &CnnConfig) -> Result<()> {
        let kinds = config.weight_kinds()?;
        if kinds.len() != self.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "config has {} weighted layers, weights have {}",
                kinds.len(),
                self.layers.len()
            )));
        }
        for (i, (kind, layer)) in kinds.iter().zip(&self.layers).enumerate() {
            if *kind != layer.kind
                || layer.weights.len() != kind.weight_len()
                || layer.bias.len() != kind.bias_len()
            {
                return Err(Error::ShapeMismatch(format!(
                    "weighted layer {i}: expected {kind:?}, found {:?}",
                    layer.kind
                )));
            }
            if !layer.values().all(|v| v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "weighted layer {i} has non-finite values"
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(LayerWeights::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(LayerWeights::values_mut)
    }
}

/// Dense activation tensor, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }
}

/// Per-image device state: the transfer model, the variation model, the
/// redundancy factor and the image's noise streams. Each call into a MAAP
/// layer advances a logical-op counter so every MAAP evaluation draws from
/// its own stream.
#[derive(Clone, Debug)]
pub struct DeviceContext {
    pub params: DeviceIdealParams,
    pub variation: DeviceVariationSpec,
    pub redundancy: usize,
    pub streams: StreamKey,
    next_op: u64,
}

impl DeviceContext {
    pub fn new(
        params: DeviceIdealParams,
        variation: DeviceVariationSpec,
        redundancy: usize,
        streams: StreamKey,
    ) -> Result<Self> {
        if redundancy == 0 {
            return Err(Error::ZeroRedundancy);
        }
        variation.validate()?;
        Ok(Self {
            params,
            variation,
            redundancy,
            streams,
            next_op: 0,
        })
    }

    /// Noiseless device with unit redundancy.
    pub fn ideal(params: DeviceIdealParams) -> Self {
        Self {
            params,
            variation: DeviceVariationSpec::ideal(),
            redundancy: 1,
            streams: StreamKey::default(),
            next_op: 0,
        }
    }

    /// Logical MAAP operations evaluated so far.
    pub fn ops_evaluated(&self) -> u64 {
        self.next_op
    }

    fn evaluate(&mut self, window: &[f64]) -> Result<f64> {
        let op = self.next_op;
        self.next_op += 1;
        let mut rng = self.streams.op_stream(op);
        redundant_maap(
            window,
            &self.params,
            &self.variation,
            self.redundancy,
            &mut rng,
        )
    }
}

/// Quantized-input convolution; analog accumulation is exact.
pub fn conv_forward(
    input: &Tensor3,
    layer: &ConvSpec,
    weights: &LayerWeights,
    quant: &QuantSpec,
) -> Result<Tensor3> {
    let in_shape = input.shape;
    let expected = WeightKind::Conv {
        kernels: layer.kernels,
        in_channels: in_shape.channels,
        kernel_h: layer.kernel_h,
        kernel_w: layer.kernel_w,
    };
    if weights.kind != expected
        || weights.weights.len() != expected.weight_len()
        || weights.bias.len() != expected.bias_len()
    {
        return Err(Error::ShapeMismatch(format!(
            "conv weights {:?} do not fit input {in_shape} with {expected:?}",
            weights.kind
        )));
    }
    let out_shape = layer.output_shape(in_shape);
    if out_shape.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "conv output is empty for input {in_shape}"
        )));
    }
    let q: Vec<f64> = input.data.iter().map(|&x| quantize(x, quant)).collect();
    let (pad_y, pad_x) = layer.padding_before(in_shape);
    let (kh, kw) = (layer.kernel_h, layer.kernel_w);
    let mut out = Tensor3::zeros(out_shape);
    for k in 0..out_shape.channels {
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let mut sum = 0.0;
                for c in 0..in_shape.channels {
                    for ky in 0..kh {
                        let iy = (oy * layer.stride + ky) as isize - pad_y as isize;
                        if iy < 0 || iy >= in_shape.height as isize {
                            continue;
                        }
                        let row = (c * in_shape.height + iy as usize) * in_shape.width;
                        let wrow = ((k * in_shape.channels + c) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * layer.stride + kx) as isize - pad_x as isize;
                            if ix < 0 || ix >= in_shape.width as isize {
                                continue;
                            }
                            sum += weights.weights[wrow + kx] * q[row + ix as usize];
                        }
                    }
                }
                let idx = out.index(k, oy, ox);
                out.data[idx] = sum + weights.bias[k];
            }
        }
    }
    Ok(out)
}

/// One MAAP set per pooling window: redundant read, then ADC.
pub fn maap_layer_forward(
    pre_act: &Tensor3,
    layer: &PoolSpec,
    ctx: &mut DeviceContext,
    adc: &QuantSpec,
) -> Result<Tensor3> {
    if pre_act.shape.is_empty() {
        return Err(Error::ShapeMismatch("empty tensor".into()));
    }
    let out_shape = layer.output_shape(pre_act.shape);
    if out_shape.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "pool window {} does not fit input {}",
            layer.window, pre_act.shape
        )));
    }
    let mut window = Vec::with_capacity(layer.window * layer.window);
    let mut out = Tensor3::zeros(out_shape);
    for c in 0..out_shape.channels {
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                window.clear();
                for dy in 0..layer.window {
                    for dx in 0..layer.window {
                        window.push(pre_act.get(c, oy * layer.stride + dy, ox * layer.stride + dx));
                    }
                }
                let idx = out.index(c, oy, ox);
                out.data[idx] = quantize(ctx.evaluate(&window)?, adc);
            }
        }
    }
    Ok(out)
}

/// Fully-connected layer read through one singleton MAAP set per output.
pub fn fc_forward(
    input: &[f64],
    weights: &LayerWeights,
    ctx: &mut DeviceContext,
    quant: &QuantSpec,
) -> Result<Vec<f64>> {
    let WeightKind::Dense { outputs, inputs } = weights.kind else {
        return Err(Error::ShapeMismatch("expected dense weights".into()));
    };
    if input.len() != inputs || weights.weights.len() != outputs * inputs {
        return Err(Error::ShapeMismatch(format!(
            "dense layer expects {inputs} inputs, got {}",
            input.len()
        )));
    }
    let q: Vec<f64> = input.iter().map(|&x| quantize(x, quant)).collect();
    weights
        .weights
        .chunks_exact(inputs)
        .zip(&weights.bias)
        .map(|(row, b)| {
            let dot: f64 = row.iter().zip(&q).map(|(w, x)| w * x).sum();
            Ok(quantize(ctx.evaluate(&[dot + b])?, quant))
        })
        .collect()
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// A network ready for hardware inference: weights already quantized to
/// `bits` and an activation/ADC quantizer over `[0, v_sat]`.
#[derive(Clone, Debug)]
pub struct MaapCnn {
    config: CnnConfig,
    weights: WeightSet,
    act_quant: QuantSpec,
}

impl MaapCnn {
    pub fn new(config: CnnConfig, weights: &WeightSet, bits: u32, v_sat: f64) -> Result<Self> {
        weights.validate_for(&config)?;
        let specs = weight_specs(weights, bits)?;
        let weights = quantize_weights(weights, &specs)?;
        let act_quant = QuantSpec::new(bits, DeviceIdealParams::V_FLOOR, v_sat)?;
        Ok(Self {
            config,
            weights,
            act_quant,
        })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn weights(&self) -> &WeightSet {
        &self.weights
    }

    pub fn act_quant(&self) -> &QuantSpec {
        &self.act_quant
    }

    /// Class scores read from the final layer.
    pub fn forward(&self, image: &[f64], ctx: &mut DeviceContext) -> Result<Vec<f64>> {
        let mut t = Tensor3::new(self.config.input_shape(), image.to_vec())?;
        let mut weighted = self.weights.layers.iter();
        let mut missing = || Error::ShapeMismatch("fewer weighted layers than config".into());
        for layer in &self.config.layers {
            t = match layer {
                LayerSpec::Conv(c) => conv_forward(
                    &t,
                    c,
                    weighted.next().ok_or_else(&mut missing)?,
                    &self.act_quant,
                )?,
                LayerSpec::MaapActPool(p) => maap_layer_forward(&t, p, ctx, &self.act_quant)?,
                LayerSpec::FullyConnected(d) => {
                    let w = weighted.next().ok_or_else(&mut missing)?;
                    let out = fc_forward(&t.data, w, ctx, &self.act_quant)?;
                    Tensor3::new(Shape::new(d.outputs, 1, 1), out)?
                }
            };
        }
        Ok(t.data)
    }

    pub fn classify(&self, image: &[f64], ctx: &mut DeviceContext) -> Result<usize> {
        Ok(argmax(&self.forward(image, ctx)?))
    }
}

/// Architectural operation counts for one image, before redundancy.
///
/// `n_multiplies` counts in-bounds products of conv and dense layers (each
/// costs `B^2` gates). `n_mem_bitops` counts SRAM word accesses (each costs
/// `B` bit-ops): one weight and one input read per product plus one write per
/// ADC conversion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCountsComputed {
    pub n_maap_logical: u64,
    pub n_pooled_outputs: u64,
    pub n_multiplies: u64,
    pub n_adc: u64,
    pub n_mem_bitops: u64,
}

impl OpCountsComputed {
    /// Scales the architectural counts by word length and redundancy.
    pub fn to_op_counts(&self, bits: u32, redundancy: u64) -> crate::energy::OpCounts {
        let b = u64::from(bits);
        crate::energy::OpCounts {
            n_maap: self.n_maap_logical * redundancy,
            n_mem: self.n_mem_bitops * b,
            n_adc: self.n_adc * b,
            n_mul: self.n_multiplies * b * b,
        }
    }
}

/// Counts operations for a configuration. Every pre-pool conv activation is
/// one activation pair inside a winner-take-all group, and every dense output
/// is one singleton MAAP set.
pub fn count_ops(config: &CnnConfig) -> Result<OpCountsComputed> {
    let shapes = config.layer_shapes()?;
    let mut counts = OpCountsComputed::default();
    let mut input = config.input_shape();
    for (layer, out) in config.layers.iter().zip(&shapes) {
        match layer {
            LayerSpec::Conv(c) => {
                counts.n_maap_logical += out.len() as u64;
                let (pad_y, pad_x) = c.padding_before(input);
                let taps = |n_out: usize, k: usize, pad: usize, n_in: usize| -> u64 {
                    (0..n_out)
                        .map(|o| {
                            (0..k)
                                .filter(|&t| {
                                    let i = (o * c.stride + t) as isize - pad as isize;
                                    i >= 0 && (i as usize) < n_in
                                })
                                .count() as u64
                        })
                        .sum()
                };
                let rows = taps(out.height, c.kernel_h, pad_y, input.height);
                let cols = taps(out.width, c.kernel_w, pad_x, input.width);
                counts.n_multiplies += rows * cols * (c.kernels * input.channels) as u64;
            }
            LayerSpec::MaapActPool(_) => {
                counts.n_pooled_outputs += out.len() as u64;
                counts.n_adc += out.len() as u64;
            }
            LayerSpec::FullyConnected(d) => {
                counts.n_maap_logical += d.outputs as u64;
                counts.n_adc += d.outputs as u64;
                counts.n_multiplies += (d.inputs * d.outputs) as u64;
            }
        }
        input = *out;
    }
    counts.n_mem_bitops = 2 * counts.n_multiplies + counts.n_adc;
    Ok(counts)
}

/// Rescales trained weights so that every MAAP stage's largest activation
/// over `calibration` images maps to `v_sat`.
///
/// ReLU and max-pool commute with positive scaling, so scaling layer `l` by
/// `s_l` and dividing the next layer's weights (not its bias) by `s_l`
/// leaves the argmax of the final scores unchanged while placing every
/// activation inside the device's linear range.
pub fn fit_output_range(
    config: &CnnConfig,
    weights: &WeightSet,
    calibration: &[&[f64]],
    v_sat: f64,
) -> Result<WeightSet> {
    weights.validate_for(config)?;
    if calibration.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let maxima = weighted_layer_maxima(config, weights, calibration)?;
    let mut out = weights.clone();
    let mut prev_scale = 1.0;
    for (layer, max) in out.layers.iter_mut().zip(maxima) {
        let scale = if max > 0.0 { v_sat / max } else { prev_scale };
        let ratio = scale / prev_scale;
        layer.weights.iter_mut().for_each(|w| *w *= ratio);
        layer.bias.iter_mut().for_each(|b| *b *= scale);
        prev_scale = scale;
    }
    Ok(out)
}

/// Largest rectified output of each weighted layer's MAAP stage under an
/// unsaturated, noiseless, full-precision forward pass.
fn weighted_layer_maxima(
    config: &CnnConfig,
    weights: &WeightSet,
    images: &[&[f64]],
) -> Result<Vec<f64>> {
    let unbounded = QuantSpec::pass_through(0.0, f64::MAX)?;
    let params = DeviceIdealParams::new(f64::MAX)?;
    let mut maxima = vec![0.0f64; weights.layers.len()];
    for image in images {
        let mut ctx = DeviceContext::ideal(params);
        let mut t = Tensor3::new(config.input_shape(), image.to_vec())?;
        let mut li = 0;
        let mut pending_conv = None;
        for layer in &config.layers {
            match layer {
                LayerSpec::Conv(c) => {
                    t = conv_forward(&t, c, &weights.layers[li], &unbounded)?;
                    pending_conv = Some(li);
                    li += 1;
                }
                LayerSpec::MaapActPool(p) => {
                    t = maap_layer_forward(&t, p, &mut ctx, &unbounded)?;
                    if let Some(conv) = pending_conv.take() {
                        let m = t.data.iter().copied().fold(0.0, f64::max);
                        maxima[conv] = maxima[conv].max(m);
                    }
                }
                LayerSpec::FullyConnected(d) => {
                    let out = fc_forward(&t.data, &weights.layers[li], &mut ctx, &unbounded)?;
                    maxima[li] = maxima[li].max(out.iter().copied().fold(0.0, f64::max));
                    t = Tensor3::new(Shape::new(d.outputs, 1, 1), out)?;
                    li += 1;
                }
            }
        }
    }
    Ok(maxima)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::relu;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pass(v_sat: f64) -> QuantSpec {
        QuantSpec::pass_through(0.0, v_sat).unwrap()
    }

    fn ideal_ctx() -> DeviceContext {
        DeviceContext::ideal(DeviceIdealParams::default())
    }

    fn random_weights(config: &CnnConfig, seed: u64, scale: f64) -> WeightSet {
        let mut w = WeightSet::zeros(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        w.values_mut()
            .for_each(|v| *v = rng.random_range(-scale..scale));
        w
    }

    #[test]
    fn default_config_shapes() {
        let shapes = default_config().layer_shapes().unwrap();
        let rendered: Vec<String> = shapes.iter().map(Shape::to_string).collect();
        assert_eq!(
            rendered,
            ["28x28x4", "14x14x4", "14x14x4", "7x7x4", "1x1x10"]
        );
    }

    #[test]
    fn default_config_maap_count() {
        let counts = count_ops(&default_config()).unwrap();
        assert_eq!(counts.n_maap_logical, 28 * 28 * 4 + 14 * 14 * 4 + 10);
        assert_eq!(counts.n_maap_logical, 3930);
        assert_eq!(counts.n_pooled_outputs, 14 * 14 * 4 + 7 * 7 * 4);
        assert_eq!(counts.n_adc, counts.n_pooled_outputs + 10);
        // 134 in-bounds taps per axis at 28 wide, 64 at 14 wide.
        assert_eq!(counts.n_multiplies, 134 * 134 * 4 + 64 * 64 * 16 + 1960);
    }

    #[test]
    fn single_dense_network_counts_one_maap_op() {
        let config = CnnConfig {
            input_h: 1,
            input_w: 1,
            input_channels: 1,
            layers: vec![LayerSpec::FullyConnected(DenseSpec {
                inputs: 1,
                outputs: 1,
            })],
        };
        assert_eq!(count_ops(&config).unwrap().n_maap_logical, 1);
    }

    #[test]
    fn removing_conv_pair_decreases_counts() {
        let full = count_ops(&default_config()).unwrap();
        let mut config = default_config();
        config.layers.drain(2..4);
        config.layers[2] = LayerSpec::FullyConnected(DenseSpec {
            inputs: 784,
            outputs: 10,
        });
        let reduced = count_ops(&config).unwrap();
        assert!(reduced.n_maap_logical < full.n_maap_logical);
        assert!(reduced.n_pooled_outputs < full.n_pooled_outputs);
        assert!(reduced.n_adc < full.n_adc);
        assert!(reduced.n_mem_bitops < full.n_mem_bitops);
        assert!(reduced.n_multiplies < full.n_multiplies);
    }

    #[test]
    fn config_chaining_is_enforced() {
        let mut lone_conv = default_config();
        lone_conv.layers.remove(1);
        assert!(matches!(
            lone_conv.layer_shapes(),
            Err(Error::InvalidConfig(_))
        ));

        let mut bad_dense = default_config();
        bad_dense.layers[4] = LayerSpec::FullyConnected(DenseSpec {
            inputs: 195,
            outputs: 10,
        });
        assert!(bad_dense.layer_shapes().is_err());
    }

    #[test]
    fn unit_kernel_is_identity() {
        let input = Tensor3::new(
            Shape::new(1, 3, 3),
            (0..9).map(|i| i as f64 / 10.0).collect(),
        )
        .unwrap();
        let layer = ConvSpec {
            kernels: 1,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: Padding::Valid,
        };
        let w = LayerWeights {
            kind: WeightKind::Conv {
                kernels: 1,
                in_channels: 1,
                kernel_h: 1,
                kernel_w: 1,
            },
            weights: vec![1.0],
            bias: vec![0.0],
        };
        assert_eq!(conv_forward(&input, &layer, &w, &pass(1.0)).unwrap(), input);
    }

    #[test]
    fn zero_input_yields_bias() {
        let config = default_config();
        let mut w = random_weights(&config, 4, 0.3);
        w.layers[0].bias = vec![0.1, -0.2, 0.3, 0.0];
        let LayerSpec::Conv(layer) = config.layers[0] else {
            unreachable!()
        };
        let input = Tensor3::zeros(config.input_shape());
        for bits in [4, 8, 32] {
            let q = QuantSpec::new(bits, 0.0, 1.0).unwrap();
            let out = conv_forward(&input, &layer, &w.layers[0], &q).unwrap();
            for k in 0..4 {
                for y in 0..28 {
                    for x in 0..28 {
                        assert_eq!(out.get(k, y, x), w.layers[0].bias[k]);
                    }
                }
            }
        }
    }

    #[test]
    fn ones_kernel_sums_nine_terms() {
        let input = Tensor3::new(Shape::new(1, 3, 3), vec![0.1; 9]).unwrap();
        let layer = ConvSpec {
            kernels: 1,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: Padding::Valid,
        };
        let w = LayerWeights {
            kind: WeightKind::Conv {
                kernels: 1,
                in_channels: 1,
                kernel_h: 3,
                kernel_w: 3,
            },
            weights: vec![1.0; 9],
            bias: vec![0.0],
        };
        let out = conv_forward(&input, &layer, &w, &pass(1.0)).unwrap();
        assert_eq!(out.data.len(), 1);
        assert!((out.data[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn conv_rejects_mismatched_weights() {
        let input = Tensor3::zeros(Shape::new(2, 4, 4));
        let layer = ConvSpec {
            kernels: 1,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: Padding::Same,
        };
        let w = LayerWeights::zeros(WeightKind::Conv {
            kernels: 1,
            in_channels: 1,
            kernel_h: 3,
            kernel_w: 3,
        });
        assert!(matches!(
            conv_forward(&input, &layer, &w, &pass(1.0)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn maap_layer_takes_window_max() {
        let pre = Tensor3::new(Shape::new(1, 2, 2), vec![0.1, 0.7, -0.3, 0.2]).unwrap();
        let pool = PoolSpec {
            window: 2,
            stride: 2,
        };
        let out = maap_layer_forward(&pre, &pool, &mut ideal_ctx(), &pass(1.0)).unwrap();
        assert_eq!(out.data, vec![0.7]);
    }

    #[test]
    fn maap_layer_negative_input_floors_to_zero() {
        let pre = Tensor3::new(Shape::new(2, 4, 4), vec![-0.5; 32]).unwrap();
        let pool = PoolSpec {
            window: 2,
            stride: 2,
        };
        let out = maap_layer_forward(&pre, &pool, &mut ideal_ctx(), &pass(1.0)).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
        let empty = Tensor3::zeros(Shape::new(0, 4, 4));
        assert!(maap_layer_forward(&empty, &pool, &mut ideal_ctx(), &pass(1.0)).is_err());
    }

    #[test]
    fn unit_window_is_saturating_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..48).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pre = Tensor3::new(Shape::new(3, 4, 4), data.clone()).unwrap();
        let pool = PoolSpec {
            window: 1,
            stride: 1,
        };
        let out = maap_layer_forward(&pre, &pool, &mut ideal_ctx(), &pass(1.0)).unwrap();
        for (y, x) in out.data.iter().zip(&data) {
            assert_eq!(*y, relu(*x).min(1.0));
        }
    }

    #[test]
    fn partial_windows_are_truncated() {
        let pre = Tensor3::new(
            Shape::new(1, 5, 5),
            (0..25).map(|i| i as f64 / 100.0).collect(),
        )
        .unwrap();
        let pool = PoolSpec {
            window: 2,
            stride: 2,
        };
        let out = maap_layer_forward(&pre, &pool, &mut ideal_ctx(), &pass(1.0)).unwrap();
        assert_eq!(out.shape, Shape::new(1, 2, 2));
        assert_eq!(out.data, vec![0.06, 0.08, 0.16, 0.18]);
    }

    fn dense(outputs: usize, inputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> LayerWeights {
        LayerWeights {
            kind: WeightKind::Dense { outputs, inputs },
            weights,
            bias,
        }
    }

    #[test]
    fn identity_dense_passes_inputs() {
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let w = dense(4, 4, eye, vec![0.0; 4]);
        let x = [0.1, 0.5, 0.0, 0.9];
        let out = fc_forward(&x, &w, &mut ideal_ctx(), &pass(1.0)).unwrap();
        assert_eq!(out, x.to_vec());
    }

    #[test]
    fn zero_dense_yields_bias() {
        let b = vec![0.2, 0.0, 1.0, 0.45];
        let w = dense(4, 3, vec![0.0; 12], b.clone());
        let out = fc_forward(&[0.3, 0.1, 0.7], &w, &mut ideal_ctx(), &pass(1.0)).unwrap();
        assert_eq!(out, b);
        assert!(fc_forward(&[0.3, 0.1], &w, &mut ideal_ctx(), &pass(1.0)).is_err());
    }

    #[test]
    fn noisy_dense_tracks_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (outs, ins) = (10, 30);
        let x: Vec<f64> = (0..ins).map(|_| rng.random_range(0.0..1.0)).collect();
        let weights: Vec<f64> = (0..outs * ins)
            .map(|_| rng.random_range(-0.05..0.05))
            .collect();
        let bias: Vec<f64> = (0..outs).map(|_| rng.random_range(0.3..0.6)).collect();
        let w = dense(outs, ins, weights.clone(), bias.clone());
        let sigma = 0.02;
        let variation = DeviceVariationSpec::with_total_sigma(sigma);
        let mut ctx = DeviceContext::new(
            DeviceIdealParams::default(),
            variation,
            4,
            StreamKey::new(5, 0, 0, 0),
        )
        .unwrap();
        let out = fc_forward(&x, &w, &mut ctx, &pass(1.0)).unwrap();
        for o in 0..outs {
            let mut dot = bias[o];
            for i in 0..ins {
                dot += weights[o * ins + i] * x[i];
            }
            // 5 standard deviations of the averaged read.
            assert!((out[o] - dot.clamp(0.0, 1.0)).abs() < 5.0 * sigma / 2.0);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
        assert_eq!(argmax(&[0.0; 10]), 0);
    }

    #[test]
    fn zero_weights_classify_by_bias() {
        let config = default_config();
        let mut w = WeightSet::zeros(&config).unwrap();
        w.layers[2].bias = vec![0.1, 0.2, 0.05, 0.7, 0.3, 0.0, 0.6, 0.65, 0.4, 0.5];
        let image = vec![0.0; 784];
        for bits in [4, 8, 32] {
            let net = MaapCnn::new(config.clone(), &w, bits, 1.0).unwrap();
            assert_eq!(net.classify(&image, &mut ideal_ctx()).unwrap(), 3);
        }
    }

    #[test]
    fn identical_seeds_classify_identically() {
        let config = default_config();
        let w = random_weights(&config, 8, 0.2);
        let net = MaapCnn::new(config, &w, 8, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image: Vec<f64> = (0..784).map(|_| rng.random_range(0.0..1.0)).collect();
        let run = || {
            let mut ctx = DeviceContext::new(
                DeviceIdealParams::default(),
                DeviceVariationSpec::default(),
                1,
                StreamKey::new(77, 1, 2, 3),
            )
            .unwrap();
            let scores = net.forward(&image, &mut ctx).unwrap();
            assert_eq!(ctx.ops_evaluated(), 784 + 196 + 10);
            scores
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fit_output_range_maps_maxima_to_full_scale() {
        let config = default_config();
        let w = random_weights(&config, 12, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let images: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..784).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
        let fitted = fit_output_range(&config, &w, &refs, 1.0).unwrap();
        let maxima = weighted_layer_maxima(&config, &fitted, &refs).unwrap();
        for m in maxima {
            assert!((m - 1.0).abs() < 1e-9, "max {m}");
        }
        // The unsaturated argmax is unchanged by the rescaling.
        let unbounded = DeviceIdealParams::new(f64::MAX).unwrap();
        let before = MaapCnn::new(config.clone(), &w, 32, f64::MAX).unwrap();
        let after = MaapCnn::new(config, &fitted, 32, f64::MAX).unwrap();
        for img in &images {
            let a = before
                .forward(img, &mut DeviceContext::ideal(unbounded))
                .unwrap();
            let b = after
                .forward(img, &mut DeviceContext::ideal(unbounded))
                .unwrap();
            let top = argmax(&a);
            if a[top] > 0.0 {
                assert_eq!(top, argmax(&b));
            }
        }
    }
}
