//! Small convolutional regressor mapping the three camera frames to the two
//! link angles.
//!
//! Three conv(3x3, pad 1) + ReLU + max-pool blocks with 4, 8 and 16 channels
//! and pool sizes 5, 4 and 2 reduce a 3x120x160 stack to 16x3x4 features,
//! followed by a 192 -> 40 ReLU layer and a linear 40 -> 2 output layer.
//! All parameters live in one flat buffer; [`LayerShape`] describes the
//! layout.

mod adamw;
mod gradcheck;
mod io;
pub mod ops;
mod train;

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::{gradient_check, TensorCheck};
pub use io::{load, read_model, save, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use train::{
    batch_gradient, mean_squared_error, predict_all, train, EpochStats, SliceSet, TrainConfig,
    TrainingSet, TrainingReport,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kinematics::Orientation;
use crate::{Error, Result};

/// Architecture description. The default is the 9378-parameter network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// (channels, height, width)
    pub input: (usize, usize, usize),
    pub conv_channels: Vec<usize>,
    pub pools: Vec<usize>,
    pub hidden: usize,
    pub outputs: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            input: (3, 120, 160),
            conv_channels: vec![4, 8, 16],
            pools: vec![5, 4, 2],
            hidden: 40,
            outputs: 2,
        }
    }
}

/// Kernel size shared by all convolutions.
pub const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerShape {
    Conv { out: usize, input: usize, kh: usize, kw: usize },
    Dense { out: usize, input: usize },
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        match *self {
            LayerShape::Conv { out, input, kh, kw } => out * input * kh * kw,
            LayerShape::Dense { out, input } => out * input,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerShape::Conv { out, .. } | LayerShape::Dense { out, .. } => out,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.bias_len()
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerShape::Conv { input, kh, kw, .. } => input * kh * kw,
            LayerShape::Dense { input, .. } => input,
        }
    }
}

impl NetworkSpec {
    /// Checks that every pooling stage divides its feature map exactly.
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.len() != self.pools.len() || self.conv_channels.is_empty() {
            return Err(Error::Config("conv_channels and pools must have equal, non-zero length".into()));
        }
        let (_, mut h, mut w) = self.input;
        for &k in &self.pools {
            if k == 0 || h % k != 0 || w % k != 0 {
                return Err(Error::Config(format!("pool {k} does not divide feature map {h}x{w}")));
            }
            h /= k;
            w /= k;
        }
        if self.hidden == 0 || self.outputs == 0 {
            return Err(Error::Config("dense widths must be non-zero".into()));
        }
        Ok(())
    }

    /// Spatial size after each pooling stage.
    pub fn feature_maps(&self) -> Vec<(usize, usize, usize)> {
        let (_, mut h, mut w) = self.input;
        self.conv_channels
            .iter()
            .zip(&self.pools)
            .map(|(&c, &k)| {
                h /= k;
                w /= k;
                (c, h, w)
            })
            .collect()
    }

    pub fn flattened(&self) -> usize {
        let (c, h, w) = *self.feature_maps().last().expect("validated spec");
        c * h * w
    }

    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut layers = Vec::new();
        let mut in_ch = self.input.0;
        for &c in &self.conv_channels {
            layers.push(LayerShape::Conv {
                out: c,
                input: in_ch,
                kh: KERNEL,
                kw: KERNEL,
            });
            in_ch = c;
        }
        layers.push(LayerShape::Dense {
            out: self.hidden,
            input: self.flattened(),
        });
        layers.push(LayerShape::Dense {
            out: self.outputs,
            input: self.hidden,
        });
        layers
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerShape::param_count).sum()
    }
}

/// Network parameters in one flat buffer, layer by layer, weights before
/// biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

impl Network {
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layers();
        Self::from_layers(spec, layers, None)
    }

    /// Uniform initialization with bound sqrt(1 / fan_in) for every weight and
    /// bias of a layer.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..net.layers.len() {
            let bound = (1.0 / net.layers[i].fan_in() as f64).sqrt();
            let (start, end) = (net.offsets[i], net.offsets[i + 1]);
            for p in &mut net.params[start..end] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub(crate) fn from_layers(spec: NetworkSpec, layers: Vec<LayerShape>, params: Option<Vec<f64>>) -> Result<Self> {
        if layers != spec.layers() {
            return Err(Error::Config("layer shapes do not match the network spec".into()));
        }
        let mut offsets = vec![0];
        for l in &layers {
            offsets.push(offsets.last().unwrap() + l.param_count());
        }
        let total = *offsets.last().unwrap();
        let params = match params {
            Some(p) if p.len() == total => p,
            Some(p) => return Err(Error::dimension(total, p.len())),
            None => vec![0.0; total],
        };
        Ok(Self {
            spec,
            layers,
            offsets,
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn layer_param_counts(&self) -> Vec<usize> {
        self.layers.iter().map(LayerShape::param_count).collect()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Range of layer `i` in the flat parameter buffer.
    pub fn layer_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// (weights, bias) of layer `i`.
    pub fn layer(&self, i: usize) -> (&[f64], &[f64]) {
        let s = &self.params[self.layer_range(i)];
        s.split_at(self.layers[i].weight_len())
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::new(&self.spec)
    }

    /// Predicts (alpha, beta) in degrees from a normalized 3x120x160 stack.
    pub fn forward(&self, input: &[f32]) -> Result<Orientation> {
        let mut ws = self.workspace();
        let [a, b] = self.forward_f32(input, &mut ws)?;
        Ok(Orientation::new(a, b))
    }

    pub fn forward_f32(&self, input: &[f32], ws: &mut Workspace) -> Result<[f64; 2]> {
        self.check_input(input.len())?;
        for (d, s) in ws.input.iter_mut().zip(input) {
            *d = f64::from(*s);
        }
        Ok(self.run_from(0, ws))
    }

    pub fn forward_f64(&self, input: &[f64], ws: &mut Workspace) -> Result<[f64; 2]> {
        self.check_input(input.len())?;
        ws.input.copy_from_slice(input);
        Ok(self.run_from(0, ws))
    }

    fn check_input(&self, len: usize) -> Result<()> {
        let expected = self.spec.input_len();
        if len != expected {
            let (c, h, w) = self.spec.input;
            return Err(Error::dimension(format!("{c}x{h}x{w} = {expected} values"), len));
        }
        if self.spec.outputs != 2 {
            return Err(Error::Config("angle regression requires two outputs".into()));
        }
        Ok(())
    }

    /// Recomputes the forward pass starting at layer `first`, reusing the
    /// activations already stored in `ws` for earlier layers.
    pub fn run_from(&self, first: usize, ws: &mut Workspace) -> [f64; 2] {
        let n_conv = self.spec.conv_channels.len();
        let (mut c, mut h, mut w) = self.spec.input;
        for stage in 0..n_conv {
            let oc = self.spec.conv_channels[stage];
            let k = self.spec.pools[stage];
            if stage >= first {
                let (weights, bias) = self.layer(stage);
                let (src, rest) = if stage == 0 {
                    (&ws.input[..], &mut ws.stages[..])
                } else {
                    let (done, rest) = ws.stages.split_at_mut(stage);
                    (&done[stage - 1].act[..], rest)
                };
                let st = &mut rest[0];
                ops::conv3x3_forward(src, c, h, w, weights, bias, oc, &mut st.conv);
                ops::maxpool_forward(&st.conv, oc, h, w, k, &mut st.pooled, &mut st.argmax);
                st.act.copy_from_slice(&st.pooled);
                ops::relu_in_place(&mut st.act);
            }
            c = oc;
            h /= k;
            w /= k;
        }
        if first <= n_conv {
            let (weights, bias) = self.layer(n_conv);
            ops::dense_forward(&ws.stages[n_conv - 1].act, weights, bias, &mut ws.hidden_pre);
            ws.hidden.copy_from_slice(&ws.hidden_pre);
            ops::relu_in_place(&mut ws.hidden);
        }
        let (weights, bias) = self.layer(n_conv + 1);
        ops::dense_forward(&ws.hidden, weights, bias, &mut ws.output);
        [ws.output[0], ws.output[1]]
    }

    /// Adds `d/dθ` of `scale * sum_j (y_j - t_j)^2 / 2` to `grad` for the sample
    /// currently held in `ws` (after a forward pass). Returns the sum of squared
    /// errors of that sample.
    pub fn accumulate_gradient(&self, target: [f64; 2], scale: f64, ws: &mut Workspace, grad: &mut [f64]) -> f64 {
        debug_assert_eq!(grad.len(), self.params.len());
        let n_conv = self.spec.conv_channels.len();
        let residual = [ws.output[0] - target[0], ws.output[1] - target[1]];
        let sq_err = residual[0] * residual[0] + residual[1] * residual[1];
        let grad_out = [residual[0] * scale, residual[1] * scale];

        // output layer
        let range = self.layer_range(n_conv + 1);
        let (gw, gb) = grad[range].split_at_mut(self.layers[n_conv + 1].weight_len());
        let (w_out, _) = self.layer(n_conv + 1);
        ops::dense_backward(&ws.hidden, w_out, &grad_out, gw, gb, Some(&mut ws.grad_hidden));
        for (g, &h) in ws.grad_hidden.iter_mut().zip(&ws.hidden_pre) {
            if h <= 0.0 {
                *g = 0.0;
            }
        }

        // hidden layer
        let range = self.layer_range(n_conv);
        let (gw, gb) = grad[range].split_at_mut(self.layers[n_conv].weight_len());
        let (w_hid, _) = self.layer(n_conv);
        let last = &mut ws.stages[n_conv - 1];
        ops::dense_backward(&last.act, w_hid, &ws.grad_hidden, gw, gb, Some(&mut last.grad_act));

        // conv blocks, last to first
        let mut dims = Vec::with_capacity(n_conv);
        let (mut c, mut h, mut w) = self.spec.input;
        for stage in 0..n_conv {
            dims.push((c, h, w));
            c = self.spec.conv_channels[stage];
            h /= self.spec.pools[stage];
            w /= self.spec.pools[stage];
        }
        for stage in (0..n_conv).rev() {
            let (in_c, in_h, in_w) = dims[stage];
            let (done, rest) = ws.stages.split_at_mut(stage);
            let st = &mut rest[0];
            // route through ReLU and max pooling to the winning conv outputs
            st.sparse.clear();
            for ((&g, &z), &idx) in st.grad_act.iter().zip(&st.pooled).zip(&st.argmax) {
                if z > 0.0 && g != 0.0 {
                    st.sparse.push((idx, g));
                }
            }
            let range = self.layer_range(stage);
            let (gw, gb) = grad[range].split_at_mut(self.layers[stage].weight_len());
            let (weights, _) = self.layer(stage);
            if stage == 0 {
                ops::conv3x3_backward_sparse(&ws.input, in_c, in_h, in_w, weights, &st.sparse, gw, gb, None);
            } else {
                let prev = &mut done[stage - 1];
                ops::conv3x3_backward_sparse(
                    &prev.act,
                    in_c,
                    in_h,
                    in_w,
                    weights,
                    &st.sparse,
                    gw,
                    gb,
                    Some(&mut prev.grad_act),
                );
            }
        }
        sq_err
    }
}

/// Buffers of one conv/pool stage.
#[derive(Debug, Clone)]
pub struct StageBuffers {
    conv: Vec<f64>,
    pooled: Vec<f64>,
    argmax: Vec<u32>,
    act: Vec<f64>,
    grad_act: Vec<f64>,
    sparse: Vec<(u32, f64)>,
}

/// Scratch space for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Workspace {
    input: Vec<f64>,
    stages: Vec<StageBuffers>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    grad_hidden: Vec<f64>,
    output: Vec<f64>,
}

impl Workspace {
    pub fn new(spec: &NetworkSpec) -> Self {
        let (_, mut h, mut w) = spec.input;
        let stages = spec
            .conv_channels
            .iter()
            .zip(&spec.pools)
            .map(|(&c, &k)| {
                let conv = c * h * w;
                h /= k;
                w /= k;
                let pooled = c * h * w;
                StageBuffers {
                    conv: vec![0.0; conv],
                    pooled: vec![0.0; pooled],
                    argmax: vec![0; pooled],
                    act: vec![0.0; pooled],
                    grad_act: vec![0.0; pooled],
                    sparse: Vec::with_capacity(pooled),
                }
            })
            .collect();
        Self {
            input: vec![0.0; spec.input_len()],
            stages,
            hidden_pre: vec![0.0; spec.hidden],
            hidden: vec![0.0; spec.hidden],
            grad_hidden: vec![0.0; spec.hidden],
            output: vec![0.0; spec.outputs],
        }
    }

    /// Shapes (channels, height, width) of the pooled activations.
    pub fn pooled_len(&self, stage: usize) -> usize {
        self.stages[stage].pooled.len()
    }
}
