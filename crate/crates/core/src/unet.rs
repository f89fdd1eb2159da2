//! Fully convolutional encoder-decoder with concatenated skip connections.
//!
//! ```text
//! enc[l]  : conv-ReLU, conv-ReLU            (base·2^l channels), then maxpool2
//! mid     : conv-ReLU, conv-ReLU            (base·2^depth channels)
//! dec[l]  : upsample2, conv (linear), concat enc[l], conv-ReLU, conv-ReLU
//! head    : 1×1 conv to one channel, tanh
//! ```
//!
//! Every convolution is same-size, so the output frame matches the input
//! pixel for pixel and any side divisible by `2^depth` is accepted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Padding, Real, Tape, Tensor4, Var};
use crate::error::{Error, Result};
use crate::preprocess::NormStats;
use crate::training::AdamState;

/// Padding used by every convolution in the network.
pub const PADDING: Padding = Padding::Replicate;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    /// Number of pooling levels.
    pub depth: usize,
    pub base_channels: usize,
    pub kernel: usize,
    /// Training frame side in pixels.
    pub frame_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { depth: 3, base_channels: 16, kernel: 3, frame_size: 128 }
    }
}

/// Name and shape of one trainable tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    cin: usize,
    cout: usize,
    kernel: usize,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 16 {
            return Err(Error::invalid("depth", format!("{} is not in 1..=16", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::invalid("base channels", "must be at least 1"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid("kernel", format!("{} must be odd", self.kernel)));
        }
        self.check_side(self.frame_size)
    }

    /// Whether the network accepts `side`×`side` inputs.
    pub fn check_side(&self, side: usize) -> Result<()> {
        let unit = 1usize << self.depth;
        if side == 0 || !side.is_multiple_of(unit) {
            return Err(Error::invalid(
                "frame size",
                format!("{side} is not a positive multiple of 2^{} = {unit}", self.depth),
            ));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Convolutions in forward order, with their parameter-name prefixes.
    fn layers(&self) -> Vec<(String, ConvLayer)> {
        let k = self.kernel;
        let mut out = Vec::new();
        let mut cin = 1;
        for l in 0..self.depth {
            let c = self.channels(l);
            out.push((format!("enc{l}.conv1"), ConvLayer { cin, cout: c, kernel: k }));
            out.push((format!("enc{l}.conv2"), ConvLayer { cin: c, cout: c, kernel: k }));
            cin = c;
        }
        let c = self.channels(self.depth);
        out.push(("mid.conv1".into(), ConvLayer { cin, cout: c, kernel: k }));
        out.push(("mid.conv2".into(), ConvLayer { cin: c, cout: c, kernel: k }));
        for l in (0..self.depth).rev() {
            let (up, c) = (self.channels(l + 1), self.channels(l));
            out.push((format!("dec{l}.up"), ConvLayer { cin: up, cout: c, kernel: k }));
            out.push((format!("dec{l}.conv1"), ConvLayer { cin: 2 * c, cout: c, kernel: k }));
            out.push((format!("dec{l}.conv2"), ConvLayer { cin: c, cout: c, kernel: k }));
        }
        out.push(("head".into(), ConvLayer { cin: self.base_channels, cout: 1, kernel: 1 }));
        out
    }

    /// Every parameter the configuration implies, weight before bias per layer.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.layers()
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    ParamSpec { name: format!("{name}.weight"), dims: vec![l.cout, l.cin, l.kernel, l.kernel] },
                    ParamSpec { name: format!("{name}.bias"), dims: vec![l.cout] },
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::len).sum()
    }
}

/// A named parameter tensor in training precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    /// The tensor in the 4-D layout the tape expects; biases become `[1, C, 1, 1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor4<T> {
        let dims = match self.dims[..] {
            [a, b, c, d] => [a, b, c, d],
            [c] => [1, c, 1, 1],
            _ => unreachable!("parameters are 1-D or 4-D"),
        };
        let data = self.data.iter().map(|&v| T::of(v as f64)).collect();
        Tensor4::new(dims, data).expect("dims match data")
    }
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: UNetConfig,
    pub params: Vec<Param>,
    /// Statistics that map network outputs back to nanometers.
    pub norm: NormStats,
    pub adam: Option<AdamState>,
    /// Epoch these weights come from.
    pub epoch: u32,
    /// Pixel pitch of the training data.
    pub pitch_nm: f64,
}

impl ModelState {
    /// Weights uniform in `[-b, b]` with `b = sqrt(6 / fan_in)`, zero biases.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_specs()
            .into_iter()
            .map(|spec| {
                let data = if spec.dims.len() == 4 {
                    let fan_in = (spec.dims[1] * spec.dims[2] * spec.dims[3]) as f64;
                    let bound = (6.0 / fan_in).sqrt();
                    (0..spec.len()).map(|_| rng.gen_range(-bound..=bound) as f32).collect()
                } else {
                    vec![0.0; spec.len()]
                };
                Param { name: spec.name, dims: spec.dims, data }
            })
            .collect();
        Ok(ModelState { config, params, norm: NormStats::default(), adam: None, epoch: 0, pitch_nm: 1.0 })
    }

    pub fn tensors<T: Real>(&self) -> Vec<Tensor4<T>> {
        self.params.iter().map(Param::to_tensor).collect()
    }

    /// Inference on `[N, 1, H, W]` normalized inputs; returns `[N, 1, H, W]` in (−1, 1).
    pub fn forward(&self, input: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.tensors::<f32>().into_iter().map(|t| tape.constant(t)).collect();
        let x = tape.constant(input.clone());
        let y = forward_on_tape(&mut tape, &self.config, &params, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Record the network on `tape`. `params` follow [`UNetConfig::param_specs`] order.
pub fn forward_on_tape<T: Real>(tape: &mut Tape<T>, cfg: &UNetConfig, params: &[Var], input: Var) -> Result<Var> {
    let expected = cfg.param_specs().len();
    if params.len() != expected {
        return Err(Error::shape(format!("{} parameter tensors, network needs {expected}", params.len())));
    }
    let [_, c, h, w] = tape.value(input).dims();
    if c != 1 {
        return Err(Error::shape(format!("network input has {c} channels, expected 1")));
    }
    cfg.check_side(h)?;
    cfg.check_side(w)?;

    let mut next = params.chunks_exact(2);
    let mut conv = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let wb = next.next().expect("parameter count checked above");
        tape.conv2d(x, wb[0], wb[1], PADDING)
    };

    let mut skips = Vec::with_capacity(cfg.depth);
    let mut x = input;
    for _ in 0..cfg.depth {
        x = conv(tape, x)?;
        x = tape.relu(x)?;
        x = conv(tape, x)?;
        x = tape.relu(x)?;
        skips.push(x);
        x = tape.maxpool2(x)?;
    }
    x = conv(tape, x)?;
    x = tape.relu(x)?;
    x = conv(tape, x)?;
    x = tape.relu(x)?;
    for skip in skips.into_iter().rev() {
        x = tape.upsample2(x)?;
        x = conv(tape, x)?;
        x = tape.concat_channels(x, skip)?;
        x = conv(tape, x)?;
        x = tape.relu(x)?;
        x = conv(tape, x)?;
        x = tape.relu(x)?;
    }
    x = conv(tape, x)?;
    tape.tanh(x)
}
