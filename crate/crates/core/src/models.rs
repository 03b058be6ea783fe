//! Generators and discriminators for the five ablation variants.
//!
//! A spectrogram with `T` frames and `F` bins is treated as a length-`T`
//! sequence with `F` channels, so every layer is a 1D convolution over
//! time. There is no pooling and no fixed-size layer: any `T >= 2^depth`
//! is accepted and the generator returns exactly `T` frames.
//!
//! Generator layout (`c` = base channels, `d` = depth):
//!
//! ```text
//! enc_i      conv k5 s2   (513 | c*2^(i-1)) -> c*2^i      leaky ReLU   i = 0..d
//! bottleneck conv k3 s1   c*2^(d-1) -> c*2^(d-1)          leaky ReLU
//! dec_l      tconv k5 s2  [h ++ enc_{d-1-l}] -> ...        leaky ReLU   l = 0..d
//! gru        (recurrent variants) c -> c*2^(d-1)
//! out        conv k1 s1   -> 513                           tanh
//! ```
//!
//! Decoder outputs are cropped to the length of the matching encoder input,
//! which makes odd lengths round-trip exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{
    leaky_relu, leaky_relu_backward, tanh, tanh_backward, Conv1d, ConvTranspose1d, GradMode, Gru, GruCache,
    NnError, Padding, Param, Real, Tensor,
};

/// Channels of the model input: one-sided bins of a 1024-point STFT.
pub const FEATURE_BINS: usize = 513;

const ENC_KERNEL: usize = 5;
const BOTTLENECK_KERNEL: usize = 3;
const OUT_KERNEL: usize = 1;
const PATCH_HEAD_KERNEL: usize = 3;

pub const VARIANT_NAMES: [&str; 5] = ["m1", "m2", "m3", "m4", "m5"];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown variant {0:?} (expected one of m1..m5)")]
    UnknownVariant(String),
    #[error("bad model configuration: {0}")]
    BadConfig(String),
    #[error("input of {len} frames is shorter than the minimum {min}")]
    InputTooShort { len: usize, min: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Architecture flags and sizes for one ablation variant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantSpec {
    pub name: String,
    /// Auto-encoder discriminators with equilibrium control instead of patch
    /// discriminators with a least-squares loss.
    pub began: bool,
    /// U-Net style encoder-to-decoder concatenation.
    pub skip: bool,
    /// GRU before the output convolution.
    pub recurrent: bool,
    pub base_channels: usize,
    pub depth: usize,
}

impl VariantSpec {
    pub fn new(name: &str, began: bool, skip: bool, recurrent: bool) -> Self {
        Self {
            name: name.to_string(),
            began,
            skip,
            recurrent,
            base_channels: 64,
            depth: 3,
        }
    }

    pub fn with_scale(mut self, base_channels: usize, depth: usize) -> Self {
        self.base_channels = base_channels;
        self.depth = depth;
        self
    }

    /// Small configuration for CPU experiments: 16 channels, 2 levels.
    pub fn desk(self) -> Self {
        self.with_scale(16, 2)
    }

    /// Human-readable model family, e.g. `CycleBEGAN-CNN+skip+recurrent`.
    pub fn label(&self) -> String {
        let mut s = String::from(if self.began { "CycleBEGAN-CNN" } else { "CycleGAN-CNN" });
        if self.skip {
            s.push_str("+skip");
        }
        if self.recurrent {
            s.push_str("+recurrent");
        }
        s
    }

    /// Shortest accepted input: every stride-2 level must be nonempty.
    pub fn min_frames(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.base_channels == 0 || self.depth == 0 {
            return Err(ModelError::BadConfig(format!(
                "base_channels ({}) and depth ({}) must be at least 1",
                self.base_channels, self.depth
            )));
        }
        if self.depth > 12 {
            return Err(ModelError::BadConfig(format!("depth {} is too large", self.depth)));
        }
        Ok(())
    }
}

/// Full-scale spec for `m1`..`m5`.
pub fn variant_registry(name: &str) -> Result<VariantSpec, ModelError> {
    let (began, skip, recurrent) = match name {
        "m1" => (false, false, false),
        "m2" => (false, true, false),
        "m3" => (true, false, false),
        "m4" => (true, true, false),
        "m5" => (true, true, true),
        other => return Err(ModelError::UnknownVariant(other.to_string())),
    };
    Ok(VariantSpec::new(name, began, skip, recurrent))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
    Gru,
}

/// Structural description of one layer, used for architecture comparison
/// and summaries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl std::fmt::Display for LayerShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.kind {
            LayerKind::Conv => "conv",
            LayerKind::ConvTranspose => "tconv",
            LayerKind::Gru => "gru",
        };
        write!(
            f,
            "{} {} {}->{} k{} s{}",
            self.name, kind, self.in_channels, self.out_channels, self.kernel, self.stride
        )
    }
}

fn conv_shape<R: Real>(name: &str, c: &Conv1d<R>) -> LayerShape {
    LayerShape {
        name: name.to_string(),
        kind: LayerKind::Conv,
        in_channels: c.in_channels(),
        out_channels: c.out_channels(),
        kernel: c.kernel(),
        stride: c.stride,
    }
}

/// Fully-convolutional encoder/decoder mapping `(B, 513, T)` to
/// `(B, 513, T)` in (-1, 1). Also used as the auto-encoder discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<R> {
    skip: bool,
    pub encoders: Vec<Conv1d<R>>,
    pub bottleneck: Conv1d<R>,
    pub decoders: Vec<ConvTranspose1d<R>>,
    pub gru: Option<Gru<R>>,
    pub output: Conv1d<R>,
}

/// Activations saved by [`Generator::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct GeneratorTape<R> {
    input: Tensor<R>,
    enc_pre: Vec<Tensor<R>>,
    enc_out: Vec<Tensor<R>>,
    bott_pre: Tensor<R>,
    dec_in: Vec<Tensor<R>>,
    dec_pre: Vec<Tensor<R>>,
    dec_out: Vec<Tensor<R>>,
    gru_cache: Option<GruCache<R>>,
    head_in: Tensor<R>,
    output: Tensor<R>,
}

impl<R> GeneratorTape<R> {
    pub fn output(&self) -> &Tensor<R> {
        &self.output
    }
}

/// Builds a generator with weights drawn from `seed`.
pub fn build_generator<R: Real>(spec: &VariantSpec, seed: u64) -> Result<Generator<R>, ModelError> {
    Generator::new(spec, seed)
}

impl<R: Real> Generator<R> {
    pub fn new(spec: &VariantSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, d) = (spec.base_channels, spec.depth);
        let enc_ch = |i: usize| c << i;

        let mut encoders = Vec::with_capacity(d);
        for i in 0..d {
            let cin = if i == 0 { FEATURE_BINS } else { enc_ch(i - 1) };
            encoders.push(Conv1d::new(
                &format!("enc{i}"),
                cin,
                enc_ch(i),
                ENC_KERNEL,
                2,
                Padding::Same,
                &mut rng,
            )?);
        }
        let deepest = enc_ch(d - 1);
        let bottleneck = Conv1d::new("bottleneck", deepest, deepest, BOTTLENECK_KERNEL, 1, Padding::Same, &mut rng)?;

        let mut decoders = Vec::with_capacity(d);
        let mut h_ch = deepest;
        for l in 0..d {
            let skip_ch = if spec.skip { enc_ch(d - 1 - l) } else { 0 };
            let out = if l + 1 < d { enc_ch(d - 2 - l) } else { c };
            decoders.push(ConvTranspose1d::new(&format!("dec{l}"), h_ch + skip_ch, out, ENC_KERNEL, 2, &mut rng)?);
            h_ch = out;
        }

        let gru = if spec.recurrent {
            let g = Gru::new("gru", h_ch, deepest, &mut rng)?;
            h_ch = deepest;
            Some(g)
        } else {
            None
        };
        let output = Conv1d::new("out", h_ch, FEATURE_BINS, OUT_KERNEL, 1, Padding::Same, &mut rng)?;
        Ok(Self {
            skip: spec.skip,
            encoders,
            bottleneck,
            decoders,
            gru,
            output,
        })
    }

    pub fn depth(&self) -> usize {
        self.encoders.len()
    }

    pub fn has_skip(&self) -> bool {
        self.skip
    }

    pub fn min_frames(&self) -> usize {
        1 << self.depth()
    }

    /// Sets the output convolution to zero so the network emits tanh(0).
    pub fn zero_output_layer(&mut self) {
        self.output.weight.value.fill(R::zero());
        self.output.bias.value.fill(R::zero());
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut v: Vec<LayerShape> = self
            .encoders
            .iter()
            .enumerate()
            .map(|(i, e)| conv_shape(&format!("enc{i}"), e))
            .collect();
        v.push(conv_shape("bottleneck", &self.bottleneck));
        for (l, dec) in self.decoders.iter().enumerate() {
            v.push(LayerShape {
                name: format!("dec{l}"),
                kind: LayerKind::ConvTranspose,
                in_channels: dec.in_channels(),
                out_channels: dec.out_channels(),
                kernel: dec.kernel(),
                stride: dec.stride,
            });
        }
        if let Some(g) = &self.gru {
            v.push(LayerShape {
                name: "gru".into(),
                kind: LayerKind::Gru,
                in_channels: g.input_size(),
                out_channels: g.hidden_size(),
                kernel: 1,
                stride: 1,
            });
        }
        v.push(conv_shape("out", &self.output));
        v
    }

    pub fn params(&self) -> Vec<&Param<R>> {
        let mut v = Vec::new();
        for e in &self.encoders {
            v.extend(e.params());
        }
        v.extend(self.bottleneck.params());
        for d in &self.decoders {
            v.extend(d.params());
        }
        if let Some(g) = &self.gru {
            v.extend(g.params());
        }
        v.extend(self.output.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        let mut v = Vec::new();
        for e in &mut self.encoders {
            v.extend(e.params_mut());
        }
        v.extend(self.bottleneck.params_mut());
        for d in &mut self.decoders {
            v.extend(d.params_mut());
        }
        if let Some(g) = &mut self.gru {
            v.extend(g.params_mut());
        }
        v.extend(self.output.params_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn check_input(&self, x: &Tensor<R>) -> Result<(), ModelError> {
        let (_, c, t) = x.dims3()?;
        if c != FEATURE_BINS {
            return Err(NnError::ShapeMismatch(format!("expected {FEATURE_BINS} channels, got {c}")).into());
        }
        if t < self.min_frames() {
            return Err(ModelError::InputTooShort {
                len: t,
                min: self.min_frames(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<R>) -> Result<(Tensor<R>, GeneratorTape<R>), ModelError> {
        self.check_input(x)?;
        let d = self.depth();
        let mut lens = Vec::with_capacity(d);
        let mut enc_pre = Vec::with_capacity(d);
        let mut enc_out: Vec<Tensor<R>> = Vec::with_capacity(d);
        for (i, enc) in self.encoders.iter().enumerate() {
            let inp = if i == 0 { x } else { &enc_out[i - 1] };
            lens.push(inp.shape()[2]);
            let pre = enc.forward(inp)?;
            enc_out.push(leaky_relu(&pre));
            enc_pre.push(pre);
        }
        let bott_pre = self.bottleneck.forward(&enc_out[d - 1])?;
        let mut h = leaky_relu(&bott_pre);

        let mut dec_in = Vec::with_capacity(d);
        let mut dec_pre = Vec::with_capacity(d);
        let mut dec_out = Vec::with_capacity(d);
        for (l, dec) in self.decoders.iter().enumerate() {
            let inp = if self.skip {
                Tensor::concat_channels(&h, &enc_out[d - 1 - l])?
            } else {
                h
            };
            let pre = dec.forward(&inp)?.crop_time(lens[d - 1 - l])?;
            h = leaky_relu(&pre);
            dec_out.push(h.clone());
            dec_in.push(inp);
            dec_pre.push(pre);
        }

        let (head_in, gru_cache) = match &self.gru {
            Some(g) => {
                let (y, cache) = g.forward(&h, None)?;
                (y, Some(cache))
            }
            None => (h, None),
        };
        let output = tanh(&self.output.forward(&head_in)?);
        output.check_finite("generator")?;
        let tape = GeneratorTape {
            input: x.clone(),
            enc_pre,
            enc_out,
            bott_pre,
            dec_in,
            dec_pre,
            dec_out,
            gru_cache,
            head_in,
            output: output.clone(),
        };
        Ok((output, tape))
    }

    /// Inference-only forward pass.
    pub fn infer(&self, x: &Tensor<R>) -> Result<Tensor<R>, ModelError> {
        Ok(self.forward(x)?.0)
    }

    /// Backpropagates `dy` (gradient with respect to the output). Parameter
    /// gradients are accumulated when `mode.params` is set; the input
    /// gradient is returned when `mode.input` is set.
    pub fn backward(
        &mut self,
        tape: &GeneratorTape<R>,
        dy: &Tensor<R>,
        mode: GradMode,
    ) -> Result<Option<Tensor<R>>, ModelError> {
        let inner = GradMode {
            input: true,
            params: mode.params,
        };
        let d = self.depth();
        let d_head_pre = tanh_backward(&tape.output, dy);
        let mut g = self.output.backward(&tape.head_in, &d_head_pre, inner)?.expect("input grad");

        if let Some(gru) = &mut self.gru {
            let cache = tape.gru_cache.as_ref().expect("recurrent tape");
            let (dx, _) = gru.backward(&tape.dec_out[d - 1], cache, &g, inner)?;
            g = dx.expect("input grad");
        }

        let mut skip_grads: Vec<Option<Tensor<R>>> = vec![None; d];
        for l in (0..d).rev() {
            let d_pre = leaky_relu_backward(&tape.dec_pre[l], &g);
            let full = self.decoders[l].output_len(tape.dec_in[l].shape()[2]);
            let d_pre = d_pre.pad_time(full)?;
            let d_in = self.decoders[l].backward(&tape.dec_in[l], &d_pre, inner)?.expect("input grad");
            g = if self.skip {
                let h_ch = d_in.shape()[1] - tape.enc_out[d - 1 - l].shape()[1];
                let (dh, ds) = d_in.split_channels(h_ch)?;
                skip_grads[d - 1 - l] = Some(ds);
                dh
            } else {
                d_in
            };
        }

        let d_bott = leaky_relu_backward(&tape.bott_pre, &g);
        g = self
            .bottleneck
            .backward(&tape.enc_out[d - 1], &d_bott, inner)?
            .expect("input grad");

        for i in (0..d).rev() {
            if let Some(s) = &skip_grads[i] {
                g.add_assign(s)?;
            }
            let d_pre = leaky_relu_backward(&tape.enc_pre[i], &g);
            let inp = if i == 0 { &tape.input } else { &tape.enc_out[i - 1] };
            let m = if i == 0 { mode } else { inner };
            match self.encoders[i].backward(inp, &d_pre, m)? {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
        }
        Ok(mode.input.then_some(g))
    }
}

/// Strided conv stack with a one-channel head producing per-region scores of
/// shape `(B, 1, ceil(T / 2^depth))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDiscriminator<R> {
    pub levels: Vec<Conv1d<R>>,
    pub head: Conv1d<R>,
}

#[derive(Clone, Debug)]
pub struct PatchTape<R> {
    inputs: Vec<Tensor<R>>,
    pre: Vec<Tensor<R>>,
    head_in: Tensor<R>,
}

impl<R: Real> PatchDiscriminator<R> {
    pub fn new(spec: &VariantSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut levels = Vec::with_capacity(spec.depth);
        let mut cin = FEATURE_BINS;
        for i in 0..spec.depth {
            let cout = spec.base_channels << i;
            levels.push(Conv1d::new(&format!("lvl{i}"), cin, cout, ENC_KERNEL, 2, Padding::Same, &mut rng)?);
            cin = cout;
        }
        let head = Conv1d::new("head", cin, 1, PATCH_HEAD_KERNEL, 1, Padding::Same, &mut rng)?;
        Ok(Self { levels, head })
    }

    pub fn min_frames(&self) -> usize {
        1 << self.levels.len()
    }

    pub fn zero_output_layer(&mut self) {
        self.head.weight.value.fill(R::zero());
        self.head.bias.value.fill(R::zero());
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut v: Vec<LayerShape> = self
            .levels
            .iter()
            .enumerate()
            .map(|(i, c)| conv_shape(&format!("lvl{i}"), c))
            .collect();
        v.push(conv_shape("head", &self.head));
        v
    }

    pub fn params(&self) -> Vec<&Param<R>> {
        let mut v: Vec<&Param<R>> = self.levels.iter().flat_map(|c| c.params()).collect();
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        let mut v: Vec<&mut Param<R>> = self.levels.iter_mut().flat_map(|c| c.params_mut()).collect();
        v.extend(self.head.params_mut());
        v
    }

    pub fn forward(&self, x: &Tensor<R>) -> Result<(Tensor<R>, PatchTape<R>), ModelError> {
        let (_, c, t) = x.dims3()?;
        if c != FEATURE_BINS {
            return Err(NnError::ShapeMismatch(format!("expected {FEATURE_BINS} channels, got {c}")).into());
        }
        if t < self.min_frames() {
            return Err(ModelError::InputTooShort {
                len: t,
                min: self.min_frames(),
            });
        }
        let mut inputs = Vec::with_capacity(self.levels.len());
        let mut pre = Vec::with_capacity(self.levels.len());
        let mut h = x.clone();
        for conv in &self.levels {
            let p = conv.forward(&h)?;
            inputs.push(h);
            h = leaky_relu(&p);
            pre.push(p);
        }
        let scores = self.head.forward(&h)?;
        Ok((
            scores,
            PatchTape {
                inputs,
                pre,
                head_in: h,
            },
        ))
    }

    pub fn backward(
        &mut self,
        tape: &PatchTape<R>,
        dy: &Tensor<R>,
        mode: GradMode,
    ) -> Result<Option<Tensor<R>>, ModelError> {
        let inner = GradMode {
            input: true,
            params: mode.params,
        };
        let mut g = self.head.backward(&tape.head_in, dy, inner)?.expect("input grad");
        for i in (0..self.levels.len()).rev() {
            let d_pre = leaky_relu_backward(&tape.pre[i], &g);
            let m = if i == 0 { mode } else { inner };
            match self.levels[i].backward(&tape.inputs[i], &d_pre, m)? {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
        }
        Ok(mode.input.then_some(g))
    }
}

/// Auto-encoder discriminator for equilibrium variants, patch discriminator
/// otherwise.
#[derive(Clone, Debug, PartialEq)]
pub enum Discriminator<R> {
    AutoEncoder(Generator<R>),
    Patch(PatchDiscriminator<R>),
}

#[derive(Clone, Debug)]
pub enum DiscriminatorTape<R> {
    AutoEncoder(GeneratorTape<R>),
    Patch(PatchTape<R>),
}

pub fn build_discriminator<R: Real>(spec: &VariantSpec, seed: u64) -> Result<Discriminator<R>, ModelError> {
    Ok(if spec.began {
        Discriminator::AutoEncoder(Generator::new(spec, seed)?)
    } else {
        Discriminator::Patch(PatchDiscriminator::new(spec, seed)?)
    })
}

impl<R: Real> Discriminator<R> {
    pub fn is_auto_encoder(&self) -> bool {
        matches!(self, Discriminator::AutoEncoder(_))
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        match self {
            Discriminator::AutoEncoder(g) => g.layer_shapes(),
            Discriminator::Patch(p) => p.layer_shapes(),
        }
    }

    pub fn params(&self) -> Vec<&Param<R>> {
        match self {
            Discriminator::AutoEncoder(g) => g.params(),
            Discriminator::Patch(p) => p.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        match self {
            Discriminator::AutoEncoder(g) => g.params_mut(),
            Discriminator::Patch(p) => p.params_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn zero_output_layer(&mut self) {
        match self {
            Discriminator::AutoEncoder(g) => g.zero_output_layer(),
            Discriminator::Patch(p) => p.zero_output_layer(),
        }
    }

    /// Reconstruction `(B, 513, T)` for auto-encoders, score map
    /// `(B, 1, ceil(T / 2^depth))` for patch discriminators.
    pub fn forward(&self, x: &Tensor<R>) -> Result<(Tensor<R>, DiscriminatorTape<R>), ModelError> {
        Ok(match self {
            Discriminator::AutoEncoder(g) => {
                let (y, t) = g.forward(x)?;
                (y, DiscriminatorTape::AutoEncoder(t))
            }
            Discriminator::Patch(p) => {
                let (y, t) = p.forward(x)?;
                (y, DiscriminatorTape::Patch(t))
            }
        })
    }

    pub fn backward(
        &mut self,
        tape: &DiscriminatorTape<R>,
        dy: &Tensor<R>,
        mode: GradMode,
    ) -> Result<Option<Tensor<R>>, ModelError> {
        match (self, tape) {
            (Discriminator::AutoEncoder(g), DiscriminatorTape::AutoEncoder(t)) => g.backward(t, dy, mode),
            (Discriminator::Patch(p), DiscriminatorTape::Patch(t)) => p.backward(t, dy, mode),
            _ => Err(ModelError::BadConfig("discriminator tape does not match its network".into())),
        }
    }
}

/// One-line-per-layer description of a variant's generator and
/// discriminator.
pub fn architecture_summary(spec: &VariantSpec) -> Result<String, ModelError> {
    let g = Generator::<f32>::new(spec, 0)?;
    let d = build_discriminator::<f32>(spec, 0)?;
    let mut s = format!(
        "{} ({}): base={} depth={}\n",
        spec.name,
        spec.label(),
        spec.base_channels,
        spec.depth
    );
    s.push_str(&format!("generator ({} params)\n", g.param_count()));
    for l in g.layer_shapes() {
        s.push_str(&format!("  {l}\n"));
    }
    let kind = if d.is_auto_encoder() { "auto-encoder" } else { "patch" };
    s.push_str(&format!("discriminator: {kind} ({} params)\n", d.param_count()));
    for l in d.layer_shapes() {
        s.push_str(&format!("  {l}\n"));
    }
    Ok(s)
}
