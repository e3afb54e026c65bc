//! Strided 1-D convolutional speech encoder and the audio-side contrastive
//! head.

use serde::Serialize;

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::params::{accumulate, Grads, ParamStore};
use crate::projection::{project_unit, project_unit_backward, UnitProjection};

pub const PHI_AUDIO: &str = "phi_audio";

/// Latent frames, `len × dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub frames: Vec<f64>,
    pub len: usize,
    pub dim: usize,
    /// Waveform samples per latent frame.
    pub stride_samples: usize,
}

impl LatentSequence {
    pub fn new(frames: Vec<f64>, len: usize, dim: usize, stride_samples: usize) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::invalid("latent sequence needs at least one frame and channel"));
        }
        if frames.len() != len * dim {
            return Err(Error::invalid(format!(
                "latent buffer has {} values, expected {len}×{dim}",
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent sequence contains non-finite values"));
        }
        Ok(LatentSequence {
            frames,
            len,
            dim,
            stride_samples,
        })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.len).map(|t| self.frames[t * self.dim + c]).collect()
    }

    /// Mean over time.
    pub fn mean_frame(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for row in self.frames.chunks_exact(self.dim) {
            for (a, v) in m.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = self.len as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConvSpec {
    pub layers: Vec<ConvLayerSpec>,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            layers: vec![
                ConvLayerSpec {
                    in_channels: 1,
                    out_channels: 8,
                    kernel_size: 9,
                    stride: 4,
                    activation: Activation::Tanh,
                },
                ConvLayerSpec {
                    in_channels: 8,
                    out_channels: 8,
                    kernel_size: 5,
                    stride: 4,
                    activation: Activation::Identity,
                },
            ],
        }
    }
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::config("encoder needs at least one layer"))?;
        if first.in_channels != 1 {
            return Err(Error::config("first encoder layer must take one (mono) channel"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel_size == 0 || l.stride == 0 || l.out_channels == 0 {
                return Err(Error::config(format!("encoder layer {i} has a zero dimension")));
            }
            if i > 0 && self.layers[i - 1].out_channels != l.in_channels {
                return Err(Error::config(format!(
                    "encoder layer {i} expects {} channels, previous layer produces {}",
                    l.in_channels,
                    self.layers[i - 1].out_channels
                )));
            }
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn stride_samples(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// Shortest waveform that yields one latent frame.
    pub fn min_input_len(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .fold(1, |need, l| (need - 1) * l.stride + l.kernel_size)
    }

    /// Latent length produced from `n` samples (`None` if too short).
    pub fn output_len(&self, n: usize) -> Option<usize> {
        self.layers.iter().try_fold(n, |t, l| conv_output_len(t, l.kernel_size, l.stride))
    }
}

pub fn conv_output_len(t: usize, kernel_size: usize, stride: usize) -> Option<usize> {
    (t >= kernel_size).then(|| (t - kernel_size) / stride + 1)
}

fn weight_name(i: usize) -> String {
    format!("enc.layer{i}.weight")
}

fn bias_name(i: usize) -> String {
    format!("enc.layer{i}.bias")
}

/// Valid cross-correlation along time.
///
/// `input` is `t × c_in`, `weights` is `c_out × c_in × kernel_size`; the
/// result is `t' × c_out` with `t' = ⌊(t − kernel_size)/stride⌋ + 1`. No
/// activation is applied.
pub fn conv1d_forward(
    input: &[f64],
    c_in: usize,
    weights: &[f64],
    bias: &[f64],
    kernel_size: usize,
    stride: usize,
) -> Result<Vec<f64>> {
    let c_out = bias.len();
    if c_in == 0 || input.len() % c_in != 0 {
        return Err(Error::invalid("conv input length is not a multiple of its channel count"));
    }
    if weights.len() != c_out * c_in * kernel_size {
        return Err(Error::invalid(format!(
            "conv weights have {} values, expected {c_out}×{c_in}×{kernel_size}",
            weights.len()
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("conv stride must be positive"));
    }
    let t_in = input.len() / c_in;
    let t_out = conv_output_len(t_in, kernel_size, stride).ok_or_else(|| {
        Error::invalid(format!("conv input has {t_in} steps, kernel needs {kernel_size}"))
    })?;
    let mut out = vec![0.0; t_out * c_out];
    for t in 0..t_out {
        let base = t * stride;
        for o in 0..c_out {
            let mut acc = bias[o];
            let w_o = &weights[o * c_in * kernel_size..(o + 1) * c_in * kernel_size];
            for k in 0..kernel_size {
                let x = &input[(base + k) * c_in..(base + k + 1) * c_in];
                for (i, &xv) in x.iter().enumerate() {
                    acc += w_o[i * kernel_size + k] * xv;
                }
            }
            out[t * c_out + o] = acc;
        }
    }
    Ok(out)
}

/// Gradients of [`conv1d_forward`] given the gradient on its (pre-activation)
/// output. Returns `(grad_input, grad_weights, grad_bias)`.
pub fn conv1d_backward(
    input: &[f64],
    c_in: usize,
    weights: &[f64],
    c_out: usize,
    kernel_size: usize,
    stride: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let t_out = grad_out.len() / c_out;
    let mut g_in = vec![0.0; input.len()];
    let mut g_w = vec![0.0; weights.len()];
    let mut g_b = vec![0.0; c_out];
    for t in 0..t_out {
        let base = t * stride;
        for o in 0..c_out {
            let g = grad_out[t * c_out + o];
            if g == 0.0 {
                continue;
            }
            g_b[o] += g;
            let off = o * c_in * kernel_size;
            for k in 0..kernel_size {
                let row = (base + k) * c_in;
                for i in 0..c_in {
                    g_w[off + i * kernel_size + k] += g * input[row + i];
                    g_in[row + i] += g * weights[off + i * kernel_size + k];
                }
            }
        }
    }
    (g_in, g_w, g_b)
}

/// Intermediate activations of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// `inputs[i]` is the input of layer `i`; `inputs[len]` is the output.
    inputs: Vec<Vec<f64>>,
}

pub(crate) fn encode_speech_traced(
    w: &Waveform,
    spec: &ConvSpec,
    params: &ParamStore,
) -> Result<(LatentSequence, EncoderTrace)> {
    spec.validate()?;
    let min = spec.min_input_len();
    if w.samples.len() < min {
        return Err(Error::invalid(format!(
            "waveform has {} samples; the encoder needs at least {min}",
            w.samples.len()
        )));
    }
    let mut inputs = vec![w.samples.clone()];
    for (i, l) in spec.layers.iter().enumerate() {
        let weights = params.value(&weight_name(i), &[l.out_channels, l.in_channels, l.kernel_size])?;
        let bias = params.value(&bias_name(i), &[l.out_channels])?;
        let x = inputs.last().unwrap();
        let mut y = conv1d_forward(x, l.in_channels, weights, bias, l.kernel_size, l.stride)?;
        y.iter_mut().for_each(|v| *v = l.activation.apply(*v));
        inputs.push(y);
    }
    let frames = inputs.last().unwrap().clone();
    let dim = spec.latent_dim();
    let len = frames.len() / dim;
    let latent = LatentSequence::new(frames, len, dim, spec.stride_samples())?;
    Ok((latent, EncoderTrace { inputs }))
}

pub fn encode_speech(w: &Waveform, spec: &ConvSpec, params: &ParamStore) -> Result<LatentSequence> {
    Ok(encode_speech_traced(w, spec, params)?.0)
}

/// Backpropagates a gradient on the latent frames into the encoder weights.
pub(crate) fn encode_speech_backward(
    spec: &ConvSpec,
    params: &ParamStore,
    trace: &EncoderTrace,
    grad_latent: &[f64],
    grads: &mut Grads,
) -> Result<()> {
    let mut g = grad_latent.to_vec();
    for (i, l) in spec.layers.iter().enumerate().rev() {
        let y = &trace.inputs[i + 1];
        for (gv, &yv) in g.iter_mut().zip(y) {
            *gv *= l.activation.grad_from_output(yv);
        }
        let weights = params.value(&weight_name(i), &[l.out_channels, l.in_channels, l.kernel_size])?;
        let (g_in, g_w, g_b) = conv1d_backward(
            &trace.inputs[i],
            l.in_channels,
            weights,
            l.out_channels,
            l.kernel_size,
            l.stride,
            &g,
        );
        accumulate(grads, &weight_name(i), &g_w);
        accumulate(grads, &bias_name(i), &g_b);
        g = g_in;
    }
    Ok(())
}

pub(crate) fn project_style_audio_cached(
    z: &LatentSequence,
    params: &ParamStore,
    style_dim: usize,
) -> Result<(UnitProjection, Vec<f64>)> {
    let pooled = z.mean_frame();
    let proj = project_unit(params, PHI_AUDIO, style_dim, &pooled)?;
    Ok((proj, pooled))
}

/// Returns the gradient on the latent frames (`len × dim`).
pub(crate) fn project_style_audio_backward(
    z: &LatentSequence,
    params: &ParamStore,
    proj: &UnitProjection,
    pooled: &[f64],
    grad_unit: &[f64],
    grads: &mut Grads,
) -> Result<Vec<f64>> {
    let g_pooled = project_unit_backward(params, PHI_AUDIO, proj, pooled, grad_unit, grads)?;
    let inv = 1.0 / z.len as f64;
    let mut g = Vec::with_capacity(z.frames.len());
    for _ in 0..z.len {
        g.extend(g_pooled.iter().map(|v| v * inv));
    }
    Ok(g)
}

/// Audio-side style embedding: temporal mean, affine map, L2 normalise.
pub fn project_style_audio(z: &LatentSequence, params: &ParamStore) -> Result<Vec<f64>> {
    let style_dim = params.get(&format!("{PHI_AUDIO}.bias"))?.len();
    Ok(project_style_audio_cached(z, params, style_dim)?.0.unit)
}
