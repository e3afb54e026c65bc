//! Latent recovery by inverse STFT and a small transposed-convolution stack
//! that turns latent frames back into audio.

use serde::Serialize;

use crate::dsp::{istft, istft_backward, SpectralGrid, Waveform};
use crate::error::{Error, Result};
use crate::params::{accumulate, Grads, ParamStore};
use crate::speech::LatentSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DecoderLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub upsample: usize,
}

/// Every layer but the last is followed by tanh; the last is linear and its
/// output is clamped to [−1, 1].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DecoderSpec {
    pub layers: Vec<DecoderLayerSpec>,
    pub sample_rate_hz: u32,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        DecoderSpec {
            layers: vec![
                DecoderLayerSpec {
                    in_channels: 8,
                    out_channels: 8,
                    kernel_size: 8,
                    upsample: 4,
                },
                DecoderLayerSpec {
                    in_channels: 8,
                    out_channels: 1,
                    kernel_size: 8,
                    upsample: 4,
                },
            ],
            sample_rate_hz: 8000,
        }
    }
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        let last = self
            .layers
            .last()
            .ok_or_else(|| Error::config("decoder needs at least one layer"))?;
        if last.out_channels != 1 {
            return Err(Error::config("last decoder layer must produce one channel"));
        }
        if self.sample_rate_hz == 0 {
            return Err(Error::config("decoder sample rate must be positive"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels == 0 || l.out_channels == 0 || l.kernel_size == 0 || l.upsample == 0 {
                return Err(Error::config(format!("decoder layer {i} has a zero dimension")));
            }
            if i > 0 && self.layers[i - 1].out_channels != l.in_channels {
                return Err(Error::config(format!(
                    "decoder layer {i} expects {} channels, previous layer produces {}",
                    l.in_channels,
                    self.layers[i - 1].out_channels
                )));
            }
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels)
    }

    pub fn upsample_factor(&self) -> usize {
        self.layers.iter().map(|l| l.upsample).product()
    }
}

pub fn weight_name(i: usize) -> String {
    format!("dec.layer{i}.weight")
}

pub fn bias_name(i: usize) -> String {
    format!("dec.layer{i}.bias")
}

/// Inverse STFT of every channel, restacked into a `len × channels` latent.
pub fn latent_from_grid(grid: &SpectralGrid, stride_samples: usize) -> Result<LatentSequence> {
    let len = grid.original_length;
    let c_count = grid.channels;
    let mut frames = vec![0.0; len * c_count];
    for c in 0..c_count {
        let x = istft(&grid.channel(c))?;
        for (t, v) in x.into_iter().enumerate() {
            frames[t * c_count + c] = v;
        }
    }
    LatentSequence::new(frames, len, c_count, stride_samples)
}

/// Adjoint of [`latent_from_grid`]: gradient on the latent frames (`len ×
/// channels`) → gradient on a grid shaped like `like`.
pub fn latent_from_grid_backward(grad: &[f64], like: &SpectralGrid) -> Result<SpectralGrid> {
    let len = like.original_length;
    let c_count = like.channels;
    if grad.len() != len * c_count {
        return Err(Error::invalid("latent gradient does not match the grid"));
    }
    let mut out = SpectralGrid::zeros(like.frames, c_count, like.config, len);
    for c in 0..c_count {
        let g: Vec<f64> = (0..len).map(|t| grad[t * c_count + c]).collect();
        let single = istft_backward(&g, &like.channel(c))?;
        for t in 0..like.frames {
            let src = single.index(t, 0, 0);
            let dst = out.index(t, 0, c);
            out.data[dst..dst + out.bins].copy_from_slice(&single.data[src..src + out.bins]);
        }
    }
    Ok(out)
}

/// Transposed 1-D convolution, cropped to `t · upsample` steps.
///
/// `input` is `t × c_in`, `weights` is `c_in × c_out × kernel_size`; output
/// step `t·upsample + k` receives `weights[i][o][k] · input[t][i]`.
pub fn conv_transpose1d_forward(
    input: &[f64],
    c_in: usize,
    weights: &[f64],
    bias: &[f64],
    kernel_size: usize,
    upsample: usize,
) -> Result<Vec<f64>> {
    let c_out = bias.len();
    if c_in == 0 || input.len() % c_in != 0 {
        return Err(Error::invalid("transposed conv input is not a multiple of its channel count"));
    }
    if weights.len() != c_in * c_out * kernel_size {
        return Err(Error::invalid(format!(
            "transposed conv weights have {} values, expected {c_in}×{c_out}×{kernel_size}",
            weights.len()
        )));
    }
    let t_in = input.len() / c_in;
    let t_out = t_in * upsample;
    let mut out: Vec<f64> = (0..t_out).flat_map(|_| bias.iter().copied()).collect();
    for t in 0..t_in {
        let x = &input[t * c_in..(t + 1) * c_in];
        for k in 0..kernel_size {
            let pos = t * upsample + k;
            if pos >= t_out {
                break;
            }
            let row = &mut out[pos * c_out..(pos + 1) * c_out];
            for (i, &xv) in x.iter().enumerate() {
                let w_i = &weights[i * c_out * kernel_size..(i + 1) * c_out * kernel_size];
                for (o, r) in row.iter_mut().enumerate() {
                    *r += w_i[o * kernel_size + k] * xv;
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weights, grad_bias)`.
pub fn conv_transpose1d_backward(
    input: &[f64],
    c_in: usize,
    weights: &[f64],
    c_out: usize,
    kernel_size: usize,
    upsample: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let t_in = input.len() / c_in;
    let t_out = t_in * upsample;
    let mut g_in = vec![0.0; input.len()];
    let mut g_w = vec![0.0; weights.len()];
    let mut g_b = vec![0.0; c_out];
    for row in grad_out.chunks_exact(c_out) {
        for (b, g) in g_b.iter_mut().zip(row) {
            *b += g;
        }
    }
    for t in 0..t_in {
        for k in 0..kernel_size {
            let pos = t * upsample + k;
            if pos >= t_out {
                break;
            }
            let go = &grad_out[pos * c_out..(pos + 1) * c_out];
            for i in 0..c_in {
                let xv = input[t * c_in + i];
                let off = i * c_out * kernel_size;
                let mut acc = 0.0;
                for (o, &g) in go.iter().enumerate() {
                    g_w[off + o * kernel_size + k] += g * xv;
                    acc += g * weights[off + o * kernel_size + k];
                }
                g_in[t * c_in + i] += acc;
            }
        }
    }
    (g_in, g_w, g_b)
}

#[derive(Debug, Clone)]
pub struct DecoderTrace {
    /// `inputs[i]` is the input of layer `i`.
    inputs: Vec<Vec<f64>>,
    /// Output of the last layer before clamping.
    pub pre_clamp: Vec<f64>,
}

pub(crate) fn decode_waveform_traced(
    latent: &LatentSequence,
    spec: &DecoderSpec,
    params: &ParamStore,
) -> Result<(Waveform, DecoderTrace)> {
    spec.validate()?;
    if latent.dim != spec.latent_dim() {
        return Err(Error::config(format!(
            "decoder expects {} latent channels, got {}",
            spec.latent_dim(),
            latent.dim
        )));
    }
    let last = spec.layers.len() - 1;
    let mut inputs = vec![latent.frames.clone()];
    let mut x = latent.frames.clone();
    for (i, l) in spec.layers.iter().enumerate() {
        let w = params.value(&weight_name(i), &[l.in_channels, l.out_channels, l.kernel_size])?;
        let b = params.value(&bias_name(i), &[l.out_channels])?;
        x = conv_transpose1d_forward(&x, l.in_channels, w, b, l.kernel_size, l.upsample)?;
        if i < last {
            x.iter_mut().for_each(|v| *v = v.tanh());
            inputs.push(x.clone());
        }
    }
    let samples = x.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let wave = Waveform::new(samples, spec.sample_rate_hz)?;
    Ok((wave, DecoderTrace { inputs, pre_clamp: x }))
}

/// Transposed convolutions with tanh between layers, a linear last layer,
/// and a final clamp to [−1, 1]. Output length is `latent.len ×` the
/// product of the upsampling factors.
pub fn decode_waveform(latent: &LatentSequence, spec: &DecoderSpec, params: &ParamStore) -> Result<Waveform> {
    Ok(decode_waveform_traced(latent, spec, params)?.0)
}

/// Backpropagates a gradient on the pre-clamp output; returns the gradient on
/// the latent frames.
pub(crate) fn decode_waveform_backward(
    spec: &DecoderSpec,
    params: &ParamStore,
    trace: &DecoderTrace,
    grad_pre_clamp: &[f64],
    grads: &mut Grads,
) -> Result<Vec<f64>> {
    let last = spec.layers.len() - 1;
    let mut g = grad_pre_clamp.to_vec();
    for (i, l) in spec.layers.iter().enumerate().rev() {
        if i < last {
            for (gv, y) in g.iter_mut().zip(&trace.inputs[i + 1]) {
                *gv *= 1.0 - y * y;
            }
        }
        let w = params.value(&weight_name(i), &[l.in_channels, l.out_channels, l.kernel_size])?;
        let (g_in, g_w, g_b) = conv_transpose1d_backward(
            &trace.inputs[i],
            l.in_channels,
            w,
            l.out_channels,
            l.kernel_size,
            l.upsample,
            &g,
        );
        accumulate(grads, &weight_name(i), &g_w);
        accumulate(grads, &bias_name(i), &g_b);
        g = g_in;
    }
    Ok(g)
}
