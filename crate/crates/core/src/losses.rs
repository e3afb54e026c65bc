//! Content, style and smoothness objectives and their weighted total.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{add_outer, dot, log_sum_exp, matvec, matvec_t, norm, softmax};
use crate::params::{accumulate, Grads, ParamStore};
use crate::speech::LatentSequence;
use crate::ssm::HiddenStateGrid;

pub const CONTENT_WEIGHT: &str = "content.weight";
pub const CONTENT_BIAS: &str = "content.bias";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub lambda_content: f64,
    pub lambda_style: f64,
    pub lambda_smooth: f64,
}

impl LossWeights {
    pub fn new(lambda_content: f64, lambda_style: f64, lambda_smooth: f64) -> Result<Self> {
        for (name, v) in [
            ("content", lambda_content),
            ("style", lambda_style),
            ("smooth", lambda_smooth),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "loss weight `{name}` must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(LossWeights {
            lambda_content,
            lambda_style,
            lambda_smooth,
        })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_content: 1.0,
            lambda_style: 1.0,
            lambda_smooth: 0.01,
        }
    }
}

/// Parses `c,s,m`.
impl FromStr for LossWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [c, st, m] = parts[..] else {
            return Err(Error::invalid(format!("expected three comma-separated weights, got `{s}`")));
        };
        let num = |p: &str| {
            p.parse::<f64>()
                .map_err(|_| Error::invalid(format!("`{p}` is not a number")))
        };
        LossWeights::new(num(c)?, num(st)?, num(m)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub content: f64,
    pub style: f64,
    pub smooth: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(content: f64, style: f64, smooth: f64, weights: &LossWeights) -> Self {
        LossReport {
            content,
            style,
            smooth,
            total: total_loss(content, style, smooth, weights),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.content, self.style, self.smooth, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// `step=N content=X style=Y smooth=Z total=W`.
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "step={step} content={} style={} smooth={} total={}",
            Sig6(self.content),
            Sig6(self.style),
            Sig6(self.smooth),
            Sig6(self.total)
        )
    }
}

/// Six significant digits, `%g` style: plain decimal for moderate
/// magnitudes, scientific otherwise, trailing zeros trimmed.
pub struct Sig6(pub f64);

impl fmt::Display for Sig6 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let x = self.0;
        if x == 0.0 || !x.is_finite() {
            return write!(f, "{x}");
        }
        // Exponent after rounding to six significant digits.
        let sci = format!("{x:.5e}");
        let (mantissa, exp) = sci.split_once('e').expect("scientific format");
        let exp: i32 = exp.parse().expect("exponent");
        if (-5..6).contains(&exp) {
            let decimals = (5 - exp).max(0) as usize;
            let s = format!("{x:.decimals$}");
            let s = if s.contains('.') {
                s.trim_end_matches('0').trim_end_matches('.')
            } else {
                &s
            };
            f.write_str(s)
        } else {
            let m = if mantissa.contains('.') {
                mantissa.trim_end_matches('0').trim_end_matches('.')
            } else {
                mantissa
            };
            write!(f, "{m}e{exp}")
        }
    }
}

fn classifier<'a>(params: &'a ParamStore, dim: usize) -> Result<(&'a [f64], &'a [f64], usize)> {
    let n_classes = params.get(CONTENT_BIAS)?.len();
    Ok((
        params.value(CONTENT_WEIGHT, &[n_classes, dim])?,
        params.value(CONTENT_BIAS, &[n_classes])?,
        n_classes,
    ))
}

fn check_labels(latent: &LatentSequence, labels: &[usize], n_classes: usize) -> Result<()> {
    if labels.len() != latent.len {
        return Err(Error::invalid(format!(
            "{} labels for {} latent frames",
            labels.len(),
            latent.len
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::invalid(format!(
            "label {bad} is outside the {n_classes} classes"
        )));
    }
    Ok(())
}

/// Per-frame class logits of the linear content classifier (`len × n_classes`).
pub fn content_logits(latent: &LatentSequence, params: &ParamStore) -> Result<Vec<Vec<f64>>> {
    let (w, b, n_classes) = classifier(params, latent.dim)?;
    Ok((0..latent.len)
        .map(|t| {
            let mut l = matvec(w, n_classes, latent.frame(t));
            l.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
            l
        })
        .collect())
}

/// Mean frame-wise softmax cross-entropy of the content classifier.
pub fn content_loss(latent: &LatentSequence, frame_labels: &[usize], params: &ParamStore) -> Result<f64> {
    let (_, _, n_classes) = classifier(params, latent.dim)?;
    check_labels(latent, frame_labels, n_classes)?;
    let logits = content_logits(latent, params)?;
    let sum: f64 = logits
        .iter()
        .zip(frame_labels)
        .map(|(l, &y)| log_sum_exp(l) - l[y])
        .sum();
    Ok(sum / latent.len as f64)
}

/// Fraction of frames whose arg-max logit equals the label.
pub fn content_accuracy(latent: &LatentSequence, frame_labels: &[usize], params: &ParamStore) -> Result<f64> {
    let (_, _, n_classes) = classifier(params, latent.dim)?;
    check_labels(latent, frame_labels, n_classes)?;
    let logits = content_logits(latent, params)?;
    let hits = logits
        .iter()
        .zip(frame_labels)
        .filter(|(l, &y)| {
            let best = l
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i);
            best == Some(y)
        })
        .count();
    Ok(hits as f64 / latent.len as f64)
}

/// Gradient of [`content_loss`] with respect to the latent frames; classifier
/// gradients go into `grads`.
pub fn content_loss_backward(
    latent: &LatentSequence,
    frame_labels: &[usize],
    params: &ParamStore,
    scale: f64,
    grads: &mut Grads,
) -> Result<Vec<f64>> {
    let (w, _, n_classes) = classifier(params, latent.dim)?;
    check_labels(latent, frame_labels, n_classes)?;
    let logits = content_logits(latent, params)?;
    let inv = scale / latent.len as f64;
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; n_classes];
    let mut g_latent = Vec::with_capacity(latent.frames.len());
    for (t, (l, &y)) in logits.iter().zip(frame_labels).enumerate() {
        let mut g = softmax(l);
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v *= inv);
        add_outer(&mut gw, &g, latent.frame(t));
        gb.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        g_latent.extend(matvec_t(w, latent.dim, &g));
    }
    accumulate(grads, CONTENT_WEIGHT, &gw);
    accumulate(grads, CONTENT_BIAS, &gb);
    Ok(g_latent)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "style embeddings differ in size: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding("style embedding has zero norm".into()));
    }
    if a == b {
        return Ok((1.0, na, nb));
    }
    Ok(((dot(a, b) / (na * nb)).clamp(-1.0, 1.0), na, nb))
}

/// `1 − cos(a, b)`, in [0, 2].
pub fn style_loss(audio_emb: &[f64], text_emb: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine(audio_emb, text_emb)?.0)
}

/// Gradients of `scale · style_loss` with respect to both inputs.
pub fn style_loss_backward(audio_emb: &[f64], text_emb: &[f64], scale: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (c, na, nb) = cosine(audio_emb, text_emb)?;
    let grad = |x: &[f64], nx: f64, y: &[f64], ny: f64| -> Vec<f64> {
        x.iter()
            .zip(y)
            .map(|(xi, yi)| -scale * (yi / (nx * ny) - c * xi / (nx * nx)))
            .collect()
    };
    Ok((grad(audio_emb, na, text_emb, nb), grad(text_emb, nb, audio_emb, na)))
}

/// Cosine similarity of two style embeddings, defined as `1 − style_loss`.
pub fn style_similarity(audio_emb: &[f64], text_emb: &[f64]) -> Result<f64> {
    Ok(1.0 - style_loss(audio_emb, text_emb)?)
}

/// `Σ_{t≥1} Σ_{f,c} |h_t − h_{t−1}|²`.
pub fn smoothness_loss(h: &HiddenStateGrid) -> f64 {
    let lanes = h.bins * h.channels;
    h.states
        .chunks_exact(lanes)
        .zip(h.states.chunks_exact(lanes).skip(1))
        .map(|(prev, cur)| {
            cur.iter()
                .zip(prev)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
        })
        .sum()
}

/// Gradient of `scale · smoothness_loss` in the `∂/∂re + i·∂/∂im` convention.
pub fn smoothness_loss_backward(h: &HiddenStateGrid, scale: f64) -> HiddenStateGrid {
    let lanes = h.bins * h.channels;
    let mut g = HiddenStateGrid::zeros(h.frames, h.bins, h.channels);
    for t in 1..h.frames {
        for l in 0..lanes {
            let d: Complex64 = (h.states[t * lanes + l] - h.states[(t - 1) * lanes + l]) * (2.0 * scale);
            g.states[t * lanes + l] += d;
            g.states[(t - 1) * lanes + l] -= d;
        }
    }
    g
}

pub fn total_loss(content: f64, style: f64, smooth: f64, weights: &LossWeights) -> f64 {
    weights.lambda_content * content + weights.lambda_style * style + weights.lambda_smooth * smooth
}
