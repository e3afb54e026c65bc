//! Synthetic style corpus: short two-partial tones whose base frequency
//! follows a pseudo-phoneme label sequence, reshaped by one of four styles.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::model::Example;
use crate::speech::ConvSpec;
use crate::text::{tokenize, Vocabulary};

pub const SAMPLE_RATE_HZ: u32 = 8000;
pub const EXAMPLE_SAMPLES: usize = 4000;
pub const SEGMENTS: usize = 4;
pub const SEGMENT_SAMPLES: usize = EXAMPLE_SAMPLES / SEGMENTS;
/// Base frequency of each pseudo-phoneme class.
pub const CLASS_FREQS_HZ: [f64; 3] = [220.0, 330.0, 440.0];
pub const STYLES: [&str; 4] = ["excited", "mysterious", "soothing", "angry"];

const FUNDAMENTAL_AMP: f64 = 0.4;
const OCTAVE_AMP: f64 = 0.2;
const TREMOLO_HZ: f64 = 2.0;

const PREFIXES: [&str; 6] = ["", "a", "very", "speak in a", "speak with a really", "read with a slightly"];
const SUFFIXES: [&str; 5] = ["", "voice", "tone", "style", "mood"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Excited,
    Mysterious,
    Soothing,
    Angry,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Excited, Style::Mysterious, Style::Soothing, Style::Angry];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Style> {
        Style::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("style id {id} is outside 0..4")))
    }

    pub fn word(self) -> &'static str {
        STYLES[self.id()]
    }

    fn pitch(self) -> f64 {
        match self {
            Style::Excited => 1.5,
            Style::Soothing => 0.75,
            _ => 1.0,
        }
    }

    fn gain(self) -> f64 {
        match self {
            Style::Excited => 1.2,
            Style::Soothing => 0.7,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyExample {
    pub waveform: Waveform,
    pub prompt: String,
    pub frame_labels: Vec<usize>,
    pub style_id: usize,
    /// Class of each waveform segment.
    pub segment_labels: Vec<usize>,
}

impl ToyExample {
    pub fn style(&self) -> Style {
        Style::ALL[self.style_id]
    }

    pub fn to_example(&self, vocab: &Vocabulary) -> Result<Example> {
        Ok(Example {
            waveform: self.waveform.clone(),
            tokens: tokenize(&self.prompt, vocab)?,
            frame_labels: self.frame_labels.clone(),
        })
    }

    /// The same audio paired with a different prompt.
    pub fn with_prompt(&self, vocab: &Vocabulary, prompt: &str) -> Result<Example> {
        Ok(Example {
            tokens: tokenize(prompt, vocab)?,
            ..self.to_example(vocab)?
        })
    }
}

/// Synthesises one example. `phase0` is the starting phase of the
/// fundamental in radians.
pub fn synthesize(style: Style, segment_labels: &[usize], phase0: f64) -> Result<Vec<f64>> {
    if segment_labels.len() != SEGMENTS {
        return Err(Error::invalid(format!("expected {SEGMENTS} segment labels")));
    }
    if let Some(bad) = segment_labels.iter().find(|&&l| l >= CLASS_FREQS_HZ.len()) {
        return Err(Error::invalid(format!("segment label {bad} is outside 0..3")));
    }
    let sr = SAMPLE_RATE_HZ as f64;
    let mut phase = phase0;
    let mut out = Vec::with_capacity(EXAMPLE_SAMPLES);
    for n in 0..EXAMPLE_SAMPLES {
        let f = CLASS_FREQS_HZ[segment_labels[n / SEGMENT_SAMPLES]] * style.pitch();
        let mut s = FUNDAMENTAL_AMP * phase.sin() + OCTAVE_AMP * (2.0 * phase).sin();
        match style {
            // odd harmonics at 1/k of the fundamental: a softened square wave
            Style::Angry => {
                s += FUNDAMENTAL_AMP / 3.0 * (3.0 * phase).sin() + FUNDAMENTAL_AMP / 5.0 * (5.0 * phase).sin();
            }
            Style::Mysterious => {
                s *= 0.6 + 0.4 * (2.0 * PI * TREMOLO_HZ * n as f64 / sr).sin();
            }
            _ => {}
        }
        out.push(s * style.gain());
        phase += 2.0 * PI * f / sr;
    }
    Ok(out)
}

/// Label of every latent frame of the default encoder: the class of the
/// segment holding the centre of the frame's receptive field.
pub fn frame_labels(segment_labels: &[usize]) -> Vec<usize> {
    let spec = ConvSpec::default();
    let len = spec.output_len(EXAMPLE_SAMPLES).expect("examples are long enough");
    let stride = spec.stride_samples();
    let half_field = (spec.min_input_len() - 1) / 2;
    (0..len)
        .map(|t| segment_labels[((t * stride + half_field) / SEGMENT_SAMPLES).min(SEGMENTS - 1)])
        .collect()
}

fn random_prompt(style: Style, rng: &mut ChaCha8Rng) -> String {
    let pre = PREFIXES.choose(rng).unwrap();
    let suf = SUFFIXES.choose(rng).unwrap();
    [*pre, style.word(), *suf]
        .iter()
        .filter(|s| !s.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(" ")
}

/// `n_per_style` examples of each style, interleaved by style.
pub fn generate_toy_corpus(seed: u64, n_per_style: usize) -> Result<Vec<ToyExample>> {
    if n_per_style == 0 {
        return Err(Error::invalid("n_per_style must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(4 * n_per_style);
    for _ in 0..n_per_style {
        for style in Style::ALL {
            let segment_labels: Vec<usize> = (0..SEGMENTS).map(|_| rng.gen_range(0..CLASS_FREQS_HZ.len())).collect();
            let phase0 = rng.gen_range(0.0..2.0 * PI);
            let samples = synthesize(style, &segment_labels, phase0)?;
            out.push(ToyExample {
                waveform: Waveform::new(samples, SAMPLE_RATE_HZ)?,
                prompt: random_prompt(style, &mut rng),
                frame_labels: frame_labels(&segment_labels),
                style_id: style.id(),
                segment_labels,
            });
        }
    }
    Ok(out)
}
