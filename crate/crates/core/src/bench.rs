//! Ablation and scaling harnesses.
//!
//! Published figures appear in the printed tables only as labelled context;
//! nothing here tries to reproduce them.

use std::fmt::Write as _;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{frame_self_attention, AttentionConfig, SelfAttentionWeights};
use crate::corpus::{Style, ToyExample};
use crate::dsp::{SpectralGrid, StftConfig};
use crate::error::{Error, Result};
use crate::fusion::{transformer_ssm_forward_traced, FusionContext, FusionRegistry, FusionVariant};
use crate::losses::content_accuracy;
use crate::model::{init_params, Model, ModelConfig};
use crate::params::ParamStore;
use crate::speech::{Activation, ConvLayerSpec, ConvSpec};
use crate::ssm::{ChunkedScan, SequentialScan};
use crate::decoder::{DecoderLayerSpec, DecoderSpec};
use crate::text::{embed_text, tokenize, TextEmbedding};

/// Published style-similarity figures for the three ablation rows.
const PUBLISHED_ABLATION: [(FusionVariant, f64); 3] = [
    (FusionVariant::PureTransformer, 0.38),
    (FusionVariant::PureSsm, 0.33),
    (FusionVariant::TransformerSsm, 0.44),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub variant: FusionVariant,
    pub label: &'static str,
    /// Mean similarity between the generated audio and its own prompt.
    pub style_similarity: f64,
    /// Mean similarity between the generated audio and prompts naming the
    /// other styles.
    pub mismatched_similarity: f64,
    pub margin: f64,
    pub content_accuracy: f64,
    pub examples: usize,
}

/// The prompt with its style word swapped for `other`'s.
fn swap_style(prompt: &str, own: Style, other: Style) -> String {
    prompt
        .split(' ')
        .map(|w| if w == own.word() { other.word() } else { w })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Scores one model on held-out examples, running it as `model.variant`.
pub fn evaluate(model: &Model, corpus: &[ToyExample], row: FusionVariant) -> Result<EvalResult> {
    if corpus.is_empty() {
        return Err(Error::invalid("evaluation corpus is empty"));
    }
    let vocab = model.vocabulary();
    let ctx = FusionContext::default();
    let (mut matched, mut mismatched, mut acc) = (0.0, 0.0, 0.0);
    for ex in corpus {
        let own = ex.style();
        let tokens = tokenize(&ex.prompt, &vocab)?;
        let (latent, text) = model.generate_latent(&ex.waveform, &tokens, &ctx)?;
        matched += model.similarity(&latent, &text)?;
        let others: Vec<Style> = Style::ALL.into_iter().filter(|s| *s != own).collect();
        let mut mm = 0.0;
        for other in &others {
            let t = tokenize(&swap_style(&ex.prompt, own, *other), &vocab)?;
            let e: TextEmbedding = embed_text(&t, &model.params)?;
            mm += model.similarity(&latent, &e)?;
        }
        mismatched += mm / others.len() as f64;
        acc += content_accuracy(&latent, &ex.frame_labels, &model.params)?;
    }
    let n = corpus.len() as f64;
    Ok(EvalResult {
        variant: row,
        label: row.label(),
        style_similarity: matched / n,
        mismatched_similarity: mismatched / n,
        margin: (matched - mismatched) / n,
        content_accuracy: acc / n,
        examples: corpus.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<EvalResult>,
}

impl AblationTable {
    pub fn row(&self, variant: FusionVariant) -> Option<&EvalResult> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(7).max(7);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>10}  {:>10}  {:>8}  {:>9}  {:>9}",
            "variant", "style_sim", "mismatch", "margin", "content", "published"
        );
        for r in &self.rows {
            let published = PUBLISHED_ABLATION
                .iter()
                .find(|(v, _)| *v == r.variant)
                .map_or(f64::NAN, |(_, p)| *p);
            let _ = writeln!(
                s,
                "{:<width$}  {:>10.4}  {:>10.4}  {:>8.4}  {:>9.4}  {:>9.2}",
                r.label, r.style_similarity, r.mismatched_similarity, r.margin, r.content_accuracy, published
            );
        }
        let _ = writeln!(
            s,
            "(published: CLIP-Audio on a large speech corpus, shown for context only; not comparable)"
        );
        s
    }

    pub fn to_json_lines(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json_line(r) + "\n")
            .collect()
    }
}

fn serde_json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("rows serialize")
}

/// Evaluates one checkpoint per variant; each checkpoint runs under its
/// own stored variant and is reported under the variant it is paired with.
pub fn run_ablation(corpus: &[ToyExample], checkpoints: &[(FusionVariant, &Model)]) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(3);
    for variant in FusionVariant::ALL {
        let matching: Vec<&Model> = checkpoints
            .iter()
            .filter(|(v, _)| *v == variant)
            .map(|(_, m)| *m)
            .collect();
        match matching[..] {
            [m] => rows.push(evaluate(m, corpus, variant)?),
            [] => return Err(Error::invalid(format!("missing checkpoint for `{variant}`"))),
            _ => return Err(Error::invalid(format!("more than one checkpoint for `{variant}`"))),
        }
    }
    Ok(AblationTable { rows })
}

/// What a scaling row measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchKind {
    Fusion(FusionVariant),
    /// Frames attending to frames, standing in for a quadratic baseline.
    QuadraticReference,
}

impl BenchKind {
    pub fn name(self) -> &'static str {
        match self {
            BenchKind::Fusion(v) => v.name(),
            BenchKind::QuadraticReference => "quadratic_self_attention",
        }
    }

    pub fn is_linear(self) -> bool {
        matches!(self, BenchKind::Fusion(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub variant: &'static str,
    pub seq_len: usize,
    pub wall_time_s: f64,
    pub param_count: usize,
    pub parallel: bool,
}

/// Bench configuration (d_model 144). Frames are wide enough that even short
/// sequences overflow a typical L2 cache, so every length is timed in the
/// same memory regime and ratios reflect work rather than cache effects.
pub fn bench_model_config() -> ModelConfig {
    ModelConfig {
        encoder: ConvSpec {
            layers: vec![ConvLayerSpec {
                in_channels: 1,
                out_channels: 8,
                kernel_size: 4,
                stride: 4,
                activation: Activation::Identity,
            }],
        },
        stft: StftConfig::new(16, 4).expect("valid"),
        decoder: DecoderSpec {
            layers: vec![DecoderLayerSpec {
                in_channels: 8,
                out_channels: 1,
                kernel_size: 4,
                upsample: 4,
            }],
            sample_rate_hz: 8000,
        },
        ..ModelConfig::default()
    }
}

/// Shortest wall time of one timed sample; short calls are repeated.
const MIN_SAMPLE_S: f64 = 0.02;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn random_grid(config: &ModelConfig, frames: usize, rng: &mut ChaCha8Rng) -> SpectralGrid {
    let mut g = SpectralGrid::zeros(frames, config.latent_dim(), config.stft, frames * config.stft.hop);
    for z in g.data.iter_mut() {
        *z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    }
    g
}

fn self_attention_weights(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<SelfAttentionWeights> {
    let (dm, dh) = (config.d_model(), config.d_head);
    let mut m = |n: usize, fan_in: usize| -> Vec<f64> {
        let a = (1.0 / fan_in as f64).sqrt();
        (0..n).map(|_| rng.gen_range(-a..=a)).collect()
    };
    Ok(SelfAttentionWeights {
        wq: m(dh * dm, dm),
        wk: m(dh * dm, dm),
        wv: m(dh * dm, dm),
        wo: m(dm * dh, dh),
        cfg: AttentionConfig::new(dm, dh)?,
    })
}

/// Scalars the timed computation reads.
fn layer_param_count(config: &ModelConfig, kind: BenchKind) -> usize {
    let (dm, dh) = (config.d_model(), config.d_head);
    let prefixes: &[&str] = match kind {
        BenchKind::Fusion(FusionVariant::TransformerSsm) => &["fuse.", "gate.", "attn."],
        BenchKind::Fusion(FusionVariant::PureTransformer) => &["fuse.", "attn."],
        BenchKind::Fusion(FusionVariant::PureSsm) => &["fuse.", "gate."],
        BenchKind::QuadraticReference => return 4 * dh * dm,
    };
    config
        .param_specs()
        .iter()
        .filter(|p| prefixes.iter().any(|pre| p.name.starts_with(pre)))
        .map(|p| p.shape.iter().product::<usize>())
        .sum()
}

/// Times one fusion-layer pass per variant (plus the quadratic reference)
/// on random grids of `seq_len` frames; each row is the median of `repeats`
/// samples taken after one warm-up.
pub fn run_scaling_bench(seq_lens: &[usize], repeats: usize, parallel: bool) -> Result<Vec<BenchResult>> {
    if repeats < 3 {
        return Err(Error::invalid("at least 3 repeats are needed for a median"));
    }
    if seq_lens.is_empty() || seq_lens.windows(2).any(|w| w[0] >= w[1]) || seq_lens[0] == 0 {
        return Err(Error::invalid("seq_lens must be positive and strictly ascending"));
    }
    let config = bench_model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params: ParamStore = init_params(0, &config)?;
    let vocab = crate::text::Vocabulary::builtin();
    let text = embed_text(&tokenize("speak in a very excited voice", &vocab)?, &params)?;
    let self_attn = self_attention_weights(&config, &mut rng)?;
    let registry = FusionRegistry::default();
    let chunked = ChunkedScan::default();
    let ctx = FusionContext {
        scan: if parallel { &chunked } else { &SequentialScan },
        parallel,
    };
    let kinds = [
        BenchKind::Fusion(FusionVariant::PureTransformer),
        BenchKind::Fusion(FusionVariant::PureSsm),
        BenchKind::Fusion(FusionVariant::TransformerSsm),
        BenchKind::QuadraticReference,
    ];

    let grids: Vec<SpectralGrid> = seq_lens.iter().map(|&t| random_grid(&config, t, &mut rng)).collect();
    let once = |kind: BenchKind, grid: &SpectralGrid| -> Result<f64> {
        Ok(match kind {
            BenchKind::Fusion(v) => {
                let tr = transformer_ssm_forward_traced(registry.variant(v), grid, &text, &params, &ctx)?;
                tr.output.data[0].re
            }
            BenchKind::QuadraticReference => {
                frame_self_attention(&grid.flatten_frames(), &self_attn, parallel)[0]
            }
        })
    };
    // mean per-call time over `iters` calls
    let run = |kind: BenchKind, grid: &SpectralGrid, iters: usize| -> Result<f64> {
        let start = Instant::now();
        for _ in 0..iters {
            std::hint::black_box(once(kind, grid)?);
        }
        Ok((start.elapsed().as_secs_f64() / iters as f64).max(1e-12))
    };

    let cells: Vec<(BenchKind, usize)> = (0..grids.len())
        .flat_map(|g| kinds.into_iter().map(move |k| (k, g)))
        .collect();
    // warm-up doubles as calibration: short calls are repeated until a
    // sample lasts MIN_SAMPLE_S
    let iters = cells
        .iter()
        .map(|&(k, g)| Ok(((MIN_SAMPLE_S / run(k, &grids[g], 1)?).ceil() as usize).clamp(1, 10_000)))
        .collect::<Result<Vec<_>>>()?;
    // round-robin over cells so slow drift in machine load hits all of them
    let mut times = vec![Vec::with_capacity(repeats); cells.len()];
    for _ in 0..repeats {
        for (i, &(k, g)) in cells.iter().enumerate() {
            times[i].push(run(k, &grids[g], iters[i])?);
        }
    }
    Ok(cells
        .iter()
        .zip(times)
        .map(|(&(kind, g), ts)| BenchResult {
            variant: kind.name(),
            seq_len: seq_lens[g],
            wall_time_s: median(ts),
            param_count: layer_param_count(&config, kind),
            parallel,
        })
        .collect())
}

/// `time(hi) / time(lo)` for every variant measured at both lengths.
pub fn scaling_ratios(results: &[BenchResult], lo: usize, hi: usize) -> Vec<(&'static str, f64)> {
    let mut names: Vec<&'static str> = Vec::new();
    for r in results {
        if !names.contains(&r.variant) {
            names.push(r.variant);
        }
    }
    names
        .into_iter()
        .filter_map(|name| {
            let at = |t| results.iter().find(|r| r.variant == name && r.seq_len == t);
            Some((name, at(hi)?.wall_time_s / at(lo)?.wall_time_s))
        })
        .collect()
}

pub fn bench_table(results: &[BenchResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<26}  {:>8}  {:>12}  {:>10}  {:>8}",
        "variant", "seq_len", "wall_time_s", "params", "parallel"
    );
    for r in results {
        let _ = writeln!(
            s,
            "{:<26}  {:>8}  {:>12.6}  {:>10}  {:>8}",
            r.variant, r.seq_len, r.wall_time_s, r.param_count, r.parallel
        );
    }
    let _ = writeln!(
        s,
        "(published, context only, not reproduced: 87M params / 0.45 s per 20-s utterance; \
         diffusion baseline 210M params / 1.22 s)"
    );
    s
}

pub fn bench_json_lines(results: &[BenchResult]) -> String {
    results.iter().map(|r| serde_json_line(r) + "\n").collect()
}
