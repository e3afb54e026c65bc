//! The assembled pipeline: configuration, parameter initialisation, the
//! per-example forward pass with its losses, the matching backward pass,
//! style transfer, and checkpoints that carry their own configuration.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{WK, WO, WQ, WV};
use crate::decoder::{
    self, decode_waveform_backward, decode_waveform_traced, latent_from_grid,
    latent_from_grid_backward, DecoderLayerSpec, DecoderSpec, DecoderTrace,
};
use crate::dsp::{stft_multi, stft_multi_backward, SpectralGrid, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::fusion::{
    transformer_ssm_backward, transformer_ssm_forward_traced, FusionContext, FusionRegistry,
    FusionTrace, FusionVariant, FUSE_BIAS, FUSE_WEIGHT,
};
use crate::losses::{
    content_loss, content_loss_backward, smoothness_loss, smoothness_loss_backward, style_loss,
    style_loss_backward, style_similarity, LossReport, LossWeights, CONTENT_BIAS, CONTENT_WEIGHT,
};
use crate::params::{Grads, Param, ParamStore};
use crate::projection::UnitProjection;
use crate::speech::{
    encode_speech_backward, encode_speech_traced, project_style_audio_backward,
    project_style_audio_cached, Activation, ConvLayerSpec, ConvSpec, EncoderTrace, LatentSequence,
    PHI_AUDIO,
};
use crate::ssm::{ALPHA_BIAS, ALPHA_WEIGHT, BETA_BIAS, BETA_WEIGHT};
use crate::text::{
    embed_text, embed_text_backward, project_style_text_backward, project_style_text_cached,
    tokenize, TextEmbedding, TokenSequence, Vocabulary, EMBEDDING_PARAM, PHI_TEXT,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub encoder: ConvSpec,
    pub stft: StftConfig,
    pub decoder: DecoderSpec,
    pub d_text: usize,
    pub d_style: usize,
    pub d_head: usize,
    pub n_classes: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: ConvSpec::default(),
            stft: StftConfig::default(),
            decoder: DecoderSpec::default(),
            d_text: 16,
            d_style: 8,
            d_head: 16,
            n_classes: 3,
            vocab_size: Vocabulary::builtin().len(),
        }
    }
}

/// One named parameter array and how it is initialised.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// `None` for biases (initialised to zero).
    pub fan_in: Option<usize>,
}

impl ModelConfig {
    /// A few-hundred-parameter configuration for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: ConvSpec {
                layers: vec![
                    ConvLayerSpec {
                        in_channels: 1,
                        out_channels: 3,
                        kernel_size: 4,
                        stride: 2,
                        activation: Activation::Tanh,
                    },
                    ConvLayerSpec {
                        in_channels: 3,
                        out_channels: 2,
                        kernel_size: 3,
                        stride: 2,
                        activation: Activation::Identity,
                    },
                ],
            },
            stft: StftConfig::new(8, 2).expect("valid"),
            decoder: DecoderSpec {
                layers: vec![
                    DecoderLayerSpec {
                        in_channels: 2,
                        out_channels: 2,
                        kernel_size: 3,
                        upsample: 2,
                    },
                    DecoderLayerSpec {
                        in_channels: 2,
                        out_channels: 1,
                        kernel_size: 3,
                        upsample: 2,
                    },
                ],
                sample_rate_hz: 8000,
            },
            d_text: 4,
            d_style: 3,
            d_head: 3,
            n_classes: 3,
            vocab_size: Vocabulary::builtin().len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.stft.validate().map_err(|e| Error::config(e.to_string()))?;
        if self.decoder.latent_dim() != self.encoder.latent_dim() {
            return Err(Error::config(format!(
                "decoder takes {} channels but the encoder produces {}",
                self.decoder.latent_dim(),
                self.encoder.latent_dim()
            )));
        }
        if self.decoder.upsample_factor() != self.encoder.stride_samples() {
            return Err(Error::config(format!(
                "decoder upsamples by {} but the encoder stride is {}",
                self.decoder.upsample_factor(),
                self.encoder.stride_samples()
            )));
        }
        for (name, v) in [
            ("d_text", self.d_text),
            ("d_style", self.d_style),
            ("d_head", self.d_head),
            ("n_classes", self.n_classes),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim()
    }

    /// SSM lanes: one per (bin, channel).
    pub fn lanes(&self) -> usize {
        self.stft.bins() * self.latent_dim()
    }

    /// Width of a flattened spectral frame.
    pub fn d_model(&self) -> usize {
        2 * self.lanes()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut w = |name: &str, shape: Vec<usize>, fan_in: usize| {
            out.push(ParamSpec {
                name: name.to_string(),
                shape,
                fan_in: Some(fan_in),
            })
        };
        let (dt, ds, dh, dm, lanes, d) = (
            self.d_text,
            self.d_style,
            self.d_head,
            self.d_model(),
            self.lanes(),
            self.latent_dim(),
        );
        for (i, l) in self.encoder.layers.iter().enumerate() {
            w(
                &format!("enc.layer{i}.weight"),
                vec![l.out_channels, l.in_channels, l.kernel_size],
                l.in_channels * l.kernel_size,
            );
        }
        w(EMBEDDING_PARAM, vec![self.vocab_size, dt], dt);
        w(&format!("{PHI_AUDIO}.weight"), vec![ds, d], d);
        w(&format!("{PHI_TEXT}.weight"), vec![ds, dt], dt);
        w(ALPHA_WEIGHT, vec![lanes, dt], dt);
        w(BETA_WEIGHT, vec![lanes, dt], dt);
        w(WQ, vec![dh, dm], dm);
        w(WK, vec![dh, dt], dt);
        w(WV, vec![dh, dt], dt);
        w(WO, vec![dm, dh], dh);
        w(FUSE_WEIGHT, vec![dm, 2 * dm], 2 * dm);
        for (i, l) in self.decoder.layers.iter().enumerate() {
            w(
                &decoder::weight_name(i),
                vec![l.in_channels, l.out_channels, l.kernel_size],
                l.in_channels * l.kernel_size,
            );
        }
        w(CONTENT_WEIGHT, vec![self.n_classes, d], d);

        let mut b = |name: String, n: usize| {
            out.push(ParamSpec {
                name,
                shape: vec![n],
                fan_in: None,
            })
        };
        for (i, l) in self.encoder.layers.iter().enumerate() {
            b(format!("enc.layer{i}.bias"), l.out_channels);
        }
        b(format!("{PHI_AUDIO}.bias"), ds);
        b(format!("{PHI_TEXT}.bias"), ds);
        b(ALPHA_BIAS.into(), lanes);
        b(BETA_BIAS.into(), lanes);
        b(FUSE_BIAS.into(), dm);
        for (i, l) in self.decoder.layers.iter().enumerate() {
            b(decoder::bias_name(i), l.out_channels);
        }
        b(CONTENT_BIAS.into(), self.n_classes);
        out
    }

    /// Scalars in the full parameter store.
    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    /// Scalars a variant actually reads: the attention projections are unused
    /// without attention and the gates are unused without the SSM.
    pub fn param_count_for(&self, variant: FusionVariant) -> usize {
        self.param_specs()
            .iter()
            .filter(|p| match variant {
                FusionVariant::TransformerSsm => true,
                FusionVariant::PureTransformer => !p.name.starts_with("gate."),
                FusionVariant::PureSsm => !p.name.starts_with("attn."),
            })
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }
}

/// Weights uniform in `±sqrt(1/fan_in)`, biases zero; one ChaCha stream
/// consumed in a fixed parameter order.
pub fn init_params(seed: u64, config: &ModelConfig) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in config.param_specs() {
        let n: usize = spec.shape.iter().product();
        let value = match spec.fan_in {
            Some(fan_in) => {
                let a = (1.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-a..=a)).collect()
            }
            None => vec![0.0; n],
        };
        store.insert(spec.name, Param::new(spec.shape, value));
    }
    Ok(store)
}

/// One training/evaluation item in model-ready form.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub waveform: Waveform,
    pub tokens: TokenSequence,
    pub frame_labels: Vec<usize>,
}

/// How the decoder's reconstruction term couples to the rest of the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderCoupling {
    /// The decoder sees a detached latent, so reconstruction only trains
    /// the decoder.
    Detached,
    /// Reconstruction gradients flow back through the whole pipeline.
    Joint,
}

/// Intermediates of one example's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub latent_in: LatentSequence,
    enc: EncoderTrace,
    pub grid: SpectralGrid,
    pub text: TextEmbedding,
    pub fusion: FusionTrace,
    pub latent_out: LatentSequence,
    audio_proj: UnitProjection,
    audio_pooled: Vec<f64>,
    text_proj: UnitProjection,
    dec: DecoderTrace,
    pub report: LossReport,
    /// Mean squared error of the pre-clamp decoder output against the input.
    pub reconstruction: f64,
}

impl ForwardTrace {
    pub fn audio_style(&self) -> &[f64] {
        &self.audio_proj.unit
    }

    pub fn text_style(&self) -> &[f64] {
        &self.text_proj.unit
    }

    pub fn decoded_pre_clamp(&self) -> &[f64] {
        &self.dec.pre_clamp
    }

    /// Value of the training objective: weighted losses plus reconstruction.
    pub fn objective(&self) -> f64 {
        self.report.total + self.reconstruction
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub variant: FusionVariant,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, variant: FusionVariant, params: ParamStore) -> Result<Self> {
        config.validate()?;
        check_params(&config, &params)?;
        Ok(Model {
            config,
            variant,
            params,
        })
    }

    pub fn init(seed: u64, config: ModelConfig, variant: FusionVariant) -> Result<Self> {
        let params = init_params(seed, &config)?;
        Ok(Model {
            config,
            variant,
            params,
        })
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::builtin()
    }

    pub fn forward(
        &self,
        example: &Example,
        weights: &LossWeights,
        ctx: &FusionContext<'_>,
    ) -> Result<ForwardTrace> {
        forward_with(&self.config, self.variant, &self.params, example, weights, ctx)
    }

    /// Runs the pipeline on `input` with `prompt`; returns the styled audio,
    /// the generated latent and the style similarity between the generated
    /// latent's audio embedding and the prompt's text embedding.
    pub fn transfer(&self, input: &Waveform, prompt: &str) -> Result<Transfer> {
        let tokens = tokenize(prompt, &self.vocabulary())?;
        self.transfer_tokens(input, &tokens, &FusionContext::default())
    }

    pub fn transfer_tokens(
        &self,
        input: &Waveform,
        tokens: &TokenSequence,
        ctx: &FusionContext<'_>,
    ) -> Result<Transfer> {
        let (latent_out, text) = self.generate_latent(input, tokens, ctx)?;
        let mut spec = self.config.decoder.clone();
        spec.sample_rate_hz = input.sample_rate_hz;
        let (waveform, _) = decode_waveform_traced(&latent_out, &spec, &self.params)?;
        let similarity = self.similarity(&latent_out, &text)?;
        Ok(Transfer {
            waveform,
            latent: latent_out,
            similarity,
        })
    }

    /// Encoder → STFT → fusion → inverse STFT.
    pub fn generate_latent(
        &self,
        input: &Waveform,
        tokens: &TokenSequence,
        ctx: &FusionContext<'_>,
    ) -> Result<(LatentSequence, TextEmbedding)> {
        let (z, _) = encode_speech_traced(input, &self.config.encoder, &self.params)?;
        let grid = stft_multi(&z, &self.config.stft)?;
        let text = embed_text(tokens, &self.params)?;
        let registry = FusionRegistry::default();
        let fusion =
            transformer_ssm_forward_traced(registry.variant(self.variant), &grid, &text, &self.params, ctx)?;
        let out = latent_from_grid(&fusion.output, z.stride_samples)?;
        Ok((out, text))
    }

    /// Style similarity between a generated latent and a text embedding.
    pub fn similarity(&self, latent: &LatentSequence, text: &TextEmbedding) -> Result<f64> {
        let (audio, _) = project_style_audio_cached(latent, &self.params, self.config.d_style)?;
        let text = project_style_text_cached(text, &self.params, self.config.d_style)?;
        style_similarity(&audio.unit, &text.unit)
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut store = self.params.clone();
        for (name, p) in meta_entries(&self.config, self.variant) {
            store.insert(name, p);
        }
        store.to_checkpoint_string()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(self.to_checkpoint_string().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        Self::from_store(ParamStore::from_checkpoint_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = fs::File::open(path)?;
        Self::from_store(ParamStore::read_from(BufReader::new(f))?)
    }

    fn from_store(mut store: ParamStore) -> Result<Self> {
        let meta_names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with(META_PREFIX))
            .map(String::from)
            .collect();
        let mut meta = ParamStore::new();
        let mut params = ParamStore::new();
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            let p = store.get_mut(&name)?.clone();
            if meta_names.contains(&name) {
                meta.insert(name, p);
            } else {
                params.insert(name, p);
            }
        }
        store = params;
        let (config, variant) = parse_meta(&meta)?;
        config
            .validate()
            .map_err(|e| Error::CorruptCheckpoint(format!("stored configuration is invalid: {e}")))?;
        check_params(&config, &store)?;
        Ok(Model {
            config,
            variant,
            params: store,
        })
    }
}

impl Model {
    /// A pure_ssm model whose transfer reproduces its input: one-sample
    /// identity encoder and decoder, α → 0 and β → 1 gates, and a fusion
    /// projection that passes the SSM branch through.
    pub fn identity(stft: StftConfig) -> Result<Model> {
        let config = ModelConfig {
            encoder: ConvSpec {
                layers: vec![ConvLayerSpec {
                    in_channels: 1,
                    out_channels: 1,
                    kernel_size: 1,
                    stride: 1,
                    activation: Activation::Identity,
                }],
            },
            stft,
            decoder: DecoderSpec {
                layers: vec![DecoderLayerSpec {
                    in_channels: 1,
                    out_channels: 1,
                    kernel_size: 1,
                    upsample: 1,
                }],
                sample_rate_hz: 8000,
            },
            d_text: 4,
            d_style: 2,
            d_head: 2,
            ..ModelConfig::default()
        };
        let mut m = Model::init(0, config, FusionVariant::PureSsm)?;
        let dm = m.config.d_model();
        let p = &mut m.params;
        p.get_mut("enc.layer0.weight")?.value = vec![1.0];
        p.get_mut("dec.layer0.weight")?.value = vec![1.0];
        for name in [ALPHA_WEIGHT, BETA_WEIGHT] {
            p.get_mut(name)?.value.iter_mut().for_each(|v| *v = 0.0);
        }
        p.get_mut(ALPHA_BIAS)?.value.iter_mut().for_each(|v| *v = -40.0);
        // softplus(b) + 1e-6 = 1
        let b = ((1.0f64 - 1e-6).exp() - 1.0).ln();
        p.get_mut(BETA_BIAS)?.value.iter_mut().for_each(|v| *v = b);
        let fw = &mut p.get_mut(FUSE_WEIGHT)?.value;
        fw.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..dm {
            fw[i * 2 * dm + i] = 1.0;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct Transfer {
    pub waveform: Waveform,
    pub latent: LatentSequence,
    pub similarity: f64,
}

fn check_params(config: &ModelConfig, params: &ParamStore) -> Result<()> {
    let specs = config.param_specs();
    for spec in &specs {
        let p = params
            .get(&spec.name)
            .map_err(|_| Error::CorruptCheckpoint(format!("missing parameter `{}`", spec.name)))?;
        if p.shape != spec.shape {
            return Err(Error::CorruptCheckpoint(format!(
                "`{}` has shape {:?}, the configuration needs {:?}",
                spec.name, p.shape, spec.shape
            )));
        }
    }
    if let Some(extra) = params.names().find(|n| !specs.iter().any(|s| s.name == *n)) {
        return Err(Error::CorruptCheckpoint(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}

const META_PREFIX: &str = "meta.";
const META_VERSION: f64 = 1.0;

fn meta_entries(config: &ModelConfig, variant: FusionVariant) -> Vec<(String, Param)> {
    let variant_code = FusionVariant::ALL.iter().position(|v| *v == variant).unwrap() as f64;
    let act = |a: Activation| match a {
        Activation::Tanh => 0.0,
        Activation::Identity => 1.0,
    };
    let enc: Vec<f64> = config
        .encoder
        .layers
        .iter()
        .flat_map(|l| {
            [
                l.in_channels as f64,
                l.out_channels as f64,
                l.kernel_size as f64,
                l.stride as f64,
                act(l.activation),
            ]
        })
        .collect();
    let dec: Vec<f64> = config
        .decoder
        .layers
        .iter()
        .flat_map(|l| {
            [
                l.in_channels as f64,
                l.out_channels as f64,
                l.kernel_size as f64,
                l.upsample as f64,
            ]
        })
        .collect();
    vec![
        ("meta.version".into(), Param::new(vec![1], vec![META_VERSION])),
        ("meta.variant".into(), Param::new(vec![1], vec![variant_code])),
        (
            "meta.encoder".into(),
            Param::new(vec![config.encoder.layers.len(), 5], enc),
        ),
        (
            "meta.decoder".into(),
            Param::new(vec![config.decoder.layers.len(), 4], dec),
        ),
        (
            "meta.stft".into(),
            Param::new(vec![2], vec![config.stft.fft_size as f64, config.stft.hop as f64]),
        ),
        (
            "meta.dims".into(),
            Param::new(
                vec![6],
                vec![
                    config.d_text as f64,
                    config.d_style as f64,
                    config.d_head as f64,
                    config.n_classes as f64,
                    config.vocab_size as f64,
                    config.decoder.sample_rate_hz as f64,
                ],
            ),
        ),
    ]
}

fn parse_meta(meta: &ParamStore) -> Result<(ModelConfig, FusionVariant)> {
    let corrupt = |m: String| Error::CorruptCheckpoint(m);
    let get = |name: &str| -> Result<&Param> {
        meta.get(name)
            .map_err(|_| corrupt(format!("missing configuration entry `{name}`")))
    };
    let int = |v: f64| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
            Ok(v as usize)
        } else {
            Err(corrupt(format!("configuration value {v} is not a count")))
        }
    };
    let version = get("meta.version")?;
    if version.value != [META_VERSION] {
        return Err(corrupt(format!(
            "unsupported configuration version {:?}",
            version.value
        )));
    }
    let variant = *FusionVariant::ALL
        .get(int(get("meta.variant")?.value[0])?)
        .ok_or_else(|| corrupt("unknown fusion variant code".into()))?;

    let rows = |p: &Param, width: usize| -> Result<Vec<Vec<usize>>> {
        if p.shape.len() != 2 || p.shape[1] != width {
            return Err(corrupt(format!("configuration table has shape {:?}", p.shape)));
        }
        p.value
            .chunks_exact(width)
            .map(|r| r.iter().map(|&v| int(v)).collect())
            .collect()
    };
    let encoder = ConvSpec {
        layers: rows(get("meta.encoder")?, 5)?
            .into_iter()
            .map(|r| {
                Ok(ConvLayerSpec {
                    in_channels: r[0],
                    out_channels: r[1],
                    kernel_size: r[2],
                    stride: r[3],
                    activation: match r[4] {
                        0 => Activation::Tanh,
                        1 => Activation::Identity,
                        k => return Err(corrupt(format!("unknown activation code {k}"))),
                    },
                })
            })
            .collect::<Result<_>>()?,
    };
    let dims = get("meta.dims")?;
    if dims.value.len() != 6 {
        return Err(corrupt("dimension entry must hold six values".into()));
    }
    let dims: Vec<usize> = dims.value.iter().map(|&v| int(v)).collect::<Result<_>>()?;
    let decoder = DecoderSpec {
        layers: rows(get("meta.decoder")?, 4)?
            .into_iter()
            .map(|r| DecoderLayerSpec {
                in_channels: r[0],
                out_channels: r[1],
                kernel_size: r[2],
                upsample: r[3],
            })
            .collect(),
        sample_rate_hz: u32::try_from(dims[5]).map_err(|_| corrupt("sample rate too large".into()))?,
    };
    let stft = get("meta.stft")?;
    if stft.value.len() != 2 {
        return Err(corrupt("stft entry must hold two values".into()));
    }
    let stft = StftConfig::new(int(stft.value[0])?, int(stft.value[1])?)
        .map_err(|e| corrupt(format!("stored stft configuration: {e}")))?;
    let config = ModelConfig {
        encoder,
        stft,
        decoder,
        d_text: dims[0],
        d_style: dims[1],
        d_head: dims[2],
        n_classes: dims[3],
        vocab_size: dims[4],
    };
    Ok((config, variant))
}

/// Forward pass of one example with explicit parameters (used by the
/// trainer and the gradient checker).
pub fn forward_with(
    config: &ModelConfig,
    variant: FusionVariant,
    params: &ParamStore,
    example: &Example,
    weights: &LossWeights,
    ctx: &FusionContext<'_>,
) -> Result<ForwardTrace> {
    let (latent_in, enc) = encode_speech_traced(&example.waveform, &config.encoder, params)?;
    let grid = stft_multi(&latent_in, &config.stft)?;
    let text = embed_text(&example.tokens, params)?;
    let registry = FusionRegistry::default();
    let fusion = transformer_ssm_forward_traced(registry.variant(variant), &grid, &text, params, ctx)?;
    let latent_out = latent_from_grid(&fusion.output, latent_in.stride_samples)?;

    let content = content_loss(&latent_out, &example.frame_labels, params)?;
    let (audio_proj, audio_pooled) = project_style_audio_cached(&latent_out, params, config.d_style)?;
    let text_proj = project_style_text_cached(&text, params, config.d_style)?;
    let style = style_loss(&audio_proj.unit, &text_proj.unit)?;
    let smooth = fusion
        .branches
        .ssm
        .as_ref()
        .map_or(0.0, |s| smoothness_loss(&s.states));
    let report = LossReport::new(content, style, smooth, weights);

    let (_, dec) = decode_waveform_traced(&latent_out, &config.decoder, params)?;
    let reconstruction = reconstruction_error(&dec.pre_clamp, &example.waveform.samples);

    Ok(ForwardTrace {
        latent_in,
        enc,
        grid,
        text,
        fusion,
        latent_out,
        audio_proj,
        audio_pooled,
        text_proj,
        dec,
        report,
        reconstruction,
    })
}

fn reconstruction_error(decoded: &[f64], target: &[f64]) -> f64 {
    let n = decoded.len().min(target.len());
    decoded[..n]
        .iter()
        .zip(&target[..n])
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n as f64
}

/// Gradients of [`ForwardTrace::objective`] with respect to every parameter.
pub fn backward(
    config: &ModelConfig,
    params: &ParamStore,
    example: &Example,
    trace: &ForwardTrace,
    weights: &LossWeights,
    coupling: DecoderCoupling,
) -> Result<Grads> {
    let mut grads = Grads::new();
    let latent_out = &trace.latent_out;

    // Reconstruction → decoder (and optionally the latent).
    let n = trace.dec.pre_clamp.len().min(example.waveform.samples.len());
    let mut g_dec = vec![0.0; trace.dec.pre_clamp.len()];
    for i in 0..n {
        g_dec[i] = 2.0 * (trace.dec.pre_clamp[i] - example.waveform.samples[i]) / n as f64;
    }
    let g_from_dec = decode_waveform_backward(&config.decoder, params, &trace.dec, &g_dec, &mut grads)?;

    let mut g_latent = content_loss_backward(
        latent_out,
        &example.frame_labels,
        params,
        weights.lambda_content,
        &mut grads,
    )?;
    if coupling == DecoderCoupling::Joint {
        for (a, b) in g_latent.iter_mut().zip(&g_from_dec) {
            *a += b;
        }
    }

    let (g_audio_unit, g_text_unit) =
        style_loss_backward(&trace.audio_proj.unit, &trace.text_proj.unit, weights.lambda_style)?;
    let g_style_latent = project_style_audio_backward(
        latent_out,
        params,
        &trace.audio_proj,
        &trace.audio_pooled,
        &g_audio_unit,
        &mut grads,
    )?;
    for (a, b) in g_latent.iter_mut().zip(&g_style_latent) {
        *a += b;
    }
    let mut g_pooled =
        project_style_text_backward(&trace.text, params, &trace.text_proj, &g_text_unit, &mut grads)?;

    let g_grid_out = latent_from_grid_backward(&g_latent, &trace.fusion.output)?;
    let g_states = trace
        .fusion
        .branches
        .ssm
        .as_ref()
        .map(|s| smoothness_loss_backward(&s.states, weights.lambda_smooth));
    let fg = transformer_ssm_backward(
        &trace.grid,
        &trace.text,
        params,
        &trace.fusion,
        &g_grid_out.flatten_frames(),
        g_states.as_ref(),
        &mut grads,
    )?;
    for (a, b) in g_pooled.iter_mut().zip(&fg.grad_pooled) {
        *a += b;
    }
    embed_text_backward(&example.tokens, params, &fg.grad_tokens, &g_pooled, &mut grads)?;

    let g_z = stft_multi_backward(&fg.grad_input);
    encode_speech_backward(&config.encoder, params, &trace.enc, &g_z, &mut grads)?;
    Ok(grads)
}
