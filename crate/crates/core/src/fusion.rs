//! The fusion layer: an SSM branch and a text cross-attention branch read the
//! same flattened spectral frame, and a learned projection of their
//! concatenation produces the updated frame.
//!
//! Which branches run is decided by a [`FusionStrategy`]. The three
//! strategies (combined, attention-only, SSM-only) are registered by name in
//! a [`FusionRegistry`] so the trainer, the CLI and the ablation harness can
//! select them at runtime.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::Serialize;

use crate::attention::{
    cross_attention_backward, cross_attention_traced, AttentionConfig, AttentionTrace, WQ,
};
use crate::dsp::SpectralGrid;
use crate::error::{Error, Result};
use crate::linalg::{add_outer, matvec, matvec_t};
use crate::params::{accumulate, Grads, ParamStore};
use crate::ssm::{
    compute_gates, compute_gates_backward, ssm_scan_backward_with_states, ssm_scan_with,
    GateParams, HiddenStateGrid, ScanStrategy, SequentialScan,
};
use crate::text::TextEmbedding;

pub const FUSE_WEIGHT: &str = "fuse.weight";
pub const FUSE_BIAS: &str = "fuse.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    TransformerSsm,
    PureTransformer,
    PureSsm,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 3] = [
        FusionVariant::PureTransformer,
        FusionVariant::PureSsm,
        FusionVariant::TransformerSsm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::TransformerSsm => "transformer_ssm",
            FusionVariant::PureTransformer => "pure_transformer",
            FusionVariant::PureSsm => "pure_ssm",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            FusionVariant::TransformerSsm => "Transformer-SSM",
            FusionVariant::PureTransformer => "Pure Transformer (no SSM)",
            FusionVariant::PureSsm => "Pure SSM (no attention)",
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fusion variant `{s}`")))
    }
}

/// Execution knobs shared by every strategy.
#[derive(Clone, Copy)]
pub struct FusionContext<'a> {
    pub scan: &'a dyn ScanStrategy,
    pub parallel: bool,
}

impl Default for FusionContext<'_> {
    fn default() -> Self {
        FusionContext {
            scan: &SequentialScan,
            parallel: false,
        }
    }
}

impl fmt::Debug for FusionContext<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FusionContext")
            .field("scan", &self.scan.name())
            .field("parallel", &self.parallel)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct SsmTrace {
    pub gates: GateParams,
    pub states: HiddenStateGrid,
}

#[derive(Debug, Clone)]
pub struct AttnBranchTrace {
    pub cfg: AttentionConfig,
    pub trace: AttentionTrace,
}

/// Branch outputs before fusion; `None` means the branch is absent and
/// contributes zeros.
#[derive(Debug, Clone, Default)]
pub struct Branches {
    pub ssm: Option<SsmTrace>,
    pub attn: Option<AttnBranchTrace>,
}

/// Everything the backward pass needs from one fusion forward.
#[derive(Debug, Clone)]
pub struct FusionTrace {
    pub variant: FusionVariant,
    pub input_flat: Vec<f64>,
    pub branches: Branches,
    pub output: SpectralGrid,
}

pub trait FusionStrategy: Send + Sync {
    fn variant(&self) -> FusionVariant;

    fn name(&self) -> &'static str {
        self.variant().name()
    }

    /// Evaluates the branches this strategy uses.
    fn branches(
        &self,
        grid: &SpectralGrid,
        flat: &[f64],
        text: &TextEmbedding,
        params: &ParamStore,
        ctx: &FusionContext<'_>,
    ) -> Result<Branches>;
}

fn ssm_branch(
    grid: &SpectralGrid,
    text: &TextEmbedding,
    params: &ParamStore,
    ctx: &FusionContext<'_>,
) -> Result<SsmTrace> {
    let gates = compute_gates(&text.pooled, params, grid.bins, grid.channels)?;
    let states = ssm_scan_with(ctx.scan, grid, &gates)?;
    Ok(SsmTrace { gates, states })
}

fn attention_config(params: &ParamStore, d_model: usize) -> Result<AttentionConfig> {
    let wq = params.get(WQ)?;
    match wq.shape[..] {
        [d_head, dm] if dm == d_model => AttentionConfig::new(d_model, d_head),
        _ => Err(Error::config(format!(
            "`{WQ}` has shape {:?}, expected [d_head, {d_model}]",
            wq.shape
        ))),
    }
}

fn attention_branch(
    grid: &SpectralGrid,
    flat: &[f64],
    text: &TextEmbedding,
    params: &ParamStore,
    ctx: &FusionContext<'_>,
) -> Result<AttnBranchTrace> {
    let cfg = attention_config(params, grid.frame_width())?;
    let trace = cross_attention_traced(flat, text, params, &cfg, ctx.parallel)?;
    Ok(AttnBranchTrace { cfg, trace })
}

#[derive(Debug, Default, Clone, Copy)]
pub struct TransformerSsm;

impl FusionStrategy for TransformerSsm {
    fn variant(&self) -> FusionVariant {
        FusionVariant::TransformerSsm
    }

    fn branches(
        &self,
        grid: &SpectralGrid,
        flat: &[f64],
        text: &TextEmbedding,
        params: &ParamStore,
        ctx: &FusionContext<'_>,
    ) -> Result<Branches> {
        Ok(Branches {
            ssm: Some(ssm_branch(grid, text, params, ctx)?),
            attn: Some(attention_branch(grid, flat, text, params, ctx)?),
        })
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct PureTransformer;

impl FusionStrategy for PureTransformer {
    fn variant(&self) -> FusionVariant {
        FusionVariant::PureTransformer
    }

    fn branches(
        &self,
        grid: &SpectralGrid,
        flat: &[f64],
        text: &TextEmbedding,
        params: &ParamStore,
        ctx: &FusionContext<'_>,
    ) -> Result<Branches> {
        Ok(Branches {
            ssm: None,
            attn: Some(attention_branch(grid, flat, text, params, ctx)?),
        })
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct PureSsm;

impl FusionStrategy for PureSsm {
    fn variant(&self) -> FusionVariant {
        FusionVariant::PureSsm
    }

    fn branches(
        &self,
        grid: &SpectralGrid,
        _flat: &[f64],
        text: &TextEmbedding,
        params: &ParamStore,
        ctx: &FusionContext<'_>,
    ) -> Result<Branches> {
        Ok(Branches {
            ssm: Some(ssm_branch(grid, text, params, ctx)?),
            attn: None,
        })
    }
}

pub struct FusionRegistry {
    entries: BTreeMap<&'static str, Box<dyn FusionStrategy>>,
}

impl FusionRegistry {
    pub fn empty() -> Self {
        FusionRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, strategy: Box<dyn FusionStrategy>) {
        self.entries.insert(strategy.name(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<&dyn FusionStrategy> {
        self.entries.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            Error::invalid(format!(
                "unknown fusion variant `{name}` (known: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn variant(&self, variant: FusionVariant) -> &dyn FusionStrategy {
        self.get(variant.name()).expect("all variants are registered")
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

impl Default for FusionRegistry {
    fn default() -> Self {
        let mut r = FusionRegistry::empty();
        r.register(Box::new(TransformerSsm));
        r.register(Box::new(PureTransformer));
        r.register(Box::new(PureSsm));
        r
    }
}

fn fuse_params(params: &ParamStore, d_model: usize) -> Result<(&[f64], &[f64])> {
    Ok((
        params.value(FUSE_WEIGHT, &[d_model, 2 * d_model])?,
        params.value(FUSE_BIAS, &[d_model])?,
    ))
}

/// `W_F · [ssm_i ; attn_i] + b_F` for every frame; branches are `T × d_model`.
pub fn fuse(ssm_branch: &[f64], attn_branch: &[f64], params: &ParamStore) -> Result<Vec<f64>> {
    if ssm_branch.len() != attn_branch.len() {
        return Err(Error::invalid(format!(
            "branch sizes differ: {} vs {}",
            ssm_branch.len(),
            attn_branch.len()
        )));
    }
    let bias = params.get(FUSE_BIAS)?;
    let d_model = bias.len();
    if d_model == 0 || ssm_branch.len() % d_model != 0 {
        return Err(Error::invalid(format!(
            "branch length {} is not a multiple of d_model {d_model}",
            ssm_branch.len()
        )));
    }
    let (w, b) = fuse_params(params, d_model)?;
    let mut concat = vec![0.0; 2 * d_model];
    let mut out = Vec::with_capacity(ssm_branch.len());
    for (s, a) in ssm_branch.chunks_exact(d_model).zip(attn_branch.chunks_exact(d_model)) {
        concat[..d_model].copy_from_slice(s);
        concat[d_model..].copy_from_slice(a);
        out.extend(matvec(w, d_model, &concat).iter().zip(b).map(|(y, bi)| y + bi));
    }
    Ok(out)
}

/// Returns `(grad_ssm_branch, grad_attn_branch)`.
fn fuse_backward(
    ssm_branch: &[f64],
    attn_branch: &[f64],
    params: &ParamStore,
    d_model: usize,
    grad_out: &[f64],
    grads: &mut Grads,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (w, _) = fuse_params(params, d_model)?;
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; d_model];
    let mut g_s = Vec::with_capacity(grad_out.len());
    let mut g_a = Vec::with_capacity(grad_out.len());
    let mut concat = vec![0.0; 2 * d_model];
    for ((go, s), a) in grad_out
        .chunks_exact(d_model)
        .zip(ssm_branch.chunks_exact(d_model))
        .zip(attn_branch.chunks_exact(d_model))
    {
        concat[..d_model].copy_from_slice(s);
        concat[d_model..].copy_from_slice(a);
        add_outer(&mut gw, go, &concat);
        for (b, g) in gb.iter_mut().zip(go) {
            *b += g;
        }
        let gc = matvec_t(w, 2 * d_model, go);
        g_s.extend_from_slice(&gc[..d_model]);
        g_a.extend_from_slice(&gc[d_model..]);
    }
    accumulate(grads, FUSE_WEIGHT, &gw);
    accumulate(grads, FUSE_BIAS, &gb);
    Ok((g_s, g_a))
}

pub fn transformer_ssm_forward_traced(
    strategy: &dyn FusionStrategy,
    grid: &SpectralGrid,
    text: &TextEmbedding,
    params: &ParamStore,
    ctx: &FusionContext<'_>,
) -> Result<FusionTrace> {
    let flat = grid.flatten_frames();
    let branches = strategy.branches(grid, &flat, text, params, ctx)?;
    let zeros = || vec![0.0; flat.len()];
    let ssm_flat = branches.ssm.as_ref().map_or_else(zeros, |s| s.states.flatten_frames());
    let attn_flat = branches.attn.as_ref().map_or_else(zeros, |a| a.trace.output.clone());
    let fused = fuse(&ssm_flat, &attn_flat, params)?;
    Ok(FusionTrace {
        variant: strategy.variant(),
        output: grid.with_flat_frames(&fused),
        input_flat: flat,
        branches,
    })
}

/// One pass of the fusion layer on a spectral grid; the output grid has the
/// input's shape.
pub fn transformer_ssm_forward(
    grid: &SpectralGrid,
    text: &TextEmbedding,
    variant: FusionVariant,
    params: &ParamStore,
) -> Result<SpectralGrid> {
    let registry = FusionRegistry::default();
    let strategy = registry.variant(variant);
    Ok(transformer_ssm_forward_traced(strategy, grid, text, params, &FusionContext::default())?.output)
}

#[derive(Debug, Clone)]
pub struct FusionGrads {
    /// `∂L/∂re + i·∂L/∂im` for every input grid entry.
    pub grad_input: SpectralGrid,
    pub grad_tokens: Vec<f64>,
    pub grad_pooled: Vec<f64>,
}

/// Backward pass of the fusion layer.
///
/// `grad_states` is an extra gradient on the SSM hidden states (e.g. from a
/// smoothness penalty); it is ignored when the strategy has no SSM branch.
pub fn transformer_ssm_backward(
    grid: &SpectralGrid,
    text: &TextEmbedding,
    params: &ParamStore,
    trace: &FusionTrace,
    grad_out: &[f64],
    grad_states: Option<&HiddenStateGrid>,
    grads: &mut Grads,
) -> Result<FusionGrads> {
    let d_model = grid.frame_width();
    let zeros = || vec![0.0; trace.input_flat.len()];
    let ssm_flat = trace
        .branches
        .ssm
        .as_ref()
        .map_or_else(zeros, |s| s.states.flatten_frames());
    let attn_flat = trace
        .branches
        .attn
        .as_ref()
        .map_or_else(zeros, |a| a.trace.output.clone());
    let (g_ssm, g_attn) = fuse_backward(&ssm_flat, &attn_flat, params, d_model, grad_out, grads)?;

    let mut grad_input = grid.with_flat_frames(&zeros());
    let mut grad_tokens = vec![0.0; text.tokens.len()];
    let mut grad_pooled = vec![0.0; text.dim];

    if let Some(ssm) = &trace.branches.ssm {
        let mut upstream = ssm.states.clone();
        for (u, pair) in upstream.states.iter_mut().zip(g_ssm.chunks_exact(2)) {
            *u = Complex64::new(pair[0], pair[1]);
        }
        if let Some(extra) = grad_states {
            for (u, e) in upstream.states.iter_mut().zip(&extra.states) {
                *u += e;
            }
        }
        let sg = ssm_scan_backward_with_states(grid, &ssm.gates, &ssm.states, &upstream)?;
        for (gi, gx) in grad_input.data.iter_mut().zip(&sg.grad_x.data) {
            *gi += gx;
        }
        let ge = compute_gates_backward(
            &text.pooled,
            &ssm.gates,
            &sg.grad_alpha,
            &sg.grad_beta,
            params,
            grads,
        )?;
        for (a, b) in grad_pooled.iter_mut().zip(ge) {
            *a += b;
        }
    }

    if let Some(attn) = &trace.branches.attn {
        let (g_frames, g_tok) = cross_attention_backward(
            &trace.input_flat,
            text,
            params,
            &attn.cfg,
            &attn.trace,
            &g_attn,
            grads,
        )?;
        for (gi, pair) in grad_input.data.iter_mut().zip(g_frames.chunks_exact(2)) {
            *gi += Complex64::new(pair[0], pair[1]);
        }
        for (a, b) in grad_tokens.iter_mut().zip(g_tok) {
            *a += b;
        }
    }

    Ok(FusionGrads {
        grad_input,
        grad_tokens,
        grad_pooled,
    })
}
