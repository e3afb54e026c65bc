//! Text-gated spectral state-space recurrence.
//!
//! For every (bin, channel) lane the hidden state evolves as
//! `h[t] = α·h[t−1] + β·x[t]` with `h[−1] = 0`. The coefficients come from
//! the pooled text embedding: `α = sigmoid(W_α·e + b_α)` keeps the lane
//! stable, `β = softplus(W_β·e + b_β) + 1e-6` keeps it positive. Both act as
//! real scalars on the complex spectral values.
//!
//! Scans are pluggable through [`ScanStrategy`]; every strategy must agree
//! with [`SequentialScan`] to 1e-12 relative.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::dsp::SpectralGrid;
use crate::error::{Error, Result};
use crate::linalg::{add_outer, matvec, matvec_t, sigmoid, softplus};
use crate::params::{accumulate, Grads, ParamStore};

pub const BETA_EPSILON: f64 = 1e-6;
pub const ALPHA_WEIGHT: &str = "gate.alpha.weight";
pub const ALPHA_BIAS: &str = "gate.alpha.bias";
pub const BETA_WEIGHT: &str = "gate.beta.weight";
pub const BETA_BIAS: &str = "gate.beta.bias";

/// Per-lane recurrence coefficients, indexed `channel · bins + bin`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub bins: usize,
    pub channels: usize,
}

impl GateParams {
    /// Builds gates from explicit values, enforcing `0 < α < 1`, `β > 0`.
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>, bins: usize, channels: usize) -> Result<Self> {
        let lanes = bins * channels;
        if alpha.len() != lanes || beta.len() != lanes {
            return Err(Error::invalid(format!(
                "gate arrays must have {lanes} entries, got {} and {}",
                alpha.len(),
                beta.len()
            )));
        }
        if alpha.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::invalid("every alpha must lie strictly inside (0, 1)"));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(Error::invalid("every beta must be positive and finite"));
        }
        Ok(GateParams {
            alpha,
            beta,
            bins,
            channels,
        })
    }

    pub fn uniform(alpha: f64, beta: f64, bins: usize, channels: usize) -> Result<Self> {
        let lanes = bins * channels;
        Self::new(vec![alpha; lanes], vec![beta; lanes], bins, channels)
    }

    #[inline]
    pub fn lane(&self, f: usize, c: usize) -> usize {
        c * self.bins + f
    }
}

/// Hidden states with the same `[frame][channel][bin]` layout as
/// [`SpectralGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateGrid {
    pub states: Vec<Complex64>,
    pub frames: usize,
    pub bins: usize,
    pub channels: usize,
}

impl HiddenStateGrid {
    pub fn zeros(frames: usize, bins: usize, channels: usize) -> Self {
        HiddenStateGrid {
            states: vec![Complex64::new(0.0, 0.0); frames * bins * channels],
            frames,
            bins,
            channels,
        }
    }

    #[inline]
    pub fn index(&self, t: usize, f: usize, c: usize) -> usize {
        (t * self.channels + c) * self.bins + f
    }

    #[inline]
    pub fn at(&self, t: usize, f: usize, c: usize) -> Complex64 {
        self.states[self.index(t, f, c)]
    }

    pub fn flatten_frames(&self) -> Vec<f64> {
        self.states.iter().flat_map(|z| [z.re, z.im]).collect()
    }
}

pub fn compute_gates(
    e_pooled: &[f64],
    params: &ParamStore,
    bins: usize,
    channels: usize,
) -> Result<GateParams> {
    let lanes = bins * channels;
    let d = e_pooled.len();
    let shape_err = |e: Error| match e {
        Error::InvalidConfig(msg) => Error::config(format!("gate shapes do not match the grid: {msg}")),
        other => other,
    };
    let wa = params.value(ALPHA_WEIGHT, &[lanes, d]).map_err(shape_err)?;
    let ba = params.value(ALPHA_BIAS, &[lanes]).map_err(shape_err)?;
    let wb = params.value(BETA_WEIGHT, &[lanes, d]).map_err(shape_err)?;
    let bb = params.value(BETA_BIAS, &[lanes]).map_err(shape_err)?;
    let ua = matvec(wa, lanes, e_pooled);
    let ub = matvec(wb, lanes, e_pooled);
    let alpha: Vec<f64> = ua.iter().zip(ba).map(|(u, b)| sigmoid(u + b)).collect();
    let beta: Vec<f64> = ub
        .iter()
        .zip(bb)
        .map(|(u, b)| softplus(u + b) + BETA_EPSILON)
        .collect();
    // sigmoid can round to exactly 0 or 1 only for |u| > ~37 / ~745; clamp
    // into the open interval so the invariant holds for any finite input.
    let alpha = alpha
        .into_iter()
        .map(|a| a.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
        .collect();
    Ok(GateParams {
        alpha,
        beta,
        bins,
        channels,
    })
}

/// Backpropagates gate gradients into the gate weights; returns the gradient
/// on the pooled text embedding.
pub fn compute_gates_backward(
    e_pooled: &[f64],
    gates: &GateParams,
    grad_alpha: &[f64],
    grad_beta: &[f64],
    params: &ParamStore,
    grads: &mut Grads,
) -> Result<Vec<f64>> {
    let lanes = gates.alpha.len();
    let d = e_pooled.len();
    let ga: Vec<f64> = gates
        .alpha
        .iter()
        .zip(grad_alpha)
        .map(|(a, g)| g * a * (1.0 - a))
        .collect();
    let wa = params.value(ALPHA_WEIGHT, &[lanes, d])?;
    let wb = params.value(BETA_WEIGHT, &[lanes, d])?;
    let bb = params.value(BETA_BIAS, &[lanes])?;
    // dβ/du = sigmoid(u)
    let gb: Vec<f64> = matvec(wb, lanes, e_pooled)
        .iter()
        .zip(bb)
        .zip(grad_beta)
        .map(|((u, b), g)| g * sigmoid(u + b))
        .collect();
    let mut gwa = vec![0.0; lanes * d];
    let mut gwb = vec![0.0; lanes * d];
    add_outer(&mut gwa, &ga, e_pooled);
    add_outer(&mut gwb, &gb, e_pooled);
    accumulate(grads, ALPHA_WEIGHT, &gwa);
    accumulate(grads, ALPHA_BIAS, &ga);
    accumulate(grads, BETA_WEIGHT, &gwb);
    accumulate(grads, BETA_BIAS, &gb);
    let mut ge = matvec_t(wa, d, &ga);
    for (a, b) in ge.iter_mut().zip(matvec_t(wb, d, &gb)) {
        *a += b;
    }
    Ok(ge)
}

/// A way of evaluating the recurrence over a whole grid.
pub trait ScanStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Shapes are checked by the caller.
    fn scan_unchecked(&self, x: &SpectralGrid, gates: &GateParams) -> HiddenStateGrid;
}

/// The reference per-step loop.
#[derive(Debug, Default, Clone, Copy)]
pub struct SequentialScan;

impl ScanStrategy for SequentialScan {
    fn name(&self) -> &'static str {
        "sequential"
    }

    fn scan_unchecked(&self, x: &SpectralGrid, gates: &GateParams) -> HiddenStateGrid {
        let mut h = HiddenStateGrid::zeros(x.frames, x.bins, x.channels);
        let lane_count = x.bins * x.channels;
        for t in 0..x.frames {
            let row = t * lane_count;
            for lane in 0..lane_count {
                let prev = if t == 0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    h.states[row - lane_count + lane]
                };
                h.states[row + lane] = prev * gates.alpha[lane] + x.data[row + lane] * gates.beta[lane];
            }
        }
        h
    }
}

/// Blocked two-pass scan: lanes run in parallel, and each lane is cut into
/// chunks that are scanned from a zero state and then stitched together
/// with the carried state scaled by powers of α.
#[derive(Debug, Clone, Copy)]
pub struct ChunkedScan {
    pub chunk: usize,
}

impl Default for ChunkedScan {
    fn default() -> Self {
        ChunkedScan { chunk: 256 }
    }
}

impl ChunkedScan {
    fn scan_lane(&self, x: &[Complex64], alpha: f64, beta: f64) -> Vec<Complex64> {
        let chunk = self.chunk.max(1);
        let mut h: Vec<Complex64> = Vec::with_capacity(x.len());
        let mut chunk_ends = Vec::new();
        for block in x.chunks(chunk) {
            let mut acc = Complex64::new(0.0, 0.0);
            for &v in block {
                acc = acc * alpha + v * beta;
                h.push(acc);
            }
            chunk_ends.push((acc, block.len()));
        }
        let mut carry = Complex64::new(0.0, 0.0);
        for (k, block) in h.chunks_mut(chunk).enumerate() {
            if k > 0 {
                let mut decay = alpha;
                for v in block.iter_mut() {
                    *v += carry * decay;
                    decay *= alpha;
                }
            }
            let (end, len) = chunk_ends[k];
            carry = carry * alpha.powi(len as i32) + end;
        }
        h
    }
}

impl ScanStrategy for ChunkedScan {
    fn name(&self) -> &'static str {
        "chunked"
    }

    fn scan_unchecked(&self, x: &SpectralGrid, gates: &GateParams) -> HiddenStateGrid {
        let lane_count = x.bins * x.channels;
        let lanes: Vec<Vec<Complex64>> = (0..lane_count)
            .into_par_iter()
            .map(|lane| {
                let series: Vec<Complex64> =
                    (0..x.frames).map(|t| x.data[t * lane_count + lane]).collect();
                self.scan_lane(&series, gates.alpha[lane], gates.beta[lane])
            })
            .collect();
        let mut h = HiddenStateGrid::zeros(x.frames, x.bins, x.channels);
        for (lane, series) in lanes.into_iter().enumerate() {
            for (t, v) in series.into_iter().enumerate() {
                h.states[t * lane_count + lane] = v;
            }
        }
        h
    }
}

/// Scan strategies addressable by name.
pub struct ScanRegistry {
    entries: BTreeMap<&'static str, Box<dyn ScanStrategy>>,
}

impl ScanRegistry {
    pub fn empty() -> Self {
        ScanRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, strategy: Box<dyn ScanStrategy>) {
        self.entries.insert(strategy.name(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<&dyn ScanStrategy> {
        self.entries.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            Error::invalid(format!(
                "unknown scan `{name}` (known: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

impl Default for ScanRegistry {
    fn default() -> Self {
        let mut r = ScanRegistry::empty();
        r.register(Box::new(SequentialScan));
        r.register(Box::new(ChunkedScan::default()));
        r
    }
}

fn check_shapes(x: &SpectralGrid, gates: &GateParams) -> Result<()> {
    if x.bins != gates.bins || x.channels != gates.channels {
        return Err(Error::invalid(format!(
            "gates are {}×{} but the grid is {}×{}",
            gates.bins, gates.channels, x.bins, x.channels
        )));
    }
    Ok(())
}

/// Runs the recurrence with the given strategy.
pub fn ssm_scan_with(
    strategy: &dyn ScanStrategy,
    x: &SpectralGrid,
    gates: &GateParams,
) -> Result<HiddenStateGrid> {
    check_shapes(x, gates)?;
    Ok(strategy.scan_unchecked(x, gates))
}

/// Runs the recurrence with the sequential reference scan.
pub fn ssm_scan(x: &SpectralGrid, gates: &GateParams) -> Result<HiddenStateGrid> {
    ssm_scan_with(&SequentialScan, x, gates)
}

#[derive(Debug, Clone)]
pub struct ScanGrads {
    pub grad_x: SpectralGrid,
    pub grad_alpha: Vec<f64>,
    pub grad_beta: Vec<f64>,
}

/// Reverse-mode gradients of the scan given `h` from the forward pass.
///
/// Complex gradients follow the `∂L/∂re + i·∂L/∂im` convention, so real
/// gates receive `Re(conj(a)·z)` contributions.
pub(crate) fn ssm_scan_backward_with_states(
    x: &SpectralGrid,
    gates: &GateParams,
    h: &HiddenStateGrid,
    upstream: &HiddenStateGrid,
) -> Result<ScanGrads> {
    check_shapes(x, gates)?;
    if upstream.frames != x.frames || upstream.bins != x.bins || upstream.channels != x.channels {
        return Err(Error::invalid("upstream gradient shape does not match the grid"));
    }
    let lane_count = x.bins * x.channels;
    let mut grad_x = x.clone();
    let mut grad_alpha = vec![0.0; lane_count];
    let mut grad_beta = vec![0.0; lane_count];
    let mut adj = vec![Complex64::new(0.0, 0.0); lane_count];
    for t in (0..x.frames).rev() {
        let row = t * lane_count;
        for lane in 0..lane_count {
            let a = upstream.states[row + lane] + adj[lane] * gates.alpha[lane];
            adj[lane] = a;
            grad_x.data[row + lane] = a * gates.beta[lane];
            let xv = x.data[row + lane];
            grad_beta[lane] += a.re * xv.re + a.im * xv.im;
            if t > 0 {
                let hp = h.states[row - lane_count + lane];
                grad_alpha[lane] += a.re * hp.re + a.im * hp.im;
            }
        }
    }
    Ok(ScanGrads {
        grad_x,
        grad_alpha,
        grad_beta,
    })
}

pub fn ssm_scan_backward(
    x: &SpectralGrid,
    gates: &GateParams,
    upstream: &HiddenStateGrid,
) -> Result<ScanGrads> {
    let h = ssm_scan(x, gates)?;
    ssm_scan_backward_with_states(x, gates, &h, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;
    use crate::params::Param;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(frames: usize, fft: usize, channels: usize, seed: u64) -> SpectralGrid {
        let cfg = StftConfig::new(fft, fft / 4).unwrap();
        let mut g = SpectralGrid::zeros(frames, channels, cfg, frames * cfg.hop);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for z in g.data.iter_mut() {
            *z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        g
    }

    fn random_gates(bins: usize, channels: usize, seed: u64) -> GateParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = bins * channels;
        GateParams::new(
            (0..n).map(|_| rng.gen_range(0.01..0.99)).collect(),
            (0..n).map(|_| rng.gen_range(0.1..2.0)).collect(),
            bins,
            channels,
        )
        .unwrap()
    }

    fn gate_store(lanes: usize, d: usize, mut fill: impl FnMut(&str, usize) -> f64) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, shape) in [
            (ALPHA_WEIGHT, vec![lanes, d]),
            (ALPHA_BIAS, vec![lanes]),
            (BETA_WEIGHT, vec![lanes, d]),
            (BETA_BIAS, vec![lanes]),
        ] {
            let n = shape.iter().product();
            s.insert(name, Param::new(shape, (0..n).map(|i| fill(name, i)).collect()));
        }
        s
    }

    #[test]
    fn zero_gate_params() {
        let s = gate_store(6, 4, |_, _| 0.0);
        let g = compute_gates(&[0.3, -1.0, 2.0, 0.0], &s, 3, 2).unwrap();
        assert!(g.alpha.iter().all(|&a| a == 0.5));
        for b in &g.beta {
            assert!((b - (2f64.ln() + 1e-6)).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_alpha_is_tiny_but_positive() {
        let s = gate_store(2, 3, |n, _| if n == ALPHA_BIAS { -40.0 } else { 0.0 });
        let g = compute_gates(&[1.0, 1.0, 1.0], &s, 2, 1).unwrap();
        assert!(g.alpha.iter().all(|&a| a > 0.0 && a < 1e-17));
    }

    #[test]
    fn gates_match_affine_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let vals: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = gate_store(4, 3, |n, i| {
            let off = match n {
                ALPHA_WEIGHT => 0,
                ALPHA_BIAS => 20,
                BETA_WEIGHT => 40,
                _ => 60,
            };
            vals[off + i]
        });
        let e = [0.4, -0.7, 1.1];
        let g = compute_gates(&e, &s, 2, 2).unwrap();
        for lane in 0..4 {
            let ua: f64 = vals[20 + lane] + (0..3).map(|j| vals[lane * 3 + j] * e[j]).sum::<f64>();
            let ub: f64 = vals[60 + lane] + (0..3).map(|j| vals[40 + lane * 3 + j] * e[j]).sum::<f64>();
            assert!((g.alpha[lane] - 1.0 / (1.0 + (-ua).exp())).abs() < 1e-15);
            assert!((g.beta[lane] - ((1.0 + ub.exp()).ln() + 1e-6)).abs() < 1e-14);
        }
    }

    #[test]
    fn gate_shape_mismatch_is_invalid_config() {
        let s = gate_store(6, 4, |_, _| 0.0);
        assert!(matches!(
            compute_gates(&[0.0; 4], &s, 4, 2),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn alpha_zero_limit_scales_input() {
        let s = gate_store(33, 2, |n, _| if n == ALPHA_BIAS { -40.0 } else { 0.0 });
        let gates = compute_gates(&[0.0, 0.0], &s, 33, 1).unwrap();
        let x = random_grid(12, 64, 1, 3);
        let h = ssm_scan(&x, &gates).unwrap();
        for (i, (hv, xv)) in h.states.iter().zip(&x.data).enumerate() {
            let lane = i % 33;
            assert!((hv - xv * gates.beta[lane]).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_input_zero_state() {
        let cfg = StftConfig::default();
        let x = SpectralGrid::zeros(9, 2, cfg, 100);
        let h = ssm_scan(&x, &random_gates(33, 2, 1)).unwrap();
        assert!(h.states.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn geometric_series_closed_form() {
        let cfg = StftConfig::new(4, 1).unwrap();
        let mut x = SpectralGrid::zeros(32, 1, cfg, 32);
        x.data.iter_mut().for_each(|z| *z = Complex64::new(1.0, 0.0));
        let gates = GateParams::uniform(0.5, 1.0, 3, 1).unwrap();
        let h = ssm_scan(&x, &gates).unwrap();
        for t in 0..32 {
            let expect = 2.0 - 2f64.powi(-(t as i32));
            for f in 0..3 {
                assert!((h.at(t, f, 0).re - expect).abs() < 1e-12);
                assert_eq!(h.at(t, f, 0).im, 0.0);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = random_grid(4, 16, 2, 1);
        assert!(matches!(
            ssm_scan(&x, &random_gates(9, 1, 2)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn registry_lists_strategies() {
        let r = ScanRegistry::default();
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["chunked", "sequential"]);
        assert!(r.get("blelloch").is_err());
    }

    fn assert_lane_close(a: &HiddenStateGrid, b: &HiddenStateGrid, tol: f64) {
        let lanes = b.bins * b.channels;
        for lane in 0..lanes {
            let scale = (0..b.frames)
                .map(|t| b.states[t * lanes + lane].norm())
                .fold(0.0, f64::max);
            for t in 0..b.frames {
                let i = t * lanes + lane;
                assert!(
                    (a.states[i] - b.states[i]).norm() <= tol * scale.max(1e-300),
                    "lane {lane} t {t}"
                );
            }
        }
    }

    #[test]
    fn chunked_matches_sequential() {
        for (frames, chunk) in [(1, 4), (7, 3), (100, 16), (1000, 64)] {
            let x = random_grid(frames, 16, 2, frames as u64);
            let gates = random_gates(9, 2, 4);
            let a = ssm_scan_with(&ChunkedScan { chunk }, &x, &gates).unwrap();
            let b = ssm_scan(&x, &gates).unwrap();
            assert_lane_close(&a, &b, 1e-12);
        }
    }

    #[test]
    fn backward_single_step() {
        let x = random_grid(1, 8, 1, 2);
        let gates = random_gates(5, 1, 3);
        let mut up = HiddenStateGrid::zeros(1, 5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for z in up.states.iter_mut() {
            *z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let g = ssm_scan_backward(&x, &gates, &up).unwrap();
        for lane in 0..5 {
            let u = up.states[lane];
            let xv = x.data[lane];
            assert!((g.grad_beta[lane] - (u.re * xv.re + u.im * xv.im)).abs() < 1e-15);
            assert_eq!(g.grad_alpha[lane], 0.0);
        }
    }

    #[test]
    fn backward_zero_upstream() {
        let x = random_grid(6, 8, 2, 2);
        let gates = random_gates(5, 2, 3);
        let up = HiddenStateGrid::zeros(6, 5, 2);
        let g = ssm_scan_backward(&x, &gates, &up).unwrap();
        assert!(g.grad_alpha.iter().chain(&g.grad_beta).all(|&v| v == 0.0));
        assert!(g.grad_x.data.iter().all(|z| z.norm() == 0.0));
    }

    /// Central differences on L = Σ|h|² with T = 5.
    #[test]
    fn backward_matches_finite_differences() {
        let x = random_grid(5, 8, 2, 17);
        let gates = random_gates(5, 2, 18);
        let loss = |x: &SpectralGrid, g: &GateParams| -> f64 {
            ssm_scan(x, g).unwrap().states.iter().map(|z| z.norm_sqr()).sum()
        };
        let h = ssm_scan(&x, &gates).unwrap();
        let mut up = h.clone();
        up.states.iter_mut().for_each(|z| *z *= 2.0);
        let g = ssm_scan_backward(&x, &gates, &up).unwrap();
        let eps = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
        for lane in 0..10 {
            let mut gp = gates.clone();
            let mut gm = gates.clone();
            gp.alpha[lane] += eps;
            gm.alpha[lane] -= eps;
            let num = (loss(&x, &gp) - loss(&x, &gm)) / (2.0 * eps);
            assert!(rel(g.grad_alpha[lane], num) < 1e-6, "alpha lane {lane}");
            let mut gp = gates.clone();
            let mut gm = gates.clone();
            gp.beta[lane] += eps;
            gm.beta[lane] -= eps;
            let num = (loss(&x, &gp) - loss(&x, &gm)) / (2.0 * eps);
            assert!(rel(g.grad_beta[lane], num) < 1e-6, "beta lane {lane}");
        }
        for i in [0, 7, 23, 49] {
            for part in 0..2 {
                let bump = |d: f64| {
                    let mut xp = x.clone();
                    if part == 0 {
                        xp.data[i].re += d;
                    } else {
                        xp.data[i].im += d;
                    }
                    loss(&xp, &gates)
                };
                let num = (bump(eps) - bump(-eps)) / (2.0 * eps);
                let ana = if part == 0 { g.grad_x.data[i].re } else { g.grad_x.data[i].im };
                assert!(rel(ana, num) < 1e-6);
            }
        }
    }

    #[test]
    fn gates_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let vals: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = gate_store(4, 3, |_, i| vals[i]);
        let e = vec![0.3, -0.2, 0.9];
        let wa: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wb: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |e: &[f64]| -> f64 {
            let g = compute_gates(e, &s, 2, 2).unwrap();
            g.alpha.iter().zip(&wa).map(|(a, w)| a * w).sum::<f64>()
                + g.beta.iter().zip(&wb).map(|(b, w)| b * w).sum::<f64>()
        };
        let gates = compute_gates(&e, &s, 2, 2).unwrap();
        let mut grads = Grads::new();
        let ge = compute_gates_backward(&e, &gates, &wa, &wb, &s, &mut grads).unwrap();
        for j in 0..3 {
            let mut ep = e.clone();
            let mut em = e.clone();
            ep[j] += 1e-6;
            em[j] -= 1e-6;
            let num = (loss(&ep) - loss(&em)) / 2e-6;
            assert!((ge[j] - num).abs() < 1e-8 * num.abs().max(1.0));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bounded_input_bounded_state(seed in 0u64..10_000, frames in 1usize..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m: f64 = rng.gen_range(0.1..5.0);
            let x = {
                let mut g = random_grid(frames, 8, 2, seed ^ 0xabc);
                for z in g.data.iter_mut() {
                    // scale into the disc of radius m
                    let r = z.norm();
                    if r > 0.0 { *z *= m * rng.gen_range(0.0..1.0) / r.max(1.0); }
                }
                g
            };
            let gates = random_gates(5, 2, seed + 1);
            let h = ssm_scan(&x, &gates).unwrap();
            for t in 0..frames {
                for c in 0..2 {
                    for f in 0..5 {
                        let lane = gates.lane(f, c);
                        let bound = gates.beta[lane] * m / (1.0 - gates.alpha[lane]);
                        prop_assert!(h.at(t, f, c).norm() <= bound * (1.0 + 1e-12));
                    }
                }
            }
        }

        #[test]
        fn scan_is_linear_in_input(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x = random_grid(10, 8, 2, seed);
            let y = random_grid(10, 8, 2, seed + 7);
            let gates = random_gates(5, 2, seed + 3);
            let mut mix = x.clone();
            for (m, (xv, yv)) in mix.data.iter_mut().zip(x.data.iter().zip(&y.data)) {
                *m = xv * a + yv * b;
            }
            let hm = ssm_scan(&mix, &gates).unwrap();
            let hx = ssm_scan(&x, &gates).unwrap();
            let hy = ssm_scan(&y, &gates).unwrap();
            let scale = hm.states.iter().map(|z| z.norm()).fold(1e-300, f64::max);
            for i in 0..hm.states.len() {
                let expect = hx.states[i] * a + hy.states[i] * b;
                prop_assert!((hm.states[i] - expect).norm() <= 1e-9 * scale.max(1.0));
            }
        }

        #[test]
        fn constructed_gates_respect_ranges(seed in 0u64..10_000, mag in 0.0f64..200.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = gate_store(6, 3, |_, _| rng.gen_range(-1.0..1.0));
            let e: Vec<f64> = (0..3).map(|_| mag * if seed % 2 == 0 { 1.0 } else { -1.0 }).collect();
            let g = compute_gates(&e, &s, 3, 2).unwrap();
            prop_assert!(g.alpha.iter().all(|&a| a > 0.0 && a < 1.0));
            prop_assert!(g.beta.iter().all(|&b| b > 0.0 && b.is_finite()));
        }
    }
}
