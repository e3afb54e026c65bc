//! Short-time Fourier transform over latent channels and its overlap-add
//! inverse, plus the adjoints of both (both maps are linear).
//!
//! Framing: the signal is zero-padded with `fft_size − hop` samples at the
//! head and enough at the tail for `ceil(len / hop)` frames. Every original
//! sample is then covered by exactly `fft_size / hop` frames, so the
//! window-square sum is bounded away from zero whenever the window/hop pair
//! satisfies COLA.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::window::hann_window;
use crate::error::{Error, Result};
use crate::speech::LatentSequence;

/// Window-square sums below this are treated as zeros.
const COLA_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub enum WindowKind {
    #[default]
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window_kind: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_size: 64,
            hop: 16,
            window_kind: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn new(fft_size: usize, hop: usize) -> Result<Self> {
        let cfg = StftConfig {
            fft_size,
            hop,
            window_kind: WindowKind::Hann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || !self.fft_size.is_power_of_two() {
            return Err(Error::invalid(format!(
                "fft_size must be a power of two ≥ 2, got {}",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.hop > self.fft_size || self.fft_size % self.hop != 0 {
            return Err(Error::invalid(format!(
                "hop {} must divide fft_size {}",
                self.hop, self.fft_size
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    fn head_pad(&self) -> usize {
        self.fft_size - self.hop
    }

    fn padded_len(&self, frames: usize) -> usize {
        (frames - 1) * self.hop + self.fft_size
    }

    pub fn window(&self) -> Vec<f64> {
        match self.window_kind {
            WindowKind::Hann => hann_window(self.fft_size).expect("validated fft_size ≥ 2"),
        }
    }
}

/// Complex time × frequency × channel grid.
///
/// Storage is `[frame][channel][bin]`, which makes the per-frame flattening
/// used by the fusion layer (channel-major, then bin, then re/im) a straight
/// copy.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralGrid {
    pub data: Vec<Complex64>,
    pub frames: usize,
    pub bins: usize,
    pub channels: usize,
    pub config: StftConfig,
    pub original_length: usize,
}

impl SpectralGrid {
    pub fn zeros(frames: usize, channels: usize, config: StftConfig, original_length: usize) -> Self {
        let bins = config.bins();
        SpectralGrid {
            data: vec![Complex64::new(0.0, 0.0); frames * bins * channels],
            frames,
            bins,
            channels,
            config,
            original_length,
        }
    }

    #[inline]
    pub fn index(&self, t: usize, f: usize, c: usize) -> usize {
        (t * self.channels + c) * self.bins + f
    }

    #[inline]
    pub fn at(&self, t: usize, f: usize, c: usize) -> Complex64 {
        self.data[self.index(t, f, c)]
    }

    pub fn same_shape(&self, other: &SpectralGrid) -> bool {
        self.frames == other.frames && self.bins == other.bins && self.channels == other.channels
    }

    /// Number of reals in one flattened frame.
    pub fn frame_width(&self) -> usize {
        2 * self.bins * self.channels
    }

    /// Frames flattened to `frames × (2·bins·channels)` reals, ordered by
    /// channel, then bin, then (re, im).
    pub fn flatten_frames(&self) -> Vec<f64> {
        self.data.iter().flat_map(|z| [z.re, z.im]).collect()
    }

    /// Inverse of [`flatten_frames`](Self::flatten_frames) onto this grid's shape.
    pub fn with_flat_frames(&self, flat: &[f64]) -> SpectralGrid {
        assert_eq!(flat.len(), 2 * self.data.len());
        SpectralGrid {
            data: flat.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect(),
            ..self.clone()
        }
    }

    /// Copy of one channel as a single-channel grid.
    pub fn channel(&self, c: usize) -> SpectralGrid {
        let mut out = SpectralGrid::zeros(self.frames, 1, self.config, self.original_length);
        for t in 0..self.frames {
            let src = self.index(t, 0, c);
            let dst = out.index(t, 0, 0);
            out.data[dst..dst + self.bins].copy_from_slice(&self.data[src..src + self.bins]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans {
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }
}

/// Single-channel STFT of a real signal.
pub fn stft(signal: &[f64], config: &StftConfig) -> Result<SpectralGrid> {
    config.validate()?;
    if signal.is_empty() {
        return Err(Error::invalid("stft of an empty signal"));
    }
    let n = config.fft_size;
    let frames = config.frames_for(signal.len());
    let mut padded = vec![0.0; config.padded_len(frames)];
    let pad = config.head_pad();
    padded[pad..pad + signal.len()].copy_from_slice(signal);

    let window = config.window();
    let plan = plans(n);
    let mut grid = SpectralGrid::zeros(frames, 1, *config, signal.len());
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..frames {
        let start = t * config.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(padded[start + i] * window[i], 0.0);
        }
        plan.forward.process(&mut buf);
        let dst = grid.index(t, 0, 0);
        grid.data[dst..dst + grid.bins].copy_from_slice(&buf[..grid.bins]);
    }
    Ok(grid)
}

/// Adjoint of [`stft`]: maps a gradient on the grid (∂L/∂re + i·∂L/∂im)
/// back to a gradient on the signal.
pub fn stft_backward(grad: &SpectralGrid) -> Vec<f64> {
    assert_eq!(grad.channels, 1);
    let config = grad.config;
    let n = config.fft_size;
    let window = config.window();
    let plan = plans(n);
    let mut padded = vec![0.0; config.padded_len(grad.frames)];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..grad.frames {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        let src = grad.index(t, 0, 0);
        buf[..grad.bins].copy_from_slice(&grad.data[src..src + grad.bins]);
        // Σ_k G_k e^{+2πikn/N}
        plan.inverse.process(&mut buf);
        let start = t * config.hop;
        for i in 0..n {
            padded[start + i] += window[i] * buf[i].re;
        }
    }
    let pad = config.head_pad();
    padded[pad..pad + grad.original_length].to_vec()
}

/// Window-square overlap sum over the padded timeline.
fn window_square_sum(config: &StftConfig, frames: usize, window: &[f64]) -> Vec<f64> {
    let mut sum = vec![0.0; config.padded_len(frames)];
    for t in 0..frames {
        let start = t * config.hop;
        for (i, w) in window.iter().enumerate() {
            sum[start + i] += w * w;
        }
    }
    sum
}

fn check_cola(config: &StftConfig, wsum: &[f64], len: usize) -> Result<()> {
    let pad = config.head_pad();
    if let Some(pos) = wsum[pad..pad + len].iter().position(|&v| v < COLA_FLOOR) {
        return Err(Error::NumericConfig(format!(
            "window-square sum vanishes at sample {pos} (fft_size {}, hop {}); overlap-add cannot invert",
            config.fft_size, config.hop
        )));
    }
    Ok(())
}

/// Overlap-add inverse of a single-channel grid, truncated to the grid's
/// original length.
///
/// Imaginary parts of the DC and Nyquist bins are ignored (real inverse
/// transform).
pub fn istft(grid: &SpectralGrid) -> Result<Vec<f64>> {
    if grid.channels != 1 {
        return Err(Error::invalid(format!(
            "istft expects a single-channel grid, got {} channels",
            grid.channels
        )));
    }
    let config = grid.config;
    config.validate()?;
    let n = config.fft_size;
    let half = n / 2;
    let window = config.window();
    let wsum = window_square_sum(&config, grid.frames, &window);
    check_cola(&config, &wsum, grid.original_length)?;

    let plan = plans(n);
    let mut out = vec![0.0; wsum.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let scale = 1.0 / n as f64;
    for t in 0..grid.frames {
        let src = grid.index(t, 0, 0);
        let spec = &grid.data[src..src + grid.bins];
        buf[0] = Complex64::new(spec[0].re, 0.0);
        buf[half] = Complex64::new(spec[half].re, 0.0);
        for k in 1..half {
            buf[k] = spec[k];
            buf[n - k] = spec[k].conj();
        }
        plan.inverse.process(&mut buf);
        let start = t * config.hop;
        for i in 0..n {
            out[start + i] += window[i] * buf[i].re * scale;
        }
    }
    let pad = config.head_pad();
    Ok((pad..pad + grid.original_length)
        .map(|m| out[m] / wsum[m])
        .collect())
}

/// Adjoint of [`istft`]: gradient on the output signal → gradient on a grid
/// shaped like `like`.
pub fn istft_backward(grad_out: &[f64], like: &SpectralGrid) -> Result<SpectralGrid> {
    assert_eq!(like.channels, 1);
    assert_eq!(grad_out.len(), like.original_length);
    let config = like.config;
    let n = config.fft_size;
    let half = n / 2;
    let window = config.window();
    let wsum = window_square_sum(&config, like.frames, &window);
    check_cola(&config, &wsum, like.original_length)?;

    let pad = config.head_pad();
    let mut g_pad = vec![0.0; wsum.len()];
    for (m, g) in grad_out.iter().enumerate() {
        g_pad[pad + m] = g / wsum[pad + m];
    }

    let plan = plans(n);
    let mut grid = SpectralGrid::zeros(like.frames, 1, config, like.original_length);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let scale = 1.0 / n as f64;
    for t in 0..like.frames {
        let start = t * config.hop;
        for i in 0..n {
            buf[i] = Complex64::new(window[i] * g_pad[start + i], 0.0);
        }
        plan.forward.process(&mut buf);
        let dst = grid.index(t, 0, 0);
        for k in 0..=half {
            let weight = if k == 0 || k == half { scale } else { 2.0 * scale };
            let mut g = buf[k] * weight;
            if k == 0 || k == half {
                g.im = 0.0;
            }
            grid.data[dst + k] = g;
        }
    }
    Ok(grid)
}

/// STFT applied independently to every latent channel.
pub fn stft_multi(latent: &LatentSequence, config: &StftConfig) -> Result<SpectralGrid> {
    config.validate()?;
    let channels = latent.dim;
    let len = latent.len;
    if len == 0 {
        return Err(Error::invalid("stft of an empty latent sequence"));
    }
    let mut grid = SpectralGrid::zeros(config.frames_for(len), channels, *config, len);
    for c in 0..channels {
        let single = stft(&latent.channel(c), config)?;
        for t in 0..grid.frames {
            let src = single.index(t, 0, 0);
            let dst = grid.index(t, 0, c);
            grid.data[dst..dst + grid.bins].copy_from_slice(&single.data[src..src + grid.bins]);
        }
    }
    Ok(grid)
}

/// Adjoint of [`stft_multi`]: returns a `len × channels` row-major gradient.
pub fn stft_multi_backward(grad: &SpectralGrid) -> Vec<f64> {
    let len = grad.original_length;
    let mut out = vec![0.0; len * grad.channels];
    for c in 0..grad.channels {
        let g = stft_backward(&grad.channel(c));
        for (t, v) in g.into_iter().enumerate() {
            out[t * grad.channels + c] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_signal(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct O(N²) DFT of each windowed frame of the padded signal.
    fn brute_force_stft(signal: &[f64], cfg: &StftConfig) -> Vec<Vec<Complex64>> {
        let n = cfg.fft_size;
        let frames = signal.len().div_ceil(cfg.hop);
        let pad = n - cfg.hop;
        let sample = |i: isize| -> f64 {
            if i < 0 || i as usize >= signal.len() {
                0.0
            } else {
                signal[i as usize]
            }
        };
        (0..frames)
            .map(|t| {
                (0..=n / 2)
                    .map(|k| {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for j in 0..n {
                            let w = 0.5 * (1.0 - (2.0 * PI * j as f64 / n as f64).cos());
                            let x = sample((t * cfg.hop + j) as isize - pad as isize) * w;
                            let ang = -2.0 * PI * (k * j) as f64 / n as f64;
                            acc += Complex64::new(ang.cos(), ang.sin()) * x;
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn config_validation() {
        assert!(StftConfig::new(64, 16).is_ok());
        assert!(StftConfig::new(48, 16).is_err());
        assert!(StftConfig::new(64, 24).is_err());
        assert!(StftConfig::new(64, 0).is_err());
        assert!(StftConfig::new(64, 128).is_err());
    }

    #[test]
    fn zero_signal_gives_zero_grid() {
        let cfg = StftConfig::new(256, 64).unwrap();
        let g = stft(&vec![0.0; 1024], &cfg).unwrap();
        assert!(g.data.iter().all(|z| z.norm() == 0.0));
        assert_eq!(g.frames, 16);
        assert_eq!(g.bins, 129);
    }

    #[test]
    fn empty_signal_rejected() {
        assert!(matches!(
            stft(&[], &StftConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn matches_direct_dft() {
        let cfg = StftConfig::new(32, 8).unwrap();
        let x = random_signal(203, 7);
        let g = stft(&x, &cfg).unwrap();
        let oracle = brute_force_stft(&x, &cfg);
        assert_eq!(oracle.len(), g.frames);
        for (t, frame) in oracle.iter().enumerate() {
            let fnorm: f64 = frame.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            for (k, z) in frame.iter().enumerate() {
                assert!((g.at(t, k, 0) - z).norm() <= 1e-9 * fnorm.max(1e-300));
            }
        }
    }

    #[test]
    fn bin_aligned_sine_peaks_at_its_bin() {
        let cfg = StftConfig::new(64, 16).unwrap();
        let k0 = 5;
        let x: Vec<f64> = (0..1024)
            .map(|i| (2.0 * PI * k0 as f64 * i as f64 / 64.0).sin())
            .collect();
        let g = stft(&x, &cfg).unwrap();
        let oracle = brute_force_stft(&x, &cfg);
        // frames fully inside the signal
        for t in 3..g.frames - 1 {
            let mags: Vec<f64> = (0..g.bins).map(|k| g.at(t, k, 0).norm()).collect();
            let argmax = (0..g.bins).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap();
            assert_eq!(argmax, k0);
            let oracle_arg = (0..g.bins)
                .max_by(|&a, &b| oracle[t][a].norm().total_cmp(&oracle[t][b].norm()))
                .unwrap();
            assert_eq!(oracle_arg, k0);
        }
    }

    #[test]
    fn roundtrip_quarter_and_half_hop() {
        for hop in [16, 32] {
            let cfg = StftConfig::new(64, hop).unwrap();
            for len in [1usize, 17, 256, 1000, 4097] {
                let x = random_signal(len, len as u64 + hop as u64);
                let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
                assert_eq!(y.len(), len);
                assert!(rel_l2(&y, &x) < 1e-6, "hop {hop} len {len}");
            }
        }
    }

    #[test]
    fn zero_grid_inverts_to_zero() {
        let cfg = StftConfig::default();
        let g = SpectralGrid::zeros(8, 1, cfg, 120);
        let y = istft(&g).unwrap();
        assert_eq!(y.len(), 120);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hop_equal_to_size_violates_cola() {
        let cfg = StftConfig::new(64, 64).unwrap();
        let g = stft(&random_signal(300, 1), &cfg).unwrap();
        assert!(matches!(istft(&g), Err(Error::NumericConfig(_))));
    }

    #[test]
    fn per_frame_parseval() {
        let cfg = StftConfig::new(64, 16).unwrap();
        let x = random_signal(500, 3);
        let g = stft(&x, &cfg).unwrap();
        let w = cfg.window();
        let pad = 64 - 16;
        for t in 0..g.frames {
            let mut time_energy = 0.0;
            for j in 0..64 {
                let idx = (t * 16 + j) as isize - pad as isize;
                if idx >= 0 && (idx as usize) < x.len() {
                    time_energy += (x[idx as usize] * w[j]).powi(2);
                }
            }
            let bin_energy: f64 = (0..g.bins)
                .map(|k| {
                    let weight = if k == 0 || k == 32 { 1.0 } else { 2.0 };
                    weight * g.at(t, k, 0).norm_sqr()
                })
                .sum();
            let rhs = bin_energy / 64.0;
            assert!((time_energy - rhs).abs() <= 1e-9 * time_energy.max(1e-300));
        }
    }

    /// ⟨stft(x), G⟩ must equal ⟨x, stftᵀ(G)⟩ for the real inner product.
    #[test]
    fn stft_adjoint_identity() {
        let cfg = StftConfig::new(16, 4).unwrap();
        let x = random_signal(37, 11);
        let g = stft(&x, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut probe = g.clone();
        for z in probe.data.iter_mut() {
            *z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let lhs: f64 = g.data.iter().zip(&probe.data).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        let back = stft_backward(&probe);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn istft_adjoint_identity() {
        let cfg = StftConfig::new(16, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut grid = SpectralGrid::zeros(10, 1, cfg, 37);
        for z in grid.data.iter_mut() {
            *z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let y = istft(&grid).unwrap();
        let probe = random_signal(37, 22);
        let lhs: f64 = y.iter().zip(&probe).map(|(a, b)| a * b).sum();
        let back = istft_backward(&probe, &grid).unwrap();
        let rhs: f64 = grid
            .data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn multi_channel_matches_per_channel() {
        let cfg = StftConfig::default();
        let len = 150;
        let dim = 3;
        let frames: Vec<f64> = random_signal(len * dim, 5);
        let latent = LatentSequence::new(frames, len, dim, 1).unwrap();
        let grid = stft_multi(&latent, &cfg).unwrap();
        assert_eq!(grid.channels, 3);
        for c in 0..dim {
            let single = stft(&latent.channel(c), &cfg).unwrap();
            assert_eq!(grid.channel(c), single);
        }
    }

    #[test]
    fn identical_channels_give_identical_grids() {
        let cfg = StftConfig::default();
        let base = random_signal(90, 8);
        let frames: Vec<f64> = base.iter().flat_map(|&v| [v, v]).collect();
        let latent = LatentSequence::new(frames, 90, 2, 1).unwrap();
        let grid = stft_multi(&latent, &cfg).unwrap();
        assert_eq!(grid.channel(0).data, grid.channel(1).data);
        assert_eq!(grid.channel(0), stft(&base, &cfg).unwrap());
    }

    #[test]
    fn flatten_order_is_channel_bin_reim() {
        let cfg = StftConfig::new(4, 2).unwrap();
        let mut g = SpectralGrid::zeros(2, 2, cfg, 3);
        let idx = g.index(1, 2, 1);
        g.data[idx] = Complex64::new(7.0, -3.0);
        let flat = g.flatten_frames();
        let w = g.frame_width();
        // frame 1, channel 1, bin 2
        assert_eq!(flat[w + 2 * (g.bins + 2)], 7.0);
        assert_eq!(flat[w + 2 * (g.bins + 2) + 1], -3.0);
        assert_eq!(g.with_flat_frames(&flat), g);
    }
}
