//! Waveforms, windowing, STFT/ISTFT and WAV I/O.

mod stft;
mod wav;
mod window;

pub use stft::{
    istft, istft_backward, stft, stft_backward, stft_multi, stft_multi_backward, SpectralGrid,
    StftConfig, WindowKind,
};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav};
pub use window::hann_window;

use crate::error::{Error, Result};

/// Mono audio with amplitudes in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        if let Some(i) = samples.iter().position(|s| s.abs() > 1.0) {
            return Err(Error::invalid(format!(
                "sample {i} = {} is outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(Waveform {
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}
