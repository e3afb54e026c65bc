//! Mono 16-bit PCM RIFF/WAVE reading and writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("chunk extends past end of file".into()))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Format("fmt chunk too short".into()));
                }
                fmt = Some((u16_at(body, 0), u16_at(body, 2), u32_at(body, 4), u16_at(body, 14)));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }
    let (format, channels, sample_rate, bits) =
        fmt.ok_or_else(|| Error::Format("missing fmt chunk".into()))?;
    if format != 1 {
        return Err(Error::Format(format!("unsupported format tag {format}, need PCM")));
    }
    if channels != 1 {
        return Err(Error::Format(format!("expected mono audio, got {channels} channels")));
    }
    if bits != 16 {
        return Err(Error::Format(format!("expected 16-bit samples, got {bits}")));
    }
    let data = data.ok_or_else(|| Error::Format("missing data chunk".into()))?;
    let samples = data
        .chunks_exact(2)
        .map(|p| i16::from_le_bytes([p[0], p[1]]) as f64 / 32768.0)
        .collect();
    Waveform::new(samples, sample_rate)
}

pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    decode_wav(&fs::read(path)?)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_wav(w))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_quantized() {
        let w = Waveform::new(vec![0.0, 0.5, -0.5, -1.0, 32767.0 / 32768.0], 8000).unwrap();
        let bytes = encode_wav(&w);
        assert_eq!(bytes.len(), 44 + 10);
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn full_scale_positive_is_clipped() {
        let w = Waveform::new(vec![1.0], 8000).unwrap();
        let back = decode_wav(&encode_wav(&w)).unwrap();
        assert_eq!(back.samples[0], 32767.0 / 32768.0);
    }

    #[test]
    fn stereo_rejected() {
        let w = Waveform::new(vec![0.0; 4], 8000).unwrap();
        let mut bytes = encode_wav(&w);
        bytes[22] = 2;
        assert!(matches!(decode_wav(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn garbage_rejected() {
        assert!(matches!(decode_wav(b"hello world, not audio"), Err(Error::Format(_))));
        let w = Waveform::new(vec![0.0; 4], 8000).unwrap();
        let bytes = encode_wav(&w);
        assert!(decode_wav(&bytes[..30]).is_err());
    }

    #[test]
    fn skips_unknown_chunks() {
        let w = Waveform::new(vec![0.25, -0.25], 16000).unwrap();
        let plain = encode_wav(&w);
        let mut bytes = plain[..12].to_vec();
        bytes.extend_from_slice(b"LIST");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3, 0]);
        bytes.extend_from_slice(&plain[12..]);
        assert_eq!(decode_wav(&bytes).unwrap(), w);
    }
}
