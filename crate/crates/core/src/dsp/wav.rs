//! Minimal RIFF/WAVE reader and 16-bit writer. Reads integer PCM at 8, 16 and
//! 24 bits, either as plain format tag 1 or inside WAVE_FORMAT_EXTENSIBLE.

use std::fs;
use std::path::Path;

use crate::error::{MusaError, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Decoded interleaved samples scaled to `[-1, 1)`.
#[derive(Debug, Clone)]
pub struct WavData {
    pub sample_rate: u32,
    pub channels: u16,
    pub bits_per_sample: u16,
    pub samples: Vec<f64>,
}

impl WavData {
    /// Channel mean per frame.
    pub fn to_mono(&self) -> Vec<f64> {
        let c = self.channels as usize;
        self.samples
            .chunks_exact(c)
            .map(|f| f.iter().sum::<f64>() / c as f64)
            .collect()
    }
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

pub fn read_wav(path: &Path) -> Result<WavData> {
    let bytes = fs::read(path).map_err(|e| MusaError::io(path, e))?;
    parse_wav(&bytes)
}

pub(crate) fn parse_wav(b: &[u8]) -> Result<WavData> {
    if b.len() < 12 || &b[0..4] != b"RIFF" || &b[8..12] != b"WAVE" {
        return Err(MusaError::MalformedWav("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= b.len() {
        let id = &b[pos..pos + 4];
        let size = u32_at(b, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start.checked_add(size).filter(|&e| e <= b.len());
        match id {
            b"fmt " => {
                let end = body_end.ok_or_else(|| MusaError::MalformedWav("truncated fmt chunk".into()))?;
                let body = &b[body_start..end];
                if body.len() < 16 {
                    return Err(MusaError::MalformedWav("fmt chunk too small".into()));
                }
                let mut tag = u16_at(body, 0);
                if tag == FORMAT_EXTENSIBLE {
                    if body.len() < 26 {
                        return Err(MusaError::MalformedWav("extensible fmt chunk too small".into()));
                    }
                    tag = u16_at(body, 24);
                }
                fmt = Some((tag, u16_at(body, 2), u32_at(body, 4), u16_at(body, 14)));
            }
            b"data" => {
                // Some writers leave the data size at zero or too large when streaming.
                let end = body_end.unwrap_or(b.len());
                data = Some(&b[body_start..end]);
            }
            _ => {}
        }
        pos = body_start + size + (size & 1);
    }
    let (tag, channels, sample_rate, bits) = fmt.ok_or_else(|| MusaError::MalformedWav("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| MusaError::MalformedWav("no data chunk".into()))?;
    if tag != FORMAT_PCM {
        return Err(MusaError::UnsupportedEncoding(format!("format tag {tag}")));
    }
    if channels == 0 || sample_rate == 0 {
        return Err(MusaError::MalformedWav("zero channels or sample rate".into()));
    }
    let width = match bits {
        8 => 1,
        16 => 2,
        24 => 3,
        other => return Err(MusaError::UnsupportedEncoding(format!("{other}-bit samples"))),
    };
    let frame = width * channels as usize;
    let usable = data.len() / frame * frame;
    let samples: Vec<f64> = data[..usable]
        .chunks_exact(width)
        .map(|s| match width {
            1 => (s[0] as f64 - 128.0) / 128.0,
            2 => i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0,
            _ => {
                let v = i32::from_le_bytes([0, s[0], s[1], s[2]]) >> 8;
                v as f64 / 8_388_608.0
            }
        })
        .collect();
    if samples.is_empty() {
        return Err(MusaError::EmptyAudio);
    }
    Ok(WavData {
        sample_rate,
        channels,
        bits_per_sample: bits,
        samples,
    })
}

pub fn encode_wav_16bit(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &v in samples {
        let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Mono 16-bit PCM, written to a sibling temp file and renamed into place.
pub fn write_wav_16bit(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    crate::io::write_atomic(path, &encode_wav_16bit(samples, sample_rate))
}
