//! Log-Mel filterbank front-end and feature-file I/O.
//!
//! Pipeline: Hamming window, magnitude DFT (next power of two), triangular
//! HTK-mel filterbank from 0 Hz to Nyquist applied to the power spectrum,
//! clamp at 1e-10, natural log. No pre-emphasis, no VAD, no mean norm.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct AudioClip {
    /// PCM samples in [-1, 1].
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// Log-mel features, `mels` rows by `frames` columns, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub mels: usize,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(mels: usize, frames: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != mels * frames {
            return Err(Error::Dim(format!(
                "feature matrix {}x{} wants {} values, got {}",
                mels,
                frames,
                mels * frames,
                values.len()
            )));
        }
        Ok(FeatureMatrix { mels, frames, values })
    }

    pub fn at(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * self.frames + frame]
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over FFT bins, HTK style, 0 Hz to Nyquist.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let nyquist = sample_rate as f64 / 2.0;
    let n_bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(0.0);
    let mel_hi = hz_to_mel(nyquist);
    let centers: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = |b: usize| b as f64 * sample_rate as f64 / n_fft as f64;
    let mut bank = vec![vec![0.0; n_bins]; n_mels];
    for m in 0..n_mels {
        let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        for b in 0..n_bins {
            let f = bin_hz(b);
            if f > lo && f < mid {
                bank[m][b] = (f - lo) / (mid - lo);
            } else if (f - mid).abs() < 1e-12 {
                bank[m][b] = 1.0;
            } else if f > mid && f < hi {
                bank[m][b] = (hi - f) / (hi - mid);
            }
        }
    }
    bank
}

/// Center frequency (Hz) of each mel filter.
pub fn mel_centers(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let mel_hi = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(mel_hi * i as f64 / (n_mels + 1) as f64))
        .collect()
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Log-mel filterbank features.
pub fn fbank(clip: &AudioClip, window_ms: f64, hop_ms: f64, n_mels: usize) -> Result<FeatureMatrix> {
    if clip.sample_rate == 0 {
        return Err(Error::Input("sample rate must be positive".into()));
    }
    let sr = clip.sample_rate as f64;
    let win = (window_ms * sr / 1000.0).round() as usize;
    let hop = (hop_ms * sr / 1000.0).round() as usize;
    if win == 0 || hop == 0 {
        return Err(Error::Input("window/hop too small for sample rate".into()));
    }
    if clip.samples.len() < win {
        return Err(Error::Input(format!(
            "clip of {} samples shorter than one {}-sample window",
            clip.samples.len(),
            win
        )));
    }
    let frames = (clip.samples.len() - win) / hop + 1;
    let n_fft = win.next_power_of_two();
    let window = hamming(win);
    let bank = mel_filterbank(n_mels, n_fft, clip.sample_rate);
    let n_bins = n_fft / 2 + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut values = vec![0.0; n_mels * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for fr in 0..frames {
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < win {
                Complex::new(clip.samples[fr * hop + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        for m in 0..n_mels {
            let e: f64 = bank[m].iter().zip(&power).map(|(w, p)| w * p).sum();
            values[m * frames + fr] = e.max(LOG_FLOOR).ln();
        }
    }
    FeatureMatrix::new(n_mels, frames, values)
}

/// Fixed-length segment: random contiguous crop when longer, cyclic
/// repetition when shorter, identity at exact length.
pub fn crop_segment(feat: &FeatureMatrix, frames: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    if feat.frames == frames {
        return feat.clone();
    }
    let mut values = vec![0.0; feat.mels * frames];
    if feat.frames > frames {
        let start = rng.gen_range(0..=feat.frames - frames);
        for m in 0..feat.mels {
            for t in 0..frames {
                values[m * frames + t] = feat.at(m, start + t);
            }
        }
    } else {
        for m in 0..feat.mels {
            for t in 0..frames {
                values[m * frames + t] = feat.at(m, t % feat.frames);
            }
        }
    }
    FeatureMatrix { mels: feat.mels, frames, values }
}

// ── feature file format: "PVFB", u32 version, u32 rows, u32 cols, f32 LE ──

pub const FEAT_MAGIC: &[u8; 4] = b"PVFB";
pub const FEAT_VERSION: u32 = 1;

pub fn write_features(path: &Path, feat: &FeatureMatrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(FEAT_MAGIC)?;
    f.write_u32::<LittleEndian>(FEAT_VERSION)?;
    f.write_u32::<LittleEndian>(feat.mels as u32)?;
    f.write_u32::<LittleEndian>(feat.frames as u32)?;
    for &v in &feat.values {
        f.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Format("feature file truncated before magic".into()))?;
    if &magic != FEAT_MAGIC {
        return Err(Error::Format(format!("bad feature magic {:?}", magic)));
    }
    let version = f.read_u32::<LittleEndian>()?;
    if version != FEAT_VERSION {
        return Err(Error::Format(format!("unsupported feature version {}", version)));
    }
    let rows = f.read_u32::<LittleEndian>()? as usize;
    let cols = f.read_u32::<LittleEndian>()? as usize;
    if rows.checked_mul(cols).map_or(true, |n| n > 1 << 28) {
        return Err(Error::Format(format!("feature dims {}x{} overflow", rows, cols)));
    }
    let mut values = vec![0.0f64; rows * cols];
    for v in values.iter_mut() {
        *v = f
            .read_f32::<LittleEndian>()
            .map_err(|_| Error::Format("feature file truncated in payload".into()))? as f64;
    }
    FeatureMatrix::new(rows, cols, values)
}

/// Minimal RIFF reader for 16-bit mono PCM.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut sample_rate = 0u32;
    let mut channels = 0u16;
    let mut bits = 0u16;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Format("short fmt chunk".into()));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                sample_rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if format != 1 {
                    return Err(Error::Format("only PCM WAV supported".into()));
                }
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1);
    }
    if channels != 1 || bits != 16 {
        return Err(Error::Format(format!(
            "only 16-bit mono PCM supported (got {} ch, {} bit)",
            channels, bits
        )));
    }
    let body = data.ok_or_else(|| Error::Format("missing data chunk".into()))?;
    let samples: Vec<f64> = body
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok(AudioClip { samples, sample_rate })
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let n = clip.samples.len();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(b"RIFF")?;
    f.write_u32::<LittleEndian>(36 + 2 * n as u32)?;
    f.write_all(b"WAVE")?;
    f.write_all(b"fmt ")?;
    f.write_u32::<LittleEndian>(16)?;
    f.write_u16::<LittleEndian>(1)?;
    f.write_u16::<LittleEndian>(1)?;
    f.write_u32::<LittleEndian>(clip.sample_rate)?;
    f.write_u32::<LittleEndian>(clip.sample_rate * 2)?;
    f.write_u16::<LittleEndian>(2)?;
    f.write_u16::<LittleEndian>(16)?;
    f.write_all(b"data")?;
    f.write_u32::<LittleEndian>(2 * n as u32)?;
    for &s in &clip.samples {
        f.write_i16::<LittleEndian>((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    Ok(())
}
