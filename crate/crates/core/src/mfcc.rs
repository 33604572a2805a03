//! Mel-frequency cepstral coefficients over short overlapping frames.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIN_FFT: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfccConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub preemphasis: f64,
    pub n_mel: usize,
    pub n_coef: usize,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            frame_ms: 50.0,
            hop_ms: 10.0,
            preemphasis: 0.97,
            n_mel: 24,
            n_coef: 12,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self, fs: f64) -> Result<()> {
        if !(self.frame_ms > self.hop_ms && self.hop_ms > 0.0) {
            return Err(Error::Config(format!(
                "need frame_ms > hop_ms > 0, got {} and {}",
                self.frame_ms, self.hop_ms
            )));
        }
        if !(self.preemphasis > 0.0 && self.preemphasis < 1.0) {
            return Err(Error::Config(format!("pre-emphasis {} outside (0, 1)", self.preemphasis)));
        }
        if !(20..=24).contains(&self.n_mel) {
            return Err(Error::Config(format!("n_mel {} outside 20..=24", self.n_mel)));
        }
        if self.n_coef == 0 || self.n_coef >= self.n_mel {
            return Err(Error::Config(format!(
                "n_coef {} must be in 1..{} (the 0th coefficient is dropped)",
                self.n_coef, self.n_mel
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log floor must be positive".into()));
        }
        if self.frame_len(fs) < 2 || self.hop_len(fs) < 1 {
            return Err(Error::Config(format!("frame or hop shorter than one sample at {fs} Hz")));
        }
        Ok(())
    }

    /// Frame length `L` in samples.
    pub fn frame_len(&self, fs: f64) -> usize {
        (self.frame_ms * fs / 1000.0).round() as usize
    }

    /// Hop `H` in samples.
    pub fn hop_len(&self, fs: f64) -> usize {
        (self.hop_ms * fs / 1000.0).round() as usize
    }

    /// FFT size: frame length rounded up to a power of two, at least 256.
    pub fn fft_len(&self, fs: f64) -> usize {
        self.frame_len(fs).next_power_of_two().max(MIN_FFT)
    }

    /// Short identity string stored with trained models.
    pub fn fingerprint(&self, fs: f64) -> String {
        format!(
            "mfcc:fs={fs}:frame={}:hop={}:pre={}:mel={}:coef={}:floor={:e}",
            self.frame_ms, self.hop_ms, self.preemphasis, self.n_mel, self.n_coef, self.log_floor
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    /// `F × n_coef`, one row per frame.
    pub frames: Vec<Vec<f64>>,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, frames: Vec<Vec<f64>>) -> Result<Self> {
        let id = id.into();
        let dim = frames.first().map(Vec::len).unwrap_or(0);
        if frames.is_empty() || dim == 0 {
            return Err(Error::validation(None, format!("feature sequence {id} is empty")));
        }
        if frames.iter().any(|f| f.len() != dim) {
            return Err(Error::Dimension(format!("ragged feature rows in {id}")));
        }
        if frames.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation(None, format!("non-finite feature in {id}")));
        }
        Ok(Self { id, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].len()
    }
}

pub fn mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Number of full frames: `floor((N - L) / H) + 1`.
pub fn frame_count(n: usize, frame_len: usize, hop: usize) -> usize {
    if n < frame_len {
        0
    } else {
        (n - frame_len) / hop + 1
    }
}

fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Pre-emphasise each frame on its own (`y_0 = (1 - α)·x_0`) and apply a
/// Hamming window.
pub fn frame_signal(signal: &[f64], fs: f64, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate(fs)?;
    let l = cfg.frame_len(fs);
    let h = cfg.hop_len(fs);
    let f = frame_count(signal.len(), l, h);
    if f == 0 {
        return Err(Error::TooShort(format!(
            "{} samples is shorter than one {l}-sample frame",
            signal.len()
        )));
    }
    let win = hamming(l);
    Ok((0..f)
        .map(|i| {
            let x = &signal[i * h..i * h + l];
            (0..l)
                .map(|n| {
                    let prev = if n == 0 { x[0] } else { x[n - 1] };
                    (x[n] - cfg.preemphasis * prev) * win[n]
                })
                .collect()
        })
        .collect())
}

/// Triangular filters spaced evenly on the mel scale from 0 to `fs / 2`,
/// sampled at the FFT bin frequencies. Rows are filters, columns bins
/// `0..=nfft/2`.
pub fn mel_filterbank(n_mel: usize, nfft: usize, fs: f64) -> Vec<Vec<f64>> {
    let top = mel(fs / 2.0);
    let edges: Vec<f64> = (0..n_mel + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mel + 1) as f64))
        .collect();
    (0..n_mel)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..=nfft / 2)
                .map(|k| {
                    let f = k as f64 * fs / nfft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Reusable extractor holding the window, filterbank and FFT plan.
pub struct MfccExtractor {
    cfg: MfccConfig,
    fs: f64,
    nfft: usize,
    fft: Arc<dyn Fft<f64>>,
    bank: Vec<Vec<f64>>,
    /// `dct[c][m]` for kept coefficients `c = 1..=n_coef`.
    dct: Vec<Vec<f64>>,
}

impl MfccExtractor {
    pub fn new(cfg: &MfccConfig, fs: f64) -> Result<Self> {
        cfg.validate(fs)?;
        let nfft = cfg.fft_len(fs);
        let n = cfg.n_mel;
        let dct = (1..=cfg.n_coef)
            .map(|c| {
                (0..n)
                    .map(|m| (2.0 / n as f64).sqrt() * (PI * c as f64 * (m as f64 + 0.5) / n as f64).cos())
                    .collect()
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            fs,
            nfft,
            fft: FftPlanner::new().plan_fft_forward(nfft),
            bank: mel_filterbank(n, nfft, fs),
            dct,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    /// Log mel energies of one windowed frame.
    pub fn log_mel_energies(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = frame
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
            .take(self.nfft)
            .collect();
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..=self.nfft / 2].iter().map(|c| c.norm_sqr()).collect();
        self.bank
            .iter()
            .map(|w| {
                let e: f64 = w.iter().zip(&power).map(|(a, b)| a * b).sum();
                e.max(self.cfg.log_floor).ln()
            })
            .collect()
    }

    pub fn extract(&self, id: &str, signal: &[f64]) -> Result<FeatureSequence> {
        let frames = frame_signal(signal, self.fs, &self.cfg)?;
        let rows = frames
            .iter()
            .map(|f| {
                let le = self.log_mel_energies(f);
                self.dct.iter().map(|row| row.iter().zip(&le).map(|(a, b)| a * b).sum()).collect()
            })
            .collect();
        FeatureSequence::new(id, rows)
    }
}

pub fn extract_mfcc(id: &str, signal: &[f64], fs: f64, cfg: &MfccConfig) -> Result<FeatureSequence> {
    MfccExtractor::new(cfg, fs)?.extract(id, signal)
}

/// Feature cache: a `# id=…,frames=F,fs=…` header line, a column header and
/// one comma-separated row per frame.
pub fn save_features(seq: &FeatureSequence, fs: f64, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# id={},frames={},fs={fs}", seq.id, seq.len()).expect("write to string");
    let cols: Vec<String> = (1..=seq.dim()).map(|c| format!("c{c}")).collect();
    writeln!(out, "{}", cols.join(",")).expect("write to string");
    for row in &seq.frames {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(out, "{}", vals.join(",")).expect("write to string");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Returns the sequence and its sample rate.
pub fn load_features(path: &Path) -> Result<(FeatureSequence, f64)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let meta = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| Error::format("header", "missing feature-cache header"))?;
    let mut id = None;
    let mut frames = None;
    let mut fs = None;
    for kv in meta.split(',') {
        match kv.split_once('=') {
            Some(("id", v)) => id = Some(v.to_string()),
            Some(("frames", v)) => frames = v.parse::<usize>().ok(),
            Some(("fs", v)) => fs = v.parse::<f64>().ok(),
            _ => return Err(Error::format("header", format!("unexpected field {kv:?}"))),
        }
    }
    let (id, frames, fs) = match (id, frames, fs) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::format("header", "need id, frames and fs")),
    };
    lines.next();
    let rows = lines
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::validation(Some(i + 1), format!("bad value {v:?}"))))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.len() != frames {
        return Err(Error::format("frames", format!("header says {frames}, found {}", rows.len())));
    }
    Ok((FeatureSequence::new(id, rows)?, fs))
}
