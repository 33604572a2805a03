//! Signal conditioning ahead of model fitting: Butterworth band-pass applied
//! forward-backward, windowed spike removal and z-score normalization.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub band_low: f64,
    pub band_high: f64,
    /// Order of each of the high-pass and low-pass Butterworth prototypes.
    pub filter_order: usize,
    /// Spike-detection window, seconds.
    pub spike_window: f64,
    pub normalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            band_low: 25.0,
            band_high: 400.0,
            filter_order: 4,
            spike_window: 0.5,
            normalize: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self, fs: f64) -> Result<()> {
        let nyquist = fs / 2.0;
        if !(self.band_low > 0.0 && self.band_low < self.band_high) {
            return Err(Error::Config(format!(
                "band edges must satisfy 0 < low < high, got {}:{}",
                self.band_low, self.band_high
            )));
        }
        if self.band_high >= nyquist {
            return Err(Error::Config(format!(
                "cutoff {} Hz at or above Nyquist {} Hz",
                self.band_high, nyquist
            )));
        }
        if self.filter_order == 0 {
            return Err(Error::Config("filter order must be at least 1".into()));
        }
        if !(self.spike_window > 0.0) {
            return Err(Error::Config("spike window must be positive".into()));
        }
        Ok(())
    }
}

/// Second-order section with `a0 = 1`, evaluated in transposed direct form II.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        (self.b[0] + z1 * self.b[1] + z2 * self.b[2]) / (self.a[0] + z1 * self.a[1] + z2 * self.a[2])
    }

    fn dc_gain(&self) -> f64 {
        let den = self.a.iter().sum::<f64>();
        if den == 0.0 {
            0.0
        } else {
            self.b.iter().sum::<f64>() / den
        }
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Low,
    High,
}

/// Butterworth prototype of `order` at `cutoff` Hz via the bilinear
/// transform with pre-warping, factored into biquads (and one first-order
/// section for odd orders).
fn butterworth(order: usize, cutoff: f64, fs: f64, kind: Kind) -> Vec<Biquad> {
    let k = (std::f64::consts::PI * cutoff / fs).tan();
    let mut out = Vec::with_capacity(order.div_ceil(2));
    for i in 0..order / 2 {
        let theta = std::f64::consts::PI * (2 * i + 1) as f64 / (2 * order) as f64;
        let q = 1.0 / (2.0 * theta.sin());
        let norm = 1.0 / (1.0 + k / q + k * k);
        let a = [1.0, 2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm];
        let b = match kind {
            Kind::Low => {
                let b0 = k * k * norm;
                [b0, 2.0 * b0, b0]
            }
            Kind::High => [norm, -2.0 * norm, norm],
        };
        out.push(Biquad { b, a });
    }
    if order % 2 == 1 {
        let norm = 1.0 / (1.0 + k);
        let a = [1.0, (k - 1.0) * norm, 0.0];
        let b = match kind {
            Kind::Low => [k * norm, k * norm, 0.0],
            Kind::High => [norm, -norm, 0.0],
        };
        out.push(Biquad { b, a });
    }
    out
}

pub fn butterworth_lowpass(order: usize, cutoff: f64, fs: f64) -> Vec<Biquad> {
    butterworth(order, cutoff, fs, Kind::Low)
}

pub fn butterworth_highpass(order: usize, cutoff: f64, fs: f64) -> Vec<Biquad> {
    butterworth(order, cutoff, fs, Kind::High)
}

/// High-pass at `band_low` cascaded with low-pass at `band_high`.
pub fn design_bandpass(fs: f64, cfg: &PreprocessConfig) -> Result<Vec<Biquad>> {
    cfg.validate(fs)?;
    let mut sos = butterworth_highpass(cfg.filter_order, cfg.band_low, fs);
    sos.extend(butterworth_lowpass(cfg.filter_order, cfg.band_high, fs));
    Ok(sos)
}

/// Complex response of a cascade at `freq` Hz.
pub fn frequency_response(sos: &[Biquad], freq: f64, fs: f64) -> Complex64 {
    let w = 2.0 * std::f64::consts::PI * freq / fs;
    sos.iter().fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(w))
}

/// Per-section initial state for a unit step (steady state of the cascade).
fn step_initial_state(sos: &[Biquad]) -> Vec<[f64; 2]> {
    let mut gain_in = 1.0;
    sos.iter()
        .map(|s| {
            let g = s.dc_gain();
            let z2 = (s.b[2] - s.a[2] * g) * gain_in;
            let z1 = (s.b[1] - s.a[1] * g) * gain_in + z2;
            gain_in *= g;
            [z1, z2]
        })
        .collect()
}

fn sosfilt_in_place(sos: &[Biquad], x: &mut [f64], state: &mut [[f64; 2]]) {
    for (s, z) in sos.iter().zip(state.iter_mut()) {
        for v in x.iter_mut() {
            let input = *v;
            let y = s.b[0] * input + z[0];
            z[0] = s.b[1] * input - s.a[1] * y + z[1];
            z[1] = s.b[2] * input - s.a[2] * y;
            *v = y;
        }
    }
}

/// Zero-phase filtering: odd extension at both ends, steady-state initial
/// conditions, forward pass, backward pass.
pub fn filtfilt(sos: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 || sos.is_empty() {
        return x.to_vec();
    }
    let pad = (3 * (2 * sos.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let zi = step_initial_state(sos);
    let run = |buf: &mut Vec<f64>| {
        let x0 = buf[0];
        let mut state: Vec<[f64; 2]> = zi.iter().map(|z| [z[0] * x0, z[1] * x0]).collect();
        sosfilt_in_place(sos, buf, &mut state);
    };
    run(&mut ext);
    ext.reverse();
    run(&mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

pub fn bandpass_filter(signal: &[f64], fs: f64, cfg: &PreprocessConfig) -> Result<Vec<f64>> {
    let sos = design_bandpass(fs, cfg)?;
    Ok(filtfilt(&sos, signal))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Threshold on a window's maximum absolute amplitude, as a multiple of the
/// median over all windows.
const SPIKE_FACTOR: f64 = 3.0;

/// Windowed-outlier spike removal.
///
/// The signal is cut into non-overlapping windows of `spike_window` seconds.
/// While some window's maximum absolute amplitude exceeds three times the
/// median of those maxima, the loudest such window is repaired: the span
/// around its peak bounded by the nearest sign changes (or the window edges)
/// is replaced by a straight line between the bounding samples. The loop runs
/// to a fixed point, so the operation is idempotent.
pub fn remove_spikes(signal: &[f64], fs: f64, cfg: &PreprocessConfig) -> Vec<f64> {
    let win = (cfg.spike_window * fs).round() as usize;
    let mut x = signal.to_vec();
    let n = x.len();
    if win < 3 || n < win {
        return x;
    }
    let windows: Vec<(usize, usize)> = (0..n).step_by(win).map(|s| (s, (s + win).min(n))).collect();
    let maa = |x: &[f64], (s, e): (usize, usize)| x[s..e].iter().fold(0.0_f64, |m, v| m.max(v.abs()));

    for _ in 0..n {
        let maxima: Vec<f64> = windows.iter().map(|&w| maa(&x, w)).collect();
        let threshold = SPIKE_FACTOR * median(&mut maxima.clone());
        let worst = maxima
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > threshold)
            .max_by(|a, b| a.1.total_cmp(b.1));
        let Some((wi, _)) = worst else { break };
        let (ws, we) = windows[wi];
        let peak = (ws..we).max_by(|&a, &b| x[a].abs().total_cmp(&x[b].abs())).unwrap();
        let sign = x[peak].signum();
        let crosses = |v: f64| v == 0.0 || v.signum() != sign;

        let (left, left_val) = match (ws..peak).rev().find(|&i| crosses(x[i])) {
            Some(i) => (i as isize, x[i]),
            None => (ws as isize - 1, 0.0),
        };
        let (right, right_val) = match (peak + 1..we).find(|&i| crosses(x[i])) {
            Some(i) => (i as isize, x[i]),
            None => (we as isize, 0.0),
        };
        let span = (right - left) as f64;
        for i in (left + 1)..right {
            let frac = (i - left) as f64 / span;
            x[i as usize] = left_val + frac * (right_val - left_val);
        }
    }
    x
}

/// Shift to zero mean and scale to unit (population) standard deviation.
pub fn zscore_normalize(signal: &[f64]) -> Result<Vec<f64>> {
    let n = signal.len();
    if n < 2 {
        return Err(Error::DegenerateSignal("need at least 2 samples to normalize".into()));
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let var = signal.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    if sd == 0.0 || sd <= 1e-12 * mean.abs() {
        return Err(Error::DegenerateSignal("zero variance".into()));
    }
    Ok(signal.iter().map(|v| (v - mean) / sd).collect())
}

/// Filter, remove spikes, then (optionally) normalize.
pub fn preprocess(signal: &[f64], fs: f64, cfg: &PreprocessConfig) -> Result<Vec<f64>> {
    let filtered = bandpass_filter(signal, fs, cfg)?;
    let cleaned = remove_spikes(&filtered, fs, cfg);
    if cfg.normalize {
        zscore_normalize(&cleaned)
    } else {
        Ok(cleaned)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    fn peak(x: &[f64]) -> f64 {
        x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn designed_response_within_half_power_in_band() {
        let cfg = PreprocessConfig::default();
        let sos = design_bandpass(2000.0, &cfg).unwrap();
        let half_power = std::f64::consts::FRAC_1_SQRT_2 * (1.0 - 1e-6);
        let mut f = 25.0;
        while f <= 400.0 {
            let g = frequency_response(&sos, f, 2000.0).norm();
            assert!(g >= half_power && g <= 1.0 + 1e-9, "|H({f})| = {g}");
            f += 5.0;
        }
        // monotone decay outside the band
        let mut prev = frequency_response(&sos, 25.0, 2000.0).norm();
        for f in (1..25).rev() {
            let g = frequency_response(&sos, f as f64, 2000.0).norm();
            assert!(g < prev);
            prev = g;
        }
        let mut prev = frequency_response(&sos, 400.0, 2000.0).norm();
        for f in (410..1000).step_by(10) {
            let g = frequency_response(&sos, f as f64, 2000.0).norm();
            assert!(g < prev);
            prev = g;
        }
    }

    #[test]
    fn dc_is_removed() {
        let x = vec![3.0; 4000];
        let y = bandpass_filter(&x, 2000.0, &PreprocessConfig::default()).unwrap();
        assert!(peak(&y[400..3600]) < 1e-3 * 3.0, "{}", peak(&y[400..3600]));
    }

    #[test]
    fn passband_and_stopband_sines() {
        let cfg = PreprocessConfig::default();
        let y = bandpass_filter(&sine(100.0, 2000.0, 8000), 2000.0, &cfg).unwrap();
        let r = peak(&y[1000..7000]);
        assert!((0.7..=1.0).contains(&r), "100 Hz ratio {r}");
        let y = bandpass_filter(&sine(600.0, 2000.0, 8000), 2000.0, &cfg).unwrap();
        let r = peak(&y[1000..7000]);
        assert!(r < 0.1, "600 Hz ratio {r}");
    }

    #[test]
    fn cutoff_at_nyquist_rejected() {
        let cfg = PreprocessConfig {
            band_high: 500.0,
            ..Default::default()
        };
        assert!(matches!(bandpass_filter(&[0.0; 10], 1000.0, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn odd_order_design_has_first_order_section() {
        let sos = butterworth_lowpass(3, 100.0, 1000.0);
        assert_eq!(sos.len(), 2);
        let g = frequency_response(&sos, 100.0, 1000.0).norm();
        assert!((g - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn spike_free_sine_untouched() {
        let x = sine(5.0, 1000.0, 3000);
        assert_eq!(remove_spikes(&x, 1000.0, &PreprocessConfig::default()), x);
    }

    #[test]
    fn single_spike_removed() {
        let mut x = sine(5.0, 1000.0, 3000);
        x[1210] = 50.0;
        let y = remove_spikes(&x, 1000.0, &PreprocessConfig::default());
        assert!(peak(&y) <= 2.0);
        // other windows untouched
        assert_eq!(&y[..1000], &x[..1000]);
        assert_eq!(&y[1500..], &x[1500..]);
    }

    #[test]
    fn zero_signal_stays_zero() {
        let x = vec![0.0; 2000];
        assert_eq!(remove_spikes(&x, 1000.0, &PreprocessConfig::default()), x);
    }

    #[test]
    fn zscore_examples() {
        let y = zscore_normalize(&[1.0, 2.0, 3.0]).unwrap();
        let mean = y.iter().sum::<f64>() / 3.0;
        let sd = (y.iter().map(|v| v * v).sum::<f64>() / 3.0).sqrt();
        assert!(mean.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
        let again = zscore_normalize(&y).unwrap();
        for (a, b) in y.iter().zip(&again) {
            assert!((a - b).abs() < 1e-9);
        }
        let err = zscore_normalize(&[0.1; 7]).unwrap_err();
        assert!(err.to_string().contains("zero variance"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn signal() -> impl Strategy<Value = Vec<f64>> {
            (1200usize..3000).prop_flat_map(|n| prop::collection::vec(-1.0f64..1.0, n))
        }

        fn spiky() -> impl Strategy<Value = Vec<f64>> {
            (signal(), prop::collection::vec((0usize..3000, 5.0f64..50.0), 0..4)).prop_map(|(mut x, spikes)| {
                let n = x.len();
                for (at, h) in spikes {
                    x[at % n] = if at % 2 == 0 { h } else { -h };
                }
                x
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn bandpass_is_linear(x in signal(), y0 in signal(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let n = x.len().min(y0.len());
                let (x, y) = (&x[..n], &y0[..n]);
                let cfg = PreprocessConfig::default();
                let mixed: Vec<f64> = x.iter().zip(y).map(|(u, v)| a * u + b * v).collect();
                let fm = bandpass_filter(&mixed, 1000.0, &cfg).unwrap();
                let fx = bandpass_filter(x, 1000.0, &cfg).unwrap();
                let fy = bandpass_filter(y, 1000.0, &cfg).unwrap();
                for i in 0..n {
                    prop_assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
                }
            }

            #[test]
            fn spike_removal_is_idempotent(x in spiky()) {
                let cfg = PreprocessConfig::default();
                let once = remove_spikes(&x, 1000.0, &cfg);
                prop_assert_eq!(remove_spikes(&once, 1000.0, &cfg), once);
            }

            #[test]
            fn pipeline_output_is_standardised(x in spiky()) {
                let y = preprocess(&x, 1000.0, &PreprocessConfig::default()).unwrap();
                let n = y.len() as f64;
                let mean = y.iter().sum::<f64>() / n;
                let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var - 1.0).abs() < 1e-9);
            }
        }
    }
}
