//! Duration-dependent Viterbi decoding over filtered regime probabilities,
//! with duration tables derived from an autocorrelation heart-rate estimate.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{butterworth_lowpass, filtfilt};
use crate::signal_io::{cyclic_successor, AnnotationTrack, HEART_STATES};

/// Normalised autocorrelation below which a heart-rate peak is not trusted.
pub const MIN_RATE_CONFIDENCE: f64 = 0.3;

const ENVELOPE_CUTOFF_HZ: f64 = 20.0;
const MIN_BPM: f64 = 30.0;
const MAX_BPM: f64 = 200.0;
/// Relative height at which a half-lag peak replaces the chosen one. Doubled
/// periods of synthetic cycles score 0.9-1.0 here; true half-periods ~0.05.
const SUBHARMONIC_RATIO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeartRateEstimate {
    /// Beats per minute.
    pub hr: f64,
    /// Systolic interval (S1 onset to S2 onset), seconds.
    pub t_sys: f64,
    /// Envelope autocorrelation at the chosen lag relative to lag zero.
    pub confidence: f64,
    pub low_confidence: bool,
}

fn autocorrelation(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let size = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex64> = x
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(size)
        .collect();
    planner.plan_fft_forward(size).process(&mut buf);
    for v in buf.iter_mut() {
        *v = Complex64::new(v.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    buf[..n].iter().map(|v| v.re / size as f64).collect()
}

fn argmax_in(v: &[f64], lo: usize, hi: usize) -> Option<usize> {
    let hi = hi.min(v.len().saturating_sub(1));
    if lo > hi {
        return None;
    }
    let mut best = lo;
    for i in lo..=hi {
        if v[i] > v[best] {
            best = i;
        }
    }
    Some(best)
}

/// A periodic envelope also peaks at multiples of its period, and with
/// little beat-to-beat variation the multiple can narrowly win. Step down to
/// the peak near half the lag while it is nearly as strong.
fn fundamental_lag(acf: &[f64], mut lag: usize, lo: usize) -> usize {
    loop {
        let half = lag / 2;
        let reach = lag / 10;
        if half.saturating_sub(reach) <= lo {
            return lag;
        }
        let Some(h) = argmax_in(acf, half - reach, half + reach) else {
            return lag;
        };
        let is_peak = h > half - reach && h < half + reach;
        if is_peak && acf[h] >= SUBHARMONIC_RATIO * acf[lag] {
            lag = h;
        } else {
            return lag;
        }
    }
}

/// Heart rate from the autocorrelation of the 20 Hz amplitude envelope.
pub fn estimate_heart_rate(signal: &[f64], fs: f64) -> Result<HeartRateEstimate> {
    if (signal.len() as f64) < 5.0 * fs {
        return Err(Error::TooShort(format!(
            "heart-rate estimation needs at least 5 s, got {:.2} s",
            signal.len() as f64 / fs
        )));
    }
    let rect: Vec<f64> = signal.iter().map(|v| v.abs()).collect();
    let mut env = filtfilt(&butterworth_lowpass(2, ENVELOPE_CUTOFF_HZ, fs), &rect);
    let mean = env.iter().sum::<f64>() / env.len() as f64;
    env.iter_mut().for_each(|v| *v -= mean);
    let acf = autocorrelation(&env);
    if !(acf[0] > 0.0) {
        return Err(Error::Estimation("flat envelope, no periodicity".into()));
    }
    let lo = (60.0 / MAX_BPM * fs).round() as usize;
    let hi = (60.0 / MIN_BPM * fs).round() as usize;
    let lag = argmax_in(&acf, lo, hi)
        .filter(|&l| l > lo && l < hi && acf[l] > 0.0)
        .ok_or_else(|| Error::Estimation("no autocorrelation peak in the 30-200 BPM range".into()))?;
    let lag = fundamental_lag(&acf, lag, lo);
    let sys_lo = ((0.2 * lag as f64).round() as usize).max((0.1 * fs).ceil() as usize);
    let sys_hi = (0.5 * lag as f64).round() as usize;
    let sys = argmax_in(&acf, sys_lo, sys_hi)
        .ok_or_else(|| Error::Estimation("systolic search window is empty".into()))?;
    let confidence = acf[lag] / acf[0];
    Ok(HeartRateEstimate {
        hr: 60.0 * fs / lag as f64,
        t_sys: sys as f64 / fs,
        confidence,
        low_confidence: confidence < MIN_RATE_CONFIDENCE,
    })
}

/// Per-regime duration mean and standard deviation, seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl DurationStats {
    /// Pool interval lengths from annotated recordings at their own rates.
    pub fn from_tracks<'a>(tracks: impl IntoIterator<Item = (&'a AnnotationTrack, u32)>) -> Result<Self> {
        let mut lens: Vec<Vec<f64>> = vec![Vec::new(); HEART_STATES];
        for (track, fs) in tracks {
            for iv in track.intervals() {
                lens[iv.state].push(iv.len() as f64 / fs as f64);
            }
        }
        let mut mean = Vec::with_capacity(HEART_STATES);
        let mut sd = Vec::with_capacity(HEART_STATES);
        for (j, l) in lens.iter().enumerate() {
            if l.is_empty() {
                return Err(Error::Missing(format!("no annotated intervals for regime {}", j + 1)));
            }
            let m = l.iter().sum::<f64>() / l.len() as f64;
            let v = if l.len() > 1 {
                l.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (l.len() - 1) as f64
            } else {
                0.0
            };
            mean.push(m);
            sd.push(v.sqrt());
        }
        Ok(Self { mean, sd })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationModel {
    /// `dp[j][d - 1]`: probability that a regime-`j` segment lasts `d` samples.
    pub dp: Vec<Vec<f64>>,
}

impl DurationModel {
    pub fn new(dp: Vec<Vec<f64>>) -> Result<Self> {
        let d_max = dp.first().map_or(0, Vec::len);
        if d_max == 0 || dp.iter().any(|r| r.len() != d_max) {
            return Err(Error::Dimension("duration rows must share a length d_max ≥ 1".into()));
        }
        for (j, row) in dp.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::validation(None, format!("duration row {} is not a distribution", j + 1)));
            }
        }
        Ok(Self { dp })
    }

    pub fn d_max(&self) -> usize {
        self.dp[0].len()
    }

    pub fn k(&self) -> usize {
        self.dp.len()
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Gaussian(mean, sd) integrated over unit bins centred on 1..=d_max and
/// renormalised; a point mass at the rounded mean when the spread vanishes.
pub fn discretized_gaussian(mean: f64, sd: f64, d_max: usize) -> Vec<f64> {
    let mut row = vec![0.0; d_max];
    if sd > 1e-9 {
        for (i, p) in row.iter_mut().enumerate() {
            let d = (i + 1) as f64;
            *p = normal_cdf((d + 0.5 - mean) / sd) - normal_cdf((d - 0.5 - mean) / sd);
        }
    }
    let s: f64 = row.iter().sum();
    if s > 0.0 && s.is_finite() {
        row.iter_mut().for_each(|v| *v /= s);
    } else {
        row.iter_mut().for_each(|v| *v = 0.0);
        let at = (mean.round().max(1.0) as usize).min(d_max);
        row[at - 1] = 1.0;
    }
    row
}

/// Duration tables for S1, systole, S2 and diastole at rate `fs`.
pub fn build_duration_model(hr: &HeartRateEstimate, stats: &DurationStats, fs: f64) -> Result<DurationModel> {
    if stats.mean.len() != HEART_STATES || stats.sd.len() != HEART_STATES {
        return Err(Error::Missing("duration statistics needed for all four regimes".into()));
    }
    if !(hr.hr > 0.0) {
        return Err(Error::InfeasibleDuration(format!("heart rate {} is not positive", hr.hr)));
    }
    let d_max = (fs * 60.0 / hr.hr).round() as usize;
    if d_max == 0 {
        return Err(Error::InfeasibleDuration("heart cycle shorter than one sample".into()));
    }
    let s1 = stats.mean[0] * fs;
    let s2 = stats.mean[2] * fs;
    let sys = hr.t_sys * fs - s1;
    let dia = d_max as f64 - s1 - sys - s2;
    let means = [s1, sys, s2, dia];
    let names = ["S1", "systole", "S2", "diastole"];
    if let Some(j) = means.iter().position(|&m| !(m > 0.0)) {
        return Err(Error::InfeasibleDuration(format!(
            "derived {} mean duration {:.1} samples is not positive",
            names[j], means[j]
        )));
    }
    let dp = means
        .iter()
        .zip(&stats.sd)
        .map(|(&m, &sd)| discretized_gaussian(m, sd * fs, d_max))
        .collect();
    DurationModel::new(dp)
}

/// Next-state matrix that only permits the cyclic successor.
pub fn cyclic_next_state(k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| (0..k).map(|j| if j == cyclic_successor(i, k) { 1.0 } else { 0.0 }).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPath {
    pub states: Vec<usize>,
    /// Log score of the best segmentation.
    pub log_score: f64,
}

fn ln(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn check_next_state(a: &[Vec<f64>], k: usize) -> Result<()> {
    if a.len() != k || a.iter().any(|r| r.len() != k) {
        return Err(Error::Dimension(format!("next-state matrix must be {k} × {k}")));
    }
    for (i, row) in a.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if !(v >= 0.0) {
                return Err(Error::validation(None, "next-state matrix has a negative entry"));
            }
            if v > 0.0 && j != cyclic_successor(i, k) {
                return Err(Error::validation(
                    None,
                    format!("next-state matrix allows {} → {}; only the cyclic successor is permitted", i + 1, j + 1),
                ));
            }
        }
    }
    Ok(())
}

/// Semi-Markov Viterbi over log filtered probabilities `log_m` (T × K).
///
/// A segment of regime `j` with duration `d` ending at `t` scores
/// `log dP_d^j + Σ log M^j` over its samples; the first segment starts at the
/// first sample and adds `log π0_j`, and the last may run past the end of the
/// signal (up to `T + d_max - 1`), scoring only the samples it covers.
pub fn skf_viterbi(log_m: &[Vec<f64>], dm: &DurationModel, a: &[Vec<f64>], pi0: &[f64]) -> Result<DecodedPath> {
    let n = log_m.len();
    let k = dm.k();
    let d_max = dm.d_max();
    if n == 0 {
        return Err(Error::Decoding("empty probability sequence".into()));
    }
    if log_m.iter().any(|r| r.len() != k) || pi0.len() != k {
        return Err(Error::Dimension("probabilities, durations and π0 disagree on K".into()));
    }
    check_next_state(a, k)?;
    let log_dp: Vec<Vec<f64>> = dm.dp.iter().map(|r| r.iter().map(|&v| ln(v)).collect()).collect();
    let log_a: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|&v| ln(v)).collect()).collect();
    let log_pi: Vec<f64> = pi0.iter().map(|&v| ln(v)).collect();

    // index e is the segment end time (1-based); entry e = 0 is the virtual start
    let horizon = n + d_max - 1;
    let mut delta = vec![vec![f64::NEG_INFINITY; k]; horizon + 1];
    let mut dur = vec![vec![0usize; k]; horizon + 1];
    let mut prev_state = vec![vec![usize::MAX; k]; horizon + 1];
    // entry[u][j]: best score of a path ending at u that may next enter j
    let mut entry = vec![vec![f64::NEG_INFINITY; k]; horizon + 1];
    let mut entry_from = vec![vec![usize::MAX; k]; horizon + 1];
    entry[0].clone_from(&log_pi);

    for e in 1..=horizon {
        for j in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut best_d = 0;
            let mut acc = 0.0;
            for d in 1..=d_max.min(e) {
                let s = e - d + 1; // segment start, 1-based
                if s <= n {
                    acc += log_m[s - 1][j];
                }
                if s > n {
                    continue;
                }
                let cand = entry[e - d][j] + log_dp[j][d - 1] + acc;
                if cand > best {
                    best = cand;
                    best_d = d;
                }
            }
            delta[e][j] = best;
            dur[e][j] = best_d;
            if best_d > 0 {
                prev_state[e][j] = entry_from[e - best_d][j];
            }
        }
        if e < n {
            for j in 0..k {
                let mut best = f64::NEG_INFINITY;
                let mut from = usize::MAX;
                for i in 0..k {
                    if i == j {
                        continue;
                    }
                    let cand = delta[e][i] + log_a[i][j];
                    if cand > best {
                        best = cand;
                        from = i;
                    }
                }
                entry[e][j] = best;
                entry_from[e][j] = from;
            }
        }
    }

    let mut best = f64::NEG_INFINITY;
    let mut end = (0, 0);
    for (e, row) in delta.iter().enumerate().take(horizon + 1).skip(n) {
        for (j, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                end = (e, j);
            }
        }
    }
    if best == f64::NEG_INFINITY || best.is_nan() {
        return Err(Error::Decoding("no segmentation has nonzero probability".into()));
    }

    let mut states = vec![0usize; n];
    let (mut e, mut j) = end;
    loop {
        let d = dur[e][j];
        let start = e - d + 1;
        for slot in states.iter_mut().take(e.min(n)).skip(start - 1) {
            *slot = j;
        }
        if start == 1 {
            break;
        }
        let i = prev_state[e][j];
        e = start - 1;
        j = i;
    }
    Ok(DecodedPath { states, log_score: best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_io::Interval;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive search over cyclic segmentations with durations in 1..=d_max;
    /// the final segment is censored at the end of the sequence.
    pub(crate) fn brute_force(log_m: &[Vec<f64>], dp: &[Vec<f64>], pi0: &[f64]) -> (f64, Vec<Vec<usize>>) {
        struct Search<'a> {
            log_m: &'a [Vec<f64>],
            dp: &'a [Vec<f64>],
            best: f64,
            argbest: Vec<Vec<usize>>,
        }
        impl Search<'_> {
            fn visit(&mut self, t: usize, j: usize, score: f64, path: &mut Vec<usize>) {
                let n = self.log_m.len();
                let k = self.dp.len();
                let d_max = self.dp[0].len();
                for d in 1..=d_max.min(n - t) {
                    let obs: f64 = (t..t + d).map(|s| self.log_m[s][j]).sum();
                    path.extend(std::iter::repeat(j).take(d));
                    if t + d == n {
                        // censored: any duration ≥ d may explain the final segment
                        let tail = self.dp[j][d - 1..].iter().map(|v| v.ln()).fold(f64::NEG_INFINITY, f64::max);
                        let s = score + obs + tail;
                        if s > self.best + 1e-12 {
                            self.best = s;
                            self.argbest = vec![path.clone()];
                        } else if (s - self.best).abs() <= 1e-12 {
                            self.argbest.push(path.clone());
                        }
                    } else {
                        let s = score + obs + self.dp[j][d - 1].ln();
                        self.visit(t + d, (j + 1) % k, s, path);
                    }
                    path.truncate(t);
                }
            }
        }
        let mut search = Search {
            log_m,
            dp,
            best: f64::NEG_INFINITY,
            argbest: Vec::new(),
        };
        for (j, p) in pi0.iter().enumerate() {
            search.visit(0, j, p.ln(), &mut Vec::new());
        }
        (search.best, search.argbest)
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, k: usize, d_max: usize) -> (Vec<Vec<f64>>, DurationModel, Vec<f64>) {
        let log_m = (0..n)
            .map(|_| {
                let row: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = row.iter().sum();
                row.iter().map(|v| (v / s).ln()).collect()
            })
            .collect();
        let dp = (0..k)
            .map(|_| {
                let row: Vec<f64> = (0..d_max).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = row.iter().sum();
                row.iter().map(|v| v / s).collect()
            })
            .collect();
        let pi: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
        let s: f64 = pi.iter().sum();
        (log_m, DurationModel::new(dp).unwrap(), pi.iter().map(|v| v / s).collect())
    }

    fn segments(states: &[usize]) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for &s in states {
            match out.last_mut() {
                Some((st, len)) if *st == s => *len += 1,
                _ => out.push((s, 1)),
            }
        }
        out
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..40 {
            let n = rng.gen_range(1..=12);
            let d_max = rng.gen_range(1..=4);
            let (log_m, dm, pi) = random_instance(&mut rng, n, 4, d_max);
            let (score, paths) = brute_force(&log_m, &dm.dp, &pi);
            let got = skf_viterbi(&log_m, &dm, &cyclic_next_state(4), &pi).unwrap();
            assert!((got.log_score - score).abs() < 1e-9, "{} vs {score}", got.log_score);
            if paths.len() == 1 {
                assert_eq!(got.states, paths[0]);
            }
        }
    }

    #[test]
    fn forced_duration() {
        let dm = DurationModel::new(vec![vec![0.0, 0.0, 1.0, 0.0]; 4]).unwrap();
        let log_m = vec![vec![0.25_f64.ln(); 4]; 12];
        let path = skf_viterbi(&log_m, &dm, &cyclic_next_state(4), &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(segments(&path.states), vec![(0, 3), (1, 3), (2, 3), (3, 3)]);
    }

    #[test]
    fn consistent_evidence_recovered() {
        let truth: Vec<usize> = [(2, 3), (3, 4), (0, 2), (1, 4), (2, 1)]
            .iter()
            .flat_map(|&(s, d)| std::iter::repeat(s).take(d))
            .collect();
        let log_m: Vec<Vec<f64>> = truth
            .iter()
            .map(|&s| (0..4).map(|j| if j == s { 0.0 } else { f64::NEG_INFINITY }).collect())
            .collect();
        let dm = DurationModel::new(vec![vec![0.2; 5]; 4]).unwrap();
        let path = skf_viterbi(&log_m, &dm, &cyclic_next_state(4), &[0.25; 4]).unwrap();
        assert_eq!(path.states, truth);
    }

    #[test]
    fn rejects_self_transition_and_impossible_input() {
        let dm = DurationModel::new(vec![vec![1.0]; 2]).unwrap();
        let log_m = vec![vec![0.0, 0.0]; 3];
        let bad = vec![vec![0.5, 0.5], vec![1.0, 0.0]];
        assert!(skf_viterbi(&log_m, &dm, &bad, &[0.5, 0.5]).is_err());
        let dead = vec![vec![f64::NEG_INFINITY; 2]; 3];
        assert!(matches!(
            skf_viterbi(&dead, &dm, &cyclic_next_state(2), &[0.5, 0.5]),
            Err(Error::Decoding(_))
        ));
    }

    fn pulse_train(rate_hz: f64, fs: f64, secs: f64) -> Vec<f64> {
        let n = (fs * secs) as usize;
        let period = fs / rate_hz;
        (0..n)
            .map(|i| {
                let phase = (i as f64) % period;
                if phase < 0.04 * fs {
                    (2.0 * std::f64::consts::PI * 60.0 * i as f64 / fs).sin()
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn heart_rate_of_pulse_trains() {
        let est = estimate_heart_rate(&pulse_train(1.0, 1000.0, 10.0), 1000.0).unwrap();
        assert!((est.hr - 60.0).abs() <= 2.0, "{est:?}");
        assert!(!est.low_confidence);
        let est = estimate_heart_rate(&pulse_train(1.5, 1000.0, 10.0), 1000.0).unwrap();
        assert!((est.hr - 90.0).abs() <= 3.0, "{est:?}");
        assert!(est.t_sys >= 0.1 && est.t_sys <= 60.0 / est.hr);
    }

    #[test]
    fn heart_rate_of_noise_is_untrusted() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..10_000).map(|_| n.sample(&mut rng)).collect();
        match estimate_heart_rate(&x, 1000.0) {
            Ok(est) => assert!(est.low_confidence, "{est:?}"),
            Err(e) => assert!(matches!(e, Error::Estimation(_))),
        }
    }

    #[test]
    fn heart_rate_needs_five_seconds() {
        assert!(estimate_heart_rate(&vec![0.0; 4000], 1000.0).is_err());
    }

    #[test]
    fn d_max_from_rate() {
        let hr = HeartRateEstimate {
            hr: 60.0,
            t_sys: 0.3,
            confidence: 1.0,
            low_confidence: false,
        };
        let stats = DurationStats {
            mean: vec![0.12, 0.2, 0.1, 0.5],
            sd: vec![0.02, 0.03, 0.02, 0.05],
        };
        let dm = build_duration_model(&hr, &stats, 1000.0).unwrap();
        assert_eq!(dm.d_max(), 1000);
        for row in &dm.dp {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // systole mean = 300 - 120
        let mode = dm.dp[1].iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 + 1;
        assert_eq!(mode, 180);
    }

    #[test]
    fn degenerate_spread_is_one_hot() {
        let hr = HeartRateEstimate {
            hr: 60.0 * 1000.0 / 40.0,
            t_sys: 0.02,
            confidence: 1.0,
            low_confidence: false,
        };
        let stats = DurationStats {
            mean: vec![0.01; 4],
            sd: vec![0.0; 4],
        };
        let dm = build_duration_model(&hr, &stats, 1000.0).unwrap();
        assert_eq!(dm.d_max(), 40);
        for row in &dm.dp {
            assert_eq!(row[9], 1.0);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn infeasible_systole() {
        let hr = HeartRateEstimate {
            hr: 60.0,
            t_sys: 0.1,
            confidence: 1.0,
            low_confidence: false,
        };
        let stats = DurationStats {
            mean: vec![0.12, 0.2, 0.1, 0.5],
            sd: vec![0.02; 4],
        };
        assert!(matches!(
            build_duration_model(&hr, &stats, 1000.0),
            Err(Error::InfeasibleDuration(_))
        ));
    }

    #[test]
    fn stats_from_tracks() {
        let ivs = [(0, 2), (1, 3), (2, 2), (3, 5), (0, 4), (1, 3), (2, 2), (3, 5)];
        let mut start = 0;
        let intervals = ivs
            .iter()
            .map(|&(state, d)| {
                let iv = Interval { start, end: start + d, state };
                start += d;
                iv
            })
            .collect();
        let t = AnnotationTrack::new(intervals).unwrap();
        let s = DurationStats::from_tracks([(&t, 10)]).unwrap();
        assert!((s.mean[0] - 0.3).abs() < 1e-12);
        assert!((s.sd[0] - 0.2 / 2.0_f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.sd[1], 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_instance() -> impl Strategy<Value = (Vec<Vec<f64>>, DurationModel, Vec<f64>)> {
            (1usize..=30, 1usize..=6, any::<u64>()).prop_map(|(n, d_max, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                random_instance(&mut rng, n, 4, d_max)
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn segments_are_cyclic_and_bounded((log_m, dm, pi) in arb_instance()) {
                let path = skf_viterbi(&log_m, &dm, &cyclic_next_state(4), &pi).unwrap();
                prop_assert_eq!(path.states.len(), log_m.len());
                let segs = segments(&path.states);
                for w in segs.windows(2) {
                    prop_assert_eq!(w[1].0, (w[0].0 + 1) % 4);
                }
                for &(_, d) in &segs {
                    prop_assert!(d >= 1 && d <= dm.d_max());
                }
            }

            #[test]
            fn per_time_scaling_keeps_path((log_m, dm, pi) in arb_instance(), shift in proptest::collection::vec(-5.0f64..5.0, 30)) {
                let a = skf_viterbi(&log_m, &dm, &cyclic_next_state(4), &pi).unwrap();
                let scaled: Vec<Vec<f64>> = log_m.iter().zip(&shift).map(|(r, c)| r.iter().map(|v| v + c).collect()).collect();
                let b = skf_viterbi(&scaled, &dm, &cyclic_next_state(4), &pi).unwrap();
                prop_assert_eq!(a.states, b.states);
            }

            #[test]
            fn duration_rows_normalised(mean in 0.5f64..200.0, sd in 0.0f64..50.0, d_max in 1usize..300) {
                let row = discretized_gaussian(mean, sd, d_max);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
