//! Markov-switching AR parameters, their companion-form state-space view and
//! the supervised estimators used to initialise them from annotated data.
//!
//! Each regime `j` follows `x_t = Σ_p phi[j][p-1]·x_{t-p} + η_t` with
//! `η_t ~ N(0, q[j])`, observed as `y_t = x_t + ε_t`, `ε_t ~ N(0, r[j])`.
//! The regime itself is a Markov chain with transition matrix `z`, restricted
//! to a cyclic left-to-right topology: from regime `i` the chain may stay or
//! move to `(i + 1) mod K`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::{cyclic_successor, AnnotationTrack, HEART_STATES};

/// Version tag written into model files.
pub const MODEL_SCHEMA_VERSION: u32 = 1;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MsarParams {
    /// `K × P` AR coefficients; `phi[j][p]` multiplies `x_{t-p-1}`.
    pub phi: Vec<Vec<f64>>,
    /// State-noise variance per regime.
    pub q: Vec<f64>,
    /// Observation-noise variance per regime.
    pub r: Vec<f64>,
    /// `K × K` regime transition matrix, `z[i][j] = P(S_t = j | S_{t-1} = i)`.
    pub z: Vec<Vec<f64>>,
}

/// Whether `i → j` is allowed under the cyclic left-to-right topology.
pub fn transition_allowed(i: usize, j: usize, k: usize) -> bool {
    j == i || j == cyclic_successor(i, k)
}

impl MsarParams {
    pub fn new(phi: Vec<Vec<f64>>, q: Vec<f64>, r: Vec<f64>, z: Vec<Vec<f64>>) -> Result<Self> {
        let params = Self { phi, q, r, z };
        params.validate()?;
        Ok(params)
    }

    pub fn k(&self) -> usize {
        self.phi.len()
    }

    /// AR order `P`.
    pub fn order(&self) -> usize {
        self.phi.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let p = self.order();
        if k == 0 || p == 0 {
            return Err(Error::Dimension("need at least one regime and AR order ≥ 1".into()));
        }
        if self.phi.iter().any(|row| row.len() != p) {
            return Err(Error::Dimension("phi rows differ in length".into()));
        }
        if self.q.len() != k || self.r.len() != k || self.z.len() != k || self.z.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension(format!("q, R and Z must all have K = {k} regimes")));
        }
        if self.phi.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation(None, "non-finite AR coefficient"));
        }
        if let Some(j) = self.q.iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::validation(None, format!("q[{j}] must be finite and ≥ 0")));
        }
        if let Some(j) = self.r.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::validation(None, format!("R[{j}] must be finite and > 0")));
        }
        check_transition_matrix(&self.z)
    }

    /// Companion-form matrices of the switching linear-Gaussian model.
    pub fn to_state_space(&self) -> StateSpaceView {
        let p = self.order();
        let a = self
            .phi
            .iter()
            .map(|row| {
                let mut m = DMatrix::zeros(p, p);
                for (c, &v) in row.iter().enumerate() {
                    m[(0, c)] = v;
                }
                for i in 1..p {
                    m[(i, i - 1)] = 1.0;
                }
                m
            })
            .collect();
        let mut c = DMatrix::zeros(1, p);
        c[(0, 0)] = 1.0;
        let q = self
            .q
            .iter()
            .map(|&v| {
                let mut m = DMatrix::zeros(p, p);
                m[(0, 0)] = v;
                m
            })
            .collect();
        StateSpaceView {
            a,
            c,
            q,
            r: self.r.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = MsarFile {
            schema_version: MODEL_SCHEMA_VERSION,
            k: self.k(),
            p: self.order(),
            phi: self.phi.clone(),
            q: self.q.clone(),
            r: self.r.clone(),
            z: self.z.clone(),
        };
        crate::json::to_string(&file).map_err(|e| Error::format("model", e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MsarFile = serde_json::from_str(text).map_err(|e| Error::format("model", e.to_string()))?;
        if file.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::format(
                "schema_version",
                format!("unsupported model schema {}", file.schema_version),
            ));
        }
        let params = Self::new(file.phi, file.q, file.r, file.z)?;
        if params.k() != file.k || params.order() != file.p {
            return Err(Error::format("K/P", "declared sizes disagree with arrays"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Rows stochastic and zero outside the cyclic mask.
pub fn check_transition_matrix(z: &[Vec<f64>]) -> Result<()> {
    let k = z.len();
    for (i, row) in z.iter().enumerate() {
        if row.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::validation(None, format!("Z row {} has a negative entry", i + 1)));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::validation(None, format!("Z row {} sums to {s}", i + 1)));
        }
        for (j, &v) in row.iter().enumerate() {
            if v != 0.0 && !transition_allowed(i, j, k) {
                return Err(Error::validation(
                    None,
                    format!("Z[{}][{}] = {v} violates the left-to-right topology", i + 1, j + 1),
                ));
            }
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct MsarFile {
    schema_version: u32,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "P")]
    p: usize,
    phi: Vec<Vec<f64>>,
    q: Vec<f64>,
    #[serde(rename = "R")]
    r: Vec<f64>,
    #[serde(rename = "Z")]
    z: Vec<Vec<f64>>,
}

/// `X_t = A[S_t]·X_{t-1} + w_t`, `y_t = C·X_t + ε_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceView {
    pub a: Vec<DMatrix<f64>>,
    pub c: DMatrix<f64>,
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<f64>,
}

impl StateSpaceView {
    pub fn k(&self) -> usize {
        self.a.len()
    }

    pub fn dim(&self) -> usize {
        self.c.ncols()
    }
}

/// Samples of a recording grouped by regime, concatenated in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredSeries {
    pub series: Vec<Vec<f64>>,
    /// Offsets into each series where a new contiguous run begins.
    pub starts: Vec<Vec<usize>>,
}

impl ClusteredSeries {
    pub fn lengths(&self) -> Vec<usize> {
        self.series.iter().map(Vec::len).collect()
    }

    /// Contiguous runs of regime `j`, in time order.
    pub fn pieces(&self, j: usize) -> Vec<&[f64]> {
        let s = &self.series[j];
        let starts = &self.starts[j];
        starts
            .iter()
            .enumerate()
            .map(|(i, &a)| &s[a..starts.get(i + 1).copied().unwrap_or(s.len())])
            .collect()
    }
}

/// Group the annotated span of `signal` by reference regime.
pub fn dynamic_cluster(signal: &[f64], track: &AnnotationTrack) -> Result<ClusteredSeries> {
    if track.end() > signal.len() {
        return Err(Error::validation(
            None,
            format!("annotation ends at sample {} beyond signal length {}", track.end(), signal.len()),
        ));
    }
    Ok(cluster_by_states(&signal[track.start()..track.end()], &track.states(), HEART_STATES))
}

/// Group samples by an arbitrary per-sample label sequence (used for the
/// refinement pass on decoded labels).
pub fn cluster_by_states(signal: &[f64], states: &[usize], k: usize) -> ClusteredSeries {
    let mut series = vec![Vec::new(); k];
    let mut starts = vec![Vec::new(); k];
    let mut prev = None;
    for (&y, &s) in signal.iter().zip(states) {
        if prev != Some(s) {
            starts[s].push(series[s].len());
        }
        series[s].push(y);
        prev = Some(s);
    }
    ClusteredSeries { series, starts }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArFit {
    pub phi: Vec<f64>,
    /// Residual variance, normalised by the series length.
    pub q: f64,
}

/// Accumulate `XᵀX` and `Xᵀy` for the lagged regression of order `p`.
fn normal_equations(series: &[f64], p: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    add_normal_equations(series, p, &mut gram, &mut rhs);
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    (gram, rhs)
}

/// Upper-triangle accumulation shared by the single and piecewise fits.
fn add_normal_equations(series: &[f64], p: usize, gram: &mut DMatrix<f64>, rhs: &mut DVector<f64>) {
    for t in p..series.len() {
        let y = series[t];
        for a in 0..p {
            let xa = series[t - 1 - a];
            rhs[a] += xa * y;
            for b in a..p {
                gram[(a, b)] += xa * series[t - 1 - b];
            }
        }
    }
}

const RANK_TOL: f64 = 1e-12;

/// Solve `gram·phi = rhs`. With `strict` a near-singular Gram matrix is an
/// error; otherwise the minimum-norm solution is returned.
fn solve_normal(gram: DMatrix<f64>, rhs: &DVector<f64>, strict: bool) -> Result<DVector<f64>> {
    let eig = SymmetricEigen::new(gram);
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    let cut = RANK_TOL * max;
    if strict && (max == 0.0 || min <= cut) {
        return Err(Error::RankDeficient(format!(
            "normal-equation eigenvalues span [{min:e}, {max:e}]"
        )));
    }
    let proj = eig.eigenvectors.transpose() * rhs;
    let scaled = DVector::from_iterator(
        proj.len(),
        proj.iter()
            .zip(eig.eigenvalues.iter())
            .map(|(&b, &l)| if l > cut && l > 0.0 { b / l } else { 0.0 }),
    );
    Ok(&eig.eigenvectors * scaled)
}

fn residual_sum_squares(series: &[f64], phi: &[f64]) -> f64 {
    let p = phi.len();
    (p..series.len())
        .map(|t| {
            let pred: f64 = phi.iter().enumerate().map(|(a, c)| c * series[t - 1 - a]).sum();
            (series[t] - pred).powi(2)
        })
        .sum()
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Least-squares AR(`p`) fit; `q = (1/T)·Σ residual²` over the series length.
pub fn fit_ar_least_squares(series: &[f64], p: usize) -> Result<ArFit> {
    if p == 0 {
        return Err(Error::Config("AR order must be at least 1".into()));
    }
    if series.len() <= 10 * p {
        return Err(Error::TooShort(format!(
            "AR({p}) fit needs more than {} samples, got {}",
            10 * p,
            series.len()
        )));
    }
    if variance(series) == 0.0 {
        return Err(Error::DegenerateSignal("series has zero variance".into()));
    }
    let (gram, rhs) = normal_equations(series, p);
    let phi: Vec<f64> = solve_normal(gram, &rhs, true)?.iter().copied().collect();
    let q = residual_sum_squares(series, &phi) / series.len() as f64;
    Ok(ArFit { phi, q })
}

/// AR(`p`) fit over several contiguous runs of one process. Only rows whose
/// lags fall inside a single run enter the regression; `q` is the residual
/// sum over those rows divided by the total sample count.
pub fn fit_ar_pieces(pieces: &[&[f64]], p: usize) -> Result<ArFit> {
    if p == 0 {
        return Err(Error::Config("AR order must be at least 1".into()));
    }
    let total: usize = pieces.iter().map(|s| s.len()).sum();
    let rows: usize = pieces.iter().map(|s| s.len().saturating_sub(p)).sum();
    if total <= 10 * p || rows < p {
        return Err(Error::TooShort(format!(
            "AR({p}) fit needs more than {} samples in runs longer than {p}, got {total} ({rows} usable rows)",
            10 * p
        )));
    }
    let all: Vec<f64> = pieces.iter().flat_map(|s| s.iter().copied()).collect();
    if variance(&all) == 0.0 {
        return Err(Error::DegenerateSignal("series has zero variance".into()));
    }
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for s in pieces {
        add_normal_equations(s, p, &mut gram, &mut rhs);
    }
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let phi: Vec<f64> = solve_normal(gram, &rhs, true)?.iter().copied().collect();
    let rss: f64 = pieces.iter().map(|s| residual_sum_squares(s, &phi)).sum();
    Ok(ArFit { phi, q: rss / total as f64 })
}

/// Mean residual variance of AR(`p`) fits over half-overlapping windows of
/// `window` samples.
pub fn estimate_obs_noise(signal: &[f64], p: usize, window: usize) -> Result<f64> {
    if window <= 10 * p {
        return Err(Error::Config(format!("window {window} must exceed 10·P = {}", 10 * p)));
    }
    if signal.len() < window {
        return Err(Error::TooShort(format!(
            "signal of {} samples is shorter than one window of {window}",
            signal.len()
        )));
    }
    let hop = (window / 2).max(1);
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + window <= signal.len() {
        let seg = &signal[start..start + window];
        let (gram, rhs) = normal_equations(seg, p);
        let phi: Vec<f64> = solve_normal(gram, &rhs, false)?.iter().copied().collect();
        total += residual_sum_squares(seg, &phi) / (window - p) as f64;
        count += 1;
        start += hop;
    }
    Ok(total / count as f64)
}

/// Count transitions of a per-sample label sequence into `counts`. The final
/// sample contributes one closing transition into its cyclic successor, since
/// the segment in progress at the end of a recording is eventually left.
fn accumulate_transitions(states: &[usize], k: usize, counts: &mut [Vec<f64>]) {
    for w in states.windows(2) {
        counts[w[0]][w[1]] += 1.0;
    }
    if let Some(&last) = states.last() {
        counts[last][cyclic_successor(last, k)] += 1.0;
    }
}

fn counts_to_transition_matrix(mut counts: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let k = counts.len();
    for (i, row) in counts.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            if !transition_allowed(i, j, k) {
                *v = 0.0;
            }
        }
        let s: f64 = row.iter().sum();
        if s == 0.0 {
            return Err(Error::Missing(format!("regime {} never observed", i + 1)));
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(counts)
}

/// Transition frequencies over the per-sample labels of all tracks.
pub fn init_transition_matrix(tracks: &[AnnotationTrack]) -> Result<Vec<Vec<f64>>> {
    let k = HEART_STATES;
    let mut counts = vec![vec![0.0; k]; k];
    for t in tracks {
        accumulate_transitions(&t.states(), k, &mut counts);
    }
    counts_to_transition_matrix(counts)
}

/// Transition frequencies from a decoded label sequence.
pub fn transition_matrix_from_states(states: &[usize], k: usize) -> Result<Vec<Vec<f64>>> {
    let mut counts = vec![vec![0.0; k]; k];
    accumulate_transitions(states, k, &mut counts);
    counts_to_transition_matrix(counts)
}

/// Unweighted elementwise mean of per-recording estimates.
pub fn pool_parameters(per_recording: &[MsarParams]) -> Result<MsarParams> {
    pool_parameters_weighted(per_recording, &vec![1.0; per_recording.len()])
}

/// Weighted elementwise mean (e.g. by annotated duration); Z rows renormalised.
pub fn pool_parameters_weighted(per_recording: &[MsarParams], weights: &[f64]) -> Result<MsarParams> {
    let first = per_recording
        .first()
        .ok_or_else(|| Error::Missing("no parameter sets to pool".into()))?;
    if weights.len() != per_recording.len() {
        return Err(Error::Dimension("one weight per parameter set required".into()));
    }
    let (k, p) = (first.k(), first.order());
    if let Some(bad) = per_recording.iter().find(|m| m.k() != k || m.order() != p) {
        return Err(Error::Dimension(format!(
            "cannot pool K={k}, P={p} with K={}, P={}",
            bad.k(),
            bad.order()
        )));
    }
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Config("pooling weights must be nonnegative with positive sum".into()));
    }
    let mean_vec = |get: &dyn Fn(&MsarParams) -> &Vec<f64>| -> Vec<f64> {
        let mut out = vec![0.0; get(first).len()];
        for (m, w) in per_recording.iter().zip(weights) {
            for (o, v) in out.iter_mut().zip(get(m)) {
                *o += w * v / wsum;
            }
        }
        out
    };
    let phi = (0..k).map(|j| mean_vec(&|m| &m.phi[j])).collect();
    let q = mean_vec(&|m| &m.q);
    let r = mean_vec(&|m| &m.r);
    let z = (0..k)
        .map(|i| {
            let row = mean_vec(&|m| &m.z[i]);
            let s: f64 = row.iter().sum();
            row.into_iter().map(|v| v / s).collect()
        })
        .collect();
    MsarParams::new(phi, q, r, z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ObsNoiseMode {
    /// One R for all regimes, from windows over the whole annotated span.
    #[default]
    Shared,
    /// R per regime, from windows over each regime's concatenated samples.
    PerRegime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub order: usize,
    /// Observation-noise window, seconds.
    pub obs_window: f64,
    pub obs_noise: ObsNoiseMode,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            order: 4,
            obs_window: 1.0,
            obs_noise: ObsNoiseMode::Shared,
        }
    }
}

/// Floor applied to estimated observation-noise variances (R must be > 0).
const MIN_OBS_NOISE: f64 = 1e-10;

fn fit_from_clusters(
    clusters: &ClusteredSeries,
    annotated: &[f64],
    z: Vec<Vec<f64>>,
    fs: u32,
    cfg: &FitConfig,
) -> Result<MsarParams> {
    let p = cfg.order;
    let window = ((cfg.obs_window * fs as f64).round() as usize).max(10 * p + 1);
    let mut phi = Vec::new();
    let mut q = Vec::new();
    for j in 0..clusters.series.len() {
        let fit = fit_ar_pieces(&clusters.pieces(j), p).map_err(|e| match e {
            Error::TooShort(m) => Error::TooShort(format!("regime {}: {m}", j + 1)),
            other => other,
        })?;
        phi.push(fit.phi);
        q.push(fit.q);
    }
    let r = match cfg.obs_noise {
        ObsNoiseMode::Shared => {
            let v = estimate_obs_noise(annotated, p, window.min(annotated.len()))?;
            vec![v.max(MIN_OBS_NOISE); clusters.series.len()]
        }
        ObsNoiseMode::PerRegime => clusters
            .series
            .iter()
            .map(|s| estimate_obs_noise(s, p, window.min(s.len())).map(|v| v.max(MIN_OBS_NOISE)))
            .collect::<Result<_>>()?,
    };
    MsarParams::new(phi, q, r, z)
}

/// Supervised estimate from one annotated recording.
pub fn fit_recording(signal: &[f64], fs: u32, track: &AnnotationTrack, cfg: &FitConfig) -> Result<MsarParams> {
    let clusters = dynamic_cluster(signal, track)?;
    let z = init_transition_matrix(std::slice::from_ref(track))?;
    fit_from_clusters(&clusters, &signal[track.start()..track.end()], z, fs, cfg)
}

/// Refit from decoded labels (one refinement pass).
pub fn refit_from_states(signal: &[f64], fs: u32, states: &[usize], k: usize, cfg: &FitConfig) -> Result<MsarParams> {
    let clusters = cluster_by_states(signal, states, k);
    let z = transition_matrix_from_states(states, k)?;
    fit_from_clusters(&clusters, signal, z, fs, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_io::Interval;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn track(lengths: &[usize], cycles: usize) -> AnnotationTrack {
        let mut ivs = Vec::new();
        let mut start = 0;
        for _ in 0..cycles {
            for (s, &len) in lengths.iter().enumerate() {
                ivs.push(Interval {
                    start,
                    end: start + len,
                    state: s,
                });
                start += len;
            }
        }
        AnnotationTrack::new(ivs).unwrap()
    }

    fn simulate_ar(phi: &[f64], q: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, q.sqrt()).unwrap();
        let mut x = vec![0.0; n + 500];
        for t in phi.len()..x.len() {
            x[t] = phi.iter().enumerate().map(|(a, c)| c * x[t - 1 - a]).sum::<f64>() + noise.sample(&mut rng);
        }
        x.split_off(500)
    }

    #[test]
    fn cluster_lengths() {
        let sig = vec![1.0; 900];
        let c = dynamic_cluster(&sig, &track(&[100, 200, 100, 500], 1)).unwrap();
        assert_eq!(c.lengths(), vec![100, 200, 100, 500]);
        let sig = vec![1.0; 1800];
        let c = dynamic_cluster(&sig, &track(&[100, 200, 100, 500], 2)).unwrap();
        assert_eq!(c.lengths(), vec![200, 400, 200, 1000]);
        assert!(dynamic_cluster(&vec![0.0; 800], &track(&[100, 200, 100, 500], 1)).is_err());
    }

    #[test]
    fn cluster_preserves_time_order() {
        let sig: Vec<f64> = (0..18).map(f64::from).collect();
        let c = dynamic_cluster(&sig, &track(&[2, 3, 1, 3], 2)).unwrap();
        assert_eq!(c.series[0], vec![0.0, 1.0, 9.0, 10.0]);
        assert_eq!(c.series[3], vec![6.0, 7.0, 8.0, 15.0, 16.0, 17.0]);
        assert_eq!(c.starts[3], vec![0, 3]);
        assert_eq!(c.pieces(0), vec![&[0.0, 1.0][..], &[9.0, 10.0][..]]);
    }

    #[test]
    fn piecewise_fit_single_run_matches_plain() {
        let y = simulate_ar(&[0.5, -0.3, 0.2, -0.1], 0.01, 2000, 5);
        assert_eq!(fit_ar_pieces(&[&y], 4).unwrap(), fit_ar_least_squares(&y, 4).unwrap());
    }

    #[test]
    fn piecewise_fit_ignores_junctions() {
        // Growing oscillations restarted from rest: joined end to end, each
        // junction jumps from large amplitude back to near zero.
        let truth = [1.88, -0.94];
        let runs: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + i);
                let noise = Normal::new(0.0, 0.1).unwrap();
                let mut x = vec![0.0, 1.0];
                for t in 2..120 {
                    x.push(truth[0] * x[t - 1] + truth[1] * x[t - 2] + noise.sample(&mut rng));
                }
                x
            })
            .collect();
        let pieces: Vec<&[f64]> = runs.iter().map(Vec::as_slice).collect();
        let fit = fit_ar_pieces(&pieces, 2).unwrap();
        for (a, b) in fit.phi.iter().zip(truth) {
            assert!((a - b).abs() < 0.02, "{:?}", fit.phi);
        }
        let joined: Vec<f64> = runs.concat();
        let naive = fit_ar_least_squares(&joined, 2).unwrap();
        assert!(naive.q > fit.q);
        assert!(matches!(fit_ar_pieces(&[&[1.0; 4][..]; 20], 4), Err(Error::TooShort(_))));
    }

    #[test]
    fn ar_fit_exact_recursion() {
        let y: Vec<f64> = (0..40).map(|t| 0.5_f64.powi(t)).collect();
        let fit = fit_ar_least_squares(&y, 1).unwrap();
        assert!((fit.phi[0] - 0.5).abs() < 1e-9);
        assert!(fit.q <= 1e-12);
    }

    #[test]
    fn ar_fit_white_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = Normal::new(0.0, 1.0).unwrap();
        let y: Vec<f64> = (0..10_000).map(|_| n.sample(&mut rng)).collect();
        let fit = fit_ar_least_squares(&y, 4).unwrap();
        let norm = fit.phi.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 0.1, "{:?}", fit.phi);
        let var = variance(&y);
        assert!((fit.q - var).abs() < 0.1 * var);
    }

    #[test]
    fn ar_fit_recovers_ar4() {
        let truth = [0.5, -0.3, 0.2, -0.1];
        let y = simulate_ar(&truth, 0.01, 10_000, 11);
        let fit = fit_ar_least_squares(&y, 4).unwrap();
        for (a, b) in fit.phi.iter().zip(truth) {
            assert!((a - b).abs() < 0.05, "{:?}", fit.phi);
        }
        assert!((fit.q - 0.01).abs() < 0.001);
    }

    #[test]
    fn ar_fit_errors() {
        assert!(matches!(fit_ar_least_squares(&[1.0; 40], 4), Err(Error::TooShort(_))));
        assert!(matches!(fit_ar_least_squares(&[1.0; 41], 4), Err(Error::DegenerateSignal(_))));
        // alternating sequence: lags 1 and 3 are collinear
        let alt: Vec<f64> = (0..100).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(matches!(fit_ar_least_squares(&alt, 4), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn obs_noise_noiseless_is_zero() {
        let alt: Vec<f64> = (0..5000).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(estimate_obs_noise(&alt, 4, 1000).unwrap() <= 1e-10);
    }

    #[test]
    fn obs_noise_recovers_additive_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = Normal::new(0.0, 0.2).unwrap();
        let y: Vec<f64> = (0..10_000)
            .map(|t| if t % 2 == 0 { 1.0 } else { -1.0 } + eps.sample(&mut rng))
            .collect();
        let r = estimate_obs_noise(&y, 4, 1000).unwrap();
        assert!((0.02..=0.06).contains(&r), "{r}");

        let unit = Normal::new(0.0, 1.0).unwrap();
        let w: Vec<f64> = (0..10_000).map(|_| unit.sample(&mut rng)).collect();
        let r = estimate_obs_noise(&w, 4, 1000).unwrap();
        assert!((0.9..=1.1).contains(&r), "{r}");
    }

    #[test]
    fn obs_noise_errors() {
        assert!(estimate_obs_noise(&[0.0; 100], 4, 40).is_err());
        assert!(matches!(estimate_obs_noise(&[0.0; 100], 4, 200), Err(Error::TooShort(_))));
    }

    #[test]
    fn transition_counts_with_closing_step() {
        let z = init_transition_matrix(&[track(&[2, 2, 2, 2], 1)]).unwrap();
        for i in 0..4 {
            assert_eq!(z[i][i], 0.5);
            assert_eq!(z[i][(i + 1) % 4], 0.5);
        }
        let z = init_transition_matrix(&[track(&[100, 100, 100, 100], 1)]).unwrap();
        for i in 0..4 {
            assert!((z[i][i] - 0.99).abs() < 1e-15);
        }
    }

    #[test]
    fn transition_missing_regime() {
        let t = AnnotationTrack::new(vec![
            Interval { start: 0, end: 5, state: 0 },
            Interval { start: 5, end: 9, state: 1 },
        ])
        .unwrap();
        assert!(matches!(init_transition_matrix(&[t]), Err(Error::Missing(_))));
    }

    fn params(phi0: f64, p: usize) -> MsarParams {
        let mut phi = vec![vec![0.0; p]; 4];
        for row in phi.iter_mut() {
            row[0] = phi0;
        }
        let z = (0..4)
            .map(|i| (0..4).map(|j| if j == i || j == (i + 1) % 4 { 0.5 } else { 0.0 }).collect())
            .collect();
        MsarParams::new(phi, vec![0.1; 4], vec![0.01; 4], z).unwrap()
    }

    #[test]
    fn pooling() {
        let a = params(0.2, 4);
        assert_eq!(pool_parameters(std::slice::from_ref(&a)).unwrap(), a);
        let pooled = pool_parameters(&[a.clone(), params(0.4, 4)]).unwrap();
        assert!((pooled.phi[2][0] - 0.3).abs() < 1e-15);
        assert!(matches!(pool_parameters(&[a, params(0.4, 6)]), Err(Error::Dimension(_))));
        assert!(pool_parameters(&[]).is_err());
    }

    #[test]
    fn topology_enforced() {
        let mut p = params(0.2, 2);
        p.z[0] = vec![0.5, 0.0, 0.5, 0.0];
        assert!(p.validate().is_err());
    }

    #[test]
    fn companion_form() {
        let mut p = params(0.9, 1);
        p.q = vec![0.3; 4];
        let v = p.to_state_space();
        assert_eq!(v.a[0], DMatrix::from_row_slice(1, 1, &[0.9]));
        assert_eq!(v.q[0], DMatrix::from_row_slice(1, 1, &[0.3]));

        let mut p = params(0.0, 2);
        p.phi[1] = vec![0.7, -0.2];
        let v = p.to_state_space();
        assert_eq!(v.a[1], DMatrix::from_row_slice(2, 2, &[0.7, -0.2, 1.0, 0.0]));
        assert_eq!(v.c, DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
    }

    #[test]
    fn json_round_trip() {
        let mut p = params(0.1, 4);
        p.phi[3][2] = -1.0 / 3.0;
        let text = p.to_json().unwrap();
        assert!(text.contains("\"schema_version\""));
        assert!(text.contains("\"Z\""));
        assert_eq!(MsarParams::from_json(&text).unwrap(), p);
    }

    mod props {
        use super::*;
        use crate::signal_io::Interval;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn companion_recursion_matches_scalar(
                phi in prop::collection::vec(-0.5f64..0.5, 1..7),
                noise in prop::collection::vec(-1.0f64..1.0, 1..200),
            ) {
                let p = phi.len();
                let z = (0..4)
                    .map(|i| (0..4).map(|j| if j == i || j == (i + 1) % 4 { 0.5 } else { 0.0 }).collect())
                    .collect();
                let params = MsarParams::new(vec![phi.clone(); 4], vec![0.1; 4], vec![0.01; 4], z).unwrap();
                let view = params.to_state_space();
                let mut state = DVector::zeros(p);
                let mut scalar = vec![0.0; p];
                for &w in &noise {
                    state = &view.a[2] * state;
                    state[0] += w;
                    let next = phi.iter().zip(scalar.iter().rev()).map(|(c, y)| c * y).sum::<f64>() + w;
                    scalar.remove(0);
                    scalar.push(next);
                    prop_assert!((state[0] - next).abs() <= 1e-12 * (1.0 + next.abs()));
                    prop_assert_eq!((&view.c * &state)[(0, 0)], state[0]);
                }
            }

            #[test]
            fn transition_rows_follow_cyclic_mask(
                tracks in prop::collection::vec((0usize..4, prop::collection::vec(1usize..40, 4..24)), 1..4),
            ) {
                let tracks: Vec<AnnotationTrack> = tracks
                    .iter()
                    .map(|(first, lens)| {
                        let mut at = 0;
                        let ivs = lens
                            .iter()
                            .enumerate()
                            .map(|(i, &len)| {
                                at += len;
                                Interval { start: at - len, end: at, state: (first + i) % 4 }
                            })
                            .collect();
                        AnnotationTrack::new(ivs).unwrap()
                    })
                    .collect();
                let z = init_transition_matrix(&tracks).unwrap();
                for (i, row) in z.iter().enumerate() {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    for (j, &v) in row.iter().enumerate() {
                        if !transition_allowed(i, j, 4) {
                            prop_assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
    }
}
