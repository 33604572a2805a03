//! Left-to-right Gaussian-mixture HMMs over MFCC sequences: segmental
//! k-means initialisation, Baum-Welch re-estimation, Viterbi scoring and the
//! beat/recording decision rules built on them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfcc::{FeatureSequence, MfccExtractor};
use crate::signal_io::{AnnotationTrack, ClassLabel, Recording};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const PROB_TOL: f64 = 1e-12;
const KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmmConfig {
    pub n_states: usize,
    pub n_mix: usize,
    pub max_iter: usize,
    /// Relative log-likelihood improvement below which training stops.
    pub tol: f64,
    pub var_floor: f64,
    pub seed: u64,
}

impl Default for HmmConfig {
    fn default() -> Self {
        Self {
            n_states: 4,
            n_mix: 16,
            max_iter: 20,
            tol: 1e-4,
            var_floor: 1e-6,
            seed: 0,
        }
    }
}

impl HmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_mix == 0 {
            return Err(Error::Config("HMM needs at least one state and one mixture".into()));
        }
        if !(self.var_floor > 0.0) || !(self.tol >= 0.0) {
            return Err(Error::Config("variance floor must be > 0 and tolerance ≥ 0".into()));
        }
        Ok(())
    }
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

impl Gmm {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Per-component `log c_m - ½ Σ log(2π σ²)`.
    fn log_norms(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.vars)
            .map(|(&w, v)| {
                let lw = if w > 0.0 { w.ln() } else { f64::NEG_INFINITY };
                lw - 0.5 * v.iter().map(|s| LN_2PI + s.ln()).sum::<f64>()
            })
            .collect()
    }

    /// Per-component joint log densities `log c_m + log N(o; μ_m, Σ_m)`.
    fn component_log_densities(&self, norms: &[f64], o: &[f64]) -> Vec<f64> {
        self.means
            .iter()
            .zip(&self.vars)
            .zip(norms)
            .map(|((mu, var), &n)| {
                if n == f64::NEG_INFINITY {
                    return n;
                }
                let q: f64 = o.iter().zip(mu).zip(var).map(|((x, m), v)| (x - m).powi(2) / v).sum();
                n - 0.5 * q
            })
            .collect()
    }

    pub fn log_density(&self, o: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_densities(&self.log_norms(), o))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmParams {
    pub pi: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub states: Vec<Gmm>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn ln(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Allowed transition under the left-to-right, no-skip topology.
pub fn lr_allowed(i: usize, j: usize) -> bool {
    j == i || j == i + 1
}

impl HmmParams {
    pub fn n_states(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Gmm::dim)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.n_states();
        if s == 0 || self.a.len() != s || self.states.len() != s || self.a.iter().any(|r| r.len() != s) {
            return Err(Error::Dimension("π, A and emission lists must share the state count".into()));
        }
        let is_dist = |v: &[f64]| v.iter().all(|&x| x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= PROB_TOL;
        if !is_dist(&self.pi) {
            return Err(Error::validation(None, "π is not a probability vector"));
        }
        for (i, row) in self.a.iter().enumerate() {
            if !is_dist(row) {
                return Err(Error::validation(None, format!("A row {} is not a probability vector", i + 1)));
            }
            if row.iter().enumerate().any(|(j, &v)| v != 0.0 && !lr_allowed(i, j)) {
                return Err(Error::validation(None, format!("A row {} breaks the left-to-right topology", i + 1)));
            }
        }
        let d = self.dim();
        for (j, g) in self.states.iter().enumerate() {
            let m = g.weights.len();
            if m == 0 || g.means.len() != m || g.vars.len() != m {
                return Err(Error::Dimension(format!("state {} mixture arrays disagree", j + 1)));
            }
            if g.means.iter().chain(&g.vars).any(|v| v.len() != d) {
                return Err(Error::Dimension(format!("state {} has a component of the wrong dimension", j + 1)));
            }
            if !is_dist(&g.weights) {
                return Err(Error::validation(None, format!("state {} mixture weights do not sum to 1", j + 1)));
            }
            if g.vars.iter().flatten().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::validation(None, format!("state {} has a non-positive variance", j + 1)));
            }
        }
        Ok(())
    }

    /// `b[t][j] = log p(o_t | state j)`.
    pub fn emission_log_probs(&self, seq: &FeatureSequence) -> Vec<Vec<f64>> {
        let norms: Vec<Vec<f64>> = self.states.iter().map(Gmm::log_norms).collect();
        seq.frames
            .iter()
            .map(|o| {
                self.states
                    .iter()
                    .zip(&norms)
                    .map(|(g, n)| log_sum_exp(&g.component_log_densities(n, o)))
                    .collect()
            })
            .collect()
    }

    fn check_sequence(&self, seq: &FeatureSequence) -> Result<()> {
        if seq.dim() != self.dim() {
            return Err(Error::Dimension(format!(
                "features have {} coefficients, model expects {}",
                seq.dim(),
                self.dim()
            )));
        }
        if seq.len() < self.n_states() {
            return Err(Error::Decoding(format!(
                "{} frames cannot traverse {} left-to-right states",
                seq.len(),
                self.n_states()
            )));
        }
        Ok(())
    }

    fn log_a(&self) -> Vec<Vec<f64>> {
        self.a.iter().map(|r| r.iter().map(|&v| ln(v)).collect()).collect()
    }

    /// Forward log variables; paths must end in the last state.
    fn forward(&self, b: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
        let s = self.n_states();
        let la = self.log_a();
        let mut alpha = Vec::with_capacity(b.len());
        alpha.push((0..s).map(|j| ln(self.pi[j]) + b[0][j]).collect::<Vec<f64>>());
        for bt in &b[1..] {
            let prev = alpha.last().unwrap();
            let row = (0..s)
                .map(|j| {
                    let terms: Vec<f64> = (0..s).map(|i| prev[i] + la[i][j]).collect();
                    log_sum_exp(&terms) + bt[j]
                })
                .collect();
            alpha.push(row);
        }
        let ll = alpha.last().unwrap()[s - 1];
        (alpha, ll)
    }

    fn backward(&self, b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let s = self.n_states();
        let la = self.log_a();
        let n = b.len();
        let mut beta = vec![vec![f64::NEG_INFINITY; s]; n];
        beta[n - 1][s - 1] = 0.0;
        for t in (0..n - 1).rev() {
            for i in 0..s {
                let terms: Vec<f64> = (0..s).map(|j| la[i][j] + b[t + 1][j] + beta[t + 1][j]).collect();
                beta[t][i] = log_sum_exp(&terms);
            }
        }
        beta
    }

    /// Total log-likelihood over all valid state paths.
    pub fn forward_loglik(&self, seq: &FeatureSequence) -> Result<f64> {
        self.check_sequence(seq)?;
        Ok(self.forward(&self.emission_log_probs(seq)).1)
    }

    /// Best-path log-likelihood and its state sequence.
    pub fn viterbi(&self, seq: &FeatureSequence) -> Result<(f64, Vec<usize>)> {
        self.check_sequence(seq)?;
        let b = self.emission_log_probs(seq);
        let s = self.n_states();
        let la = self.log_a();
        let n = b.len();
        let mut delta: Vec<f64> = (0..s).map(|j| ln(self.pi[j]) + b[0][j]).collect();
        let mut back = vec![vec![0usize; s]; n];
        for t in 1..n {
            let mut next = vec![f64::NEG_INFINITY; s];
            for j in 0..s {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for i in 0..s {
                    let v = delta[i] + la[i][j];
                    if v > best {
                        best = v;
                        arg = i;
                    }
                }
                next[j] = best + b[t][j];
                back[t][j] = arg;
            }
            delta = next;
        }
        let score = delta[s - 1];
        if !score.is_finite() {
            return Err(Error::Decoding("no valid state path has nonzero probability".into()));
        }
        let mut path = vec![0usize; n];
        path[n - 1] = s - 1;
        for t in (1..n).rev() {
            path[t - 1] = back[t][path[t]];
        }
        Ok((score, path))
    }
}

/// Viterbi log-likelihood and path.
pub fn viterbi_loglik(model: &HmmParams, features: &FeatureSequence) -> Result<(f64, Vec<usize>)> {
    model.viterbi(features)
}

/// Cluster centres by Lloyd iterations from a k-means++ start. Returns fewer
/// than `k` centres when the data has fewer distinct points.
fn kmeans(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut centres: Vec<Vec<f64>> = vec![points[rng.gen_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let mut u = rng.gen::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && u < d {
                pick = i;
                break;
            }
            u -= d;
        }
        // guard against rounding landing on an existing centre
        if d2[pick] == 0.0 {
            pick = d2.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        }
        centres.push(points[pick].to_vec());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, centres.last().unwrap()));
        }
    }
    let nearest = |p: &[f64], cs: &[Vec<f64>]| {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (c, ctr) in cs.iter().enumerate() {
            let d = dist2(p, ctr);
            if d < bd {
                bd = d;
                best = c;
            }
        }
        best
    };
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centres)).collect();
    for _ in 0..KMEANS_MAX_ITER {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; centres.len()];
        let mut counts = vec![0usize; centres.len()];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for (c, (s, &n)) in sums.iter().zip(&counts).enumerate() {
            if n > 0 {
                centres[c] = s.iter().map(|v| v / n as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centres)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    // drop clusters that lost all members
    let mut used: Vec<usize> = assign.clone();
    used.sort_unstable();
    used.dedup();
    if used.len() < centres.len() {
        let remap: BTreeMap<usize, usize> = used.iter().enumerate().map(|(n, &o)| (o, n)).collect();
        centres = used.iter().map(|&o| centres[o].clone()).collect();
        assign = assign.iter().map(|a| remap[a]).collect();
    }
    (centres, assign)
}

/// Uniform state partition, per-state k-means mixtures and block-count
/// transition estimates.
pub fn segmental_kmeans_init(dataset: &[FeatureSequence], cfg: &HmmConfig) -> Result<HmmParams> {
    cfg.validate()?;
    let s = cfg.n_states;
    let first = dataset
        .first()
        .ok_or_else(|| Error::Missing("no training sequences".into()))?;
    let dim = first.dim();
    let mut per_state: Vec<Vec<&[f64]>> = vec![Vec::new(); s];
    let mut stay = vec![0.0; s];
    let mut leave = vec![0.0; s];
    for seq in dataset {
        if seq.dim() != dim {
            return Err(Error::Dimension(format!("sequence {} has dimension {}, expected {dim}", seq.id, seq.dim())));
        }
        let f = seq.len();
        if f < s {
            return Err(Error::validation(None, format!("sequence {} has {f} frames, fewer than {s} states", seq.id)));
        }
        let states: Vec<usize> = (0..f).map(|t| t * s / f).collect();
        for (t, &st) in states.iter().enumerate() {
            per_state[st].push(&seq.frames[t]);
            if t + 1 < f {
                if states[t + 1] == st {
                    stay[st] += 1.0;
                } else {
                    leave[st] += 1.0;
                }
            }
        }
    }
    let mut a = vec![vec![0.0; s]; s];
    for i in 0..s {
        if i == s - 1 {
            a[i][i] = 1.0;
        } else {
            let tot = stay[i] + leave[i];
            a[i][i] = stay[i] / tot;
            a[i][i + 1] = leave[i] / tot;
        }
    }
    let mut states = Vec::with_capacity(s);
    for (j, pts) in per_state.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(j as u64));
        let k = cfg.n_mix.min(pts.len());
        let (centres, assign) = kmeans(pts, k, &mut rng);
        if centres.len() < cfg.n_mix {
            log::warn!(
                "state {}: {} distinct frame clusters available, using {} of {} mixtures",
                j + 1,
                centres.len(),
                centres.len(),
                cfg.n_mix
            );
        }
        let m = centres.len();
        let mut counts = vec![0usize; m];
        let mut vars = vec![vec![0.0; dim]; m];
        for (p, &c) in pts.iter().zip(&assign) {
            counts[c] += 1;
            for ((v, x), mu) in vars[c].iter_mut().zip(p.iter()).zip(&centres[c]) {
                *v += (x - mu).powi(2);
            }
        }
        for (v, &n) in vars.iter_mut().zip(&counts) {
            v.iter_mut().for_each(|x| *x = (*x / n as f64).max(cfg.var_floor));
        }
        let weights = counts.iter().map(|&n| n as f64 / pts.len() as f64).collect();
        states.push(Gmm {
            weights,
            means: centres,
            vars,
        });
    }
    let pi = (0..s).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect();
    let params = HmmParams { pi, a, states };
    params.validate()?;
    Ok(params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Total log-likelihood of the training set before each update and after
    /// the last one.
    pub loglik: Vec<f64>,
    pub converged: bool,
}

struct Accumulator {
    loglik: f64,
    trans: Vec<Vec<f64>>,
    occ_from: Vec<f64>,
    /// Per state and component: occupancy, Σγx, Σγx².
    s0: Vec<Vec<f64>>,
    s1: Vec<Vec<Vec<f64>>>,
    s2: Vec<Vec<Vec<f64>>>,
}

impl Accumulator {
    fn zeros(model: &HmmParams) -> Self {
        let s = model.n_states();
        let d = model.dim();
        let mix: Vec<usize> = model.states.iter().map(|g| g.weights.len()).collect();
        Self {
            loglik: 0.0,
            trans: vec![vec![0.0; s]; s],
            occ_from: vec![0.0; s],
            s0: mix.iter().map(|&m| vec![0.0; m]).collect(),
            s1: mix.iter().map(|&m| vec![vec![0.0; d]; m]).collect(),
            s2: mix.iter().map(|&m| vec![vec![0.0; d]; m]).collect(),
        }
    }

    fn add(&mut self, o: &Accumulator) {
        self.loglik += o.loglik;
        let add_vec = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        for (a, b) in self.trans.iter_mut().zip(&o.trans) {
            add_vec(a, b);
        }
        add_vec(&mut self.occ_from, &o.occ_from);
        for (a, b) in self.s0.iter_mut().zip(&o.s0) {
            add_vec(a, b);
        }
        for (sa, sb) in self.s1.iter_mut().zip(&o.s1).chain(self.s2.iter_mut().zip(&o.s2)) {
            for (a, b) in sa.iter_mut().zip(sb) {
                add_vec(a, b);
            }
        }
    }
}

fn e_step(model: &HmmParams, seq: &FeatureSequence) -> Accumulator {
    let mut acc = Accumulator::zeros(model);
    let s = model.n_states();
    let norms: Vec<Vec<f64>> = model.states.iter().map(Gmm::log_norms).collect();
    let comp: Vec<Vec<Vec<f64>>> = seq
        .frames
        .iter()
        .map(|o| model.states.iter().zip(&norms).map(|(g, n)| g.component_log_densities(n, o)).collect())
        .collect();
    let b: Vec<Vec<f64>> = comp.iter().map(|r| r.iter().map(|c| log_sum_exp(c)).collect()).collect();
    let (alpha, ll) = model.forward(&b);
    acc.loglik = ll;
    if !ll.is_finite() {
        return acc;
    }
    let beta = model.backward(&b);
    let la = model.log_a();
    let n = b.len();
    for t in 0..n {
        for j in 0..s {
            let g = (alpha[t][j] + beta[t][j] - ll).exp();
            if g == 0.0 {
                continue;
            }
            if t + 1 < n {
                acc.occ_from[j] += g;
                for k in 0..s {
                    if la[j][k] == f64::NEG_INFINITY {
                        continue;
                    }
                    acc.trans[j][k] += (alpha[t][j] + la[j][k] + b[t + 1][k] + beta[t + 1][k] - ll).exp();
                }
            }
            for (m, &lc) in comp[t][j].iter().enumerate() {
                let gm = g * (lc - b[t][j]).exp();
                if gm == 0.0 {
                    continue;
                }
                acc.s0[j][m] += gm;
                for (d, &x) in seq.frames[t].iter().enumerate() {
                    acc.s1[j][m][d] += gm * x;
                    acc.s2[j][m][d] += gm * x * x;
                }
            }
        }
    }
    acc
}

fn m_step(model: &HmmParams, acc: &Accumulator, var_floor: f64) -> HmmParams {
    let s = model.n_states();
    let mut a = model.a.clone();
    for i in 0..s {
        if acc.occ_from[i] > 0.0 {
            let row: Vec<f64> = (0..s).map(|j| if lr_allowed(i, j) { acc.trans[i][j] } else { 0.0 }).collect();
            let tot: f64 = row.iter().sum();
            if tot > 0.0 {
                a[i] = row.iter().map(|v| v / tot).collect();
            }
        }
    }
    let states = model
        .states
        .iter()
        .enumerate()
        .map(|(j, g)| {
            let occ: f64 = acc.s0[j].iter().sum();
            if !(occ > 0.0) {
                return g.clone();
            }
            let mut out = g.clone();
            for m in 0..g.weights.len() {
                let n = acc.s0[j][m];
                out.weights[m] = n / occ;
                // components with no responsibility keep their old shape
                if n > 0.0 {
                    for d in 0..g.dim() {
                        let mu = acc.s1[j][m][d] / n;
                        out.means[m][d] = mu;
                        out.vars[m][d] = (acc.s2[j][m][d] / n - mu * mu).max(var_floor);
                    }
                }
            }
            let tot: f64 = out.weights.iter().sum();
            out.weights.iter_mut().for_each(|w| *w /= tot);
            out
        })
        .collect();
    HmmParams {
        pi: model.pi.clone(),
        a,
        states,
    }
}

fn total_stats(model: &HmmParams, dataset: &[FeatureSequence]) -> Accumulator {
    let parts: Vec<Accumulator> = dataset.par_iter().map(|seq| e_step(model, seq)).collect();
    let mut acc = Accumulator::zeros(model);
    for p in &parts {
        acc.add(p);
    }
    acc
}

/// Total log-likelihood of a dataset under `model`.
pub fn dataset_loglik(model: &HmmParams, dataset: &[FeatureSequence]) -> Result<f64> {
    let parts: Vec<f64> = dataset
        .par_iter()
        .map(|s| model.forward_loglik(s))
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum())
}

/// EM re-estimation of transitions and mixtures.
pub fn baum_welch_train(
    init: &HmmParams,
    dataset: &[FeatureSequence],
    max_iter: usize,
    tol: f64,
    var_floor: f64,
) -> Result<(HmmParams, TrainReport)> {
    init.validate()?;
    for seq in dataset {
        init.check_sequence(seq)?;
    }
    let mut model = init.clone();
    let mut history = Vec::new();
    let mut converged = false;
    if max_iter == 0 {
        return Ok((model, TrainReport { loglik: history, converged }));
    }
    let mut acc = total_stats(&model, dataset);
    for iter in 0..max_iter {
        if !acc.loglik.is_finite() {
            return Err(Error::Divergence {
                iteration: iter,
                message: format!("training log-likelihood is {}", acc.loglik),
            });
        }
        history.push(acc.loglik);
        log::debug!("baum-welch iteration {iter}: log-likelihood {:.6}", acc.loglik);
        let next = m_step(&model, &acc, var_floor);
        let next_acc = total_stats(&next, dataset);
        if next_acc.loglik.is_nan() {
            return Err(Error::Divergence {
                iteration: iter + 1,
                message: "training log-likelihood is NaN".into(),
            });
        }
        let prev = acc.loglik;
        model = next;
        acc = next_acc;
        if (acc.loglik - prev) / prev.abs().max(1.0) < tol {
            converged = true;
            break;
        }
    }
    history.push(acc.loglik);
    Ok((model, TrainReport { loglik: history, converged }))
}

/// Segmental k-means followed by Baum-Welch.
pub fn train_hmm(dataset: &[FeatureSequence], cfg: &HmmConfig) -> Result<(HmmParams, TrainReport)> {
    let init = segmental_kmeans_init(dataset, cfg)?;
    baum_welch_train(&init, dataset, cfg.max_iter, cfg.tol, cfg.var_floor)
}

/// Per-class models sharing one feature configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBank {
    pub feature_fingerprint: String,
    pub models: BTreeMap<ClassLabel, HmmParams>,
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    schema_version: u32,
    feature_config: String,
    models: BTreeMap<String, HmmParams>,
}

pub const BANK_SCHEMA_VERSION: u32 = 1;

impl ClassifierBank {
    pub fn new(feature_fingerprint: impl Into<String>, models: BTreeMap<ClassLabel, HmmParams>) -> Result<Self> {
        let dims: Vec<usize> = models.values().map(HmmParams::dim).collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Dimension("bank models differ in feature dimension".into()));
        }
        for m in models.values() {
            m.validate()?;
        }
        Ok(Self {
            feature_fingerprint: feature_fingerprint.into(),
            models,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = BankFile {
            schema_version: BANK_SCHEMA_VERSION,
            feature_config: self.feature_fingerprint.clone(),
            models: self.models.iter().map(|(k, v)| (k.as_str().to_string(), v.clone())).collect(),
        };
        crate::json::to_string(&file).map_err(|e| Error::format("classifier", e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BankFile = serde_json::from_str(text).map_err(|e| Error::format("classifier", e.to_string()))?;
        if file.schema_version != BANK_SCHEMA_VERSION {
            return Err(Error::format("schema_version", format!("unsupported classifier schema {}", file.schema_version)));
        }
        let models = file
            .models
            .into_iter()
            .map(|(k, v)| Ok((k.parse::<ClassLabel>()?, v)))
            .collect::<Result<_>>()?;
        Self::new(file.feature_config, models)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Preference order used to break exact ties.
pub const TIE_ORDER: [ClassLabel; 3] = [ClassLabel::Abnormal, ClassLabel::XFactor, ClassLabel::Normal];

#[derive(Debug, Clone, PartialEq)]
pub struct BeatDecision {
    pub label: ClassLabel,
    /// Length-normalised Viterbi scores; `None` for disabled or infeasible models.
    pub scores: BTreeMap<ClassLabel, Option<f64>>,
}

/// Highest length-normalised Viterbi score among the enabled classes.
pub fn classify_beat(bank: &ClassifierBank, features: &FeatureSequence, use_xfactor: bool) -> Result<BeatDecision> {
    let mut enabled = vec![ClassLabel::Normal, ClassLabel::Abnormal];
    if use_xfactor {
        enabled.push(ClassLabel::XFactor);
    }
    for c in &enabled {
        if !bank.models.contains_key(c) {
            return Err(Error::Missing(format!("classifier bank has no {c} model")));
        }
    }
    let mut scores = BTreeMap::new();
    for c in TIE_ORDER {
        let s = if enabled.contains(&c) {
            match bank.models[&c].viterbi(features) {
                Ok((ll, _)) => Some(ll / features.len() as f64),
                Err(Error::Decoding(_)) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        scores.insert(c, s);
    }
    let mut best: Option<(ClassLabel, f64)> = None;
    for c in TIE_ORDER {
        if let Some(s) = scores[&c] {
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((c, s));
            }
        }
    }
    let (label, _) = best.ok_or_else(|| {
        Error::Unclassifiable(format!("no model can explain {} ({} frames)", features.id, features.len()))
    })?;
    Ok(BeatDecision { label, scores })
}

/// Plurality vote with the tie order abnormal, X-Factor, normal.
pub fn classify_recording(beat_labels: &[ClassLabel]) -> Result<ClassLabel> {
    if beat_labels.is_empty() {
        return Err(Error::Unclassifiable("recording has no classified beats".into()));
    }
    let count = |c: ClassLabel| beat_labels.iter().filter(|&&l| l == c).count();
    let mut best = TIE_ORDER[0];
    for c in TIE_ORDER {
        if count(c) > count(best) {
            best = c;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeatSegment {
    pub features: FeatureSequence,
    pub recording: String,
    pub label: Option<ClassLabel>,
}

/// Features of every complete S1-to-S1 cycle. Cycles too short for the
/// model's state count are skipped.
pub fn beat_segments(
    rec: &Recording,
    track: &AnnotationTrack,
    extractor: &MfccExtractor,
    min_frames: usize,
    label: Option<ClassLabel>,
) -> Result<Vec<BeatSegment>> {
    let mut out = Vec::new();
    for (i, range) in track.beats().into_iter().enumerate() {
        if range.end > rec.samples.len() {
            break;
        }
        let id = format!("{}:{i}", rec.id);
        match extractor.extract(&id, &rec.samples[range]) {
            Ok(f) if f.len() >= min_frames => out.push(BeatSegment {
                features: f,
                recording: rec.id.clone(),
                label,
            }),
            Ok(_) | Err(Error::TooShort(_)) => log::debug!("skipping short beat {id}"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Consecutive non-overlapping one-second windows; the remainder is dropped.
pub fn window_xfactor(rec: &Recording, extractor: &MfccExtractor, label: Option<ClassLabel>) -> Result<Vec<BeatSegment>> {
    let w = rec.sample_rate as usize;
    let n = rec.samples.len() / w;
    if n == 0 {
        return Err(Error::TooShort(format!(
            "{} is {:.2} s long; one-second windows need at least 1 s",
            rec.id,
            rec.duration_secs()
        )));
    }
    (0..n)
        .map(|i| {
            Ok(BeatSegment {
                features: extractor.extract(&format!("{}:w{i}", rec.id), &rec.samples[i * w..(i + 1) * w])?,
                recording: rec.id.clone(),
                label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfcc::MfccConfig;
    use rand_distr::{Distribution, Normal};

    fn toy_model(rng: &mut ChaCha8Rng, s: usize, m: usize, d: usize) -> HmmParams {
        let mut a = vec![vec![0.0; s]; s];
        for i in 0..s {
            if i + 1 < s {
                let p = rng.gen_range(0.2..0.8);
                a[i][i] = p;
                a[i][i + 1] = 1.0 - p;
            } else {
                a[i][i] = 1.0;
            }
        }
        let states = (0..s)
            .map(|_| {
                let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
                let tot: f64 = w.iter().sum();
                Gmm {
                    weights: w.iter().map(|v| v / tot).collect(),
                    means: (0..m).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect(),
                    vars: (0..m).map(|_| (0..d).map(|_| rng.gen_range(0.3..2.0)).collect()).collect(),
                }
            })
            .collect();
        HmmParams {
            pi: (0..s).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect(),
            a,
            states,
        }
    }

    fn random_seq(rng: &mut ChaCha8Rng, t: usize, d: usize) -> FeatureSequence {
        FeatureSequence::new("x", (0..t).map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect()).unwrap()
    }

    /// All non-decreasing unit-step paths from state 0 to the last state.
    fn all_paths(t: usize, s: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        fn rec(path: &mut Vec<usize>, t: usize, s: usize, out: &mut Vec<Vec<usize>>) {
            if path.len() == t {
                if *path.last().unwrap() == s - 1 {
                    out.push(path.clone());
                }
                return;
            }
            let last = *path.last().unwrap();
            for nxt in [last, last + 1] {
                if nxt < s {
                    path.push(nxt);
                    rec(path, t, s, out);
                    path.pop();
                }
            }
        }
        rec(&mut vec![0], t, s, &mut out);
        out
    }

    fn path_score(m: &HmmParams, seq: &FeatureSequence, path: &[usize]) -> f64 {
        let mut s = m.pi[path[0]].ln() + m.states[path[0]].log_density(&seq.frames[0]);
        for t in 1..path.len() {
            s += m.a[path[t - 1]][path[t]].ln() + m.states[path[t]].log_density(&seq.frames[t]);
        }
        s
    }

    #[test]
    fn forward_and_viterbi_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let t = rng.gen_range(4..=6);
            let m = toy_model(&mut rng, 4, 2, 3);
            let seq = random_seq(&mut rng, t, 3);
            let scores: Vec<f64> = all_paths(t, 4).iter().map(|p| path_score(&m, &seq, p)).collect();
            let total = log_sum_exp(&scores);
            assert!((m.forward_loglik(&seq).unwrap() - total).abs() < 1e-9);
            let (best, path) = m.viterbi(&seq).unwrap();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!((best - max).abs() < 1e-9);
            assert!((path_score(&m, &seq, &path) - max).abs() < 1e-9);
            assert!(best <= total + 1e-12);
        }
    }

    #[test]
    fn too_few_frames_is_infeasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = toy_model(&mut rng, 4, 2, 3);
        let seq = random_seq(&mut rng, 3, 3);
        assert!(matches!(m.viterbi(&seq), Err(Error::Decoding(_))));
    }

    #[test]
    fn planted_path_recovered() {
        let means = [-100.0, 0.0, 100.0, 200.0];
        let m = HmmParams {
            pi: vec![1.0, 0.0, 0.0, 0.0],
            a: vec![
                vec![0.5, 0.5, 0.0, 0.0],
                vec![0.0, 0.5, 0.5, 0.0],
                vec![0.0, 0.0, 0.5, 0.5],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
            states: means
                .iter()
                .map(|&mu| Gmm {
                    weights: vec![1.0],
                    means: vec![vec![mu]],
                    vars: vec![vec![1.0]],
                })
                .collect(),
        };
        let truth = [0, 0, 1, 1, 1, 2, 3, 3];
        let seq = FeatureSequence::new("p", truth.iter().map(|&s| vec![means[s] + 0.3]).collect()).unwrap();
        assert_eq!(m.viterbi(&seq).unwrap().1, truth);
    }

    #[test]
    fn kmeans_init_recovers_planted_clusters() {
        let centres: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|s| (0..16).map(|c| vec![1000.0 * s as f64 + 50.0 * c as f64, -20.0 * c as f64]).collect())
            .collect();
        let seqs: Vec<FeatureSequence> = (0..10)
            .map(|i| {
                let frames = (0..64)
                    .map(|t| {
                        let s = t / 16;
                        centres[s][(t + i) % 16].clone()
                    })
                    .collect();
                FeatureSequence::new(format!("s{i}"), frames).unwrap()
            })
            .collect();
        let m = segmental_kmeans_init(&seqs, &HmmConfig::default()).unwrap();
        for (s, g) in m.states.iter().enumerate() {
            assert_eq!(g.means.len(), 16);
            for c in &centres[s] {
                let hit = g.means.iter().any(|mu| mu.iter().zip(c).all(|(a, b)| (a - b).abs() < 1e-6));
                assert!(hit, "state {s} centre {c:?} not recovered");
            }
            assert!(g.vars.iter().flatten().all(|&v| v == 1e-6));
        }
    }

    #[test]
    fn kmeans_init_degenerate_and_empty() {
        let seq = FeatureSequence::new("one", vec![vec![0.5, -1.0]; 4]).unwrap();
        let m = segmental_kmeans_init(std::slice::from_ref(&seq), &HmmConfig::default()).unwrap();
        for g in &m.states {
            assert_eq!(g.means, vec![vec![0.5, -1.0]]);
            assert_eq!(g.vars, vec![vec![1e-6, 1e-6]]);
        }
        assert!(segmental_kmeans_init(&[], &HmmConfig::default()).is_err());
    }

    fn sample_sequence(m: &HmmParams, t: usize, rng: &mut ChaCha8Rng) -> FeatureSequence {
        let unit = Normal::new(0.0, 1.0).unwrap();
        let s = m.n_states();
        // forced to reach the final state: cycle until the path ends there
        loop {
            let mut st = 0;
            let mut frames = Vec::with_capacity(t);
            for step in 0..t {
                if step > 0 {
                    let u: f64 = rng.gen();
                    if st + 1 < s && u >= m.a[st][st] {
                        st += 1;
                    }
                }
                let g = &m.states[st];
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut c = g.weights.len() - 1;
                for (i, &w) in g.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        c = i;
                        break;
                    }
                }
                frames.push(
                    g.means[c]
                        .iter()
                        .zip(&g.vars[c])
                        .map(|(mu, v)| mu + v.sqrt() * unit.sample(rng))
                        .collect(),
                );
            }
            if st == s - 1 {
                return FeatureSequence::new("g", frames).unwrap();
            }
        }
    }

    fn planted_model() -> HmmParams {
        let states = (0..4)
            .map(|s| Gmm {
                weights: vec![0.4, 0.6],
                means: vec![vec![4.0 * s as f64, 1.0], vec![4.0 * s as f64 + 1.5, -1.0]],
                vars: vec![vec![0.3, 0.5], vec![0.4, 0.3]],
            })
            .collect();
        HmmParams {
            pi: vec![1.0, 0.0, 0.0, 0.0],
            a: vec![
                vec![0.8, 0.2, 0.0, 0.0],
                vec![0.0, 0.8, 0.2, 0.0],
                vec![0.0, 0.0, 0.8, 0.2],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
            states,
        }
    }

    #[test]
    fn refit_reaches_generating_likelihood() {
        let truth = planted_model();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data: Vec<_> = (0..60).map(|_| sample_sequence(&truth, 25, &mut rng)).collect();
        let mut init = truth.clone();
        for g in init.states.iter_mut() {
            for mu in g.means.iter_mut().flatten() {
                *mu += 0.3;
            }
        }
        init.a[0] = vec![0.6, 0.4, 0.0, 0.0];
        let (fit, report) = baum_welch_train(&init, &data, 100, 1e-9, 1e-6).unwrap();
        for w in report.loglik.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{:?}", report.loglik);
        }
        let ll_true = dataset_loglik(&truth, &data).unwrap();
        let ll_fit = dataset_loglik(&fit, &data).unwrap();
        assert!((ll_fit - ll_true).abs() <= 0.02 * ll_true.abs(), "{ll_fit} vs {ll_true}");
        assert!(fit.validate().is_ok());
    }

    #[test]
    fn zero_iterations_keep_init() {
        let truth = planted_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<_> = (0..5).map(|_| sample_sequence(&truth, 10, &mut rng)).collect();
        let (m, r) = baum_welch_train(&truth, &data, 0, 1e-4, 1e-6).unwrap();
        assert_eq!(m, truth);
        assert!(r.loglik.is_empty());
    }

    fn bank() -> ClassifierBank {
        let mut models = BTreeMap::new();
        let mut shifted = planted_model();
        for g in shifted.states.iter_mut() {
            for mu in g.means.iter_mut().flatten() {
                *mu += 50.0;
            }
        }
        models.insert(ClassLabel::Normal, planted_model());
        models.insert(ClassLabel::Abnormal, shifted.clone());
        models.insert(ClassLabel::XFactor, shifted);
        ClassifierBank::new("test", models).unwrap()
    }

    #[test]
    fn beat_decisions() {
        let b = bank();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = sample_sequence(&planted_model(), 12, &mut rng);
        assert_eq!(classify_beat(&b, &seq, false).unwrap().label, ClassLabel::Normal);
        // abnormal and X-Factor models are identical; the tie goes to abnormal
        let far = FeatureSequence::new("f", seq.frames.iter().map(|r| r.iter().map(|v| v + 50.0).collect()).collect()).unwrap();
        assert_eq!(classify_beat(&b, &far, true).unwrap().label, ClassLabel::Abnormal);
        let mut same = b.clone();
        same.models.insert(ClassLabel::Abnormal, planted_model());
        assert_eq!(classify_beat(&same, &seq, false).unwrap().label, ClassLabel::Abnormal);
        let short = FeatureSequence::new("s", seq.frames[..3].to_vec()).unwrap();
        assert!(matches!(classify_beat(&b, &short, false), Err(Error::Unclassifiable(_))));
        let mut no_x = b.clone();
        no_x.models.remove(&ClassLabel::XFactor);
        assert!(classify_beat(&no_x, &seq, true).is_err());
    }

    #[test]
    fn xfactor_flag_contract() {
        let mut b = bank();
        let x = b.models[&ClassLabel::Normal].clone();
        b.models.insert(ClassLabel::XFactor, x);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seq = sample_sequence(&planted_model(), 12, &mut rng);
        let off = classify_beat(&b, &seq, false).unwrap();
        assert_eq!(off.label, ClassLabel::Normal);
        assert_eq!(off.scores[&ClassLabel::XFactor], None);
        assert_eq!(classify_beat(&b, &seq, true).unwrap().label, ClassLabel::XFactor);
    }

    #[test]
    fn recording_votes() {
        use ClassLabel::*;
        let v = |n: usize, l: ClassLabel| std::iter::repeat(l).take(n);
        assert_eq!(classify_recording(&v(7, Abnormal).chain(v(3, Normal)).collect::<Vec<_>>()).unwrap(), Abnormal);
        assert_eq!(classify_recording(&v(5, Normal).chain(v(5, Abnormal)).collect::<Vec<_>>()).unwrap(), Abnormal);
        assert_eq!(classify_recording(&[XFactor, XFactor]).unwrap(), XFactor);
        assert_eq!(classify_recording(&[Normal, Normal, Abnormal]).unwrap(), Normal);
        assert!(classify_recording(&[]).is_err());
    }

    #[test]
    fn one_second_windows() {
        let ex = MfccExtractor::new(&MfccConfig::default(), 1000.0).unwrap();
        let rec = |secs: f64| Recording::new("r", 1000, vec![0.1; (secs * 1000.0) as usize]).unwrap();
        assert_eq!(window_xfactor(&rec(5.3), &ex, None).unwrap().len(), 5);
        assert_eq!(window_xfactor(&rec(2.0), &ex, None).unwrap().len(), 2);
        assert!(matches!(window_xfactor(&rec(0.8), &ex, None), Err(Error::TooShort(_))));
    }

    #[test]
    fn bank_json_round_trip() {
        let b = bank();
        let back = ClassifierBank::from_json(&b.to_json().unwrap()).unwrap();
        assert_eq!(back, b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn em_is_monotone_and_keeps_topology(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let data: Vec<_> = (0..6).map(|_| {
                    let t = rng.gen_range(4..15);
                    random_seq(&mut rng, t, 2)
                }).collect();
                let cfg = HmmConfig { n_mix: 3, max_iter: 8, tol: 0.0, seed, ..HmmConfig::default() };
                let (m, report) = train_hmm(&data, &cfg).unwrap();
                for w in report.loglik.windows(2) {
                    prop_assert!(w[1] >= w[0] - 1e-8, "{:?}", report.loglik);
                }
                for (i, row) in m.a.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        if !lr_allowed(i, j) {
                            prop_assert_eq!(v, 0.0);
                        }
                    }
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
                for g in &m.states {
                    prop_assert!((g.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    prop_assert!(g.vars.iter().flatten().all(|&v| v >= 1e-6));
                }
            }

            #[test]
            fn disabled_duplicate_does_not_change_decision(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b = bank();
                let seq = sample_sequence(&planted_model(), 10, &mut rng);
                let base = classify_beat(&b, &seq, false).unwrap();
                let mut dup = b.clone();
                dup.models.insert(ClassLabel::XFactor, b.models[&ClassLabel::Normal].clone());
                prop_assert_eq!(classify_beat(&dup, &seq, false).unwrap().label, base.label);
            }
        }
    }
}
