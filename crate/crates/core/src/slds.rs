//! Switching Kalman filter and smoother over the companion-form MSAR model.
//!
//! Probabilities are propagated in the log domain. Every Gaussian kept across
//! a time step is the moment-matched collapse of the `K` hypotheses about the
//! previous (filter) or next (smoother) regime.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::msar::StateSpaceView;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const EIG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }

    /// Zero mean, isotropic covariance.
    pub fn isotropic(dim: usize, variance: f64) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim) * variance,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Average with the transpose, then lift any eigenvalue below the floor.
fn condition_cov(cov: &mut DMatrix<f64>) {
    let t = cov.transpose();
    *cov += t;
    *cov *= 0.5;
    let n = cov.nrows();
    let scale = cov.diagonal().iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let probe = &*cov + DMatrix::identity(n, n) * (EIG_FLOOR * scale);
    if probe.cholesky().is_some() {
        return;
    }
    let eig = cov.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(EIG_FLOOR));
    *cov = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let t = cov.transpose();
    *cov += t;
    *cov *= 0.5;
}

/// One predict/update cycle. Returns the posterior and the log density of the
/// observation under the predictive distribution.
pub fn kalman_filter_step(
    prior: &GaussianBelief,
    y: f64,
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: f64,
) -> Result<(GaussianBelief, f64)> {
    if !y.is_finite() || !r.is_finite() {
        return Err(Error::Numerical {
            t: 0,
            message: "non-finite observation or noise variance".into(),
        });
    }
    let mean_pred = a * &prior.mean;
    let cov_pred = a * &prior.cov * a.transpose() + q;
    let pct = &cov_pred * c.transpose();
    let s = (c * &pct)[(0, 0)] + r;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Numerical {
            t: 0,
            message: format!("innovation variance {s} is not positive"),
        });
    }
    let innov = y - (c * &mean_pred)[(0, 0)];
    let gain = pct / s;
    let mean = mean_pred + &gain * innov;
    let mut cov = cov_pred - &gain * gain.transpose() * s;
    condition_cov(&mut cov);
    let loglik = -0.5 * (LN_2PI + s.ln() + innov * innov / s);
    Ok((GaussianBelief { mean, cov }, loglik))
}

/// Moment-matched single Gaussian of a mixture.
pub fn collapse(means: &[DVector<f64>], covs: &[DMatrix<f64>], weights: &[f64]) -> Result<GaussianBelief> {
    if means.is_empty() || means.len() != covs.len() || means.len() != weights.len() {
        return Err(Error::Dimension("collapse needs one mean, cov and weight per component".into()));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::validation(None, format!("mixture weights must be nonnegative and sum to 1, got {total}")));
    }
    let dim = means[0].len();
    let mut mean = DVector::zeros(dim);
    for (m, &w) in means.iter().zip(weights) {
        if w > 0.0 {
            mean += m * w;
        }
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for ((m, p), &w) in means.iter().zip(covs).zip(weights) {
        if w > 0.0 {
            let d = m - &mean;
            cov += (p + &d * d.transpose()) * w;
        }
    }
    condition_cov(&mut cov);
    Ok(GaussianBelief { mean, cov })
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegeneratePolicy {
    /// Replace the weights with the transition-propagated prior and continue.
    #[default]
    Recover,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkfConfig {
    /// Distribution of the first regime; defaults to `[1, 0, …]`.
    pub initial_probs: Option<Vec<f64>>,
    /// Belief about the hidden state before the first sample.
    pub initial_belief: GaussianBelief,
    pub on_degenerate: DegeneratePolicy,
}

impl SkfConfig {
    /// Zero mean and identity covariance scaled by the variance of the first
    /// second of `y`.
    pub fn for_signal(y: &[f64], fs: u32, dim: usize) -> Self {
        let head = &y[..y.len().min(fs as usize).max(1.min(y.len()))];
        let var = if head.is_empty() {
            1.0
        } else {
            let m = head.iter().sum::<f64>() / head.len() as f64;
            head.iter().map(|v| (v - m).powi(2)).sum::<f64>() / head.len() as f64
        };
        Self {
            initial_probs: None,
            initial_belief: GaussianBelief::isotropic(dim, if var > 0.0 { var } else { 1.0 }),
            on_degenerate: DegeneratePolicy::Recover,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredTrajectory {
    /// `beliefs[t][j]`: collapsed filtered belief given `S_t = j`.
    pub beliefs: Vec<Vec<GaussianBelief>>,
    /// `m[t][j] = P(S_t = j | y_1..y_t)`.
    pub m: Vec<Vec<f64>>,
    pub log_m: Vec<Vec<f64>>,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTrajectory {
    pub beliefs: Vec<Vec<GaussianBelief>>,
    /// `m[t][j] = P(S_t = j | y_1..y_T)`.
    pub m: Vec<Vec<f64>>,
    pub log_m: Vec<Vec<f64>>,
}

fn check_model(ssv: &StateSpaceView, z: &[Vec<f64>]) -> Result<()> {
    let k = ssv.k();
    if k == 0 || ssv.q.len() != k || ssv.r.len() != k || z.len() != k || z.iter().any(|r| r.len() != k) {
        return Err(Error::Dimension("state-space view and Z disagree on K".into()));
    }
    Ok(())
}

/// Switching Kalman filter.
pub fn skf(y: &[f64], ssv: &StateSpaceView, z: &[Vec<f64>], cfg: &SkfConfig) -> Result<FilteredTrajectory> {
    check_model(ssv, z)?;
    let k = ssv.k();
    if cfg.initial_belief.dim() != ssv.dim() {
        return Err(Error::Dimension("initial belief dimension differs from the model order".into()));
    }
    let init_probs = match &cfg.initial_probs {
        Some(p) => {
            let s: f64 = p.iter().sum();
            if p.len() != k || p.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::validation(None, "initial regime probabilities must be a K-vector summing to 1"));
            }
            p.clone()
        }
        None => (0..k).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect(),
    };
    let log_z: Vec<Vec<f64>> = z.iter().map(|r| r.iter().map(|&v| ln(v)).collect()).collect();

    let mut beliefs = Vec::with_capacity(y.len());
    let mut m = Vec::with_capacity(y.len());
    let mut log_m_all = Vec::with_capacity(y.len());
    let mut loglik = 0.0;

    for (t, &obs) in y.iter().enumerate() {
        // first sample: a single prior hypothesis weighted by the initial probabilities
        let (prev, prev_logw): (Vec<&GaussianBelief>, Vec<Vec<f64>>) = if t == 0 {
            (
                vec![&cfg.initial_belief],
                vec![init_probs.iter().map(|&p| ln(p)).collect()],
            )
        } else {
            let lm: &Vec<f64> = &log_m_all[t - 1];
            let bs: &Vec<GaussianBelief> = &beliefs[t - 1];
            (
                bs.iter().collect(),
                (0..k).map(|i| (0..k).map(|j| lm[i] + log_z[i][j]).collect()).collect(),
            )
        };
        let n_prev = prev.len();
        // joint[i][j] = log L_ij + log prior weight
        let mut joint = vec![vec![f64::NEG_INFINITY; k]; n_prev];
        let mut post: Vec<Vec<Option<GaussianBelief>>> = vec![vec![None; k]; n_prev];
        for (i, b) in prev.iter().enumerate() {
            for j in 0..k {
                let (pb, ll) = kalman_filter_step(b, obs, &ssv.a[j], &ssv.c, &ssv.q[j], ssv.r[j])
                    .map_err(|e| with_time(e, t))?;
                joint[i][j] = ll + prev_logw[i][j];
                post[i][j] = Some(pb);
            }
        }
        let flat: Vec<f64> = joint.iter().flatten().copied().collect();
        let mut norm = log_sum_exp(&flat);
        if !norm.is_finite() {
            match cfg.on_degenerate {
                DegeneratePolicy::Error => {
                    return Err(Error::Numerical {
                        t,
                        message: "all regime-pair weights vanished".into(),
                    })
                }
                DegeneratePolicy::Recover => {
                    log::warn!("regime-pair weights vanished at t = {t}; falling back to the transition prior");
                    joint = prev_logw.clone();
                    norm = log_sum_exp(&joint.iter().flatten().copied().collect::<Vec<_>>());
                    if !norm.is_finite() {
                        return Err(Error::Numerical {
                            t,
                            message: "transition prior is degenerate".into(),
                        });
                    }
                }
            }
        } else {
            loglik += norm;
        }
        let mut log_mt = vec![f64::NEG_INFINITY; k];
        for (j, lm) in log_mt.iter_mut().enumerate() {
            let col: Vec<f64> = (0..n_prev).map(|i| joint[i][j] - norm).collect();
            *lm = log_sum_exp(&col);
        }
        let mut bt = Vec::with_capacity(k);
        for j in 0..k {
            let means: Vec<_> = post.iter().map(|r| r[j].as_ref().unwrap().mean.clone()).collect();
            let covs: Vec<_> = post.iter().map(|r| r[j].as_ref().unwrap().cov.clone()).collect();
            let weights: Vec<f64> = if log_mt[j] == f64::NEG_INFINITY {
                // regime impossible at t: keep a well-defined belief using prior weights
                let col: Vec<f64> = (0..n_prev).map(|i| prev_logw[i][j]).collect();
                let s = log_sum_exp(&col);
                if s.is_finite() {
                    col.iter().map(|v| (v - s).exp()).collect()
                } else {
                    vec![1.0 / n_prev as f64; n_prev]
                }
            } else {
                (0..n_prev).map(|i| (joint[i][j] - norm - log_mt[j]).exp()).collect()
            };
            bt.push(collapse(&means, &covs, &renormalize(weights))?);
        }
        let mt = normalized_probs(&log_mt);
        m.push(mt);
        log_m_all.push(log_mt);
        beliefs.push(bt);
    }
    Ok(FilteredTrajectory {
        beliefs,
        m,
        log_m: log_m_all,
        loglik,
    })
}

fn with_time(e: Error, t: usize) -> Error {
    match e {
        Error::Numerical { message, .. } => Error::Numerical { t, message },
        other => other,
    }
}

fn renormalize(mut w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Exponentiate log probabilities and renormalise the row exactly.
fn normalized_probs(log_p: &[f64]) -> Vec<f64> {
    let s = log_sum_exp(log_p);
    renormalize(log_p.iter().map(|v| (v - s).exp()).collect())
}

/// Solve `x·B = rhs` for symmetric `B`, falling back to the pseudo-inverse.
fn right_divide_sym(rhs: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    match b.clone().cholesky() {
        Some(ch) => ch.solve(&rhs.transpose()).transpose(),
        None => {
            let pinv = b.clone().pseudo_inverse(1e-14).expect("pseudo-inverse of finite matrix");
            rhs * pinv
        }
    }
}

/// Switching Kalman smoother run backward over a filtered trajectory.
pub fn sks(fwd: &FilteredTrajectory, ssv: &StateSpaceView, z: &[Vec<f64>]) -> Result<SmoothedTrajectory> {
    check_model(ssv, z)?;
    let k = ssv.k();
    let n = fwd.m.len();
    if n == 0 {
        return Ok(SmoothedTrajectory {
            beliefs: vec![],
            m: vec![],
            log_m: vec![],
        });
    }
    let log_z: Vec<Vec<f64>> = z.iter().map(|r| r.iter().map(|&v| ln(v)).collect()).collect();
    let mut beliefs = vec![Vec::new(); n];
    let mut log_m = vec![Vec::new(); n];
    beliefs[n - 1] = fwd.beliefs[n - 1].clone();
    log_m[n - 1] = fwd.log_m[n - 1].clone();

    for t in (0..n - 1).rev() {
        let next_log_m = log_m[t + 1].clone();
        // log M_{t,t+1|T}^{jk}
        let mut pair = vec![vec![f64::NEG_INFINITY; k]; k];
        for kk in 0..k {
            let col: Vec<f64> = (0..k).map(|j| fwd.log_m[t][j] + log_z[j][kk]).collect();
            let denom = log_sum_exp(&col);
            if denom == f64::NEG_INFINITY {
                if next_log_m[kk] > f64::NEG_INFINITY {
                    return Err(Error::Numerical {
                        t,
                        message: format!("no filtered mass can reach regime {} at the next step", kk + 1),
                    });
                }
                continue;
            }
            for j in 0..k {
                pair[j][kk] = col[j] - denom + next_log_m[kk];
            }
        }
        let lm: Vec<f64> = pair.iter().map(|row| log_sum_exp(row)).collect();
        let s = log_sum_exp(&lm);
        let lm: Vec<f64> = lm.iter().map(|v| v - s).collect();

        let mut bt = Vec::with_capacity(k);
        for j in 0..k {
            let filt = &fwd.beliefs[t][j];
            if lm[j] == f64::NEG_INFINITY {
                bt.push(filt.clone());
                continue;
            }
            let mut means = Vec::with_capacity(k);
            let mut covs = Vec::with_capacity(k);
            let mut weights = Vec::with_capacity(k);
            for kk in 0..k {
                let w = (pair[j][kk] - s - lm[j]).exp();
                let nb = &beliefs[t + 1][kk];
                let a = &ssv.a[kk];
                let mean_pred = a * &filt.mean;
                let cov_pred = a * &filt.cov * a.transpose() + &ssv.q[kk];
                let gain = right_divide_sym(&(&filt.cov * a.transpose()), &cov_pred);
                let mean = &filt.mean + &gain * (&nb.mean - mean_pred);
                let cov = &filt.cov + &gain * (&nb.cov - cov_pred) * gain.transpose();
                means.push(mean);
                covs.push(cov);
                weights.push(w);
            }
            bt.push(collapse(&means, &covs, &renormalize(weights))?);
        }
        beliefs[t] = bt;
        log_m[t] = lm;
    }
    let m = log_m.iter().map(|r| normalized_probs(r)).collect();
    Ok(SmoothedTrajectory { beliefs, m, log_m })
}

/// Pointwise most probable regime; ties go to the lowest index.
pub fn decode_map_states(m: &[Vec<f64>]) -> Vec<usize> {
    m.iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `t,M1..MK,map_state` with 1-based regimes.
pub fn write_trajectory_csv(path: &Path, m: &[Vec<f64>]) -> Result<()> {
    let mut out = Vec::new();
    let k = m.first().map_or(0, Vec::len);
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=k).map(|j| format!("M{j}")))
        .chain(std::iter::once("map_state".to_string()))
        .collect();
    writeln!(out, "{}", header.join(",")).expect("write to vec");
    for (t, (row, s)) in m.iter().zip(decode_map_states(m)).enumerate() {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(out, "{t},{},{}", vals.join(","), s + 1).expect("write to vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
