//! Synthetic MSAR signals with known regime sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::msar::{check_transition_matrix, MsarParams};
use crate::signal_io::{cyclic_successor, AnnotationTrack, Recording};

#[derive(Debug, Clone, PartialEq)]
pub enum SegmentPlan {
    /// `(regime, duration in samples)` in order.
    Explicit(Vec<(usize, usize)>),
    /// Per-sample regime chain drawn from `Z`, starting in `initial`.
    Stochastic { initial: usize, length: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// `r` may be zero here, unlike a model used for inference.
    pub params: MsarParams,
    pub plan: SegmentPlan,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    /// Observed signal `x + ε`.
    pub signal: Vec<f64>,
    /// Latent AR process.
    pub clean: Vec<f64>,
    pub states: Vec<usize>,
    pub seed: u64,
}

impl Synthetic {
    pub fn recording(&self, id: &str, sample_rate: u32) -> Result<Recording> {
        Recording::new(id, sample_rate, self.signal.clone())
    }

    pub fn annotation(&self) -> Result<AnnotationTrack> {
        AnnotationTrack::from_states(&self.states)
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let k = p.k();
        if k == 0 || p.order() == 0 || p.phi.iter().any(|r| r.len() != p.order()) {
            return Err(Error::Dimension("phi must be K × P with K, P ≥ 1".into()));
        }
        if p.q.len() != k || p.r.len() != k || p.z.len() != k {
            return Err(Error::Dimension("q, R and Z must have K entries".into()));
        }
        if p.q.iter().chain(&p.r).any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::validation(None, "noise variances must be finite and ≥ 0"));
        }
        match &self.plan {
            SegmentPlan::Explicit(segs) => {
                if segs.is_empty() {
                    return Err(Error::validation(None, "empty segment plan"));
                }
                if let Some(i) = segs.iter().position(|&(s, d)| s >= k || d == 0) {
                    return Err(Error::validation(
                        Some(i),
                        format!("segment needs regime in 1..{k} and duration ≥ 1"),
                    ));
                }
            }
            SegmentPlan::Stochastic { initial, length } => {
                check_transition_matrix(&p.z)?;
                if *initial >= k || *length == 0 {
                    return Err(Error::validation(None, "stochastic plan needs a valid initial regime and length ≥ 1"));
                }
            }
        }
        Ok(())
    }
}

/// Largest modulus among the roots of the AR characteristic polynomial.
pub fn spectral_radius(phi: &[f64]) -> f64 {
    let p = phi.len();
    let mut a = nalgebra::DMatrix::zeros(p, p);
    for (c, &v) in phi.iter().enumerate() {
        a[(0, c)] = v;
    }
    for i in 1..p {
        a[(i, i - 1)] = 1.0;
    }
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn expand_plan(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match &spec.plan {
        SegmentPlan::Explicit(segs) => segs
            .iter()
            .flat_map(|&(s, d)| std::iter::repeat(s).take(d))
            .collect(),
        SegmentPlan::Stochastic { initial, length } => {
            let mut states = Vec::with_capacity(*length);
            let mut s = *initial;
            for _ in 0..*length {
                states.push(s);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let row = &spec.params.z[s];
                let mut next = row.len() - 1;
                for (j, &pj) in row.iter().enumerate() {
                    acc += pj;
                    if u < acc {
                        next = j;
                        break;
                    }
                }
                s = next;
            }
            states
        }
    }
}

/// Run the switching AR recursion forward from a zero initial state; lagged
/// values carry across regime switches.
pub fn generate_msar(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let params = &spec.params;
    for (j, phi) in params.phi.iter().enumerate() {
        let rho = spectral_radius(phi);
        if rho >= 1.0 {
            log::warn!("regime {} AR dynamics are unstable (spectral radius {rho:.4})", j + 1);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let states = expand_plan(spec, &mut rng);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut clean = Vec::with_capacity(states.len());
    let mut signal = Vec::with_capacity(states.len());
    for (t, &s) in states.iter().enumerate() {
        let ar: f64 = params.phi[s]
            .iter()
            .enumerate()
            .filter(|(a, _)| t > *a)
            .map(|(a, c)| c * clean[t - 1 - a])
            .sum();
        let x = ar + params.q[s].sqrt() * unit.sample(&mut rng);
        clean.push(x);
        signal.push(x + params.r[s].sqrt() * unit.sample(&mut rng));
    }
    Ok(Synthetic {
        signal,
        clean,
        states,
        seed: spec.seed,
    })
}

/// Cyclic plan through all regimes, starting at regime 0, with durations drawn
/// uniformly within `±jitter` (fraction) of `mean_durations`.
pub fn cyclic_plan(mean_durations: &[usize], jitter: f64, cycles: usize, seed: u64) -> Vec<(usize, usize)> {
    let k = mean_durations.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = Vec::with_capacity(k * cycles);
    let mut s = 0;
    for _ in 0..k * cycles {
        let m = mean_durations[s] as f64;
        let d = if jitter > 0.0 {
            m * (1.0 + rng.gen_range(-jitter..=jitter))
        } else {
            m
        };
        plan.push((s, (d.round() as usize).max(1)));
        s = cyclic_successor(s, k);
    }
    plan
}

/// Mean regime durations (samples at 1 kHz) of the heart-like preset.
pub const HEART_LIKE_DURATIONS: [usize; 4] = [120, 200, 100, 380];

/// Four well-separated AR(4) regimes loosely mimicking S1, systole, S2 and
/// diastole: two loud resonant bursts and two quiet intervals with distinct
/// spectral shapes. Transition probabilities follow the mean durations.
pub fn heart_like_params() -> MsarParams {
    // AR(2) resonance at `f` cycles/sample with pole radius `r`, padded to P = 4
    let resonant = |f: f64, r: f64| {
        let w = 2.0 * std::f64::consts::PI * f;
        vec![2.0 * r * w.cos(), -r * r, 0.0, 0.0]
    };
    let phi = vec![
        resonant(0.04, 0.97),
        vec![-0.6, 0.0, 0.0, 0.0],
        resonant(0.12, 0.95),
        vec![0.6, 0.0, 0.0, 0.0],
    ];
    let q = vec![0.05, 0.001, 0.08, 0.001];
    let r = vec![1e-4; 4];
    let z = HEART_LIKE_DURATIONS
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let stay = 1.0 - 1.0 / d as f64;
            (0..4)
                .map(|j| {
                    if j == i {
                        stay
                    } else if j == (i + 1) % 4 {
                        1.0 - stay
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    MsarParams::new(phi, q, r, z).expect("preset is valid")
}
