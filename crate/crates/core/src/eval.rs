//! Segmentation and classification scoring, and the fold machinery used to
//! evaluate them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::signal_io::{ClassLabel, DatasetManifest, Quality, SplitTag};

/// Sample-wise per-regime counts at zero tolerance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SegConfusion {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub total: u64,
}

impl SegConfusion {
    pub fn new(k: usize) -> Self {
        Self {
            tp: vec![0; k],
            fp: vec![0; k],
            fn_: vec![0; k],
            total: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.tp.len()
    }

    pub fn merge(&mut self, other: &SegConfusion) -> Result<()> {
        if other.k() != self.k() {
            return Err(Error::Dimension(format!("cannot merge {} and {} regimes", self.k(), other.k())));
        }
        for j in 0..self.k() {
            self.tp[j] += other.tp[j];
            self.fp[j] += other.fp[j];
            self.fn_[j] += other.fn_[j];
        }
        self.total += other.total;
        Ok(())
    }
}

/// Counts agreement between two 0-based state sequences over `k` regimes.
pub fn segmentation_confusion(pred: &[usize], reference: &[usize], k: usize) -> Result<SegConfusion> {
    if pred.len() != reference.len() {
        return Err(Error::validation(
            None,
            format!("prediction has {} samples, reference {}", pred.len(), reference.len()),
        ));
    }
    if let Some(&s) = pred.iter().chain(reference).find(|&&s| s >= k) {
        return Err(Error::validation(None, format!("state {} outside 1..={k}", s + 1)));
    }
    let mut c = SegConfusion::new(k);
    for (&p, &r) in pred.iter().zip(reference) {
        if p == r {
            c.tp[p] += 1;
        } else {
            c.fp[p] += 1;
            c.fn_[r] += 1;
        }
    }
    c.total = pred.len() as u64;
    Ok(c)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn harmonic(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) if a + b > 0.0 => Some(2.0 * a * b / (a + b)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegimeMetrics {
    pub se: Option<f64>,
    pub ppv: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegMetrics {
    pub per_regime: Vec<RegimeMetrics>,
    pub acc: Option<f64>,
}

impl SegMetrics {
    /// Unweighted means over the regimes where each ratio is defined.
    pub fn macro_average(&self) -> RegimeMetrics {
        let avg = |f: fn(&RegimeMetrics) -> Option<f64>| {
            let v: Vec<f64> = self.per_regime.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        RegimeMetrics {
            se: avg(|m| m.se),
            ppv: avg(|m| m.ppv),
            f1: avg(|m| m.f1),
        }
    }
}

pub fn seg_metrics(c: &SegConfusion) -> SegMetrics {
    let per_regime = (0..c.k())
        .map(|j| {
            let se = ratio(c.tp[j], c.tp[j] + c.fn_[j]);
            let ppv = ratio(c.tp[j], c.tp[j] + c.fp[j]);
            RegimeMetrics {
                se,
                ppv,
                f1: harmonic(se, ppv),
            }
        })
        .collect();
    SegMetrics {
        per_regime,
        acc: ratio(c.tp.iter().sum(), c.total),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub se: Option<f64>,
    pub ppv: Option<f64>,
    pub acc: f64,
    pub f1: Option<f64>,
}

pub fn class_metrics_plain(tp: u64, fp: u64, tn: u64, fn_: u64) -> Result<ClassMetrics> {
    let all = tp + fp + tn + fn_;
    if all == 0 {
        return Err(Error::validation(None, "all confusion counts are zero"));
    }
    let se = ratio(tp, tp + fn_);
    let ppv = ratio(tp, tp + fp);
    Ok(ClassMetrics {
        se,
        ppv,
        acc: (tp + tn) as f64 / all as f64,
        f1: harmonic(se, ppv),
    })
}

/// Predictions for one true class at one quality grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct PredictionCounts {
    pub abnormal: u64,
    pub xfactor: u64,
    pub normal: u64,
}

impl PredictionCounts {
    pub fn total(&self) -> u64 {
        self.abnormal + self.xfactor + self.normal
    }
}

/// Confusion counts split by true class and quality, index 0 good and 1 poor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct XFactorConfusion {
    pub abnormal: [PredictionCounts; 2],
    pub normal: [PredictionCounts; 2],
    pub abnormal_weights: [f64; 2],
    pub normal_weights: [f64; 2],
}

const WEIGHT_TOL: f64 = 1e-12;

impl XFactorConfusion {
    pub fn new(abnormal_weights: [f64; 2], normal_weights: [f64; 2]) -> Result<Self> {
        for w in [abnormal_weights, normal_weights] {
            if w.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (w[0] + w[1] - 1.0).abs() > WEIGHT_TOL {
                return Err(Error::validation(None, format!("quality weights {w:?} must be a probability pair")));
            }
        }
        Ok(Self {
            abnormal: Default::default(),
            normal: Default::default(),
            abnormal_weights,
            normal_weights,
        })
    }

    /// Records one decision. Truths other than normal/abnormal are ignored.
    pub fn record(&mut self, truth: ClassLabel, quality: Quality, predicted: ClassLabel) -> Result<()> {
        let q = match quality {
            Quality::Good => 0,
            Quality::Poor => 1,
        };
        let row = match truth {
            ClassLabel::Abnormal => &mut self.abnormal[q],
            ClassLabel::Normal => &mut self.normal[q],
            _ => return Ok(()),
        };
        match predicted {
            ClassLabel::Abnormal => row.abnormal += 1,
            ClassLabel::XFactor => row.xfactor += 1,
            ClassLabel::Normal => row.normal += 1,
            ClassLabel::Noise => return Err(Error::validation(None, "noise is not a decision label")),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct XFactorMetrics {
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub macc: Option<f64>,
}

/// Weighted sum of per-quality terms. A zero-weight term with no samples
/// contributes nothing; a weighted term with no samples leaves the sum undefined.
fn weighted_terms(terms: [(f64, u64, u64); 2]) -> Option<f64> {
    let mut sum = 0.0;
    for (w, num, den) in terms {
        match ratio(num, den) {
            Some(r) => sum += w * r,
            None if w == 0.0 => {}
            None => return None,
        }
    }
    Some(sum)
}

pub fn class_metrics_xfactor(x: &XFactorConfusion) -> XFactorMetrics {
    let [a1, a2] = x.abnormal;
    let [n1, n2] = x.normal;
    let se = weighted_terms([
        (x.abnormal_weights[0], a1.abnormal, a1.total()),
        (x.abnormal_weights[1], a2.abnormal + a2.xfactor, a2.total()),
    ]);
    let sp = weighted_terms([
        (x.normal_weights[0], n1.normal, n1.total()),
        (x.normal_weights[1], n2.normal + n2.xfactor, n2.total()),
    ]);
    let macc = match (se, sp) {
        (Some(a), Some(b)) => Some((a + b) / 2.0),
        _ => None,
    };
    XFactorMetrics { se, sp, macc }
}

/// F1 that penalises normal/abnormal confusions by `alpha` relative to
/// X-Factor deferrals, using good-quality counts.
pub fn penalized_f1(x: &XFactorConfusion, alpha: f64) -> Result<f64> {
    let [a1, _] = x.abnormal;
    let [n1, _] = x.normal;
    penalized_f1_counts(a1.abnormal, a1.normal, n1.abnormal, a1.xfactor, n1.xfactor, alpha)
}

pub fn penalized_f1_counts(aa: u64, an: u64, na: u64, aq: u64, nq: u64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::validation(None, format!("penalty must be positive and finite, got {alpha}")));
    }
    let hits = 2.0 * (alpha + 1.0) * aa as f64;
    let den = hits + alpha * (an + na) as f64 + (aq + nq) as f64;
    if den == 0.0 {
        return Err(Error::validation(None, "penalized F1 has a zero denominator"));
    }
    Ok(hits / den)
}

/// Good/poor proportions of the abnormal and normal training recordings.
pub fn quality_weights(manifest: &DatasetManifest) -> Result<([f64; 2], [f64; 2])> {
    let mut counts: BTreeMap<ClassLabel, [u64; 2]> = BTreeMap::new();
    for e in manifest.with_split(SplitTag::Train) {
        if let Some(c) = e.reference_class() {
            let q = usize::from(e.quality == Quality::Poor);
            counts.entry(c).or_default()[q] += 1;
        }
    }
    let weights = |c: ClassLabel| -> Result<[f64; 2]> {
        let [g, p] = counts.get(&c).copied().unwrap_or_default();
        if g + p == 0 {
            return Err(Error::validation(None, format!("training set has no {c} recordings")));
        }
        let n = (g + p) as f64;
        Ok([g as f64 / n, p as f64 / n])
    };
    Ok((weights(ClassLabel::Abnormal)?, weights(ClassLabel::Normal)?))
}

/// Stratified k-fold partition. Each class is shuffled with the seed and
/// dealt round-robin across folds; fold `i` is returned as (train, test).
pub fn kfold_split(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<(DatasetManifest, DatasetManifest)>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k ≥ 2, got {k}")));
    }
    let mut by_class: BTreeMap<ClassLabel, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        by_class.entry(e.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; manifest.len()];
    for (class, idx) in by_class.iter_mut() {
        if idx.len() < k {
            return Err(Error::validation(
                None,
                format!("class {class} has {} entries, fewer than {k} folds", idx.len()),
            ));
        }
        idx.shuffle(&mut rng);
        for (n, &i) in idx.iter().enumerate() {
            fold_of[i] = n % k;
        }
    }
    (0..k)
        .map(|f| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (e, &ef) in manifest.entries.iter().zip(&fold_of) {
                let mut e = e.clone();
                if ef == f {
                    e.split = SplitTag::Test;
                    test.push(e);
                } else {
                    e.split = SplitTag::Train;
                    train.push(e);
                }
            }
            Ok((DatasetManifest::new(train)?, DatasetManifest::new(test)?))
        })
        .collect()
}

/// Mean and sample standard deviation of the defined values.
pub fn mean_sd(values: &[Option<f64>]) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, sd))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x))
}

/// Plain-text table of per-regime and global segmentation metrics.
pub fn format_seg_table(m: &SegMetrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8} {:>8} {:>8} {:>8}", "state", "Se%", "P+%", "F1%");
    for (j, r) in m.per_regime.iter().enumerate() {
        let _ = writeln!(s, "{:<8} {:>8} {:>8} {:>8}", j + 1, pct(r.se), pct(r.ppv), pct(r.f1));
    }
    let avg = m.macro_average();
    let _ = writeln!(s, "{:<8} {:>8} {:>8} {:>8}", "mean", pct(avg.se), pct(avg.ppv), pct(avg.f1));
    let _ = writeln!(s, "accuracy {}%", pct(m.acc));
    s
}

/// CSV with one row per regime plus a `global` row carrying the accuracy.
pub fn write_seg_report(m: &SegMetrics, path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::format("report", e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.10}")).unwrap_or_default();
    w.write_record(["state", "se", "ppv", "f1", "acc"]).map_err(csv_err)?;
    for (j, r) in m.per_regime.iter().enumerate() {
        w.write_record([(j + 1).to_string(), cell(r.se), cell(r.ppv), cell(r.f1), String::new()])
            .map_err(csv_err)?;
    }
    let avg = m.macro_average();
    w.write_record(["global".into(), cell(avg.se), cell(avg.ppv), cell(avg.f1), cell(m.acc)])
        .map_err(csv_err)?;
    w.flush().map_err(|e| Error::io(path, e))
}
