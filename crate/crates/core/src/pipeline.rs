//! End-to-end commands over a dataset manifest, driven by one flat
//! dotted-key configuration document.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::duration::{
    build_duration_model, cyclic_next_state, estimate_heart_rate, skf_viterbi, DurationStats,
};
use crate::error::{Error, Result};
use crate::eval::{
    class_metrics_plain, class_metrics_xfactor, mean_sd, penalized_f1, quality_weights, seg_metrics,
    segmentation_confusion, write_seg_report, format_seg_table, ClassMetrics, SegConfusion, XFactorConfusion,
};
use crate::hmm::{beat_segments, classify_beat, classify_recording, train_hmm, window_xfactor, ClassifierBank, HmmConfig};
use crate::mfcc::{MfccConfig, MfccExtractor};
use crate::msar::{fit_recording, pool_parameters, FitConfig, MsarParams};
use crate::preprocess::{preprocess, PreprocessConfig};
use crate::signal_io::{
    intervals_from_states, load_annotations, load_manifest, load_recording, load_segmentation, resample,
    save_annotations, save_csv_recording, save_intervals, save_manifest, AnnotationTrack, ClassLabel,
    DatasetManifest, ManifestEntry, Recording, SignalFormat, SplitTag, HEART_STATES,
};
use crate::slds::{decode_map_states, skf, sks, SkfConfig};
use crate::synth::{cyclic_plan, generate_msar, heart_like_params, SegmentPlan, SynthSpec, HEART_LIKE_DURATIONS};

pub const SEGMENTER_FILE: &str = "msar.json";
pub const DURATIONS_FILE: &str = "durations.json";
pub const CLASSIFIER_FILE: &str = "classifier.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentMethod {
    Skf,
    Sks,
    #[default]
    SkfViterbi,
}

impl std::fmt::Display for SegmentMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SegmentMethod::Skf => "skf",
            SegmentMethod::Sks => "sks",
            SegmentMethod::SkfViterbi => "skf-viterbi",
        })
    }
}

impl std::str::FromStr for SegmentMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skf" => Ok(SegmentMethod::Skf),
            "sks" => Ok(SegmentMethod::Sks),
            "skf-viterbi" => Ok(SegmentMethod::SkfViterbi),
            other => Err(Error::Config(format!("unknown method `{other}` (skf, sks, skf-viterbi)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub method: SegmentMethod,
    /// Distribution of the first regime for the filter; first regime if unset.
    pub initial_probs: Option<Vec<f64>>,
    /// Initial regime weights of the duration decoder; uniform if unset.
    pub viterbi_initial: Option<Vec<f64>>,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            method: SegmentMethod::SkfViterbi,
            initial_probs: None,
            viterbi_initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    pub xfactor: bool,
    /// Penalty on normal/abnormal confusions in the penalised F1.
    pub alpha: f64,
    /// Good/poor weights; derived from the training split when unset.
    pub abnormal_weights: Option<[f64; 2]>,
    pub normal_weights: Option<[f64; 2]>,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            xfactor: false,
            alpha: 10.0,
            abnormal_weights: None,
            normal_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train: usize,
    pub test: usize,
    pub cycles: usize,
    /// Relative spread of segment durations.
    pub jitter: f64,
    /// Observation-noise variance added to the generated process.
    pub noise: f64,
    /// Every n-th recording gets a systolic murmur and the abnormal label;
    /// 0 disables.
    pub abnormal_every: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train: 10,
            test: 10,
            cycles: 10,
            jitter: 0.1,
            noise: 1e-4,
            abnormal_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Working sample rate; recordings are resampled down to it.
    pub sample_rate: u32,
    pub seed: u64,
    pub preprocess_signals: bool,
    pub preprocess: PreprocessConfig,
    pub msar: FitConfig,
    pub segment: SegmentConfig,
    pub mfcc: MfccConfig,
    pub hmm: HmmConfig,
    pub classify: ClassifyConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sample_rate: 1000,
            seed: 0,
            preprocess_signals: true,
            preprocess: PreprocessConfig::default(),
            msar: FitConfig::default(),
            segment: SegmentConfig::default(),
            mfcc: MfccConfig::default(),
            hmm: HmmConfig::default(),
            classify: ClassifyConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut String) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                let _ = writeln!(out, "{key} = {other}");
            }
        }
    }
}

impl PipelineConfig {
    /// Parses a dotted-key document, then applies `key=value` overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let parsed: toml::Table = o
                .parse()
                .or_else(|_| {
                    // bare strings such as `segment.method=sks`
                    let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
                    format!("{} = {:?}", k.trim(), v.trim())
                        .parse::<toml::Table>()
                        .map_err(|e| Error::Config(format!("override `{o}`: {e}")))
                })?;
            merge(&mut table, parsed);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let fs = self.sample_rate as f64;
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if self.preprocess_signals {
            self.preprocess.validate(fs)?;
        }
        if self.msar.order == 0 || !(self.msar.obs_window > 0.0) {
            return Err(Error::Config("msar.order and msar.obs_window must be positive".into()));
        }
        self.mfcc.validate(fs)?;
        self.hmm.validate()?;
        if !(self.classify.alpha > 0.0) {
            return Err(Error::Config("classify.alpha must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its effective value, one `a.b = v` line each.
    pub fn to_dotted(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serialises");
        let mut out = String::new();
        if let toml::Value::Table(t) = value {
            flatten("", &t, &mut out);
        }
        out
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_dotted()).map_err(|e| Error::io(&path, e))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let m = load_manifest(path)?;
    if m.is_empty() {
        return Err(Error::validation(None, format!("manifest {} has no entries", path.display())));
    }
    Ok(m)
}

/// A recording at the working rate with its reference track, if any.
pub struct Prepared {
    pub recording: Recording,
    pub track: Option<AnnotationTrack>,
}

fn load_entry(e: &ManifestEntry, cfg: &PipelineConfig, condition: bool) -> Result<Prepared> {
    let raw = load_recording(&e.path, SignalFormat::from_path(&e.path))?;
    let rec = resample(&raw, cfg.sample_rate)?;
    let track = match &e.annotation {
        Some(p) => Some(load_annotations(p)?.rescale(raw.sample_rate, cfg.sample_rate)?),
        None => None,
    };
    let recording = if condition && cfg.preprocess_signals {
        rec.with_samples(preprocess(&rec.samples, cfg.sample_rate as f64, &cfg.preprocess)?)?
    } else {
        rec
    };
    Ok(Prepared { recording, track })
}

fn with_entry(e: &ManifestEntry, err: Error) -> Error {
    match err {
        Error::Validation { row, message } => Error::Validation {
            row,
            message: format!("{}: {message}", e.path.display()),
        },
        Error::Missing(m) => Error::Missing(format!("{}: {m}", e.path.display())),
        Error::TooShort(m) => Error::TooShort(format!("{}: {m}", e.path.display())),
        other => other,
    }
}

/// Copy every entry to `out` at the working rate as CSV-float, with
/// rescaled annotations and a rewritten manifest.
pub fn cmd_ingest(manifest: &Path, cfg: &PipelineConfig, out: &Path) -> Result<String> {
    convert(manifest, cfg, out, false)
}

/// As ingest, additionally applying the signal conditioning chain.
pub fn cmd_preprocess(manifest: &Path, cfg: &PipelineConfig, out: &Path) -> Result<String> {
    convert(manifest, cfg, out, true)
}

fn convert(manifest: &Path, cfg: &PipelineConfig, out: &Path, condition: bool) -> Result<String> {
    let m = read_manifest(manifest)?;
    ensure_dir(out)?;
    let entries: Vec<ManifestEntry> = m
        .entries
        .par_iter()
        .map(|e| {
            let p = load_entry(e, cfg, condition).map_err(|err| with_entry(e, err))?;
            let id = e.id();
            let rec_path = out.join(format!("{id}.csv"));
            save_csv_recording(&p.recording, &rec_path)?;
            let annotation = match &p.track {
                Some(t) => {
                    let ap = out.join(format!("{id}.ann.csv"));
                    save_annotations(t, &ap)?;
                    Some(ap)
                }
                None => None,
            };
            Ok(ManifestEntry {
                path: rec_path,
                annotation,
                ..e.clone()
            })
        })
        .collect::<Result<_>>()?;
    let n = entries.len();
    save_manifest(&DatasetManifest::new(entries)?, &out.join("manifest.csv"))?;
    cfg.write_resolved(out)?;
    Ok(format!("wrote {n} recordings at {} Hz to {}\n", cfg.sample_rate, out.display()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterModel {
    pub params: MsarParams,
    pub durations: DurationStats,
}

impl SegmenterModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        self.params.save(&dir.join(SEGMENTER_FILE))?;
        let text = crate::json::to_string(&self.durations).map_err(|e| Error::format("durations", e.to_string()))?;
        write_text(&dir.join(DURATIONS_FILE), &text)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let params = MsarParams::load(&dir.join(SEGMENTER_FILE))?;
        let path = dir.join(DURATIONS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let durations = serde_json::from_str(&text).map_err(|e| Error::format("durations", e.to_string()))?;
        Ok(Self { params, durations })
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(SEGMENTER_FILE).is_file() && dir.join(DURATIONS_FILE).is_file()
    }
}

/// Per-recording supervised fits pooled by their mean, plus duration
/// statistics of the reference intervals.
pub fn train_segmenter(m: &DatasetManifest, cfg: &PipelineConfig) -> Result<(SegmenterModel, String)> {
    let train: Vec<&ManifestEntry> = m.with_split(SplitTag::Train).filter(|e| e.segmentable()).collect();
    if train.is_empty() {
        return Err(Error::Missing("no training entries for the segmenter".into()));
    }
    let fits: Vec<(String, Prepared, MsarParams)> = train
        .par_iter()
        .map(|e| {
            if e.annotation.is_none() {
                return Err(Error::Missing(format!(
                    "{} has no annotation; segmenter training needs reference labels",
                    e.path.display()
                )));
            }
            let p = load_entry(e, cfg, true).map_err(|err| with_entry(e, err))?;
            let track = p.track.as_ref().expect("annotation checked above");
            let fit = fit_recording(&p.recording.samples, cfg.sample_rate, track, &cfg.msar)
                .map_err(|err| with_entry(e, err))?;
            Ok((e.id(), p, fit))
        })
        .collect::<Result<_>>()?;
    let params = pool_parameters(&fits.iter().map(|f| f.2.clone()).collect::<Vec<_>>())?;
    let durations = DurationStats::from_tracks(
        fits.iter()
            .map(|(_, p, _)| (p.track.as_ref().expect("annotated"), cfg.sample_rate)),
    )?;
    let mut log = String::from("id,samples,r\n");
    for (id, p, f) in &fits {
        let _ = writeln!(log, "{id},{},{:e}", p.recording.len(), f.r[0]);
    }
    Ok((SegmenterModel { params, durations }, log))
}

pub fn cmd_train_segmenter(manifest: &Path, cfg: &PipelineConfig, out: &Path) -> Result<String> {
    let m = read_manifest(manifest)?;
    let (model, log) = train_segmenter(&m, cfg)?;
    model.save(out)?;
    write_text(&out.join("segmenter_log.csv"), &log)?;
    cfg.write_resolved(out)?;
    Ok(format!(
        "segmenter trained on {} recordings; written to {}\n",
        log.lines().count() - 1,
        out.display()
    ))
}

/// Decoded per-sample regimes of one conditioned signal.
pub fn segment_signal(y: &[f64], fs: u32, model: &SegmenterModel, seg: &SegmentConfig, method: SegmentMethod) -> Result<Vec<usize>> {
    let ssv = model.params.to_state_space();
    let k = model.params.k();
    let mut skf_cfg = SkfConfig::for_signal(y, fs, ssv.dim());
    skf_cfg.initial_probs = seg.initial_probs.clone();
    let filtered = skf(y, &ssv, &model.params.z, &skf_cfg)?;
    match method {
        SegmentMethod::Skf => Ok(decode_map_states(&filtered.m)),
        SegmentMethod::Sks => Ok(decode_map_states(&sks(&filtered, &ssv, &model.params.z)?.m)),
        SegmentMethod::SkfViterbi => {
            let hr = estimate_heart_rate(y, fs as f64)?;
            if hr.low_confidence {
                log::warn!("heart-rate estimate {:.1} bpm has low confidence {:.2}", hr.hr, hr.confidence);
            }
            let dm = build_duration_model(&hr, &model.durations, fs as f64)?;
            let pi0 = seg.viterbi_initial.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
            Ok(skf_viterbi(&filtered.log_m, &dm, &cyclic_next_state(k), &pi0)?.states)
        }
    }
}

/// Compares predicted labels with a reference track over the track's span.
pub fn score_against(pred: &[usize], track: &AnnotationTrack) -> Result<SegConfusion> {
    if track.end() > pred.len() {
        return Err(Error::validation(
            None,
            format!("annotation ends at sample {} beyond the {}-sample signal", track.end(), pred.len()),
        ));
    }
    segmentation_confusion(&pred[track.start()..track.end()], &track.states(), HEART_STATES)
}

struct SegReport {
    text: String,
    per_recording: String,
}

fn seg_report(scored: &[(String, Option<SegConfusion>)]) -> Result<(SegReport, Option<SegConfusion>)> {
    let mut pooled: Option<SegConfusion> = None;
    let mut per_recording = String::from("id,acc\n");
    let mut accs = Vec::new();
    for (id, c) in scored {
        let acc = c.as_ref().and_then(|c| seg_metrics(c).acc);
        accs.push(acc);
        let _ = writeln!(per_recording, "{id},{}", acc.map(|a| format!("{a:.10}")).unwrap_or_default());
        if let Some(c) = c {
            match pooled.as_mut() {
                Some(p) => p.merge(c)?,
                None => pooled = Some(c.clone()),
            }
        }
    }
    let mut text = String::new();
    if let Some(p) = &pooled {
        text.push_str(&format_seg_table(&seg_metrics(p)));
    }
    if let Some((m, s)) = mean_sd(&accs) {
        let _ = writeln!(text, "per-recording accuracy {:.2} ± {:.2}%", 100.0 * m, 100.0 * s);
    }
    Ok((SegReport { text, per_recording }, pooled))
}

fn write_seg_outputs(out: &Path, report: &SegReport, pooled: Option<&SegConfusion>) -> Result<()> {
    write_text(&out.join("segmentation_recordings.csv"), &report.per_recording)?;
    if let Some(p) = pooled {
        write_seg_report(&seg_metrics(p), &out.join("segmentation_metrics.csv"))?;
    }
    Ok(())
}

fn segmenter_for(m: &DatasetManifest, cfg: &PipelineConfig, model_dir: Option<&Path>) -> Result<SegmenterModel> {
    match model_dir {
        Some(d) if SegmenterModel::exists(d) => SegmenterModel::load(d),
        _ => {
            if m.with_split(SplitTag::Train).next().is_none() {
                return Err(Error::Missing(
                    "no trained segmenter (msar.json, durations.json) and no training entries; run `train --target segmenter` or add train rows".into(),
                ));
            }
            log::info!("no saved segmenter found; training from the manifest's training split");
            Ok(train_segmenter(m, cfg)?.0)
        }
    }
}

fn test_entries(m: &DatasetManifest) -> Result<Vec<&ManifestEntry>> {
    let v: Vec<&ManifestEntry> = m.with_split(SplitTag::Test).filter(|e| e.segmentable()).collect();
    if v.is_empty() {
        return Err(Error::Missing("manifest has no test entries".into()));
    }
    Ok(v)
}

pub struct SegmentOutcome {
    pub summary: String,
    pub pooled: Option<SegConfusion>,
}

/// Segment every test entry, write `<id>.seg.csv` files and metric reports.
pub fn cmd_segment(
    manifest: &Path,
    cfg: &PipelineConfig,
    method: SegmentMethod,
    model_dir: Option<&Path>,
    out: &Path,
) -> Result<SegmentOutcome> {
    let m = read_manifest(manifest)?;
    let tests = test_entries(&m)?;
    let model = segmenter_for(&m, cfg, model_dir)?;
    ensure_dir(out)?;
    let scored: Vec<(String, Option<SegConfusion>)> = tests
        .par_iter()
        .map(|e| {
            let p = load_entry(e, cfg, true).map_err(|err| with_entry(e, err))?;
            let states = segment_signal(&p.recording.samples, cfg.sample_rate, &model, &cfg.segment, method)
                .map_err(|err| with_entry(e, err))?;
            save_intervals(&intervals_from_states(&states), &out.join(format!("{}.seg.csv", e.id())))?;
            let c = p.track.as_ref().map(|t| score_against(&states, t)).transpose()?;
            Ok((e.id(), c))
        })
        .collect::<Result<_>>()?;
    let (report, pooled) = seg_report(&scored)?;
    write_seg_outputs(out, &report, pooled.as_ref())?;
    cfg.write_resolved(out)?;
    Ok(SegmentOutcome {
        summary: format!("method {method}, {} recordings\n{}", scored.len(), report.text),
        pooled,
    })
}

/// Scores existing `<id>.seg.csv` files against the manifest's annotations.
pub fn cmd_evaluate(manifest: &Path, predictions: &Path, cfg: &PipelineConfig, out: &Path) -> Result<String> {
    let m = read_manifest(manifest)?;
    ensure_dir(out)?;
    let scored: Vec<(String, Option<SegConfusion>)> = m
        .entries
        .iter()
        .filter(|e| e.annotation.is_some() && e.segmentable())
        .filter_map(|e| {
            let path = predictions.join(format!("{}.seg.csv", e.id()));
            path.is_file().then(|| (e, path))
        })
        .map(|(e, path)| {
            let raw = load_recording(&e.path, SignalFormat::from_path(&e.path))?;
            let track = load_annotations(e.annotation.as_ref().expect("filtered"))?.rescale(raw.sample_rate, cfg.sample_rate)?;
            let states: Vec<usize> = load_segmentation(&path)?
                .iter()
                .flat_map(|iv| std::iter::repeat(iv.state).take(iv.len()))
                .collect();
            Ok((e.id(), Some(score_against(&states, &track)?)))
        })
        .collect::<Result<_>>()?;
    if scored.is_empty() {
        return Err(Error::Missing(format!("no `<id>.seg.csv` files in {} match annotated entries", predictions.display())));
    }
    let (report, pooled) = seg_report(&scored)?;
    write_seg_outputs(out, &report, pooled.as_ref())?;
    cfg.write_resolved(out)?;
    Ok(format!("{} recordings\n{}", scored.len(), report.text))
}

fn extractor(cfg: &PipelineConfig) -> Result<MfccExtractor> {
    MfccExtractor::new(&cfg.mfcc, cfg.sample_rate as f64)
}

/// Beat (or one-second window) features of one entry.
fn entry_units(
    e: &ManifestEntry,
    p: &Prepared,
    ex: &MfccExtractor,
    cfg: &PipelineConfig,
    segmenter: Option<&SegmenterModel>,
) -> Result<Vec<crate::hmm::BeatSegment>> {
    let label = Some(e.label);
    let min_frames = cfg.hmm.n_states;
    if let Some(t) = &p.track {
        return beat_segments(&p.recording, t, ex, min_frames, label);
    }
    if e.split == SplitTag::Train && e.label == ClassLabel::XFactor {
        return window_xfactor(&p.recording, ex, label);
    }
    let model = segmenter.ok_or_else(|| {
        Error::Missing(format!(
            "{} has no annotation and no trained segmenter is available to find its beats",
            e.path.display()
        ))
    })?;
    let states = segment_signal(&p.recording.samples, cfg.sample_rate, model, &cfg.segment, SegmentMethod::SkfViterbi)?;
    let track = AnnotationTrack::new(intervals_from_states(&states))?;
    beat_segments(&p.recording, &track, ex, min_frames, label)
}

/// One HMM per class present in the training split.
pub fn train_classifier(m: &DatasetManifest, cfg: &PipelineConfig) -> Result<(ClassifierBank, String)> {
    let ex = extractor(cfg)?;
    let train: Vec<&ManifestEntry> = m
        .with_split(SplitTag::Train)
        .filter(|e| e.label != ClassLabel::Noise)
        .collect();
    if train.is_empty() {
        return Err(Error::Missing("no training entries for the classifier".into()));
    }
    let units: Vec<Vec<crate::hmm::BeatSegment>> = train
        .par_iter()
        .map(|e| {
            if e.annotation.is_none() && e.label != ClassLabel::XFactor {
                return Err(Error::Missing(format!(
                    "{} has no annotation; classifier training needs beat boundaries",
                    e.path.display()
                )));
            }
            let p = load_entry(e, cfg, true).map_err(|err| with_entry(e, err))?;
            entry_units(e, &p, &ex, cfg, None).map_err(|err| with_entry(e, err))
        })
        .collect::<Result<_>>()?;
    let mut by_class: BTreeMap<ClassLabel, Vec<crate::mfcc::FeatureSequence>> = BTreeMap::new();
    for u in units.into_iter().flatten() {
        by_class.entry(u.label.expect("training units are labelled")).or_default().push(u.features);
    }
    let mut models = BTreeMap::new();
    let mut log = String::from("class,iteration,loglik\n");
    for (class, seqs) in &by_class {
        let (model, report) = train_hmm(seqs, &cfg.hmm)?;
        for (i, ll) in report.loglik.iter().enumerate() {
            let _ = writeln!(log, "{class},{i},{ll:.10e}");
        }
        log::info!("{class}: {} sequences, converged {}", seqs.len(), report.converged);
        models.insert(*class, model);
    }
    let bank = ClassifierBank::new(cfg.mfcc.fingerprint(cfg.sample_rate as f64), models)?;
    Ok((bank, log))
}

pub fn cmd_train_classifier(manifest: &Path, cfg: &PipelineConfig, out: &Path) -> Result<String> {
    let m = read_manifest(manifest)?;
    let (bank, log) = train_classifier(&m, cfg)?;
    ensure_dir(out)?;
    bank.save(&out.join(CLASSIFIER_FILE))?;
    write_text(&out.join("classifier_log.csv"), &log)?;
    cfg.write_resolved(out)?;
    let classes: Vec<&str> = bank.models.keys().map(ClassLabel::as_str).collect();
    Ok(format!("classifier models [{}] written to {}\n", classes.join(", "), out.display()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyOutcome {
    pub summary: String,
    pub beat_metrics: Option<ClassMetrics>,
    pub recording_metrics: Option<ClassMetrics>,
    pub recordings: usize,
}

#[derive(Default)]
struct PlainCounts {
    tp: u64,
    fp: u64,
    tn: u64,
    fn_: u64,
}

impl PlainCounts {
    fn add(&mut self, truth: Option<ClassLabel>, pred: ClassLabel) {
        match (truth, pred) {
            (Some(ClassLabel::Abnormal), ClassLabel::Abnormal) => self.tp += 1,
            (Some(ClassLabel::Abnormal), ClassLabel::Normal) => self.fn_ += 1,
            (Some(ClassLabel::Normal), ClassLabel::Abnormal) => self.fp += 1,
            (Some(ClassLabel::Normal), ClassLabel::Normal) => self.tn += 1,
            _ => {}
        }
    }

    fn metrics(&self) -> Option<ClassMetrics> {
        class_metrics_plain(self.tp, self.fp, self.tn, self.fn_).ok()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.10}")).unwrap_or_default()
}

fn metric_rows(level: &str, m: &ClassMetrics, out: &mut String) {
    let _ = writeln!(out, "{level},se,{}", opt(m.se));
    let _ = writeln!(out, "{level},ppv,{}", opt(m.ppv));
    let _ = writeln!(out, "{level},acc,{}", opt(Some(m.acc)));
    let _ = writeln!(out, "{level},f1,{}", opt(m.f1));
}

/// Beat- and recording-level decisions for every test entry.
pub fn cmd_classify(
    manifest: &Path,
    cfg: &PipelineConfig,
    model_dir: Option<&Path>,
    out: &Path,
) -> Result<ClassifyOutcome> {
    let m = read_manifest(manifest)?;
    let tests: Vec<&ManifestEntry> = m.with_split(SplitTag::Test).filter(|e| e.segmentable()).collect();
    if tests.is_empty() {
        return Err(Error::Missing("manifest has no test entries".into()));
    }
    let bank = match model_dir.map(|d| d.join(CLASSIFIER_FILE)) {
        Some(p) if p.is_file() => ClassifierBank::load(&p)?,
        _ => {
            if m.with_split(SplitTag::Train).next().is_none() {
                return Err(Error::Missing(
                    "no trained classifier (classifier.json) and no training entries; run `train --target classifier` or add train rows".into(),
                ));
            }
            train_classifier(&m, cfg)?.0
        }
    };
    let fingerprint = cfg.mfcc.fingerprint(cfg.sample_rate as f64);
    if bank.feature_fingerprint != fingerprint {
        return Err(Error::Config(format!(
            "classifier was trained with `{}` but the configuration gives `{fingerprint}`",
            bank.feature_fingerprint
        )));
    }
    let use_x = cfg.classify.xfactor;
    let needed = [ClassLabel::Normal, ClassLabel::Abnormal]
        .into_iter()
        .chain(use_x.then_some(ClassLabel::XFactor));
    for c in needed {
        if !bank.models.contains_key(&c) {
            return Err(Error::Missing(format!("classifier bank has no {c} model")));
        }
    }
    let segmenter = model_dir.filter(|d| SegmenterModel::exists(d)).map(SegmenterModel::load).transpose()?;
    let ex = extractor(cfg)?;
    ensure_dir(out)?;

    type Decided = (Vec<(usize, ClassLabel, BTreeMap<ClassLabel, Option<f64>>)>, Option<ClassLabel>);
    let decided: Vec<Decided> = tests
        .par_iter()
        .map(|e| {
            let p = load_entry(e, cfg, true).map_err(|err| with_entry(e, err))?;
            let units = entry_units(e, &p, &ex, cfg, segmenter.as_ref()).map_err(|err| with_entry(e, err))?;
            let mut beats = Vec::new();
            for (i, u) in units.iter().enumerate() {
                match classify_beat(&bank, &u.features, use_x) {
                    Ok(d) => beats.push((i, d.label, d.scores)),
                    Err(Error::Unclassifiable(msg)) => log::warn!("{msg}"),
                    Err(err) => return Err(err),
                }
            }
            let labels: Vec<ClassLabel> = beats.iter().map(|b| b.1).collect();
            let rec = classify_recording(&labels).ok();
            if rec.is_none() {
                log::warn!("{}: no beat could be classified", e.id());
            }
            Ok((beats, rec))
        })
        .collect::<Result<_>>()?;

    let mut beat_csv = String::from("id,beat,truth,predicted,score_normal,score_abnormal,score_xfactor\n");
    let mut rec_csv = String::from("id,truth,quality,predicted,beats\n");
    let mut beat_counts = PlainCounts::default();
    let mut rec_counts = PlainCounts::default();
    let weights = if use_x {
        let derived = || quality_weights(&m);
        let (wa, wn) = match (cfg.classify.abnormal_weights, cfg.classify.normal_weights) {
            (Some(a), Some(n)) => (a, n),
            _ => derived()?,
        };
        Some((XFactorConfusion::new(wa, wn)?, XFactorConfusion::new(wa, wn)?))
    } else {
        None
    };
    let mut xconf = weights;
    for (e, (beats, rec)) in tests.iter().zip(&decided) {
        let truth = e.reference_class();
        let truth_s = truth.map(|t| t.as_str()).unwrap_or("");
        for (i, label, scores) in beats {
            let s = |c: ClassLabel| opt(scores.get(&c).copied().flatten());
            let _ = writeln!(
                beat_csv,
                "{},{i},{truth_s},{label},{},{},{}",
                e.id(),
                s(ClassLabel::Normal),
                s(ClassLabel::Abnormal),
                s(ClassLabel::XFactor)
            );
            beat_counts.add(truth, *label);
            if let (Some((xb, _)), Some(t)) = (xconf.as_mut(), truth) {
                xb.record(t, e.quality, *label)?;
            }
        }
        let pred_s = rec.map(|r| r.as_str()).unwrap_or("");
        let _ = writeln!(rec_csv, "{},{truth_s},{},{pred_s},{}", e.id(), e.quality, beats.len());
        if let Some(r) = rec {
            rec_counts.add(truth, *r);
            if let (Some((_, xr)), Some(t)) = (xconf.as_mut(), truth) {
                xr.record(t, e.quality, *r)?;
            }
        }
    }
    write_text(&out.join("beats.csv"), &beat_csv)?;
    write_text(&out.join("recordings.csv"), &rec_csv)?;

    let beat_metrics = beat_counts.metrics();
    let recording_metrics = rec_counts.metrics();
    let mut metrics_csv = String::from("level,metric,value\n");
    let mut summary = format!("{} recordings, {} beats\n", tests.len(), decided.iter().map(|d| d.0.len()).sum::<usize>());
    for (level, mm) in [("beat", &beat_metrics), ("recording", &recording_metrics)] {
        if let Some(mm) = mm {
            metric_rows(level, mm, &mut metrics_csv);
            let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
            let _ = writeln!(
                summary,
                "{level}: Se {}%  P+ {}%  Acc {}%  F1 {}%",
                pct(mm.se),
                pct(mm.ppv),
                pct(Some(mm.acc)),
                pct(mm.f1)
            );
        }
    }
    if let Some((xb, xr)) = &xconf {
        for (level, x) in [("beat", xb), ("recording", xr)] {
            let xm = class_metrics_xfactor(x);
            let pf = penalized_f1(x, cfg.classify.alpha).ok();
            let _ = writeln!(metrics_csv, "{level},xfactor_se,{}", opt(xm.se));
            let _ = writeln!(metrics_csv, "{level},xfactor_sp,{}", opt(xm.sp));
            let _ = writeln!(metrics_csv, "{level},xfactor_macc,{}", opt(xm.macc));
            let _ = writeln!(metrics_csv, "{level},penalized_f1,{}", opt(pf));
            let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
            let _ = writeln!(
                summary,
                "{level} (X-Factor): Se {}%  Sp {}%  MAcc {}%  F1 {}%",
                pct(xm.se),
                pct(xm.sp),
                pct(xm.macc),
                pct(pf)
            );
        }
    }
    write_text(&out.join("classification_metrics.csv"), &metrics_csv)?;
    cfg.write_resolved(out)?;
    Ok(ClassifyOutcome {
        summary,
        beat_metrics,
        recording_metrics,
        recordings: tests.len(),
    })
}

/// Systole replaced by a loud high-pitched resonance.
fn murmur_params(normal: &MsarParams) -> MsarParams {
    let mut p = normal.clone();
    let w = 2.0 * std::f64::consts::PI * 0.2;
    p.phi[1] = vec![2.0 * 0.9 * w.cos(), -0.81, 0.0, 0.0];
    p.q[1] = 0.02;
    p
}

/// Heart-like synthetic recordings with annotations and a train/test manifest.
pub fn cmd_synth(cfg: &PipelineConfig, out: &Path) -> Result<String> {
    let sc = &cfg.synth;
    if sc.train + sc.test == 0 || sc.cycles == 0 {
        return Err(Error::Config("synth needs at least one recording and one cycle".into()));
    }
    if !(sc.noise >= 0.0) || !(0.0..1.0).contains(&sc.jitter) {
        return Err(Error::Config("synth.noise must be ≥ 0 and synth.jitter in [0, 1)".into()));
    }
    ensure_dir(out)?;
    let mut params = heart_like_params();
    params.r = vec![sc.noise; params.k()];
    let murmur = murmur_params(&params);
    let fs = 1000;
    let entries: Vec<ManifestEntry> = (0..sc.train + sc.test)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let abnormal = sc.abnormal_every > 0 && i % sc.abnormal_every == 0;
            let plan = cyclic_plan(&HEART_LIKE_DURATIONS, sc.jitter, sc.cycles, seed);
            let syn = generate_msar(&SynthSpec {
                params: if abnormal { murmur.clone() } else { params.clone() },
                plan: SegmentPlan::Explicit(plan),
                seed,
            })?;
            let id = format!("synth_{i:04}");
            let rec_path = out.join(format!("{id}.csv"));
            let ann_path = out.join(format!("{id}.ann.csv"));
            save_csv_recording(&syn.recording(&id, fs)?, &rec_path)?;
            save_annotations(&syn.annotation()?, &ann_path)?;
            let label = if abnormal { ClassLabel::Abnormal } else { ClassLabel::Normal };
            let split = if i < sc.train { SplitTag::Train } else { SplitTag::Test };
            Ok(ManifestEntry::new(
                PathBuf::from(format!("{id}.csv")),
                Some(PathBuf::from(format!("{id}.ann.csv"))),
                label,
                split,
            ))
        })
        .collect::<Result<_>>()?;
    save_manifest(&DatasetManifest::new(entries)?, &out.join("manifest.csv"))?;
    cfg.write_resolved(out)?;
    Ok(format!("wrote {} train and {} test recordings to {}\n", sc.train, sc.test, out.display()))
}
