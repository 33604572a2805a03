//! Recordings, reference annotations, dataset manifests and resampling.
//!
//! Regime labels are 0-based in memory (`0 = S1, 1 = Sys, 2 = S2, 3 = Dia`)
//! and 1-based in every file format.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Number of heart-sound regimes in a cardiac cycle.
pub const HEART_STATES: usize = 4;

/// Short names of the four regimes, indexed by 0-based label.
pub const STATE_NAMES: [&str; HEART_STATES] = ["S1", "Sys", "S2", "Dia"];

/// A sampled one-dimensional signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl Recording {
    pub fn new(id: impl Into<String>, sample_rate: u32, samples: Vec<f64>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::format("sample_rate", "sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::format("data", "empty payload"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::format("data", format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            id: id.into(),
            sample_rate,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Same metadata, new samples (sample rate unchanged).
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        Recording::new(self.id.clone(), self.sample_rate, samples)
    }
}

/// On-disk encodings accepted by [`load_recording`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalFormat {
    /// PCM 16-bit little-endian, one channel.
    Wav16Mono,
    /// Text: a `sample_rate=<int>` header line, then one sample per line.
    CsvFloat,
}

impl SignalFormat {
    /// Guess the format from a file extension (`.wav` or anything else as CSV).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("wav") => SignalFormat::Wav16Mono,
            _ => SignalFormat::CsvFloat,
        }
    }
}

fn id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn load_recording(path: &Path, format: SignalFormat) -> Result<Recording> {
    let id = id_from_path(path);
    match format {
        SignalFormat::Wav16Mono => load_wav(path, id),
        SignalFormat::CsvFloat => load_csv_float(path, id),
    }
}

fn load_wav(path: &Path, id: String) -> Result<Recording> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::format("header", other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(
            "channels",
            format!("multi-channel unsupported ({} channels)", spec.channels),
        ));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format(
            "bits_per_sample",
            format!(
                "expected 16-bit integer PCM, found {} bits {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format("data", e.to_string()))?;
    Recording::new(id, spec.sample_rate, samples)
}

fn load_csv_float(path: &Path, id: String) -> Result<Recording> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .ok_or_else(|| Error::format("sample_rate", "missing header line"))?;
    let rate = header
        .trim()
        .strip_prefix("sample_rate=")
        .ok_or_else(|| Error::format("sample_rate", format!("expected `sample_rate=<int>`, found `{header}`")))?
        .trim()
        .parse::<u32>()
        .map_err(|e| Error::format("sample_rate", e.to_string()))?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v = line
            .parse::<f64>()
            .map_err(|e| Error::format(format!("data line {}", i + 2), e.to_string()))?;
        samples.push(v);
    }
    Recording::new(id, rate, samples)
}

/// Write a recording in the CSV-float format.
pub fn save_csv_recording(rec: &Recording, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "sample_rate={}", rec.sample_rate).map_err(io)?;
    for s in &rec.samples {
        writeln!(w, "{s}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Write a recording as 16-bit mono PCM; samples are clipped to [-1, 1).
pub fn save_wav_recording(rec: &Recording, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rec.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::format("wav", other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &rec.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(to_err)?;
    }
    w.finalize().map_err(to_err)
}

/// Half-open sample interval `[start, end)` labeled with a 0-based regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
    pub state: usize,
}

impl Interval {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Cyclic successor of a 0-based regime among `k` regimes.
pub fn cyclic_successor(state: usize, k: usize) -> usize {
    (state + 1) % k
}

/// A validated reference segmentation: contiguous, non-empty intervals whose
/// labels follow S1 → Sys → S2 → Dia → S1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationTrack {
    intervals: Vec<Interval>,
}

impl AnnotationTrack {
    pub fn new(intervals: Vec<Interval>) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::validation(None, "annotation track has no intervals"));
        }
        check_contiguous(&intervals)?;
        for (row, pair) in intervals.windows(2).enumerate() {
            let (a, b) = (pair[0].state, pair[1].state);
            if b != cyclic_successor(a, HEART_STATES) {
                return Err(Error::validation(
                    Some(row + 2),
                    format!("illegal transition {}→{}", a + 1, b + 1),
                ));
            }
        }
        Ok(Self { intervals })
    }

    /// Build a track from a per-sample label sequence starting at sample 0.
    pub fn from_states(states: &[usize]) -> Result<Self> {
        Self::new(intervals_from_states(states))
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn start(&self) -> usize {
        self.intervals[0].start
    }

    pub fn end(&self) -> usize {
        self.intervals[self.intervals.len() - 1].end
    }

    /// Per-sample labels over `[start, end)`.
    pub fn states(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.end() - self.start());
        for iv in &self.intervals {
            out.extend(std::iter::repeat(iv.state).take(iv.len()));
        }
        out
    }

    /// Complete cardiac cycles: from each S1 onset to the next S1 onset.
    pub fn beats(&self) -> Vec<std::ops::Range<usize>> {
        let onsets: Vec<usize> = self
            .intervals
            .iter()
            .filter(|iv| iv.state == 0)
            .map(|iv| iv.start)
            .collect();
        onsets.windows(2).map(|w| w[0]..w[1]).collect()
    }

    /// Map boundaries from `from_rate` to `to_rate` (floor of the scaled index).
    pub fn rescale(&self, from_rate: u32, to_rate: u32) -> Result<Self> {
        if from_rate == to_rate {
            return Ok(self.clone());
        }
        let scale = |s: usize| ((s as u128 * to_rate as u128) / from_rate as u128) as usize;
        let intervals = self
            .intervals
            .iter()
            .map(|iv| Interval {
                start: scale(iv.start),
                end: scale(iv.end),
                state: iv.state,
            })
            .collect();
        Self::new(intervals)
    }
}

fn check_contiguous(intervals: &[Interval]) -> Result<()> {
    for (row, iv) in intervals.iter().enumerate() {
        if iv.end <= iv.start {
            return Err(Error::validation(
                Some(row + 1),
                format!("interval end {} not after start {}", iv.end, iv.start),
            ));
        }
        if iv.state >= HEART_STATES {
            return Err(Error::validation(
                Some(row + 1),
                format!("state {} outside 1..{HEART_STATES}", iv.state + 1),
            ));
        }
        if row > 0 {
            let prev = intervals[row - 1].end;
            if iv.start > prev {
                return Err(Error::validation(Some(row + 1), format!("gap at sample {prev}")));
            }
            if iv.start < prev {
                return Err(Error::validation(Some(row + 1), format!("overlap at sample {}", iv.start)));
            }
        }
    }
    Ok(())
}

/// Run-length encode a per-sample label sequence into intervals.
pub fn intervals_from_states(states: &[usize]) -> Vec<Interval> {
    let mut out: Vec<Interval> = Vec::new();
    for (t, &s) in states.iter().enumerate() {
        match out.last_mut() {
            Some(last) if last.state == s => last.end = t + 1,
            _ => out.push(Interval {
                start: t,
                end: t + 1,
                state: s,
            }),
        }
    }
    out
}

fn read_interval_rows(path: &Path) -> Result<Vec<Interval>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = i + 1;
        if row == 1 && rec.get(0) == Some("start") {
            continue;
        }
        if rec.len() != 3 {
            return Err(Error::validation(Some(row), format!("expected 3 columns, found {}", rec.len())));
        }
        let field = |k: usize, name: &str| -> Result<usize> {
            rec[k]
                .parse::<usize>()
                .map_err(|e| Error::validation(Some(row), format!("bad {name} `{}`: {e}", &rec[k])))
        };
        let start = field(0, "start")?;
        let end = field(1, "end")?;
        let state = field(2, "state")?;
        if !(1..=HEART_STATES).contains(&state) {
            return Err(Error::validation(Some(row), format!("state {state} outside 1..{HEART_STATES}")));
        }
        out.push(Interval {
            start,
            end,
            state: state - 1,
        });
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::io(path, source),
            _ => unreachable!(),
        }
    } else {
        Error::format(path.display().to_string(), e.to_string())
    }
}

/// Load and validate a reference annotation CSV (`start,end,state`).
pub fn load_annotations(path: &Path) -> Result<AnnotationTrack> {
    AnnotationTrack::new(read_interval_rows(path)?)
}

/// Load a predicted segmentation. Only contiguity is enforced, since filtered
/// MAP labels need not respect the cyclic order.
pub fn load_segmentation(path: &Path) -> Result<Vec<Interval>> {
    let rows = read_interval_rows(path)?;
    check_contiguous(&rows)?;
    Ok(rows)
}

/// Write intervals as `start,end,state` with 1-based states.
pub fn save_intervals(intervals: &[Interval], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["start", "end", "state"]).map_err(|e| csv_err(path, e))?;
    for iv in intervals {
        w.write_record([iv.start.to_string(), iv.end.to_string(), (iv.state + 1).to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_annotations(track: &AnnotationTrack, path: &Path) -> Result<()> {
    save_intervals(track.intervals(), path)
}

/// Recording-level class labels of the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Normal,
    Abnormal,
    XFactor,
    Noise,
}

impl ClassLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClassLabel::Normal => "normal",
            ClassLabel::Abnormal => "abnormal",
            ClassLabel::XFactor => "xfactor",
            ClassLabel::Noise => "noise",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(ClassLabel::Normal),
            "abnormal" => Ok(ClassLabel::Abnormal),
            "xfactor" => Ok(ClassLabel::XFactor),
            "noise" => Ok(ClassLabel::Noise),
            other => Err(Error::validation(None, format!("unknown class label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train,
    Test,
    Fold(usize),
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitTag::Train => f.write_str("train"),
            SplitTag::Test => f.write_str("test"),
            SplitTag::Fold(k) => write!(f, "fold-{k}"),
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "test" => Ok(SplitTag::Test),
            _ => s
                .strip_prefix("fold-")
                .and_then(|k| k.parse().ok())
                .map(SplitTag::Fold)
                .ok_or_else(|| Error::validation(None, format!("unknown split tag `{s}`"))),
        }
    }
}

/// Signal-quality grade used by the X-Factor metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Quality {
    #[default]
    Good,
    Poor,
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quality::Good => "good",
            Quality::Poor => "poor",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub annotation: Option<PathBuf>,
    pub label: ClassLabel,
    pub split: SplitTag,
    /// Optional column; defaults to good.
    pub quality: Quality,
    /// Underlying normal/abnormal truth of an X-Factor entry, when known.
    pub truth: Option<ClassLabel>,
}

impl ManifestEntry {
    pub fn new(path: impl Into<PathBuf>, annotation: Option<PathBuf>, label: ClassLabel, split: SplitTag) -> Self {
        Self {
            path: path.into(),
            annotation,
            label,
            split,
            quality: Quality::Good,
            truth: None,
        }
    }

    pub fn id(&self) -> String {
        id_from_path(&self.path)
    }

    /// Normal/abnormal truth used by the confusion counts, if any.
    pub fn reference_class(&self) -> Option<ClassLabel> {
        match self.label {
            ClassLabel::Normal | ClassLabel::Abnormal => Some(self.label),
            ClassLabel::XFactor => self.truth,
            ClassLabel::Noise => None,
        }
    }

    /// Entries labeled noise are never segmented.
    pub fn segmentable(&self) -> bool {
        self.label != ClassLabel::Noise
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(e.path.clone()) {
                return Err(Error::validation(
                    Some(i + 1),
                    format!("duplicate entry `{}`", e.path.display()),
                ));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn with_split(&self, split: SplitTag) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Load a manifest CSV with columns `path,annotation,label,split` and the
/// optional trailing columns `quality,truth`. Relative paths are resolved
/// against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let expected = ["path", "annotation", "label", "split"];
    if headers.len() < 4 || headers.iter().take(4).ne(expected) {
        return Err(Error::format("header", format!("expected `{}`", expected.join(","))));
    }
    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut entries = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = i + 1;
        let with_row = |e: Error| match e {
            Error::Validation { message, .. } => Error::validation(Some(row), message),
            other => other,
        };
        if rec.len() < 4 {
            return Err(Error::validation(Some(row), "expected at least 4 columns"));
        }
        let annotation = (!rec[1].is_empty()).then(|| resolve(&rec[1]));
        let label: ClassLabel = rec[2].parse().map_err(with_row)?;
        let split: SplitTag = rec[3].parse().map_err(with_row)?;
        let quality = match rec.get(4).unwrap_or("") {
            "" | "good" => Quality::Good,
            "poor" => Quality::Poor,
            other => return Err(Error::validation(Some(row), format!("unknown quality `{other}`"))),
        };
        let truth = match rec.get(5).unwrap_or("") {
            "" => None,
            s => {
                let t: ClassLabel = s.parse().map_err(with_row)?;
                if !matches!(t, ClassLabel::Normal | ClassLabel::Abnormal) {
                    return Err(Error::validation(Some(row), format!("truth must be normal or abnormal, found `{s}`")));
                }
                Some(t)
            }
        };
        entries.push(ManifestEntry {
            path: resolve(&rec[0]),
            annotation,
            label,
            split,
            quality,
            truth,
        });
    }
    DatasetManifest::new(entries)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let err = |e| csv_err(path, e);
    w.write_record(["path", "annotation", "label", "split", "quality", "truth"])
        .map_err(err)?;
    for e in &manifest.entries {
        w.write_record([
            e.path.display().to_string(),
            e.annotation.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            e.label.to_string(),
            e.split.to_string(),
            e.quality.to_string(),
            e.truth.map(|t| t.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Zero-crossings of the anti-alias sinc kept on each side of the centre tap.
const RESAMPLE_LOBES: u64 = 16;

/// Rational down-sampling: Blackman-windowed sinc low-pass at the target
/// Nyquist, evaluated in polyphase form. Output length is
/// `floor(len * target / source)`.
pub fn resample(rec: &Recording, target_rate: u32) -> Result<Recording> {
    if target_rate == 0 {
        return Err(Error::Config("target rate must be positive".into()));
    }
    if target_rate > rec.sample_rate {
        return Err(Error::Config(format!(
            "unsupported rate: upsampling {} Hz to {target_rate} Hz",
            rec.sample_rate
        )));
    }
    if target_rate == rec.sample_rate {
        return Ok(rec.clone());
    }
    let g = gcd(rec.sample_rate as u64, target_rate as u64);
    let up = (target_rate as u64 / g) as usize;
    let down = (rec.sample_rate as u64 / g) as usize;

    // Taps live on the up-sampled grid; cutoff is half the target rate.
    let half = (RESAMPLE_LOBES as usize) * down;
    let cutoff = 0.5 / down as f64;
    let mut taps: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let n = i as f64 - half as f64;
            let x = 2.0 * cutoff * n;
            let sinc = if x == 0.0 {
                1.0
            } else {
                (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
            };
            let w = 0.42
                + 0.5 * (std::f64::consts::PI * n / half as f64).cos()
                + 0.08 * (2.0 * std::f64::consts::PI * n / half as f64).cos();
            2.0 * cutoff * sinc * w
        })
        .collect();
    // Unit DC gain in every polyphase branch.
    for phase in 0..up {
        let s: f64 = taps.iter().skip(phase).step_by(up).sum();
        if s != 0.0 {
            taps.iter_mut().skip(phase).step_by(up).for_each(|t| *t /= s);
        }
    }

    let n = rec.samples.len();
    let out_len = (n as u128 * up as u128 / down as u128) as usize;
    let up_len = (n * up) as i64;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let centre = (m * down) as i64;
        // tap index i corresponds to offset k = i - half; input at centre - k
        let mut acc = 0.0;
        let first = centre - half as i64;
        // smallest u >= first with u % up == 0
        let mut u = first.max(0);
        let rem = u % up as i64;
        if rem != 0 {
            u += up as i64 - rem;
        }
        let last = (centre + half as i64).min(up_len - 1);
        while u <= last {
            let i = (centre - u + half as i64) as usize;
            acc += taps[i] * rec.samples[(u / up as i64) as usize];
            u += up as i64;
        }
        out.push(acc);
    }
    Recording::new(rec.id.clone(), target_rate, out)
}
