use std::fs;
use std::path::Path;

use heartseg::hmm::{beat_segments, segmental_kmeans_init, train_hmm, HmmConfig};
use heartseg::mfcc::{MfccConfig, MfccExtractor};
use heartseg::pipeline::{
    cmd_segment, cmd_synth, read_manifest, train_segmenter, PipelineConfig, SegmentMethod, SegmenterModel,
};
use heartseg::signal_io::{load_annotations, load_recording, ManifestEntry, SignalFormat};
use heartseg::synth::heart_like_params;
use heartseg::Error;

fn synth_config(train: usize, test: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.preprocess_signals = false;
    cfg.synth.train = train;
    cfg.synth.test = test;
    cfg
}

#[test]
fn segmenter_recovers_generating_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synth_config(10, 0);
    cfg.synth.noise = 1e-6;
    cmd_synth(&cfg, dir.path()).unwrap();
    let m = read_manifest(&dir.path().join("manifest.csv")).unwrap();
    let (model, log) = train_segmenter(&m, &cfg).unwrap();
    assert_eq!(log.lines().count(), 11);
    let truth = heart_like_params();
    for (j, (fit, want)) in model.params.phi.iter().zip(&truth.phi).enumerate() {
        for (a, b) in fit.iter().zip(want) {
            assert!((a - b).abs() <= 0.05, "regime {j}: {fit:?} vs {want:?}");
        }
    }
    for (fit, want) in model.params.z.iter().zip(&truth.z) {
        for (a, b) in fit.iter().zip(want) {
            assert!((a - b).abs() < 0.01, "{fit:?} vs {want:?}");
        }
    }
}

#[test]
fn observation_noise_attenuates_quiet_regimes() {
    // Least squares on noisy samples shrinks coefficients by roughly
    // var(x) / (var(x) + r); for systole that is 0.94 at r = 1e-4.
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth_config(10, 0);
    cmd_synth(&cfg, dir.path()).unwrap();
    let m = read_manifest(&dir.path().join("manifest.csv")).unwrap();
    let (model, _) = train_segmenter(&m, &cfg).unwrap();
    let truth = heart_like_params().phi[1][0];
    let var = 0.001 / (1.0 - truth * truth);
    let expected = truth * var / (var + 1e-4);
    let fitted = model.params.phi[1][0];
    assert!(fitted.abs() < truth.abs());
    assert!((fitted - expected).abs() < 0.03, "{fitted} vs {expected}");
}

#[test]
fn segmenter_model_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth_config(3, 0);
    cmd_synth(&cfg, dir.path()).unwrap();
    let m = read_manifest(&dir.path().join("manifest.csv")).unwrap();
    let (model, _) = train_segmenter(&m, &cfg).unwrap();
    let out = dir.path().join("model");
    model.save(&out).unwrap();
    assert!(SegmenterModel::exists(&out));
    assert_eq!(SegmenterModel::load(&out).unwrap(), model);
}

#[test]
fn unannotated_training_entry_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth_config(2, 0);
    cmd_synth(&cfg, dir.path()).unwrap();
    let manifest = dir.path().join("manifest.csv");
    let mut m = read_manifest(&manifest).unwrap();
    m.entries[1] = ManifestEntry {
        annotation: None,
        ..m.entries[1].clone()
    };
    let err = train_segmenter(&m, &cfg).unwrap_err();
    assert!(matches!(err, Error::Missing(_)), "{err}");
}

#[test]
fn segmentation_reports_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth_config(4, 2);
    cmd_synth(&cfg, dir.path()).unwrap();
    let manifest = dir.path().join("manifest.csv");
    let run = |name: &str| {
        let out = dir.path().join(name);
        cmd_segment(&manifest, &cfg, SegmentMethod::SkfViterbi, None, &out).unwrap();
        fs::read_to_string(out.join("segmentation_metrics.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn zero_iterations_return_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth_config(2, 0);
    cmd_synth(&cfg, dir.path()).unwrap();
    let mfcc = MfccConfig::default();
    let ex = MfccExtractor::new(&mfcc, 1000.0).unwrap();
    let mut seqs = Vec::new();
    for i in 0..2 {
        let base = dir.path().join(format!("synth_{i:04}"));
        let rec = load_recording(&base.with_extension("csv"), SignalFormat::CsvFloat).unwrap();
        let track = load_annotations(Path::new(&format!("{}.ann.csv", base.display()))).unwrap();
        seqs.extend(beat_segments(&rec, &track, &ex, 4, None).unwrap().into_iter().map(|b| b.features));
    }
    let hcfg = HmmConfig {
        n_mix: 2,
        max_iter: 0,
        ..HmmConfig::default()
    };
    let (model, report) = train_hmm(&seqs, &hcfg).unwrap();
    assert_eq!(model, segmental_kmeans_init(&seqs, &hcfg).unwrap());
    assert!(report.loglik.is_empty());
}
