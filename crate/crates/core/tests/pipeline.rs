mod common;

use std::path::Path;

use vader_core::encoder::{encode, TrainConfig};
use vader_core::pipeline::*;
use vader_core::scoring::ScoreSeries;
use vader_core::synth::{generate_scenario, CorpusSpec, ScenarioSpec};
use vader_core::volatility::Label;

fn small_config(out: &Path, seed: u64) -> PipelineConfig {
    PipelineConfig {
        synthetic: Some(CorpusSpec {
            num_abnormal: 4,
            num_normal: 4,
            num_frames: 120,
            seed,
            ..CorpusSpec::default()
        }),
        train: TrainConfig {
            epochs: 8,
            ..TrainConfig::default()
        },
        output: out.to_path_buf(),
        seed,
        ..PipelineConfig::default()
    }
}

#[test]
fn smoke_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let report = run_pipeline(&small_config(tmp.path(), 1)).unwrap();
    assert_eq!(report.status, "ok");
    assert_eq!(report.videos.len(), 8);
    let names: Vec<&str> = report.artifacts.iter().map(|a| a.name.as_str()).collect();
    assert_eq!(
        names,
        [KEYFRAMES_FILE, TRACKS_FILE, VOLATILITY_FILE, SAMPLES_FILE, MODEL_FILE, TOKENS_FILE, REPORT_FILE]
    );
    for a in &report.artifacts {
        for f in &a.files {
            assert!(tmp.path().join(f).is_file(), "{f} is missing");
        }
    }
    let mut on_disk: Report = serde_json::from_str(&std::fs::read_to_string(tmp.path().join(REPORT_FILE)).unwrap()).unwrap();
    // The output directory is deliberately left out of the file.
    assert_eq!(on_disk.config.output, PipelineConfig::default().output);
    on_disk.config.output = report.config.output.clone();
    assert_eq!(on_disk, report);
    assert!(tmp.path().join(TIMINGS_FILE).is_file());

    // Per-video documents agree with the summaries.
    for v in &report.videos {
        let doc = KeyframesDoc::load(tmp.path().join(format!("videos/{}/{KEYFRAMES_FILE}", v.video_id))).unwrap();
        assert_eq!(doc.indices().len(), v.keyframes);
        assert_eq!(doc.keyframes.len(), 64);
        let tracks = load_tracks(tmp.path().join(format!("videos/{}/{TRACKS_FILE}", v.video_id))).unwrap();
        assert_eq!(tracks.len(), v.tracks);
    }

    let samples: Vec<vader_core::volatility::RelationChangePair> = read_jsonl(tmp.path().join(SAMPLES_FILE)).unwrap();
    let counts = report.samples.clone().unwrap();
    assert_eq!(samples.len(), counts.positives + counts.negatives);
    assert_eq!(samples.iter().filter(|s| s.label == Label::Positive).count(), counts.positives);
}

#[test]
fn tokens_and_model_reproduce_the_reported_separation() {
    let tmp = tempfile::tempdir().unwrap();
    let report = run_pipeline(&small_config(tmp.path(), 2)).unwrap();
    let records: Vec<TokenRecord> = read_jsonl(tmp.path().join(TOKENS_FILE)).unwrap();
    assert_eq!(report.separation_scope, Some(EvalScope::Holdout));
    let sep = separation_from_records(&records, Some(Split::Holdout)).unwrap();
    assert_eq!(Some(sep), report.separation);

    let model = ModelDoc::load(tmp.path().join(MODEL_FILE)).unwrap();
    assert_eq!(model.config.seed, 2);
    assert_eq!(model.history.len(), model.config.epochs);
    let samples: Vec<vader_core::volatility::RelationChangePair> = read_jsonl(tmp.path().join(SAMPLES_FILE)).unwrap();
    for (s, r) in samples.iter().zip(&records) {
        assert_eq!(s.source, r.source);
        let token = encode(&model.params, &s.vec).unwrap().vec;
        assert_eq!(token, r.token);
        let norm: f64 = token.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}

#[test]
fn reruns_are_byte_identical_and_seeds_matter() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &str, seed| {
        let out = tmp.path().join(dir);
        run_pipeline(&small_config(&out, seed)).unwrap();
        let mut files = common::dir_bytes(&out);
        files.remove(TIMINGS_FILE);
        files
    };
    let a = run("a", 3);
    let b = run("b", 3);
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(bytes == &b[name], "{name} differs between runs");
    }
    let c = run("c", 4);
    assert_ne!(a[SAMPLES_FILE], c[SAMPLES_FILE]);
}

#[test]
fn normal_only_corpus_stops_at_mining_with_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small_config(tmp.path(), 5);
    config.synthetic.as_mut().unwrap().num_abnormal = 0;
    let err = run_pipeline(&config).unwrap_err();
    assert_eq!(err.stage, Stage::Mine);
    let report: Report = serde_json::from_str(&std::fs::read_to_string(tmp.path().join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report.status, "failed");
    assert_eq!(report.failed_stage, Some(Stage::Mine));
    assert!(report.error.unwrap().contains("mine"));
    // Earlier stages are kept, later ones never ran.
    assert_eq!(report.videos.len(), 4);
    assert!(tmp.path().join("videos/normal_000").join(KEYFRAMES_FILE).is_file());
    assert!(!tmp.path().join(SAMPLES_FILE).exists());
    assert!(!tmp.path().join(MODEL_FILE).exists());
}

#[test]
fn config_problems_are_reported_at_the_config_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let config = PipelineConfig {
        output: tmp.path().to_path_buf(),
        ..PipelineConfig::default()
    };
    let err = run_pipeline(&config).unwrap_err();
    assert_eq!(err.stage, Stage::Config);
    assert!(err.source.is_validation());

    let path = tmp.path().join("bad.json");
    std::fs::write(&path, r#"{"seed": 1, "sede": 2}"#).unwrap();
    assert!(PipelineConfig::from_file(&path).unwrap_err().is_validation());
}

#[test]
fn missing_bundle_names_the_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let config = PipelineConfig {
        corpus: vec![tmp.path().join("nowhere")],
        output: tmp.path().join("out"),
        ..PipelineConfig::default()
    };
    let err = run_pipeline(&config).unwrap_err();
    assert_eq!(err.stage, Stage::Load);
    assert!(err.to_string().contains("nowhere"), "{err}");
}

#[test]
fn curves_have_one_row_per_frame() {
    let tmp = tempfile::tempdir().unwrap();
    run_pipeline(&small_config(tmp.path(), 6)).unwrap();
    let dir = tmp.path().join("videos/abnormal_000");
    let csv = std::fs::read_to_string(dir.join(CURVES_CSV_FILE)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,p_anomaly,fused,slope,volatility,smoothed,segment,keyframe");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 120);
    for (t, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 8);
        assert_eq!(r[0], t.to_string());
    }
    let keyframes = rows.iter().filter(|r| !r[7].is_empty()).count();
    assert_eq!(keyframes, 64);
    for r in &rows {
        assert!(["", "pre", "on", "post", "background"].contains(&r[7]), "{}", r[7]);
        // A tagged pre/on/post keyframe sits in the segment of the same name.
        if ["pre", "on", "post"].contains(&r[7]) {
            assert_eq!(r[6], r[7]);
        }
    }
    let svg = std::fs::read_to_string(dir.join(CURVES_SVG_FILE)).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<polyline").count(), 3);
}

#[test]
fn two_video_corpus_lists_all_seven_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small_config(tmp.path(), 1);
    let spec = config.synthetic.as_mut().unwrap();
    spec.num_abnormal = 1;
    spec.num_normal = 1;
    let report = run_pipeline(&config).unwrap();
    assert_eq!(report.artifacts.len(), 7);
    assert!(report.artifacts.iter().all(|a| a.count > 0), "{:?}", report.artifacts);
    // One sample per label leaves nothing to hold out, so every token is used.
    assert_eq!(report.separation_scope, Some(EvalScope::All));
}

fn analysis_with(curve: Vec<f64>, is_normal: bool) -> VideoAnalysis {
    let spec = ScenarioSpec {
        num_frames: curve.len(),
        is_normal,
        ..ScenarioSpec::default()
    };
    let (bundle, _) = generate_scenario(&spec).unwrap();
    analyze_video(&bundle, ScoreSeries::from_fused(&curve).unwrap(), &PipelineConfig::default()).unwrap()
}

#[test]
fn single_bump_svg_shades_pre_on_and_post() {
    let svg = curves_svg(&analysis_with(common::single_bump_curve(), false), 5);
    for class in ["seg-pre", "seg-on", "seg-post"] {
        assert_eq!(svg.matches(&format!("class=\"{class}\"")).count(), 1, "{class}");
    }
    assert_eq!(svg.matches("class=\"background\"").count(), 1);
}

#[test]
fn flat_video_svg_has_only_background_shading() {
    let svg = curves_svg(&analysis_with(vec![0.05; 120], true), 5);
    assert!(!svg.contains("class=\"seg-"));
    assert_eq!(svg.matches("<rect").count(), 1);
}
