//! End-to-end orchestration: score, sample, track, measure volatility, mine,
//! train, encode and report.
//!
//! Per-video stages run in parallel; everything that crosses videos runs
//! afterwards in corpus order so outputs do not depend on scheduling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::caes::{caes, slope_series, CaesConfig, CaesOutcome, EventInterval, Keyframe, SegmentTag};
use crate::encoder::{encode, train, EncoderParams, TrainConfig};
use crate::error::{Result, VaderError};
use crate::eval::embedding_separation;
use crate::ingest::{load_bundle, to_json_line, to_json_pretty, write_file, Bundle, ScoreSource};
use crate::scoring::{compute_prototype, score_frames, ClassDirections, NormalityPrototype, ScoreSeries};
use crate::synth::{corpus_specs, write_scenario, CorpusSpec};
use crate::tracking::{track_video, AssocConfig, TrackId, TrackingResult};
use crate::volatility::{mine_samples, volatility_curve, Label, MiningConfig, RelationChangePair, SampleSource, VideoCurve, VolatilityCurve};

pub const KEYFRAMES_FILE: &str = "keyframes.json";
pub const TRACKS_FILE: &str = "tracks.json";
pub const VOLATILITY_FILE: &str = "volatility.csv";
pub const CURVES_CSV_FILE: &str = "curves.csv";
pub const CURVES_SVG_FILE: &str = "curves.svg";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const TOKENS_FILE: &str = "tokens.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub caes: CaesConfig,
    pub assoc: AssocConfig,
    pub mining: MiningConfig,
    pub train: TrainConfig,
    /// Bundle directories, in the order they are processed.
    pub corpus: Vec<PathBuf>,
    /// Generated into `<output>/corpus` when `corpus` is empty.
    pub synthetic: Option<CorpusSpec>,
    /// Not embedded in the report so that reruns into different directories
    /// stay byte-identical.
    #[serde(skip_serializing)]
    pub output: PathBuf,
    pub seed: u64,
    pub holdout_fraction: f64,
    pub temperature: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            caes: CaesConfig::default(),
            assoc: AssocConfig::default(),
            mining: MiningConfig::default(),
            train: TrainConfig::default(),
            corpus: Vec::new(),
            synthetic: None,
            output: PathBuf::from("out"),
            seed: 0,
            holdout_fraction: 0.3,
            temperature: 1.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.caes.validate()?;
        self.assoc.validate()?;
        self.mining.validate()?;
        self.train.validate()?;
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(VaderError::InvalidConfig(format!(
                "holdout_fraction = {} must lie strictly between 0 and 1",
                self.holdout_fraction
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(VaderError::InvalidConfig(format!(
                "temperature = {} must be positive",
                self.temperature
            )));
        }
        if self.corpus.is_empty() && self.synthetic.is_none() {
            return Err(VaderError::InvalidConfig(
                "no corpus directories and no synthetic corpus requested".into(),
            ));
        }
        Ok(())
    }

    /// Reads a JSON config; absent fields keep their defaults.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| VaderError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| VaderError::parse(path, e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Load,
    Score,
    Sample,
    Track,
    Volatility,
    Mine,
    Train,
    Encode,
    Evaluate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Score => "score",
            Stage::Sample => "sample",
            Stage::Track => "track",
            Stage::Volatility => "volatility",
            Stage::Mine => "mine",
            Stage::Train => "train",
            Stage::Encode => "encode",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A failure tagged with the stage (and video, if any) it happened in.
#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}`{}: {source}", video.as_ref().map(|v| format!(" ({v})")).unwrap_or_default())]
pub struct StageError {
    pub stage: Stage,
    pub video: Option<String>,
    #[source]
    pub source: VaderError,
}

impl StageError {
    fn new(stage: Stage, video: Option<&str>, source: VaderError) -> Self {
        Self {
            stage,
            video: video.map(str::to_owned),
            source,
        }
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage, video: Option<&str>) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage, video: Option<&str>) -> std::result::Result<T, StageError> {
        self.map_err(|e| StageError::new(stage, video, e))
    }
}

/// Prototype of the normal videos' frame features, if any normal bundle
/// carries them.
pub fn corpus_prototype(bundles: &[Bundle]) -> Result<Option<NormalityPrototype>> {
    let normal: Vec<Vec<f64>> = bundles
        .iter()
        .filter(|b| b.manifest.is_normal)
        .filter_map(|b| b.frame_feats.as_ref())
        .flatten()
        .cloned()
        .collect();
    if normal.is_empty() {
        Ok(None)
    } else {
        compute_prototype(&normal).map(Some)
    }
}

/// Scores used downstream for a bundle. Probability-only tables are fused
/// with class evidence when both the evidence and a prototype exist;
/// otherwise the stored series is used as-is.
pub fn bundle_scores(bundle: &Bundle, proto: Option<&NormalityPrototype>, temperature: f64) -> Result<ScoreSeries> {
    let stored = bundle.scores()?;
    match (bundle.score_source(), proto, &bundle.class_dirs, &bundle.frame_feats) {
        (ScoreSource::ProbabilitiesOnly, Some(proto), Some(dirs), Some(feats)) => {
            let dirs = ClassDirections::prepare(dirs.classes.clone(), &dirs.embeddings, proto)?;
            score_frames(&stored.p_anomaly, feats, proto, &dirs, temperature)
        }
        _ => Ok(stored.clone()),
    }
}

/// Per-video products of the score, sample, track and volatility stages.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnalysis {
    pub video_id: String,
    pub is_normal: bool,
    pub scores: ScoreSeries,
    pub caes: CaesOutcome,
    pub tracking: TrackingResult,
    pub volatility: VolatilityCurve,
}

impl VideoAnalysis {
    pub fn as_curve(&self) -> VideoCurve<'_> {
        VideoCurve {
            video_id: &self.video_id,
            is_normal: self.is_normal,
            curve: &self.volatility,
        }
    }
}

pub fn analyze_video(
    bundle: &Bundle,
    scores: ScoreSeries,
    config: &PipelineConfig,
) -> std::result::Result<VideoAnalysis, StageError> {
    let id = Some(bundle.video_id());
    let sampled = caes(&scores, &config.caes).at(Stage::Sample, id)?;
    let tracking = track_video(&bundle.frames, &sampled.keyframes.indices(), &config.assoc).at(Stage::Track, id)?;
    let volatility = volatility_curve(&bundle.frames, &tracking.frame_ids, config.mining.sigma).at(Stage::Volatility, id)?;
    Ok(VideoAnalysis {
        video_id: bundle.video_id().to_owned(),
        is_normal: bundle.manifest.is_normal,
        scores,
        caes: sampled,
        tracking,
        volatility,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
}

/// Seeded split stratified by label. Each label with at least two samples
/// contributes at least one sample to each side.
pub fn split_samples(samples: &[RelationChangePair], holdout_fraction: f64, seed: u64) -> Vec<Split> {
    let mut out = vec![Split::Train; samples.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for label in [Label::Positive, Label::Negative] {
        let members: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == label).collect();
        let n = members.len();
        if n < 2 {
            continue;
        }
        let k = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1);
        for pick in index::sample(&mut rng, n, k) {
            out[members[pick]] = Split::Holdout;
        }
    }
    out
}

/// Which tokens a separation figure was measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalScope {
    /// Held-out tokens only.
    Holdout,
    /// Every token, used when the held-out side lacks one of the labels
    /// (tiny corpora where a label has a single sample).
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainEval {
    pub config: TrainConfig,
    pub params: EncoderParams,
    pub history: Vec<f64>,
    pub splits: Vec<Split>,
    pub tokens: Vec<Vec<f64>>,
    pub separation: f64,
    pub scope: EvalScope,
}

struct Trained {
    config: TrainConfig,
    params: EncoderParams,
    history: Vec<f64>,
    splits: Vec<Split>,
    tokens: Vec<Vec<f64>>,
}

fn train_and_encode(
    samples: &[RelationChangePair],
    train_config: &TrainConfig,
    holdout_fraction: f64,
    seed: u64,
) -> std::result::Result<Trained, StageError> {
    let config = TrainConfig {
        seed,
        ..train_config.clone()
    };
    let splits = split_samples(samples, holdout_fraction, seed);
    let train_set: Vec<RelationChangePair> = samples
        .iter()
        .zip(&splits)
        .filter(|(_, s)| **s == Split::Train)
        .map(|(x, _)| x.clone())
        .collect();
    let outcome = train(&train_set, &config).at(Stage::Train, None)?;
    let tokens = samples
        .iter()
        .map(|s| encode(&outcome.params, &s.vec).map(|t| t.vec))
        .collect::<Result<Vec<_>>>()
        .at(Stage::Encode, None)?;
    Ok(Trained {
        config,
        params: outcome.params,
        history: outcome.history,
        splits,
        tokens,
    })
}

/// Separation on the held-out tokens, or on every token when the held-out
/// side does not contain both labels.
pub fn evaluate_tokens(tokens: &[Vec<f64>], labels: &[Label], splits: &[Split]) -> Result<(f64, EvalScope)> {
    let pick = |holdout_only: bool| -> Vec<(Vec<f64>, Label)> {
        tokens
            .iter()
            .zip(labels)
            .zip(splits)
            .filter(|(_, s)| !holdout_only || **s == Split::Holdout)
            .map(|((t, l), _)| (t.clone(), *l))
            .collect()
    };
    let held = pick(true);
    let has = |l: Label| held.iter().any(|(_, x)| *x == l);
    if has(Label::Positive) && has(Label::Negative) {
        Ok((embedding_separation(&held)?, EvalScope::Holdout))
    } else {
        Ok((embedding_separation(&pick(false))?, EvalScope::All))
    }
}

/// Splits, trains on the training side with `seed` as the training seed,
/// encodes every sample and measures separation (see [`evaluate_tokens`]).
pub fn train_and_evaluate(
    samples: &[RelationChangePair],
    train_config: &TrainConfig,
    holdout_fraction: f64,
    seed: u64,
) -> Result<TrainEval> {
    let t = train_and_encode(samples, train_config, holdout_fraction, seed).map_err(|e| e.source)?;
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let (separation, scope) = evaluate_tokens(&t.tokens, &labels, &t.splits)?;
    Ok(TrainEval {
        config: t.config,
        params: t.params,
        history: t.history,
        splits: t.splits,
        tokens: t.tokens,
        separation,
        scope,
    })
}

/// Loads bundles in corpus order, in parallel.
pub fn load_corpus(dirs: &[PathBuf]) -> std::result::Result<Vec<Bundle>, StageError> {
    dirs.par_iter()
        .map(|d| load_bundle(d).at(Stage::Load, Some(&d.display().to_string())))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Scores and analyzes every bundle.
pub fn analyze_corpus(
    bundles: &[Bundle],
    config: &PipelineConfig,
) -> std::result::Result<Vec<VideoAnalysis>, StageError> {
    let proto = corpus_prototype(bundles).at(Stage::Score, None)?;
    bundles
        .par_iter()
        .map(|b| {
            let scores = bundle_scores(b, proto.as_ref(), config.temperature).at(Stage::Score, Some(b.video_id()))?;
            analyze_video(b, scores, config)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// `keyframes.json`: the sampler's decisions for one video. Infinite slope
/// thresholds (no usable slopes) are written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframesDoc {
    pub video_id: String,
    pub num_frames: usize,
    pub budget: usize,
    pub threshold: f64,
    pub rise_threshold: Option<f64>,
    pub calm_threshold: Option<f64>,
    pub intervals: Vec<EventInterval>,
    pub keyframes: Vec<Keyframe>,
}

impl KeyframesDoc {
    pub fn new(video_id: &str, num_frames: usize, outcome: &CaesOutcome) -> Self {
        let finite = |x: f64| x.is_finite().then_some(x);
        Self {
            video_id: video_id.to_owned(),
            num_frames,
            budget: outcome.keyframes.budget,
            threshold: outcome.threshold,
            rise_threshold: finite(outcome.rise_threshold),
            calm_threshold: finite(outcome.calm_threshold),
            intervals: outcome.intervals.clone(),
            keyframes: outcome.keyframes.frames.clone(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| VaderError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| VaderError::parse(path, e.to_string()))
    }

    pub fn indices(&self) -> Vec<usize> {
        self.keyframes.iter().map(|k| k.index).collect()
    }
}

pub type TracksDoc = BTreeMap<TrackId, Vec<(usize, usize)>>;

pub fn load_tracks(path: impl AsRef<Path>) -> Result<TracksDoc> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| VaderError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| VaderError::parse(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDoc {
    pub config: TrainConfig,
    pub params: EncoderParams,
    pub history: Vec<f64>,
}

impl ModelDoc {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| VaderError::io(path, e))?;
        let doc: Self = serde_json::from_str(&text).map_err(|e| VaderError::parse(path, e.to_string()))?;
        doc.params.validate()?;
        Ok(doc)
    }
}

/// One line of `tokens.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub source: SampleSource,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub token: Vec<f64>,
}

/// Reads a JSON-lines file, naming the offending line on failure.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| VaderError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| VaderError::parse(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn render_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&to_json_line(item));
        out.push('\n');
    }
    out
}

fn segment_of(t: usize, intervals: &[EventInterval]) -> Option<SegmentTag> {
    intervals.iter().find_map(|iv| {
        if t >= iv.pre_start && t < iv.start {
            Some(SegmentTag::Pre)
        } else if t >= iv.start && t <= iv.end {
            Some(SegmentTag::On)
        } else if t > iv.end && t <= iv.post_end {
            Some(SegmentTag::Post)
        } else {
            None
        }
    })
}

/// Per-frame plotting table: scores, slope, volatility at the transition
/// ending on that frame (blank elsewhere), segment and keyframe tag.
pub fn curves_csv(analysis: &VideoAnalysis, slope_window: usize) -> String {
    let slopes = slope_series(&analysis.scores.fused, slope_window);
    let mut vol: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for (tr, s) in analysis.volatility.transitions.iter().zip(&analysis.volatility.smoothed) {
        vol.insert(tr.frame_after, (tr.raw, *s));
    }
    let tags: BTreeMap<usize, SegmentTag> = analysis.caes.keyframes.frames.iter().map(|k| (k.index, k.tag)).collect();
    let mut out = String::from("t,p_anomaly,fused,slope,volatility,smoothed,segment,keyframe\n");
    for t in 0..analysis.scores.len() {
        let (raw, smooth) = match vol.get(&t) {
            Some((r, s)) => (r.to_string(), s.to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{t},{},{},{},{raw},{smooth},{},{}",
            analysis.scores.p_anomaly[t],
            analysis.scores.fused[t],
            slopes[t],
            segment_of(t, &analysis.caes.intervals).map_or("", SegmentTag::as_str),
            tags.get(&t).map_or("", |g| g.as_str()),
        );
    }
    out
}

/// Static plot of the fused score, its slope and the smoothed volatility
/// over shaded pre/on/post regions.
pub fn curves_svg(analysis: &VideoAnalysis, slope_window: usize) -> String {
    const W: f64 = 800.0;
    const H: f64 = 240.0;
    const PAD: f64 = 10.0;
    let n = analysis.scores.len().max(2);
    let x = |t: f64| PAD + (W - 2.0 * PAD) * t / (n - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v.clamp(0.0, 1.0);
    let line = |points: &[(f64, f64)], class: &str| {
        let pts: Vec<String> = points.iter().map(|&(t, v)| format!("{:.2},{:.2}", x(t), y(v))).collect();
        format!("  <polyline class=\"{class}\" fill=\"none\" points=\"{}\"/>\n", pts.join(" "))
    };
    let scaled = |values: &[f64]| -> Vec<f64> {
        let max = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        values.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect()
    };

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    );
    svg.push_str(
        "  <style>.background{fill:#f4f4f4}.seg-pre{fill:#fde3b0}.seg-on{fill:#f6a6a6}.seg-post{fill:#b9d8f2}\
         .fused{stroke:#c0392b}.slope{stroke:#7f8c8d}.volatility{stroke:#2c3e50}</style>\n",
    );
    let _ = writeln!(svg, "  <rect class=\"background\" x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\"/>");
    for iv in &analysis.caes.intervals {
        let spans = [
            (SegmentTag::Pre, iv.pre_start, iv.start),
            (SegmentTag::On, iv.start, iv.end + 1),
            (SegmentTag::Post, iv.end + 1, iv.post_end + 1),
        ];
        for (tag, lo, hi) in spans {
            if hi > lo {
                let _ = writeln!(
                    svg,
                    "  <rect class=\"seg-{}\" x=\"{:.2}\" y=\"0\" width=\"{:.2}\" height=\"{H}\"/>",
                    tag.as_str(),
                    x(lo as f64),
                    x(hi as f64 - 1.0) - x(lo as f64) + (W - 2.0 * PAD) / (n - 1) as f64,
                );
            }
        }
    }
    let fused: Vec<(f64, f64)> = analysis.scores.fused.iter().enumerate().map(|(t, &v)| (t as f64, v)).collect();
    svg.push_str(&line(&fused, "fused"));
    let slopes = scaled(&slope_series(&analysis.scores.fused, slope_window));
    let slope_pts: Vec<(f64, f64)> = slopes.iter().enumerate().map(|(t, &v)| (t as f64, 0.5 + 0.5 * v)).collect();
    svg.push_str(&line(&slope_pts, "slope"));
    let smooth = scaled(&analysis.volatility.smoothed);
    let vol_pts: Vec<(f64, f64)> = analysis
        .volatility
        .transitions
        .iter()
        .zip(smooth)
        .map(|(tr, v)| (tr.frame_after as f64, v))
        .collect();
    if !vol_pts.is_empty() {
        svg.push_str(&line(&vol_pts, "volatility"));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `curves.csv` and `curves.svg` for one video into `dir`.
pub fn emit_curves(analysis: &VideoAnalysis, slope_window: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| VaderError::io(dir, e))?;
    write_file(&dir.join(CURVES_CSV_FILE), &curves_csv(analysis, slope_window))?;
    write_file(&dir.join(CURVES_SVG_FILE), &curves_svg(analysis, slope_window))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub files: Vec<String>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSummary {
    pub video_id: String,
    pub is_normal: bool,
    pub num_frames: usize,
    pub threshold: f64,
    pub intervals: usize,
    pub keyframes: usize,
    pub pre: usize,
    pub on: usize,
    pub post: usize,
    pub tracks: usize,
    pub transitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub positives: usize,
    pub negatives: usize,
    pub train: usize,
    pub holdout: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub status: String,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    pub config: PipelineConfig,
    pub videos: Vec<VideoSummary>,
    pub samples: Option<SampleCounts>,
    pub final_loss: Option<f64>,
    pub separation: Option<f64>,
    pub separation_scope: Option<EvalScope>,
    pub artifacts: Vec<Artifact>,
    pub timings_file: String,
}

struct Run {
    out: PathBuf,
    report: Report,
    timings: BTreeMap<String, f64>,
    clock: Instant,
}

impl Run {
    fn lap(&mut self, stage: Stage) {
        let elapsed = self.clock.elapsed().as_secs_f64();
        *self.timings.entry(stage.as_str().to_owned()).or_default() += elapsed;
        self.clock = Instant::now();
    }

    fn artifact(&mut self, name: &str, files: Vec<String>, count: usize) {
        self.report.artifacts.push(Artifact {
            name: name.to_owned(),
            files,
            count,
        });
    }

    fn write(&self, path: &str, contents: &str) -> std::result::Result<(), StageError> {
        write_file(&self.out.join(path), contents).at(Stage::Config, None)
    }

    fn finish(&mut self) -> Result<()> {
        let total: f64 = self.timings.values().sum();
        self.timings.insert("total".into(), total);
        self.artifact(REPORT_FILE, vec![REPORT_FILE.into()], self.report.videos.len());
        write_file(&self.out.join(REPORT_FILE), &to_json_pretty(&self.report))?;
        write_file(&self.out.join(TIMINGS_FILE), &to_json_pretty(&self.timings))
    }

    fn fail(&mut self, err: StageError) -> StageError {
        self.report.status = "failed".into();
        self.report.failed_stage = Some(err.stage);
        self.report.error = Some(err.to_string());
        // Best effort: the original error is more useful than a write failure.
        let _ = self.finish();
        err
    }
}

fn prepare_corpus(config: &PipelineConfig) -> std::result::Result<Vec<PathBuf>, StageError> {
    if !config.corpus.is_empty() {
        return Ok(config.corpus.clone());
    }
    let spec = config.synthetic.as_ref().expect("validated: corpus or synthetic");
    let root = config.output.join("corpus");
    corpus_specs(spec)
        .par_iter()
        .map(|s| {
            let dir = root.join(&s.video_id);
            write_scenario(s, &dir).map(|_| dir).at(Stage::Load, Some(&s.video_id))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Runs the whole chain and writes every artifact under `config.output`.
/// On failure the report records the stage and everything finished so far
/// stays on disk.
pub fn run_pipeline(config: &PipelineConfig) -> std::result::Result<Report, StageError> {
    config.validate().at(Stage::Config, None)?;
    let mut resolved = config.clone();
    resolved.train.seed = config.seed;
    std::fs::create_dir_all(&config.output)
        .map_err(|e| VaderError::io(&config.output, e))
        .at(Stage::Config, None)?;
    let mut run = Run {
        out: config.output.clone(),
        report: Report {
            status: "ok".into(),
            failed_stage: None,
            error: None,
            config: resolved.clone(),
            videos: Vec::new(),
            samples: None,
            final_loss: None,
            separation: None,
            separation_scope: None,
            artifacts: Vec::new(),
            timings_file: TIMINGS_FILE.into(),
        },
        timings: BTreeMap::new(),
        clock: Instant::now(),
    };
    match run_stages(&resolved, &mut run) {
        Ok(()) => {
            run.finish().at(Stage::Config, None)?;
            Ok(run.report)
        }
        Err(e) => Err(run.fail(e)),
    }
}

fn run_stages(config: &PipelineConfig, run: &mut Run) -> std::result::Result<(), StageError> {
    let dirs = prepare_corpus(config)?;
    let bundles = load_corpus(&dirs)?;
    run.lap(Stage::Load);
    let analyses = analyze_corpus(&bundles, config)?;
    run.lap(Stage::Volatility);

    let (mut keyframe_files, mut track_files, mut vol_files) = (Vec::new(), Vec::new(), Vec::new());
    let (mut n_keys, mut n_tracks, mut n_transitions) = (0, 0, 0);
    for a in &analyses {
        let rel = format!("videos/{}", a.video_id);
        let dir = run.out.join(&rel);
        std::fs::create_dir_all(&dir).map_err(|e| VaderError::io(&dir, e)).at(Stage::Sample, Some(&a.video_id))?;
        let doc = KeyframesDoc::new(&a.video_id, a.scores.len(), &a.caes);
        run.write(&format!("{rel}/{KEYFRAMES_FILE}"), &to_json_pretty(&doc))?;
        run.write(&format!("{rel}/{TRACKS_FILE}"), &to_json_pretty(&a.tracking.to_map()))?;
        run.write(&format!("{rel}/{VOLATILITY_FILE}"), &a.volatility.to_csv())?;
        emit_curves(a, config.caes.slope_window, &dir).at(Stage::Volatility, Some(&a.video_id))?;
        keyframe_files.push(format!("{rel}/{KEYFRAMES_FILE}"));
        track_files.push(format!("{rel}/{TRACKS_FILE}"));
        vol_files.push(format!("{rel}/{VOLATILITY_FILE}"));
        n_keys += a.caes.keyframes.len();
        n_tracks += a.tracking.tracks.len();
        n_transitions += a.volatility.len();
        run.report.videos.push(VideoSummary {
            video_id: a.video_id.clone(),
            is_normal: a.is_normal,
            num_frames: a.scores.len(),
            threshold: a.caes.threshold,
            intervals: a.caes.intervals.len(),
            keyframes: a.caes.keyframes.len(),
            pre: a.caes.keyframes.count(SegmentTag::Pre),
            on: a.caes.keyframes.count(SegmentTag::On),
            post: a.caes.keyframes.count(SegmentTag::Post),
            tracks: a.tracking.tracks.len(),
            transitions: a.volatility.len(),
        });
    }
    run.artifact(KEYFRAMES_FILE, keyframe_files, n_keys);
    run.artifact(TRACKS_FILE, track_files, n_tracks);
    run.artifact(VOLATILITY_FILE, vol_files, n_transitions);

    let curves: Vec<VideoCurve<'_>> = analyses.iter().map(VideoAnalysis::as_curve).collect();
    let samples = mine_samples(&curves, &config.mining, config.seed).at(Stage::Mine, None)?;
    run.write(SAMPLES_FILE, &render_jsonl(&samples))?;
    run.artifact(SAMPLES_FILE, vec![SAMPLES_FILE.into()], samples.len());
    run.lap(Stage::Mine);

    let result = train_and_encode(&samples, &config.train, config.holdout_fraction, config.seed)?;
    run.lap(Stage::Train);
    let model = ModelDoc {
        config: result.config.clone(),
        params: result.params.clone(),
        history: result.history.clone(),
    };
    run.write(MODEL_FILE, &to_json_pretty(&model))?;
    run.artifact(MODEL_FILE, vec![MODEL_FILE.into()], model.params.num_params());
    let records: Vec<TokenRecord> = samples
        .iter()
        .zip(&result.tokens)
        .zip(&result.splits)
        .map(|((s, t), split)| TokenRecord {
            source: s.source.clone(),
            label: s.label,
            split: Some(*split),
            token: t.clone(),
        })
        .collect();
    run.write(TOKENS_FILE, &render_jsonl(&records))?;
    run.artifact(TOKENS_FILE, vec![TOKENS_FILE.into()], records.len());
    run.lap(Stage::Encode);

    let positives = samples.iter().filter(|s| s.label == Label::Positive).count();
    let holdout = result.splits.iter().filter(|s| **s == Split::Holdout).count();
    run.report.samples = Some(SampleCounts {
        positives,
        negatives: samples.len() - positives,
        train: samples.len() - holdout,
        holdout,
    });
    run.report.final_loss = result.history.last().copied();
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let (separation, scope) = evaluate_tokens(&result.tokens, &labels, &result.splits).at(Stage::Evaluate, None)?;
    run.report.separation = Some(separation);
    run.report.separation_scope = Some(scope);
    run.lap(Stage::Evaluate);
    Ok(())
}

/// Held-out separation recomputed from exported token records.
pub fn separation_from_records(records: &[TokenRecord], split: Option<Split>) -> Result<f64> {
    let tokens: Vec<(Vec<f64>, Label)> = records
        .iter()
        .filter(|r| split.is_none() || r.split == split)
        .map(|r| (r.token.clone(), r.label))
        .collect();
    embedding_separation(&tokens)
}
