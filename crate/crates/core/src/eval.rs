//! Metrics and comparison harnesses.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::caes::{caes, top_k_keyframes, uniform_keyframes, CaesConfig, KeyframeSet};
use crate::encoder::{distance, TrainConfig};
use crate::error::{Result, VaderError};
use crate::pipeline::{train_and_evaluate, VideoAnalysis};
use crate::scoring::ScoreSeries;
use crate::synth::GroundTruth;
use crate::volatility::{mine_samples, Label, MiningConfig, VideoCurve};

/// Probability that a random positive outranks a random negative, ties
/// counted as one half. Computed from average ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(VaderError::SchemaViolation(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(VaderError::ValueOutOfRange("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(VaderError::DegenerateLabels(format!(
            "{n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUC of `-distance to the positive centroid` separating positive from
/// negative tokens.
pub fn embedding_separation(tokens: &[(Vec<f64>, Label)]) -> Result<f64> {
    let positives: Vec<&Vec<f64>> = tokens
        .iter()
        .filter(|(_, l)| *l == Label::Positive)
        .map(|(t, _)| t)
        .collect();
    if positives.is_empty() || positives.len() == tokens.len() {
        return Err(VaderError::DegenerateLabels(format!(
            "{} positive tokens out of {}",
            positives.len(),
            tokens.len()
        )));
    }
    let dim = positives[0].len();
    let mut centroid = vec![0.0; dim];
    for p in &positives {
        for (c, x) in centroid.iter_mut().zip(p.iter()) {
            *c += x;
        }
    }
    for c in &mut centroid {
        *c /= positives.len() as f64;
    }
    let scores: Vec<f64> = tokens.iter().map(|(t, _)| -distance(t, &centroid)).collect();
    let labels: Vec<bool> = tokens.iter().map(|(_, l)| *l == Label::Positive).collect();
    roc_auc(&scores, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub sigmas: Vec<f64>,
    pub topks: Vec<f64>,
    /// `auc[i][j]` in percent for `sigmas[i]`, `topks[j]`.
    pub auc: Vec<Vec<f64>>,
}

impl AblationGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma,topk,auc\n");
        for (i, s) in self.sigmas.iter().enumerate() {
            for (j, k) in self.topks.iter().enumerate() {
                let _ = writeln!(out, "{s},{k},{}", self.auc[i][j]);
            }
        }
        out
    }
}

/// Re-mines and re-trains for every `(sigma, top-k)` cell and records the
/// held-out embedding separation as a percentage.
pub fn ablation_grid(
    videos: &[VideoAnalysis],
    sigmas: &[f64],
    topks: &[f64],
    base_mining: &MiningConfig,
    train: &TrainConfig,
    holdout_fraction: f64,
    seed: u64,
) -> Result<AblationGrid> {
    if sigmas.is_empty() || topks.is_empty() {
        return Err(VaderError::EmptyInput("ablation grid axes".into()));
    }
    let curves: Vec<VideoCurve<'_>> = videos.iter().map(VideoAnalysis::as_curve).collect();
    let mut auc = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mut row = Vec::with_capacity(topks.len());
        for &topk in topks {
            let mining = MiningConfig {
                sigma,
                top_k_percent: topk,
                ..base_mining.clone()
            };
            let samples = mine_samples(&curves, &mining, seed)?;
            let cell = train_and_evaluate(&samples, train, holdout_fraction, seed)?;
            row.push(100.0 * cell.separation);
        }
        auc.push(row);
    }
    Ok(AblationGrid {
        sigmas: sigmas.to_vec(),
        topks: topks.to_vec(),
        auc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Uniform,
    TopK,
    Caes,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Uniform, Strategy::TopK, Strategy::Caes];

    pub fn select(self, scores: &ScoreSeries, config: &CaesConfig) -> Result<KeyframeSet> {
        Ok(match self {
            Strategy::Uniform => uniform_keyframes(scores.len(), config.budget),
            Strategy::TopK => top_k_keyframes(scores, config.budget),
            Strategy::Caes => caes(scores, config)?.keyframes,
        })
    }
}

/// Share of ground-truth segments touched by at least one keyframe (`None`
/// when there are no segments of that kind) and share of their frames selected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentCoverage {
    pub segments: usize,
    pub hit_rate: Option<f64>,
    pub frame_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub strategy: Strategy,
    pub pre: SegmentCoverage,
    pub on: SegmentCoverage,
    pub post: SegmentCoverage,
    pub overall: SegmentCoverage,
}

#[derive(Default)]
struct Tally {
    segments: usize,
    hits: usize,
    frames: usize,
    covered: usize,
}

impl Tally {
    fn add(&mut self, range: (usize, usize), selected: &[bool]) {
        let covered = (range.0..=range.1).filter(|&t| selected[t]).count();
        self.segments += 1;
        self.frames += range.1 - range.0 + 1;
        self.covered += covered;
        self.hits += usize::from(covered > 0);
    }

    fn merge(&mut self, other: &Tally) {
        self.segments += other.segments;
        self.hits += other.hits;
        self.frames += other.frames;
        self.covered += other.covered;
    }

    fn finish(&self) -> SegmentCoverage {
        SegmentCoverage {
            segments: self.segments,
            hit_rate: (self.segments > 0).then(|| self.hits as f64 / self.segments as f64),
            frame_recall: (self.frames > 0).then(|| self.covered as f64 / self.frames as f64),
        }
    }
}

/// Event and context coverage of each keyframe strategy on videos with
/// known event placement.
pub fn sampler_compare(
    videos: &[(ScoreSeries, GroundTruth)],
    strategies: &[Strategy],
    config: &CaesConfig,
) -> Result<Vec<CoverageReport>> {
    let mut out = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let (mut pre, mut on, mut post) = (Tally::default(), Tally::default(), Tally::default());
        for (scores, truth) in videos {
            let keys = strategy.select(scores, config)?;
            let mut selected = vec![false; scores.len()];
            for k in &keys.frames {
                selected[k.index] = true;
            }
            for seg in &truth.event_segments {
                if seg.on.1 >= scores.len() {
                    return Err(VaderError::SchemaViolation(format!(
                        "{}: event segment {:?} exceeds {} frames",
                        truth.video_id,
                        seg.on,
                        scores.len()
                    )));
                }
                if let Some(r) = seg.pre {
                    pre.add(r, &selected);
                }
                on.add(seg.on, &selected);
                if let Some(r) = seg.post {
                    post.add(r, &selected);
                }
            }
        }
        let mut overall = Tally::default();
        for t in [&pre, &on, &post] {
            overall.merge(t);
        }
        out.push(CoverageReport {
            strategy,
            pre: pre.finish(),
            on: on.finish(),
            post: post.finish(),
            overall: overall.finish(),
        });
    }
    Ok(out)
}
