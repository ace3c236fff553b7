//! Relational volatility and weakly supervised sample mining.
//!
//! For each pair of adjacent sampled frames the volatility is the largest L2
//! change of a relation feature over object pairs tracked in both frames.
//! Curves are smoothed with a truncated Gaussian; peaks of abnormal videos
//! give positive relation-change pairs, valleys and normal videos give
//! negatives.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VaderError};
use crate::ingest::FrameRecord;
use crate::tracking::{FrameTrackIds, TrackId};

pub type TrackPair = (TrackId, TrackId);

/// Relation features of one frame keyed by the tracked identities of the pair.
pub type PairRelations = BTreeMap<TrackPair, Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairChange {
    pub pair: TrackPair,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub frame_before: usize,
    pub frame_after: usize,
    pub raw: f64,
    pub argmax: Option<PairChange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolatilityCurve {
    pub transitions: Vec<Transition>,
    pub smoothed: Vec<f64>,
}

impl VolatilityCurve {
    pub fn raw(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.raw).collect()
    }

    pub fn argmax_pairs(&self) -> Vec<Option<TrackPair>> {
        self.transitions
            .iter()
            .map(|t| t.argmax.as_ref().map(|c| c.pair))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,raw,smoothed,pair_i,pair_j\n");
        for (tr, s) in self.transitions.iter().zip(&self.smoothed) {
            let _ = write!(out, "{},{},{},", tr.frame_after, tr.raw, s);
            match &tr.argmax {
                Some(c) => {
                    let _ = writeln!(out, "{},{}", c.pair.0, c.pair.1);
                }
                None => out.push_str(",\n"),
            }
        }
        out
    }
}

/// Keys a frame's relations by the track ids of their endpoints.
pub fn relations_by_pair(frame: &FrameRecord, ids: &[TrackId]) -> Result<PairRelations> {
    if ids.len() != frame.detections.len() {
        return Err(VaderError::SchemaViolation(format!(
            "frame {}: {} track ids for {} detections",
            frame.t,
            ids.len(),
            frame.detections.len()
        )));
    }
    Ok(frame
        .relations
        .iter()
        .map(|r| ((ids[r.subject_index], ids[r.object_index]), r.feat.clone()))
        .collect())
}

/// Largest L2 change over pairs present in both frames. Ties keep the
/// smallest pair key. `(0, None)` when no pair is co-tracked.
pub fn frame_volatility(before: &PairRelations, after: &PairRelations) -> Result<(f64, Option<TrackPair>)> {
    let mut best: Option<(f64, TrackPair)> = None;
    for (pair, prev) in before {
        let Some(cur) = after.get(pair) else { continue };
        if cur.len() != prev.len() {
            return Err(VaderError::SchemaViolation(format!(
                "relation of pair {pair:?} changes dimension from {} to {}",
                prev.len(),
                cur.len()
            )));
        }
        let d = cur
            .iter()
            .zip(prev)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if best.is_none_or(|(m, _)| d > m) {
            best = Some((d, *pair));
        }
    }
    Ok(match best {
        Some((d, p)) => (d, Some(p)),
        None => (0.0, None),
    })
}

/// Normalized Gaussian kernel of radius `ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(VaderError::ValueOutOfRange(format!(
            "sigma = {sigma} must be positive"
        )));
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Mirror index for half-sample symmetric padding (`d c b a | a b c d | d c b a`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

pub fn gaussian_smooth(curve: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if curve.is_empty() {
        return Err(VaderError::EmptyInput("volatility curve".into()));
    }
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as i64;
    let n = curve.len();
    Ok((0..n as i64)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * curve[reflect(i + k as i64 - radius, n)])
                .sum()
        })
        .collect())
}

fn extrema(curve: &[f64], is_peak: bool) -> Vec<usize> {
    let better = |a: f64, b: f64| if is_peak { a > b } else { a < b };
    let mut out = Vec::new();
    let n = curve.len();
    let mut i = 1;
    while i + 1 < n {
        if !better(curve[i], curve[i - 1]) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < n && curve[j + 1] == curve[i] {
            j += 1;
        }
        if j + 1 < n && better(curve[i], curve[j + 1]) {
            out.push(i);
        }
        i = j + 1;
    }
    out
}

/// Strict local maxima; a plateau reports its leftmost index. Endpoints never qualify.
pub fn find_peaks(curve: &[f64]) -> Vec<usize> {
    extrema(curve, true)
}

/// Strict local minima, same conventions as [`find_peaks`].
pub fn find_valleys(curve: &[f64]) -> Vec<usize> {
    extrema(curve, false)
}

/// Volatility over the sampled frames of one video (the keys of `frame_ids`).
pub fn volatility_curve(frames: &[FrameRecord], frame_ids: &FrameTrackIds, sigma: f64) -> Result<VolatilityCurve> {
    let mut keyed = Vec::with_capacity(frame_ids.len());
    for (&t, ids) in frame_ids {
        let frame = frames.get(t).ok_or_else(|| {
            VaderError::SchemaViolation(format!("sampled frame {t} is outside the video"))
        })?;
        keyed.push((t, relations_by_pair(frame, ids)?));
    }
    let mut transitions = Vec::with_capacity(keyed.len().saturating_sub(1));
    for w in keyed.windows(2) {
        let ((t0, before), (t1, after)) = (&w[0], &w[1]);
        let (raw, pair) = frame_volatility(before, after)?;
        transitions.push(Transition {
            frame_before: *t0,
            frame_after: *t1,
            raw,
            argmax: pair.map(|p| PairChange {
                pair: p,
                before: before[&p].clone(),
                after: after[&p].clone(),
            }),
        });
    }
    let raw: Vec<f64> = transitions.iter().map(|t| t.raw).collect();
    let smoothed = if raw.is_empty() {
        Vec::new()
    } else {
        gaussian_smooth(&raw, sigma)?
    };
    Ok(VolatilityCurve {
        transitions,
        smoothed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopkScope {
    Video,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub sigma: f64,
    pub top_k_percent: f64,
    /// Negatives drawn per positive.
    pub negative_ratio: f64,
    pub topk_scope: TopkScope,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            top_k_percent: 5.0,
            negative_ratio: 1.0,
            topk_scope: TopkScope::Video,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(VaderError::InvalidConfig(format!("sigma = {} must be positive", self.sigma)));
        }
        if !(self.top_k_percent > 0.0 && self.top_k_percent <= 100.0) {
            return Err(VaderError::InvalidConfig(format!(
                "top_k_percent = {} must lie in (0, 100]",
                self.top_k_percent
            )));
        }
        if !(self.negative_ratio >= 0.0) || !self.negative_ratio.is_finite() {
            return Err(VaderError::InvalidConfig(format!(
                "negative_ratio = {} must be non-negative",
                self.negative_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSource {
    pub video_id: String,
    pub transition: usize,
    pub frame_before: usize,
    pub frame_after: usize,
    pub pair: TrackPair,
}

/// `[r_ij(t-1); r_ij(t)]` with its label and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationChangePair {
    pub vec: Vec<f64>,
    pub label: Label,
    pub source: SampleSource,
}

/// One video's volatility curve as seen by the miner.
#[derive(Debug, Clone, Copy)]
pub struct VideoCurve<'a> {
    pub video_id: &'a str,
    pub is_normal: bool,
    pub curve: &'a VolatilityCurve,
}

/// Number of peaks kept for a top-`percent` selection out of `available`.
pub fn top_k_count(available: usize, percent: f64) -> usize {
    if available == 0 {
        return 0;
    }
    let k = (available as f64 * percent / 100.0 + 1e-9).floor() as usize;
    k.clamp(1, available)
}

fn make_pair(video: &VideoCurve<'_>, transition: usize, label: Label) -> Option<RelationChangePair> {
    let tr = &video.curve.transitions[transition];
    let change = tr.argmax.as_ref()?;
    let mut vec = change.before.clone();
    vec.extend_from_slice(&change.after);
    Some(RelationChangePair {
        vec,
        label,
        source: SampleSource {
            video_id: video.video_id.to_string(),
            transition,
            frame_before: tr.frame_before,
            frame_after: tr.frame_after,
            pair: change.pair,
        },
    })
}

fn smooth_or_empty(curve: &VolatilityCurve, sigma: f64) -> Result<Vec<f64>> {
    if curve.is_empty() {
        Ok(Vec::new())
    } else {
        gaussian_smooth(&curve.raw(), sigma)
    }
}

/// Positive pairs from the highest smoothed peaks of abnormal videos.
pub fn select_positives(videos: &[VideoCurve<'_>], config: &MiningConfig) -> Result<Vec<RelationChangePair>> {
    config.validate()?;
    // (video index, transition, smoothed height)
    let mut per_video: Vec<Vec<(usize, usize, f64)>> = Vec::new();
    for (v, video) in videos.iter().enumerate() {
        if video.is_normal {
            continue;
        }
        let smoothed = smooth_or_empty(video.curve, config.sigma)?;
        let peaks: Vec<(usize, usize, f64)> = find_peaks(&smoothed)
            .into_iter()
            .filter(|&t| video.curve.transitions[t].argmax.is_some())
            .map(|t| (v, t, smoothed[t]))
            .collect();
        per_video.push(peaks);
    }
    let rank = |a: &(usize, usize, f64), b: &(usize, usize, f64)| {
        b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    };
    let mut chosen: Vec<(usize, usize, f64)> = Vec::new();
    match config.topk_scope {
        TopkScope::Video => {
            for mut peaks in per_video {
                peaks.sort_by(rank);
                let k = top_k_count(peaks.len(), config.top_k_percent);
                chosen.extend(peaks.into_iter().take(k));
            }
        }
        TopkScope::Global => {
            let mut all: Vec<_> = per_video.into_iter().flatten().collect();
            all.sort_by(rank);
            let k = top_k_count(all.len(), config.top_k_percent);
            chosen.extend(all.into_iter().take(k));
        }
    }
    chosen.sort_by_key(|&(v, t, _)| (v, t));
    Ok(chosen
        .into_iter()
        .filter_map(|(v, t, _)| make_pair(&videos[v], t, Label::Positive))
        .collect())
}

/// Candidate negatives: valleys of abnormal videos, then every co-tracked
/// transition of normal videos, in corpus order.
pub fn negative_candidates(videos: &[VideoCurve<'_>], config: &MiningConfig) -> Result<Vec<RelationChangePair>> {
    let mut out = Vec::new();
    for video in videos {
        let transitions: Vec<usize> = if video.is_normal {
            (0..video.curve.len()).collect()
        } else {
            find_valleys(&smooth_or_empty(video.curve, config.sigma)?)
        };
        out.extend(
            transitions
                .into_iter()
                .filter_map(|t| make_pair(video, t, Label::Negative)),
        );
    }
    Ok(out)
}

/// Labeled relation-change pairs for the whole corpus. Deterministic in
/// `(videos, config, seed)`.
pub fn mine_samples(videos: &[VideoCurve<'_>], config: &MiningConfig, seed: u64) -> Result<Vec<RelationChangePair>> {
    let positives = select_positives(videos, config)?;
    if positives.is_empty() {
        return Err(VaderError::EmptyMiningResult(
            "no abnormal video has a volatility peak on a co-tracked pair".into(),
        ));
    }
    let pool = negative_candidates(videos, config)?;
    let wanted = ((positives.len() as f64 * config.negative_ratio).round() as usize).min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, pool.len(), wanted).into_vec();
    picked.sort_unstable();
    let mut samples = positives;
    samples.extend(picked.into_iter().map(|i| pool[i].clone()));
    Ok(samples)
}
