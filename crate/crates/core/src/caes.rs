//! Context-aware keyframe sampling.
//!
//! Anomalous intervals are runs of frames whose fused score reaches a
//! per-video percentile threshold. Each interval grows a pre-event context
//! backward while the score slope stays above a rise threshold and a
//! post-event context forward while the absolute slope stays above a calm
//! threshold. Keyframes are then drawn evenly from the pre, on and post
//! segments and the remaining budget is filled with background frames.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VaderError};
use crate::scoring::ScoreSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentTag {
    Pre,
    On,
    Post,
    Background,
}

impl SegmentTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pre => "pre",
            Self::On => "on",
            Self::Post => "post",
            Self::Background => "background",
        }
    }
}

/// An anomalous interval with its expanded context. All bounds inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventInterval {
    pub pre_start: usize,
    pub start: usize,
    pub end: usize,
    pub post_end: usize,
}

impl EventInterval {
    pub fn unexpanded(start: usize, end: usize) -> Self {
        Self {
            pre_start: start,
            start,
            end,
            post_end: end,
        }
    }

    pub fn pre_len(&self) -> usize {
        self.start - self.pre_start
    }

    pub fn post_len(&self) -> usize {
        self.post_end - self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keyframe {
    pub index: usize,
    pub tag: SegmentTag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyframeSet {
    pub frames: Vec<Keyframe>,
    pub budget: usize,
}

impl KeyframeSet {
    pub fn indices(&self) -> Vec<usize> {
        self.frames.iter().map(|k| k.index).collect()
    }

    pub fn count(&self, tag: SegmentTag) -> usize {
        self.frames.iter().filter(|k| k.tag == tag).count()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaesConfig {
    pub threshold_percentile: f64,
    pub slope_window: usize,
    pub rise_percentile: f64,
    pub calm_percentile: f64,
    pub max_context: usize,
    pub n_pre: usize,
    pub n_on: usize,
    pub n_post: usize,
    pub budget: usize,
}

impl Default for CaesConfig {
    fn default() -> Self {
        Self {
            threshold_percentile: 97.0,
            slope_window: 5,
            rise_percentile: 95.0,
            calm_percentile: 85.0,
            max_context: 30,
            n_pre: 4,
            n_on: 8,
            n_post: 4,
            budget: 64,
        }
    }
}

impl CaesConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("threshold_percentile", self.threshold_percentile),
            ("rise_percentile", self.rise_percentile),
            ("calm_percentile", self.calm_percentile),
        ] {
            if !(p > 0.0 && p < 100.0) {
                return Err(VaderError::InvalidConfig(format!(
                    "{name} = {p} must lie strictly between 0 and 100"
                )));
            }
        }
        if self.slope_window < 2 {
            return Err(VaderError::InvalidConfig(format!(
                "slope_window = {} must be at least 2",
                self.slope_window
            )));
        }
        if self.n_pre + self.n_on + self.n_post > self.budget {
            return Err(VaderError::InvalidConfig(format!(
                "n_pre + n_on + n_post = {} exceeds budget {}",
                self.n_pre + self.n_on + self.n_post,
                self.budget
            )));
        }
        Ok(())
    }
}

/// Everything CAES decided for one video, kept for inspection and plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaesOutcome {
    pub threshold: f64,
    pub rise_threshold: f64,
    pub calm_threshold: f64,
    pub intervals: Vec<EventInterval>,
    pub keyframes: KeyframeSet,
}

/// Linear-interpolation percentile: rank `(n - 1) * p / 100` on sorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(VaderError::EmptyInput("percentile of an empty sequence".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(VaderError::ValueOutOfRange(format!(
            "percentile {p} is outside [0, 100]"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi || frac == 0.0 {
        return Ok(sorted[lo]);
    }
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

pub fn adaptive_threshold(scores: &ScoreSeries, percentile_value: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(VaderError::EmptyInput("score series".into()));
    }
    percentile(&scores.fused, percentile_value)
}

/// Trailing finite difference over `window` frames; zero before the window fills.
pub fn slope_series(fused: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 2, "slope window must be at least 2");
    let lag = window - 1;
    (0..fused.len())
        .map(|t| {
            if t < lag {
                0.0
            } else {
                (fused[t] - fused[t - lag]) / lag as f64
            }
        })
        .collect()
}

/// Maximal runs of frames with `fused >= threshold`, merging runs separated by
/// fewer than `merge_gap` frames. Bounds are inclusive.
pub fn detect_intervals(fused: &[f64], threshold: f64, merge_gap: usize) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut open: Option<usize> = None;
    for (t, &s) in fused.iter().enumerate() {
        match (s >= threshold, open) {
            (true, None) => open = Some(t),
            (false, Some(start)) => {
                runs.push((start, t - 1));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(start) = open {
        runs.push((start, fused.len() - 1));
    }
    let mut merged: Vec<(usize, usize)> = Vec::with_capacity(runs.len());
    for run in runs {
        match merged.last_mut() {
            Some(last) if run.0 - last.1 - 1 < merge_gap => last.1 = run.1,
            _ => merged.push(run),
        }
    }
    merged
}

/// Rise threshold from the positive slopes and calm threshold from the
/// absolute slopes, skipping the warm-up frames where the slope is undefined.
/// A missing distribution yields `+inf` (no expansion).
pub fn slope_thresholds(slopes: &[f64], window: usize, config: &CaesConfig) -> (f64, f64) {
    let defined = slopes.get(window.saturating_sub(1)..).unwrap_or(&[]);
    let positive: Vec<f64> = defined.iter().copied().filter(|s| *s > 0.0).collect();
    let absolute: Vec<f64> = defined.iter().map(|s| s.abs()).collect();
    let rise = percentile(&positive, config.rise_percentile).unwrap_or(f64::INFINITY);
    let calm = percentile(&absolute, config.calm_percentile).unwrap_or(f64::INFINITY);
    (rise, calm)
}

/// Grows `interval` backward while `slope >= rise_threshold` and forward while
/// `|slope| >= calm_threshold`, each by at most `max_context` frames and never
/// past `lower_bound` / `upper_bound` (inclusive limits set by the video edges
/// and the neighboring intervals).
#[allow(clippy::too_many_arguments)]
pub fn expand_context(
    interval: (usize, usize),
    slopes: &[f64],
    rise_threshold: f64,
    calm_threshold: f64,
    max_context: usize,
    lower_bound: usize,
    upper_bound: usize,
) -> EventInterval {
    let (start, end) = interval;
    let mut pre_start = start;
    while pre_start > lower_bound
        && start - (pre_start - 1) <= max_context
        && slopes[pre_start - 1] >= rise_threshold
    {
        pre_start -= 1;
    }
    let upper = upper_bound.min(slopes.len().saturating_sub(1));
    let mut post_end = end;
    while post_end < upper
        && post_end + 1 - end <= max_context
        && slopes[post_end + 1].abs() >= calm_threshold
    {
        post_end += 1;
    }
    EventInterval {
        pre_start,
        start,
        end,
        post_end,
    }
}

/// Expands every raw interval in order so that contexts never overlap: a
/// post-context stops before the next interval starts, a pre-context stops
/// after the previous interval's post-context.
pub fn expand_all(
    raw: &[(usize, usize)],
    slopes: &[f64],
    rise_threshold: f64,
    calm_threshold: f64,
    max_context: usize,
) -> Vec<EventInterval> {
    let n = slopes.len();
    let mut out: Vec<EventInterval> = Vec::with_capacity(raw.len());
    for (k, &iv) in raw.iter().enumerate() {
        let lower = out.last().map_or(0, |prev| prev.post_end + 1);
        let upper = raw.get(k + 1).map_or(n.saturating_sub(1), |next| next.0 - 1);
        out.push(expand_context(
            iv,
            slopes,
            rise_threshold,
            calm_threshold,
            max_context,
            lower,
            upper,
        ));
    }
    out
}

/// `count` evenly spaced picks from `candidates`, first and last included.
/// A single pick takes the middle element.
pub fn evenly_spaced<T: Copy>(candidates: &[T], count: usize) -> Vec<T> {
    let m = candidates.len();
    if count == 0 || m == 0 {
        return Vec::new();
    }
    if count >= m {
        return candidates.to_vec();
    }
    if count == 1 {
        return vec![candidates[(m - 1) / 2]];
    }
    let span = m - 1;
    let steps = count - 1;
    let mut picks: Vec<usize> = (0..count).map(|i| (i * span + steps / 2) / steps).collect();
    picks.dedup();
    picks.into_iter().map(|i| candidates[i]).collect()
}

/// Draws per-interval keyframes, truncates to the budget by fused score, then
/// fills remaining slots with evenly spaced background frames.
///
/// Only frames with `fused >= threshold` are eligible for the `on` segment,
/// so merged intervals never tag a sub-threshold dip as `on`.
pub fn sample_keyframes(
    intervals: &[EventInterval],
    scores: &ScoreSeries,
    threshold: f64,
    config: &CaesConfig,
) -> KeyframeSet {
    let n = scores.len();
    let fused = &scores.fused;
    let mut event: Vec<Keyframe> = Vec::new();
    for iv in intervals {
        let pre: Vec<usize> = (iv.pre_start..iv.start).collect();
        let on: Vec<usize> = (iv.start..=iv.end).filter(|&t| fused[t] >= threshold).collect();
        let post: Vec<usize> = (iv.end + 1..=iv.post_end).collect();
        for (seg, count, tag) in [
            (pre, config.n_pre, SegmentTag::Pre),
            (on, config.n_on, SegmentTag::On),
            (post, config.n_post, SegmentTag::Post),
        ] {
            event.extend(
                evenly_spaced(&seg, count)
                    .into_iter()
                    .map(|index| Keyframe { index, tag }),
            );
        }
    }
    let target = config.budget.min(n);
    if event.len() > target {
        event.sort_by(|a, b| fused[b.index].total_cmp(&fused[a.index]).then(a.index.cmp(&b.index)));
        event.truncate(target);
    }
    let mut taken = vec![false; n];
    for k in &event {
        taken[k.index] = true;
    }
    let background: Vec<usize> = (0..n).filter(|&t| !taken[t]).collect();
    let fill = target - event.len();
    event.extend(
        evenly_spaced(&background, fill)
            .into_iter()
            .map(|index| Keyframe {
                index,
                tag: SegmentTag::Background,
            }),
    );
    event.sort_by_key(|k| k.index);
    KeyframeSet {
        frames: event,
        budget: config.budget,
    }
}

/// Full sampler for one video.
pub fn caes(scores: &ScoreSeries, config: &CaesConfig) -> Result<CaesOutcome> {
    config.validate()?;
    let threshold = adaptive_threshold(scores, config.threshold_percentile)?;
    let fused = &scores.fused;
    let slopes = slope_series(fused, config.slope_window);
    let (rise, calm) = slope_thresholds(&slopes, config.slope_window, config);
    // A flat curve has no frame that stands out from the rest of the video.
    let flat = fused.iter().all(|&s| s == fused[0]);
    let raw = if flat {
        Vec::new()
    } else {
        detect_intervals(fused, threshold, config.slope_window)
    };
    let intervals = expand_all(&raw, &slopes, rise, calm, config.max_context);
    let keyframes = sample_keyframes(&intervals, scores, threshold, config);
    Ok(CaesOutcome {
        threshold,
        rise_threshold: rise,
        calm_threshold: calm,
        intervals,
        keyframes,
    })
}

/// Baseline: `budget` evenly spaced frames, all tagged background.
pub fn uniform_keyframes(num_frames: usize, budget: usize) -> KeyframeSet {
    let all: Vec<usize> = (0..num_frames).collect();
    KeyframeSet {
        frames: evenly_spaced(&all, budget)
            .into_iter()
            .map(|index| Keyframe {
                index,
                tag: SegmentTag::Background,
            })
            .collect(),
        budget,
    }
}

/// Baseline: the `budget` highest-scoring frames (ties to earlier frames).
pub fn top_k_keyframes(scores: &ScoreSeries, budget: usize) -> KeyframeSet {
    let fused = &scores.fused;
    let mut order: Vec<usize> = (0..fused.len()).collect();
    order.sort_by(|&a, &b| fused[b].total_cmp(&fused[a]).then(a.cmp(&b)));
    order.truncate(budget);
    order.sort_unstable();
    KeyframeSet {
        frames: order
            .into_iter()
            .map(|index| Keyframe {
                index,
                tag: SegmentTag::Background,
            })
            .collect(),
        budget,
    }
}
