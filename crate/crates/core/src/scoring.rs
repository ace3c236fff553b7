//! Normality-prototype re-centering and fused per-frame anomaly scores.
//!
//! Frame features are re-centered on the mean of normal frames, projected
//! onto per-class directions, turned into a class distribution with a
//! temperature softmax, and combined with the per-frame anomaly probability
//! as `max_c p_A * p(c | A)`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VaderError};

/// Tolerance on the total mass of a class distribution passed to [`fuse_score`].
pub const DIST_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityPrototype {
    pub mean: Vec<f64>,
}

impl NormalityPrototype {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
        }
    }
}

/// Re-centered, unit-normalized class directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDirections {
    pub classes: Vec<String>,
    pub dirs: Vec<Vec<f64>>,
}

impl ClassDirections {
    /// Re-centers raw class embeddings by the prototype and normalizes each to
    /// unit length.
    pub fn prepare(
        classes: Vec<String>,
        embeddings: &[Vec<f64>],
        proto: &NormalityPrototype,
    ) -> Result<Self> {
        if classes.len() != embeddings.len() {
            return Err(VaderError::SchemaViolation(format!(
                "{} class names but {} class embeddings",
                classes.len(),
                embeddings.len()
            )));
        }
        if classes.is_empty() {
            return Err(VaderError::EmptyInput("class directions".into()));
        }
        let centered = recenter(embeddings, proto)?;
        let mut dirs = Vec::with_capacity(centered.len());
        for (name, v) in classes.iter().zip(centered) {
            let norm = l2_norm(&v);
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(VaderError::ValueOutOfRange(format!(
                    "class direction `{name}` has norm {norm} after re-centering"
                )));
            }
            dirs.push(v.iter().map(|x| x / norm).collect());
        }
        Ok(Self { classes, dirs })
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dirs.first().map_or(0, Vec::len)
    }
}

/// Per-frame anomaly probability, fused score and most likely class.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub p_anomaly: Vec<f64>,
    pub fused: Vec<f64>,
    pub argmax_class: Vec<usize>,
}

impl ScoreSeries {
    pub fn new(p_anomaly: Vec<f64>, fused: Vec<f64>, argmax_class: Vec<usize>) -> Result<Self> {
        if p_anomaly.len() != fused.len() || p_anomaly.len() != argmax_class.len() {
            return Err(VaderError::SchemaViolation(format!(
                "score series lengths differ: p_anomaly {}, fused {}, argmax_class {}",
                p_anomaly.len(),
                fused.len(),
                argmax_class.len()
            )));
        }
        for (t, (&p, &s)) in p_anomaly.iter().zip(&fused).enumerate() {
            check_probability(p, &format!("frame {t}: p_anomaly"))?;
            check_probability(s, &format!("frame {t}: fused"))?;
            if s > p {
                return Err(VaderError::ValueOutOfRange(format!(
                    "frame {t}: fused score {s} exceeds p_anomaly {p}"
                )));
            }
        }
        Ok(Self {
            p_anomaly,
            fused,
            argmax_class,
        })
    }

    /// A series where no class information is available: the single-class
    /// case of the fusion, so `fused == p_anomaly` and every argmax is 0.
    pub fn from_probabilities(p_anomaly: Vec<f64>) -> Result<Self> {
        let n = p_anomaly.len();
        Self::new(p_anomaly.clone(), p_anomaly, vec![0; n])
    }

    /// Builds a series from raw fused scores alone (synthetic curves, tests).
    pub fn from_fused(fused: &[f64]) -> Result<Self> {
        Self::from_probabilities(fused.to_vec())
    }

    pub fn len(&self) -> usize {
        self.fused.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fused.is_empty()
    }

    /// True when the fused column carries no information beyond `p_anomaly`.
    pub fn is_identity_fusion(&self) -> bool {
        self.argmax_class.iter().all(|&c| c == 0)
            && self
                .p_anomaly
                .iter()
                .zip(&self.fused)
                .all(|(p, s)| p.to_bits() == s.to_bits())
    }
}

fn check_probability(v: f64, what: &str) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(VaderError::ValueOutOfRange(format!(
            "{what} = {v} is outside [0, 1]"
        )))
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Component-wise mean of the features of normal frames.
pub fn compute_prototype(normal_features: &[Vec<f64>]) -> Result<NormalityPrototype> {
    let first = normal_features
        .first()
        .ok_or_else(|| VaderError::EmptyInput("normal feature list".into()))?;
    let dim = first.len();
    let mut sum = vec![0.0; dim];
    for (row, v) in normal_features.iter().enumerate() {
        if v.len() != dim {
            return Err(VaderError::SchemaViolation(format!(
                "normal feature {row} has dimension {}, expected {dim}",
                v.len()
            )));
        }
        for (acc, x) in sum.iter_mut().zip(v) {
            *acc += x;
        }
    }
    let n = normal_features.len() as f64;
    Ok(NormalityPrototype {
        mean: sum.into_iter().map(|s| s / n).collect(),
    })
}

pub fn recenter(features: &[Vec<f64>], proto: &NormalityPrototype) -> Result<Vec<Vec<f64>>> {
    features
        .iter()
        .enumerate()
        .map(|(row, v)| {
            if v.len() != proto.dim() {
                return Err(VaderError::SchemaViolation(format!(
                    "feature {row} has dimension {}, prototype has {}",
                    v.len(),
                    proto.dim()
                )));
            }
            Ok(v.iter().zip(&proto.mean).map(|(x, m)| x - m).collect())
        })
        .collect()
}

/// Temperature softmax over the projections of a re-centered frame onto the
/// class directions.
pub fn class_conditional(
    recentered_frame: &[f64],
    dirs: &ClassDirections,
    temperature: f64,
) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(VaderError::ValueOutOfRange(format!(
            "temperature {temperature} must be positive and finite"
        )));
    }
    if dirs.is_empty() {
        return Err(VaderError::EmptyInput("class directions".into()));
    }
    if recentered_frame.len() != dirs.dim() {
        return Err(VaderError::SchemaViolation(format!(
            "frame dimension {} does not match class direction dimension {}",
            recentered_frame.len(),
            dirs.dim()
        )));
    }
    let logits: Vec<f64> = dirs
        .dirs
        .iter()
        .map(|d| dot(recentered_frame, d) / temperature)
        .collect();
    Ok(softmax(&logits))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `max_c p_A * dist[c]` and the smallest class index attaining it.
pub fn fuse_score(p_anomaly: f64, class_dist: &[f64]) -> Result<(f64, usize)> {
    check_probability(p_anomaly, "p_anomaly")?;
    if class_dist.is_empty() {
        return Err(VaderError::EmptyInput("class distribution".into()));
    }
    let total: f64 = class_dist.iter().sum();
    if (total - 1.0).abs() > DIST_SUM_TOL {
        return Err(VaderError::ValueOutOfRange(format!(
            "class distribution sums to {total}, expected 1"
        )));
    }
    let mut best = (p_anomaly * class_dist[0], 0);
    for (c, &q) in class_dist.iter().enumerate().skip(1) {
        let s = p_anomaly * q;
        if s > best.0 {
            best = (s, c);
        }
    }
    Ok(best)
}

/// Scores every frame of a video.
pub fn score_frames(
    p_anomaly: &[f64],
    frame_features: &[Vec<f64>],
    proto: &NormalityPrototype,
    dirs: &ClassDirections,
    temperature: f64,
) -> Result<ScoreSeries> {
    if p_anomaly.len() != frame_features.len() {
        return Err(VaderError::SchemaViolation(format!(
            "{} anomaly probabilities but {} frame feature rows",
            p_anomaly.len(),
            frame_features.len()
        )));
    }
    let centered = recenter(frame_features, proto)?;
    let mut fused = Vec::with_capacity(p_anomaly.len());
    let mut argmax = Vec::with_capacity(p_anomaly.len());
    for (t, (&p, frame)) in p_anomaly.iter().zip(&centered).enumerate() {
        let dist = class_conditional(frame, dirs, temperature)?;
        let (s, c) = fuse_score(p, &dist).map_err(|e| match e {
            VaderError::ValueOutOfRange(m) => VaderError::ValueOutOfRange(format!("frame {t}: {m}")),
            other => other,
        })?;
        fused.push(s);
        argmax.push(c);
    }
    ScoreSeries::new(p_anomaly.to_vec(), fused, argmax)
}
