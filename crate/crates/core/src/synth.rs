//! Seeded synthetic scenarios with ground truth.
//!
//! A scenario is a score curve made of Gaussian bumps over a baseline, a set
//! of objects moving at constant velocity (reflecting off the image borders)
//! with stable appearance vectors, and directed relation features that stay
//! constant per pair except for injected step changes.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VaderError};
use crate::ingest::{
    to_json_pretty, write_bundle, write_file, BBox, Bundle, BundleManifest, ClassDirsFile, Detection, FrameRecord,
    RelationFeature,
};
use crate::scoring::ScoreSeries;

pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyEvent {
    pub center: usize,
    /// Standard deviation of the bump, in frames.
    pub width: f64,
    pub peak: f64,
}

/// A step change of the relation `(pair.0 -> pair.1)` between frames
/// `transition - 1` and `transition`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationEvent {
    pub transition: usize,
    pub pair: (usize, usize),
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub video_id: String,
    pub num_frames: usize,
    pub num_objects: usize,
    pub d_app: usize,
    pub d_rel: usize,
    /// Classes for the optional class-direction file; 1 writes none.
    pub num_classes: usize,
    /// Dimension of global frame features (only used when `num_classes > 1`).
    pub d_feat: usize,
    /// Class whose direction the anomalous frames drift toward.
    pub anomaly_class: usize,
    pub baseline: f64,
    pub anomaly_events: Vec<AnomalyEvent>,
    pub relation_events: Vec<RelationEvent>,
    /// Shared component of every relation jump, blended with a random
    /// per-event direction; empty means fully random directions.
    pub relation_signature: Vec<f64>,
    pub noise_std: f64,
    pub is_normal: bool,
    pub fps: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            video_id: "synth".into(),
            num_frames: 200,
            num_objects: 3,
            d_app: 16,
            d_rel: 8,
            num_classes: 1,
            d_feat: 16,
            anomaly_class: 0,
            baseline: 0.05,
            anomaly_events: Vec::new(),
            relation_events: Vec::new(),
            relation_signature: Vec::new(),
            noise_std: 0.0,
            is_normal: false,
            fps: 25.0,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VaderError::InvalidConfig(m));
        if self.num_frames == 0 || self.d_app == 0 || self.d_rel == 0 || self.num_classes == 0 {
            return bad("num_frames, d_app, d_rel and num_classes must be at least 1".into());
        }
        if self.num_classes > 1 && (self.d_feat == 0 || self.anomaly_class >= self.num_classes) {
            return bad("class evidence needs d_feat >= 1 and anomaly_class < num_classes".into());
        }
        if !(0.0..=1.0).contains(&self.baseline) {
            return bad(format!("baseline {} must lie in [0, 1]", self.baseline));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std {} must be non-negative", self.noise_std));
        }
        if !(self.fps > 0.0) {
            return bad(format!("fps {} must be positive", self.fps));
        }
        for e in &self.anomaly_events {
            if e.center >= self.num_frames {
                return bad(format!("anomaly event center {} is outside the video", e.center));
            }
            if !(e.peak > 0.0 && e.peak <= 1.0) {
                return bad(format!("anomaly event peak {} must lie in (0, 1]", e.peak));
            }
            if !(e.width > 0.0) {
                return bad(format!("anomaly event width {} must be positive", e.width));
            }
        }
        if !self.relation_signature.is_empty() && self.relation_signature.len() != self.d_rel {
            return bad(format!(
                "relation_signature has length {}, expected d_rel = {}",
                self.relation_signature.len(),
                self.d_rel
            ));
        }
        if self.relation_signature.iter().any(|x| !x.is_finite()) {
            return bad("relation_signature must be finite".into());
        }
        if self.is_normal && !self.relation_events.is_empty() {
            return bad("normal scenarios cannot contain relation events".into());
        }
        for r in &self.relation_events {
            if r.transition == 0 || r.transition >= self.num_frames {
                return bad(format!("relation event transition {} must lie in [1, num_frames)", r.transition));
            }
            let (a, b) = r.pair;
            if a == b || a >= self.num_objects || b >= self.num_objects {
                return bad(format!("relation event pair ({a}, {b}) is invalid"));
            }
            if !(r.magnitude > 0.0) || !r.magnitude.is_finite() {
                return bad(format!("relation event magnitude {} must be positive", r.magnitude));
            }
        }
        Ok(())
    }
}

/// Inclusive frame ranges of one anomaly event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSegments {
    pub pre: Option<(usize, usize)>,
    pub on: (usize, usize),
    pub post: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video_id: String,
    pub is_normal: bool,
    pub anomaly_events: Vec<AnomalyEvent>,
    pub event_segments: Vec<EventSegments>,
    pub positive_transitions: Vec<RelationEvent>,
    /// Per frame, the object id behind each detection index.
    pub identity: Vec<Vec<usize>>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn noise<R: Rng>(std: f64, rng: &mut R) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        Normal::new(0.0, std).expect("finite std").sample(rng)
    }
}

/// Baseline plus Gaussian bumps plus seeded noise, clipped to [0, 1].
pub fn generate_score_curve(spec: &ScenarioSpec) -> Result<ScoreSeries> {
    spec.validate()?;
    let mut rng = stream(spec.seed, 1);
    let curve: Vec<f64> = (0..spec.num_frames)
        .map(|t| {
            let bumps: f64 = spec
                .anomaly_events
                .iter()
                .map(|e| {
                    let z = (t as f64 - e.center as f64) / e.width;
                    e.peak * (-0.5 * z * z).exp()
                })
                .sum();
            (spec.baseline + bumps + noise(spec.noise_std, &mut rng)).clamp(0.0, 1.0)
        })
        .collect();
    ScoreSeries::from_probabilities(curve)
}

/// Frame ranges used as ground truth for sampler coverage: `on` spans one
/// width around the center, `pre` and `post` the next two widths outward.
pub fn event_segments(event: &AnomalyEvent, num_frames: usize) -> EventSegments {
    let c = event.center as f64;
    let last = (num_frames - 1) as f64;
    let clip = |x: f64| x.round().clamp(0.0, last) as usize;
    let on = (clip(c - event.width), clip(c + event.width));
    let pre_start = clip(c - 3.0 * event.width);
    let post_end = clip(c + 3.0 * event.width);
    EventSegments {
        pre: (on.0 > pre_start).then(|| (pre_start, on.0 - 1)),
        on,
        post: (post_end > on.1).then(|| (on.1 + 1, post_end)),
    }
}

struct MovingBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
}

impl MovingBox {
    fn step(&mut self) {
        fn bounce(pos: &mut f64, vel: &mut f64, limit: f64) {
            *pos += *vel;
            if *pos < 0.0 {
                *pos = -*pos;
                *vel = -*vel;
            } else if *pos > limit {
                *pos = 2.0 * limit - *pos;
                *vel = -*vel;
            }
            *pos = pos.clamp(0.0, limit);
        }
        bounce(&mut self.x, &mut self.vx, 1.0 - self.w);
        bounce(&mut self.y, &mut self.vy, 1.0 - self.h);
    }

    fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, (self.x + self.w).min(1.0), (self.y + self.h).min(1.0))
    }
}

/// Builds a full bundle and its ground truth.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<(Bundle, GroundTruth)> {
    spec.validate()?;
    let scores = generate_score_curve(spec)?;
    let n_obj = spec.num_objects;

    let mut obj_rng = stream(spec.seed, 2);
    let mut boxes: Vec<MovingBox> = (0..n_obj)
        .map(|_| {
            let w = obj_rng.random_range(0.08..0.2);
            let h = obj_rng.random_range(0.08..0.2);
            MovingBox {
                x: obj_rng.random_range(0.0..1.0 - w),
                y: obj_rng.random_range(0.0..1.0 - h),
                w,
                h,
                vx: obj_rng.random_range(-0.01..0.01),
                vy: obj_rng.random_range(-0.01..0.01),
            }
        })
        .collect();
    let appearances: Vec<Vec<f64>> = (0..n_obj).map(|_| unit_vector(spec.d_app, &mut obj_rng)).collect();

    let mut rel_rng = stream(spec.seed, 3);
    let pairs: Vec<(usize, usize)> = (0..n_obj)
        .flat_map(|a| (0..n_obj).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    let mut relation_base: Vec<Vec<f64>> = pairs
        .iter()
        .map(|_| (0..spec.d_rel).map(|_| StandardNormal.sample(&mut rel_rng)).collect())
        .collect();
    let mut events = spec.relation_events.clone();
    events.sort_by_key(|e| e.transition);
    let jumps: Vec<Vec<f64>> = events
        .iter()
        .map(|e| {
            let mut dir = unit_vector(spec.d_rel, &mut rel_rng);
            if !spec.relation_signature.is_empty() {
                for (d, s) in dir.iter_mut().zip(&spec.relation_signature) {
                    *d += s;
                }
                let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                dir.iter_mut().for_each(|d| *d /= n);
            }
            dir.into_iter().map(|x| x * e.magnitude).collect()
        })
        .collect();

    let mut frame_rng = stream(spec.seed, 4);
    let mut next_event = 0;
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut identity = Vec::with_capacity(spec.num_frames);
    for t in 0..spec.num_frames {
        if t > 0 {
            for b in &mut boxes {
                b.step();
            }
        }
        while next_event < events.len() && events[next_event].transition == t {
            let e = &events[next_event];
            let k = pairs.iter().position(|&p| p == e.pair).expect("validated pair");
            for (x, j) in relation_base[k].iter_mut().zip(&jumps[next_event]) {
                *x += j;
            }
            next_event += 1;
        }
        let mut order: Vec<usize> = (0..n_obj).collect();
        order.shuffle(&mut frame_rng);
        let mut slot = vec![0usize; n_obj];
        for (d, &o) in order.iter().enumerate() {
            slot[o] = d;
        }
        let detections = order
            .iter()
            .map(|&o| {
                let jittered: Vec<f64> = appearances[o]
                    .iter()
                    .map(|x| x + noise(spec.noise_std, &mut frame_rng))
                    .collect();
                let n = jittered.iter().map(|x| x * x).sum::<f64>().sqrt();
                Detection {
                    bbox: boxes[o].bbox(),
                    appearance: jittered.into_iter().map(|x| x / n).collect(),
                    label: Some(format!("object{o}")),
                }
            })
            .collect();
        let relations = pairs
            .iter()
            .zip(&relation_base)
            .map(|(&(a, b), base)| RelationFeature {
                subject_index: slot[a],
                object_index: slot[b],
                feat: base.iter().map(|x| x + noise(spec.noise_std, &mut frame_rng)).collect(),
            })
            .collect();
        frames.push(FrameRecord {
            t,
            detections,
            relations,
        });
        identity.push(order);
    }

    let (class_dirs, frame_feats) = if spec.num_classes > 1 {
        let mut feat_rng = stream(spec.seed, 5);
        // Shared across every scenario so class directions agree within a corpus.
        let mut shared = stream(0x5EED, 6);
        let center: Vec<f64> = (0..spec.d_feat).map(|_| StandardNormal.sample(&mut shared)).collect();
        let embeddings: Vec<Vec<f64>> = (0..spec.num_classes)
            .map(|_| {
                unit_vector(spec.d_feat, &mut shared)
                    .iter()
                    .zip(&center)
                    .map(|(d, c)| c + 2.0 * d)
                    .collect()
            })
            .collect();
        let drift: Vec<f64> = embeddings[spec.anomaly_class]
            .iter()
            .zip(&center)
            .map(|(e, c)| e - c)
            .collect();
        let feats = scores
            .p_anomaly
            .iter()
            .map(|&p| {
                center
                    .iter()
                    .zip(&drift)
                    .map(|(c, d)| c + p * 2.0 * d + 0.1 * noise(1.0, &mut feat_rng))
                    .collect()
            })
            .collect();
        (
            Some(ClassDirsFile {
                classes: (0..spec.num_classes).map(|c| format!("class{c}")).collect(),
                embeddings,
            }),
            Some(feats),
        )
    } else {
        (None, None)
    };

    let bundle = Bundle {
        manifest: BundleManifest {
            video_id: spec.video_id.clone(),
            num_frames: spec.num_frames,
            is_normal: spec.is_normal,
            d_app: spec.d_app,
            d_rel: spec.d_rel,
            num_classes: spec.num_classes,
            fps: spec.fps,
        },
        scores: Some(scores),
        frames,
        class_dirs,
        frame_feats,
    };
    let truth = GroundTruth {
        video_id: spec.video_id.clone(),
        is_normal: spec.is_normal,
        anomaly_events: spec.anomaly_events.clone(),
        event_segments: spec
            .anomaly_events
            .iter()
            .map(|e| event_segments(e, spec.num_frames))
            .collect(),
        positive_transitions: events,
        identity,
    };
    Ok((bundle, truth))
}

/// Writes the bundle and `truth.json` into `dir`.
pub fn write_scenario(spec: &ScenarioSpec, dir: impl AsRef<Path>) -> Result<(Bundle, GroundTruth)> {
    let dir = dir.as_ref();
    let (bundle, truth) = generate_scenario(spec)?;
    write_bundle(&bundle, dir)?;
    write_file(&dir.join(TRUTH_FILE), &to_json_pretty(&truth))?;
    Ok((bundle, truth))
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            VaderError::MissingComponent(path.to_path_buf())
        } else {
            VaderError::io(path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| VaderError::parse(path, e.to_string()))
}

/// Shape of a seeded mixed corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_abnormal: usize,
    pub num_normal: usize,
    pub num_frames: usize,
    pub num_objects: usize,
    pub d_app: usize,
    pub d_rel: usize,
    pub num_classes: usize,
    /// Anomaly events per abnormal video, each carrying one relation event.
    pub events_per_video: usize,
    pub magnitude: f64,
    /// Length of the shared relation-jump component relative to the unit
    /// random component; 0 gives independent jump directions.
    pub signature_weight: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_abnormal: 10,
            num_normal: 10,
            num_frames: 200,
            num_objects: 3,
            d_app: 16,
            d_rel: 8,
            num_classes: 1,
            events_per_video: 2,
            magnitude: 6.0,
            signature_weight: 1.0,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// Scenario specs for a corpus: abnormal videos get evenly separated anomaly
/// bumps, each with a relation step change near its apex; normal videos get
/// neither.
pub fn corpus_specs(corpus: &CorpusSpec) -> Vec<ScenarioSpec> {
    let mut rng = stream(corpus.seed, 7);
    let signature: Vec<f64> = if corpus.signature_weight > 0.0 {
        let mut sig_rng = stream(corpus.seed, 8);
        unit_vector(corpus.d_rel, &mut sig_rng)
            .into_iter()
            .map(|x| x * corpus.signature_weight)
            .collect()
    } else {
        Vec::new()
    };
    let mut out = Vec::with_capacity(corpus.num_abnormal + corpus.num_normal);
    let n = corpus.num_frames;
    for k in 0..corpus.num_abnormal {
        let slots = corpus.events_per_video.max(1);
        let slot_len = n / slots;
        let mut anomaly_events = Vec::new();
        let mut relation_events = Vec::new();
        for s in 0..corpus.events_per_video {
            let lo = s * slot_len + slot_len / 3;
            let hi = (s * slot_len + 2 * slot_len / 3).max(lo + 1);
            let center = rng.random_range(lo..hi).min(n - 1);
            let width = rng.random_range(4.0..8.0);
            anomaly_events.push(AnomalyEvent {
                center,
                width,
                peak: rng.random_range(0.6..0.9),
            });
            if corpus.num_objects >= 2 {
                let a = rng.random_range(0..corpus.num_objects);
                let mut b = rng.random_range(0..corpus.num_objects - 1);
                if b >= a {
                    b += 1;
                }
                relation_events.push(RelationEvent {
                    transition: center.max(1),
                    pair: (a, b),
                    magnitude: corpus.magnitude * rng.random_range(0.8..1.2),
                });
            }
        }
        out.push(ScenarioSpec {
            video_id: format!("abnormal_{k:03}"),
            num_frames: n,
            num_objects: corpus.num_objects,
            d_app: corpus.d_app,
            d_rel: corpus.d_rel,
            num_classes: corpus.num_classes,
            anomaly_events,
            relation_events,
            relation_signature: signature.clone(),
            noise_std: corpus.noise_std,
            is_normal: false,
            seed: rng.random(),
            ..ScenarioSpec::default()
        });
    }
    for k in 0..corpus.num_normal {
        out.push(ScenarioSpec {
            video_id: format!("normal_{k:03}"),
            num_frames: n,
            num_objects: corpus.num_objects,
            d_app: corpus.d_app,
            d_rel: corpus.d_rel,
            num_classes: corpus.num_classes,
            noise_std: corpus.noise_std,
            is_normal: true,
            seed: rng.random(),
            ..ScenarioSpec::default()
        });
    }
    out
}
