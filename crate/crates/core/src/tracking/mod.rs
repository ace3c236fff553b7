//! Object identity across sampled frames.
//!
//! Detections are matched to live tracks with a cost built from appearance
//! cosine similarity and box IoU, solved as an optimal assignment. Tracks
//! unmatched for more than `max_age` consecutive sampled frames are retired.

mod assignment;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use assignment::{assign, CostMatrix, Matching};

use crate::error::{Result, VaderError};
use crate::ingest::{BBox, Detection, FrameRecord};
use crate::scoring::{dot, l2_norm};

pub type TrackId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssocConfig {
    pub appearance_weight: f64,
    pub iou_weight: f64,
    pub min_similarity: f64,
    pub max_age: usize,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self {
            appearance_weight: 0.8,
            iou_weight: 0.2,
            min_similarity: 0.3,
            max_age: 15,
        }
    }
}

impl AssocConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.appearance_weight, self.iou_weight);
        if !(a >= 0.0 && b >= 0.0) || ((a + b) - 1.0).abs() > 1e-9 {
            return Err(VaderError::InvalidConfig(format!(
                "association weights {a} and {b} must be non-negative and sum to 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.min_similarity) {
            return Err(VaderError::InvalidConfig(format!(
                "min_similarity {} must lie in [0, 1]",
                self.min_similarity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: TrackId,
    /// frame index -> detection index within that frame
    pub observations: BTreeMap<usize, usize>,
    pub last_appearance: Vec<f64>,
    pub last_bbox: BBox,
    pub misses: usize,
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_proper() {
            return Err(VaderError::ValueOutOfRange(format!(
                "degenerate box {:?}",
                bx.0
            )));
        }
    }
    let w = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let h = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return Ok(0.0);
    }
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(VaderError::SchemaViolation(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(VaderError::ValueOutOfRange(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Combined similarity in [0, 1]: cosine mapped to [0, 1] and IoU, weighted.
pub fn similarity(
    appearance_a: &[f64],
    bbox_a: &BBox,
    appearance_b: &[f64],
    bbox_b: &BBox,
    config: &AssocConfig,
) -> Result<f64> {
    let cos = cosine_similarity(appearance_a, appearance_b)?;
    let mapped = ((cos + 1.0) / 2.0).clamp(0.0, 1.0);
    Ok(config.appearance_weight * mapped + config.iou_weight * iou(bbox_a, bbox_b)?)
}

/// `1 - similarity` per (track, detection); entries under the gate are forbidden.
pub fn association_cost(
    tracks: &[Track],
    detections: &[Detection],
    config: &AssocConfig,
) -> Result<CostMatrix> {
    tracks
        .iter()
        .map(|tr| {
            detections
                .iter()
                .map(|d| {
                    let s = similarity(&tr.last_appearance, &tr.last_bbox, &d.appearance, &d.bbox, config)?;
                    Ok((s >= config.min_similarity).then_some(1.0 - s))
                })
                .collect()
        })
        .collect()
}

/// Live and retired tracks of one video.
#[derive(Debug, Clone, Default)]
pub struct TrackSet {
    pub active: Vec<Track>,
    pub retired: Vec<Track>,
    next_id: TrackId,
}

impl TrackSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// All tracks ordered by id.
    pub fn into_tracks(self) -> Vec<Track> {
        let mut all = self.retired;
        all.extend(self.active);
        all.sort_by_key(|t| t.track_id);
        all
    }
}

/// Applies a matching for frame `t`. Returns the track id given to each
/// detection.
pub fn update_tracks(
    set: &mut TrackSet,
    detections: &[Detection],
    matching: &Matching,
    t: usize,
    config: &AssocConfig,
) -> Vec<TrackId> {
    let mut ids: Vec<Option<TrackId>> = vec![None; detections.len()];
    let mut matched = vec![false; set.active.len()];
    for &(ti, di) in &matching.pairs {
        let track = &mut set.active[ti];
        let det = &detections[di];
        track.observations.insert(t, di);
        track.last_appearance.clone_from(&det.appearance);
        track.last_bbox = det.bbox;
        track.misses = 0;
        matched[ti] = true;
        ids[di] = Some(track.track_id);
    }
    let mut still_active = Vec::with_capacity(set.active.len());
    for (track, hit) in std::mem::take(&mut set.active).into_iter().zip(matched) {
        let mut track = track;
        if !hit {
            track.misses += 1;
        }
        if track.misses > config.max_age {
            set.retired.push(track);
        } else {
            still_active.push(track);
        }
    }
    set.active = still_active;
    for (di, det) in detections.iter().enumerate() {
        if ids[di].is_none() {
            let id = set.next_id;
            set.next_id += 1;
            set.active.push(Track {
                track_id: id,
                observations: BTreeMap::from([(t, di)]),
                last_appearance: det.appearance.clone(),
                last_bbox: det.bbox,
                misses: 0,
            });
            ids[di] = Some(id);
        }
    }
    ids.into_iter().map(|id| id.expect("every detection has a track")).collect()
}

/// Track ids per sampled frame: `frame index -> track id of each detection`.
pub type FrameTrackIds = BTreeMap<usize, Vec<TrackId>>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingResult {
    pub tracks: Vec<Track>,
    pub frame_ids: FrameTrackIds,
}

impl TrackingResult {
    /// `track_id -> [(t, detection index)]`, the `tracks.json` layout.
    pub fn to_map(&self) -> BTreeMap<TrackId, Vec<(usize, usize)>> {
        self.tracks
            .iter()
            .map(|t| (t.track_id, t.observations.iter().map(|(&f, &d)| (f, d)).collect()))
            .collect()
    }
}

/// Rebuilds per-frame track ids from a `tracks.json` map.
pub fn frame_ids_from_map(
    map: &BTreeMap<TrackId, Vec<(usize, usize)>>,
    frames: &[FrameRecord],
) -> Result<FrameTrackIds> {
    let mut slots: BTreeMap<usize, Vec<Option<TrackId>>> = BTreeMap::new();
    for (&id, obs) in map {
        for &(t, d) in obs {
            let frame = frames.get(t).ok_or_else(|| {
                VaderError::SchemaViolation(format!("track {id} references missing frame {t}"))
            })?;
            let row = slots
                .entry(t)
                .or_insert_with(|| vec![None; frame.detections.len()]);
            let slot = row.get_mut(d).ok_or_else(|| {
                VaderError::SchemaViolation(format!(
                    "track {id} references detection {d} of frame {t}, which has {}",
                    frame.detections.len()
                ))
            })?;
            if slot.replace(id).is_some() {
                return Err(VaderError::SchemaViolation(format!(
                    "detection {d} of frame {t} belongs to two tracks"
                )));
            }
        }
    }
    slots
        .into_iter()
        .map(|(t, row)| {
            row.into_iter()
                .enumerate()
                .map(|(d, id)| {
                    id.ok_or_else(|| {
                        VaderError::SchemaViolation(format!(
                            "detection {d} of frame {t} has no track"
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(|ids| (t, ids))
        })
        .collect()
}

/// Tracks objects over the sampled frames in index order.
pub fn track_video(
    frames: &[FrameRecord],
    keyframes: &[usize],
    config: &AssocConfig,
) -> Result<TrackingResult> {
    config.validate()?;
    let mut set = TrackSet::new();
    let mut frame_ids = BTreeMap::new();
    let mut order = keyframes.to_vec();
    order.sort_unstable();
    order.dedup();
    for t in order {
        let frame = frames.get(t).ok_or_else(|| {
            VaderError::SchemaViolation(format!("keyframe {t} is outside the video"))
        })?;
        let cost = association_cost(&set.active, &frame.detections, config)?;
        let matching = assign(&cost);
        let ids = update_tracks(&mut set, &frame.detections, &matching, t, config);
        frame_ids.insert(t, ids);
    }
    Ok(TrackingResult {
        tracks: set.into_tracks(),
        frame_ids,
    })
}
