//! Independent reference implementations and generators shared by the
//! integration tests and the acceptance harness.
//!
//! Every oracle here is written the slow, obvious way on purpose and does not
//! call into the routine it checks.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vader_core::caes::{CaesConfig, CaesOutcome, SegmentTag};
use vader_core::encoder::{encode, loss_gradients, triplet_loss, EncoderParams};
use vader_core::ingest::{BBox, Detection, FrameRecord, RelationFeature};
use vader_core::scoring::ScoreSeries;
use vader_core::synth::{AnomalyEvent, ScenarioSpec};
use vader_core::tracking::CostMatrix;
use vader_core::tracking::TrackId;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- assignment

/// Exhaustive search over every partial injection rows -> columns.
/// Returns (matched count, total cost) of the best matching, where more pairs
/// always wins and cost breaks ties. Costs are summed in row order.
pub fn brute_force_assign(cost: &CostMatrix) -> (usize, f64) {
    fn go(cost: &CostMatrix, row: usize, used: &mut Vec<bool>, card: usize, acc: f64, best: &mut (usize, f64)) {
        if row == cost.len() {
            if card > best.0 || (card == best.0 && acc < best.1) {
                *best = (card, acc);
            }
            return;
        }
        go(cost, row + 1, used, card, acc, best);
        for j in 0..used.len() {
            if let (false, Some(c)) = (used[j], cost[row][j]) {
                used[j] = true;
                go(cost, row + 1, used, card + 1, acc + c, best);
                used[j] = false;
            }
        }
    }
    let m = cost.first().map_or(0, Vec::len);
    let mut best = (0, f64::INFINITY);
    go(cost, 0, &mut vec![false; m], 0, 0.0, &mut best);
    if best.0 == 0 {
        best.1 = 0.0;
    }
    best
}

/// Random `n x m` matrix with n, m in 1..=6. Roughly a quarter of the
/// matrices use small integer costs so exact ties appear, and entries are
/// forbidden with a per-matrix probability in [0, 0.5).
pub fn random_cost_matrix<R: Rng>(rng: &mut R) -> CostMatrix {
    let n = rng.random_range(1..=6);
    let m = rng.random_range(1..=6);
    let forbid = rng.random_range(0.0..0.5);
    let integer = rng.random_bool(0.25);
    (0..n)
        .map(|_| {
            (0..m)
                .map(|_| {
                    if rng.random_bool(forbid) {
                        None
                    } else if integer {
                        Some(rng.random_range(0..4) as f64)
                    } else {
                        Some(rng.random_range(0.0..1.0))
                    }
                })
                .collect()
        })
        .collect()
}

// ----------------------------------------------------------------------- AUC

/// Mann-Whitney statistic from all positive/negative pairs.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut twice_wins = 0u64;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            twice_wins += match si.partial_cmp(&sj).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    debug_assert_eq!(pairs as f64, n_pos * n_neg);
    (twice_wins as f64 / 2.0) / (n_pos * n_neg)
}

// ----------------------------------------------------------------- smoothing

/// Gaussian smoothing by explicit construction of the mirrored signal and a
/// plain weighted sum.
pub fn direct_smooth(curve: &[f64], sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as usize;
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|k| {
            let d = k as f64 - radius as f64;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / z).collect();

    // Half-sample symmetric extension is periodic with period 2n:
    // `curve, reversed curve`. Tile that period far enough both ways.
    let n = curve.len();
    let period: Vec<f64> = curve.iter().chain(curve.iter().rev()).copied().collect();
    let copies_left = radius.div_ceil(2 * n);
    let total = copies_left * 2 * n + n + radius;
    let tiled: Vec<f64> = period.iter().cycle().take(total + 2 * n).copied().collect();
    let origin = copies_left * 2 * n;
    let padded = &tiled[origin - radius..origin + n + radius];

    (0..n)
        .map(|i| (0..=2 * radius).map(|k| weights[k] * padded[i + k]).sum())
        .collect()
}

// ---------------------------------------------------------------- volatility

/// Looks every co-tracked ordered pair up by linear scans over the raw frame
/// records and returns the largest L2 change with its pair (smallest pair on
/// ties), or `(0, None)` when no pair survives.
pub fn brute_force_volatility(
    before: &FrameRecord,
    before_ids: &[TrackId],
    after: &FrameRecord,
    after_ids: &[TrackId],
) -> (f64, Option<(TrackId, TrackId)>) {
    let find = |frame: &FrameRecord, ids: &[TrackId], a: TrackId, b: TrackId| -> Option<Vec<f64>> {
        frame
            .relations
            .iter()
            .find(|r| ids[r.subject_index] == a && ids[r.object_index] == b)
            .map(|r| r.feat.clone())
    };
    let mut best: (f64, Option<(TrackId, TrackId)>) = (0.0, None);
    for &a in before_ids {
        for &b in before_ids {
            if a == b {
                continue;
            }
            let (Some(x), Some(y)) = (find(before, before_ids, a, b), find(after, after_ids, a, b)) else {
                continue;
            };
            let mut sq = 0.0;
            for k in 0..x.len() {
                sq += (y[k] - x[k]) * (y[k] - x[k]);
            }
            let d = sq.sqrt();
            let better = match best.1 {
                None => true,
                Some(p) => d > best.0 || (d == best.0 && (a, b) < p),
            };
            if better {
                best = (d, Some((a, b)));
            }
        }
    }
    best
}

/// One random frame whose detections carry distinct ids drawn from a pool of
/// six, with a random subset of the directed relations present.
pub fn random_tracked_frame<R: Rng>(rng: &mut R, t: usize, d_rel: usize) -> (FrameRecord, Vec<TrackId>) {
    let mut pool: Vec<TrackId> = (0..6).collect();
    pool.shuffle(rng);
    let k = rng.random_range(0..=5);
    let ids: Vec<TrackId> = pool[..k].to_vec();
    let detections = (0..k)
        .map(|_| Detection {
            bbox: BBox::new(0.1, 0.1, 0.3, 0.3),
            appearance: vec![1.0, 0.0],
            label: None,
        })
        .collect();
    let mut relations = Vec::new();
    for i in 0..k {
        for j in 0..k {
            if i != j && rng.random_bool(0.7) {
                relations.push(RelationFeature {
                    subject_index: i,
                    object_index: j,
                    // Coarse grid so equal changes (ties) actually happen.
                    feat: (0..d_rel).map(|_| rng.random_range(-3..=3) as f64 * 0.5).collect(),
                });
            }
        }
    }
    (
        FrameRecord {
            t,
            detections,
            relations,
        },
        ids,
    )
}

// ---------------------------------------------------------------------- CAES

/// A random score curve: baseline, a few bumps or plateaus, optional noise,
/// occasional flat stretches, length 1..=400.
pub fn random_score_curve<R: Rng>(rng: &mut R) -> Vec<f64> {
    let n = match rng.random_range(0..10) {
        0 => rng.random_range(1..=64),
        _ => rng.random_range(65..=400),
    };
    let base = rng.random_range(0.0..0.3);
    let noise = if rng.random_bool(0.7) { rng.random_range(0.0..0.1) } else { 0.0 };
    let bumps = rng.random_range(0..=6);
    let mut curve = vec![base; n];
    for _ in 0..bumps {
        let c = rng.random_range(0..n) as f64;
        let w = rng.random_range(1.0..20.0);
        let h = rng.random_range(0.1..0.9);
        let plateau = rng.random_bool(0.3);
        for (t, v) in curve.iter_mut().enumerate() {
            let z = (t as f64 - c) / w;
            *v += if plateau {
                if z.abs() <= 1.0 { h } else { 0.0 }
            } else {
                h * (-0.5 * z * z).exp()
            };
        }
    }
    for v in &mut curve {
        if noise > 0.0 {
            *v += rng.random_range(-noise..noise);
        }
        *v = v.clamp(0.0, 1.0);
    }
    curve
}

/// Checks the keyframe contract; returns a description of the first breach.
pub fn check_caes_contract(scores: &ScoreSeries, out: &CaesOutcome, config: &CaesConfig) -> Result<(), String> {
    let n = scores.len();
    let idx = out.keyframes.indices();
    if idx.len() != config.budget.min(n) {
        return Err(format!("{} keyframes for {n} frames", idx.len()));
    }
    if idx.windows(2).any(|w| w[0] >= w[1]) {
        return Err("keyframes are not strictly increasing".into());
    }
    if idx.iter().any(|&i| i >= n) {
        return Err("keyframe index out of range".into());
    }
    for k in &out.keyframes.frames {
        if k.tag == SegmentTag::On && scores.fused[k.index] < out.threshold {
            return Err(format!("on-frame {} is below the threshold", k.index));
        }
    }
    for iv in &out.intervals {
        if iv.start - iv.pre_start > config.max_context || iv.post_end - iv.end > config.max_context {
            return Err(format!("context of {iv:?} exceeds {}", config.max_context));
        }
        if !(iv.pre_start <= iv.start && iv.start <= iv.end && iv.end <= iv.post_end && iv.post_end < n) {
            return Err(format!("malformed interval {iv:?}"));
        }
    }
    for w in out.intervals.windows(2) {
        if w[0].post_end >= w[1].pre_start {
            return Err(format!("intervals {:?} and {:?} overlap", w[0], w[1]));
        }
    }
    // Every tagged frame lies in the matching segment of some interval.
    for k in &out.keyframes.frames {
        let inside = |f: &dyn Fn(&vader_core::caes::EventInterval) -> bool| out.intervals.iter().any(f);
        let ok = match k.tag {
            SegmentTag::Pre => inside(&|iv| (iv.pre_start..iv.start).contains(&k.index)),
            SegmentTag::On => inside(&|iv| (iv.start..=iv.end).contains(&k.index)),
            SegmentTag::Post => inside(&|iv| (iv.end + 1..=iv.post_end).contains(&k.index)),
            SegmentTag::Background => true,
        };
        if !ok {
            return Err(format!("frame {} tagged {:?} outside its segment", k.index, k.tag));
        }
    }
    Ok(())
}

/// 300 frames, flat at 1/8 except a symmetric tent peaking at frame 150
/// that rises and falls by 1/64 per frame over 48 frames on each side. All
/// values are dyadic, so every trailing slope is exact.
///
/// The nine frames 146..=154 are the only ones at or above the 97th
/// percentile. Ramp slopes are exactly 1/64, which is both the rise and
/// the calm threshold, so both contexts run along the ramps until the
/// 30-frame cap stops them.
pub fn single_bump_curve() -> Vec<f64> {
    let mut v = vec![0.125; 300];
    for k in 0..48usize {
        let value = 0.125 + (48 - k) as f64 / 64.0;
        v[150 - k] = value;
        v[150 + k] = value;
    }
    v
}

// ------------------------------------------------------------------- encoder

/// Result of checking one random encoder instance against central
/// differences.
pub enum GradCheck {
    /// Largest relative error over every parameter.
    Checked(f64),
    /// Instance sits on a non-differentiable point and was skipped.
    Skipped,
}

pub const FD_STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

fn fd_loss(params: &EncoderParams, a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    let ta = encode(params, a).unwrap().vec;
    let tp = encode(params, p).unwrap().vec;
    let tn = encode(params, n).unwrap().vec;
    triplet_loss(&ta, &tp, &tn, margin)
}

fn pre_activations(params: &EncoderParams, x: &[f64]) -> Vec<f64> {
    (0..params.hidden)
        .map(|h| {
            params.b1[h]
                + (0..params.input_dim)
                    .map(|c| params.w1[h * params.input_dim + c] * x[c])
                    .sum::<f64>()
        })
        .collect()
}

fn hinge_margin(params: &EncoderParams, a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    let ta = encode(params, a).unwrap().vec;
    let tp = encode(params, p).unwrap().vec;
    let tn = encode(params, n).unwrap().vec;
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    d(&ta, &tp) - d(&ta, &tn) + margin
}

/// Random small encoder plus triplet; compares every analytic gradient with
/// a central difference of step `FD_STEP`.
pub fn gradient_check_instance<R: Rng>(rng: &mut R) -> GradCheck {
    let input_dim = rng.random_range(2..=6);
    let hidden = rng.random_range(2..=6);
    let token_dim = rng.random_range(2..=4);
    let mut params = EncoderParams::init(input_dim, hidden, token_dim, rng);
    for b in params.b1.iter_mut().chain(params.b2.iter_mut()) {
        *b = rng.random_range(-0.5..0.5);
    }
    let vec = |rng: &mut R| -> Vec<f64> { (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let (a, p, n) = (vec(rng), vec(rng), vec(rng));
    let margin = rng.random_range(0.2..2.0);

    // Skip kinks: the hinge itself, and any ReLU input that a parameter
    // perturbation of FD_STEP could push across zero.
    if hinge_margin(&params, &a, &p, &n, margin).abs() < 1e-6 {
        return GradCheck::Skipped;
    }
    for x in [&a, &p, &n] {
        let reach = FD_STEP * (1.0 + x.iter().map(|v| v.abs()).sum::<f64>());
        if pre_activations(&params, x).iter().any(|z| z.abs() <= reach) {
            return GradCheck::Skipped;
        }
    }

    let (_, grads) = loss_gradients(&params, &a, &p, &n, margin).unwrap();
    let analytic = grads.flatten();
    let mut worst: f64 = 0.0;
    for k in 0..params.num_params() {
        let orig = *params.param_mut(k);
        *params.param_mut(k) = orig + FD_STEP;
        let up = fd_loss(&params, &a, &p, &n, margin);
        *params.param_mut(k) = orig - FD_STEP;
        let down = fd_loss(&params, &a, &p, &n, margin);
        *params.param_mut(k) = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[k], numeric));
    }
    GradCheck::Checked(worst)
}

// ------------------------------------------------------------------- bundles

/// A random but valid scenario for ingest round trips.
pub fn random_scenario<R: Rng>(rng: &mut R, index: usize) -> ScenarioSpec {
    let num_frames = rng.random_range(1..=60);
    let num_classes = if rng.random_bool(0.5) { 1 } else { rng.random_range(2..=4) };
    let anomaly_events = (0..rng.random_range(0..=2))
        .map(|_| AnomalyEvent {
            center: rng.random_range(0..num_frames),
            width: rng.random_range(1.0..6.0),
            peak: rng.random_range(0.1..=1.0),
        })
        .collect();
    ScenarioSpec {
        video_id: format!("rt_{index:03}"),
        num_frames,
        num_objects: rng.random_range(0..=4),
        d_app: rng.random_range(1..=6),
        d_rel: rng.random_range(1..=8),
        num_classes,
        d_feat: rng.random_range(1..=6),
        anomaly_class: 0,
        baseline: rng.random_range(0.0..0.3),
        anomaly_events,
        noise_std: rng.random_range(0.0..0.2),
        is_normal: rng.random_bool(0.5),
        fps: rng.random_range(5.0..60.0),
        seed: rng.random(),
        ..ScenarioSpec::default()
    }
}

/// Every regular file under `dir`, keyed by its path relative to `dir`.
pub fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
