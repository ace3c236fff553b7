//! The on-disk feature bundle: per-video manifest, score table, per-frame
//! detections and relation features, plus optional class directions and
//! global frame features.
//!
//! Reals are written in shortest round-trip decimal form, so
//! `load_bundle(write_bundle(b))` reproduces every value bit-for-bit.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VaderError};
use crate::scoring::ScoreSeries;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const FRAMES_FILE: &str = "frames.jsonl";
pub const CLASS_DIRS_FILE: &str = "class_dirs.json";
pub const FRAME_FEATS_FILE: &str = "frame_feats.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub video_id: String,
    pub num_frames: usize,
    pub is_normal: bool,
    pub d_app: usize,
    pub d_rel: usize,
    pub num_classes: usize,
    pub fps: f64,
}

impl BundleManifest {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_frames", self.num_frames),
            ("d_app", self.d_app),
            ("d_rel", self.d_rel),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(VaderError::ValueOutOfRange(format!(
                    "manifest: {name} must be at least 1"
                )));
            }
        }
        if !(self.fps > 0.0) || !self.fps.is_finite() {
            return Err(VaderError::ValueOutOfRange(format!(
                "manifest: fps = {} must be positive",
                self.fps
            )));
        }
        Ok(())
    }
}

/// Axis-aligned box `(x1, y1, x2, y2)` in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self([x1, y1, x2, y2])
    }

    pub fn x1(&self) -> f64 {
        self.0[0]
    }
    pub fn y1(&self) -> f64 {
        self.0[1]
    }
    pub fn x2(&self) -> f64 {
        self.0[2]
    }
    pub fn y2(&self) -> f64 {
        self.0[3]
    }

    pub fn area(&self) -> f64 {
        (self.x2() - self.x1()) * (self.y2() - self.y1())
    }

    /// Non-degenerate: `x1 < x2`, `y1 < y2`, all finite.
    pub fn is_proper(&self) -> bool {
        self.0.iter().all(|v| v.is_finite()) && self.x1() < self.x2() && self.y1() < self.y2()
    }

    /// Proper and inside the unit square.
    pub fn is_normalized(&self) -> bool {
        self.is_proper() && self.0.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub bbox: BBox,
    pub appearance: Vec<f64>,
    pub label: Option<String>,
}

/// Directed relation feature between two detections of the same frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationFeature {
    #[serde(rename = "i")]
    pub subject_index: usize,
    #[serde(rename = "j")]
    pub object_index: usize,
    pub feat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub t: usize,
    pub detections: Vec<Detection>,
    pub relations: Vec<RelationFeature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDirsFile {
    pub classes: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

/// Where per-frame scores for a bundle come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreSource {
    /// `scores.csv` carries fused scores and class indices.
    Fused,
    /// `scores.csv` carries only `p_anomaly`; fusion with class directions is
    /// possible when `frame_feats.csv` and `class_dirs.json` are present.
    ProbabilitiesOnly,
    /// No score table; scoring needs an external anomaly probability.
    Missing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub manifest: BundleManifest,
    pub scores: Option<ScoreSeries>,
    pub frames: Vec<FrameRecord>,
    pub class_dirs: Option<ClassDirsFile>,
    pub frame_feats: Option<Vec<Vec<f64>>>,
}

impl Bundle {
    pub fn score_source(&self) -> ScoreSource {
        match &self.scores {
            None => ScoreSource::Missing,
            Some(s) if s.is_identity_fusion() => ScoreSource::ProbabilitiesOnly,
            Some(_) => ScoreSource::Fused,
        }
    }

    /// True when the bundle carries what the scoring module needs to fuse
    /// class evidence into the scores.
    pub fn has_class_evidence(&self) -> bool {
        self.class_dirs.is_some() && self.frame_feats.is_some()
    }

    pub fn scores(&self) -> Result<&ScoreSeries> {
        self.scores
            .as_ref()
            .ok_or_else(|| VaderError::MissingComponent(PathBuf::from(SCORES_FILE)))
    }

    pub fn video_id(&self) -> &str {
        &self.manifest.video_id
    }

    /// Checks every cross-file invariant.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        m.validate()?;
        if self.frames.len() != m.num_frames {
            return Err(VaderError::SchemaViolation(format!(
                "{FRAMES_FILE}: {} frame records but manifest says {}",
                self.frames.len(),
                m.num_frames
            )));
        }
        for (idx, frame) in self.frames.iter().enumerate() {
            validate_frame(frame, idx, m)?;
        }
        if let Some(scores) = &self.scores {
            if scores.len() != m.num_frames {
                return Err(VaderError::SchemaViolation(format!(
                    "{SCORES_FILE}: {} rows but manifest says {} frames",
                    scores.len(),
                    m.num_frames
                )));
            }
            // Re-run the series invariants in case the value was built by hand.
            ScoreSeries::new(
                scores.p_anomaly.clone(),
                scores.fused.clone(),
                scores.argmax_class.clone(),
            )?;
            if let Some((t, c)) = scores
                .argmax_class
                .iter()
                .enumerate()
                .find(|(_, &c)| c >= m.num_classes)
            {
                return Err(VaderError::ValueOutOfRange(format!(
                    "{SCORES_FILE}: frame {t}: argmax_class {c} >= num_classes {}",
                    m.num_classes
                )));
            }
        }
        let mut feat_dim = None;
        if let Some(cd) = &self.class_dirs {
            if cd.classes.len() != m.num_classes || cd.embeddings.len() != m.num_classes {
                return Err(VaderError::SchemaViolation(format!(
                    "{CLASS_DIRS_FILE}: {} classes and {} embeddings but num_classes is {}",
                    cd.classes.len(),
                    cd.embeddings.len(),
                    m.num_classes
                )));
            }
            let dim = cd.embeddings[0].len();
            if dim == 0 {
                return Err(VaderError::SchemaViolation(format!(
                    "{CLASS_DIRS_FILE}: embeddings are empty"
                )));
            }
            for (c, e) in cd.embeddings.iter().enumerate() {
                if e.len() != dim {
                    return Err(VaderError::SchemaViolation(format!(
                        "{CLASS_DIRS_FILE}: embedding {c} has dimension {}, expected {dim}",
                        e.len()
                    )));
                }
                check_finite(e, &format!("{CLASS_DIRS_FILE}: embedding {c}"))?;
            }
            feat_dim = Some(dim);
        }
        if let Some(ff) = &self.frame_feats {
            if ff.len() != m.num_frames {
                return Err(VaderError::SchemaViolation(format!(
                    "{FRAME_FEATS_FILE}: {} rows but manifest says {} frames",
                    ff.len(),
                    m.num_frames
                )));
            }
            let dim = feat_dim.unwrap_or(ff[0].len());
            if dim == 0 {
                return Err(VaderError::SchemaViolation(format!(
                    "{FRAME_FEATS_FILE}: feature rows are empty"
                )));
            }
            for (t, row) in ff.iter().enumerate() {
                if row.len() != dim {
                    return Err(VaderError::SchemaViolation(format!(
                        "{FRAME_FEATS_FILE}: frame {t} has dimension {}, expected {dim}",
                        row.len()
                    )));
                }
                check_finite(row, &format!("{FRAME_FEATS_FILE}: frame {t}"))?;
            }
        }
        Ok(())
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(k) => Err(VaderError::ValueOutOfRange(format!(
            "{what}: component {k} is not finite"
        ))),
        None => Ok(()),
    }
}

fn validate_frame(frame: &FrameRecord, idx: usize, m: &BundleManifest) -> Result<()> {
    if frame.t != idx {
        return Err(VaderError::SchemaViolation(format!(
            "{FRAMES_FILE}: record {idx} has t = {}, expected {idx}",
            frame.t
        )));
    }
    let t = frame.t;
    for (d, det) in frame.detections.iter().enumerate() {
        if !det.bbox.is_normalized() {
            return Err(VaderError::ValueOutOfRange(format!(
                "frame {t}: detection {d}: bbox {:?} is not a proper box inside [0,1]",
                det.bbox.0
            )));
        }
        if det.appearance.len() != m.d_app {
            return Err(VaderError::SchemaViolation(format!(
                "frame {t}: detection {d}: appearance has length {}, d_app is {}",
                det.appearance.len(),
                m.d_app
            )));
        }
        check_finite(&det.appearance, &format!("frame {t}: detection {d}: appearance"))?;
    }
    let n = frame.detections.len();
    let mut seen = HashSet::with_capacity(frame.relations.len());
    for (r, rel) in frame.relations.iter().enumerate() {
        let (i, j) = (rel.subject_index, rel.object_index);
        if i == j || i >= n || j >= n {
            return Err(VaderError::SchemaViolation(format!(
                "frame {t}: relation {r}: pair ({i}, {j}) is invalid for {n} detections"
            )));
        }
        if !seen.insert((i, j)) {
            return Err(VaderError::SchemaViolation(format!(
                "frame {t}: relation {r}: duplicate ordered pair ({i}, {j})"
            )));
        }
        if rel.feat.len() != m.d_rel {
            return Err(VaderError::SchemaViolation(format!(
                "frame {t}: relation {r}: feat has length {}, d_rel is {}",
                rel.feat.len(),
                m.d_rel
            )));
        }
        check_finite(&rel.feat, &format!("frame {t}: relation {r}: feat"))?;
    }
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            VaderError::MissingComponent(path.to_path_buf())
        } else {
            VaderError::io(path, e)
        }
    })
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(VaderError::io(path, e)),
    }
}

fn parse_real(field: &str, path: &Path, line: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| VaderError::parse(path, format!("line {line}: `{field}` is not a real number")))
}

fn parse_index(field: &str, path: &Path, line: usize) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| VaderError::parse(path, format!("line {line}: `{field}` is not an index")))
}

fn parse_scores(text: &str, path: &Path) -> Result<ScoreSeries> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| VaderError::parse(path, "empty file"))?;
    let full = match header.trim() {
        "t,p_anomaly" => false,
        "t,p_anomaly,fused,argmax_class" => true,
        other => {
            return Err(VaderError::SchemaViolation(format!(
                "{SCORES_FILE}: unexpected header `{other}`"
            )))
        }
    };
    let width = if full { 4 } else { 2 };
    let (mut p, mut fused, mut argmax) = (Vec::new(), Vec::new(), Vec::new());
    for (row, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let lineno = row + 2;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != width {
            return Err(VaderError::SchemaViolation(format!(
                "{SCORES_FILE}: line {lineno} has {} columns, expected {width}",
                cols.len()
            )));
        }
        let t = parse_index(cols[0], path, lineno)?;
        if t != row {
            return Err(VaderError::SchemaViolation(format!(
                "{SCORES_FILE}: line {lineno} has t = {t}, expected {row}"
            )));
        }
        let pa = parse_real(cols[1], path, lineno)?;
        if !(0.0..=1.0).contains(&pa) {
            return Err(VaderError::ValueOutOfRange(format!(
                "{SCORES_FILE}: frame {t}: p_anomaly = {pa} is outside [0, 1]"
            )));
        }
        p.push(pa);
        if full {
            let s = parse_real(cols[2], path, lineno)?;
            if !(0.0..=1.0).contains(&s) {
                return Err(VaderError::ValueOutOfRange(format!(
                    "{SCORES_FILE}: frame {t}: fused = {s} is outside [0, 1]"
                )));
            }
            fused.push(s);
            argmax.push(parse_index(cols[3], path, lineno)?);
        }
    }
    if full {
        ScoreSeries::new(p, fused, argmax)
    } else {
        ScoreSeries::from_probabilities(p)
    }
}

fn parse_frame_feats(text: &str, path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| VaderError::parse(path, "empty file"))?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    let dim = cols.len().saturating_sub(1);
    let expected: Vec<String> = std::iter::once("t".to_string())
        .chain((0..dim).map(|k| format!("f{k}")))
        .collect();
    if dim == 0 || cols != expected {
        return Err(VaderError::SchemaViolation(format!(
            "{FRAME_FEATS_FILE}: header must be `t,f0,...`, got `{}`",
            header.trim()
        )));
    }
    let mut rows = Vec::new();
    for (row, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let lineno = row + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(VaderError::SchemaViolation(format!(
                "{FRAME_FEATS_FILE}: line {lineno} has {} features, expected {dim}",
                fields.len() - 1
            )));
        }
        let t = parse_index(fields[0], path, lineno)?;
        if t != row {
            return Err(VaderError::SchemaViolation(format!(
                "{FRAME_FEATS_FILE}: line {lineno} has t = {t}, expected {row}"
            )));
        }
        rows.push(
            fields[1..]
                .iter()
                .map(|f| parse_real(f, path, lineno))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(rows)
}

/// Reads and fully validates a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Bundle> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(VaderError::MissingComponent(dir.to_path_buf()));
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: BundleManifest = serde_json::from_str(&read_to_string(&manifest_path)?)
        .map_err(|e| VaderError::parse(&manifest_path, e.to_string()))?;
    manifest.validate()?;

    let frames_path = dir.join(FRAMES_FILE);
    let frames_text = read_to_string(&frames_path)?;
    let mut frames = Vec::with_capacity(manifest.num_frames);
    for (k, line) in frames_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(line)
            .map_err(|e| VaderError::parse(&frames_path, format!("line {}: {e}", k + 1)))?;
        frames.push(rec);
    }

    let scores_path = dir.join(SCORES_FILE);
    let scores = read_optional(&scores_path)?
        .map(|text| parse_scores(&text, &scores_path))
        .transpose()?;

    let cd_path = dir.join(CLASS_DIRS_FILE);
    let class_dirs = read_optional(&cd_path)?
        .map(|text| {
            serde_json::from_str::<ClassDirsFile>(&text)
                .map_err(|e| VaderError::parse(&cd_path, e.to_string()))
        })
        .transpose()?;

    let ff_path = dir.join(FRAME_FEATS_FILE);
    let frame_feats = read_optional(&ff_path)?
        .map(|text| parse_frame_feats(&text, &ff_path))
        .transpose()?;

    if scores.is_none() && frame_feats.is_none() {
        return Err(VaderError::MissingComponent(scores_path));
    }

    let bundle = Bundle {
        manifest,
        scores,
        frames,
        class_dirs,
        frame_feats,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| VaderError::io(path, e))
}

pub(crate) fn to_json_line<T: Serialize>(value: &T) -> String {
    // Serializing plain data structs with finite floats cannot fail.
    serde_json::to_string(value).expect("serializable value")
}

pub(crate) fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn render_scores_csv(scores: &ScoreSeries) -> String {
    let mut out = String::new();
    if scores.is_identity_fusion() {
        out.push_str("t,p_anomaly\n");
        for (t, p) in scores.p_anomaly.iter().enumerate() {
            let _ = writeln!(out, "{t},{p}");
        }
    } else {
        out.push_str("t,p_anomaly,fused,argmax_class\n");
        for (t, ((p, s), c)) in scores
            .p_anomaly
            .iter()
            .zip(&scores.fused)
            .zip(&scores.argmax_class)
            .enumerate()
        {
            let _ = writeln!(out, "{t},{p},{s},{c}");
        }
    }
    out
}

pub fn render_frames_jsonl(frames: &[FrameRecord]) -> String {
    let mut out = String::new();
    for f in frames {
        out.push_str(&to_json_line(f));
        out.push('\n');
    }
    out
}

fn render_frame_feats_csv(rows: &[Vec<f64>]) -> String {
    let dim = rows.first().map_or(0, Vec::len);
    let mut out = String::from("t");
    for k in 0..dim {
        let _ = write!(out, ",f{k}");
    }
    out.push('\n');
    for (t, row) in rows.iter().enumerate() {
        let _ = write!(out, "{t}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Validates and writes a bundle, creating the directory if needed.
pub fn write_bundle(bundle: &Bundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| VaderError::io(dir, e))?;
    write_file(&dir.join(MANIFEST_FILE), &to_json_pretty(&bundle.manifest))?;
    write_file(&dir.join(FRAMES_FILE), &render_frames_jsonl(&bundle.frames))?;
    if let Some(scores) = &bundle.scores {
        write_file(&dir.join(SCORES_FILE), &render_scores_csv(scores))?;
    }
    if let Some(cd) = &bundle.class_dirs {
        write_file(&dir.join(CLASS_DIRS_FILE), &to_json_pretty(cd))?;
    }
    if let Some(ff) = &bundle.frame_feats {
        write_file(&dir.join(FRAME_FEATS_FILE), &render_frame_feats_csv(ff))?;
    }
    Ok(())
}
