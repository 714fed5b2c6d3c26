//! Loading pose records, object assets and affordance maps.
//!
//! Pose record files are JSON with explicit joint labels:
//!
//! ```json
//! {
//!   "object_class": "mug",
//!   "frames": [
//!     { "source_id": "vid03_f0117", "confidence": 0.93,
//!       "keypoints": { "wrist": [0.0, 0.0, 0.0], "thumb_knuckle": [0.04, -0.01, 0.03], ... } }
//!   ]
//! }
//! ```
//!
//! Frames whose keypoints fail validation or whose confidence is below the
//! threshold are dropped and reported, not fatal. Object assets are described
//! by a small TOML file pointing at an OBJ mesh and an affordance source
//! (a point list, or a mask + depth image pair with intrinsics).

use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotvec_to_matrix, Pose, TriMesh};
use crate::handmodel::{HumanHandKeypoints, Vec3};

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MASS_KG: f64 = 1.0;
pub const AFFORDANCE_POINTS: usize = 20;
pub const SURFACE_SAMPLES: usize = 512;
/// Affordance points must lie this close to the mesh surface.
pub const AFFORDANCE_TOLERANCE_M: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {msg}")]
    ParseError { path: String, msg: String },
    #[error("{0}: no frames")]
    EmptyFile(String),
    #[error("{0}: every frame was dropped")]
    NoValidFrames(String),
    #[error("bad mesh: {0}")]
    BadMesh(String),
    #[error("missing or invalid affordance: {0}")]
    MissingAffordance(String),
    #[error("no masked pixel has valid depth")]
    NoValidPixels,
    #[error("mask is {mask:?} but depth is {depth:?}")]
    ShapeMismatch {
        mask: (usize, usize),
        depth: (usize, usize),
    },
    #[error("invalid asset: {0}")]
    InvalidAsset(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Image { path: String, msg: String },
}

fn read(path: &Path) -> Result<String, IngestError> {
    std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Labeled points kept in file order, duplicates included, so validation can
/// report them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledPoints(pub Vec<(String, [f64; 3])>);

impl Serialize for LabeledPoints {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for LabeledPoints {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> serde::de::Visitor<'de> for V {
            type Value = LabeledPoints;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a map of joint label to [x, y, z]")
            }
            fn visit_map<A: serde::de::MapAccess<'de>>(
                self,
                mut a: A,
            ) -> Result<LabeledPoints, A::Error> {
                let mut out = Vec::new();
                while let Some(e) = a.next_entry::<String, [f64; 3]>()? {
                    out.push(e);
                }
                Ok(LabeledPoints(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawFrame {
    pub source_id: String,
    pub confidence: f64,
    pub keypoints: LabeledPoints,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawPoseRecordFile {
    pub object_class: String,
    pub frames: Vec<RawFrame>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub source_id: String,
    pub keypoints: HumanHandKeypoints,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedFrame {
    pub source_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecordFile {
    pub object_class: String,
    pub frames: Vec<PoseRecord>,
    pub dropped: Vec<DroppedFrame>,
}

pub fn load_pose_records(path: &Path) -> Result<PoseRecordFile, IngestError> {
    load_pose_records_with(path, DEFAULT_CONFIDENCE_THRESHOLD)
}

pub fn load_pose_records_with(
    path: &Path,
    min_confidence: f64,
) -> Result<PoseRecordFile, IngestError> {
    let text = read(path)?;
    parse_pose_records(&text, min_confidence, &path.display().to_string())
}

pub fn parse_pose_records(
    text: &str,
    min_confidence: f64,
    origin: &str,
) -> Result<PoseRecordFile, IngestError> {
    if text.trim().is_empty() {
        return Err(IngestError::EmptyFile(origin.to_string()));
    }
    let raw: RawPoseRecordFile =
        serde_json::from_str(text).map_err(|e| IngestError::ParseError {
            path: origin.to_string(),
            msg: e.to_string(),
        })?;
    if raw.frames.is_empty() {
        return Err(IngestError::EmptyFile(origin.to_string()));
    }
    let mut frames = Vec::new();
    let mut dropped = Vec::new();
    for f in raw.frames {
        let reason = if !(0.0..=1.0).contains(&f.confidence) {
            Some(format!("confidence {} outside [0, 1]", f.confidence))
        } else if f.confidence < min_confidence {
            Some(format!(
                "confidence {} below {min_confidence}",
                f.confidence
            ))
        } else {
            match HumanHandKeypoints::validate(&f.keypoints.0) {
                Ok(k) => {
                    frames.push(PoseRecord {
                        source_id: f.source_id.clone(),
                        keypoints: k,
                        confidence: f.confidence,
                    });
                    None
                }
                Err(e) => Some(e.to_string()),
            }
        };
        if let Some(reason) = reason {
            warn!("{origin}: dropping frame {}: {reason}", f.source_id);
            dropped.push(DroppedFrame {
                source_id: f.source_id,
                reason,
            });
        }
    }
    if frames.is_empty() {
        return Err(IngestError::NoValidFrames(origin.to_string()));
    }
    Ok(PoseRecordFile {
        object_class: raw.object_class,
        frames,
        dropped,
    })
}

pub fn write_pose_records(records: &RawPoseRecordFile, path: &Path) -> crate::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(records)?)?;
    Ok(())
}

/// Parses the v/f subset of Wavefront OBJ. Faces must be triangles.
pub fn parse_obj(text: &str) -> Result<TriMesh, IngestError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| IngestError::BadMesh(format!("line {}: {e}", ln + 1)))?;
                if c.len() != 3 || c.iter().any(|v| !v.is_finite()) {
                    return Err(IngestError::BadMesh(format!(
                        "line {}: vertex needs 3 finite coordinates",
                        ln + 1
                    )));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<&str> = it.collect();
                if idx.len() != 3 {
                    return Err(IngestError::BadMesh(format!(
                        "line {}: face has {} vertices, only triangles are supported",
                        ln + 1,
                        idx.len()
                    )));
                }
                let mut face = [0usize; 3];
                for (k, tok) in idx.iter().enumerate() {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first.parse().map_err(|_| {
                        IngestError::BadMesh(format!("line {}: bad index {tok:?}", ln + 1))
                    })?;
                    let resolved = if i > 0 {
                        i - 1
                    } else {
                        vertices.len() as i64 + i
                    };
                    if resolved < 0 || resolved >= vertices.len() as i64 {
                        return Err(IngestError::BadMesh(format!(
                            "line {}: index {i} out of range",
                            ln + 1
                        )));
                    }
                    face[k] = resolved as usize;
                }
                faces.push(face);
            }
            _ => {}
        }
    }
    if faces.is_empty() {
        return Err(IngestError::BadMesh("no faces".into()));
    }
    Ok(TriMesh::new(vertices, faces))
}

pub fn write_obj(mesh: &TriMesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for f in &mesh.faces {
        s.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), IngestError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(IngestError::InvalidAsset(format!(
                "bad intrinsics {self:?}"
            )))
        }
    }

    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        )
    }

    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Row-major single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Image2D<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> T {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }
}

/// Pinhole back-projection of masked pixels with depth > 0, uniformly
/// subsampled to `sample_count`. When fewer valid pixels exist than requested,
/// samples are drawn with replacement.
pub fn backproject_affordance(
    mask: &Image2D<bool>,
    depth: &Image2D<f64>,
    intr: &CameraIntrinsics,
    sample_count: usize,
    seed: u64,
) -> Result<Vec<Vec3>, IngestError> {
    if (mask.width, mask.height) != (depth.width, depth.height) {
        return Err(IngestError::ShapeMismatch {
            mask: (mask.width, mask.height),
            depth: (depth.width, depth.height),
        });
    }
    let mut points = Vec::new();
    for v in 0..mask.height {
        for u in 0..mask.width {
            let d = depth.get(u, v);
            if mask.get(u, v) && d > 0.0 && d.is_finite() {
                points.push(intr.backproject(u as f64, v as f64, d));
            }
        }
    }
    if points.is_empty() {
        return Err(IngestError::NoValidPixels);
    }
    Ok(subsample(&points, sample_count.max(1), seed))
}

/// Uniform subsample without replacement (order preserved), or with
/// replacement when the pool is too small.
pub fn subsample(points: &[Vec3], count: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if points.len() >= count {
        let mut idx = sample_indices(&mut rng, points.len(), count).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| points[i]).collect()
    } else {
        (0..count)
            .map(|_| points[rng.random_range(0..points.len())])
            .collect()
    }
}

/// Area-weighted uniform surface samples.
pub fn sample_surface(mesh: &TriMesh, count: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let areas: Vec<f64> = (0..mesh.faces.len()).map(|f| mesh.face_area(f)).collect();
    let total: f64 = areas.iter().sum();
    let mut cdf = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a / total;
        cdf.push(acc);
    }
    (0..count)
        .map(|_| {
            let r: f64 = rng.random();
            let f = cdf.partition_point(|c| *c < r).min(areas.len() - 1);
            let [a, b, c] = mesh.triangle(f);
            let (mut s, mut t): (f64, f64) = (rng.random(), rng.random());
            if s + t > 1.0 {
                s = 1.0 - s;
                t = 1.0 - t;
            }
            a + (b - a) * s + (c - a) * t
        })
        .collect()
}

pub fn load_mask_png(path: &Path) -> Result<Image2D<bool>, IngestError> {
    let img = image::open(path)
        .map_err(|e| IngestError::Image {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?
        .into_luma8();
    Ok(Image2D {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.pixels().map(|p| p.0[0] > 127).collect(),
    })
}

/// 16-bit depth PNG; raw values times `scale` give meters.
pub fn load_depth_png(path: &Path, scale: f64) -> Result<Image2D<f64>, IngestError> {
    let img = image::open(path)
        .map_err(|e| IngestError::Image {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?
        .into_luma16();
    Ok(Image2D {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.pixels().map(|p| p.0[0] as f64 * scale).collect(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RigidSpec {
    #[serde(default)]
    pub rotation: [f64; 3],
    #[serde(default)]
    pub translation: [f64; 3],
}

impl RigidSpec {
    pub fn pose(&self) -> Pose {
        Pose::new(
            rotvec_to_matrix(self.rotation),
            Vec3::from(self.translation),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffordanceSpec {
    /// Inline points in the mesh frame.
    #[serde(default)]
    pub points: Option<Vec<[f64; 3]>>,
    /// JSON file holding a list of [x, y, z] in the mesh frame.
    #[serde(default)]
    pub points_file: Option<PathBuf>,
    #[serde(default)]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub depth: Option<PathBuf>,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
    #[serde(default)]
    pub intrinsics: Option<CameraIntrinsics>,
    /// Camera-to-mesh transform for back-projected points.
    #[serde(default)]
    pub camera_pose: RigidSpec,
}

fn default_depth_scale() -> f64 {
    0.001
}

fn default_mass() -> f64 {
    DEFAULT_MASS_KG
}

fn default_scale() -> f64 {
    1.0
}

/// The TOML asset descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetDescriptor {
    pub object_class: String,
    pub mesh: PathBuf,
    #[serde(default = "default_mass")]
    pub mass: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default)]
    pub upright: RigidSpec,
    pub affordance: Option<AffordanceSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAsset {
    pub object_class: String,
    /// Mesh after scale and upright transform, meters.
    pub mesh: TriMesh,
    pub surface_points: Vec<Vec3>,
    pub affordance: Vec<Vec3>,
    pub mass: f64,
    pub scale: f64,
    pub upright: Pose,
    /// Set when the mesh is not closed two-manifold.
    pub flagged: bool,
}

impl ObjectAsset {
    /// Builds and validates an asset from a mesh already in meters and the
    /// canonical upright frame.
    pub fn new(
        object_class: impl Into<String>,
        mesh: TriMesh,
        affordance: Vec<Vec3>,
        mass: f64,
        seed: u64,
    ) -> Result<Self, IngestError> {
        let asset = Self {
            object_class: object_class.into(),
            surface_points: sample_surface(&mesh, SURFACE_SAMPLES, seed),
            flagged: !mesh.is_watertight(),
            mesh,
            affordance,
            mass,
            scale: 1.0,
            upright: Pose::identity(),
        };
        asset.validate()?;
        Ok(asset)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(IngestError::InvalidAsset(format!(
                "mass {} must be positive",
                self.mass
            )));
        }
        if self.affordance.is_empty() {
            return Err(IngestError::MissingAffordance(
                "no affordance points".into(),
            ));
        }
        for (i, p) in self.affordance.iter().enumerate() {
            let d = self
                .mesh
                .closest_point(p)
                .map(|h| h.distance)
                .unwrap_or(f64::INFINITY);
            if d > AFFORDANCE_TOLERANCE_M {
                return Err(IngestError::MissingAffordance(format!(
                    "point {i} is {:.4} m from the surface (tolerance {AFFORDANCE_TOLERANCE_M} m)",
                    d
                )));
            }
        }
        Ok(())
    }

    /// Copy with a different mass and a uniform scale about the base center.
    pub fn with_mass_and_scale(&self, mass: f64, scale: f64) -> Self {
        let mut out = self.clone();
        out.mass = mass;
        if scale != 1.0 {
            let c = self.mesh.centroid();
            let base = Vec3::new(c.x, c.y, self.mesh.min_z());
            let f = |p: &Vec3| base + (p - base) * scale;
            out.mesh = TriMesh::new(
                self.mesh.vertices.iter().map(f).collect(),
                self.mesh.faces.clone(),
            );
            out.surface_points = self.surface_points.iter().map(f).collect();
            out.affordance = self.affordance.iter().map(f).collect();
            out.scale = self.scale * scale;
        }
        out
    }

    pub fn center_of_mass(&self) -> Vec3 {
        if self.flagged {
            self.mesh.centroid()
        } else {
            self.mesh.volume_centroid()
        }
    }
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub seed: u64,
    pub affordance_points: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            affordance_points: AFFORDANCE_POINTS,
        }
    }
}

pub fn load_object_asset(path: &Path) -> Result<ObjectAsset, IngestError> {
    load_object_asset_with(path, &IngestOptions::default())
}

pub fn load_object_asset_with(
    path: &Path,
    opts: &IngestOptions,
) -> Result<ObjectAsset, IngestError> {
    let origin = path.display().to_string();
    let desc: AssetDescriptor =
        toml::from_str(&read(path)?).map_err(|e| IngestError::ParseError {
            path: origin.clone(),
            msg: e.to_string(),
        })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let raw_mesh = parse_obj(&read(&base.join(&desc.mesh))?)?;
    if !(desc.scale > 0.0 && desc.scale.is_finite()) {
        return Err(IngestError::InvalidAsset(format!(
            "scale {} must be positive",
            desc.scale
        )));
    }
    let upright = desc.upright.pose();
    let to_canonical = |p: &Vec3| upright.apply(&(p * desc.scale));
    let mesh = TriMesh::new(
        raw_mesh.vertices.iter().map(to_canonical).collect(),
        raw_mesh.faces.clone(),
    );
    let aff_spec = desc.affordance.as_ref().ok_or_else(|| {
        IngestError::MissingAffordance("descriptor has no [affordance] table".into())
    })?;
    let raw_aff = load_affordance(aff_spec, base, opts)?;
    let mut affordance: Vec<Vec3> = raw_aff.iter().map(to_canonical).collect();
    if affordance.len() > opts.affordance_points {
        affordance = subsample(&affordance, opts.affordance_points, opts.seed);
    }
    let flagged = !mesh.is_watertight();
    if flagged {
        warn!("{origin}: mesh is not watertight; flagged");
    }
    let asset = ObjectAsset {
        object_class: desc.object_class,
        surface_points: sample_surface(&mesh, SURFACE_SAMPLES, opts.seed),
        mesh,
        affordance,
        mass: desc.mass,
        scale: desc.scale,
        upright,
        flagged,
    };
    asset.validate()?;
    Ok(asset)
}

fn load_affordance(
    spec: &AffordanceSpec,
    base: &Path,
    opts: &IngestOptions,
) -> Result<Vec<Vec3>, IngestError> {
    if let Some(points) = &spec.points {
        return Ok(points.iter().map(|p| Vec3::from(*p)).collect());
    }
    if let Some(file) = &spec.points_file {
        let path = base.join(file);
        let pts: Vec<[f64; 3]> =
            serde_json::from_str(&read(&path)?).map_err(|e| IngestError::ParseError {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?;
        return Ok(pts.into_iter().map(Vec3::from).collect());
    }
    match (&spec.mask, &spec.depth, &spec.intrinsics) {
        (Some(mask), Some(depth), Some(intr)) => {
            intr.validate()?;
            let mask = load_mask_png(&base.join(mask))?;
            let depth = load_depth_png(&base.join(depth), spec.depth_scale)?;
            let cam = spec.camera_pose.pose();
            let pts =
                backproject_affordance(&mask, &depth, intr, opts.affordance_points, opts.seed)?;
            Ok(pts.iter().map(|p| cam.apply(p)).collect())
        }
        _ => Err(IngestError::MissingAffordance(
            "affordance needs points, points_file, or mask + depth + intrinsics".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::box_mesh;
    use crate::toy::synth::{human_keypoints_from_angles, HumanPoseAngles};
    use proptest::prelude::*;

    fn frame_json(id: &str, conf: f64, drop_joint: Option<&str>) -> serde_json::Value {
        let k = human_keypoints_from_angles(&HumanPoseAngles::default(), &Default::default());
        let mut map = serde_json::Map::new();
        for (l, p) in k.labeled() {
            if Some(l.as_str()) != drop_joint {
                map.insert(l, serde_json::json!(p));
            }
        }
        serde_json::json!({ "source_id": id, "confidence": conf, "keypoints": map })
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn three_frames() {
        let dir = tempfile::tempdir().unwrap();
        let doc = serde_json::json!({
            "object_class": "mug",
            "frames": [frame_json("a", 0.9, None), frame_json("b", 0.8, None), frame_json("c", 0.7, None)]
        });
        let p = write(dir.path(), "r.json", &doc.to_string());
        let r = load_pose_records(&p).unwrap();
        assert_eq!(r.frames.len(), 3);
        assert!(r.dropped.is_empty());
        assert_eq!(r.object_class, "mug");
    }

    #[test]
    fn missing_joint_and_low_confidence_are_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let doc = serde_json::json!({
            "object_class": "mug",
            "frames": [
                frame_json("a", 0.9, None),
                frame_json("b", 0.9, Some("ring_tip")),
                frame_json("c", 0.9, None),
                frame_json("d", 0.2, None),
            ]
        });
        let p = write(dir.path(), "r.json", &doc.to_string());
        let r = load_pose_records(&p).unwrap();
        assert_eq!(r.frames.len(), 2);
        assert_eq!(r.dropped.len(), 2);
        assert_eq!(r.dropped[0].source_id, "b");
        assert!(r.dropped[0].reason.contains("ring_tip"));
    }

    #[test]
    fn duplicate_label_is_dropped() {
        let text = r#"{"object_class":"x","frames":[{"source_id":"a","confidence":1.0,
            "keypoints":{"wrist":[0,0,0],"wrist":[0,0,0]}}]}"#;
        let r = parse_pose_records(text, 0.5, "mem");
        assert!(matches!(r, Err(IngestError::NoValidFrames(_))));
    }

    #[test]
    fn empty_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "e.json",
            r#"{"object_class":"mug","frames":[]}"#,
        );
        assert!(matches!(
            load_pose_records(&p),
            Err(IngestError::EmptyFile(_))
        ));
        let p = write(dir.path(), "m.json", r#"{"object_class":"mug""#);
        assert!(matches!(
            load_pose_records(&p),
            Err(IngestError::ParseError { .. })
        ));
    }

    fn cube_dir(aff: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "cube.obj",
            &write_obj(&box_mesh([0.1, 0.1, 0.1])),
        );
        let p = write(
            dir.path(),
            "cube.toml",
            &format!("object_class = \"cube\"\nmesh = \"cube.obj\"\n{aff}"),
        );
        (dir, p)
    }

    fn face_points(x: f64) -> String {
        let pts: Vec<String> = (0..20)
            .map(|i| {
                format!(
                    "[{x}, {}, {}]",
                    -0.04 + 0.02 * (i % 5) as f64,
                    -0.04 + 0.02 * (i / 5) as f64
                )
            })
            .collect();
        format!("[affordance]\npoints = [{}]\n", pts.join(", "))
    }

    #[test]
    fn cube_asset_defaults() {
        let (_d, p) = cube_dir(&face_points(0.05));
        let a = load_object_asset(&p).unwrap();
        assert_eq!(a.mass, 1.0);
        assert_eq!(a.affordance.len(), 20);
        assert!(!a.flagged);
        assert_eq!(a.surface_points.len(), SURFACE_SAMPLES);
    }

    #[test]
    fn off_surface_affordance_rejected() {
        let (_d, p) = cube_dir(&face_points(0.10));
        assert!(matches!(
            load_object_asset(&p),
            Err(IngestError::MissingAffordance(_))
        ));
        let (_d, p) = cube_dir("");
        assert!(matches!(
            load_object_asset(&p),
            Err(IngestError::MissingAffordance(_))
        ));
    }

    #[test]
    fn open_mesh_is_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = box_mesh([0.1, 0.1, 0.1]);
        m.faces.pop();
        write(dir.path(), "o.obj", &write_obj(&m));
        let p = write(
            dir.path(),
            "o.toml",
            "object_class = \"o\"\nmesh = \"o.obj\"\n[affordance]\npoints = [[0.05, 0.0, 0.05]]\n",
        );
        assert!(load_object_asset(&p).unwrap().flagged);
    }

    #[test]
    fn obj_rejects_quads_and_bad_indices() {
        assert!(matches!(
            parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n"),
            Err(IngestError::BadMesh(_))
        ));
        assert!(matches!(
            parse_obj("v 0 0 0\nf 1 2 3\n"),
            Err(IngestError::BadMesh(_))
        ));
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3/1/1 -2/2/2 -1/3/3\n").unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 32.0,
            cy: 24.0,
            width: 64,
            height: 48,
        }
    }

    #[test]
    fn pinhole_examples() {
        let i = intr();
        let mut mask = Image2D::filled(64, 48, false);
        let mut depth = Image2D::filled(64, 48, 0.0);
        mask.set(32, 24, true);
        depth.set(32, 24, 1.0);
        let p = backproject_affordance(&mask, &depth, &i, 1, 0).unwrap();
        assert_eq!(p, vec![Vec3::new(0.0, 0.0, 1.0)]);
        let wide = CameraIntrinsics {
            fx: 10.0,
            fy: 10.0,
            ..i
        };
        let mut mask = Image2D::filled(64, 48, false);
        let mut depth = Image2D::filled(64, 48, 0.0);
        mask.set(42, 24, true);
        depth.set(42, 24, 2.0);
        let p = backproject_affordance(&mask, &depth, &wide, 1, 0).unwrap();
        assert_eq!(p, vec![Vec3::new(2.0, 0.0, 2.0)]);
    }

    #[test]
    fn invalid_depth_everywhere() {
        let mask = Image2D::filled(64, 48, true);
        let depth = Image2D::filled(64, 48, 0.0);
        assert!(matches!(
            backproject_affordance(&mask, &depth, &intr(), 5, 0),
            Err(IngestError::NoValidPixels)
        ));
        let small = Image2D::filled(8, 8, 1.0);
        assert!(matches!(
            backproject_affordance(&mask, &small, &intr(), 5, 0),
            Err(IngestError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = image::GrayImage::new(4, 3);
        m.put_pixel(1, 2, image::Luma([255]));
        m.save(dir.path().join("m.png")).unwrap();
        let mut d = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(4, 3);
        d.put_pixel(1, 2, image::Luma([1500]));
        d.save(dir.path().join("d.png")).unwrap();
        let mask = load_mask_png(&dir.path().join("m.png")).unwrap();
        let depth = load_depth_png(&dir.path().join("d.png"), 0.001).unwrap();
        assert!(mask.get(1, 2) && !mask.get(0, 0));
        assert!((depth.get(1, 2) - 1.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn backprojection_round_trips(
            pix in proptest::collection::vec((0usize..64, 0usize..48, 0.1f64..5.0), 1..40),
            seed in 0u64..100,
        ) {
            let i = intr();
            let mut mask = Image2D::filled(64, 48, false);
            let mut depth = Image2D::filled(64, 48, 0.0);
            for &(u, v, d) in &pix {
                mask.set(u, v, true);
                depth.set(u, v, d);
            }
            let pts = backproject_affordance(&mask, &depth, &i, 10, seed).unwrap();
            for p in pts {
                let (u, v) = i.project(&p);
                let (ru, rv) = (u.round(), v.round());
                prop_assert!((u - ru).abs() < 0.5 && (v - rv).abs() < 0.5);
                prop_assert!(mask.get(ru as usize, rv as usize));
            }
            let again = backproject_affordance(&mask, &depth, &i, 10, seed).unwrap();
            prop_assert_eq!(again, backproject_affordance(&mask, &depth, &i, 10, seed).unwrap());
        }
    }
}
