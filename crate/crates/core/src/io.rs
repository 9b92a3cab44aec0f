//! Scene and result files, evaluation reports, benchmark tables and exports.
//!
//! Scenes and results are JSON documents with a `format` tag and a `version`.
//! Angles in files are degrees; internally they are radians. Covariances are
//! stored as their diagonals (angle entries in square degrees).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::Moments;
use crate::geometry::{Calibration, FeaturePoint, Pose, WorldMode};
use crate::graph::Track;
use crate::propagation::{BpConfig, IterationRecord, PosteriorEstimate, Priors};
use crate::scenes::{Camera, Scene};

pub const SCENE_FORMAT: &str = "pgm-sam-scene";
pub const RESULT_FORMAT: &str = "pgm-sam-result";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub center: Vec<f64>,
    pub angles_deg: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub id: usize,
    /// Intrinsic matrix, row-major.
    #[serde(rename = "K")]
    pub k: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub id: usize,
    pub xyz: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub cam: usize,
    pub feat: usize,
    pub uv: Vec<f64>,
    pub sigma: f64,
}

/// Gaussian over one variable, named `X<i>` (feature) or `p<j>` (camera).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorRecord {
    pub var: String,
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub format: String,
    pub version: u32,
    pub mode: WorldMode,
    pub cameras: Vec<CameraRecord>,
    #[serde(default)]
    pub features: Vec<FeatureRecord>,
    pub tracks: Vec<TrackRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub priors: Vec<PriorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFile {
    pub format: String,
    pub version: u32,
    pub mode: WorldMode,
    pub seed: u64,
    pub config: BpConfig,
    pub estimates: Vec<PriorRecord>,
    pub trace: Vec<IterationRecord>,
    pub accepted_iteration: Option<usize>,
    pub disagreement: f64,
}

fn check_header(format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected {
        return Err(Error::Parse(format!("expected a {expected} document, found {format:?}")));
    }
    if version != FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported {expected} version {version}")));
    }
    Ok(())
}

fn to_text<T: Serialize>(doc: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(doc).map_err(|e| Error::Parse(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn from_text<'a, T: Deserialize<'a>>(text: &'a str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

fn pose_var_name(j: usize) -> String {
    format!("p{j}")
}

fn feature_var_name(i: usize) -> String {
    format!("X{i}")
}

enum VarName {
    Feature(usize),
    Pose(usize),
}

fn parse_var_name(name: &str) -> Result<VarName> {
    let bad = || Error::Parse(format!("bad variable name {name:?}"));
    let (head, tail) = name.split_at(name.char_indices().nth(1).map_or(name.len(), |(k, _)| k));
    let id: usize = tail.parse().map_err(|_| bad())?;
    match head {
        "X" => Ok(VarName::Feature(id)),
        "p" => Ok(VarName::Pose(id)),
        _ => Err(bad()),
    }
}

/// File record of a feature or pose Gaussian; pose angles go to degrees.
fn record(mode: WorldMode, var: String, m: &Moments, is_pose: bool) -> PriorRecord {
    let d = mode.world_dim();
    let deg = 180.0 / std::f64::consts::PI;
    let scale = |k: usize| if is_pose && k >= d { deg } else { 1.0 };
    PriorRecord {
        var,
        mean: m.mean.iter().enumerate().map(|(k, v)| v * scale(k)).collect(),
        cov_diag: (0..m.mean.len())
            .map(|k| m.cov[(k, k)] * scale(k) * scale(k))
            .collect(),
    }
}

fn moments_from_record(mode: WorldMode, r: &PriorRecord, is_pose: bool) -> Result<Moments> {
    let n = if is_pose { mode.pose_dim() } else { mode.world_dim() };
    if r.mean.len() != n || r.cov_diag.len() != n {
        return Err(Error::Parse(format!("{} needs {n} entries in mean and cov_diag", r.var)));
    }
    if r.cov_diag.iter().any(|v| !(*v >= 0.0)) || r.mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parse(format!("{} has a non-finite mean or negative variance", r.var)));
    }
    let d = mode.world_dim();
    let rad = std::f64::consts::PI / 180.0;
    let scale = |k: usize| if is_pose && k >= d { rad } else { 1.0 };
    let mean = DVector::from_fn(n, |k, _| r.mean[k] * scale(k));
    let cov = DMatrix::from_fn(n, n, |a, b| if a == b { r.cov_diag[a] * scale(a) * scale(a) } else { 0.0 });
    Ok(Moments::new(mean, cov))
}

fn priors_to_records(mode: WorldMode, priors: &Priors) -> Vec<PriorRecord> {
    let mut out: Vec<PriorRecord> = priors
        .features
        .iter()
        .map(|(&i, m)| record(mode, feature_var_name(i), m, false))
        .collect();
    out.extend(priors.cameras.iter().map(|(&j, m)| record(mode, pose_var_name(j), m, true)));
    out
}

fn records_to_priors(mode: WorldMode, records: &[PriorRecord]) -> Result<Priors> {
    let mut priors = Priors::default();
    for r in records {
        let fresh = match parse_var_name(&r.var)? {
            VarName::Feature(i) => priors.features.insert(i, moments_from_record(mode, r, false)?).is_none(),
            VarName::Pose(j) => priors.cameras.insert(j, moments_from_record(mode, r, true)?).is_none(),
        };
        if !fresh {
            return Err(Error::Parse(format!("{} listed twice", r.var)));
        }
    }
    Ok(priors)
}

impl SceneFile {
    pub fn from_scene(scene: &Scene, priors: Option<&Priors>) -> SceneFile {
        let deg = |a: &DVector<f64>| a.iter().map(|v| v.to_degrees()).collect();
        SceneFile {
            format: SCENE_FORMAT.to_string(),
            version: FORMAT_VERSION,
            mode: scene.mode,
            cameras: scene
                .cameras
                .iter()
                .map(|c| {
                    let k = c.calibration.matrix();
                    CameraRecord {
                        id: c.id,
                        k: (0..k.nrows()).flat_map(|r| (0..k.ncols()).map(move |col| k[(r, col)])).collect(),
                        pose: c.pose.as_ref().map(|p| PoseRecord {
                            center: p.center.iter().copied().collect(),
                            angles_deg: deg(&p.angles),
                        }),
                    }
                })
                .collect(),
            features: scene
                .features
                .iter()
                .map(|f| FeatureRecord {
                    id: f.id,
                    xyz: f.coords.iter().copied().collect(),
                })
                .collect(),
            tracks: scene
                .tracks
                .iter()
                .map(|t| TrackRecord {
                    cam: t.camera,
                    feat: t.feature,
                    uv: t.observed.iter().copied().collect(),
                    sigma: t.sigma,
                })
                .collect(),
            priors: priors.map(|p| priors_to_records(scene.mode, p)).unwrap_or_default(),
        }
    }

    /// The scene and, when the file has a priors section, its priors.
    pub fn to_scene(&self) -> Result<(Scene, Option<Priors>)> {
        check_header(&self.format, self.version, SCENE_FORMAT)?;
        let mode = self.mode;
        let d = mode.image_dim() + 1;
        let mut cameras = Vec::with_capacity(self.cameras.len());
        for c in &self.cameras {
            if c.k.len() != d * d {
                return Err(Error::Parse(format!("camera {}: K needs {} entries", c.id, d * d)));
            }
            let calibration = Calibration::new(DMatrix::from_row_slice(d, d, &c.k))
                .map_err(|e| Error::Parse(format!("camera {}: {e}", c.id)))?;
            let pose = match &c.pose {
                Some(p) => Some(
                    Pose::new(
                        DVector::from_column_slice(&p.center),
                        DVector::from_iterator(p.angles_deg.len(), p.angles_deg.iter().map(|a| a.to_radians())),
                    )
                    .map_err(|e| Error::Parse(format!("camera {}: {e}", c.id)))?,
                ),
                None => None,
            };
            cameras.push(Camera {
                id: c.id,
                calibration,
                pose,
            });
        }
        let features: Vec<FeaturePoint> = self
            .features
            .iter()
            .map(|f| FeaturePoint {
                id: f.id,
                coords: DVector::from_column_slice(&f.xyz),
            })
            .collect();
        let tracks = self
            .tracks
            .iter()
            .map(|t| Track {
                camera: t.cam,
                feature: t.feat,
                observed: DVector::from_column_slice(&t.uv),
                sigma: t.sigma,
            })
            .collect();
        let ground_truth = !features.is_empty() && cameras.iter().all(|c| c.pose.is_some());
        let scene = Scene {
            mode,
            cameras,
            features,
            tracks,
            ground_truth,
        };
        scene.validate()?;
        let priors = if self.priors.is_empty() {
            None
        } else {
            Some(records_to_priors(mode, &self.priors)?)
        };
        Ok((scene, priors))
    }

    pub fn parse(text: &str) -> Result<SceneFile> {
        let doc: SceneFile = from_text(text)?;
        check_header(&doc.format, doc.version, SCENE_FORMAT)?;
        Ok(doc)
    }

    pub fn to_text(&self) -> Result<String> {
        to_text(self)
    }

    pub fn read(path: &Path) -> Result<SceneFile> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text()?)?)
    }
}

impl ResultFile {
    pub fn from_estimate(estimate: &PosteriorEstimate, config: &BpConfig) -> ResultFile {
        ResultFile {
            format: RESULT_FORMAT.to_string(),
            version: FORMAT_VERSION,
            mode: estimate.mode,
            seed: config.seed,
            config: config.clone(),
            estimates: priors_to_records(estimate.mode, &estimate.as_priors()),
            trace: estimate.trace.clone(),
            accepted_iteration: estimate.accepted_iteration,
            disagreement: estimate.disagreement,
        }
    }

    /// The estimate, with covariances reduced to their stored diagonals.
    pub fn to_estimate(&self) -> Result<PosteriorEstimate> {
        check_header(&self.format, self.version, RESULT_FORMAT)?;
        let priors = records_to_priors(self.mode, &self.estimates)?;
        let mut est = PosteriorEstimate::from_priors(self.mode, &priors);
        est.trace = self.trace.clone();
        est.accepted_iteration = self.accepted_iteration;
        est.disagreement = self.disagreement;
        Ok(est)
    }

    pub fn parse(text: &str) -> Result<ResultFile> {
        let doc: ResultFile = from_text(text)?;
        check_header(&doc.format, doc.version, RESULT_FORMAT)?;
        Ok(doc)
    }

    pub fn to_text(&self) -> Result<String> {
        to_text(self)
    }

    pub fn read(path: &Path) -> Result<ResultFile> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text()?)?)
    }
}

/// One row of an evaluation report: the re-projection error of one estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub estimate: String,
    pub reprojection_error: f64,
    pub tracks: usize,
    pub excluded: usize,
}

/// Posterior pose minus reference pose for one camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta {
    pub camera: usize,
    /// `truth` when the scene carries ground truth, otherwise `prior`.
    pub reference: String,
    pub center_delta: f64,
    pub angle_delta_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Prior then posterior.
    pub errors: Vec<ErrorRow>,
    pub pose_deltas: Vec<PoseDelta>,
}

fn csv_error(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

fn write_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

fn read_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(csv_error)
}

impl EvalReport {
    /// Two CSV tables separated by a blank line: errors, then pose deltas.
    pub fn to_csv(&self) -> Result<String> {
        let mut s = write_csv(&self.errors)?;
        if !self.pose_deltas.is_empty() {
            s.push('\n');
            s.push_str(&write_csv(&self.pose_deltas)?);
        }
        Ok(s)
    }

    pub fn from_csv(text: &str) -> Result<EvalReport> {
        let (errors, deltas) = match text.split_once("\n\n") {
            Some((a, b)) => (a, Some(b)),
            None => (text, None),
        };
        Ok(EvalReport {
            errors: read_csv(errors)?,
            pose_deltas: deltas.map(read_csv).transpose()?.unwrap_or_default(),
        })
    }
}

fn wrapped_angle_deg(a: f64) -> f64 {
    let d = a.to_degrees().rem_euclid(360.0);
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

/// Re-projection error of the scene priors and of `result`, plus per-camera
/// pose deltas against ground truth (or the priors when there is none).
pub fn evaluate(scene: &Scene, priors: Option<&Priors>, result: &PosteriorEstimate) -> Result<EvalReport> {
    if result.mode != scene.mode {
        return Err(Error::Mismatch("scene and result modes differ".into()));
    }
    for c in &scene.cameras {
        if !result.cameras.contains_key(&c.id) {
            return Err(Error::Mismatch(format!("result has no estimate for camera {}", c.id)));
        }
    }
    for t in &scene.tracks {
        if !result.features.contains_key(&t.feature) {
            return Err(Error::Mismatch(format!("result has no estimate for feature {}", t.feature)));
        }
    }
    let row = |name: &str, est: &PosteriorEstimate| -> Result<ErrorRow> {
        let s = crate::scenes::reprojection_error(est, scene)?;
        Ok(ErrorRow {
            estimate: name.to_string(),
            reprojection_error: s.mean,
            tracks: s.count,
            excluded: s.excluded,
        })
    };
    let mut errors = Vec::new();
    if let Some(p) = priors {
        errors.push(row("prior", &PosteriorEstimate::from_priors(scene.mode, p))?);
    }
    errors.push(row("posterior", result)?);

    let d = scene.mode.world_dim();
    let mut pose_deltas = Vec::new();
    for c in &scene.cameras {
        let (reference, name) = match (&c.pose, priors.and_then(|p| p.cameras.get(&c.id))) {
            (Some(p), _) => (p.to_vector(), "truth"),
            (None, Some(m)) => (m.mean.clone(), "prior"),
            (None, None) => continue,
        };
        let post = &result.cameras[&c.id].mean;
        let diff = post - &reference;
        pose_deltas.push(PoseDelta {
            camera: c.id,
            reference: name.to_string(),
            center_delta: diff.rows(0, d).norm(),
            angle_delta_deg: diff.rows(d, diff.len() - d).iter().map(|a| wrapped_angle_deg(*a)).fold(0.0, f64::max),
        });
    }
    Ok(EvalReport { errors, pose_deltas })
}

/// `(iteration, error)` trace with the best-so-far curve and the accepted
/// iterate marked.
pub fn trace_csv(estimate: &PosteriorEstimate) -> String {
    let mut s = String::from("iteration,error,best_error,inflated,accepted\n");
    for r in &estimate.trace {
        let accepted = estimate.accepted_iteration == Some(r.iteration);
        let _ = writeln!(
            s,
            "{},{:e},{:e},{},{}",
            r.iteration, r.error, r.best_error, r.inflated, accepted
        );
    }
    s
}

pub const FEATURE_COLOR: [u8; 3] = [40, 120, 220];
pub const CAMERA_COLOR: [u8; 3] = [230, 50, 40];

/// ASCII PLY point cloud of feature means and camera centres, told apart by
/// colour. Planar estimates get `z = 0`.
pub fn pointcloud_ply(estimate: &PosteriorEstimate) -> String {
    let d = estimate.mode.world_dim();
    let xyz = |v: &DVector<f64>| {
        let z = if d == 3 { v[2] } else { 0.0 };
        (v[0], v[1], z)
    };
    let mut points: Vec<((f64, f64, f64), [u8; 3])> = Vec::new();
    points.extend(estimate.features.values().map(|m| (xyz(&m.mean), FEATURE_COLOR)));
    points.extend(estimate.cameras.values().map(|m| (xyz(&m.mean), CAMERA_COLOR)));
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    );
    for ((x, y, z), [r, g, b]) in points {
        let _ = writeln!(s, "{x} {y} {z} {r} {g} {b}");
    }
    s
}

/// One benchmark cell: a scene size, measurement noise and prior noise
/// column, averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: WorldMode,
    pub cams: usize,
    pub feats: usize,
    pub sigma: f64,
    pub angle_noise_deg: f64,
    pub pos_noise: f64,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub mean_prior_error: f64,
    pub mean_posterior_error: f64,
    pub first_failure: String,
}

pub fn bench_csv(rows: &[BenchRow]) -> Result<String> {
    if rows.is_empty() {
        return Ok("mode,cams,feats,sigma,angle_noise_deg,pos_noise,seeds_ok,seeds_failed,mean_prior_error,mean_posterior_error,first_failure\n".into());
    }
    write_csv(rows)
}

pub fn parse_bench_csv(text: &str) -> Result<Vec<BenchRow>> {
    read_csv(text)
}
