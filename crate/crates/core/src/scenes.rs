//! Synthetic structure-and-motion scenes, noisy priors and the
//! re-projection metric.
//!
//! Spatial scenes place features uniformly in a ball of radius 2 and cameras
//! uniformly on a sphere of radius 10, each looking at the origin. Planar
//! scenes do the same on a disc and a circle, and randomly drop a fraction of
//! the projections.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitBall, UnitCircle, UnitDisc, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::Moments;
use crate::geometry::{euler_from_rotation, look_at, project, Calibration, FeaturePoint, Pose, WorldMode};
use crate::graph::{make_clusters, ClusterGraph, Track};
use crate::propagation::{
    mean_reprojection_error, solve, BpConfig, IterationRecord, PosteriorEstimate, Priors, ReprojectionSummary,
};

pub const FEATURE_RADIUS: f64 = 2.0;
pub const CAMERA_RADIUS: f64 = 10.0;
/// Measurement noise assigned to generated tracks until overridden.
pub const DEFAULT_TRACK_SIGMA: f64 = 1e-3;
/// Prior standard deviations never go below this, so that zero noise still
/// yields a proper prior.
pub const MIN_PRIOR_STD: f64 = 1e-4;
const MAX_VISIBILITY_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub id: usize,
    pub calibration: Calibration,
    /// Known (ground-truth) pose, if any.
    pub pose: Option<Pose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub mode: WorldMode,
    pub cameras: Vec<Camera>,
    /// Known feature positions, if any.
    pub features: Vec<FeaturePoint>,
    pub tracks: Vec<Track>,
    pub ground_truth: bool,
}

/// Standard deviations of the noise added to ground truth when fitting
/// priors, and of the observation noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub angle_std_deg: f64,
    pub position_std: f64,
    pub feature_std: f64,
    pub pixel_std: f64,
    pub visibility_drop_prob: f64,
    /// When set, every feature prior is `N(0, s² I)` regardless of truth.
    pub feature_prior_std: Option<f64>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            angle_std_deg: 0.0,
            position_std: 0.0,
            feature_std: 0.0,
            pixel_std: 0.0,
            visibility_drop_prob: 0.0,
            feature_prior_std: None,
        }
    }
}

impl NoiseSpec {
    /// Pose noise of one column of the benchmark table; features share the
    /// position noise.
    pub fn table(angle_std_deg: f64, position_std: f64) -> Self {
        NoiseSpec {
            angle_std_deg,
            position_std,
            feature_std: position_std,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stds = [self.angle_std_deg, self.position_std, self.feature_std, self.pixel_std];
        if stds.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("noise standard deviations must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.visibility_drop_prob) {
            return Err(Error::InvalidArgument("drop probability must lie in [0, 1)".into()));
        }
        if let Some(s) = self.feature_prior_std {
            if !(s > 0.0) {
                return Err(Error::InvalidArgument("feature prior std must be positive".into()));
            }
        }
        Ok(())
    }
}

impl Scene {
    pub fn calibrations(&self) -> BTreeMap<usize, Calibration> {
        self.cameras.iter().map(|c| (c.id, c.calibration.clone())).collect()
    }

    pub fn set_track_sigma(&mut self, sigma: f64) {
        for t in &mut self.tracks {
            t.sigma = sigma;
        }
    }

    /// Ground truth as an estimate with zero covariance.
    pub fn truth_estimate(&self) -> Result<PosteriorEstimate> {
        let mut cameras = BTreeMap::new();
        for c in &self.cameras {
            let pose = c
                .pose
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("camera {} has no known pose", c.id)))?;
            let n = self.mode.pose_dim();
            cameras.insert(c.id, Moments::new(pose.to_vector(), DMatrix::zeros(n, n)));
        }
        let d = self.mode.world_dim();
        let features = self
            .features
            .iter()
            .map(|f| (f.id, Moments::new(f.coords.clone(), DMatrix::zeros(d, d))))
            .collect();
        Ok(PosteriorEstimate::from_priors(self.mode, &Priors { features, cameras }))
    }

    /// Check ids, dimensions and that every feature is seen twice.
    pub fn validate(&self) -> Result<()> {
        let mut cams = BTreeMap::new();
        for c in &self.cameras {
            if cams.insert(c.id, ()).is_some() {
                return Err(Error::Parse(format!("camera id {} repeated", c.id)));
            }
            if c.calibration.mode() != self.mode {
                return Err(Error::Parse(format!("camera {} calibration does not match mode", c.id)));
            }
            if let Some(p) = &c.pose {
                if p.mode() != self.mode {
                    return Err(Error::Parse(format!("camera {} pose does not match mode", c.id)));
                }
            }
        }
        let mut feats = BTreeMap::new();
        for f in &self.features {
            if feats.insert(f.id, ()).is_some() {
                return Err(Error::Parse(format!("feature id {} repeated", f.id)));
            }
            if f.coords.len() != self.mode.world_dim() || f.coords.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse(format!("feature {} has bad coordinates", f.id)));
            }
        }
        let mut views: BTreeMap<usize, usize> = BTreeMap::new();
        for t in &self.tracks {
            if !cams.contains_key(&t.camera) {
                return Err(Error::Parse(format!("track references unknown camera {}", t.camera)));
            }
            if !feats.is_empty() && !feats.contains_key(&t.feature) {
                return Err(Error::Parse(format!("track references unknown feature {}", t.feature)));
            }
            if t.observed.len() != self.mode.image_dim() || !(t.sigma > 0.0) {
                return Err(Error::Parse(format!(
                    "track ({}, {}) has bad coordinates or sigma",
                    t.camera, t.feature
                )));
            }
            *views.entry(t.feature).or_default() += 1;
        }
        if let Some((&i, _)) = views.iter().find(|(_, &n)| n < 2) {
            return Err(Error::UnderconstrainedFeature(i));
        }
        Ok(())
    }
}

fn facing_origin(center: DVector<f64>) -> Result<Pose> {
    let target = DVector::zeros(center.len());
    let r = look_at(&center, &target)?;
    Pose::new(center, DVector::from_vec(euler_from_rotation(&r)))
}

fn exact_tracks(mode: WorldMode, cameras: &[Camera], features: &[FeaturePoint], visible: impl Fn(usize, usize) -> bool) -> Result<Vec<Track>> {
    let mut tracks = Vec::new();
    for c in cameras {
        let pose = c.pose.as_ref().expect("generated cameras have poses");
        for f in features {
            if visible(c.id, f.id) {
                tracks.push(Track {
                    camera: c.id,
                    feature: f.id,
                    observed: project(pose, &c.calibration, &f.coords, mode)?,
                    sigma: DEFAULT_TRACK_SIGMA,
                });
            }
        }
    }
    Ok(tracks)
}

/// Spatial scene; every feature is visible to every camera.
pub fn generate_3d(n_cams: usize, n_feats: usize, seed: u64) -> Result<Scene> {
    if n_cams < 2 || n_feats < 1 {
        return Err(Error::InvalidArgument("need at least two cameras and one feature".into()));
    }
    let mode = WorldMode::ThreeD;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<FeaturePoint> = (0..n_feats)
        .map(|id| {
            let p: [f64; 3] = UnitBall.sample(&mut rng);
            FeaturePoint {
                id,
                coords: DVector::from_column_slice(&p) * FEATURE_RADIUS,
            }
        })
        .collect();
    let cameras = (0..n_cams)
        .map(|id| {
            let c: [f64; 3] = UnitSphere.sample(&mut rng);
            Ok(Camera {
                id,
                calibration: Calibration::identity(mode),
                pose: Some(facing_origin(DVector::from_column_slice(&c) * CAMERA_RADIUS)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let tracks = exact_tracks(mode, &cameras, &features, |_, _| true)?;
    Ok(Scene {
        mode,
        cameras,
        features,
        tracks,
        ground_truth: true,
    })
}

/// Planar scene with each projection dropped independently with
/// `drop_prob`, resampled until every feature keeps two views and every
/// camera keeps one.
pub fn generate_2d(n_cams: usize, n_feats: usize, drop_prob: f64, seed: u64) -> Result<Scene> {
    if n_cams < 2 || n_feats < 1 {
        return Err(Error::InvalidArgument("need at least two cameras and one feature".into()));
    }
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::InvalidArgument("drop probability must lie in [0, 1)".into()));
    }
    let mode = WorldMode::TwoD;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<FeaturePoint> = (0..n_feats)
        .map(|id| {
            let p: [f64; 2] = UnitDisc.sample(&mut rng);
            FeaturePoint {
                id,
                coords: DVector::from_column_slice(&p) * FEATURE_RADIUS,
            }
        })
        .collect();
    let cameras = (0..n_cams)
        .map(|id| {
            let c: [f64; 2] = UnitCircle.sample(&mut rng);
            Ok(Camera {
                id,
                calibration: Calibration::identity(mode),
                pose: Some(facing_origin(DVector::from_column_slice(&c) * CAMERA_RADIUS)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut mask = vec![vec![true; n_feats]; n_cams];
    let mut feasible = drop_prob == 0.0;
    for _ in 0..MAX_VISIBILITY_ATTEMPTS {
        if feasible {
            break;
        }
        for row in mask.iter_mut() {
            for m in row.iter_mut() {
                *m = rng.gen::<f64>() >= drop_prob;
            }
        }
        let feats_ok = (0..n_feats).all(|i| mask.iter().filter(|row| row[i]).count() >= 2);
        let cams_ok = mask.iter().all(|row| row.iter().any(|&m| m));
        feasible = feats_ok && cams_ok;
    }
    if !feasible {
        return Err(Error::InfeasibleVisibility(MAX_VISIBILITY_ATTEMPTS));
    }
    let tracks = exact_tracks(mode, &cameras, &features, |j, i| mask[j][i])?;
    Ok(Scene {
        mode,
        cameras,
        features,
        tracks,
        ground_truth: true,
    })
}

fn floored_var(std: f64) -> f64 {
    std.max(MIN_PRIOR_STD).powi(2)
}

/// Priors centred on noisy copies of the ground truth; projections are left
/// untouched.
pub fn perturb_priors(scene: &Scene, noise: &NoiseSpec, seed: u64) -> Result<Priors> {
    noise.validate()?;
    let mode = scene.mode;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9e0c);
    let angle_std = noise.angle_std_deg.to_radians();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw = |std: f64| std * normal.sample(&mut rng);

    let mut cameras = BTreeMap::new();
    for c in &scene.cameras {
        let pose = c
            .pose
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("camera {} has no ground-truth pose", c.id)))?;
        let mut mean = pose.to_vector();
        let d = mode.world_dim();
        let mut vars = Vec::with_capacity(mode.pose_dim());
        for k in 0..mode.pose_dim() {
            let std = if k < d { noise.position_std } else { angle_std };
            mean[k] += draw(std);
            vars.push(floored_var(std));
        }
        cameras.insert(c.id, Moments::diagonal(mean, &vars));
    }
    let mut features = BTreeMap::new();
    for f in &scene.features {
        let d = mode.world_dim();
        let m = match noise.feature_prior_std {
            Some(s) => Moments::isotropic(DVector::zeros(d), s * s),
            None => {
                let mean = DVector::from_fn(d, |k, _| f.coords[k] + draw(noise.feature_std));
                Moments::isotropic(mean, floored_var(noise.feature_std))
            }
        };
        features.insert(f.id, m);
    }
    Ok(Priors { features, cameras })
}

/// Add `N(0, σ² I)` to every observed projection.
pub fn observation_noise(scene: &Scene, sigma: f64, seed: u64) -> Result<Scene> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument("observation noise must be non-negative".into()));
    }
    let mut out = scene.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b5e_12fe);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for t in &mut out.tracks {
        for v in t.observed.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

/// Build the cluster graph of `scene` and run the outer loop from `priors`.
pub fn solve_scene<F>(scene: &Scene, priors: &Priors, config: &BpConfig, progress: F) -> Result<PosteriorEstimate>
where
    F: FnMut(&IterationRecord),
{
    let clusters = make_clusters(scene.mode, &scene.tracks, &scene.calibrations())?;
    let mut graph = ClusterGraph::build(clusters)?;
    solve(&mut graph, priors, config, progress)
}

/// Mean Euclidean image distance between the projections of the estimate's
/// means and the scene's observations.
pub fn reprojection_error(estimate: &PosteriorEstimate, scene: &Scene) -> Result<ReprojectionSummary> {
    let calibs = scene.calibrations();
    let items = scene
        .tracks
        .iter()
        .map(|t| {
            calibs
                .get(&t.camera)
                .map(|k| (t.camera, t.feature, k, &t.observed))
                .ok_or_else(|| Error::Mismatch(format!("unknown camera {}", t.camera)))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_reprojection_error(scene.mode, &estimate.cameras, &estimate.features, items)
}
