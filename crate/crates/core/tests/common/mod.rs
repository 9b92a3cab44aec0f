#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Random SPD matrix `B Bᵀ + δ I` with entries of unit scale.
pub fn random_spd<R: Rng>(rng: &mut R, d: usize, delta: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    &b * b.transpose() + DMatrix::identity(d, d) * delta
}

pub fn random_vector<R: Rng>(rng: &mut R, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Draws from `N(mean, cov)` through a Cholesky factor.
pub struct Sampler {
    mean: DVector<f64>,
    l: DMatrix<f64>,
}

impl Sampler {
    pub fn new(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Self {
        let l = cov.clone().cholesky().expect("SPD covariance").l();
        Sampler { mean: mean.clone(), l }
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.l * z
    }
}

/// Sample mean and covariance with the standard error of each entry.
pub struct SampleMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub se_mean: DVector<f64>,
    pub se_cov: DMatrix<f64>,
}

pub fn sample_moments(samples: &[DVector<f64>]) -> SampleMoments {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mean = samples.iter().fold(DVector::zeros(d), |a, s| a + s) / n;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let e = s - &mean;
        cov += &e * e.transpose() / n;
    }
    let mut var_cov: DMatrix<f64> = DMatrix::zeros(d, d);
    for s in samples {
        let e = s - &mean;
        for a in 0..d {
            for b in 0..d {
                var_cov[(a, b)] += (e[a] * e[b] - cov[(a, b)]).powi(2) / n;
            }
        }
    }
    SampleMoments {
        se_mean: DVector::from_fn(d, |k, _| (cov[(k, k)] / n).sqrt()),
        se_cov: var_cov.map(|v| (v / n).sqrt()),
        mean,
        cov,
    }
}

/// Largest deviation of `(mean, cov)` from the sample moments, in standard
/// errors.
pub fn worst_z(m: &SampleMoments, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let zm = (mean - &m.mean).zip_map(&m.se_mean, |a, s| a.abs() / s).max();
    let zc = (cov - &m.cov).zip_map(&m.se_cov, |a, s| a.abs() / s).max();
    zm.max(zc)
}

use pgm_sam::geometry::WorldMode;
use pgm_sam::graph::{make_clusters, ClusterGraph, Track};
use pgm_sam::propagation::Priors;
use pgm_sam::scenes::{generate_2d, generate_3d, perturb_priors, NoiseSpec, Scene};

/// Camera-feature pairs forming a tree: each new feature is seen by one
/// camera already in the tree and one or two new ones, so the cluster graph
/// has no loops. Total variable dimension stays within `max_dim`.
pub fn tree_pattern<R: Rng>(rng: &mut R, mode: WorldMode, max_dim: usize) -> (usize, usize, Vec<(usize, usize)>) {
    let (pd, fd, id) = (mode.pose_dim(), mode.world_dim(), mode.image_dim());
    loop {
        let n_feats = rng.gen_range(1..=3);
        let mut n_cams = 1;
        let mut pairs = Vec::new();
        for f in 0..n_feats {
            pairs.push((rng.gen_range(0..n_cams), f));
            for _ in 0..rng.gen_range(1..=2) {
                pairs.push((n_cams, f));
                n_cams += 1;
            }
        }
        if n_cams * pd + n_feats * fd + pairs.len() * id <= max_dim {
            return (n_cams, n_feats, pairs);
        }
    }
}

/// A generated scene restricted to `pairs`, with priors at mild noise.
pub fn restricted_scene(mode: WorldMode, n_cams: usize, n_feats: usize, pairs: &[(usize, usize)], sigma: f64, seed: u64) -> (Scene, Priors) {
    let mut scene = match mode {
        WorldMode::ThreeD => generate_3d(n_cams.max(2), n_feats, seed).unwrap(),
        WorldMode::TwoD => generate_2d(n_cams.max(2), n_feats, 0.0, seed).unwrap(),
    };
    scene.tracks.retain(|t| pairs.contains(&(t.camera, t.feature)));
    scene.cameras.truncate(n_cams);
    scene.set_track_sigma(sigma);
    let priors = perturb_priors(&scene, &NoiseSpec::table(2.0, 0.2), seed).unwrap();
    (scene, priors)
}

pub fn graph_of(scene: &Scene) -> ClusterGraph {
    let tracks: Vec<Track> = scene.tracks.clone();
    ClusterGraph::build(make_clusters(scene.mode, &tracks, &scene.calibrations()).unwrap()).unwrap()
}

/// Largest absolute difference between every cluster's belief marginals and
/// the marginals of the product of all potentials.
pub fn dense_marginal_gap(graph: &ClusterGraph) -> f64 {
    let mut joint = graph.clusters[0].potential.clone();
    for c in &graph.clusters[1..] {
        joint = joint.multiply(&c.potential).unwrap();
    }
    let mut gap: f64 = 0.0;
    for c in &graph.clusters {
        for var in &c.scope {
            let bp = c.belief.marginal_moments(var).unwrap();
            let exact = joint.marginal_moments(var).unwrap();
            gap = gap.max((bp.mean - exact.mean).amax()).max((bp.cov - exact.cov).amax());
        }
    }
    gap
}
