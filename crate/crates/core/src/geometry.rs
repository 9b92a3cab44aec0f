//! Pinhole camera model in a planar (2D world, 1D image) and a spatial
//! (3D world, 2D image) mode.
//!
//! A camera is described by its centre and Euler angles. The rotation maps
//! world directions into the camera frame, whose last axis is the viewing
//! direction, so that `P = K R [I | -C]` takes homogeneous world points to
//! homogeneous image points.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points with a homogeneous depth smaller than this are treated as lying on
/// the principal plane.
pub const DEPTH_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WorldMode {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

impl WorldMode {
    pub fn world_dim(self) -> usize {
        match self {
            WorldMode::TwoD => 2,
            WorldMode::ThreeD => 3,
        }
    }

    pub fn image_dim(self) -> usize {
        self.world_dim() - 1
    }

    pub fn angle_dim(self) -> usize {
        match self {
            WorldMode::TwoD => 1,
            WorldMode::ThreeD => 3,
        }
    }

    pub fn pose_dim(self) -> usize {
        self.world_dim() + self.angle_dim()
    }
}

/// Camera extrinsics: Euclidean centre followed by Euler angles (radians).
///
/// Angles are kept unwrapped.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub center: DVector<f64>,
    pub angles: DVector<f64>,
}

impl Pose {
    pub fn new(center: DVector<f64>, angles: DVector<f64>) -> Result<Self> {
        let mode = match (center.len(), angles.len()) {
            (2, 1) => WorldMode::TwoD,
            (3, 3) => WorldMode::ThreeD,
            (c, a) => {
                return Err(Error::InvalidArgument(format!(
                    "pose with centre of length {c} and {a} angles"
                )))
            }
        };
        debug_assert_eq!(mode.pose_dim(), center.len() + angles.len());
        Ok(Pose { center, angles })
    }

    pub fn identity(mode: WorldMode) -> Self {
        Pose {
            center: DVector::zeros(mode.world_dim()),
            angles: DVector::zeros(mode.angle_dim()),
        }
    }

    pub fn mode(&self) -> WorldMode {
        if self.center.len() == 2 {
            WorldMode::TwoD
        } else {
            WorldMode::ThreeD
        }
    }

    /// The flattened pose vector `[C, θ]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.center.len() + self.angles.len());
        v.rows_mut(0, self.center.len()).copy_from(&self.center);
        v.rows_mut(self.center.len(), self.angles.len())
            .copy_from(&self.angles);
        v
    }

    pub fn from_vector(mode: WorldMode, v: &DVector<f64>) -> Result<Self> {
        if v.len() != mode.pose_dim() {
            return Err(Error::InvalidArgument(format!(
                "pose vector of length {} in {:?} mode",
                v.len(),
                mode
            )));
        }
        let d = mode.world_dim();
        Ok(Pose {
            center: v.rows(0, d).into_owned(),
            angles: v.rows(d, mode.angle_dim()).into_owned(),
        })
    }

    pub fn rotation(&self) -> DMatrix<f64> {
        rotation_from_euler(self.angles.as_slice(), self.mode())
    }
}

/// Upper-triangular intrinsic matrix, 3x3 in spatial mode and 2x2 in planar
/// mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    k: DMatrix<f64>,
}

impl Calibration {
    pub fn new(k: DMatrix<f64>) -> Result<Self> {
        let n = k.nrows();
        if n != k.ncols() || !(n == 2 || n == 3) {
            return Err(Error::InvalidArgument(format!(
                "calibration must be 2x2 or 3x3, got {}x{}",
                k.nrows(),
                k.ncols()
            )));
        }
        for r in 0..n {
            for c in 0..r {
                if k[(r, c)] != 0.0 {
                    return Err(Error::InvalidArgument(
                        "calibration must be upper triangular".into(),
                    ));
                }
            }
            if !(k[(r, r)] > 0.0) || !k[(r, r)].is_finite() {
                return Err(Error::InvalidArgument(
                    "calibration diagonal must be strictly positive".into(),
                ));
            }
        }
        Ok(Calibration { k })
    }

    pub fn identity(mode: WorldMode) -> Self {
        Calibration {
            k: DMatrix::identity(mode.world_dim(), mode.world_dim()),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn mode(&self) -> WorldMode {
        if self.k.nrows() == 2 {
            WorldMode::TwoD
        } else {
            WorldMode::ThreeD
        }
    }
}

/// Homogeneous `D x (D+1)` camera matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraMatrix(pub DMatrix<f64>);

impl CameraMatrix {
    /// Homogeneous image point `P [X; 1]`.
    pub fn apply(&self, point: &DVector<f64>) -> DVector<f64> {
        let d = point.len();
        let p = &self.0;
        let mut out = p.columns(0, d) * point;
        out += p.column(d);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePoint {
    pub id: usize,
    pub coords: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub camera: usize,
    pub feature: usize,
    pub coords: DVector<f64>,
}

fn rot_x(a: f64) -> DMatrix<f64> {
    let (s, c) = a.sin_cos();
    DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c])
}

fn rot_y(a: f64) -> DMatrix<f64> {
    let (s, c) = a.sin_cos();
    DMatrix::from_row_slice(3, 3, &[c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c])
}

fn rot_z(a: f64) -> DMatrix<f64> {
    let (s, c) = a.sin_cos();
    DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0])
}

/// Rotation matrix for the given Euler angles.
///
/// Planar mode takes a single angle. Spatial mode composes
/// `Rz(θz) · Ry(θy) · Rx(θx)` with `angles = [θx, θy, θz]`.
pub fn rotation_from_euler(angles: &[f64], mode: WorldMode) -> DMatrix<f64> {
    match mode {
        WorldMode::TwoD => {
            let (s, c) = angles[0].sin_cos();
            DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
        }
        WorldMode::ThreeD => rot_z(angles[2]) * rot_y(angles[1]) * rot_x(angles[0]),
    }
}

/// Inverse of [`rotation_from_euler`], returning angles in `(-π, π]`.
///
/// In the gimbal-locked spatial case (`|θy| = π/2`) the x angle is set to
/// zero.
pub fn euler_from_rotation(r: &DMatrix<f64>) -> Vec<f64> {
    if r.nrows() == 2 {
        return vec![r[(1, 0)].atan2(r[(0, 0)])];
    }
    let sy = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let ty = sy.asin();
    let cy = (r[(0, 0)].powi(2) + r[(1, 0)].powi(2)).sqrt();
    if cy > 1e-12 {
        let tx = r[(2, 1)].atan2(r[(2, 2)]);
        let tz = r[(1, 0)].atan2(r[(0, 0)]);
        vec![tx, ty, tz]
    } else {
        // Rz(θz)·Ry(±π/2) only depends on θz ∓ θx
        let tz = (-r[(0, 1)]).atan2(r[(1, 1)]);
        vec![0.0, ty, tz]
    }
}

/// `P = K · R · [I | -C]`.
pub fn camera_matrix(pose: &Pose, calib: &Calibration, mode: WorldMode) -> CameraMatrix {
    let d = mode.world_dim();
    let kr = calib.matrix() * rotation_from_euler(pose.angles.as_slice(), mode);
    let mut p = DMatrix::zeros(d, d + 1);
    p.columns_mut(0, d).copy_from(&kr);
    p.column_mut(d).copy_from(&(-(&kr * &pose.center)));
    CameraMatrix(p)
}

/// Euclidean image coordinates of a homogeneous image point.
pub fn dehomogenize(x: &DVector<f64>) -> Result<DVector<f64>> {
    let n = x.len();
    let depth = x[n - 1];
    if depth.abs() < DEPTH_EPS || !depth.is_finite() {
        return Err(Error::DepthDegenerate { depth });
    }
    Ok(x.rows(0, n - 1) / depth)
}

/// The projection function: builds the camera matrix from the pose, applies
/// it to the homogenized point and returns Euclidean image coordinates.
pub fn project(
    pose: &Pose,
    calib: &Calibration,
    point: &DVector<f64>,
    mode: WorldMode,
) -> Result<DVector<f64>> {
    dehomogenize(&camera_matrix(pose, calib, mode).apply(point))
}

/// [`project`] on a flattened pose vector.
pub fn project_vec(
    pose: &DVector<f64>,
    calib: &Calibration,
    point: &DVector<f64>,
    mode: WorldMode,
) -> Result<DVector<f64>> {
    project(&Pose::from_vector(mode, pose)?, calib, point, mode)
}

/// Linear (DLT) triangulation from two or more calibrated views.
///
/// Used as an independent reference for the probabilistic estimate; it does
/// not share any code path with the sigma-point machinery.
pub fn triangulate_oracle(
    observations: &[(Pose, Calibration, DVector<f64>)],
    mode: WorldMode,
) -> Result<DVector<f64>> {
    if observations.len() < 2 {
        return Err(Error::DegenerateGeometry(format!(
            "need at least two views, got {}",
            observations.len()
        )));
    }
    let d = mode.world_dim();
    let img = mode.image_dim();
    let mut a = DMatrix::zeros(observations.len() * img, d + 1);
    for (k, (pose, calib, x)) in observations.iter().enumerate() {
        let p = camera_matrix(pose, calib, mode).0;
        let last = p.row(d - 1);
        for r in 0..img {
            let row = x[r] * last - p.row(r);
            // normalise rows so that distant views do not dominate
            let norm = row.norm().max(f64::MIN_POSITIVE);
            a.row_mut(k * img + r).copy_from(&(row / norm));
        }
    }
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..=d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    // a unique solution needs a one-dimensional (near) null space
    let second = eig.eigenvalues[order[1]].max(0.0);
    let largest = eig.eigenvalues[order[d]].max(f64::MIN_POSITIVE);
    if second <= 1e-10 * largest {
        return Err(Error::DegenerateGeometry(
            "triangulation system is rank deficient".into(),
        ));
    }
    let h = eig.eigenvectors.column(order[0]).into_owned();
    let w = h[d];
    if w.abs() < 1e-14 {
        return Err(Error::DegenerateGeometry("point at infinity".into()));
    }
    Ok(h.rows(0, d) / w)
}

/// Rotation whose last (viewing) axis points from `center` towards `target`.
///
/// The image "up" direction is derived from the world z axis (spatial mode),
/// falling back to the world y axis when the viewing direction is vertical.
pub fn look_at(center: &DVector<f64>, target: &DVector<f64>) -> Result<DMatrix<f64>> {
    let dir = target - center;
    let n = dir.norm();
    if n < DEPTH_EPS {
        return Err(Error::DegenerateGeometry("camera centre equals target".into()));
    }
    let z = dir / n;
    match center.len() {
        2 => Ok(DMatrix::from_row_slice(2, 2, &[z[1], -z[0], z[0], z[1]])),
        3 => {
            let z3 = nalgebra::Vector3::new(z[0], z[1], z[2]);
            let mut up = nalgebra::Vector3::z();
            if z3.cross(&up).norm() < 1e-6 {
                up = nalgebra::Vector3::y();
            }
            let x = z3.cross(&up).normalize();
            let y = z3.cross(&x);
            Ok(DMatrix::from_row_slice(
                3,
                3,
                &[x[0], x[1], x[2], y[0], y[1], y[2], z3[0], z3[1], z3[2]],
            ))
        }
        n => Err(Error::InvalidArgument(format!("{n}-dimensional centre"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn zero_angles_give_identity() {
        for mode in [WorldMode::TwoD, WorldMode::ThreeD] {
            let r = rotation_from_euler(&vec![0.0; mode.angle_dim()], mode);
            assert_eq!(r, DMatrix::identity(mode.world_dim(), mode.world_dim()));
        }
    }

    #[test]
    fn planar_quarter_turn() {
        let r = rotation_from_euler(&[std::f64::consts::FRAC_PI_2], WorldMode::TwoD);
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!((r - expected).abs().max() < 1e-15);
    }

    #[test]
    fn spatial_rotation_matches_hand_rolled_axis_product() {
        let (ax, ay, az): (f64, f64, f64) = (0.3, -0.2, 0.7);
        // each axis matrix written out independently as nested arrays
        let rx = [
            [1.0, 0.0, 0.0],
            [0.0, ax.cos(), -ax.sin()],
            [0.0, ax.sin(), ax.cos()],
        ];
        let ry = [
            [ay.cos(), 0.0, ay.sin()],
            [0.0, 1.0, 0.0],
            [-ay.sin(), 0.0, ay.cos()],
        ];
        let rz = [
            [az.cos(), -az.sin(), 0.0],
            [az.sin(), az.cos(), 0.0],
            [0.0, 0.0, 1.0],
        ];
        let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
            let mut c = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        c[i][j] += a[i][k] * b[k][j];
                    }
                }
            }
            c
        };
        let expected = mul(mul(rz, ry), rx);
        let r = rotation_from_euler(&[ax, ay, az], WorldMode::ThreeD);
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[(i, j)] - expected[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn euler_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-3.0..3.0),
            ];
            let r = rotation_from_euler(&a, WorldMode::ThreeD);
            let back = euler_from_rotation(&r);
            let r2 = rotation_from_euler(&back, WorldMode::ThreeD);
            assert!((r - r2).abs().max() < 1e-12);
        }
    }

    #[test]
    fn rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let a: Vec<f64> = (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let r = rotation_from_euler(&a, WorldMode::ThreeD);
            let err = (r.transpose() * &r - DMatrix::identity(3, 3)).abs().max();
            assert!(err < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn camera_matrix_examples() {
        let mode = WorldMode::ThreeD;
        let k = Calibration::identity(mode);
        let p = camera_matrix(&Pose::identity(mode), &k, mode);
        assert_eq!(p.0, DMatrix::identity(3, 4));

        let pose = Pose::new(v(&[0.0, 0.0, -10.0]), v(&[0.0, 0.0, 0.0])).unwrap();
        let p = camera_matrix(&pose, &k, mode);
        let mut expected = DMatrix::identity(3, 4);
        expected[(2, 3)] = 10.0;
        assert_eq!(p.0, expected);
    }

    #[test]
    fn camera_matrix_matches_direct_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mode = WorldMode::ThreeD;
        for _ in 0..50 {
            let c = v(&[rng.gen(), rng.gen(), rng.gen()]);
            let a = v(&[rng.gen(), rng.gen(), rng.gen()]);
            let k = Calibration::new(DMatrix::from_row_slice(
                3,
                3,
                &[800.0, 0.5, 320.0, 0.0, 780.0, 240.0, 0.0, 0.0, 1.0],
            ))
            .unwrap();
            let pose = Pose::new(c.clone(), a.clone()).unwrap();
            let r = rot_z(a[2]) * rot_y(a[1]) * rot_x(a[0]);
            let mut ic = DMatrix::zeros(3, 4);
            ic.columns_mut(0, 3).fill_with_identity();
            ic.column_mut(3).copy_from(&(-&c));
            let expected = k.matrix() * r * ic;
            let p = camera_matrix(&pose, &k, mode);
            assert!((p.0 - expected).abs().max() < 1e-9);
        }
    }

    #[test]
    fn projection_examples() {
        let m3 = WorldMode::ThreeD;
        let k3 = Calibration::identity(m3);
        let id3 = Pose::identity(m3);
        let x = project(&id3, &k3, &v(&[0.0, 0.0, 5.0]), m3).unwrap();
        assert_eq!(x, v(&[0.0, 0.0]));
        let x = project(&id3, &k3, &v(&[1.0, 2.0, 5.0]), m3).unwrap();
        assert!((x - v(&[0.2, 0.4])).norm() < 1e-15);

        let m2 = WorldMode::TwoD;
        let x = project(&Pose::identity(m2), &Calibration::identity(m2), &v(&[1.0, 2.0]), m2)
            .unwrap();
        assert_eq!(x, v(&[0.5]));
    }

    #[test]
    fn projection_on_principal_plane_is_degenerate() {
        let m3 = WorldMode::ThreeD;
        let err = project(
            &Pose::identity(m3),
            &Calibration::identity(m3),
            &v(&[1.0, 1.0, 0.0]),
            m3,
        );
        assert!(matches!(err, Err(Error::DepthDegenerate { .. })));
    }

    #[test]
    fn dehomogenize_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = v(&[rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(1.0..5.0)]);
            let s: f64 = rng.gen_range(-100.0..100.0);
            if s.abs() < 1e-3 {
                continue;
            }
            let a = dehomogenize(&x).unwrap();
            let b = dehomogenize(&(&x * s)).unwrap();
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn stereo_triangulation_recovers_point() {
        let m3 = WorldMode::ThreeD;
        let k = Calibration::identity(m3);
        let x = v(&[0.0, 0.0, 5.0]);
        let obs: Vec<_> = [-1.0, 1.0]
            .iter()
            .map(|&cx| {
                let pose = Pose::new(v(&[cx, 0.0, 0.0]), v(&[0.0, 0.0, 0.0])).unwrap();
                let uv = project(&pose, &k, &x, m3).unwrap();
                (pose, k.clone(), uv)
            })
            .collect();
        let got = triangulate_oracle(&obs, m3).unwrap();
        assert!((got - x).norm() < 1e-9);
    }

    #[test]
    fn planar_triangulation_recovers_point() {
        let m2 = WorldMode::TwoD;
        let k = Calibration::identity(m2);
        let x = v(&[0.3, 4.0]);
        let obs: Vec<_> = [(-1.0, 0.1), (1.5, -0.2)]
            .iter()
            .map(|&(cx, th)| {
                let pose = Pose::new(v(&[cx, 0.0]), v(&[th])).unwrap();
                let u = project(&pose, &k, &x, m2).unwrap();
                (pose, k.clone(), u)
            })
            .collect();
        let got = triangulate_oracle(&obs, m2).unwrap();
        assert!((got - x).norm() < 1e-9);
    }

    #[test]
    fn duplicate_views_are_degenerate() {
        let m3 = WorldMode::ThreeD;
        let k = Calibration::identity(m3);
        let pose = Pose::new(v(&[1.0, 0.0, 0.0]), v(&[0.0, 0.0, 0.0])).unwrap();
        let uv = project(&pose, &k, &v(&[0.0, 0.0, 5.0]), m3).unwrap();
        let obs = vec![(pose.clone(), k.clone(), uv.clone()), (pose, k, uv)];
        assert!(matches!(
            triangulate_oracle(&obs, m3),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn look_at_points_axis_at_target() {
        let c = v(&[3.0, -4.0, 5.0]);
        let r = look_at(&c, &v(&[0.0, 0.0, 0.0])).unwrap();
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        let pose = Pose::new(c, v(&euler_from_rotation(&r))).unwrap();
        let m3 = WorldMode::ThreeD;
        let x = project(&pose, &Calibration::identity(m3), &v(&[0.0, 0.0, 0.0]), m3).unwrap();
        assert!(x.norm() < 1e-12);

        let r2 = look_at(&v(&[0.0, 0.0, 10.0]), &v(&[0.0, 0.0, 0.0])).unwrap();
        assert!((r2.determinant() - 1.0).abs() < 1e-12);

        let c2 = v(&[2.0, -7.0]);
        let r = look_at(&c2, &v(&[0.0, 0.0])).unwrap();
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        let pose = Pose::new(c2, v(&euler_from_rotation(&r))).unwrap();
        let m2 = WorldMode::TwoD;
        let x = project(&pose, &Calibration::identity(m2), &v(&[0.0, 0.0]), m2).unwrap();
        assert!(x.norm() < 1e-12);
    }
}
