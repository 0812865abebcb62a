//! Camera poses on a sphere around the origin, pinhole ray casting, and the
//! pose distributions used for rendering (dataset, uniform, and their mixture).

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::fs::File;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const YAW_LIMIT: f64 = FRAC_PI_2;
pub const PITCH_LIMIT: f64 = FRAC_PI_4;
/// Scene content lives inside this radius around the origin.
pub const SCENE_BOUND: f64 = 1.0;
pub const DEFAULT_RADIUS: f64 = 2.7;
pub const DEFAULT_FOCAL: f64 = 1.6;
/// Rejection attempts before negative-pose sampling gives up.
pub const NEGATIVE_POSE_MAX_TRIES: usize = 1000;

/// A camera on a sphere of radius `radius` looking at the origin.
///
/// `flat` is the 25-value parameter vector: the row-major 4x4 camera-to-world
/// matrix followed by the row-major 3x3 intrinsic matrix (normalized image
/// coordinates, principal point at 0.5).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub yaw: f64,
    pub pitch: f64,
    pub radius: f64,
    pub focal: f64,
    #[serde(with = "flat_serde")]
    pub flat: [f64; 25],
}

mod flat_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; 25], s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 25], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into().map_err(|_| serde::de::Error::custom("expected 25 values"))
    }
}

fn check_range(what: &'static str, value: f64, lo: f64, hi: f64) -> Result<()> {
    if value.is_finite() && value >= lo && value <= hi {
        Ok(())
    } else {
        Err(Error::Range { what, value, lo, hi })
    }
}

/// Unit vector from the origin towards a camera at (yaw, pitch).
pub fn view_direction(yaw: f64, pitch: f64) -> Vector3<f64> {
    Vector3::new(yaw.sin() * pitch.cos(), pitch.sin(), yaw.cos() * pitch.cos())
}

/// Builds the pose for a camera at the given generator coordinates.
pub fn pose_from_angles(yaw: f64, pitch: f64, radius: f64, focal: f64) -> Result<CameraPose> {
    check_range("yaw", yaw, -YAW_LIMIT, YAW_LIMIT)?;
    check_range("pitch", pitch, -PITCH_LIMIT, PITCH_LIMIT)?;
    check_range("radius", radius, f64::MIN_POSITIVE, f64::MAX)?;
    check_range("focal", focal, f64::MIN_POSITIVE, f64::MAX)?;

    let back = view_direction(yaw, pitch);
    let position = back * radius;
    let right = Vector3::y().cross(&back).normalize();
    let up = back.cross(&right);

    let mut flat = [0.0; 25];
    for row in 0..3 {
        flat[row * 4] = right[row];
        flat[row * 4 + 1] = up[row];
        flat[row * 4 + 2] = back[row];
        flat[row * 4 + 3] = position[row];
    }
    flat[15] = 1.0;
    let k = [focal, 0.0, 0.5, 0.0, focal, 0.5, 0.0, 0.0, 1.0];
    flat[16..].copy_from_slice(&k);
    Ok(CameraPose { yaw, pitch, radius, focal, flat })
}

impl CameraPose {
    pub fn frontal() -> CameraPose {
        pose_from_angles(0.0, 0.0, DEFAULT_RADIUS, DEFAULT_FOCAL).expect("frontal pose is in range")
    }

    /// Camera-to-world rotation block.
    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.flat[r * 4 + c])
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.flat[3], self.flat[7], self.flat[11])
    }

    pub fn intrinsic(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.flat[16 + r * 3 + c])
    }

    pub fn extrinsic(&self) -> [[f64; 4]; 4] {
        let mut e = [[0.0; 4]; 4];
        for (r, row) in e.iter_mut().enumerate() {
            row.copy_from_slice(&self.flat[r * 4..r * 4 + 4]);
        }
        e
    }
}

/// Recovers (yaw, pitch) from the camera position stored in the extrinsic.
pub fn angles_from_pose(pose: &CameraPose) -> (f64, f64) {
    let p = pose.position();
    let r = p.norm();
    let pitch = (p.y / r).clamp(-1.0, 1.0).asin();
    let yaw = p.x.atan2(p.z);
    (yaw, pitch)
}

/// Great-circle angle between the viewing directions of two poses.
pub fn angular_distance(a: &CameraPose, b: &CameraPose) -> f64 {
    let va = view_direction(a.yaw, a.pitch);
    let vb = view_direction(b.yaw, b.pitch);
    va.cross(&vb).norm().atan2(va.dot(&vb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoseDistKind {
    DatasetEmpirical,
    Uniform,
    AupsMixture,
}

/// Which component of a mixture produced a pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseSource {
    Dataset,
    Uniform,
}

#[derive(Debug, Clone)]
pub struct PoseDistribution {
    pub kind: PoseDistKind,
    pub dataset_poses: Arc<Vec<CameraPose>>,
    pub uniform_yaw_range: (f64, f64),
    pub uniform_pitch_range: (f64, f64),
    /// Probability of drawing from the uniform component (mixture only).
    pub mixture_ratio: f64,
    /// Radius and focal length given to uniformly drawn poses.
    pub radius: f64,
    pub focal: f64,
}

impl PoseDistribution {
    pub fn dataset(poses: Arc<Vec<CameraPose>>) -> PoseDistribution {
        let (radius, focal) = poses.first().map(|p| (p.radius, p.focal)).unwrap_or((DEFAULT_RADIUS, DEFAULT_FOCAL));
        PoseDistribution {
            kind: PoseDistKind::DatasetEmpirical,
            dataset_poses: poses,
            uniform_yaw_range: (-50f64.to_radians(), 50f64.to_radians()),
            uniform_pitch_range: (-15f64.to_radians(), 15f64.to_radians()),
            mixture_ratio: 0.0,
            radius,
            focal,
        }
    }

    pub fn uniform(yaw: (f64, f64), pitch: (f64, f64)) -> PoseDistribution {
        PoseDistribution {
            kind: PoseDistKind::Uniform,
            dataset_poses: Arc::new(Vec::new()),
            uniform_yaw_range: yaw,
            uniform_pitch_range: pitch,
            mixture_ratio: 1.0,
            radius: DEFAULT_RADIUS,
            focal: DEFAULT_FOCAL,
        }
    }

    /// Mixture of the dataset poses with a uniform distribution over the given ranges.
    pub fn aups(poses: Arc<Vec<CameraPose>>, ratio: f64, yaw: (f64, f64), pitch: (f64, f64)) -> PoseDistribution {
        PoseDistribution {
            kind: PoseDistKind::AupsMixture,
            uniform_yaw_range: yaw,
            uniform_pitch_range: pitch,
            mixture_ratio: ratio,
            ..PoseDistribution::dataset(poses)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let needs_data = match self.kind {
            PoseDistKind::DatasetEmpirical => true,
            PoseDistKind::AupsMixture => self.mixture_ratio < 1.0,
            PoseDistKind::Uniform => false,
        };
        if needs_data && self.dataset_poses.is_empty() {
            return Err(Error::Config("pose distribution needs dataset poses but none were given".into()));
        }
        if !(0.0..=1.0).contains(&self.mixture_ratio) {
            return Err(Error::Config(format!("mixture ratio {} outside [0, 1]", self.mixture_ratio)));
        }
        let (ylo, yhi) = self.uniform_yaw_range;
        let (plo, phi) = self.uniform_pitch_range;
        if !(ylo <= yhi && -YAW_LIMIT <= ylo && yhi <= YAW_LIMIT) {
            return Err(Error::Config(format!("bad uniform yaw range [{ylo}, {yhi}]")));
        }
        if !(plo <= phi && -PITCH_LIMIT <= plo && phi <= PITCH_LIMIT) {
            return Err(Error::Config(format!("bad uniform pitch range [{plo}, {phi}]")));
        }
        Ok(())
    }

    /// Probability mass of yaw in each cell `[edges[k], edges[k + 1])`.
    pub fn yaw_cell_probabilities(&self, edges: &[f64]) -> Vec<f64> {
        let cells = edges.windows(2);
        let (ylo, yhi) = self.uniform_yaw_range;
        let uniform: Vec<f64> = cells
            .clone()
            .map(|w| {
                if yhi > ylo {
                    (w[1].min(yhi) - w[0].max(ylo)).max(0.0) / (yhi - ylo)
                } else {
                    f64::from(u8::from(w[0] <= ylo && ylo < w[1]))
                }
            })
            .collect();
        let n = self.dataset_poses.len().max(1) as f64;
        let empirical: Vec<f64> =
            cells.map(|w| self.dataset_poses.iter().filter(|p| w[0] <= p.yaw && p.yaw < w[1]).count() as f64 / n).collect();
        let ratio = match self.kind {
            PoseDistKind::DatasetEmpirical => 0.0,
            PoseDistKind::Uniform => 1.0,
            PoseDistKind::AupsMixture => self.mixture_ratio,
        };
        uniform.iter().zip(&empirical).map(|(u, e)| ratio * u + (1.0 - ratio) * e).collect()
    }

    fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> CameraPose {
        let (ylo, yhi) = self.uniform_yaw_range;
        let (plo, phi) = self.uniform_pitch_range;
        let yaw = ylo + (yhi - ylo) * rng.random::<f64>();
        let pitch = plo + (phi - plo) * rng.random::<f64>();
        pose_from_angles(yaw, pitch, self.radius, self.focal).expect("validated uniform ranges")
    }

    fn sample_dataset<R: Rng + ?Sized>(&self, rng: &mut R) -> CameraPose {
        self.dataset_poses[rng.random_range(0..self.dataset_poses.len())]
    }
}

/// Draws one pose and reports which component produced it.
pub fn sample_pose_tagged<R: Rng + ?Sized>(dist: &PoseDistribution, rng: &mut R) -> Result<(CameraPose, PoseSource)> {
    dist.validate()?;
    Ok(match dist.kind {
        PoseDistKind::DatasetEmpirical => (dist.sample_dataset(rng), PoseSource::Dataset),
        PoseDistKind::Uniform => (dist.sample_uniform(rng), PoseSource::Uniform),
        PoseDistKind::AupsMixture => {
            if rng.random::<f64>() < dist.mixture_ratio {
                (dist.sample_uniform(rng), PoseSource::Uniform)
            } else {
                (dist.sample_dataset(rng), PoseSource::Dataset)
            }
        }
    })
}

pub fn sample_pose<R: Rng + ?Sized>(dist: &PoseDistribution, rng: &mut R) -> Result<CameraPose> {
    sample_pose_tagged(dist, rng).map(|(p, _)| p)
}

/// Draws a pose from `dist` at least `min_separation` radians away from `positive`.
pub fn sample_negative_pose<R: Rng + ?Sized>(
    positive: &CameraPose,
    dist: &PoseDistribution,
    min_separation: f64,
    rng: &mut R,
) -> Result<CameraPose> {
    if min_separation <= 0.0 {
        return Err(Error::Config("negative-pose separation must be positive".into()));
    }
    for _ in 0..NEGATIVE_POSE_MAX_TRIES {
        let candidate = sample_pose(dist, rng)?;
        if angular_distance(&candidate, positive) >= min_separation {
            return Ok(candidate);
        }
    }
    Err(Error::Sampling(format!(
        "no pose at least {:.2} deg from (yaw {:.3}, pitch {:.3}) after {NEGATIVE_POSE_MAX_TRIES} draws",
        min_separation.to_degrees(),
        positive.yaw,
        positive.pitch
    )))
}

/// One ray per pixel, row-major over (y, x).
#[derive(Debug, Clone)]
pub struct RayBundle {
    pub resolution: usize,
    pub origins: Vec<[f64; 3]>,
    pub directions: Vec<[f64; 3]>,
    pub near: f64,
    pub far: f64,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn with_range(mut self, near: f64, far: f64) -> RayBundle {
        assert!(near < far, "near {near} must be below far {far}");
        self.near = near;
        self.far = far;
        self
    }

    pub fn point(&self, ray: usize, t: f64) -> [f64; 3] {
        let o = self.origins[ray];
        let d = self.directions[ray];
        [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
    }
}

/// Pinhole rays through pixel centers for an arbitrary camera-to-world matrix.
pub fn generate_rays_from_extrinsic(extrinsic: &[[f64; 4]; 4], intrinsic: &Matrix3<f64>, resolution: usize) -> RayBundle {
    assert!(resolution >= 2, "resolution must be at least 2");
    let rot = Matrix3::from_fn(|r, c| extrinsic[r][c]);
    let origin = [extrinsic[0][3], extrinsic[1][3], extrinsic[2][3]];
    let (fx, fy, cx, cy) = (intrinsic[(0, 0)], intrinsic[(1, 1)], intrinsic[(0, 2)], intrinsic[(1, 2)]);
    let n = resolution * resolution;
    let mut origins = Vec::with_capacity(n);
    let mut directions = Vec::with_capacity(n);
    for iy in 0..resolution {
        for ix in 0..resolution {
            let u = (ix as f64 + 0.5) / resolution as f64;
            let v = (iy as f64 + 0.5) / resolution as f64;
            let cam = Vector3::new((u - cx) / fx, -(v - cy) / fy, -1.0);
            let d = (rot * cam).normalize();
            origins.push(origin);
            directions.push([d.x, d.y, d.z]);
        }
    }
    let dist = Vector3::from(origin).norm();
    RayBundle {
        resolution,
        origins,
        directions,
        near: (dist - SCENE_BOUND).max(1e-3),
        far: dist + SCENE_BOUND,
    }
}

pub fn generate_rays(pose: &CameraPose, resolution: usize) -> RayBundle {
    generate_rays_from_extrinsic(&pose.extrinsic(), &pose.intrinsic(), resolution)
}

const POSE_CSV_HEADER: [&str; 30] = [
    "image_id", "yaw_rad", "pitch_rad", "radius", "focal", "e00", "e01", "e02", "e03", "e10", "e11", "e12", "e13", "e20",
    "e21", "e22", "e23", "e30", "e31", "e32", "e33", "k00", "k01", "k02", "k10", "k11", "k12", "k20", "k21", "k22",
];

/// Writes `(image_id, pose)` records in the normative column order.
pub fn write_pose_csv(path: &Path, records: &[(String, CameraPose)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let to_err = |e: csv::Error| Error::format(path, e);
    w.write_record(POSE_CSV_HEADER).map_err(to_err)?;
    for (id, pose) in records {
        let mut row = vec![id.clone()];
        row.extend([pose.yaw, pose.pitch, pose.radius, pose.focal].iter().map(|v| v.to_string()));
        row.extend(pose.flat.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a pose CSV. The 25 stored matrix values are kept verbatim.
pub fn read_pose_csv(path: &Path) -> Result<Vec<(String, CameraPose)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers().map_err(|e| Error::format(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != POSE_CSV_HEADER {
        return Err(Error::format(path, "unexpected pose CSV header"));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        let num = |i: usize| -> Result<f64> {
            rec[i].trim().parse::<f64>().map_err(|e| Error::format(path, format!("row {}: column {}: {e}", line + 1, POSE_CSV_HEADER[i])))
        };
        let mut flat = [0.0; 25];
        for (k, v) in flat.iter_mut().enumerate() {
            *v = num(5 + k)?;
        }
        let pose = CameraPose { yaw: num(1)?, pitch: num(2)?, radius: num(3)?, focal: num(4)?, flat };
        out.push((rec[0].to_string(), pose));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frontal_pose_sits_on_the_z_axis() {
        let p = pose_from_angles(0.0, 0.0, 2.7, 4.26).unwrap();
        assert_abs_diff_eq!(p.position(), Vector3::new(0.0, 0.0, 2.7), epsilon = 1e-12);
        // looks along -z towards the origin
        let forward = -p.rotation().column(2);
        assert_abs_diff_eq!(forward.into_owned(), Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-12);
    }

    #[test]
    fn quarter_turn_moves_camera_to_x_axis() {
        let p = pose_from_angles(FRAC_PI_2, 0.0, 2.7, 4.26).unwrap();
        assert_abs_diff_eq!(p.position(), Vector3::new(2.7, 0.0, 0.0), epsilon = 1e-12);
        let r = p.rotation();
        assert_abs_diff_eq!(r.transpose() * r, Matrix3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn out_of_range_angles_are_rejected() {
        assert!(matches!(pose_from_angles(1.7, 0.0, 2.7, 1.0), Err(Error::Range { what: "yaw", .. })));
        assert!(matches!(pose_from_angles(0.0, -0.9, 2.7, 1.0), Err(Error::Range { what: "pitch", .. })));
        assert!(pose_from_angles(0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn intrinsic_has_centered_principal_point() {
        let k = pose_from_angles(0.3, -0.1, 2.7, 4.26).unwrap().intrinsic();
        assert_eq!(k[(0, 1)], 0.0);
        assert_eq!((k[(0, 2)], k[(1, 2)]), (0.5, 0.5));
        assert!(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0);
    }

    #[test]
    fn singleton_support_always_returns_that_pose() {
        let frontal = CameraPose::frontal();
        let dist = PoseDistribution::dataset(Arc::new(vec![frontal]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_pose(&dist, &mut rng).unwrap(), frontal);
        }
    }

    #[test]
    fn negative_pose_fails_on_degenerate_support() {
        let frontal = CameraPose::frontal();
        let dist = PoseDistribution::dataset(Arc::new(vec![frontal]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = sample_negative_pose(&frontal, &dist, 10f64.to_radians(), &mut rng);
        assert!(matches!(err, Err(Error::Sampling(_))));
    }

    #[test]
    fn empty_dataset_is_a_config_error() {
        let dist = PoseDistribution::dataset(Arc::new(Vec::new()));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(sample_pose(&dist, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn pose_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.csv");
        let recs: Vec<_> = [(0.3, -0.1), (-1.2, 0.7), (0.0, 0.0)]
            .iter()
            .enumerate()
            .map(|(i, &(y, p))| (format!("{i:06}"), pose_from_angles(y, p, 2.7, 1.6).unwrap()))
            .collect();
        write_pose_csv(&path, &recs).unwrap();
        assert_eq!(read_pose_csv(&path).unwrap(), recs);
    }
}
