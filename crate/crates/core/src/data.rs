//! Procedural multi-view dataset: analytic ray-traced renders of randomized
//! ellipsoid-and-blob scenes under a truncated-Gaussian pose distribution.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{generate_rays, pose_from_angles, read_pose_csv, write_pose_csv, CameraPose, DEFAULT_FOCAL, DEFAULT_RADIUS};
use crate::error::{Error, Result};
use crate::render::seeded_stream;

/// Yaw and pitch truncation limits of generated datasets, degrees.
pub const DATA_YAW_LIMIT_DEG: f64 = 50.0;
pub const DATA_PITCH_LIMIT_DEG: f64 = 15.0;
pub const DEFAULT_PITCH_STD_DEG: f64 = 5.0;
pub const DATA_RESOLUTION: usize = 32;

/// Side blobs must stay hidden from every view with |yaw| at or below this.
pub const HIDDEN_YAW_DEG: f64 = 20.0;

/// World-space direction towards the light.
const LIGHT: [f64; 3] = [0.45, 0.55, 0.70];
const AMBIENT: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub radius: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub semi_axes: [f64; 3],
    pub albedo: [f64; 3],
    /// The first blob sits on the side of the head; the rest on the front.
    pub blobs: Vec<Blob>,
    pub bg_top: [f64; 3],
    pub bg_bottom: [f64; 3],
}

/// Result of tracing a scene: colour, hit distance and which object was hit.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `(H, W, 3)` in [0, 1].
    pub rgb: Array3<f64>,
    /// `(H, W)` distance along the unit ray; `far` where nothing was hit.
    pub depth: Array2<f64>,
    /// `(H, W)`: -1 for background, 0 for the ellipsoid, `k + 1` for blob `k`.
    pub hit: Array2<i32>,
    pub near: f64,
    pub far: f64,
}

impl Trace {
    pub fn foreground_mask(&self) -> Array2<bool> {
        self.hit.mapv(|h| h >= 0)
    }
}

fn point_on_ellipsoid(axes: [f64; 3], azimuth: f64, elevation: f64) -> [f64; 3] {
    [axes[0] * elevation.cos() * azimuth.sin(), axes[1] * elevation.sin(), axes[2] * elevation.cos() * azimuth.cos()]
}

fn random_color<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

impl SceneSpec {
    /// Mean head without blobs; used as the reference shape for depth evaluation.
    pub fn template() -> SceneSpec {
        SceneSpec {
            seed: 0,
            semi_axes: [0.55, 0.68, 0.55],
            albedo: [0.7, 0.6, 0.5],
            blobs: Vec::new(),
            bg_top: [0.8, 0.85, 0.9],
            bg_bottom: [0.3, 0.35, 0.4],
        }
    }

    /// Random scene for `seed`, redrawn until its side blob is hidden from
    /// near-frontal views and visible from steep ones.
    pub fn random(seed: u64) -> SceneSpec {
        let mut rng = seeded_stream(seed, 0);
        loop {
            let spec = Self::draw(seed, &mut rng);
            if spec.side_blob_hidden_frontally() && spec.side_blob_visible_steeply() {
                return spec;
            }
        }
    }

    fn draw<R: Rng + ?Sized>(seed: u64, rng: &mut R) -> SceneSpec {
        let semi_axes = [rng.random_range(0.45..0.62), rng.random_range(0.58..0.78), rng.random_range(0.45..0.62)];
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let mut blobs = Vec::new();
        // side blob embedded behind the ear line
        let az = side * rng.random_range(135f64..150.0).to_radians();
        let el = rng.random_range(-15f64..15.0).to_radians();
        blobs.push(Blob {
            center: point_on_ellipsoid(semi_axes, az, el),
            radius: rng.random_range(0.12..0.18),
            color: random_color(rng, 0.0, 1.0),
        });
        // asymmetric frontal features
        for _ in 0..rng.random_range(1..=3) {
            let az = rng.random_range(-50f64..50.0).to_radians();
            let el = rng.random_range(-35f64..35.0).to_radians();
            blobs.push(Blob {
                center: point_on_ellipsoid(semi_axes, az, el),
                radius: rng.random_range(0.06..0.14),
                color: random_color(rng, 0.0, 1.0),
            });
        }
        SceneSpec {
            seed,
            semi_axes,
            albedo: random_color(rng, 0.35, 0.9),
            blobs,
            bg_top: random_color(rng, 0.6, 1.0),
            bg_bottom: random_color(rng, 0.0, 0.4),
        }
    }

    fn side_blob_pixels(&self, yaw_deg: f64, pitch_deg: f64) -> usize {
        let pose = pose_from_angles(yaw_deg.to_radians(), pitch_deg.to_radians(), DEFAULT_RADIUS, DEFAULT_FOCAL).expect("in range");
        trace_scene(self, &pose, DATA_RESOLUTION).hit.iter().filter(|&&h| h == 1).count()
    }

    fn side_blob_hidden_frontally(&self) -> bool {
        let mut yaw = -HIDDEN_YAW_DEG;
        while yaw <= HIDDEN_YAW_DEG {
            for pitch in [-15.0, -7.5, 0.0, 7.5, 15.0] {
                if self.side_blob_pixels(yaw, pitch) > 0 {
                    return false;
                }
            }
            yaw += 2.5;
        }
        true
    }

    fn side_blob_visible_steeply(&self) -> bool {
        let sign = self.blobs[0].center[0].signum();
        self.side_blob_pixels(sign * DATA_YAW_LIMIT_DEG, 0.0) >= 3
    }

    /// Whether every geometric element lies inside [-1, 1]^3.
    pub fn within_bounds(&self) -> bool {
        let a = self.semi_axes;
        let ok = a.iter().all(|&v| v > 0.0 && v <= 1.0);
        ok && self.blobs.iter().all(|b| b.center.iter().all(|&c| c.abs() + b.radius <= 1.0))
    }
}

/// Smallest positive root of `|o + t d - c|^2 = r^2` in a space scaled by `s`.
fn hit_scaled_sphere(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, s: &Vector3<f64>, r: f64) -> Option<f64> {
    let oc = (o - c).component_div(s);
    let ds = d.component_div(s);
    let a = ds.dot(&ds);
    let b = 2.0 * oc.dot(&ds);
    let cc = oc.dot(&oc) - r * r;
    let disc = b * b - 4.0 * a * cc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / (2.0 * a);
    let t1 = (-b + sq) / (2.0 * a);
    if t0 > 1e-9 {
        Some(t0)
    } else if t1 > 1e-9 {
        Some(t1)
    } else {
        None
    }
}

/// Exact ray casting with Lambertian shading under one directional light.
pub fn trace_scene(spec: &SceneSpec, pose: &CameraPose, resolution: usize) -> Trace {
    let rays = generate_rays(pose, resolution);
    let light = Vector3::from(LIGHT).normalize();
    let axes = Vector3::from(spec.semi_axes);
    let ones = Vector3::new(1.0, 1.0, 1.0);
    let mut rgb = Array3::zeros((resolution, resolution, 3));
    let mut depth = Array2::from_elem((resolution, resolution), rays.far);
    let mut hit = Array2::from_elem((resolution, resolution), -1);
    for iy in 0..resolution {
        let v = (iy as f64 + 0.5) / resolution as f64;
        for ix in 0..resolution {
            let r = iy * resolution + ix;
            let o = Vector3::from(rays.origins[r]);
            let d = Vector3::from(rays.directions[r]);
            let mut best: Option<(f64, i32)> = hit_scaled_sphere(&o, &d, &Vector3::zeros(), &axes, 1.0).map(|t| (t, 0));
            for (k, b) in spec.blobs.iter().enumerate() {
                if let Some(t) = hit_scaled_sphere(&o, &d, &Vector3::from(b.center), &ones, b.radius) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, k as i32 + 1));
                    }
                }
            }
            let color = match best {
                Some((t, id)) => {
                    let p = o + t * d;
                    let (normal, albedo) = if id == 0 {
                        (p.component_div(&axes.component_mul(&axes)).normalize(), spec.albedo)
                    } else {
                        let b = &spec.blobs[id as usize - 1];
                        ((p - Vector3::from(b.center)).normalize(), b.color)
                    };
                    let shade = AMBIENT + (1.0 - AMBIENT) * normal.dot(&light).max(0.0);
                    depth[[iy, ix]] = t;
                    hit[[iy, ix]] = id;
                    albedo.map(|a| (a * shade).clamp(0.0, 1.0))
                }
                None => {
                    let mut c = [0.0; 3];
                    for k in 0..3 {
                        c[k] = spec.bg_top[k] + (spec.bg_bottom[k] - spec.bg_top[k]) * v;
                    }
                    c
                }
            };
            for k in 0..3 {
                rgb[[iy, ix, k]] = color[k];
            }
        }
    }
    Trace { rgb, depth, hit, near: rays.near, far: rays.far }
}

/// `(rgb, depth)` of a scene seen from `pose`.
pub fn render_scene_analytic(spec: &SceneSpec, pose: &CameraPose, resolution: usize) -> (Array3<f64>, Array2<f64>) {
    let t = trace_scene(spec, pose, resolution);
    (t.rgb, t.depth)
}

/// Draws from `Normal(0, std)` restricted to `[-limit, limit]`.
pub fn truncated_normal<R: Rng + ?Sized>(std: f64, limit: f64, rng: &mut R) -> f64 {
    if std <= 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    loop {
        let x = normal.sample(rng);
        if x.abs() <= limit {
            return x;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub resolution: usize,
    pub seed: u64,
    pub yaw_std_rad: f64,
    pub pitch_std_rad: f64,
    pub yaw_limit_rad: f64,
    pub pitch_limit_rad: f64,
    pub radius: f64,
    pub focal: f64,
    pub images_dir: String,
    pub depth_dir: String,
    pub poses_csv: String,
    pub scene_seeds: Vec<u64>,
}

pub fn image_id(i: usize) -> String {
    format!("{i:06}")
}

/// Seed and pose of image `i` of a dataset generated with `seed`.
fn image_draw(seed: u64, i: usize, yaw_std: f64, pitch_std: f64) -> (u64, CameraPose) {
    let mut rng = seeded_stream(seed, 1 + i as u64);
    let scene_seed = rng.random::<u64>();
    let yaw = truncated_normal(yaw_std, DATA_YAW_LIMIT_DEG.to_radians(), &mut rng);
    let pitch = truncated_normal(pitch_std, DATA_PITCH_LIMIT_DEG.to_radians(), &mut rng);
    (scene_seed, pose_from_angles(yaw, pitch, DEFAULT_RADIUS, DEFAULT_FOCAL).expect("within limits"))
}

/// Poses a dataset with these parameters would contain, without rendering.
pub fn dataset_poses(n_images: usize, yaw_std: f64, pitch_std: f64, seed: u64) -> Vec<CameraPose> {
    (0..n_images).map(|i| image_draw(seed, i, yaw_std, pitch_std).1).collect()
}

pub fn write_png(path: &Path, rgb: &Array3<f64>) -> Result<()> {
    let (h, w, _) = rgb.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |k| (rgb[[y as usize, x as usize, k]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| Error::format(path, e))
}

pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| Error::format(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, k)| img.get_pixel(x as u32, y as u32)[k] as f64 / 255.0))
}

fn write_depth(path: &Path, depth: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for v in depth.iter() {
        w.write_all(&(*v as f32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_depth(path: &Path, resolution: usize) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    if bytes.len() != resolution * resolution * 4 {
        return Err(Error::format(path, format!("expected {} bytes of f32 depth, found {}", resolution * resolution * 4, bytes.len())));
    }
    let vals = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok(Array2::from_shape_vec((resolution, resolution), vals).expect("checked length"))
}

/// Renders `n_images` scenes into `out_dir` and writes the manifest.
pub fn generate_dataset(n_images: usize, yaw_std: f64, pitch_std: f64, out_dir: &Path, seed: u64) -> Result<DatasetManifest> {
    if !(yaw_std >= 0.0 && pitch_std >= 0.0) {
        return Err(Error::Config("pose standard deviations must be non-negative".into()));
    }
    let images = out_dir.join("images");
    let depths = out_dir.join("depth");
    for d in [out_dir, &images, &depths] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut records = Vec::with_capacity(n_images);
    let mut scene_seeds = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let (scene_seed, pose) = image_draw(seed, i, yaw_std, pitch_std);
        let spec = SceneSpec::random(scene_seed);
        let (rgb, depth) = render_scene_analytic(&spec, &pose, DATA_RESOLUTION);
        let id = image_id(i);
        write_png(&images.join(format!("{id}.png")), &rgb)?;
        write_depth(&depths.join(format!("{id}.f32")), &depth)?;
        records.push((id, pose));
        scene_seeds.push(scene_seed);
    }
    write_pose_csv(&out_dir.join("poses.csv"), &records)?;
    let manifest = DatasetManifest {
        count: n_images,
        resolution: DATA_RESOLUTION,
        seed,
        yaw_std_rad: yaw_std,
        pitch_std_rad: pitch_std,
        yaw_limit_rad: DATA_YAW_LIMIT_DEG.to_radians(),
        pitch_limit_rad: DATA_PITCH_LIMIT_DEG.to_radians(),
        radius: DEFAULT_RADIUS,
        focal: DEFAULT_FOCAL,
        images_dir: "images".into(),
        depth_dir: "depth".into(),
        poses_csv: "poses.csv".into(),
        scene_seeds,
    };
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// One loaded training example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `(H, W, 3)` in [0, 1].
    pub image: Array3<f64>,
    pub pose: CameraPose,
    pub depth: Array2<f64>,
}

/// A dataset directory whose manifest and pose table have been read and checked.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub entries: Vec<(String, CameraPose)>,
}

/// Accepts either the dataset directory or its `manifest.json`.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (root, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join("manifest.json"))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e))?;
    let poses_path = root.join(&manifest.poses_csv);
    let entries = read_pose_csv(&poses_path)?;
    if entries.len() != manifest.count {
        return Err(Error::format(&poses_path, format!("{} pose rows but the manifest lists {} images", entries.len(), manifest.count)));
    }
    Ok(Dataset { root, manifest, entries })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn poses(&self) -> Vec<CameraPose> {
        self.entries.iter().map(|(_, p)| *p).collect()
    }

    pub fn get(&self, index: usize) -> Result<Sample> {
        let (id, pose) = &self.entries[index];
        let image_path = self.root.join(&self.manifest.images_dir).join(format!("{id}.png"));
        let image = read_png(&image_path)?;
        let r = self.manifest.resolution;
        if image.dim() != (r, r, 3) {
            return Err(Error::format(&image_path, format!("expected {r}x{r} RGB, found {:?}", image.dim())));
        }
        let depth = read_depth(&self.root.join(&self.manifest.depth_dir).join(format!("{id}.f32")), r)?;
        Ok(Sample { id: id.clone(), image, pose: *pose, depth })
    }

    /// Indices in a seeded random order.
    pub fn shuffled_order(&self, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut seeded_stream(seed, 0));
        order
    }

    /// Streams samples in file order, or shuffled under `seed`.
    pub fn iter(&self, shuffle_seed: Option<u64>) -> impl Iterator<Item = Result<Sample>> + '_ {
        let order = match shuffle_seed {
            Some(s) => self.shuffled_order(s),
            None => (0..self.len()).collect(),
        };
        order.into_iter().map(move |i| self.get(i))
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        self.iter(None).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miss_shows_background_at_far() {
        let spec = SceneSpec { blobs: Vec::new(), semi_axes: [0.1, 0.1, 0.1], ..SceneSpec::template() };
        let t = trace_scene(&spec, &CameraPose::frontal(), 16);
        assert_eq!(t.hit[[0, 0]], -1);
        assert_eq!(t.depth[[0, 0]], t.far);
        let v = 0.5 / 16.0;
        for k in 0..3 {
            let expect = spec.bg_top[k] + (spec.bg_bottom[k] - spec.bg_top[k]) * v;
            assert!((t.rgb[[0, 0, k]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_center_depth_is_exact() {
        let r = 0.6;
        let spec = SceneSpec { blobs: Vec::new(), semi_axes: [r, r, r], ..SceneSpec::template() };
        let pose = pose_from_angles(0.0, 0.0, 2.7, 1.6).unwrap();
        let (_, depth) = render_scene_analytic(&spec, &pose, 33);
        assert!((depth[[16, 16]] - (2.7 - r)).abs() < 1e-12);
    }

    #[test]
    fn random_scenes_fit_the_unit_cube() {
        for seed in 0..20 {
            let s = SceneSpec::random(seed);
            assert!(s.within_bounds(), "seed {seed}");
            assert!((2..=4).contains(&s.blobs.len()));
        }
    }

    #[test]
    fn degenerate_yaw_spread_gives_frontal_poses() {
        assert!(dataset_poses(50, 0.0, 0.0, 3).iter().all(|p| p.yaw == 0.0 && p.pitch == 0.0));
    }
}
