//! Blender-format datasets and analytic synthetic scenes.
//!
//! A synthetic scene is a plain-text file with one primitive per line:
//!
//! ```text
//! # shape   geometry                      density   linear colour      optional lobe
//! sphere    center=0,0,0 radius=0.5       sigma=40  colour=0.8,0.3,0.2 lobe_exp=16 lobe_colour=0.7,0.7,0.7 light=2,2,3
//! box       min=-1,-1,-1 max=1,1,1        sigma=1.5 colour=0.2,0.4,0.9
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{srgb_encode, write_atomic, CheckpointError};
use crate::evalviz::{read_png, write_png, EvalError, ImageBuffer};
use crate::sampling::{generate_rays, Camera, Ray, SamplingError};
use crate::vr_oracle::{composite, PointRadiance};

pub const BLENDER_NEAR: f64 = 2.0;
pub const BLENDER_FAR: f64 = 6.0;
/// Horizontal field of view of the Blender synthetic cameras.
pub const BLENDER_FOV_X: f64 = 0.6911112070083618;
pub const MIN_QUADRATURE: usize = 512;
pub const DEFAULT_QUADRATURE: usize = 1024;
/// Orbit radius of generated cameras.
pub const ORBIT_RADIUS: f64 = 4.0;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("frame {frame}: missing image {path}")]
    MissingFrame { frame: usize, path: PathBuf },
    #[error("dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Image(#[from] EvalError),
}

impl From<CheckpointError> for SceneError {
    fn from(e: CheckpointError) -> Self {
        SceneError::Image(EvalError::Checkpoint(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageBuffer>,
    pub split: Split,
    pub near: f64,
    pub far: f64,
}

impl SceneDataset {
    pub fn new(cameras: Vec<Camera>, images: Vec<ImageBuffer>, split: Split, near: f64, far: f64) -> Result<Self, SceneError> {
        if cameras.is_empty() || cameras.len() != images.len() {
            return Err(SceneError::Invalid(format!("{} cameras for {} images", cameras.len(), images.len())));
        }
        let (w, h) = (images[0].width(), images[0].height());
        for (i, (c, img)) in cameras.iter().zip(&images).enumerate() {
            if img.width() != w || img.height() != h || c.width != w || c.height != h {
                return Err(SceneError::Invalid(format!("view {i} is not {w}x{h}")));
            }
        }
        if !(0.0 < near && near < far) {
            return Err(SceneError::Invalid(format!("near {near}, far {far}")));
        }
        Ok(Self { cameras, images, split, near, far })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn width(&self) -> usize {
        self.images[0].width()
    }

    pub fn height(&self) -> usize {
        self.images[0].height()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    frames: Vec<FrameEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameEntry {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

fn matrix_from_rows(rows: &[[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|r, c| rows[r][c])
}

fn rows_from_matrix(m: &Matrix4<f64>) -> [[f64; 4]; 4] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

fn frame_image_path(dir: &Path, file_path: &str) -> PathBuf {
    let p = dir.join(file_path);
    if p.extension().is_some() && p.exists() {
        p
    } else {
        let mut s = p.into_os_string();
        s.push(".png");
        PathBuf::from(s)
    }
}

/// Reads `transforms_{split}.json` and its frames, compositing RGBA onto white
/// and box-downscaling by `downscale`.
pub fn load_blender(dir: &Path, split: Split, downscale: usize) -> Result<SceneDataset, SceneError> {
    let json_path = dir.join(format!("transforms_{}.json", split.name()));
    let text = std::fs::read_to_string(&json_path).map_err(|e| SceneError::Io { path: json_path.clone(), msg: e.to_string() })?;
    let tf: TransformsFile =
        serde_json::from_str(&text).map_err(|e| SceneError::Parse { path: json_path.clone(), msg: e.to_string() })?;
    if tf.frames.is_empty() {
        return Err(SceneError::Parse { path: json_path, msg: "no frames".into() });
    }
    let downscale = downscale.max(1);
    let mut cameras = Vec::with_capacity(tf.frames.len());
    let mut images = Vec::with_capacity(tf.frames.len());
    for (i, frame) in tf.frames.iter().enumerate() {
        let path = frame_image_path(dir, &frame.file_path);
        if !path.exists() {
            return Err(SceneError::MissingFrame { frame: i, path });
        }
        let img = read_png(&path)?.downscale(downscale)?;
        let focal = Camera::focal_from_fov(img.width(), tf.camera_angle_x);
        cameras.push(Camera::new(img.width(), img.height(), focal, matrix_from_rows(&frame.transform_matrix))?);
        images.push(img);
    }
    SceneDataset::new(cameras, images, split, BLENDER_NEAR, BLENDER_FAR)
}

/// Writes `transforms_{split}.json` plus `{split}/r_{i}.png` under `dir`.
pub fn save_blender(ds: &SceneDataset, dir: &Path) -> Result<(), SceneError> {
    let cam = &ds.cameras[0];
    let camera_angle_x = 2.0 * (0.5 * cam.width as f64 / cam.focal).atan();
    let mut frames = Vec::with_capacity(ds.len());
    for (i, (c, img)) in ds.cameras.iter().zip(&ds.images).enumerate() {
        let rel = format!("./{}/r_{i}", ds.split.name());
        write_png(img, &dir.join(format!("{rel}.png")))?;
        frames.push(FrameEntry { file_path: rel, transform_matrix: rows_from_matrix(&c.pose) });
    }
    let json = serde_json::to_string_pretty(&TransformsFile { camera_angle_x, frames }).expect("plain data serializes");
    write_atomic(&dir.join(format!("transforms_{}.json", ds.split.name())), json.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { center: Vector3<f64>, radius: f64 },
    Box { min: Vector3<f64>, max: Vector3<f64> },
}

/// Phong lobe lit by a point light.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lobe {
    pub exponent: f64,
    pub colour: [f64; 3],
    pub light: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub sigma: f64,
    pub colour: [f64; 3],
    pub lobe: Option<Lobe>,
}

impl Primitive {
    fn contains(&self, x: &Vector3<f64>) -> bool {
        match self.shape {
            Shape::Sphere { center, radius } => (x - center).norm_squared() <= radius * radius,
            Shape::Box { min, max } => (0..3).all(|k| min[k] <= x[k] && x[k] <= max[k]),
        }
    }

    fn normal(&self, x: &Vector3<f64>) -> Vector3<f64> {
        match self.shape {
            Shape::Sphere { center, .. } => (x - center).try_normalize(1e-12).unwrap_or(Vector3::z()),
            Shape::Box { min, max } => {
                let c = (min + max) / 2.0;
                let half = (max - min) / 2.0;
                let rel = (x - c).component_div(&half);
                let k = rel.iamax();
                let mut n = Vector3::zeros();
                n[k] = rel[k].signum();
                n
            }
        }
    }

    /// Entry and exit `t` of the ray, if it meets the primitive.
    fn hits(&self, ray: &Ray) -> Option<(f64, f64)> {
        let (o, d) = (ray.origin, ray.direction);
        match self.shape {
            Shape::Sphere { center, radius } => {
                let oc = o - center;
                let a = d.norm_squared();
                let b = oc.dot(&d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                (disc >= 0.0).then(|| ((-b - disc.sqrt()) / a, (-b + disc.sqrt()) / a))
            }
            Shape::Box { min, max } => {
                let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    if d[k].abs() < 1e-15 {
                        if o[k] < min[k] || o[k] > max[k] {
                            return None;
                        }
                    } else {
                        let (t0, t1) = ((min[k] - o[k]) / d[k], (max[k] - o[k]) / d[k]);
                        lo = lo.max(t0.min(t1));
                        hi = hi.min(t0.max(t1));
                    }
                }
                (lo <= hi).then_some((lo, hi))
            }
        }
    }

    fn emitted(&self, x: &Vector3<f64>, view: &Vector3<f64>) -> [f64; 3] {
        let Some(lobe) = self.lobe else { return self.colour };
        let n = self.normal(x);
        let l = (lobe.light - x).try_normalize(1e-12).unwrap_or(n);
        let r = n * (2.0 * n.dot(&l)) - l;
        let spec = r.dot(&-view).max(0.0).powf(lobe.exponent);
        std::array::from_fn(|k| self.colour[k] + spec * lobe.colour[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>, String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{s}`: {e}"))).collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, z] => Ok(Vector3::new(x, y, z)),
        _ => Err(format!("`{s}` is not three comma-separated numbers")),
    }
}

fn parse_colour(s: &str) -> Result<[f64; 3], String> {
    let v = parse_vec3(s)?;
    if v.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(format!("colour `{s}` outside [0, 1]"));
    }
    Ok([v.x, v.y, v.z])
}

fn parse_primitive(line: &str) -> Result<Primitive, String> {
    let mut words = line.split_whitespace();
    let kind = words.next().ok_or("empty record")?;
    let mut fields = std::collections::BTreeMap::new();
    for w in words {
        let (k, v) = w.split_once('=').ok_or_else(|| format!("expected key=value, got `{w}`"))?;
        if fields.insert(k, v).is_some() {
            return Err(format!("duplicate key `{k}`"));
        }
    }
    let mut take = |k: &str| fields.remove(k).ok_or_else(|| format!("{kind}: missing `{k}`"));
    let shape = match kind {
        "sphere" => {
            let center = parse_vec3(take("center")?)?;
            let radius: f64 = take("radius")?.parse().map_err(|e| format!("radius: {e}"))?;
            if !(radius > 0.0) {
                return Err(format!("radius {radius} must be positive"));
            }
            Shape::Sphere { center, radius }
        }
        "box" => {
            let (min, max) = (parse_vec3(take("min")?)?, parse_vec3(take("max")?)?);
            if (0..3).any(|k| min[k] >= max[k]) {
                return Err("box min must be below max on every axis".into());
            }
            Shape::Box { min, max }
        }
        other => return Err(format!("unknown primitive `{other}`")),
    };
    let sigma: f64 = take("sigma")?.parse().map_err(|e| format!("sigma: {e}"))?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(format!("sigma {sigma} must be non-negative"));
    }
    let colour = parse_colour(take("colour")?)?;
    let lobe = match take("lobe_exp") {
        Ok(e) => Some(Lobe {
            exponent: e.parse().map_err(|e| format!("lobe_exp: {e}"))?,
            colour: parse_colour(take("lobe_colour")?)?,
            light: parse_vec3(take("light")?)?,
        }),
        Err(_) => None,
    };
    if let Some(k) = fields.keys().next() {
        return Err(format!("unknown key `{k}`"));
    }
    Ok(Primitive { shape, sigma, colour, lobe })
}

fn fmt_vec(v: &Vector3<f64>) -> String {
    format!("{},{},{}", v.x, v.y, v.z)
}

fn fmt_colour(c: &[f64; 3]) -> String {
    format!("{},{},{}", c[0], c[1], c[2])
}

impl SyntheticScene {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut primitives = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            primitives.push(parse_primitive(line).map_err(|e| format!("line {}: {e}", i + 1))?);
        }
        if primitives.is_empty() {
            return Err("scene has no primitives".into());
        }
        Ok(Self { primitives })
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path).map_err(|e| SceneError::Io { path: path.into(), msg: e.to_string() })?;
        Self::parse(&text).map_err(|msg| SceneError::Parse { path: path.into(), msg })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.primitives {
            match p.shape {
                Shape::Sphere { center, radius } => write!(s, "sphere center={} radius={radius}", fmt_vec(&center)),
                Shape::Box { min, max } => write!(s, "box min={} max={}", fmt_vec(&min), fmt_vec(&max)),
            }
            .expect("string write");
            write!(s, " sigma={} colour={}", p.sigma, fmt_colour(&p.colour)).expect("string write");
            if let Some(l) = p.lobe {
                write!(s, " lobe_exp={} lobe_colour={} light={}", l.exponent, fmt_colour(&l.colour), fmt_vec(&l.light))
                    .expect("string write");
            }
            s.push('\n');
        }
        s
    }

    /// Diffuse sphere, translucent box and specular sphere.
    pub fn default_scene() -> Self {
        Self::parse(
            "sphere center=-0.45,-0.1,0 radius=0.4 sigma=40 colour=0.8,0.3,0.15\n\
             box min=-0.25,-0.5,-0.7 max=0.25,0.5,-0.4 sigma=1.5 colour=0.15,0.35,0.9\n\
             sphere center=0.45,0.15,0.1 radius=0.38 sigma=40 colour=0.1,0.35,0.15 lobe_exp=12 lobe_colour=0.8,0.8,0.75 light=1.5,2.5,3\n",
        )
        .expect("built-in scene parses")
    }

    /// One opaque diffuse sphere at the origin.
    pub fn sphere_scene() -> Self {
        Self::parse("sphere center=0,0,0 radius=0.8 sigma=200 colour=0.7,0.45,0.2\n").expect("built-in scene parses")
    }

    /// Distance along the ray to the first primitive surface in front of the origin.
    pub fn first_hit(&self, ray: &Ray) -> Option<f64> {
        self.primitives
            .iter()
            .filter_map(|p| p.hits(ray))
            .filter(|&(_, t1)| t1 > 0.0)
            .map(|(t0, _)| t0.max(0.0))
            .min_by(f64::total_cmp)
            .map(|t| t * ray.direction.norm())
    }

    fn radiance(&self, x: &Vector3<f64>, view: &Vector3<f64>) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut c = [0.0; 3];
        for p in self.primitives.iter().filter(|p| p.sigma > 0.0 && p.contains(x)) {
            sigma += p.sigma;
            let e = p.emitted(x, view);
            (0..3).for_each(|k| c[k] += p.sigma * e[k]);
        }
        if sigma > 0.0 {
            c.iter_mut().for_each(|v| *v /= sigma);
        }
        (sigma, c)
    }
}

/// Ground-truth sRGB colour: dense quadrature over `[near, far]` with primitive
/// boundaries as extra edges, composited over white. `n_quad` below
/// [`MIN_QUADRATURE`] is raised to it.
pub fn synth_scene_gt(scene: &SyntheticScene, ray: &Ray, near: f64, far: f64, n_quad: usize) -> [f64; 3] {
    let n = n_quad.max(MIN_QUADRATURE);
    let mut edges: Vec<f64> = (0..=n).map(|i| near + (far - near) * i as f64 / n as f64).collect();
    for (t0, t1) in scene.primitives.iter().filter_map(|p| p.hits(ray)) {
        edges.extend([t0, t1].into_iter().filter(|t| near < *t && *t < far));
    }
    edges.sort_by(f64::total_cmp);
    edges.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let view = ray.view_dir();
    let points: Vec<PointRadiance> = edges
        .windows(2)
        .map(|w| {
            let (sigma, c) = scene.radiance(&ray.at(0.5 * (w[0] + w[1])), &view);
            PointRadiance::new(sigma, w[1] - w[0], c)
        })
        .collect();
    let opacity: f64 = crate::vr_oracle::weights(&points).expect("scene densities are validated").iter().sum();
    let fg = composite(&points).expect("scene densities are validated");
    fg.map(|v| srgb_encode(v + (1.0 - opacity)))
}

/// Camera-to-world pose at `eye` looking at the origin with world +z up.
pub fn look_at_origin(eye: Vector3<f64>) -> Matrix4<f64> {
    let back = eye.normalize();
    let up_world = if back.cross(&Vector3::z()).norm() < 1e-6 { Vector3::y() } else { Vector3::z() };
    let right = up_world.cross(&back).normalize();
    let up = back.cross(&right);
    let mut m = Matrix4::identity();
    for k in 0..3 {
        m[(k, 0)] = right[k];
        m[(k, 1)] = up[k];
        m[(k, 2)] = back[k];
        m[(k, 3)] = eye[k];
    }
    m
}

/// `n` poses on a jittered orbit of radius [`ORBIT_RADIUS`], elevations 20 to 40 degrees.
pub fn orbit_poses(n: usize, seed: u64) -> Vec<Matrix4<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / n as f64 + rng.random_range(-0.2..0.2);
            let el = rng.random_range(20f64..40.0).to_radians();
            look_at_origin(ORBIT_RADIUS * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()))
        })
        .collect()
}

/// Pose rotated about the world z axis.
pub fn rotate_azimuth(pose: &Matrix4<f64>, degrees: f64) -> Matrix4<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), degrees.to_radians()).to_homogeneous() * pose
}

/// Renders the scene from each pose at `res` x `res`.
pub fn render_views(scene: &SyntheticScene, poses: &[Matrix4<f64>], res: usize, split: Split) -> Result<SceneDataset, SceneError> {
    let focal = Camera::focal_from_fov(res, BLENDER_FOV_X);
    let pixels: Vec<(usize, usize)> = (0..res * res).map(|i| (i / res, i % res)).collect();
    let mut cameras = Vec::with_capacity(poses.len());
    let mut images = Vec::with_capacity(poses.len());
    for pose in poses {
        let cam = Camera::new(res, res, focal, *pose)?;
        let rays = generate_rays(&cam, &pixels)?;
        let px = rays.par_iter().map(|r| synth_scene_gt(scene, r, BLENDER_NEAR, BLENDER_FAR, DEFAULT_QUADRATURE)).collect();
        images.push(ImageBuffer::new(res, res, px)?);
        cameras.push(cam);
    }
    SceneDataset::new(cameras, images, split, BLENDER_NEAR, BLENDER_FAR)
}

/// `n_views` orbit views of the scene, deterministic per seed.
pub fn generate_synthetic_dataset(scene: &SyntheticScene, n_views: usize, res: usize, seed: u64) -> Result<SceneDataset, SceneError> {
    if n_views == 0 || res == 0 {
        return Err(SceneError::Invalid("need at least one view of at least one pixel".into()));
    }
    render_views(scene, &orbit_poses(n_views, seed), res, Split::Train)
}

/// Views of `train` rotated by `degrees` in azimuth.
pub fn nearby_views(scene: &SyntheticScene, train: &SceneDataset, degrees: f64, split: Split) -> Result<SceneDataset, SceneError> {
    let poses: Vec<_> = train.cameras.iter().map(|c| rotate_azimuth(&c.pose, degrees)).collect();
    render_views(scene, &poses, train.width(), split)
}
