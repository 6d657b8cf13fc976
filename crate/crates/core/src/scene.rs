//! Synthetic monocular dynamic scenes with analytic ground truth.
//!
//! A [`SceneSpec`] describes a handful of flat-shaded primitives moving along
//! closed-form trajectories inside a bounding box, observed by a single camera
//! that orbits the box (one pose per timestamp). [`generate`] ray-traces the
//! frames; [`GroundTruthOracle`] answers occupancy and velocity queries at any
//! `(x, t)` from the same description.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{self, Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bbox {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn unit() -> Self {
        Self::new([-1.0; 3], [1.0; 3])
    }

    pub fn extent(&self) -> Vec3 {
        math::sub(self.max, self.min)
    }

    pub fn center(&self) -> Vec3 {
        math::scale(math::add(self.min, self.max), 0.5)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn clamp(&self, p: Vec3) -> Vec3 {
        std::array::from_fn(|a| p[a].clamp(self.min[a], self.max[a]))
    }

    pub fn is_degenerate(&self) -> bool {
        (0..3).any(|a| !(self.max[a] > self.min[a]))
    }
}

/// Pinhole camera. `rotation` maps camera axes to world axes (columns are the
/// camera's right, down and forward directions); pixel `(px, py)` looks
/// through its center `(px + 0.5, py + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub position: Vec3,
    pub focal_px: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraPose {
    pub fn new(rotation: Mat3, position: Vec3, focal_px: f64, width: usize, height: usize) -> Result<Self> {
        let rt = math::transpose(&rotation);
        for i in 0..3 {
            for j in 0..3 {
                let e = math::dot(rt[i], rt[j]) - if i == j { 1.0 } else { 0.0 };
                if e.abs() > 1e-6 {
                    return Err(Error::InvalidArgument("camera rotation is not orthonormal".into()));
                }
            }
        }
        if (math::det(&rotation) - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("camera rotation has determinant != +1".into()));
        }
        if !(focal_px > 0.0) || width == 0 || height == 0 {
            return Err(Error::InvalidArgument("camera intrinsics must be positive".into()));
        }
        Ok(Self {
            rotation,
            position,
            focal_px,
            width,
            height,
        })
    }

    /// Camera at `position` looking at `target` with world `+y` up.
    pub fn look_at(position: Vec3, target: Vec3, focal_px: f64, width: usize, height: usize) -> Result<Self> {
        let forward = math::normalize(math::sub(target, position));
        let right = math::normalize(math::cross(forward, [0.0, 1.0, 0.0]));
        let down = math::cross(forward, right);
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Self::new(rotation, position, focal_px, width, height)
    }

    pub fn forward(&self) -> Vec3 {
        [self.rotation[0][2], self.rotation[1][2], self.rotation[2][2]]
    }

    /// Origin and unit direction of the ray through pixel `(px, py)`.
    pub fn ray_for_pixel(&self, px: usize, py: usize) -> Result<(Vec3, Vec3)> {
        if px >= self.width || py >= self.height {
            return Err(Error::PixelOutOfBounds {
                x: px,
                y: py,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.ray_through(px as f64 + 0.5, py as f64 + 0.5))
    }

    /// Ray through continuous image coordinates `(u, v)`.
    pub fn ray_through(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        let cam = [
            (u - self.width as f64 / 2.0) / self.focal_px,
            (v - self.height as f64 / 2.0) / self.focal_px,
            1.0,
        ];
        (self.position, math::normalize(math::mat_vec(&self.rotation, cam)))
    }

    /// Continuous image coordinates of a world point, if it is in front of
    /// the camera.
    pub fn project(&self, x: Vec3) -> Option<(f64, f64)> {
        let rel = math::sub(x, self.position);
        let cam = math::mat_vec(&math::transpose(&self.rotation), rel);
        if cam[2] <= 1e-9 {
            return None;
        }
        Some((
            self.focal_px * cam[0] / cam[2] + self.width as f64 / 2.0,
            self.focal_px * cam[1] / cam[2] + self.height as f64 / 2.0,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { radius: f64 },
    Box { half_extents: Vec3 },
}

impl Primitive {
    /// Half extent of the primitive's axis-aligned bounds.
    pub fn half_extents(&self) -> Vec3 {
        match *self {
            Primitive::Sphere { radius } => [radius; 3],
            Primitive::Box { half_extents } => half_extents,
        }
    }

    /// Point-in-primitive test for a primitive centered at the origin.
    pub fn contains(&self, local: Vec3) -> bool {
        match *self {
            Primitive::Sphere { radius } => math::dot(local, local) <= radius * radius,
            Primitive::Box { half_extents } => (0..3).all(|a| local[a].abs() <= half_extents[a]),
        }
    }

    /// Nearest positive hit distance and outward normal.
    fn intersect(&self, center: Vec3, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3)> {
        match *self {
            Primitive::Sphere { radius } => {
                let oc = math::sub(origin, center);
                let b = math::dot(oc, dir);
                let c = math::dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > 1e-9 { -b - sq } else { -b + sq };
                if t <= 1e-9 {
                    return None;
                }
                let hit = math::add(origin, math::scale(dir, t));
                Some((t, math::normalize(math::sub(hit, center))))
            }
            Primitive::Box { half_extents } => {
                let lo = math::sub(center, half_extents);
                let hi = math::add(center, half_extents);
                let (t0, t1) = math::ray_box(origin, dir, lo, hi)?;
                let t = if t0 > 1e-9 { t0 } else { t1 };
                let hit = math::add(origin, math::scale(dir, t));
                let local = math::sub(hit, center);
                let mut axis = 0;
                let mut best = f64::INFINITY;
                for a in 0..3 {
                    let d = (half_extents[a] - local[a].abs()).abs();
                    if d < best {
                        best = d;
                        axis = a;
                    }
                }
                let mut n = [0.0; 3];
                n[axis] = local[axis].signum();
                Some((t, n))
            }
        }
    }
}

/// Motion of a body's center over `t in [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Static { center: Vec3 },
    /// `start + t * velocity`.
    Linear { start: Vec3, velocity: Vec3 },
    /// Circle in the horizontal (x, z) plane: `turns` revolutions over the
    /// unit time interval, starting at angle `phase` (radians).
    Circular { center: Vec3, radius: f64, turns: f64, phase: f64 },
    /// Straight motion reflected off the bounding box walls (inset by the
    /// body's half extents). At an impact instant the reported velocity is
    /// the post-impact one.
    Bounce { start: Vec3, velocity: Vec3 },
}

fn fold_axis(start: f64, vel: f64, t: f64, lo: f64, hi: f64) -> (f64, f64) {
    let len = hi - lo;
    if vel == 0.0 || len <= 0.0 {
        return (start, 0.0);
    }
    let u = (start + vel * t - lo) / len;
    let m = u.rem_euclid(2.0);
    if m == 0.0 {
        (lo, vel.abs())
    } else if m == 1.0 {
        (hi, -vel.abs())
    } else if m < 1.0 {
        (lo + m * len, vel)
    } else {
        (hi - (m - 1.0) * len, -vel)
    }
}

impl Trajectory {
    pub fn position(&self, t: f64, half: Vec3, bbox: &Bbox) -> Vec3 {
        match *self {
            Trajectory::Static { center } => center,
            Trajectory::Linear { start, velocity } => math::add(start, math::scale(velocity, t)),
            Trajectory::Circular {
                center,
                radius,
                turns,
                phase,
            } => {
                let a = phase + std::f64::consts::TAU * turns * t;
                [center[0] + radius * a.cos(), center[1], center[2] + radius * a.sin()]
            }
            Trajectory::Bounce { start, velocity } => std::array::from_fn(|ax| {
                fold_axis(start[ax], velocity[ax], t, bbox.min[ax] + half[ax], bbox.max[ax] - half[ax]).0
            }),
        }
    }

    pub fn velocity(&self, t: f64, half: Vec3, bbox: &Bbox) -> Vec3 {
        match *self {
            Trajectory::Static { .. } => [0.0; 3],
            Trajectory::Linear { velocity, .. } => velocity,
            Trajectory::Circular {
                radius,
                turns,
                phase,
                ..
            } => {
                let w = std::f64::consts::TAU * turns;
                let a = phase + w * t;
                [-radius * w * a.sin(), 0.0, radius * w * a.cos()]
            }
            Trajectory::Bounce { start, velocity } => std::array::from_fn(|ax| {
                fold_axis(start[ax], velocity[ax], t, bbox.min[ax] + half[ax], bbox.max[ax] - half[ax]).1
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub name: String,
    pub primitive: Primitive,
    pub albedo: [f64; 3],
    pub trajectory: Trajectory,
}

impl Body {
    pub fn center_at(&self, t: f64, bbox: &Bbox) -> Vec3 {
        self.trajectory.position(t, self.primitive.half_extents(), bbox)
    }

    pub fn velocity_at(&self, t: f64, bbox: &Bbox) -> Vec3 {
        self.trajectory.velocity(t, self.primitive.half_extents(), bbox)
    }

    pub fn contains(&self, x: Vec3, t: f64, bbox: &Bbox) -> bool {
        self.primitive.contains(math::sub(x, self.center_at(t, bbox)))
    }

    pub fn is_dynamic(&self) -> bool {
        !matches!(self.trajectory, Trajectory::Static { .. })
    }
}

/// Orbiting camera at a fixed elevation around the bounding-box center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPath {
    pub radius: f64,
    pub elevation_deg: f64,
    pub start_azimuth_deg: f64,
    /// Total azimuth swept from the first to the last frame.
    pub sweep_deg: f64,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraPath {
    pub fn focal_px(&self) -> f64 {
        self.width as f64 / 2.0 / (self.fov_deg.to_radians() / 2.0).tan()
    }

    pub fn pose_at(&self, frac: f64, target: Vec3) -> Result<CameraPose> {
        let az = (self.start_azimuth_deg + self.sweep_deg * frac).to_radians();
        let el = self.elevation_deg.to_radians();
        let pos = [
            target[0] + self.radius * el.cos() * az.sin(),
            target[1] + self.radius * el.sin(),
            target[2] + self.radius * el.cos() * az.cos(),
        ];
        CameraPose::look_at(pos, target, self.focal_px(), self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub bodies: Vec<Body>,
    pub background: [f64; 3],
    pub bbox: Bbox,
    pub frames: usize,
    pub camera: CameraPath,
}

/// Fixed light direction for the Lambert term.
const LIGHT_DIR: Vec3 = [0.371_390_676_354_103_7, 0.742_781_352_708_207_4, 0.557_086_014_531_155_5];
const AMBIENT: f64 = 0.4;

pub const PRESETS: [&str; 3] = ["fall", "orbit", "bounce"];

impl SceneSpec {
    /// Shipped presets of increasing motion complexity: `fall` (linear),
    /// `orbit` (circular) and `bounce` (reflected piecewise-linear). Each has
    /// one moving red ball and a static blue box.
    pub fn preset(name: &str) -> Result<Self> {
        let ball = |trajectory| Body {
            name: "ball".into(),
            primitive: Primitive::Sphere { radius: 0.25 },
            albedo: [0.9, 0.15, 0.1],
            trajectory,
        };
        let block = Body {
            name: "block".into(),
            primitive: Primitive::Box {
                half_extents: [0.3, 0.3, 0.3],
            },
            albedo: [0.15, 0.3, 0.85],
            trajectory: Trajectory::Static {
                center: [0.45, -0.6, -0.4],
            },
        };
        let mover = match name {
            "fall" => ball(Trajectory::Linear {
                start: [-0.3, 0.65, 0.2],
                velocity: [0.0, -1.2, 0.0],
            }),
            "orbit" => ball(Trajectory::Circular {
                center: [0.0, 0.2, 0.0],
                radius: 0.5,
                turns: 1.0,
                phase: 0.0,
            }),
            "bounce" => ball(Trajectory::Bounce {
                start: [-0.4, 0.5, 0.3],
                velocity: [0.9, -2.6, -0.4],
            }),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown preset {other:?} (expected one of {PRESETS:?})"
                )))
            }
        };
        Ok(Self {
            name: name.into(),
            bodies: vec![mover, block],
            background: [1.0, 1.0, 1.0],
            bbox: Bbox::unit(),
            frames: 60,
            camera: CameraPath {
                radius: 3.2,
                elevation_deg: 20.0,
                start_azimuth_deg: 0.0,
                sweep_deg: 360.0,
                fov_deg: 50.0,
                width: 64,
                height: 64,
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::InvalidScene(format!("frame count {} < 2", self.frames)));
        }
        if self.bbox.is_degenerate() {
            return Err(Error::InvalidScene("degenerate bounding box".into()));
        }
        if self.camera.width == 0 || self.camera.height == 0 || !(self.camera.fov_deg > 0.0 && self.camera.fov_deg < 180.0) {
            return Err(Error::InvalidScene("invalid camera intrinsics".into()));
        }
        for body in &self.bodies {
            let half = body.primitive.half_extents();
            if half.iter().any(|&h| !(h > 0.0)) {
                return Err(Error::InvalidScene(format!("body {:?} has non-positive size", body.name)));
            }
            let inside = |c: Vec3| (0..3).all(|a| c[a] - half[a] >= self.bbox.min[a] - 1e-12 && c[a] + half[a] <= self.bbox.max[a] + 1e-12);
            let ok = match body.trajectory {
                Trajectory::Static { center } => inside(center),
                // convex: both endpoints inside means the whole segment is
                Trajectory::Linear { start, velocity } => inside(start) && inside(math::add(start, velocity)),
                Trajectory::Circular { center, radius, .. } => {
                    let r = [radius, 0.0, radius];
                    inside(math::add(center, r)) && inside(math::sub(center, r))
                }
                Trajectory::Bounce { start, .. } => inside(start),
            };
            if !ok {
                return Err(Error::InvalidScene(format!(
                    "trajectory of body {:?} leaves the bounding box",
                    body.name
                )));
            }
        }
        Ok(())
    }

    pub fn pose(&self, frame: usize) -> Result<CameraPose> {
        let frac = frame as f64 / (self.frames - 1) as f64;
        self.camera.pose_at(frac, self.bbox.center())
    }

    pub fn time(&self, frame: usize) -> f64 {
        frame as f64 / (self.frames - 1) as f64
    }

    /// Shades one ray at time `t`: nearest primitive hit with a Lambert
    /// term, or the background color.
    pub fn shade(&self, origin: Vec3, dir: Vec3, t: f64) -> [f64; 3] {
        let mut best: Option<(f64, &Body, Vec3)> = None;
        for body in &self.bodies {
            if let Some((d, n)) = body.primitive.intersect(body.center_at(t, &self.bbox), origin, dir) {
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, body, n));
                }
            }
        }
        match best {
            None => self.background,
            Some((_, body, n)) => {
                let lambert = AMBIENT + (1.0 - AMBIENT) * math::dot(n, LIGHT_DIR).max(0.0);
                std::array::from_fn(|c| (body.albedo[c] * lambert).clamp(0.0, 1.0))
            }
        }
    }

    pub fn render(&self, pose: &CameraPose, t: f64) -> Image {
        let mut img = Image::filled(pose.width, pose.height, [0.0; 3]);
        for y in 0..pose.height {
            for x in 0..pose.width {
                let (o, d) = pose.ray_through(x as f64 + 0.5, y as f64 + 0.5);
                let c = self.shade(o, d, t);
                img.set_pixel(x, y, [c[0] as f32, c[1] as f32, c[2] as f32]);
            }
        }
        img.quantized()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub file: String,
    pub image: Image,
    pub pose: CameraPose,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// A monocular video: one pose per strictly increasing timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub split: Split,
    pub bbox: Bbox,
    /// Scene description, when the dataset is synthetic.
    pub scene: Option<SceneSpec>,
}

pub fn generate(spec: &SceneSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let frames = (0..spec.frames)
        .into_par_iter()
        .map(|i| {
            let pose = spec.pose(i)?;
            let time = spec.time(i);
            Ok(Frame {
                file: format!("frames/{i:04}.png"),
                image: spec.render(&pose, time),
                pose,
                time,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n_test = (spec.frames / 10).max(1).min(spec.frames - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let test: BTreeSet<usize> = sample(&mut rng, spec.frames, n_test).into_iter().collect();
    let split = Split {
        train: (0..spec.frames).filter(|i| !test.contains(i)).collect(),
        test: test.into_iter().collect(),
    };
    Ok(Dataset {
        frames,
        split,
        bbox: spec.bbox,
        scene: Some(spec.clone()),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFrame {
    file: String,
    time: f64,
    rotation: [f64; 9],
    position: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    width: usize,
    height: usize,
    focal_px: f64,
    frames: Vec<ManifestFrame>,
    bbox: Bbox,
    split: Split,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCENE_FILE: &str = "scene.json";

impl Dataset {
    pub fn width(&self) -> usize {
        self.frames[0].pose.width
    }

    pub fn height(&self) -> usize {
        self.frames[0].pose.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::InvalidScene("dataset has no frames".into()));
        }
        for w in self.frames.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(Error::InvalidScene("timestamps must be strictly increasing".into()));
            }
        }
        let n = self.frames.len();
        if self.split.train.iter().chain(&self.split.test).any(|&i| i >= n) {
            return Err(Error::InvalidScene("split index out of range".into()));
        }
        Ok(())
    }

    /// Writes `frames/{index:04}.png`, `manifest.json` and, for synthetic
    /// data, `scene.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("frames")).map_err(|e| Error::io(dir, e))?;
        for f in &self.frames {
            f.image.save_png(&dir.join(&f.file))?;
        }
        let first = &self.frames[0].pose;
        let manifest = Manifest {
            width: first.width,
            height: first.height,
            focal_px: first.focal_px,
            frames: self
                .frames
                .iter()
                .map(|f| ManifestFrame {
                    file: f.file.clone(),
                    time: f.time,
                    rotation: std::array::from_fn(|i| f.pose.rotation[i / 3][i % 3]),
                    position: f.pose.position,
                })
                .collect(),
            bbox: self.bbox,
            split: self.split.clone(),
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        if let Some(scene) = &self.scene {
            write_json(&dir.join(SCENE_FILE), scene)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        let frames = m
            .frames
            .iter()
            .map(|f| {
                let rotation = std::array::from_fn(|r| std::array::from_fn(|c| f.rotation[r * 3 + c]));
                let pose = CameraPose::new(rotation, f.position, m.focal_px, m.width, m.height)
                    .map_err(|e| Error::format(&path, e))?;
                let image = Image::load_png(&dir.join(&f.file))?;
                if image.width != m.width || image.height != m.height {
                    return Err(Error::format(dir.join(&f.file), "image size differs from manifest"));
                }
                Ok(Frame {
                    file: f.file.clone(),
                    image,
                    pose,
                    time: f.time,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let scene_path = dir.join(SCENE_FILE);
        let scene = if scene_path.exists() {
            let text = fs::read_to_string(&scene_path).map_err(|e| Error::io(&scene_path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::format(&scene_path, e))?)
        } else {
            None
        };
        let ds = Dataset {
            frames,
            split: m.split,
            bbox: m.bbox,
            scene,
        };
        ds.validate().map_err(|e| Error::format(&path, e))?;
        Ok(ds)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Analytic occupancy and velocity queries against a scene description.
#[derive(Debug, Clone)]
pub struct GroundTruthOracle {
    spec: SceneSpec,
}

impl GroundTruthOracle {
    pub fn new(spec: SceneSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn occupancy(&self, x: Vec3, t: f64) -> bool {
        self.spec.bodies.iter().any(|b| b.contains(x, t, &self.spec.bbox))
    }

    /// `(occupied, velocity)`; velocity is that of the first body containing
    /// `x`, in bbox units per unit time, and zero in free space.
    pub fn velocity(&self, x: Vec3, t: f64) -> (bool, Vec3) {
        self.spec
            .bodies
            .iter()
            .find(|b| b.contains(x, t, &self.spec.bbox))
            .map_or((false, [0.0; 3]), |b| (true, b.velocity_at(t, &self.spec.bbox)))
    }

    /// Occupancy restricted to moving bodies.
    pub fn dynamic_occupancy(&self, x: Vec3, t: f64) -> bool {
        self.spec
            .bodies
            .iter()
            .any(|b| b.is_dynamic() && b.contains(x, t, &self.spec.bbox))
    }

    /// Distance from `x` to the nearest moving body's surface at time `t`
    /// (zero inside). Infinite when no body moves.
    pub fn distance_to_dynamic(&self, x: Vec3, t: f64) -> f64 {
        self.spec
            .bodies
            .iter()
            .filter(|b| b.is_dynamic())
            .map(|b| {
                let local = math::sub(x, b.center_at(t, &self.spec.bbox));
                match b.primitive {
                    Primitive::Sphere { radius } => (math::norm(local) - radius).max(0.0),
                    Primitive::Box { half_extents } => {
                        let q: Vec3 = std::array::from_fn(|a| (local[a].abs() - half_extents[a]).max(0.0));
                        math::norm(q)
                    }
                }
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_bodies() -> SceneSpec {
        let mut s = SceneSpec::preset("fall").unwrap();
        s.bodies.clear();
        s.frames = 4;
        s
    }

    #[test]
    fn empty_scene_is_background() {
        let ds = generate(&no_bodies(), 0).unwrap();
        for f in &ds.frames {
            assert!(f.image.data.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn static_red_sphere_in_center() {
        let mut s = no_bodies();
        s.bodies.push(Body {
            name: "red".into(),
            primitive: Primitive::Sphere { radius: 0.3 },
            albedo: [1.0, 0.0, 0.0],
            trajectory: Trajectory::Static { center: [0.0; 3] },
        });
        let ds = generate(&s, 1).unwrap();
        for f in &ds.frames {
            let [r, g, b] = f.image.pixel(32, 32);
            assert!(r > 0.3 && g == 0.0 && b == 0.0, "{r} {g} {b}");
        }
    }

    #[test]
    fn principal_ray_is_forward() {
        let pose = CameraPose::new(
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
            20.0,
            65,
            33,
        )
        .unwrap();
        let (_, d) = pose.ray_for_pixel(32, 16).unwrap();
        assert!(math::norm(math::sub(d, [0.0, 0.0, 1.0])) < 1e-12);
        assert!(matches!(pose.ray_for_pixel(65, 0), Err(Error::PixelOutOfBounds { .. })));
    }

    #[test]
    fn ninety_degree_fov_corner() {
        // focal = W / 2 gives a 90 degree horizontal field of view
        let w = 64;
        let pose = CameraPose::new(
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
            w as f64 / 2.0,
            w,
            w,
        )
        .unwrap();
        let (_, d) = pose.ray_through(0.0, w as f64 / 2.0);
        assert!((d[0] / d[2] + 45f64.to_radians().tan()).abs() < 1e-12);
        for (px, py) in [(0, 0), (63, 0), (17, 40)] {
            let (_, d) = pose.ray_for_pixel(px, py).unwrap();
            assert!((math::norm(d) - 1.0).abs() < 1e-6);
            // pixel-center convention: offset is (px + 0.5 - W/2) / f
            let expect = (px as f64 + 0.5 - 32.0) / 32.0;
            assert!((d[0] / d[2] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn look_at_is_proper_rotation() {
        let spec = SceneSpec::preset("orbit").unwrap();
        for i in [0, 7, 59] {
            let p = spec.pose(i).unwrap();
            assert!((math::det(&p.rotation) - 1.0).abs() < 1e-9);
            let c = p.project(spec.bbox.center()).unwrap();
            assert!((c.0 - 32.0).abs() < 1e-9 && (c.1 - 32.0).abs() < 1e-9);
        }
    }

    #[test]
    fn velocity_and_occupancy_queries() {
        let spec = SceneSpec::preset("fall").unwrap();
        let oracle = GroundTruthOracle::new(spec.clone());
        let ball = &spec.bodies[0];
        for t in [0.0, 0.3, 1.0] {
            let c = ball.center_at(t, &spec.bbox);
            assert_eq!(oracle.velocity(c, t), (true, [0.0, -1.2, 0.0]));
            assert!(oracle.occupancy(c, t));
        }
        let block_center = [0.45, -0.6, -0.4];
        assert_eq!(oracle.velocity(block_center, 0.5), (true, [0.0; 3]));
        assert_eq!(oracle.velocity([0.95, 0.95, 0.95], 0.5), (false, [0.0; 3]));
        assert!(!oracle.occupancy([-1.0, 1.0, 1.0], 0.2));
        // shell around the sphere surface
        let c = ball.center_at(0.4, &spec.bbox);
        for eps in [1e-6, -1e-6] {
            let x = math::add(c, [0.25 + eps, 0.0, 0.0]);
            assert_eq!(oracle.occupancy(x, 0.4), eps < 0.0);
        }
    }

    #[test]
    fn bounce_reflects_and_reports_post_impact_velocity() {
        let bbox = Bbox::unit();
        let half = [0.25; 3];
        let traj = Trajectory::Bounce {
            start: [0.0, 0.0, 0.0],
            velocity: [1.5, 0.0, 0.0],
        };
        // wall at x = 0.75 is reached at t = 0.5
        let p = traj.position(0.5, half, &bbox);
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert_eq!(traj.velocity(0.5, half, &bbox)[0], -1.5);
        assert_eq!(traj.velocity(0.25, half, &bbox)[0], 1.5);
        let p = traj.position(0.8, half, &bbox);
        assert!((p[0] - (0.75 - 1.5 * 0.3)).abs() < 1e-12);
        assert_eq!(traj.velocity(0.8, half, &bbox)[0], -1.5);
        // positions stay inside for the whole interval
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let p = traj.position(t, half, &bbox);
            assert!(p[0] >= -0.75 - 1e-12 && p[0] <= 0.75 + 1e-12);
        }
    }

    #[test]
    fn escaping_trajectory_rejected() {
        let mut s = SceneSpec::preset("fall").unwrap();
        s.bodies[0].trajectory = Trajectory::Linear {
            start: [0.0, 0.5, 0.0],
            velocity: [0.0, -2.0, 0.0],
        };
        assert!(matches!(generate(&s, 0), Err(Error::InvalidScene(_))));
        s.frames = 1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic_and_monocular() {
        let mut s = SceneSpec::preset("bounce").unwrap();
        s.frames = 8;
        let a = generate(&s, 3).unwrap();
        let b = generate(&s, 3).unwrap();
        assert_eq!(a, b);
        let times: Vec<f64> = a.frames.iter().map(|f| f.time).collect();
        assert!(times.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(a.split.train.len() + a.split.test.len(), 8);
    }

    #[test]
    fn linear_motion_projects_as_expected() {
        // static camera so that only the body moves
        let mut s = no_bodies();
        s.frames = 2;
        s.camera.sweep_deg = 0.0;
        s.bodies.push(Body {
            name: "ball".into(),
            primitive: Primitive::Sphere { radius: 0.2 },
            albedo: [0.0, 0.0, 0.0],
            trajectory: Trajectory::Linear {
                start: [-0.5, 0.3, 0.0],
                velocity: [1.0, -0.6, 0.0],
            },
        });
        let ds = generate(&s, 0).unwrap();
        for (f, t) in ds.frames.iter().zip([0.0, 1.0]) {
            let center = s.bodies[0].center_at(t, &s.bbox);
            let (u, v) = f.pose.project(center).unwrap();
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for y in 0..f.image.height {
                for x in 0..f.image.width {
                    if f.image.pixel(x, y)[0] < 0.5 {
                        sx += x as f64 + 0.5;
                        sy += y as f64 + 0.5;
                        n += 1.0;
                    }
                }
            }
            assert!(n > 0.0);
            assert!((sx / n - u).abs() < 1.0 && (sy / n - v).abs() < 1.0, "{} {} vs {u} {v}", sx / n, sy / n);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let mut s = SceneSpec::preset("orbit").unwrap();
        s.frames = 3;
        let ds = generate(&s, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds, back);
    }
}
