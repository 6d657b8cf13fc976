//! Image metrics for held-out views and the motion field error between
//! voxelized velocity fields.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{self, Vec3};
use crate::model::{Dynamics, Model};
use crate::ndiff::Real;
use crate::particles::{self, MotionNet, ParticleSet};
use crate::scene::{Bbox, Dataset, GroundTruthOracle};

/// `10 log10(1 / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(image: &Image, reference: &Image) -> Result<f64> {
    check_shapes(image, reference)?;
    let mse = image
        .data
        .iter()
        .zip(&reference.data)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / image.data.len().max(1) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{} image",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    w
}

fn gray(img: &Image) -> Vec<f64> {
    img.data.chunks(3).map(|c| (c[0] as f64 + c[1] as f64 + c[2] as f64) / 3.0).collect()
}

/// Mean SSIM over all full 11x11 Gaussian windows of the channel-mean
/// images.
pub fn ssim(image: &Image, reference: &Image) -> Result<f64> {
    check_shapes(image, reference)?;
    let (w, h) = (image.width, image.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "{w}x{h} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let (x, y) = (gray(image), gray(reference));
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - SSIM_WINDOW {
        for ox in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..SSIM_WINDOW {
                for i in 0..SSIM_WINDOW {
                    let wt = win[j * SSIM_WINDOW + i];
                    let p = (oy + j) * w + ox + i;
                    mx += wt * x[p];
                    my += wt * y[p];
                    xx += wt * x[p] * x[p];
                    yy += wt * y[p] * y[p];
                    xy += wt * x[p] * y[p];
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Velocities on the centers of a `res^3` voxel grid over `bbox`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub res: usize,
    pub bbox: Bbox,
    pub velocity: Vec<Vec3>,
    pub valid: Vec<bool>,
}

impl VelocityField {
    pub fn zeros(res: usize, bbox: Bbox) -> Self {
        let n = res * res * res;
        Self {
            res,
            bbox,
            velocity: vec![[0.0; 3]; n],
            valid: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.velocity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocity.is_empty()
    }

    pub fn center(&self, n: usize) -> Vec3 {
        let r = self.res;
        let ijk = [n / (r * r), (n / r) % r, n % r];
        let e = self.bbox.extent();
        std::array::from_fn(|a| self.bbox.min[a] + (ijk[a] as f64 + 0.5) * e[a] / r as f64)
    }

    pub fn centers(&self) -> Vec<Vec3> {
        (0..self.len()).map(|n| self.center(n)).collect()
    }

    /// Voxel containing `p`, if inside the box.
    pub fn voxel_of(&self, p: Vec3) -> Option<usize> {
        if !self.bbox.contains(p) {
            return None;
        }
        let e = self.bbox.extent();
        let r = self.res;
        let idx: [usize; 3] =
            std::array::from_fn(|a| (((p[a] - self.bbox.min[a]) / e[a] * r as f64).floor() as usize).min(r - 1));
        Some((idx[0] * r + idx[1]) * r + idx[2])
    }
}

fn check_protocol(t: f64, dt: f64, res: usize) -> Result<()> {
    if !(dt > 0.0) || !(0.0..=1.0).contains(&t) || t + dt > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument(format!("need dt > 0 and 0 <= t <= t + dt <= 1, got t={t} dt={dt}")));
    }
    if res == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    Ok(())
}

/// Per voxel, the mean finite-difference velocity of the alive particles
/// located in it at `t`; empty voxels are invalid and zero.
pub fn particle_velocity_field<T: Real>(
    set: &ParticleSet<T>,
    net: &MotionNet<T>,
    t: f64,
    dt: f64,
    res: usize,
    bbox: Bbox,
) -> Result<VelocityField> {
    check_protocol(t, dt, res)?;
    let p0 = particles::position_at(set, net, t)?;
    let p1 = particles::position_at(set, net, (t + dt).min(1.0))?;
    let mut f = VelocityField::zeros(res, bbox);
    let mut count = vec![0usize; f.len()];
    for i in set.alive_indices() {
        let i = i as usize;
        let a: Vec3 = std::array::from_fn(|k| p0.row(i)[k].to_f64());
        let b: Vec3 = std::array::from_fn(|k| p1.row(i)[k].to_f64());
        if let Some(n) = f.voxel_of(a) {
            let v = math::scale(math::sub(b, a), 1.0 / dt);
            f.velocity[n] = math::add(f.velocity[n], v);
            count[n] += 1;
        }
    }
    for (n, &c) in count.iter().enumerate() {
        if c > 0 {
            f.velocity[n] = math::scale(f.velocity[n], 1.0 / c as f64);
            f.valid[n] = true;
        }
    }
    Ok(f)
}

/// `(df(x, t) - df(x, t + dt)) / dt` at voxel centers, zeroed where
/// `occupied` is false.
pub fn deformation_velocity_field(
    df: impl Fn(&[Vec3], f64) -> Result<Vec<Vec3>>,
    t: f64,
    dt: f64,
    res: usize,
    bbox: Bbox,
    occupied: impl Fn(usize, Vec3) -> bool,
) -> Result<VelocityField> {
    check_protocol(t, dt, res)?;
    let mut f = VelocityField::zeros(res, bbox);
    let xs = f.centers();
    let a = df(&xs, t)?;
    let b = df(&xs, (t + dt).min(1.0))?;
    for n in 0..f.len() {
        if occupied(n, xs[n]) {
            f.velocity[n] = math::scale(math::sub(a[n], b[n]), 1.0 / dt);
            f.valid[n] = true;
        }
    }
    Ok(f)
}

/// Ground-truth velocities at voxel centers; voxels outside every body are
/// invalid and zero.
pub fn ground_truth_field(oracle: &GroundTruthOracle, t: f64, res: usize, bbox: Bbox) -> VelocityField {
    let mut f = VelocityField::zeros(res, bbox);
    for n in 0..f.len() {
        let (inside, v) = oracle.velocity(f.center(n), t);
        if inside {
            f.velocity[n] = v;
            f.valid[n] = true;
        }
    }
    f
}

/// Mean Euclidean norm of the per-voxel difference over all voxels.
pub fn mfe(a: &VelocityField, b: &VelocityField) -> Result<f64> {
    if a.res != b.res || a.bbox != b.bbox {
        return Err(Error::ShapeMismatch(format!("velocity fields at {}^3 vs {}^3", a.res, b.res)));
    }
    let s: f64 = a
        .velocity
        .iter()
        .zip(&b.velocity)
        .map(|(x, y)| math::norm(math::sub(*x, *y)))
        .sum();
    Ok(s / a.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfeProtocol {
    /// Voxels per axis.
    pub res: usize,
    pub dt: f64,
    pub times: Vec<f64>,
}

impl Default for MfeProtocol {
    fn default() -> Self {
        Self {
            res: 30,
            dt: 0.01,
            times: vec![0.1, 0.3, 0.5, 0.7, 0.9],
        }
    }
}

/// Velocity field of a model: particle finite differences, the deformation
/// field zeroed where the model's own alpha over one voxel is below
/// `eps_alpha`, or zero for a static field.
pub fn model_velocity_field<T: Real>(
    model: &Model<T>,
    t: f64,
    protocol: &MfeProtocol,
    eps_alpha: f64,
) -> Result<VelocityField> {
    let bbox = model.bbox();
    match model.dynamics {
        Dynamics::Particles => particle_velocity_field(&model.particles, &model.motion, t, protocol.dt, protocol.res, bbox),
        Dynamics::Static => {
            check_protocol(t, protocol.dt, protocol.res)?;
            Ok(VelocityField::zeros(protocol.res, bbox))
        }
        Dynamics::Deformation => {
            let df = model
                .deform
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("deformation model without a deformation network".into()))?;
            let edge = bbox.extent().iter().sum::<f64>() / 3.0 / protocol.res as f64;
            let centers = VelocityField::zeros(protocol.res, bbox).centers();
            let sigma = model.densities_at(&centers, t)?;
            deformation_velocity_field(
                |xs, tt| df.offsets(xs, tt),
                t,
                protocol.dt,
                protocol.res,
                bbox,
                |n, _| 1.0 - (-sigma[n] * edge).exp() >= eps_alpha,
            )
        }
    }
}

/// Mean over protocol times of `mfe(field(t), gt(t))`, plus the per-time
/// values.
pub fn mfe_over_times(
    protocol: &MfeProtocol,
    oracle: &GroundTruthOracle,
    bbox: Bbox,
    field: impl Fn(f64) -> Result<VelocityField>,
) -> Result<(f64, Vec<f64>)> {
    let per: Vec<f64> = protocol
        .times
        .iter()
        .map(|&t| mfe(&field(t)?, &ground_truth_field(oracle, t, protocol.res, bbox)))
        .collect::<Result<_>>()?;
    Ok((per.iter().sum::<f64>() / per.len().max(1) as f64, per))
}

mod sentinel {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("nan")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Str(s) if s == "nan" => Ok(f64::NAN),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad metric value {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub frame: usize,
    pub time: f64,
    #[serde(with = "sentinel")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    /// Total voxel count.
    #[serde(rename = "N")]
    pub n: usize,
    pub dt: f64,
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MfePerTime {
    pub particles: Vec<f64>,
    pub zero_motion: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scene: String,
    pub steps: usize,
    #[serde(with = "sentinel")]
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub per_view: Vec<ViewMetrics>,
    /// Error of the evaluated model's own velocity field (particles, or the
    /// deformation field for a deformation model).
    pub mfe_particles: Option<f64>,
    pub mfe_zero_motion: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mfe_baseline: Option<f64>,
    pub protocol: ProtocolReport,
    pub mfe_per_time: MfePerTime,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Per-view metrics on `views` rendered with `n` samples per ray.
pub fn view_metrics<T: Real>(model: &Model<T>, data: &Dataset, views: &[usize], n: usize) -> Result<Vec<ViewMetrics>> {
    views
        .iter()
        .map(|&f| {
            let frame = data
                .frames
                .get(f)
                .ok_or_else(|| Error::InvalidArgument(format!("frame {f} out of range")))?;
            let img = model.render_image(&frame.pose, frame.time, n)?;
            Ok(ViewMetrics {
                frame: f,
                time: frame.time,
                psnr: psnr(&img, &frame.image)?,
                ssim: ssim(&img, &frame.image)?,
            })
        })
        .collect()
}

pub struct EvalOptions<'a, T> {
    pub samples_per_ray: usize,
    pub eps_alpha: f64,
    pub protocol: MfeProtocol,
    pub steps: usize,
    pub baseline: Option<&'a Model<T>>,
}

/// Held-out image metrics and, for synthetic datasets, motion field errors
/// of the model, the zero-motion reference and an optional baseline.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset, opts: &EvalOptions<T>) -> Result<Report> {
    if data.split.test.is_empty() {
        return Err(Error::InvalidArgument("dataset has no held-out views".into()));
    }
    let per_view = view_metrics(model, data, &data.split.test, opts.samples_per_ray)?;
    let k = per_view.len() as f64;
    let psnr_mean = per_view.iter().map(|v| v.psnr).sum::<f64>() / k;
    let ssim_mean = per_view.iter().map(|v| v.ssim).sum::<f64>() / k;
    let p = &opts.protocol;
    let mut report = Report {
        scene: data.scene.as_ref().map_or_else(|| "unknown".into(), |s| s.name.clone()),
        steps: opts.steps,
        psnr_mean,
        ssim_mean,
        per_view,
        mfe_particles: None,
        mfe_zero_motion: None,
        mfe_baseline: None,
        protocol: ProtocolReport {
            n: p.res.pow(3),
            dt: p.dt,
            times: p.times.clone(),
        },
        mfe_per_time: MfePerTime::default(),
    };
    if let Some(spec) = &data.scene {
        let oracle = GroundTruthOracle::new(spec.clone());
        let bbox = data.bbox;
        let (m, per) = mfe_over_times(p, &oracle, bbox, |t| model_velocity_field(model, t, p, opts.eps_alpha))?;
        report.mfe_particles = Some(m);
        report.mfe_per_time.particles = per;
        let (z, per) = mfe_over_times(p, &oracle, bbox, |_| Ok(VelocityField::zeros(p.res, bbox)))?;
        report.mfe_zero_motion = Some(z);
        report.mfe_per_time.zero_motion = per;
        if let Some(b) = opts.baseline {
            let (m, per) = mfe_over_times(p, &oracle, bbox, |t| model_velocity_field(b, t, p, opts.eps_alpha))?;
            report.mfe_baseline = Some(m);
            report.mfe_per_time.baseline = Some(per);
        }
    }
    Ok(report)
}

/// Ground-truth velocity fields of all protocol times, computed in parallel.
pub fn ground_truth_fields(protocol: &MfeProtocol, oracle: &GroundTruthOracle, bbox: Bbox) -> Vec<VelocityField> {
    protocol
        .times
        .par_iter()
        .map(|&t| ground_truth_field(oracle, t, protocol.res, bbox))
        .collect()
}
