//! Appearance particles: learnable start points and time-invariant features,
//! a shared motion network giving `p(t) = s + NN(t, s)`, and the
//! removal / resampling lifecycle.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grids::OccupancyMask;
use crate::math::{self, Vec3};
use crate::ndiff::{Graph, NdiffError, Real, Tensor, Var};
use crate::nn::{self, encode_var, encoded_len, Mlp, MlpVars, L_POSITION, L_TIME};
use crate::scene::Bbox;

/// Standard deviation of the initial particle features.
pub const FEATURE_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet<T> {
    /// `[N, 3]` start positions.
    pub starts: Tensor<T>,
    /// `[N, C]` appearance features.
    pub features: Tensor<T>,
    pub alive: Vec<bool>,
}

impl<T: Real> ParticleSet<T> {
    /// Starts uniform in `bbox`, features `N(0, FEATURE_INIT_STD^2)`.
    pub fn init(n: usize, c: usize, bbox: &Bbox, rng: &mut impl Rng) -> Self {
        let mut starts = Vec::with_capacity(n * 3);
        for _ in 0..n {
            for a in 0..3 {
                starts.push(T::from_f64(rng.random_range(bbox.min[a]..=bbox.max[a])));
            }
        }
        let normal = Normal::new(0.0, FEATURE_INIT_STD).expect("valid std");
        let features = (0..n * c).map(|_| T::from_f64(normal.sample(rng))).collect();
        Self {
            starts: Tensor::matrix(n, 3, starts),
            features: Tensor::matrix(n, c, features),
            alive: vec![true; n],
        }
    }

    pub fn from_parts(starts: Tensor<T>, features: Tensor<T>) -> Result<Self> {
        if starts.shape().len() != 2 || starts.cols() != 3 || features.rows() != starts.rows() {
            return Err(Error::ShapeMismatch(format!(
                "starts {:?} vs features {:?}",
                starts.shape(),
                features.shape()
            )));
        }
        let n = starts.rows();
        Ok(Self {
            starts,
            features,
            alive: vec![true; n],
        })
    }

    pub fn len(&self) -> usize {
        self.alive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alive.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    pub fn alive_indices(&self) -> Vec<u32> {
        (0..self.len() as u32).filter(|&i| self.alive[i as usize]).collect()
    }

    pub fn start(&self, i: usize) -> Vec3 {
        let r = self.starts.row(i);
        [r[0].to_f64(), r[1].to_f64(), r[2].to_f64()]
    }

    pub fn cast<U: Real>(&self) -> ParticleSet<U> {
        ParticleSet {
            starts: self.starts.cast(),
            features: self.features.cast(),
            alive: self.alive.clone(),
        }
    }
}

/// `phi_t` (2 layers over the encoded time) feeding `phi_m` (3 layers over
/// the encoded start concatenated with the time embedding), which outputs the
/// offset.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionNet<T> {
    pub phi_t: Mlp<T>,
    pub phi_m: Mlp<T>,
}

impl<T: Real> MotionNet<T> {
    /// Random hidden layers; the last layer of `phi_m` is zero so every
    /// particle starts motionless.
    pub fn init(width: usize, rng: &mut impl Rng) -> Self {
        let phi_t = Mlp::init(&[encoded_len(1, L_TIME), width, width], rng);
        let mut phi_m = Mlp::init(&[encoded_len(3, L_POSITION) + width, width, width, 3], rng);
        phi_m.zero_last();
        Self { phi_t, phi_m }
    }

    pub fn width(&self) -> usize {
        self.phi_t.layers[0].fan_out()
    }

    pub fn cast<U: Real>(&self) -> MotionNet<U> {
        MotionNet {
            phi_t: self.phi_t.cast(),
            phi_m: self.phi_m.cast(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.phi_t.tensors();
        v.extend(self.phi_m.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.phi_t.tensors_mut();
        v.extend(self.phi_m.tensors_mut());
        v
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> MotionVars {
        MotionVars {
            phi_t: self.phi_t.bind(g, trainable),
            phi_m: self.phi_m.bind(g, trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MotionVars {
    pub phi_t: MlpVars,
    pub phi_m: MlpVars,
}

impl MotionVars {
    /// Offsets `NN(t, s)` for start rows `starts: [n, 3]`.
    pub fn offsets<T: Real>(&self, g: &mut Graph<T>, starts: Var, t: f64) -> Result<Var> {
        let gt = g.constant(Tensor::from_f64([1, encoded_len(1, L_TIME)], &nn::encode(&[t], L_TIME))?);
        let emb = self.phi_t.forward(g, gt)?;
        let gs = encode_var(g, starts, L_POSITION)?;
        let first = &self.phi_m.layers[0];
        let (hs, ht) = nn::split_matmul(g, first, encoded_len(3, L_POSITION), gs, emb)?;
        let ht = g.add(ht, first.bias)?;
        let h = g.add_row(hs, ht)?;
        Ok(self.phi_m.forward_from(g, h, 1)?)
    }

    pub fn positions<T: Real>(&self, g: &mut Graph<T>, starts: Var, t: f64) -> Result<Var> {
        let off = self.offsets(g, starts, t)?;
        Ok(g.add(starts, off)?)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.phi_t.vars();
        v.extend(self.phi_m.vars());
        v
    }
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

fn nonfinite(e: NdiffError, what: &str) -> Error {
    match e {
        NdiffError::NonFinite { node, op } => Error::NonFinite(format!("{what}: node {node} ({op})")),
        other => other.into(),
    }
}

/// Offsets and positions `[N, 3]` of every particle (alive or not) at `t`.
pub fn offsets_and_positions<T: Real>(
    set: &ParticleSet<T>,
    net: &MotionNet<T>,
    t: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_time(t)?;
    let mut g = Graph::new();
    let mv = net.bind(&mut g, false);
    let s = g.constant(set.starts.clone());
    let off = mv.offsets(&mut g, s, t)?;
    let pos = g.add(s, off)?;
    g.check_finite().map_err(|e| nonfinite(e, "motion network"))?;
    Ok((g.value(off).clone(), g.value(pos).clone()))
}

/// `p(t) = NN(t, s) + s` for every particle.
pub fn position_at<T: Real>(set: &ParticleSet<T>, net: &MotionNet<T>, t: f64) -> Result<Tensor<T>> {
    Ok(offsets_and_positions(set, net, t)?.1)
}

fn sample_times(k: usize) -> Vec<f64> {
    (0..k).map(|j| j as f64 / (k - 1) as f64).collect()
}

fn to_vec3<T: Real>(p: &Tensor<T>, i: usize) -> Vec3 {
    let r = p.row(i);
    [r[0].to_f64(), r[1].to_f64(), r[2].to_f64()]
}

/// Positions of every particle at `k` uniform times in `[0, 1]`.
pub fn sampled_positions<T: Real>(set: &ParticleSet<T>, net: &MotionNet<T>, k: usize) -> Result<Vec<Tensor<T>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("trajectory sample count {k} < 2")));
    }
    sample_times(k).into_iter().map(|t| position_at(set, net, t)).collect()
}

/// Length of the polyline through the given points.
pub fn polyline_length(points: &[Vec3]) -> f64 {
    points.windows(2).map(|w| math::norm(math::sub(w[1], w[0]))).sum()
}

/// Polyline length of particle `i`'s trajectory over `k` uniform samples.
pub fn trajectory_length<T: Real>(set: &ParticleSet<T>, net: &MotionNet<T>, i: usize, k: usize) -> Result<f64> {
    if i >= set.len() || !set.alive[i] {
        return Err(Error::InvalidArgument(format!("particle {i} is not alive")));
    }
    let one = ParticleSet {
        starts: Tensor::matrix(1, 3, set.starts.row(i).to_vec()),
        features: Tensor::matrix(1, set.feature_dim(), set.features.row(i).to_vec()),
        alive: vec![true],
    };
    let samples = sampled_positions(&one, net, k)?;
    let pts: Vec<Vec3> = samples.iter().map(|p| to_vec3(p, 0)).collect();
    Ok(polyline_length(&pts))
}

/// Removes alive particles whose sampled positions all lie in known free
/// space, or whose trajectory is shorter than `eps_traj`. Returns the removed
/// indices in ascending order.
pub fn remove<T: Real>(
    set: &mut ParticleSet<T>,
    net: &MotionNet<T>,
    mask: &OccupancyMask,
    eps_traj: f64,
    k: usize,
) -> Result<Vec<usize>> {
    if !(eps_traj >= 0.0) {
        return Err(Error::InvalidArgument(format!("eps_traj {eps_traj} < 0")));
    }
    let samples = sampled_positions(set, net, k)?;
    let mut removed = Vec::new();
    for i in 0..set.len() {
        if !set.alive[i] {
            continue;
        }
        let pts: Vec<Vec3> = samples.iter().map(|p| to_vec3(p, i)).collect();
        let free = pts.iter().all(|&p| mask.is_free(p));
        if free || polyline_length(&pts) < eps_traj {
            set.alive[i] = false;
            removed.push(i);
        }
    }
    Ok(removed)
}

/// Refills `slots` (dead entries) with new particles: each picks a uniformly
/// random survivor, starts uniformly inside the ball of `radius` around the
/// survivor's start (clamped to `bbox`) and copies its feature. Survivors are
/// the particles alive before the call. With no survivors nothing is added
/// and an empty list is returned.
pub fn resample<T: Real>(
    set: &mut ParticleSet<T>,
    slots: &[usize],
    radius: f64,
    bbox: &Bbox,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("resample radius {radius} must be positive")));
    }
    if let Some(&bad) = slots.iter().find(|&&s| s >= set.len() || set.alive[s]) {
        return Err(Error::InvalidArgument(format!("slot {bad} is not a dead particle")));
    }
    let survivors = set.alive_indices();
    if slots.is_empty() {
        return Ok(Vec::new());
    }
    if survivors.is_empty() {
        log::warn!("no surviving particles; skipping resampling of {}", slots.len());
        return Ok(Vec::new());
    }
    for &slot in slots {
        let src = survivors[rng.random_range(0..survivors.len())] as usize;
        let offset = loop {
            let d: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
            if math::dot(d, d) <= 1.0 {
                break math::scale(d, radius);
            }
        };
        let p = bbox.clamp(math::add(set.start(src), offset));
        for a in 0..3 {
            set.starts.row_mut(slot)[a] = T::from_f64(p[a]);
        }
        let feat = set.features.row(src).to_vec();
        set.features.row_mut(slot).copy_from_slice(&feat);
        set.alive[slot] = true;
    }
    Ok(slots.to_vec())
}

/// ASCII PLY point cloud.
pub fn write_ply(path: &Path, points: &[Vec3]) -> Result<()> {
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    );
    for p in points {
        let _ = writeln!(s, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Alive particle positions at `t`.
pub fn alive_positions<T: Real>(set: &ParticleSet<T>, net: &MotionNet<T>, t: f64) -> Result<Vec<Vec3>> {
    let pos = position_at(set, net, t)?;
    Ok(set.alive_indices().iter().map(|&i| to_vec3(&pos, i as usize)).collect())
}

/// Trajectory CSV with columns `particle_id,t,x,y,z`, one row per alive
/// particle and time, grouped by particle.
pub fn write_trajectories_csv<T: Real>(
    path: &Path,
    set: &ParticleSet<T>,
    net: &MotionNet<T>,
    times: &[f64],
) -> Result<()> {
    let per_time = times
        .iter()
        .map(|&t| position_at(set, net, t))
        .collect::<Result<Vec<_>>>()?;
    let mut s = String::from("particle_id,t,x,y,z\n");
    for i in set.alive_indices() {
        for (t, pos) in times.iter().zip(&per_time) {
            let p = to_vec3(pos, i as usize);
            let _ = writeln!(s, "{i},{t},{},{},{}", p[0] as f32, p[1] as f32, p[2] as f32);
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Gathers the alive rows of the particle parameters into the graph.
pub(crate) fn alive_rows<T: Real>(
    g: &mut Graph<T>,
    starts: Var,
    features: Var,
    alive: &Arc<Vec<u32>>,
) -> Result<(Var, Var)> {
    Ok((g.gather(starts, alive.clone())?, g.gather(features, alive.clone())?))
}
