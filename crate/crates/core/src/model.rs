//! The full radiance field: static grid, appearance particles with their
//! motion network, feature / density / color networks, and the alternative
//! dynamics used by the ablations (static field only, and a backward
//! deformation field).

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{self, FeatureGrid, OccupancyMask};
use crate::image::Image;
use crate::math::Vec3;
use crate::ndiff::{Graph, Lattice, Real, Tensor, Var};
use crate::nn::{self, encoded_len, Mlp, MlpVars, L_POSITION, L_TIME};
use crate::particles::{self, MotionNet, MotionVars, ParticleSet};
use crate::radiance::{self, NetVars, RadianceNets, RayRender, RaySampleSet, RenderVars, PROBE_TIMES};
use crate::scene::{Bbox, CameraPose};

/// How the field varies in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dynamics {
    /// Static grid superposed with the particle-splatted dynamic grid.
    Particles,
    /// Static grid queried at `x + df(x, t)`.
    Deformation,
    /// Static grid alone.
    Static,
}

impl std::str::FromStr for Dynamics {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "particles" => Ok(Self::Particles),
            "deformation" => Ok(Self::Deformation),
            "static" => Ok(Self::Static),
            _ => Err(Error::Config(format!("unknown dynamics '{s}' (particles, deformation, static)"))),
        }
    }
}

impl std::fmt::Display for Dynamics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Particles => "particles",
            Self::Deformation => "deformation",
            Self::Static => "static",
        })
    }
}

/// Parameter groups, each with its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Features,
    Starts,
    Motion,
    Grid,
    Heads,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Features, Group::Starts, Group::Motion, Group::Grid, Group::Heads];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dynamics: Dynamics,
    pub particles: usize,
    pub channels: usize,
    pub grid_dims: [usize; 3],
    pub motion_width: usize,
    pub net_width: usize,
    pub bbox: Bbox,
    pub background: [f64; 3],
}

/// Backward deformation `df(x, t)` over the encoded position and time; the
/// last layer starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformNet<T> {
    pub mlp: Mlp<T>,
}

impl<T: Real> DeformNet<T> {
    pub fn init(width: usize, rng: &mut impl Rng) -> Self {
        let mut mlp = Mlp::init(&[encoded_len(3, L_POSITION) + encoded_len(1, L_TIME), width, width, 3], rng);
        mlp.zero_last();
        Self { mlp }
    }

    pub fn cast<U: Real>(&self) -> DeformNet<U> {
        DeformNet { mlp: self.mlp.cast() }
    }

    /// `df(x, t)` at each point.
    pub fn offsets(&self, points: &[Vec3], t: f64) -> Result<Vec<Vec3>> {
        let mut g = Graph::new();
        let vars = self.mlp.bind(&mut g, false);
        let off = deform_offsets(&mut g, &vars, points, t)?;
        radiance::check(&g)?;
        Ok(g.value(off).data().chunks(3).map(|r| [r[0].to_f64(), r[1].to_f64(), r[2].to_f64()]).collect())
    }
}

fn deform_offsets<T: Real>(g: &mut Graph<T>, vars: &MlpVars, points: &[Vec3], t: f64) -> Result<Var> {
    let ex = g.constant(nn::encode_rows(points, L_POSITION));
    let et = g.constant(Tensor::from_f64([1, encoded_len(1, L_TIME)], &nn::encode(&[t], L_TIME))?);
    let first = &vars.layers[0];
    let (hx, ht) = nn::split_matmul(g, first, encoded_len(3, L_POSITION), ex, et)?;
    let ht = g.add(ht, first.bias)?;
    let h = g.add_row(hx, ht)?;
    Ok(vars.forward_from(g, h, 1)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub dynamics: Dynamics,
    pub background: [f64; 3],
    pub particles: ParticleSet<T>,
    pub motion: MotionNet<T>,
    pub static_grid: FeatureGrid<T>,
    pub nets: RadianceNets<T>,
    pub deform: Option<DeformNet<T>>,
}

/// Graph handles of every parameter of a bound model.
#[derive(Debug, Clone)]
pub struct Bound {
    pub features: Var,
    pub starts: Var,
    pub motion: MotionVars,
    pub grid: Var,
    pub nets: NetVars,
    pub deform: Option<MlpVars>,
}

impl Bound {
    /// Variables in the order of [`Model::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.features, self.starts];
        v.extend(self.motion.vars());
        if let Some(d) = &self.deform {
            v.extend(d.vars());
        }
        v.push(self.grid);
        v.extend(self.nets.phi_v.vars());
        v.extend(self.nets.density.vars());
        v.extend(self.nets.color.vars());
        v
    }
}

/// Outputs of one differentiable forward pass at a single time.
#[derive(Debug, Clone)]
pub struct Forward {
    pub render: RenderVars,
    /// Field the rays were rendered through (superposed grid, or the static
    /// grid for the other dynamics).
    pub grid: Var,
    /// Motion grid and its node validity (particle dynamics only).
    pub motion_grid: Option<(Var, Vec<bool>)>,
    pub alive: usize,
    pub clamped: usize,
}

impl<T: Real> Model<T> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.channels == 0 || cfg.motion_width == 0 || cfg.net_width == 0 {
            return Err(Error::Config("channels and widths must be positive".into()));
        }
        let static_grid = FeatureGrid::zeros(cfg.grid_dims, cfg.channels, cfg.bbox)?;
        let nets = RadianceNets::init(cfg.channels, cfg.net_width, rng);
        let n = if cfg.dynamics == Dynamics::Particles { cfg.particles } else { 0 };
        let particles = ParticleSet::init(n, cfg.channels, &cfg.bbox, rng);
        let motion = MotionNet::init(cfg.motion_width, rng);
        let deform = (cfg.dynamics == Dynamics::Deformation).then(|| DeformNet::init(cfg.motion_width, rng));
        Ok(Self {
            dynamics: cfg.dynamics,
            background: cfg.background,
            particles,
            motion,
            static_grid,
            nets,
            deform,
        })
    }

    pub fn bbox(&self) -> Bbox {
        self.static_grid.bbox
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            dynamics: self.dynamics,
            background: self.background,
            particles: self.particles.cast(),
            motion: self.motion.cast(),
            static_grid: self.static_grid.cast(),
            nets: self.nets.cast(),
            deform: self.deform.as_ref().map(DeformNet::cast),
        }
    }

    /// Every learnable tensor with its group, in a fixed order.
    pub fn tensors(&self) -> Vec<(Group, &Tensor<T>)> {
        let mut v = vec![
            (Group::Features, &self.particles.features),
            (Group::Starts, &self.particles.starts),
        ];
        v.extend(self.motion.tensors().into_iter().map(|t| (Group::Motion, t)));
        if let Some(d) = &self.deform {
            v.extend(d.mlp.tensors().into_iter().map(|t| (Group::Motion, t)));
        }
        v.push((Group::Grid, &self.static_grid.data));
        v.extend(self.nets.tensors().into_iter().map(|t| (Group::Heads, t)));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(Group, &mut Tensor<T>)> {
        let mut v = vec![
            (Group::Features, &mut self.particles.features),
            (Group::Starts, &mut self.particles.starts),
        ];
        v.extend(self.motion.tensors_mut().into_iter().map(|t| (Group::Motion, t)));
        if let Some(d) = &mut self.deform {
            v.extend(d.mlp.tensors_mut().into_iter().map(|t| (Group::Motion, t)));
        }
        v.push((Group::Grid, &mut self.static_grid.data));
        v.extend(self.nets.tensors_mut().into_iter().map(|t| (Group::Heads, t)));
        v
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            features: g.leaf(self.particles.features.clone(), trainable),
            starts: g.leaf(self.particles.starts.clone(), trainable),
            motion: self.motion.bind(g, trainable),
            deform: self.deform.as_ref().map(|d| d.mlp.bind(g, trainable)),
            grid: g.leaf(self.static_grid.data.clone(), trainable),
            nets: self.nets.bind(g, trainable),
        }
    }

    /// Renders `samples` at time `t` through the bound parameters.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        t: f64,
        samples: &[RaySampleSet],
        hits: &[bool],
    ) -> Result<Forward> {
        particles::check_time(t)?;
        let lattice = self.static_grid.lattice();
        match self.dynamics {
            Dynamics::Particles => {
                let alive = Arc::new(self.particles.alive_indices());
                let (s, v) = particles::alive_rows(g, b.starts, b.features, &alive)?;
                let off = b.motion.offsets(g, s, t)?;
                let pos = g.add(s, off)?;
                let sv = grids::scatter_var(g, &lattice, pos, v)?;
                let grid = grids::superpose_var(g, b.grid, sv.grid, &sv.mask)?;
                let gm = grids::motion_grid_var(g, &sv, off)?;
                let render = radiance::render_var(g, grid, &lattice, &b.nets, samples, hits, self.background)?;
                Ok(Forward {
                    render,
                    grid,
                    motion_grid: Some((gm, sv.mask)),
                    alive: alive.len(),
                    clamped: sv.clamped,
                })
            }
            Dynamics::Static => Ok(Forward {
                render: radiance::render_var(g, b.grid, &lattice, &b.nets, samples, hits, self.background)?,
                grid: b.grid,
                motion_grid: None,
                alive: 0,
                clamped: 0,
            }),
            Dynamics::Deformation => {
                let n = samples.first().map_or(0, |s| s.depths.len());
                let points: Vec<Vec3> = samples.iter().flat_map(|s| (0..n).map(move |k| s.point(k))).collect();
                let feats = self.deformed_features(g, b, &lattice, &points, t)?;
                let render = radiance::shade_and_composite(g, feats, &b.nets, samples, hits, &points, self.background)?;
                Ok(Forward {
                    render,
                    grid: b.grid,
                    motion_grid: None,
                    alive: 0,
                    clamped: 0,
                })
            }
        }
    }

    fn deformed_features(&self, g: &mut Graph<T>, b: &Bound, lattice: &Lattice, points: &[Vec3], t: f64) -> Result<Var> {
        let vars = b
            .deform
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("deformation dynamics without a deformation network".into()))?;
        let off = deform_offsets(g, vars, points, t)?;
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        let x = g.constant(Tensor::from_f64([points.len(), 3], &flat)?);
        let xc = g.add(x, off)?;
        let (w, idx) = g.trilinear_weights(xc, lattice)?;
        Ok(g.weighted_gather(b.grid, w, idx)?)
    }

    /// The grid the field is queried through at `t`: the superposed grid
    /// for particle dynamics, the static grid otherwise.
    pub fn field_at(&self, t: f64) -> Result<FeatureGrid<T>> {
        particles::check_time(t)?;
        match self.dynamics {
            Dynamics::Particles => {
                let sr = grids::scatter(&self.particles, &self.motion, t, self.static_grid.dims, &self.bbox())?;
                grids::superpose(&self.static_grid, &sr)
            }
            _ => Ok(self.static_grid.clone()),
        }
    }

    /// Densities at `points` and time `t`.
    pub fn densities_at(&self, points: &[Vec3], t: f64) -> Result<Vec<f64>> {
        match self.dynamics {
            Dynamics::Deformation => {
                let lattice = self.static_grid.lattice();
                let mut out = Vec::with_capacity(points.len());
                for chunk in points.chunks(16_384) {
                    let mut g = Graph::new();
                    let b = self.bind(&mut g, false);
                    let feats = self.deformed_features(&mut g, &b, &lattice, chunk, t)?;
                    let ray_of = Arc::new(vec![0u32; chunk.len()]);
                    let (sigma, _) = b.nets.shade(&mut g, feats, chunk, &[[0.0, 0.0, 1.0]], ray_of)?;
                    radiance::check(&g)?;
                    out.extend(g.value(sigma).to_f64_vec());
                }
                Ok(out)
            }
            _ => radiance::densities(points, &self.field_at(t)?, &self.nets),
        }
    }

    /// Occupancy of the current grid nodes over the probe times.
    pub fn occupancy(&self, eps_alpha: f64) -> Result<OccupancyMask> {
        match self.dynamics {
            Dynamics::Deformation => {
                let lat = self.static_grid.lattice();
                let delta = self.static_grid.voxel_edge();
                let nodes = node_positions(&lat);
                let mut occupied = vec![false; nodes.len()];
                for t in PROBE_TIMES {
                    for (o, s) in occupied.iter_mut().zip(self.densities_at(&nodes, t)?) {
                        *o |= 1.0 - (-s * delta).exp() >= eps_alpha;
                    }
                }
                Ok(OccupancyMask::new(lat, occupied, eps_alpha))
            }
            _ => {
                let fields = PROBE_TIMES
                    .iter()
                    .map(|&t| self.field_at(t))
                    .collect::<Result<Vec<_>>>()?;
                radiance::update_occupancy(&fields, &self.nets, eps_alpha)
            }
        }
    }

    /// Renders a full image at `t` with `n` midpoint samples per ray.
    pub fn render_image(&self, pose: &CameraPose, t: f64, n: usize) -> Result<Image> {
        let (w, h) = (pose.width, pose.height);
        let field = self.field_at(t)?;
        let lattice = field.lattice();
        let bbox = self.bbox();
        let pixels: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect();
        let chunks: Vec<Vec<[f64; 3]>> = pixels
            .par_chunks(1024)
            .map(|chunk| -> Result<Vec<[f64; 3]>> {
                let mut samples = Vec::with_capacity(chunk.len());
                let mut hits = Vec::with_capacity(chunk.len());
                for &(x, y) in chunk {
                    let (o, d) = pose.ray_for_pixel(x, y)?;
                    let (s, hit) = radiance::sample_in_box::<rand_chacha::ChaCha8Rng>(o, d, &bbox, n, None)?;
                    samples.push(s);
                    hits.push(hit);
                }
                let mut g = Graph::new();
                let rv = match self.dynamics {
                    Dynamics::Deformation => {
                        let b = self.bind(&mut g, false);
                        self.forward(&mut g, &b, t, &samples, &hits)?.render
                    }
                    _ => {
                        let nets = self.nets.bind(&mut g, false);
                        let gv = g.constant(field.data.clone());
                        radiance::render_var(&mut g, gv, &lattice, &nets, &samples, &hits, self.background)?
                    }
                };
                radiance::check(&g)?;
                Ok(g.value(rv.rgb).data().chunks(3).map(|c| [c[0].to_f64(), c[1].to_f64(), c[2].to_f64()]).collect())
            })
            .collect::<Result<_>>()?;
        let mut img = Image::filled(w, h, [0.0; 3]);
        for (&(x, y), rgb) in pixels.iter().zip(chunks.into_iter().flatten()) {
            img.set_pixel(x, y, rgb.map(|c| c.clamp(0.0, 1.0) as f32));
        }
        Ok(img)
    }

    /// Debug render of the ray `origin + s dir` with `n` midpoint samples at
    /// `t`: color, weights, densities and remaining transmittance.
    pub fn render_ray(&self, origin: Vec3, dir: Vec3, n: usize, t: f64) -> Result<(RaySampleSet, RayRender)> {
        let (samples, hit) = radiance::sample_in_box::<rand_chacha::ChaCha8Rng>(origin, dir, &self.bbox(), n, None)?;
        if self.dynamics != Dynamics::Deformation {
            let r = radiance::render(&samples, &self.field_at(t)?, &self.nets, self.background)?;
            return Ok((samples, r));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let rv = self.forward(&mut g, &b, t, std::slice::from_ref(&samples), &[hit])?.render;
        radiance::check(&g)?;
        let rgb = g.value(rv.rgb).to_f64_vec();
        Ok((samples, RayRender {
            rgb: [rgb[0], rgb[1], rgb[2]],
            weights: g.value(rv.weights).to_f64_vec(),
            sigma: g.value(rv.sigma).to_f64_vec(),
            t_far: g.value(rv.t_far).item().to_f64(),
        }))
    }
}

/// World positions of every node, in node-index order.
pub fn node_positions(lat: &Lattice) -> Vec<Vec3> {
    let mut nodes = Vec::with_capacity(lat.node_count());
    for i in 0..lat.dims[0] {
        for j in 0..lat.dims[1] {
            for k in 0..lat.dims[2] {
                nodes.push(grids::node_position(lat, i, j, k));
            }
        }
    }
    nodes
}
