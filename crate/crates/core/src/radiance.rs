//! Feature network, density / color heads, stratified ray sampling, volume
//! rendering and the alpha-based occupancy mask.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grids::{self, FeatureGrid, OccupancyMask};
use crate::math::{self, Vec3};
use crate::ndiff::{Graph, Lattice, Real, Tensor, Var};
use crate::nn::{self, encode_var, encoded_len, Mlp, MlpVars, L_DIRECTION, L_POSITION};
use crate::scene::Bbox;

/// Frequency count of the feature encoding.
pub const L_FEATURE: usize = 2;
/// Pre-activation shift of the density so that an untrained field is nearly
/// transparent.
pub const DENSITY_SHIFT: f64 = -10.0;
/// Probe times of the occupancy mask.
pub const PROBE_TIMES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// `phi_v` (2 layers over encoded feature and position), the density head
/// and the color head (2 layers over the `phi_v` output and the encoded view
/// direction).
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceNets<T> {
    pub phi_v: Mlp<T>,
    pub density: Mlp<T>,
    pub color: Mlp<T>,
}

impl<T: Real> RadianceNets<T> {
    pub fn init(channels: usize, width: usize, rng: &mut impl Rng) -> Self {
        let input = encoded_len(channels, L_FEATURE) + encoded_len(3, L_POSITION);
        let half = (width / 2).max(1);
        Self {
            phi_v: Mlp::init(&[input, width, width], rng),
            density: Mlp::init(&[width, 1], rng),
            color: Mlp::init(&[width + encoded_len(3, L_DIRECTION), half, 3], rng),
        }
    }

    pub fn zero_heads(&mut self) {
        for m in [&mut self.density, &mut self.color] {
            for l in &mut m.layers {
                l.weight = Tensor::zeros(l.weight.shape().to_vec());
                l.bias = Tensor::zeros(l.bias.shape().to_vec());
            }
        }
    }

    pub fn width(&self) -> usize {
        self.phi_v.layers[0].fan_out()
    }

    pub fn channels(&self) -> usize {
        (self.phi_v.layers[0].fan_in() - encoded_len(3, L_POSITION)) / (1 + 2 * L_FEATURE)
    }

    pub fn cast<U: Real>(&self) -> RadianceNets<U> {
        RadianceNets {
            phi_v: self.phi_v.cast(),
            density: self.density.cast(),
            color: self.color.cast(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.phi_v.tensors();
        v.extend(self.density.tensors());
        v.extend(self.color.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.phi_v.tensors_mut();
        v.extend(self.density.tensors_mut());
        v.extend(self.color.tensors_mut());
        v
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> NetVars {
        NetVars {
            phi_v: self.phi_v.bind(g, trainable),
            density: self.density.bind(g, trainable),
            color: self.color.bind(g, trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetVars {
    pub phi_v: MlpVars,
    pub density: MlpVars,
    pub color: MlpVars,
}

impl NetVars {
    /// Density `[S, 1]` and color `[S, 3]` from interpolated features
    /// `[S, C]` at world points, viewed along `dirs[ray_of[s]]`.
    pub fn shade<T: Real>(
        &self,
        g: &mut Graph<T>,
        features: Var,
        points: &[Vec3],
        dirs: &[Vec3],
        ray_of: Arc<Vec<u32>>,
    ) -> Result<(Var, Var)> {
        let gf = encode_var(g, features, L_FEATURE)?;
        let gx = g.constant(nn::encode_rows(points, L_POSITION));
        let input = g.concat(&[gf, gx])?;
        let h = self.phi_v.forward(g, input)?;
        let h = g.relu(h);
        let raw = self.density.forward(g, h)?;
        let shifted = g.add_scalar(raw, T::from_f64(DENSITY_SHIFT));
        let sigma = g.softplus(shifted);
        let gd = g.constant(nn::encode_rows(dirs, L_DIRECTION));
        let first = &self.color.layers[0];
        let width = g.shape(h)[1];
        let (hh, hd) = nn::split_matmul(g, first, width, h, gd)?;
        let hd = g.gather(hd, ray_of)?;
        let pre = g.add(hh, hd)?;
        let pre = g.add_row(pre, first.bias)?;
        let raw_c = self.color.forward_from(g, pre, 1)?;
        let rgb = g.sigmoid(raw_c);
        Ok((sigma, rgb))
    }
}

/// Sample depths along one ray, each standing for an equal sub-interval of
/// `[near, far]` whose width is `deltas[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySampleSet {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl RaySampleSet {
    pub fn point(&self, k: usize) -> Vec3 {
        math::add(self.origin, math::scale(self.dir, self.depths[k]))
    }
}

/// Stratified samples: one uniform draw per equal sub-interval, or the
/// sub-interval midpoints when `jitter` is `None`.
pub fn sample_ray<R: Rng>(
    origin: Vec3,
    dir: Vec3,
    near: f64,
    far: f64,
    n: usize,
    jitter: Option<&mut R>,
) -> Result<RaySampleSet> {
    if !(near > 0.0 && far > near) || n < 2 {
        return Err(Error::InvalidArgument(format!(
            "ray bounds [{near}, {far}] with {n} samples"
        )));
    }
    let h = (far - near) / n as f64;
    let depths = match jitter {
        None => (0..n).map(|k| near + (k as f64 + 0.5) * h).collect(),
        Some(rng) => (0..n).map(|k| near + (k as f64 + rng.random::<f64>()) * h).collect(),
    };
    Ok(RaySampleSet {
        origin,
        dir,
        near,
        far,
        depths,
        deltas: vec![h; n],
    })
}

/// Samples for a ray clipped to `bbox`. Rays missing the box get a dummy
/// interval and `false` so their densities can be masked out.
pub fn sample_in_box<R: Rng>(
    origin: Vec3,
    dir: Vec3,
    bbox: &Bbox,
    n: usize,
    jitter: Option<&mut R>,
) -> Result<(RaySampleSet, bool)> {
    match math::ray_box(origin, dir, bbox.min, bbox.max) {
        Some((t0, t1)) if t1 - t0 > 1e-9 && t0 > 0.0 => Ok((sample_ray(origin, dir, t0, t1, n, jitter)?, true)),
        _ => Ok((sample_ray(origin, dir, 1.0, 2.0, n, jitter)?, false)),
    }
}

/// Graph outputs of [`composite_var`].
#[derive(Debug, Clone, Copy)]
pub struct RenderVars {
    /// `[R, 3]` composited colors.
    pub rgb: Var,
    /// `[R * N, 1]` sample weights `T_k alpha_k`.
    pub weights: Var,
    /// `[R * N, 3]` sample colors.
    pub colors: Var,
    /// `[R * N, 1]` sample densities.
    pub sigma: Var,
    /// `[R, 1]` transmittance past the last sample.
    pub t_far: Var,
}

/// Alpha compositing of `n` consecutive samples per ray over `background`.
pub fn composite_var<T: Real>(
    g: &mut Graph<T>,
    sigma: Var,
    colors: Var,
    deltas: Arc<Vec<T>>,
    n: usize,
    background: [f64; 3],
) -> Result<RenderVars> {
    let sd = g.mul_const_rows(sigma, deltas)?;
    let before = g.cumsum_exclusive(sd, n)?;
    let nb = g.neg(before);
    let trans = g.exp(nb);
    let nsd = g.neg(sd);
    let keep = g.exp(nsd);
    let nkeep = g.neg(keep);
    let alpha = g.add_scalar(nkeep, T::ONE);
    let weights = g.mul(trans, alpha)?;
    let wc = g.mul_col(colors, weights)?;
    let rgb = g.sum_groups(wc, n)?;
    let total = g.sum_groups(sd, n)?;
    let nt = g.neg(total);
    let t_far = g.exp(nt);
    let rays = g.shape(rgb)[0];
    let bg: Vec<T> = (0..rays).flat_map(|_| background.map(T::from_f64)).collect();
    let bg = g.constant(Tensor::matrix(rays, 3, bg));
    let bg = g.mul_col(bg, t_far)?;
    let rgb = g.add(rgb, bg)?;
    Ok(RenderVars {
        rgb,
        weights,
        colors,
        sigma,
        t_far,
    })
}

/// Renders rays through a feature grid variable. `samples[r]` holds ray
/// `r`'s samples (all with the same count); rays flagged `false` in `hits`
/// see only the background.
pub fn render_var<T: Real>(
    g: &mut Graph<T>,
    grid: Var,
    lattice: &Lattice,
    nets: &NetVars,
    samples: &[RaySampleSet],
    hits: &[bool],
    background: [f64; 3],
) -> Result<RenderVars> {
    let n = samples.first().map_or(0, |s| s.depths.len());
    let points: Vec<Vec3> = samples.iter().flat_map(|s| (0..n).map(move |k| s.point(k))).collect();
    let feats = grids::interp_var(g, grid, lattice, &points)?;
    shade_and_composite(g, feats, nets, samples, hits, &points, background)
}

/// Shading and compositing given per-sample features `[R * N, C]`.
pub fn shade_and_composite<T: Real>(
    g: &mut Graph<T>,
    feats: Var,
    nets: &NetVars,
    samples: &[RaySampleSet],
    hits: &[bool],
    points: &[Vec3],
    background: [f64; 3],
) -> Result<RenderVars> {
    let n = samples.first().map_or(0, |s| s.depths.len());
    if samples.iter().any(|s| s.depths.len() != n) || hits.len() != samples.len() {
        return Err(Error::ShapeMismatch("rays must share one sample count".into()));
    }
    let dirs: Vec<Vec3> = samples.iter().map(|s| s.dir).collect();
    let ray_of = Arc::new((0..samples.len() as u32).flat_map(|r| std::iter::repeat_n(r, n)).collect::<Vec<_>>());
    let (sigma, rgb) = nets.shade(g, feats, points, &dirs, ray_of)?;
    let live: Vec<T> = hits
        .iter()
        .flat_map(|&h| std::iter::repeat_n(if h { T::ONE } else { T::ZERO }, n))
        .collect();
    let sigma = g.mul_const_rows(sigma, Arc::new(live))?;
    let deltas: Vec<T> = samples.iter().flat_map(|s| s.deltas.iter().map(|&d| T::from_f64(d))).collect();
    composite_var(g, sigma, rgb, Arc::new(deltas), n, background)
}

/// Numeric result of rendering one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayRender {
    pub rgb: [f64; 3],
    pub weights: Vec<f64>,
    pub sigma: Vec<f64>,
    pub t_far: f64,
}

/// Renders one ray of `samples` through a fixed (already superposed) grid.
pub fn render<T: Real>(
    samples: &RaySampleSet,
    grid: &FeatureGrid<T>,
    nets: &RadianceNets<T>,
    background: [f64; 3],
) -> Result<RayRender> {
    let mut g = Graph::new();
    let nv = nets.bind(&mut g, false);
    let gv = g.constant(grid.data.clone());
    let rv = render_var(&mut g, gv, &grid.lattice(), &nv, std::slice::from_ref(samples), &[true], background)?;
    check(&g)?;
    let rgb = g.value(rv.rgb).to_f64_vec();
    Ok(RayRender {
        rgb: [rgb[0], rgb[1], rgb[2]],
        weights: g.value(rv.weights).to_f64_vec(),
        sigma: g.value(rv.sigma).to_f64_vec(),
        t_far: g.value(rv.t_far).item().to_f64(),
    })
}

pub(crate) fn check<T: Real>(g: &Graph<T>) -> Result<()> {
    g.check_finite().map_err(|e| Error::NonFinite(e.to_string()))
}

/// Density and color at points `xs` viewed along `d`, through a grid that is
/// already superposed for the query time.
pub fn query<T: Real>(xs: &[Vec3], d: Vec3, grid: &FeatureGrid<T>, nets: &RadianceNets<T>) -> Result<Vec<(f64, [f64; 3])>> {
    let mut g = Graph::new();
    let nv = nets.bind(&mut g, false);
    let gv = g.constant(grid.data.clone());
    let feats = grids::interp_var(&mut g, gv, &grid.lattice(), xs)?;
    let ray_of = Arc::new(vec![0u32; xs.len()]);
    let (sigma, rgb) = nv.shade(&mut g, feats, xs, &[math::normalize(d)], ray_of)?;
    check(&g)?;
    let s = g.value(sigma).to_f64_vec();
    let c = g.value(rgb).to_f64_vec();
    Ok(s.iter().enumerate().map(|(i, &si)| (si, [c[3 * i], c[3 * i + 1], c[3 * i + 2]])).collect())
}

/// Densities at many points, evaluated in chunks.
pub fn densities<T: Real>(xs: &[Vec3], grid: &FeatureGrid<T>, nets: &RadianceNets<T>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(16_384) {
        out.extend(query(chunk, [0.0, 0.0, 1.0], grid, nets)?.into_iter().map(|(s, _)| s));
    }
    Ok(out)
}

/// Marks a node occupied when its alpha over one voxel edge reaches
/// `eps_alpha` in any of the supplied fields (one per probe time).
pub fn update_occupancy<T: Real>(
    fields: &[FeatureGrid<T>],
    nets: &RadianceNets<T>,
    eps_alpha: f64,
) -> Result<OccupancyMask> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidArgument("no fields to probe".into()))?;
    let lat = first.lattice();
    let delta = first.voxel_edge();
    let mut nodes = Vec::with_capacity(lat.node_count());
    for i in 0..lat.dims[0] {
        for j in 0..lat.dims[1] {
            for k in 0..lat.dims[2] {
                nodes.push(grids::node_position(&lat, i, j, k));
            }
        }
    }
    let mut occupied = vec![false; nodes.len()];
    for f in fields {
        if f.dims != first.dims {
            return Err(Error::ShapeMismatch("probe fields differ in shape".into()));
        }
        for (o, s) in occupied.iter_mut().zip(densities(&nodes, f, nets)?) {
            *o |= 1.0 - (-s * delta).exp() >= eps_alpha;
        }
    }
    Ok(OccupancyMask::new(lat, occupied, eps_alpha))
}

/// Per-sample debug dump: `ray,k,depth,sigma,weight`.
pub fn write_ray_debug(path: &Path, rays: &[(RaySampleSet, RayRender)]) -> Result<()> {
    let mut s = String::from("ray,k,depth,sigma,weight\n");
    for (r, (samples, out)) in rays.iter().enumerate() {
        for k in 0..samples.depths.len() {
            let _ = writeln!(s, "{r},{k},{},{},{}", samples.depths[k], out.sigma[k], out.weights[k]);
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
