//! Eulerian feature grids: the static grid, the per-time dynamic grid built
//! from particles, their masked superposition, the normalized motion grid,
//! trilinear queries and coarse-to-fine resizing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::ndiff::{scatter_binned, Graph, Lattice, Real, Tensor, Var};
use crate::particles::{self, MotionNet, ParticleSet};
use crate::scene::Bbox;

/// Dense `Nx x Ny x Nz` lattice of `C`-dim features spanning a bounding box;
/// node `(i, j, k)` sits at `bbox.min + (i, j, k) * cell` and is stored in
/// row `(i * Ny + j) * Nz + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T> {
    pub dims: [usize; 3],
    pub bbox: Bbox,
    /// `[Nx * Ny * Nz, C]`.
    pub data: Tensor<T>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn zeros(dims: [usize; 3], c: usize, bbox: Bbox) -> Result<Self> {
        check_dims(dims, &bbox)?;
        Ok(Self {
            dims,
            bbox,
            data: Tensor::zeros([dims.iter().product(), c]),
        })
    }

    pub fn from_data(dims: [usize; 3], bbox: Bbox, data: Tensor<T>) -> Result<Self> {
        check_dims(dims, &bbox)?;
        let n: usize = dims.iter().product();
        if data.shape().len() != 2 || data.rows() != n {
            return Err(Error::ShapeMismatch(format!(
                "grid {dims:?} needs {n} rows, data is {:?}",
                data.shape()
            )));
        }
        Ok(Self { dims, bbox, data })
    }

    /// Fills each node with `f(node position)`.
    pub fn from_fn(dims: [usize; 3], c: usize, bbox: Bbox, mut f: impl FnMut(Vec3) -> Vec<f64>) -> Result<Self> {
        let mut grid = Self::zeros(dims, c, bbox)?;
        let lat = grid.lattice();
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let n = lat.node_index(i, j, k);
                    let v = f(node_position(&lat, i, j, k));
                    for (d, x) in grid.data.row_mut(n).iter_mut().zip(v) {
                        *d = T::from_f64(x);
                    }
                }
            }
        }
        Ok(grid)
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn node_count(&self) -> usize {
        self.data.rows()
    }

    pub fn lattice(&self) -> Lattice {
        lattice_for(self.dims, &self.bbox)
    }

    /// Mean voxel edge length.
    pub fn voxel_edge(&self) -> f64 {
        self.lattice().cell.iter().sum::<f64>() / 3.0
    }

    pub fn cast<U: Real>(&self) -> FeatureGrid<U> {
        FeatureGrid {
            dims: self.dims,
            bbox: self.bbox,
            data: self.data.cast(),
        }
    }
}

fn check_dims(dims: [usize; 3], bbox: &Bbox) -> Result<()> {
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidArgument(format!("grid extents {dims:?} must all be >= 2")));
    }
    if bbox.is_degenerate() {
        return Err(Error::InvalidArgument("degenerate bounding box".into()));
    }
    Ok(())
}

pub fn lattice_for(dims: [usize; 3], bbox: &Bbox) -> Lattice {
    let ext = bbox.extent();
    Lattice {
        origin: bbox.min,
        cell: std::array::from_fn(|a| ext[a] / (dims[a] - 1) as f64),
        dims,
    }
}

pub fn node_position(lat: &Lattice, i: usize, j: usize, k: usize) -> Vec3 {
    let ijk = [i, j, k];
    std::array::from_fn(|a| lat.origin[a] + ijk[a] as f64 * lat.cell[a])
}

/// Grid extents for roughly `m` voxels: edge `s = cbrt(Lx Ly Lz / m)` and
/// `ceil(L / s)` nodes per axis (at least 2).
pub fn shape_from_bbox(bbox: &Bbox, m: usize) -> Result<[usize; 3]> {
    if m < 8 {
        return Err(Error::InvalidArgument(format!("target voxel count {m} < 8")));
    }
    if bbox.is_degenerate() {
        return Err(Error::InvalidArgument("degenerate bounding box".into()));
    }
    let l = bbox.extent();
    let s = (l[0] * l[1] * l[2] / m as f64).cbrt();
    // tolerance keeps exact ratios such as 2 / 0.25 from rounding up
    Ok(std::array::from_fn(|a| ((l[a] / s - 1e-9).ceil() as usize).max(2)))
}

/// Trilinear interpolation of node features at `x` (clamped into the box).
pub fn interp<T: Real>(grid: &FeatureGrid<T>, x: Vec3) -> Result<Vec<T>> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN query coordinate".into()));
    }
    let (idx, w, _, _) = grid.lattice().locate(x);
    let mut out = vec![T::ZERO; grid.channels()];
    for c in 0..8 {
        let wc = T::from_f64(w[c]);
        for (o, &v) in out.iter_mut().zip(grid.data.row(idx[c] as usize)) {
            *o += wc * v;
        }
    }
    Ok(out)
}

/// Dynamic grid `G^D(n) = sum_i w_{i->n} v_i` with its weight sums and mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterResult<T> {
    pub grid: FeatureGrid<T>,
    pub weight_sums: Vec<T>,
    /// `mask[n] = weight_sums[n] > 0`.
    pub mask: Vec<bool>,
    /// Alive particles whose position fell outside the box and was clamped.
    pub clamped: usize,
}

/// Graph handles produced by [`scatter_var`].
#[derive(Debug, Clone)]
pub struct ScatterVars<T> {
    pub grid: Var,
    /// `[P, 8]` trilinear weights.
    pub weights: Var,
    pub idx: Arc<Vec<u32>>,
    pub weight_sums: Vec<T>,
    pub mask: Vec<bool>,
    pub clamped: usize,
}

/// Particle-to-grid transfer of `features: [P, C]` at `positions: [P, 3]`.
pub fn scatter_var<T: Real>(
    g: &mut Graph<T>,
    lattice: &Lattice,
    positions: Var,
    features: Var,
) -> Result<ScatterVars<T>> {
    let n = lattice.node_count();
    let (weights, idx) = g.trilinear_weights(positions, lattice)?;
    let grid = g.weighted_scatter_add(features, weights, idx.clone(), n)?;
    let p = g.value(positions).rows();
    let ones = vec![T::ONE; p];
    let weight_sums = scatter_binned(&ones, 1, g.value(weights).data(), 8, &idx, n);
    let mask = weight_sums.iter().map(|&w| w > T::ZERO).collect();
    let hi = lattice.upper();
    let clamped = g
        .value(positions)
        .data()
        .chunks(3)
        .filter(|r| (0..3).any(|a| r[a].to_f64() < lattice.origin[a] || r[a].to_f64() > hi[a]))
        .count();
    Ok(ScatterVars {
        grid,
        weights,
        idx,
        weight_sums,
        mask,
        clamped,
    })
}

/// Dynamic grid of the alive particles at time `t`.
pub fn scatter<T: Real>(
    set: &ParticleSet<T>,
    net: &MotionNet<T>,
    t: f64,
    dims: [usize; 3],
    bbox: &Bbox,
) -> Result<ScatterResult<T>> {
    check_dims(dims, bbox)?;
    let lattice = lattice_for(dims, bbox);
    let pos = particles::position_at(set, net, t)?;
    let alive = Arc::new(set.alive_indices());
    let mut g = Graph::new();
    let p = g.constant(pos);
    let v = g.constant(set.features.clone());
    let (p, v) = particles::alive_rows(&mut g, p, v, &alive)?;
    let sv = scatter_var(&mut g, &lattice, p, v)?;
    Ok(ScatterResult {
        grid: FeatureGrid::from_data(dims, *bbox, g.value(sv.grid).clone())?,
        weight_sums: sv.weight_sums,
        mask: sv.mask,
        clamped: sv.clamped,
    })
}

/// `(1 - m) G^S + m G^D` with the mask treated as a constant.
pub fn superpose_var<T: Real>(g: &mut Graph<T>, gs: Var, gd: Var, mask: &[bool]) -> Result<Var> {
    let on: Vec<T> = mask.iter().map(|&m| if m { T::ONE } else { T::ZERO }).collect();
    let off: Vec<T> = mask.iter().map(|&m| if m { T::ZERO } else { T::ONE }).collect();
    let a = g.mul_const_rows(gs, Arc::new(off))?;
    let b = g.mul_const_rows(gd, Arc::new(on))?;
    Ok(g.add(a, b)?)
}

pub fn superpose<T: Real>(gs: &FeatureGrid<T>, sr: &ScatterResult<T>) -> Result<FeatureGrid<T>> {
    if gs.dims != sr.grid.dims || gs.channels() != sr.grid.channels() || sr.mask.len() != gs.node_count() {
        return Err(Error::ShapeMismatch(format!(
            "static grid {:?}x{} vs dynamic grid {:?}x{}",
            gs.dims,
            gs.channels(),
            sr.grid.dims,
            sr.grid.channels()
        )));
    }
    let mut data = gs.data.clone();
    for (n, &m) in sr.mask.iter().enumerate() {
        if m {
            data.row_mut(n).copy_from_slice(sr.grid.data.row(n));
        }
    }
    FeatureGrid::from_data(gs.dims, gs.bbox, data)
}

/// Trilinear gather of `grid: [N, C]` at constant points.
pub fn interp_var<T: Real>(g: &mut Graph<T>, grid: Var, lattice: &Lattice, points: &[Vec3]) -> Result<Var> {
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let p = g.constant(Tensor::from_f64([points.len(), 3], &flat)?);
    let (w, idx) = g.trilinear_weights(p, lattice)?;
    Ok(g.weighted_gather(grid, w, idx)?)
}

/// Normalized motion grid `G^m(n) = sum_i w_{i->n} o_i / w_n`; nodes with
/// `w_n = 0` hold zero and are reported invalid.
pub fn motion_grid_var<T: Real>(g: &mut Graph<T>, sv: &ScatterVars<T>, offsets: Var) -> Result<Var> {
    let n = sv.mask.len();
    let num = g.weighted_scatter_add(offsets, sv.weights, sv.idx.clone(), n)?;
    let p = g.value(offsets).rows();
    let ones = g.constant(Tensor::full([p, 1], T::ONE));
    let den = g.weighted_scatter_add(ones, sv.weights, sv.idx.clone(), n)?;
    // invalid nodes get denominator 1 so their (zero) numerator passes through
    let pad: Vec<T> = sv.mask.iter().map(|&m| if m { T::ZERO } else { T::ONE }).collect();
    let den = g.add_const(den, &Tensor::matrix(n, 1, pad))?;
    let l = g.log(den);
    let nl = g.neg(l);
    let inv = g.exp(nl);
    Ok(g.mul_col(num, inv)?)
}

/// Motion grid of the alive particles at `t`, plus node validity.
pub fn motion_grid<T: Real>(
    set: &ParticleSet<T>,
    net: &MotionNet<T>,
    t: f64,
    dims: [usize; 3],
    bbox: &Bbox,
) -> Result<(FeatureGrid<T>, Vec<bool>)> {
    check_dims(dims, bbox)?;
    let lattice = lattice_for(dims, bbox);
    let (off, pos) = particles::offsets_and_positions(set, net, t)?;
    let alive = Arc::new(set.alive_indices());
    let mut g = Graph::new();
    let p = g.constant(pos);
    let o = g.constant(off);
    let (p, o) = particles::alive_rows(&mut g, p, o, &alive)?;
    let sv = scatter_var(&mut g, &lattice, p, o)?;
    let gm = motion_grid_var(&mut g, &sv, o)?;
    Ok((FeatureGrid::from_data(dims, *bbox, g.value(gm).clone())?, sv.mask))
}

/// Resamples `grid` onto `dims` by trilinear interpolation at the new node
/// positions. The box is unchanged; shrinking is rejected.
pub fn resize<T: Real>(grid: &FeatureGrid<T>, dims: [usize; 3]) -> Result<FeatureGrid<T>> {
    check_dims(dims, &grid.bbox)?;
    let new_n: usize = dims.iter().product();
    if new_n < grid.node_count() {
        return Err(Error::InvalidArgument(format!(
            "resize from {:?} to {dims:?} would shrink the grid",
            grid.dims
        )));
    }
    if dims == grid.dims {
        return Ok(grid.clone());
    }
    let lat = lattice_for(dims, &grid.bbox);
    let c = grid.channels();
    let mut data = Vec::with_capacity(new_n * c);
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                data.extend(interp(grid, node_position(&lat, i, j, k))?);
            }
        }
    }
    FeatureGrid::from_data(dims, grid.bbox, Tensor::matrix(new_n, c, data))
}

/// Node occupancy from rendered alpha. A point is in known free space when
/// every corner of its containing cell is unoccupied.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMask {
    pub lattice: Lattice,
    pub occupied: Vec<bool>,
    pub eps_alpha: f64,
}

impl OccupancyMask {
    pub fn new(lattice: Lattice, occupied: Vec<bool>, eps_alpha: f64) -> Self {
        assert_eq!(occupied.len(), lattice.node_count(), "mask size must match the lattice");
        Self {
            lattice,
            occupied,
            eps_alpha,
        }
    }

    pub fn is_free(&self, p: Vec3) -> bool {
        let (idx, _, _, _) = self.lattice.locate(p);
        idx.iter().all(|&n| !self.occupied[n as usize])
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }
}

const GRID_MAGIC: &[u8; 8] = b"FGRID\x00\x01\x00";

/// Binary grid file: magic, `u32` extents and channel count, `f64` box
/// corners, then row-major `f32` features, all little-endian.
pub fn save_grid<T: Real>(grid: &FeatureGrid<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(64 + grid.data.len() * 4);
    buf.extend_from_slice(GRID_MAGIC);
    for d in grid.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(grid.channels() as u32).to_le_bytes());
    for v in grid.bbox.min.iter().chain(&grid.bbox.max) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in grid.data.data() {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_grid(path: &Path) -> Result<FeatureGrid<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    if bytes.len() < 72 || &bytes[..8] != GRID_MAGIC {
        return Err(bad("not a grid file"));
    }
    let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let f = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let dims = [u(8), u(12), u(16)];
    let c = u(20);
    let bbox = Bbox::new([f(24), f(32), f(40)], [f(48), f(56), f(64)]);
    let n: usize = dims.iter().product();
    if bytes.len() != 72 + n * c * 4 {
        return Err(bad("grid payload size does not match header"));
    }
    let data = bytes[72..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    FeatureGrid::from_data(dims, bbox, Tensor::matrix(n, c, data)).map_err(|e| Error::format(path, e))
}
