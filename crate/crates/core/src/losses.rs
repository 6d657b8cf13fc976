//! Training objectives: photometric, per-point RGB, background entropy, and
//! total variation on the superposed and motion grids.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::{Graph, Real, Tensor, Var};

/// Clamp applied to the far transmittance before the entropy.
pub const BG_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ptrgb: f64,
    pub bg: f64,
    pub tvf: f64,
    pub tvm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ptrgb: 0.01,
            bg: 0.001,
            tvf: 0.01,
            tvm: 0.01,
        }
    }
}

impl LossWeights {
    pub fn none() -> Self {
        Self {
            ptrgb: 0.0,
            bg: 0.0,
            tvf: 0.0,
            tvm: 0.0,
        }
    }
}

/// Per-term loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub photo: f64,
    pub ptrgb: f64,
    pub bg: f64,
    pub tvf: f64,
    pub tvm: f64,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("photo", self.photo),
            ("ptrgb", self.ptrgb),
            ("bg", self.bg),
            ("tvf", self.tvf),
            ("tvm", self.tvm),
        ]
    }
}

/// `photo + w1 ptrgb + w2 bg + w3 tvf + w4 tvm`; a non-finite term is
/// reported by name.
pub fn total(terms: &LossTerms, w: &LossWeights) -> Result<f64> {
    if let Some((name, v)) = terms.named().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss term {name} = {v}")));
    }
    Ok(terms.photo + w.ptrgb * terms.ptrgb + w.bg * terms.bg + w.tvf * terms.tvf + w.tvm * terms.tvm)
}

/// Weighted sum of loss variables; absent terms contribute nothing.
pub fn total_var<T: Real>(
    g: &mut Graph<T>,
    photo: Var,
    parts: &[(Option<Var>, f64)],
) -> Result<Var> {
    let mut acc = photo;
    for &(v, w) in parts {
        if let Some(v) = v {
            if w != 0.0 {
                let s = g.scale(v, T::from_f64(w));
                acc = g.add(acc, s)?;
            }
        }
    }
    Ok(acc)
}

/// Mean over rays of `||rgb - target||^2`.
pub fn photometric_var<T: Real>(g: &mut Graph<T>, rgb: Var, target: &Tensor<T>) -> Result<Var> {
    let t = g.constant(target.clone());
    let d = g.sub(rgb, t)?;
    let sq = g.mul(d, d)?;
    let per_ray = g.sum_cols(sq);
    Ok(g.mean(per_ray))
}

/// Mean over rays of `sum_k w_k ||c_k - target||^2` with the weights held
/// constant. Samples are grouped `n` per ray.
pub fn per_point_rgb_var<T: Real>(
    g: &mut Graph<T>,
    colors: Var,
    weights: Var,
    target: &Tensor<T>,
    n: usize,
) -> Result<Var> {
    let rays = target.rows();
    let ray_of = Arc::new((0..rays as u32).flat_map(|r| std::iter::repeat_n(r, n)).collect::<Vec<_>>());
    let t = g.constant(target.clone());
    let ts = g.gather(t, ray_of)?;
    let d = g.sub(colors, ts)?;
    let sq = g.mul(d, d)?;
    let per_sample = g.sum_cols(sq);
    let w = g.detach(weights);
    let weighted = g.mul(per_sample, w)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, T::from_f64(1.0 / rays.max(1) as f64)))
}

/// Mean binary entropy of the clamped far transmittance.
pub fn bg_entropy_var<T: Real>(g: &mut Graph<T>, t_far: Var) -> Result<Var> {
    let p = g.clamp(t_far, T::from_f64(BG_CLAMP), T::from_f64(1.0 - BG_CLAMP));
    let lp = g.log(p);
    let a = g.mul(p, lp)?;
    let np = g.neg(p);
    let q = g.add_scalar(np, T::ONE);
    let lq = g.log(q);
    let b = g.mul(q, lq)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.neg(m))
}

/// Forward-neighbor node pairs along each axis, skipping pairs with an
/// invalid endpoint.
pub fn tv_pairs(dims: [usize; 3], valid: Option<&[bool]>) -> [(Vec<u32>, Vec<u32>); 3] {
    let idx = |i: usize, j: usize, k: usize| ((i * dims[1] + j) * dims[2] + k) as u32;
    let ok = |n: u32| valid.is_none_or(|v| v[n as usize]);
    std::array::from_fn(|axis| {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let mut q = [i, j, k];
                    q[axis] += 1;
                    if q[axis] >= dims[axis] {
                        continue;
                    }
                    let (n0, n1) = (idx(i, j, k), idx(q[0], q[1], q[2]));
                    if ok(n0) && ok(n1) {
                        a.push(n0);
                        b.push(n1);
                    }
                }
            }
        }
        (a, b)
    })
}

/// `(1/N) sum over forward-neighbor pairs of ||G(n) - G(n')||_2`, with `N`
/// the node count, or the valid-node count when `valid` is given.
pub fn tv_var<T: Real>(g: &mut Graph<T>, grid: Var, dims: [usize; 3], valid: Option<&[bool]>) -> Result<Var> {
    let n_nodes = match valid {
        Some(v) => v.iter().filter(|&&x| x).count(),
        None => dims.iter().product(),
    };
    let mut acc: Option<Var> = None;
    for (a, b) in tv_pairs(dims, valid) {
        if a.is_empty() {
            continue;
        }
        let ga = g.gather(grid, Arc::new(a))?;
        let gb = g.gather(grid, Arc::new(b))?;
        let d = g.sub(ga, gb)?;
        let norms = g.row_norm(d);
        let s = g.sum(norms);
        acc = Some(match acc {
            Some(prev) => g.add(prev, s)?,
            None => s,
        });
    }
    match acc {
        Some(s) => Ok(g.scale(s, T::from_f64(1.0 / n_nodes.max(1) as f64))),
        None => Ok(g.constant(Tensor::scalar(T::ZERO))),
    }
}

fn eval<F: FnOnce(&mut Graph<f64>) -> Result<Var>>(f: F) -> Result<f64> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).item())
}

fn rows3(rows: &[[f64; 3]]) -> Tensor<f64> {
    Tensor::matrix(rows.len(), 3, rows.iter().flatten().copied().collect())
}

pub fn photometric(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if rendered.len() != target.len() {
        return Err(Error::ShapeMismatch(format!("{} rendered vs {} target rays", rendered.len(), target.len())));
    }
    eval(|g| {
        let r = g.constant(rows3(rendered));
        photometric_var(g, r, &rows3(target))
    })
}

/// `colors` and `weights` hold `n` samples per ray.
pub fn per_point_rgb(colors: &[[f64; 3]], weights: &[f64], target: &[[f64; 3]]) -> Result<f64> {
    let n = weights.len() / target.len().max(1);
    if colors.len() != weights.len() || n * target.len() != weights.len() {
        return Err(Error::ShapeMismatch("samples do not divide evenly into rays".into()));
    }
    eval(|g| {
        let c = g.constant(rows3(colors));
        let w = g.constant(Tensor::matrix(weights.len(), 1, weights.to_vec()));
        per_point_rgb_var(g, c, w, &rows3(target), n)
    })
}

pub fn bg_entropy(t_far: &[f64]) -> Result<f64> {
    eval(|g| {
        let t = g.constant(Tensor::matrix(t_far.len(), 1, t_far.to_vec()));
        bg_entropy_var(g, t)
    })
}

pub fn tv(grid: &crate::grids::FeatureGrid<f64>, valid: Option<&[bool]>) -> Result<f64> {
    if let Some(v) = valid {
        if v.len() != grid.node_count() {
            return Err(Error::ShapeMismatch("validity mask size differs from the grid".into()));
        }
    }
    eval(|g| {
        let v = g.constant(grid.data.clone());
        tv_var(g, v, grid.dims, valid)
    })
}
