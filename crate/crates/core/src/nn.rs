//! Dense layers, small MLPs and sinusoidal encodings on top of [`crate::ndiff`].

use rand::Rng;

use crate::ndiff::{Graph, NdiffError, Real, Tensor, Var};

/// Frequency counts of the sinusoidal encodings.
pub const L_POSITION: usize = 10;
pub const L_TIME: usize = 8;
pub const L_DIRECTION: usize = 4;

/// Length of `encode` applied to a `dim`-vector with `l` frequencies.
pub fn encoded_len(dim: usize, l: usize) -> usize {
    dim * (1 + 2 * l)
}

/// Raw input followed, per frequency `2^k` (`k = 0..l`), by the sines and
/// then the cosines of `2^k * pi * x` for every component.
pub fn encode(x: &[f64], l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_len(x.len(), l));
    out.extend_from_slice(x);
    for k in 0..l {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        out.extend(x.iter().map(|&v| (f * v).sin()));
        out.extend(x.iter().map(|&v| (f * v).cos()));
    }
    out
}

/// Row-wise [`encode`] of a `[m, d]` variable.
pub fn encode_var<T: Real>(g: &mut Graph<T>, x: Var, l: usize) -> Result<Var, NdiffError> {
    let mut parts = Vec::with_capacity(1 + 2 * l);
    parts.push(x);
    for k in 0..l {
        let f = T::from_f64((1u64 << k) as f64 * std::f64::consts::PI);
        let s = g.scale(x, f);
        parts.push(g.sin(s));
        parts.push(g.cos(s));
    }
    g.concat(&parts)
}

/// Row-wise [`encode`] of constant rows.
pub fn encode_rows<T: Real>(rows: &[[f64; 3]], l: usize) -> Tensor<T> {
    let width = encoded_len(3, l);
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        data.extend(encode(r, l).into_iter().map(T::from_f64));
    }
    Tensor::matrix(rows.len(), width, data)
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    /// Uniform `+-1/sqrt(fan_in)` weights and biases.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect() };
        Self {
            weight: Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out)),
            bias: Tensor::matrix(1, fan_out, draw(fan_out)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros([fan_in, fan_out]),
            bias: Tensor::zeros([1, fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Graph handles of a bound [`Linear`].
#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, NdiffError> {
        let y = g.matmul(x, self.weight)?;
        g.add_row(y, self.bias)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> Mlp<T> {
    /// Layer sizes `dims[0] -> dims[1] -> ...`.
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zero_last(&mut self) {
        if let Some(l) = self.layers.last_mut() {
            l.weight = Tensor::zeros(l.weight.shape().to_vec());
            l.bias = Tensor::zeros(l.bias.shape().to_vec());
        }
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            layers: self.layers.iter().map(Linear::cast).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| LinearVars {
                    weight: g.leaf(l.weight.clone(), trainable),
                    bias: g.leaf(l.bias.clone(), trainable),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<LinearVars>,
}

impl MlpVars {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, NdiffError> {
        self.forward_from(g, x, 0)
    }

    /// Runs layers `start..` on `x`, the output of layer `start - 1` (ReLU
    /// precedes every layer but the first).
    pub fn forward_from<T: Real>(&self, g: &mut Graph<T>, mut x: Var, start: usize) -> Result<Var, NdiffError> {
        for (i, l) in self.layers.iter().enumerate().skip(start) {
            if i > 0 {
                x = g.relu(x);
            }
            x = l.forward(g, x)?;
        }
        Ok(x)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// First-layer product for a layer whose input is the concatenation
/// `[a | b]`: returns `a W_a` and `b W_b` without materializing the
/// concatenation (`W_a` is the first `a_cols` rows of the weight).
pub fn split_matmul<T: Real>(
    g: &mut Graph<T>,
    layer: &LinearVars,
    a_cols: usize,
    a: Var,
    b: Var,
) -> Result<(Var, Var), NdiffError> {
    let rows = g.shape(layer.weight)[0];
    let top = std::sync::Arc::new((0..a_cols as u32).collect::<Vec<_>>());
    let bottom = std::sync::Arc::new((a_cols as u32..rows as u32).collect::<Vec<_>>());
    let wa = g.gather(layer.weight, top)?;
    let wb = g.gather(layer.weight, bottom)?;
    let ya = g.matmul(a, wa)?;
    let yb = g.matmul(b, wb)?;
    Ok((ya, yb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encode_zero_and_half() {
        let e = encode(&[0.0, 0.0], 3);
        assert_eq!(e.len(), 2 + 2 * 2 * 3);
        for k in 0..3 {
            let base = 2 + k * 4;
            assert_eq!(&e[base..base + 2], &[0.0, 0.0]);
            assert_eq!(&e[base + 2..base + 4], &[1.0, 1.0]);
        }
        let e = encode(&[0.5], 1);
        assert!((e[1] - 1.0).abs() < 1e-6 && e[2].abs() < 1e-6);
        assert_eq!(encode(&[0.1, 0.2, 0.3], 10).len(), 63);
    }

    #[test]
    fn graph_encoding_matches_numeric() {
        let x = [[0.3, -0.7, 0.11], [0.0, 1.0, -1.0]];
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_f64([2, 3], &[0.3, -0.7, 0.11, 0.0, 1.0, -1.0]).unwrap());
        let e = encode_var(&mut g, v, 4).unwrap();
        let direct: Tensor<f64> = encode_rows(&x, 4);
        assert_eq!(g.value(e).shape(), direct.shape());
        for (a, b) in g.value(e).data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn split_matmul_equals_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lin = Linear::<f64>::init(5, 4, &mut rng);
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.constant(Tensor::from_f64([2, 2], &[-1., 0.5, 0.25, 2.]).unwrap());
        let lv = LinearVars {
            weight: g.constant(lin.weight.clone()),
            bias: g.constant(lin.bias.clone()),
        };
        let (ya, yb) = split_matmul(&mut g, &lv, 3, a, b).unwrap();
        let split = g.add(ya, yb).unwrap();
        let cat = g.concat(&[a, b]).unwrap();
        let full = g.matmul(cat, lv.weight).unwrap();
        for (x, y) in g.value(split).data().iter().zip(g.value(full).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
