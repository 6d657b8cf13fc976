//! Binary checkpoint: magic, JSON header length (u64 LE), JSON header, then
//! every parameter tensor followed by every moment pair as little-endian
//! f32.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Moments, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ndiff::Tensor;
use crate::scene::Bbox;

const MAGIC: &[u8; 8] = b"DYNCKPT\x01";

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    step: usize,
    failures: usize,
    grid_dims: [usize; 3],
    bbox: Bbox,
    particles: usize,
    alive: Vec<bool>,
    rng: RngState,
    shapes: Vec<Vec<usize>>,
    moment_steps: Vec<u64>,
}

fn push(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl TrainState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            failures: self.failures,
            grid_dims: self.model.static_grid.dims,
            bbox: self.model.bbox(),
            particles: self.model.particles.len(),
            alive: self.model.particles.alive.clone(),
            rng: RngState {
                seed: self.rng.get_seed().to_vec(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            shapes: self.model.tensors().iter().map(|(_, t)| t.shape().to_vec()).collect(),
            moment_steps: self.moments.iter().map(|m| m.steps).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.model.tensors() {
            push(&mut out, t);
        }
        for m in &self.moments {
            push(&mut out, &m.m);
            push(&mut out, &m.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let h: Header = serde_json::from_slice(&bytes[16..body_start]).map_err(|e| Error::format(path, e))?;
        h.config.validate()?;
        let mut cfg = h.config.model_config(h.grid_dims, h.bbox);
        cfg.particles = h.particles;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::<f32>::init(&cfg, &mut rng)?;
        if h.alive.len() != model.particles.len() {
            return Err(bad("alive mask length differs from the particle count"));
        }
        model.particles.alive = h.alive;
        let mut body = &bytes[body_start..];
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            if body.len() < 4 * n {
                return Err(bad("truncated tensor data"));
            }
            let data = body[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            body = &body[4 * n..];
            Ok(Tensor::new(shape.to_vec(), data)?)
        };
        {
            let tensors = model.tensors_mut();
            if tensors.len() != h.shapes.len() || h.moment_steps.len() != h.shapes.len() {
                return Err(bad("tensor count differs from the model layout"));
            }
            for ((_, t), shape) in tensors.into_iter().zip(&h.shapes) {
                if t.shape() != shape.as_slice() {
                    return Err(bad("tensor shape differs from the model layout"));
                }
                *t = take(shape)?;
            }
        }
        let mut moments = Vec::with_capacity(h.shapes.len());
        for (shape, &steps) in h.shapes.iter().zip(&h.moment_steps) {
            let m = take(shape)?;
            let v = take(shape)?;
            moments.push(Moments { m, v, steps });
        }
        if !body.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let seed: [u8; 32] = h.rng.seed.try_into().map_err(|_| bad("rng seed must be 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(h.rng.stream);
        rng.set_word_pos(h.rng.word_pos.parse().map_err(|_| bad("bad rng word position"))?);
        Ok(Self {
            config: h.config,
            model,
            moments,
            step: h.step,
            failures: h.failures,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

