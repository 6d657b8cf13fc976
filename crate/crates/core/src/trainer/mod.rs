//! Optimization loop: ray minibatches from one frame per step, Adam per
//! parameter group with exponential decay, coarse-to-fine grid growth and
//! periodic particle removal / resampling.

mod adam;
mod checkpoint;
mod config;
mod rundir;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids;
use crate::losses::{self, LossTerms, LossWeights};
use crate::model::{Bound, Dynamics, Group, Model};
use crate::ndiff::{Graph, Real, Tensor, Var};
use crate::particles;
use crate::radiance::{self, RaySampleSet};
use crate::scene::{Bbox, Dataset};

pub use adam::{AdamParams, Moments};
pub use config::TrainConfig;
pub use rundir::{train_to_dir, RunFiles};

/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_FAILURES: usize = 3;

/// Learning rate of each group at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub features: f64,
    pub starts: f64,
    pub motion: f64,
    pub grid: f64,
    pub heads: f64,
}

impl Rates {
    pub fn get(&self, g: Group) -> f64 {
        match g {
            Group::Features => self.features,
            Group::Starts => self.starts,
            Group::Motion => self.motion,
            Group::Grid => self.grid,
            Group::Heads => self.heads,
        }
    }
}

/// `base * decay^(step / steps)` for every group.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Rates {
    let f = if cfg.steps == 0 {
        1.0
    } else {
        cfg.lr_decay.powf(step as f64 / cfg.steps as f64)
    };
    let r = |g| cfg.base_rate(g) * f;
    Rates {
        features: r(Group::Features),
        starts: r(Group::Starts),
        motion: r(Group::Motion),
        grid: r(Group::Grid),
        heads: r(Group::Heads),
    }
}

/// Per-step log entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Index of the step (before the counter was incremented).
    pub step: usize,
    pub terms: LossTerms,
    pub total: f64,
    /// Particle-feature rate at this step.
    pub lr: f64,
    pub alive: usize,
    /// False when the step was skipped for a non-finite loss or gradient.
    pub applied: bool,
}

/// Outcome of one removal / resampling event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    pub step: usize,
    pub removed: usize,
    pub resampled: usize,
    pub alive: usize,
    pub occupied_nodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Step(StepRecord),
    Resize { step: usize, dims: [usize; 3] },
    Lifecycle(LifecycleEvent),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub lifecycle: Vec<LifecycleEvent>,
    pub resizes: Vec<(usize, [usize; 3])>,
}

/// Everything needed to continue training: the model, optimizer moments,
/// step counter and random stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model<f32>,
    /// One entry per tensor of [`Model::tensors`].
    pub moments: Vec<Moments<f32>>,
    pub step: usize,
    pub failures: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: TrainConfig, bbox: Bbox) -> Result<Self> {
        config.validate()?;
        let dims = grids::shape_from_bbox(&bbox, config.voxels_after(0))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(&config.model_config(dims, bbox), &mut rng)?;
        let moments = model.tensors().iter().map(|(_, t)| Moments::zeros(t.shape())).collect();
        Ok(Self {
            config,
            model,
            moments,
            step: 0,
            failures: 0,
            rng,
        })
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.config.adam_beta1,
            beta2: self.config.adam_beta2,
            eps: self.config.adam_eps,
        }
    }

    /// Rays from one uniformly drawn training frame with uniform pixels and
    /// jittered samples, advancing the run's random stream.
    pub fn draw_batch(&mut self, data: &Dataset) -> Result<Batch<f32>> {
        let cfg = &self.config;
        if data.split.train.is_empty() {
            return Err(Error::InvalidArgument("dataset has no training frames".into()));
        }
        let frame = &data.frames[data.split.train[self.rng.random_range(0..data.split.train.len())]];
        let (w, h) = (frame.image.width, frame.image.height);
        let bbox = self.model.bbox();
        let mut samples = Vec::with_capacity(cfg.batch_rays);
        let mut hits = Vec::with_capacity(cfg.batch_rays);
        let mut target = Vec::with_capacity(cfg.batch_rays * 3);
        for _ in 0..cfg.batch_rays {
            let (x, y) = (self.rng.random_range(0..w), self.rng.random_range(0..h));
            let (o, d) = frame.pose.ray_for_pixel(x, y)?;
            let (s, hit) = radiance::sample_in_box(o, d, &bbox, cfg.samples_per_ray, Some(&mut self.rng))?;
            samples.push(s);
            hits.push(hit);
            target.extend(frame.image.pixel(x, y));
        }
        Ok(Batch {
            time: frame.time,
            samples,
            hits,
            target: Tensor::matrix(cfg.batch_rays, 3, target),
        })
    }

    /// One optimization step on a random batch of rays from one random
    /// training frame.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepRecord> {
        let batch = self.draw_batch(data)?;
        let cfg = &self.config;
        let wts = cfg.loss_weights();
        let mut g = Graph::<f32>::new();
        let b = self.model.bind(&mut g, true);
        let (total, terms) = batch_loss(&self.model, &mut g, &b, &batch, &wts)?;
        let rates = lr_at(self.step, cfg);
        let mut rec = StepRecord {
            step: self.step,
            terms,
            total: g.value(total).item() as f64,
            lr: rates.features,
            alive: self.model.particles.alive_count(),
            applied: false,
        };
        let grads = match losses::total(&terms, &wts) {
            Ok(_) => {
                let grads = g.backward(total, &Tensor::scalar(1.0))?;
                let vars = b.vars();
                match vars.iter().position(|&v| grads.get(v).is_some_and(|t| !t.all_finite())) {
                    None => Ok((grads, vars)),
                    Some(i) => Err(Error::NonFinite(format!("gradient of parameter tensor {i}"))),
                }
            }
            Err(e) => Err(e),
        };
        drop(b);
        self.step += 1;
        match grads {
            Ok((grads, vars)) => {
                let adam = self.adam();
                let tensors = self.model.tensors_mut();
                for (((group, param), var), mom) in tensors.into_iter().zip(vars).zip(&mut self.moments) {
                    if let Some(grad) = grads.get(var) {
                        mom.update(param, grad, rates.get(group), &adam);
                    }
                }
                self.failures = 0;
                rec.applied = true;
            }
            Err(e) => {
                self.failures += 1;
                log::warn!("step {} skipped: {e}", rec.step);
                if self.failures >= MAX_FAILURES {
                    return Err(Error::Aborted(format!(
                        "{MAX_FAILURES} consecutive non-finite steps, last at step {}: {e}",
                        rec.step
                    )));
                }
            }
        }
        Ok(rec)
    }

    /// Grows the static grid to `voxels` by trilinear resampling and resets
    /// the grid moments.
    pub fn resize(&mut self, voxels: usize) -> Result<[usize; 3]> {
        let dims = grids::shape_from_bbox(&self.model.bbox(), voxels)?;
        if dims != self.model.static_grid.dims {
            self.model.static_grid = grids::resize(&self.model.static_grid, dims)?;
            let idx = self.tensor_index(Group::Grid);
            self.moments[idx] = Moments::zeros(&[self.model.static_grid.node_count(), self.model.static_grid.channels()]);
        }
        Ok(dims)
    }

    fn tensor_index(&self, group: Group) -> usize {
        self.model
            .tensors()
            .iter()
            .position(|(g, _)| *g == group)
            .expect("every model has each group")
    }

    /// Occupancy update, removal and resampling of every dead slot.
    pub fn lifecycle(&mut self) -> Result<LifecycleEvent> {
        let cfg = &self.config;
        let mask = self.model.occupancy(cfg.eps_alpha)?;
        let removed = particles::remove(
            &mut self.model.particles,
            &self.model.motion,
            &mask,
            cfg.eps_traj_bbox_units,
            cfg.trajectory_samples,
        )?;
        let dead: Vec<usize> = (0..self.model.particles.len())
            .filter(|&i| !self.model.particles.alive[i])
            .collect();
        let radius = cfg.resample_radius_voxels * self.model.static_grid.voxel_edge();
        let bbox = self.model.bbox();
        let added = particles::resample(&mut self.model.particles, &dead, radius, &bbox, &mut self.rng)?;
        for g in [Group::Features, Group::Starts] {
            let i = self.tensor_index(g);
            self.moments[i].reset_rows(&added);
        }
        Ok(LifecycleEvent {
            step: self.step,
            removed: removed.len(),
            resampled: added.len(),
            alive: self.model.particles.alive_count(),
            occupied_nodes: mask.occupied_count(),
        })
    }

    /// Trains until the configured step count, reporting every event.
    pub fn run(&mut self, data: &Dataset, on_event: impl FnMut(&Event, &TrainState) -> Result<()>) -> Result<History> {
        self.run_until(data, self.config.steps, on_event)
    }

    /// Like [`TrainState::run`] but stops once `stop` steps are done; the
    /// schedule still follows the configured step count.
    pub fn run_until(
        &mut self,
        data: &Dataset,
        stop: usize,
        mut on_event: impl FnMut(&Event, &TrainState) -> Result<()>,
    ) -> Result<History> {
        data.validate()?;
        let milestones = self.config.milestones();
        let mut hist = History::default();
        while self.step < stop.min(self.config.steps) {
            if let Some(k) = milestones.iter().position(|&m| m == self.step) {
                let dims = self.resize(self.config.voxels_after(k + 1))?;
                hist.resizes.push((self.step, dims));
                on_event(&Event::Resize { step: self.step, dims }, self)?;
            }
            let rec = self.train_step(data)?;
            hist.steps.push(rec);
            let every = self.config.removal_every_steps;
            // the lifecycle runs before the step is reported so that a
            // checkpoint taken on the step event resumes identically
            let due = every > 0 && self.step % every == 0 && self.step >= self.config.removal_start_step;
            let life = (due && self.model.dynamics == Dynamics::Particles)
                .then(|| self.lifecycle())
                .transpose()?;
            on_event(&Event::Step(rec), self)?;
            if let Some(ev) = life {
                log::info!(
                    "step {}: removed {} resampled {} alive {}",
                    ev.step,
                    ev.removed,
                    ev.resampled,
                    ev.alive
                );
                hist.lifecycle.push(ev);
                on_event(&Event::Lifecycle(ev), self)?;
            }
        }
        Ok(hist)
    }
}

/// Rays of one frame with their target colors.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub time: f64,
    pub samples: Vec<RaySampleSet>,
    pub hits: Vec<bool>,
    /// `[R, 3]` observed colors.
    pub target: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch {
            time: self.time,
            samples: self.samples.clone(),
            hits: self.hits.clone(),
            target: self.target.cast(),
        }
    }
}

/// Weighted training loss of `batch` through the bound parameters `b`.
/// Terms with zero weight are not built and log as zero.
pub fn batch_loss<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    b: &Bound,
    batch: &Batch<T>,
    wts: &LossWeights,
) -> Result<(Var, LossTerms)> {
    let n = batch.samples.first().map_or(0, |s| s.depths.len());
    let fwd = model.forward(g, b, batch.time, &batch.samples, &batch.hits)?;
    let dims = model.static_grid.dims;
    let photo = losses::photometric_var(g, fwd.render.rgb, &batch.target)?;
    let ptrgb = (wts.ptrgb > 0.0)
        .then(|| losses::per_point_rgb_var(g, fwd.render.colors, fwd.render.weights, &batch.target, n))
        .transpose()?;
    let bg = (wts.bg > 0.0).then(|| losses::bg_entropy_var(g, fwd.render.t_far)).transpose()?;
    let tvf = (wts.tvf > 0.0).then(|| losses::tv_var(g, fwd.grid, dims, None)).transpose()?;
    let tvm = match (&fwd.motion_grid, wts.tvm > 0.0) {
        (Some((gm, valid)), true) => Some(losses::tv_var(g, *gm, dims, Some(valid))?),
        _ => None,
    };
    let total = losses::total_var(
        g,
        photo,
        &[(ptrgb, wts.ptrgb), (bg, wts.bg), (tvf, wts.tvf), (tvm, wts.tvm)],
    )?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().to_f64());
    let terms = LossTerms {
        photo: val(Some(photo)),
        ptrgb: val(ptrgb),
        bg: val(bg),
        tvf: val(tvf),
        tvm: val(tvm),
    };
    Ok((total, terms))
}
