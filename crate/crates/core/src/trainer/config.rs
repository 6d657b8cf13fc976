//! Flat `key = value` training configuration. Units are part of key names;
//! unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{Dynamics, Group, ModelConfig};
use crate::scene::Bbox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_rays: usize,
    pub samples_per_ray: usize,
    pub dynamics: Dynamics,
    pub particles: usize,
    pub channels: usize,
    pub motion_width: usize,
    pub net_width: usize,
    pub lr_features: f64,
    pub lr_starts: f64,
    pub lr_motion: f64,
    pub lr_grid: f64,
    pub lr_heads: f64,
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grid_voxels_initial: usize,
    pub grid_voxels_final: usize,
    /// `None` places milestones at 25% and 50% of the steps.
    pub grid_milestones_steps: Option<Vec<usize>>,
    /// 0 disables removal and resampling.
    pub removal_every_steps: usize,
    /// No removal event happens before this step.
    pub removal_start_step: usize,
    pub eps_alpha: f64,
    pub eps_traj_bbox_units: f64,
    pub resample_radius_voxels: f64,
    pub trajectory_samples: usize,
    pub w_ptrgb: f64,
    pub w_bg: f64,
    pub w_tvf: f64,
    pub w_tvm: f64,
    pub background_rgb: [f64; 3],
    /// 0 writes only the final checkpoint.
    pub checkpoint_every_steps: usize,
    /// 0 disables validation renders.
    pub validate_every_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            steps: 5000,
            batch_rays: 1024,
            samples_per_ray: 128,
            dynamics: Dynamics::Particles,
            particles: 20_000,
            channels: 12,
            motion_width: 64,
            net_width: 64,
            lr_features: 0.005,
            lr_starts: 0.001,
            lr_motion: 0.001,
            lr_grid: 0.1,
            lr_heads: 8e-4,
            lr_decay: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            grid_voxels_initial: 24 * 24 * 24,
            grid_voxels_final: 48 * 48 * 48,
            grid_milestones_steps: None,
            removal_every_steps: 250,
            removal_start_step: 0,
            eps_alpha: 1e-4,
            eps_traj_bbox_units: 0.1,
            resample_radius_voxels: 0.1,
            trajectory_samples: 16,
            w_ptrgb: w.ptrgb,
            w_bg: w.bg,
            w_tvf: w.tvf,
            w_tvm: w.tvm,
            background_rgb: [1.0; 3],
            checkpoint_every_steps: 0,
            validate_every_steps: 0,
            seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "steps" => self.steps = parse_num(key, v)?,
            "batch_rays" => self.batch_rays = parse_num(key, v)?,
            "samples_per_ray" => self.samples_per_ray = parse_num(key, v)?,
            "dynamics" => self.dynamics = v.parse()?,
            "particles" => self.particles = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "motion_width" => self.motion_width = parse_num(key, v)?,
            "net_width" => self.net_width = parse_num(key, v)?,
            "lr_features" => self.lr_features = parse_num(key, v)?,
            "lr_starts" => self.lr_starts = parse_num(key, v)?,
            "lr_motion" => self.lr_motion = parse_num(key, v)?,
            "lr_grid" => self.lr_grid = parse_num(key, v)?,
            "lr_heads" => self.lr_heads = parse_num(key, v)?,
            "lr_decay" => self.lr_decay = parse_num(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_num(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam_eps = parse_num(key, v)?,
            "grid_voxels_initial" => self.grid_voxels_initial = parse_num(key, v)?,
            "grid_voxels_final" => self.grid_voxels_final = parse_num(key, v)?,
            "grid_milestones_steps" => {
                self.grid_milestones_steps = if v == "auto" { None } else { Some(parse_list(key, v)?) }
            }
            "removal_every_steps" => self.removal_every_steps = parse_num(key, v)?,
            "removal_start_step" => self.removal_start_step = parse_num(key, v)?,
            "eps_alpha" => self.eps_alpha = parse_num(key, v)?,
            "eps_traj_bbox_units" => self.eps_traj_bbox_units = parse_num(key, v)?,
            "resample_radius_voxels" => self.resample_radius_voxels = parse_num(key, v)?,
            "trajectory_samples" => self.trajectory_samples = parse_num(key, v)?,
            "w_ptrgb" => self.w_ptrgb = parse_num(key, v)?,
            "w_bg" => self.w_bg = parse_num(key, v)?,
            "w_tvf" => self.w_tvf = parse_num(key, v)?,
            "w_tvm" => self.w_tvm = parse_num(key, v)?,
            "background_rgb" => {
                let c: Vec<f64> = parse_list(key, v)?;
                self.background_rgb = c
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected three comma-separated values")))?;
            }
            "checkpoint_every_steps" => self.checkpoint_every_steps = parse_num(key, v)?,
            "validate_every_steps" => self.validate_every_steps = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Defaults overridden by the assignments in `text`. Blank lines and
    /// `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, strip(e)))
    }

    /// Every key, one per line, in a form [`TrainConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("steps", self.steps.to_string());
        kv("batch_rays", self.batch_rays.to_string());
        kv("samples_per_ray", self.samples_per_ray.to_string());
        kv("dynamics", self.dynamics.to_string());
        kv("particles", self.particles.to_string());
        kv("channels", self.channels.to_string());
        kv("motion_width", self.motion_width.to_string());
        kv("net_width", self.net_width.to_string());
        kv("lr_features", self.lr_features.to_string());
        kv("lr_starts", self.lr_starts.to_string());
        kv("lr_motion", self.lr_motion.to_string());
        kv("lr_grid", self.lr_grid.to_string());
        kv("lr_heads", self.lr_heads.to_string());
        kv("lr_decay", self.lr_decay.to_string());
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("grid_voxels_initial", self.grid_voxels_initial.to_string());
        kv("grid_voxels_final", self.grid_voxels_final.to_string());
        kv(
            "grid_milestones_steps",
            self.grid_milestones_steps.as_deref().map_or("auto".into(), join),
        );
        kv("removal_every_steps", self.removal_every_steps.to_string());
        kv("removal_start_step", self.removal_start_step.to_string());
        kv("eps_alpha", self.eps_alpha.to_string());
        kv("eps_traj_bbox_units", self.eps_traj_bbox_units.to_string());
        kv("resample_radius_voxels", self.resample_radius_voxels.to_string());
        kv("trajectory_samples", self.trajectory_samples.to_string());
        kv("w_ptrgb", self.w_ptrgb.to_string());
        kv("w_bg", self.w_bg.to_string());
        kv("w_tvf", self.w_tvf.to_string());
        kv("w_tvm", self.w_tvm.to_string());
        kv("background_rgb", join(&self.background_rgb));
        kv("checkpoint_every_steps", self.checkpoint_every_steps.to_string());
        kv("validate_every_steps", self.validate_every_steps.to_string());
        kv("seed", self.seed.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let rates = [
            ("lr_features", self.lr_features),
            ("lr_starts", self.lr_starts),
            ("lr_motion", self.lr_motion),
            ("lr_grid", self.lr_grid),
            ("lr_heads", self.lr_heads),
        ];
        if let Some((k, v)) = rates.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return bad(format!("{k} = {v} must be a finite non-negative rate"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay = {} must lie in (0, 1]", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.batch_rays == 0 || self.samples_per_ray < 2 || self.trajectory_samples < 2 {
            return bad("batch_rays >= 1, samples_per_ray >= 2 and trajectory_samples >= 2 required".into());
        }
        if self.channels == 0 || self.motion_width == 0 || self.net_width == 0 {
            return bad("channels and widths must be positive".into());
        }
        if self.grid_voxels_initial < 8 || self.grid_voxels_final < self.grid_voxels_initial {
            return bad("grid voxel counts must satisfy 8 <= initial <= final".into());
        }
        let ms = self.milestones();
        if ms.windows(2).any(|w| w[1] <= w[0]) || ms.iter().any(|&m| m == 0 || m >= self.steps.max(1)) {
            return bad(format!("milestones {ms:?} must be strictly increasing within (0, steps)"));
        }
        let pos = [
            ("eps_alpha", self.eps_alpha),
            ("eps_traj_bbox_units", self.eps_traj_bbox_units),
            ("w_ptrgb", self.w_ptrgb),
            ("w_bg", self.w_bg),
            ("w_tvf", self.w_tvf),
            ("w_tvm", self.w_tvm),
        ];
        if let Some((k, v)) = pos.iter().find(|(_, v)| !(*v >= 0.0)) {
            return bad(format!("{k} = {v} must be non-negative"));
        }
        if !(self.resample_radius_voxels > 0.0) {
            return bad("resample_radius_voxels must be positive".into());
        }
        if self.background_rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("background_rgb components must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Milestone steps, resolving the automatic placement.
    pub fn milestones(&self) -> Vec<usize> {
        match &self.grid_milestones_steps {
            Some(m) => m.clone(),
            None if self.grid_voxels_final == self.grid_voxels_initial => Vec::new(),
            None => {
                let m = vec![self.steps / 4, self.steps / 2];
                if m[0] == 0 || m[1] <= m[0] {
                    Vec::new()
                } else {
                    m
                }
            }
        }
    }

    /// Voxel count in force after `k` milestones, interpolating the edge
    /// length linearly from the initial to the final count.
    pub fn voxels_after(&self, k: usize) -> usize {
        let m = self.milestones().len();
        if m == 0 || k == 0 {
            return self.grid_voxels_initial;
        }
        if k >= m {
            return self.grid_voxels_final;
        }
        let a = (self.grid_voxels_initial as f64).cbrt();
        let b = (self.grid_voxels_final as f64).cbrt();
        let e = a + (b - a) * k as f64 / m as f64;
        (e * e * e).round() as usize
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            ptrgb: self.w_ptrgb,
            bg: self.w_bg,
            tvf: self.w_tvf,
            tvm: self.w_tvm,
        }
    }

    pub fn base_rate(&self, g: Group) -> f64 {
        match g {
            Group::Features => self.lr_features,
            Group::Starts => self.lr_starts,
            Group::Motion => self.lr_motion,
            Group::Grid => self.lr_grid,
            Group::Heads => self.lr_heads,
        }
    }

    pub fn model_config(&self, grid_dims: [usize; 3], bbox: Bbox) -> ModelConfig {
        ModelConfig {
            dynamics: self.dynamics,
            particles: self.particles,
            channels: self.channels,
            grid_dims,
            motion_width: self.motion_width,
            net_width: self.net_width,
            bbox,
            background: self.background_rgb,
        }
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut c = TrainConfig::default();
        c.grid_milestones_steps = Some(vec![10, 20]);
        c.background_rgb = [0.0, 0.5, 1.0];
        c.dynamics = Dynamics::Deformation;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        let d = TrainConfig::default();
        assert_eq!(TrainConfig::parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        let e = TrainConfig::parse("steps = 10\nlr_featurs = 0.1\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("lr_featurs"), "{e}");
        assert!(TrainConfig::parse("steps 10").is_err());
        assert!(TrainConfig::parse("steps = ten").is_err());
        assert!(TrainConfig::parse("lr_grid = -1").is_err());
        assert!(TrainConfig::parse("steps = 100\ngrid_milestones_steps = 50,40").is_err());
        assert!(TrainConfig::parse("steps = 100\ngrid_milestones_steps = 50,100").is_err());
        let c = TrainConfig::parse("# comment\n\nsteps = 7 # trailing\n").unwrap();
        assert_eq!(c.steps, 7);
    }

    #[test]
    fn default_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.milestones(), vec![1250, 2500]);
        assert_eq!(c.voxels_after(0), 24 * 24 * 24);
        assert_eq!(c.voxels_after(1), 36 * 36 * 36);
        assert_eq!(c.voxels_after(2), 48 * 48 * 48);
        let short = TrainConfig {
            steps: 2,
            ..TrainConfig::default()
        };
        assert!(short.milestones().is_empty());
        assert_eq!(short.voxels_after(5), short.grid_voxels_initial);
    }
}
