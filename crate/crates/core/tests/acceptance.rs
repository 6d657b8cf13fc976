//! Acceptance run: one PASS / FAIL line per criterion.
//!
//! Criteria 1-6 are exact properties and fail the run when violated. The
//! reconstruction, motion, lifecycle and loss trends (7-10) train real
//! models; by default they run at a reduced scale that fits a single CPU and
//! are reported without failing the run. `DYNFIELD_ACCEPTANCE=full` runs
//! them at the specified scale, `DYNFIELD_ACCEPTANCE=quick` skips them.
//! Results are also written to `acceptance.json` under the cargo target tmp
//! directory.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use dynfield::eval::{self, EvalOptions, MfeProtocol, VelocityField};
use dynfield::grids::{self, FeatureGrid};
use dynfield::losses::{self, LossTerms, LossWeights};
use dynfield::model::{Dynamics, Model};
use dynfield::ndiff::{Graph, Lattice, Tensor};
use dynfield::particles::{self, MotionNet, ParticleSet};
use dynfield::radiance::{self, RadianceNets};
use dynfield::scene::{self, Bbox, Dataset, GroundTruthOracle, SceneSpec, PRESETS};
use dynfield::trainer::{batch_loss, History, TrainConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};

struct Outcome {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
    data: Value,
}

fn line(o: &Outcome, tag: &str) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {:>2} {}{tag}: {verdict} | {}", o.id, o.title, o.detail);
}

// ---------------------------------------------------------------- 1

fn micro_dataset() -> Dataset {
    let mut spec = SceneSpec::preset("fall").unwrap();
    spec.frames = 4;
    spec.camera.width = 10;
    spec.camera.height = 10;
    scene::generate(&spec, 0).unwrap()
}

/// Loss whose exact gradient is what backprop computes: the per-point RGB
/// term sees its sample weights as constants frozen at the base point.
fn frozen_loss(model: &Model<f64>, batch: &dynfield::trainer::Batch<f64>, w: &LossWeights, w0: &Tensor<f64>) -> f64 {
    let n = batch.samples[0].depths.len();
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let rest = LossWeights { ptrgb: 0.0, ..*w };
    let (total, _) = batch_loss(model, &mut g, &b, batch, &rest).unwrap();
    let fwd = model.forward(&mut g, &b, batch.time, &batch.samples, &batch.hits).unwrap();
    let wv = g.constant(w0.clone());
    let p = losses::per_point_rgb_var(&mut g, fwd.render.colors, wv, &batch.target, n).unwrap();
    g.value(total).item() + w.ptrgb * g.value(p).item()
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let data = micro_dataset();
    let cfg = TrainConfig {
        batch_rays: 4,
        samples_per_ray: 8,
        particles: 50,
        channels: 4,
        motion_width: 16,
        net_width: 16,
        grid_voxels_initial: 512,
        grid_voxels_final: 512,
        ..TrainConfig::default()
    };
    let mut st = TrainState::new(cfg.clone(), data.bbox).unwrap();
    let batch = st.draw_batch(&data).unwrap().cast::<f64>();
    let mut model: Model<f64> = st.model.cast();

    // move every parameter off its initialization so each group is in a
    // generic regime (non-zero motion output, visible density)
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Normal::new(0.0, 0.3).unwrap();
    for (_, t) in model.tensors_mut() {
        for x in t.data_mut() {
            *x += noise.sample(&mut rng);
        }
    }
    let b = model.bbox();
    for row in model.particles.starts.data_mut().chunks_mut(3) {
        for a in 0..3 {
            row[a] = row[a].clamp(b.min[a] + 0.05, b.max[a] - 0.05);
        }
    }
    let last = model.nets.density.layers.len() - 1;
    for x in model.nets.density.layers[last].bias.data_mut() {
        *x += 10.0;
    }

    let w = cfg.loss_weights();
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let (total, _) = batch_loss(&model, &mut g, &b, &batch, &w).unwrap();
    let grads = g.backward(total, &Tensor::scalar(1.0)).unwrap();
    let analytic: Vec<Tensor<f64>> = b
        .vars()
        .iter()
        .zip(model.tensors())
        .map(|(&v, (_, t))| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    let base = g.value(total).item();
    let w0 = {
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let f = model.forward(&mut g, &b, batch.time, &batch.samples, &batch.hits).unwrap();
        g.value(f.render.weights).clone()
    };
    let frozen_base = frozen_loss(&model, &batch, &w, &w0);

    let mut labels = vec!["particle features", "particle starts"];
    labels.extend(std::iter::repeat_n("motion net", model.motion.tensors().len()));
    labels.push("static grid");
    labels.extend(std::iter::repeat_n("phi_v", model.nets.phi_v.tensors().len()));
    labels.extend(std::iter::repeat_n("density head", model.nets.density.tensors().len()));
    labels.extend(std::iter::repeat_n("color head", model.nets.color.tensors().len()));
    assert_eq!(labels.len(), analytic.len());

    let per_tensor = 10;
    let mut groups: BTreeMap<&str, (f64, f64, f64)> = BTreeMap::new();
    for (k, a) in analytic.iter().enumerate() {
        let len = a.len();
        // the largest analytic entries plus random ones
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|&i, &j| a.data()[j].abs().total_cmp(&a.data()[i].abs()));
        let mut picks: Vec<usize> = order.into_iter().take(per_tensor / 2).collect();
        for _ in 0..per_tensor / 2 {
            picks.push(rng.random_range(0..len));
        }
        picks.sort_unstable();
        picks.dedup();
        for j in picks {
            let x0 = model.tensors()[k].1.data()[j];
            // central differences over a sweep of steps; the estimate where
            // consecutive steps agree best is taken as converged
            let est: Vec<f64> = [1e-5, 1e-6, 1e-7, 1e-8, 1e-9]
                .iter()
                .map(|&s| {
                    let h = s * x0.abs().max(1.0);
                    model.tensors_mut()[k].1.data_mut()[j] = x0 + h;
                    let up = frozen_loss(&model, &batch, &w, &w0);
                    model.tensors_mut()[k].1.data_mut()[j] = x0 - h;
                    let down = frozen_loss(&model, &batch, &w, &w0);
                    model.tensors_mut()[k].1.data_mut()[j] = x0;
                    (up - down) / (2.0 * h)
                })
                .collect();
            let i = (0..est.len() - 1)
                .min_by(|&i, &j| (est[i] - est[i + 1]).abs().total_cmp(&(est[j] - est[j + 1]).abs()))
                .unwrap();
            let num = est[i + 1];
            let e = groups.entry(labels[k]).or_default();
            e.0 += (a.data()[j] - num).powi(2);
            e.1 += a.data()[j].powi(2);
            e.2 += num.powi(2);
        }
    }
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    let mut data = serde_json::Map::new();
    for (name, (d, a, n)) in &groups {
        let scale = a.sqrt().max(n.sqrt());
        let rel = if scale > 0.0 { d.sqrt() / scale } else { f64::INFINITY };
        worst = worst.max(rel);
        parts.push(format!("{name} {rel:.1e}"));
        data.insert(name.to_string(), json!(rel));
    }
    let secs = start.elapsed().as_secs_f64();
    let same = (base - frozen_base).abs() <= 1e-12 * base.abs().max(1.0);
    Outcome {
        id: 1,
        title: "gradient fidelity",
        pass: worst <= 1e-4 && same && secs <= 120.0 && groups.len() == 7,
        detail: format!("max rel err {worst:.1e} over {} groups [{}], {secs:.1} s", groups.len(), parts.join(", ")),
        data: json!({ "relative_error": data, "seconds": secs }),
    }
}

// ---------------------------------------------------------------- 2, 3

fn lattice(dims: [usize; 3], bbox: &Bbox) -> Lattice {
    grids::lattice_for(dims, bbox)
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, bbox: &Bbox) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| std::array::from_fn(|a| rng.random_range(bbox.min[a]..bbox.max[a])))
        .collect()
}

/// Naive per-particle loop over the 8 corners of the containing cell.
fn naive_scatter(lat: &Lattice, pos: &[[f64; 3]], feats: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = feats[0].len();
    let [nx, ny, nz] = lat.dims;
    let mut out = vec![vec![0.0; c]; nx * ny * nz];
    for (p, v) in pos.iter().zip(feats) {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let u = (p[a] - lat.origin[a]) / lat.cell[a];
            let i = (u.floor() as usize).min(lat.dims[a] - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        for corner in 0..8 {
            let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            let (i, j, k) = (base[0] + off[0], base[1] + off[1], base[2] + off[2]);
            let node = (i * ny + j) * nz + k;
            for ch in 0..c {
                out[node][ch] += w * v[ch];
            }
        }
    }
    out
}

fn binned_scatter(lat: &Lattice, pos: &[[f64; 3]], feats: &[Vec<f64>]) -> Tensor<f64> {
    let c = feats[0].len();
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::from_f64([pos.len(), 3], &pos.concat()).unwrap());
    let v = g.constant(Tensor::from_f64([feats.len(), c], &feats.concat()).unwrap());
    let sv = grids::scatter_var(&mut g, lat, p, v).unwrap();
    g.value(sv.grid).clone()
}

fn scatter_oracle() -> Outcome {
    let bbox = Bbox::new([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]);
    let lat = lattice([24, 24, 24], &bbox);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pos = random_points(&mut rng, 1000, &bbox);
    let feats: Vec<Vec<f64>> = (0..1000).map(|_| (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let naive = naive_scatter(&lat, &pos, &feats);
    let fast = binned_scatter(&lat, &pos, &feats);
    let max_err = naive
        .iter()
        .enumerate()
        .flat_map(|(n, row)| row.iter().enumerate().map(move |(ch, &x)| (n, ch, x)))
        .map(|(n, ch, x)| (x - fast.row(n)[ch]).abs())
        .fold(0.0, f64::max);

    // thread-count independence of the full pipeline scatter
    let set_rng = &mut ChaCha8Rng::seed_from_u64(3);
    let mut set = ParticleSet::<f32>::init(1000, 12, &bbox, set_rng);
    for x in set.features.data_mut() {
        *x = set_rng.random_range(-1.0..1.0);
    }
    let net = MotionNet::<f32>::init(16, set_rng);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| grids::scatter(&set, &net, 0.4, [24, 24, 24], &bbox).unwrap())
    };
    let one = run(1);
    let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let deterministic = [2, 4].iter().all(|&n| {
        let other = run(n);
        bits(&other.grid.data) == bits(&one.grid.data) && other.mask == one.mask
    });
    Outcome {
        id: 2,
        title: "scatter oracle",
        pass: max_err <= 1e-6 && deterministic,
        detail: format!("max |binned - naive| {max_err:.1e} over 1000 particles; identical bits at 1/2/4 threads: {deterministic}"),
        data: json!({ "max_error": max_err, "deterministic": deterministic }),
    }
}

fn unity_and_adjointness() -> Outcome {
    let bbox = Bbox::new([-1.0, -0.5, -2.0], [1.5, 1.0, 0.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lat = lattice([13, 9, 17], &bbox);
    let pts = random_points(&mut rng, 10_000, &bbox);
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::from_f64([pts.len(), 3], &pts.concat()).unwrap());
    let (w, _) = g.trilinear_weights(p, &lat).unwrap();
    let unity = g
        .value(w)
        .data()
        .chunks(8)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    let mut adj: f64 = 0.0;
    for inst in 0..100 {
        let dims = [rng.random_range(2..9), rng.random_range(2..9), rng.random_range(2..9)];
        let lat = lattice(dims, &bbox);
        let n = lat.node_count();
        let c = 1 + inst % 4;
        let np = rng.random_range(1..60);
        let pos = random_points(&mut rng, np, &bbox);
        let v: Vec<f64> = (0..np * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grid: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let pv = g.constant(Tensor::from_f64([np, 3], &pos.concat()).unwrap());
        let vv = g.constant(Tensor::from_f64([np, c], &v).unwrap());
        let gv = g.constant(Tensor::from_f64([n, c], &grid).unwrap());
        let sv = grids::scatter_var(&mut g, &lat, pv, vv).unwrap();
        let lhs: f64 = g.value(sv.grid).data().iter().zip(&grid).map(|(a, b)| a * b).sum();
        let (wv, idx) = g.trilinear_weights(pv, &lat).unwrap();
        let gathered = g.weighted_gather(gv, wv, idx).unwrap();
        let rhs: f64 = g.value(gathered).data().iter().zip(&v).map(|(a, b)| a * b).sum();
        adj = adj.max((lhs - rhs).abs());
    }
    Outcome {
        id: 3,
        title: "partition of unity and adjointness",
        pass: unity <= 1e-6 && adj <= 1e-5,
        detail: format!("max |sum w - 1| {unity:.1e} at 10^4 points; max adjoint gap {adj:.1e} on 100 instances"),
        data: json!({ "unity": unity, "adjoint": adj }),
    }
}

// ---------------------------------------------------------------- 4

fn renderer_analytics() -> Outcome {
    let (sn, sf, n) = (0.7, 3.1, 256);
    let mut worst_far: f64 = 0.0;
    for sigma in [0.01, 0.3, 1.0, 2.5] {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::full([n, 1], sigma));
        let c = g.constant(Tensor::full([n, 3], 0.5));
        let deltas = Arc::new(vec![(sf - sn) / n as f64; n]);
        let rv = radiance::composite_var(&mut g, s, c, deltas, n, [1.0; 3]).unwrap();
        let expect = (-sigma * (sf - sn)).exp();
        worst_far = worst_far.max((g.value(rv.t_far).item() - expect).abs());
    }

    // every ray of a randomly initialized field with a visible density
    let bbox = Bbox::new([-1.0; 3], [1.0; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut nets = RadianceNets::<f32>::init(8, 32, &mut rng);
    let last = nets.density.layers.len() - 1;
    nets.density.layers[last].bias.data_mut()[0] = 11.0;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let grid = FeatureGrid::from_fn([12, 12, 12], 8, bbox, |_| (0..8).map(|_| normal.sample(&mut rng)).collect()).unwrap();
    let mut worst_sum: f64 = 0.0;
    let rays = 200;
    for _ in 0..rays {
        let o: [f64; 3] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let target: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
        let d = dynfield::math::normalize(dynfield::math::sub(target, o));
        let (s, _) = radiance::sample_in_box(o, d, &bbox, 64, Some(&mut rng)).unwrap();
        let r = radiance::render(&s, &grid, &nets, [1.0; 3]).unwrap();
        let total: f64 = r.weights.iter().sum::<f64>() + r.t_far;
        worst_sum = worst_sum.max((total - 1.0).abs());
    }
    Outcome {
        id: 4,
        title: "renderer analytics",
        pass: worst_far <= 1e-3 && worst_sum <= 1e-6,
        detail: format!("max |T_far - exp(-sigma L)| {worst_far:.1e} (N=256); max |sum w + T_far - 1| {worst_sum:.1e} over {rays} rays"),
        data: json!({ "t_far_error": worst_far, "closure_error": worst_sum }),
    }
}

// ---------------------------------------------------------------- 5

fn loss_analytics() -> Outcome {
    let bbox = Bbox::new([-1.0; 3], [1.0; 3]);
    let grid = FeatureGrid::from_fn([7, 5, 6], 4, bbox, |_| vec![0.3, -1.2, 4.0, 0.0]).unwrap();
    let tv = losses::tv(&grid, None).unwrap();
    let img: Vec<[f64; 3]> = (0..50).map(|i| [i as f64 / 50.0, 0.2, 0.9]).collect();
    let photo = losses::photometric(&img, &img).unwrap();
    let bg = losses::bg_entropy(&[0.5; 9]).unwrap();
    let unit = LossTerms {
        photo: 1.0,
        ptrgb: 1.0,
        bg: 1.0,
        tvf: 1.0,
        tvm: 1.0,
    };
    let total = losses::total(&unit, &LossWeights::default()).unwrap();
    let bg_err = (bg - std::f64::consts::LN_2).abs();
    Outcome {
        id: 5,
        title: "loss analytics",
        pass: tv == 0.0 && photo == 0.0 && bg_err <= 1e-6 && total == 1.031,
        detail: format!("TV(const) {tv}, photometric(same) {photo}, |bg(0.5) - ln 2| {bg_err:.1e}, total(unit) {total}"),
        data: json!({ "tv": tv, "photo": photo, "bg_error": bg_err, "total": total }),
    }
}

// ---------------------------------------------------------------- 6

fn mfe_metric() -> Outcome {
    let bbox = Bbox::new([-1.0; 3], [1.0; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut random_field = || {
        let mut f = VelocityField::zeros(9, bbox);
        for v in &mut f.velocity {
            *v = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        }
        f
    };
    let (a, b) = (random_field(), random_field());
    let self_err = eval::mfe(&a, &a).unwrap();
    let sym = (eval::mfe(&a, &b).unwrap() - eval::mfe(&b, &a).unwrap()).abs();
    let u = [0.3, -1.1, 0.25];
    let mut uf = VelocityField::zeros(9, bbox);
    uf.velocity.fill(u);
    let const_err = (eval::mfe(&VelocityField::zeros(9, bbox), &uf).unwrap() - dynfield::math::norm(u)).abs();

    // protocol on a small particle model against the scene oracle
    let data = micro_dataset();
    let cfg = TrainConfig {
        particles: 300,
        channels: 4,
        motion_width: 16,
        net_width: 16,
        grid_voxels_initial: 512,
        grid_voxels_final: 512,
        ..TrainConfig::default()
    };
    let st = TrainState::new(cfg, data.bbox).unwrap();
    let p = MfeProtocol::default();
    let oracle = GroundTruthOracle::new(data.scene.clone().unwrap());
    let (mean, per) =
        eval::mfe_over_times(&p, &oracle, data.bbox, |t| eval::model_velocity_field(&st.model, t, &p, 1e-4)).unwrap();
    let field = eval::model_velocity_field(&st.model, 0.5, &p, 1e-4).unwrap();
    let protocol_ok = field.len() == 27_000
        && p.dt == 0.01
        && p.times == [0.1, 0.3, 0.5, 0.7, 0.9]
        && per.len() == 5
        && mean.is_finite();
    Outcome {
        id: 6,
        title: "MFE metric",
        pass: self_err == 0.0 && sym <= 1e-12 && const_err <= 1e-9 && protocol_ok,
        detail: format!(
            "mfe(F,F) {self_err}, asymmetry {sym:.1e}, |mfe(0,u) - |u|| {const_err:.1e}; protocol N={} dt={} times={:?} ran: {protocol_ok}",
            field.len(),
            p.dt,
            p.times
        ),
        data: json!({ "self": self_err, "asymmetry": sym, "constant": const_err, "protocol_ok": protocol_ok }),
    }
}

// ---------------------------------------------------------------- 7-10

#[derive(Debug, Clone, Copy)]
struct Scale {
    label: &'static str,
    frames: usize,
    px: usize,
    edge: usize,
    /// High, mid and low particle counts.
    particles: [usize; 3],
    steps: usize,
    batch: usize,
    samples: usize,
    removal_every: usize,
    /// First step at which removal may happen.
    removal_start: usize,
    seeds: u64,
}

const FULL: Scale = Scale {
    label: "full scale",
    frames: 60,
    px: 64,
    edge: 48,
    particles: [20_000, 2_000, 500],
    steps: 5_000,
    batch: 1024,
    samples: 128,
    removal_every: 250,
    removal_start: 2_500,
    seeds: 3,
};

const REDUCED: Scale = Scale {
    label: "reduced scale",
    frames: 24,
    px: 32,
    edge: 24,
    particles: [2_000, 200, 50],
    steps: 300,
    batch: 256,
    samples: 48,
    removal_every: 30,
    removal_start: 150,
    seeds: 3,
};

struct RunResult {
    psnr: f64,
    mfe: f64,
    mfe_zero: f64,
    hist: History,
    state: TrainState,
    seconds: f64,
}

struct Lab {
    scale: Scale,
    data: BTreeMap<&'static str, Dataset>,
}

impl Lab {
    fn new(scale: Scale) -> Self {
        let data = PRESETS
            .iter()
            .map(|&name| {
                let mut spec = SceneSpec::preset(name).unwrap();
                spec.frames = scale.frames;
                spec.camera.width = scale.px;
                spec.camera.height = scale.px;
                (name, scene::generate(&spec, 0).unwrap())
            })
            .collect();
        Self { scale, data }
    }

    fn config(&self, particles: usize, seed: u64, dynamics: Dynamics, aux: bool) -> TrainConfig {
        let s = self.scale;
        let half = (s.edge / 2).max(2);
        let mut c = TrainConfig {
            steps: s.steps,
            batch_rays: s.batch,
            samples_per_ray: s.samples,
            particles,
            dynamics,
            grid_voxels_initial: half.pow(3),
            grid_voxels_final: s.edge.pow(3),
            removal_every_steps: s.removal_every,
            removal_start_step: s.removal_start,
            seed,
            ..TrainConfig::default()
        };
        if !aux {
            c.w_ptrgb = 0.0;
            c.w_bg = 0.0;
            c.w_tvf = 0.0;
            c.w_tvm = 0.0;
        }
        c
    }

    fn run(&self, preset: &'static str, cfg: TrainConfig) -> RunResult {
        let start = Instant::now();
        let data = &self.data[preset];
        let mut state = TrainState::new(cfg, data.bbox).unwrap();
        let hist = state.run(data, |_, _| Ok(())).unwrap();
        let opts = EvalOptions {
            samples_per_ray: state.config.samples_per_ray,
            eps_alpha: state.config.eps_alpha,
            protocol: MfeProtocol::default(),
            steps: state.step,
            baseline: None,
        };
        let report = eval::evaluate(&state.model, data, &opts).unwrap();
        let r = RunResult {
            psnr: report.psnr_mean,
            mfe: report.mfe_particles.unwrap(),
            mfe_zero: report.mfe_zero_motion.unwrap(),
            hist,
            state,
            seconds: start.elapsed().as_secs_f64(),
        };
        eprintln!(
            "  run {preset} {:?} particles={} seed={} aux={}: psnr {:.2} mfe {:.4} (zero {:.4}) alive {} [{:.0} s]",
            r.state.config.dynamics,
            r.state.config.particles,
            r.state.config.seed,
            r.state.config.w_tvf > 0.0,
            r.psnr,
            r.mfe,
            r.mfe_zero,
            r.state.model.particles.alive_count(),
            r.seconds
        );
        r
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn trends(scale: Scale) -> Vec<Outcome> {
    let lab = Lab::new(scale);
    let seeds: Vec<u64> = (0..scale.seeds).collect();
    let [hi, mid, lo] = scale.particles;

    // particle runs at the high count on every preset, shared by 7-10
    let mut full: BTreeMap<&str, Vec<RunResult>> = BTreeMap::new();
    for &p in &PRESETS {
        for &s in &seeds {
            full.entry(p).or_default().push(lab.run(p, lab.config(hi, s, Dynamics::Particles, true)));
        }
    }

    // 7: static ablation and particle-count trend on fall
    let statics: Vec<f64> = seeds
        .iter()
        .map(|&s| lab.run("fall", lab.config(hi, s, Dynamics::Static, true)).psnr)
        .collect();
    let counts: Vec<[f64; 3]> = seeds
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            [
                full["fall"][k].psnr,
                lab.run("fall", lab.config(mid, s, Dynamics::Particles, true)).psnr,
                lab.run("fall", lab.config(lo, s, Dynamics::Particles, true)).psnr,
            ]
        })
        .collect();
    let full_fall: Vec<f64> = full["fall"].iter().map(|r| r.psnr).collect();
    let gain = mean(&full_fall) - mean(&statics);
    let tol = 0.3;
    let monotone = counts.iter().all(|c| c[0] + tol >= c[1] && c[1] + tol >= c[2]);
    let o7 = Outcome {
        id: 7,
        title: "toy reconstruction",
        pass: gain >= 3.0 && monotone,
        detail: format!(
            "(a) full {:.2} dB vs static {:.2} dB, gain {gain:.2} (need >= 3); (b) PSNR at {hi}/{mid}/{lo} particles per seed {} monotone within {tol} dB: {monotone}",
            mean(&full_fall),
            mean(&statics),
            counts
                .iter()
                .map(|c| format!("{:.2}/{:.2}/{:.2}", c[0], c[1], c[2]))
                .collect::<Vec<_>>()
                .join(", ")
        ),
        data: json!({ "full": full_fall, "static": statics, "counts": counts }),
    };

    // 8: motion ordering
    let mut rows = Vec::new();
    let mut half_ok = true;
    let mut beats = 0;
    for &p in &PRESETS {
        let parts: Vec<f64> = full[p].iter().map(|r| r.mfe).collect();
        let zero: Vec<f64> = full[p].iter().map(|r| r.mfe_zero).collect();
        let deform: Vec<f64> = seeds
            .iter()
            .map(|&s| lab.run(p, lab.config(hi, s, Dynamics::Deformation, true)).mfe)
            .collect();
        half_ok &= parts.iter().zip(&zero).all(|(a, z)| *a < 0.5 * z);
        let win = parts.iter().zip(&deform).all(|(a, d)| a < d);
        beats += win as usize;
        rows.push(json!({ "preset": p, "particles": parts, "zero": zero, "deformation": deform }));
    }
    let o8 = Outcome {
        id: 8,
        title: "motion-modeling ordering",
        pass: half_ok && beats >= 2,
        detail: format!(
            "MFE particles < 0.5 zero-motion on all presets and seeds: {half_ok}; particles < deformation on {beats}/3 presets; {}",
            rows.iter()
                .map(|r| format!(
                    "{} p {:.4} z {:.4} d {:.4}",
                    r["preset"].as_str().unwrap(),
                    mean(&serde_json::from_value::<Vec<f64>>(r["particles"].clone()).unwrap()),
                    mean(&serde_json::from_value::<Vec<f64>>(r["zero"].clone()).unwrap()),
                    mean(&serde_json::from_value::<Vec<f64>>(r["deformation"].clone()).unwrap())
                ))
                .collect::<Vec<_>>()
                .join("; ")
        ),
        data: json!(rows),
    };

    // 9: lifecycle curve on every high-count particle run
    let mut all_ok = true;
    let mut per_run = Vec::new();
    for &p in &PRESETS {
        let oracle = GroundTruthOracle::new(lab.data[p].scene.clone().unwrap());
        for r in &full[p] {
            let n = r.state.config.particles;
            let re: Vec<usize> = r.hist.lifecycle.iter().map(|e| e.resampled).collect();
            let nonincreasing = re.len() >= 4 && re[2..].windows(2).all(|w| w[1] <= w[0]);
            let ends_low = re.last().is_some_and(|&x| (x as f64) < 0.01 * n as f64);
            let conserved = r.hist.lifecycle.iter().all(|e| e.alive == n);
            let voxel = r.state.model.static_grid.voxel_edge();
            let m = &r.state.model;
            let mut near = 0usize;
            let mut total = 0usize;
            for &t in &radiance::PROBE_TIMES {
                for x in particles::alive_positions(&m.particles, &m.motion, t).unwrap() {
                    total += 1;
                    near += (oracle.distance_to_dynamic(x, t) <= 2.0 * voxel) as usize;
                }
            }
            let frac = if total > 0 { near as f64 / total as f64 } else { 0.0 };
            let ok = nonincreasing && ends_low && conserved && frac >= 0.9;
            all_ok &= ok;
            per_run.push(json!({
                "preset": p, "seed": r.state.config.seed, "resampled": re,
                "conserved": conserved, "near_dynamic": frac, "pass": ok
            }));
        }
    }
    let summary: Vec<String> = per_run
        .iter()
        .map(|r| {
            format!(
                "{}#{} {:?} near {:.2}",
                r["preset"].as_str().unwrap(),
                r["seed"],
                r["resampled"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect::<Vec<_>>(),
                r["near_dynamic"].as_f64().unwrap()
            )
        })
        .collect();
    let o9 = Outcome {
        id: 9,
        title: "lifecycle curve",
        pass: all_ok,
        detail: format!("resampled per event / survivor fraction within 2 voxels: {}", summary.join("; ")),
        data: json!(per_run),
    };

    // 10: auxiliary losses on fall
    let bare: Vec<f64> = seeds
        .iter()
        .map(|&s| lab.run("fall", lab.config(hi, s, Dynamics::Particles, false)).psnr)
        .collect();
    let o10 = Outcome {
        id: 10,
        title: "loss-component trend",
        pass: mean(&full_fall) >= mean(&bare),
        detail: format!("held-out PSNR with all auxiliary losses {:.2} dB vs none {:.2} dB", mean(&full_fall), mean(&bare)),
        data: json!({ "all": full_fall, "none": bare }),
    };
    vec![o7, o8, o9, o10]
}

fn main() {
    // cargo passes harness flags such as --nocapture or a filter; a filter
    // that is not "acceptance" skips the run
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return;
    }
    let mode = std::env::var("DYNFIELD_ACCEPTANCE").unwrap_or_default();
    let mut results = serde_json::Map::new();
    let mut hard_fail = false;
    let exact: [fn() -> Outcome; 6] = [
        gradient_fidelity,
        scatter_oracle,
        unity_and_adjointness,
        renderer_analytics,
        loss_analytics,
        mfe_metric,
    ];
    for f in exact {
        let o = f();
        line(&o, "");
        hard_fail |= !o.pass;
        results.insert(o.id.to_string(), json!({ "pass": o.pass, "detail": o.detail, "data": o.data }));
    }
    let scale = match mode.as_str() {
        "quick" => None,
        "full" => Some(FULL),
        _ => Some(REDUCED),
    };
    if let Some(scale) = scale {
        let start = Instant::now();
        for o in trends(scale) {
            line(&o, &format!(" [{}]", scale.label));
            results.insert(
                o.id.to_string(),
                json!({ "pass": o.pass, "scale": scale.label, "detail": o.detail, "data": o.data }),
            );
        }
        println!("trend criteria took {:.0} s", start.elapsed().as_secs_f64());
    } else {
        for id in 7..=10 {
            println!("criterion {id:>2}: SKIPPED (DYNFIELD_ACCEPTANCE=quick)");
        }
    }
    let out = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance.json");
    if std::fs::write(&out, serde_json::to_string_pretty(&Value::Object(results)).unwrap()).is_ok() {
        println!("results written to {}", out.display());
    }
    if hard_fail {
        eprintln!("an exact acceptance property failed");
        std::process::exit(1);
    }
}
