use dynfield::eval::{self, EvalOptions, MfeProtocol};
use dynfield::scene::{self, Dataset, SceneSpec};
use dynfield::trainer::{self, TrainConfig, TrainState};

fn tiny_data() -> Dataset {
    let mut spec = SceneSpec::preset("bounce").unwrap();
    spec.frames = 6;
    spec.camera.width = 12;
    spec.camera.height = 12;
    scene::generate(&spec, 3).unwrap()
}

const TINY: &str = "steps = 6\nbatch_rays = 16\nsamples_per_ray = 8\nparticles = 40\nchannels = 4\n\
motion_width = 8\nnet_width = 8\ngrid_voxels_initial = 64\ngrid_voxels_final = 216\n\
removal_every_steps = 2\nremoval_start_step = 4\n";

#[test]
fn dataset_round_trips_through_disk() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.frames.len(), data.frames.len());
    assert_eq!(back.split, data.split);
    assert!(back.scene.is_some());
    for (a, b) in back.frames.iter().zip(&data.frames) {
        assert_eq!(a.time, b.time);
        assert_eq!(a.image.to_rgb8(), b.image.to_rgb8());
    }
}

#[test]
fn train_save_load_evaluate() {
    let data = tiny_data();
    let cfg = TrainConfig::parse(TINY).unwrap();
    let mut state = TrainState::new(cfg.clone(), data.bbox).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (hist, files) = trainer::train_to_dir(&mut state, &data, dir.path()).unwrap();
    assert_eq!(hist.steps.len(), 6);
    assert_eq!(hist.lifecycle.iter().map(|e| e.step).collect::<Vec<_>>(), [4, 6]);
    assert_eq!(TrainConfig::load(&files.config).unwrap(), cfg);

    let loaded = TrainState::load(&files.checkpoint).unwrap();
    assert_eq!(loaded.to_bytes(), state.to_bytes());

    let opts = EvalOptions {
        samples_per_ray: 8,
        eps_alpha: cfg.eps_alpha,
        protocol: MfeProtocol {
            res: 5,
            ..MfeProtocol::default()
        },
        steps: loaded.step,
        baseline: None,
    };
    let report = eval::evaluate(&loaded.model, &data, &opts).unwrap();
    assert_eq!(report.per_view.len(), data.split.test.len());
    assert!(report.psnr_mean.is_finite());
    assert!(report.mfe_particles.unwrap() >= 0.0);
    assert!(report.mfe_zero_motion.unwrap() >= 0.0);
}
