//! Run directory layout: config echo, loss and lifecycle CSVs, checkpoints
//! and validation renders.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Event, History, TrainState};
use crate::error::{Error, Result};
use crate::scene::Dataset;

pub const LOSS_HEADER: &str = "step,L_photo,L_ptrgb,L_bg,L_tvf,L_tvm,total,lr,alive_particles";
pub const LIFECYCLE_HEADER: &str = "step,removed,resampled,alive,occupied_nodes";

/// Paths of the artifacts written by [`train_to_dir`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunFiles {
    pub config: PathBuf,
    pub loss_csv: PathBuf,
    pub lifecycle_csv: PathBuf,
    pub checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub validation: Vec<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Trains `state` on `data`, writing artifacts under `out`. The final state
/// is saved as `checkpoint.ckpt`.
pub fn train_to_dir(state: &mut TrainState, data: &Dataset, out: &Path) -> Result<(History, RunFiles)> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = RunFiles {
        config: out.join("config.txt"),
        loss_csv: out.join("loss.csv"),
        lifecycle_csv: out.join("lifecycle.csv"),
        checkpoint: out.join("checkpoint.ckpt"),
        checkpoints: Vec::new(),
        validation: Vec::new(),
    };
    fs::write(&files.config, state.config.to_text()).map_err(|e| Error::io(&files.config, e))?;
    let mut loss = create(&files.loss_csv)?;
    let mut life = create(&files.lifecycle_csv)?;
    writeln!(loss, "{LOSS_HEADER}").map_err(|e| Error::io(&files.loss_csv, e))?;
    writeln!(life, "{LIFECYCLE_HEADER}").map_err(|e| Error::io(&files.lifecycle_csv, e))?;
    let ckpt_every = state.config.checkpoint_every_steps;
    let val_every = state.config.validate_every_steps;
    let n = state.config.samples_per_ray;
    let val_frame = data.split.test.first().or(data.split.train.first()).copied();

    let hist = state.run(data, |ev, st| {
        match ev {
            Event::Step(r) => {
                let t = &r.terms;
                writeln!(
                    loss,
                    "{},{},{},{},{},{},{},{},{}",
                    r.step, t.photo, t.ptrgb, t.bg, t.tvf, t.tvm, r.total, r.lr, r.alive
                )
                .map_err(|e| Error::io(&files.loss_csv, e))?;
                if ckpt_every > 0 && st.step % ckpt_every == 0 && st.step < st.config.steps {
                    let dir = out.join("checkpoints");
                    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    let p = dir.join(format!("step_{:06}.ckpt", st.step));
                    st.save(&p)?;
                    files.checkpoints.push(p);
                }
                if let (true, Some(f)) = (val_every > 0 && st.step % val_every == 0, val_frame) {
                    let dir = out.join("val");
                    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    let frame = &data.frames[f];
                    let p = dir.join(format!("step_{:06}.png", st.step));
                    st.model.render_image(&frame.pose, frame.time, n)?.save_png(&p)?;
                    files.validation.push(p);
                }
            }
            Event::Lifecycle(l) => {
                writeln!(life, "{},{},{},{},{}", l.step, l.removed, l.resampled, l.alive, l.occupied_nodes)
                    .map_err(|e| Error::io(&files.lifecycle_csv, e))?;
            }
            Event::Resize { step, dims } => log::info!("step {step}: grid resized to {dims:?}"),
        }
        Ok(())
    })?;
    loss.flush().map_err(|e| Error::io(&files.loss_csv, e))?;
    life.flush().map_err(|e| Error::io(&files.lifecycle_csv, e))?;
    state.save(&files.checkpoint)?;
    Ok((hist, files))
}
