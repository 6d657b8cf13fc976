"""Generate a tiny scene, train a few steps, render and evaluate."""

import json
import sys
import tempfile
from pathlib import Path

import dynfield_py as df


def main() -> int:
    data = df.Dataset.generate("fall", seed=0, frames=6, size=12)
    assert len(data) == 6 and data.test_frames

    tr = df.Trainer(
        data,
        steps=4,
        batch_rays=16,
        samples_per_ray=8,
        particles=50,
        channels=4,
        motion_width=8,
        net_width=8,
        grid_voxels_initial=216,
        grid_voxels_final=512,
        removal_every_steps=0,
    )
    rec = tr.train_step(data)
    assert rec["step"] == 0 and rec["total"] >= 0.0, rec

    with tempfile.TemporaryDirectory() as d:
        steps = tr.fit(data, str(Path(d) / "run"))
        assert tr.step == 4, (tr.step, steps)
        ckpt = Path(d) / "run" / "checkpoint.ckpt"
        again = df.Trainer.load(str(ckpt))
        assert again.step == tr.step

    w, h, rgb = tr.render(data, data.test_frames[0])
    assert len(rgb) == w * h * 3

    report = json.loads(tr.evaluate(data, mfe_res=6))
    print(f"psnr {report['psnr_mean']:.2f} ssim {report['ssim_mean']:.3f} "
          f"mfe {report['mfe_particles']:.4f} alive {tr.alive_particles}")

    try:
        df.Trainer(data, no_such_key=1)
    except ValueError as e:
        assert "no_such_key" in str(e)
    else:
        raise AssertionError("unknown key accepted")
    print("smoke ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
