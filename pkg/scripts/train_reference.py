#!/usr/bin/env python3
"""Train the reference model behind the regression tests.

Writes tests/golden/loss_curve_reference.csv (the committed training curve)
and tests/golden/reference_model.fwdc (the trained weights used by the
service tests). Every seed is fixed, so a rerun reproduces both artifacts.
"""
import argparse
import os
import time

import numpy as np

from fwdsynth import pipeline as pl
from fwdsynth import scenes as sc
from fwdsynth.metrics import psnr, write_loss_curve_csv


def reference_scene() -> tuple[sc.SceneBundle, sc.SceneView]:
    """The fixed training scene: 8 training views plus one held-out view."""
    full = sc.generate_synthetic("two-planes", "perlin", n_views=9,
                                 resolution=(96, 128), seed=21, arc_deg=10.0)
    return sc.SceneBundle(full.name, full.views[:8]), full.views[8]


def reference_config() -> pl.ModelConfig:
    return pl.ModelConfig(variant="fwd-d", width=0.25, n_input_views=2, seed=1)


def held_out_psnr(model: pl.FwdModel, bundle: sc.SceneBundle, held: sc.SceneView) -> float:
    img, _ = pl.synthesize(model, bundle, held.pose, input_indices=[0, 4])
    return psnr(np.clip(img, 0.0, 1.0), held.image)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--out-dir", default=os.path.join(
        os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "tests", "golden"))
    args = parser.parse_args()
    os.makedirs(args.out_dir, exist_ok=True)

    bundle, held = reference_scene()
    model = pl.FwdModel(reference_config())
    p0 = held_out_psnr(model, bundle, held)
    print(f"held-out PSNR before training: {p0:.2f} dB", flush=True)

    state = pl.init_train_state(model, seed=0)
    t0 = time.perf_counter()

    def report(step: int, comps: dict) -> None:
        if step % 100 == 0:
            recent = float(np.mean(state.loss_history[-100:]))
            print(f"step {step:4d} loss(100) {recent:.4f} "
                  f"({time.perf_counter() - t0:.0f}s)", flush=True)

    state = pl.train(model, [bundle], args.steps, state=state,
                     curve_every=100, on_step=report)

    p1 = held_out_psnr(model, bundle, held)
    print(f"held-out PSNR after training: {p1:.2f} dB (gain {p1 - p0:.2f} dB)", flush=True)

    curve_path = os.path.join(args.out_dir, "loss_curve_reference.csv")
    write_loss_curve_csv(curve_path, state.curve_steps, state.curve_losses)
    print(f"wrote {curve_path}", flush=True)

    model_path = os.path.join(args.out_dir, "reference_model.fwdc")
    pl.save_model(model_path, model)
    print(f"wrote {model_path} ({os.path.getsize(model_path)} bytes)", flush=True)


if __name__ == "__main__":
    main()
