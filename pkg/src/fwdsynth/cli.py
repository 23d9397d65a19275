"""Command-line entry points: synth, train, bench, serve.

Exit codes: 0 success, 2 usage or file-format problems, 3 runtime failures.
"""

from __future__ import annotations

import glob as globlib
import os
import sys
import time

import click
import numpy as np

from . import autodiff as ad
from . import pipeline as pl
from . import scenes as sc
from .errors import DomainError, FormatError, FwdError, IoError, ShapeError
from .geometry import Intrinsics, Pose
from .metrics import psnr, ssim, write_loss_curve_csv, write_metrics_csv
from .pipeline import FwdModel, LossConfig, ModelConfig, PerViewData, VARIANTS

EXIT_FORMAT = 2
EXIT_RUNTIME = 3


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    """Map library errors to the documented exit codes."""
    try:
        fn()
    except (FormatError, IoError, DomainError, ShapeError) as exc:
        _fail(EXIT_FORMAT, str(exc))
    except FwdError as exc:
        _fail(EXIT_RUNTIME, str(exc))


@click.group()
def main() -> None:
    """Forward-warping novel view synthesis tools."""


@main.command()
@click.option("--scene", "scene_path", required=True, help="Scene manifest file.")
@click.option("--checkpoint", "checkpoint_path", required=True, help="Model checkpoint.")
@click.option("--pose-file", "pose_path", required=True, help="JSON pose list.")
@click.option("--out", "out_dir", required=True, help="Output directory.")
@click.option("--variant", default=None, type=click.Choice(VARIANTS),
              help="Override the render path of the loaded model.")
@click.option("--input-views", default=None,
              help="Comma-separated view indices used as inputs.")
def synth(scene_path, checkpoint_path, pose_path, out_dir, variant, input_views) -> None:
    """Render one image per pose; adds metric rows for poses matching scene views."""

    def run() -> None:
        bundle = sc.load_bundle(scene_path)
        model, _ = pl.load_model(checkpoint_path)
        model.eval()
        poses = sc.load_pose_file(pose_path)
        indices = _parse_indices(input_views, len(bundle.views), model.cfg.n_input_views)
        os.makedirs(out_dir, exist_ok=True)

        from .server import prepare_inputs

        per_view, intr = prepare_inputs(model, bundle, indices)
        rows = []
        for i, pose in enumerate(poses):
            t0 = time.perf_counter()
            image_t, _ = model.render_target(per_view, intr, pose, variant=variant)
            ms = (time.perf_counter() - t0) * 1000.0
            image = np.clip(np.asarray(image_t.data, dtype=np.float64), 0.0, 1.0)
            image = image.reshape(intr.height, intr.width, 3)
            out_path = os.path.join(out_dir, f"frame_{i:04d}.png")
            sc.write_image(out_path, image)
            match = _matching_view(bundle, pose)
            if match is not None:
                gt = bundle.views[match].image
                rows.append({"scene": bundle.name, "view": match,
                             "psnr_db": psnr(image, gt), "ssim": ssim(image, gt),
                             "ms_per_frame": ms})
            click.echo(f"wrote {out_path}")
        if rows:
            metrics_path = os.path.join(out_dir, "metrics.csv")
            write_metrics_csv(metrics_path, rows)
            click.echo(f"wrote {metrics_path}")

    _guarded(run)


def _parse_indices(text: str | None, n_views: int, k_default: int) -> list[int]:
    if text is None:
        return list(range(min(k_default, n_views)))
    try:
        indices = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise FormatError(f"--input-views must be comma-separated integers, got {text!r}")
    if not indices:
        raise FormatError("--input-views must name at least one view")
    for i in indices:
        if not 0 <= i < n_views:
            raise FormatError(f"--input-views index {i} out of range (scene has {n_views})")
    return indices


def _matching_view(bundle: sc.SceneBundle, pose: Pose) -> int | None:
    for i, view in enumerate(bundle.views):
        if np.allclose(view.pose.R, pose.R, atol=1e-9) and \
                np.allclose(view.pose.T, pose.T, atol=1e-9):
            return i
    return None


@main.command()
@click.option("--scenes", "scenes_glob", required=True, help="Glob of scene manifests.")
@click.option("--variant", default="fwd-d", type=click.Choice(VARIANTS))
@click.option("--steps", default=2000, type=int, help="Optimization steps to run.")
@click.option("--seed", default=0, type=int, help="Seed for weights and sampling.")
@click.option("--out", "out_path", required=True, help="Checkpoint output path.")
@click.option("--curve", "curve_path", default=None,
              help="Loss curve CSV path (default: checkpoint path with .curve.csv).")
@click.option("--width", default=0.25, type=float, help="Channel width factor.")
@click.option("--lr", default=1e-4, type=float, help="Adam learning rate.")
@click.option("--lambda-l2", default=5.0, type=float, help="Pixel loss weight.")
@click.option("--lambda-c", default=1.0, type=float, help="Content loss weight.")
@click.option("--lambda-s", default=5.0, type=float, help="Depth loss weight.")
@click.option("--content-loss", default="off", type=click.Choice(["off", "gradient_diff"]))
@click.option("--n-input-views", default=3, type=int)
@click.option("--k-blend", default=16, type=int, help="Blend depth per pixel.")
@click.option("--two-stage", "two_stage", default=0.0, type=float,
              help="Fraction of steps spent in the warm-up stage (fwd-u only).")
@click.option("--curve-every", default=100, type=int, help="Loss curve sampling period.")
def train(scenes_glob, variant, steps, seed, out_path, curve_path, width, lr,
          lambda_l2, lambda_c, lambda_s, content_loss, n_input_views, k_blend,
          two_stage, curve_every) -> None:
    """Train a model on scene manifests; writes a checkpoint and a loss curve."""

    def run() -> None:
        paths = sorted(globlib.glob(scenes_glob))
        if not paths:
            raise IoError(f"no scene manifests match {scenes_glob!r}")
        bundles = [sc.load_bundle(p) for p in paths]
        if steps < 0:
            raise DomainError("--steps must be nonnegative")
        if not 0.0 <= two_stage < 1.0:
            raise DomainError("--two-stage must be a fraction in [0, 1)")
        stage1 = int(round(steps * two_stage)) if two_stage > 0.0 else 0
        cfg = ModelConfig(
            variant=variant, width=width, n_input_views=n_input_views,
            k_blend=k_blend, lr=lr, seed=seed, stage1_steps=stage1,
            loss=LossConfig(lambda_l2=lambda_l2, lambda_c=lambda_c,
                            lambda_s=lambda_s, content_loss=content_loss))
        model = FwdModel(cfg)
        state = pl.init_train_state(model, seed=seed)
        t0 = time.perf_counter()

        def report(step: int, comps: dict) -> None:
            if step % max(1, curve_every) == 0:
                recent = float(np.mean(state.loss_history[-curve_every:]))
                click.echo(f"step {step:5d} loss {recent:.5f} "
                           f"({time.perf_counter() - t0:.0f}s)")

        state = pl.train(model, bundles, steps, state=state,
                         curve_every=curve_every, on_step=report)
        pl.save_model(out_path, model, state)
        click.echo(f"wrote {out_path}")
        curve = curve_path or os.path.splitext(out_path)[0] + ".curve.csv"
        write_loss_curve_csv(curve, state.curve_steps, state.curve_losses)
        click.echo(f"wrote {curve}")

    _guarded(run)


@main.command()
@click.option("--points", default=20000, type=int, help="Points per view.")
@click.option("--res", default="96x128", help="Render resolution HxW.")
@click.option("--views", default=3, type=int, help="Number of input views.")
@click.option("--iters", default=10, type=int, help="Timed iterations.")
@click.option("--width", default=0.25, type=float, help="Channel width factor.")
def bench(points, res, views, iters, width) -> None:
    """Time the render phases on a synthetic cloud and print a table."""

    def run() -> None:
        try:
            h, w = (int(part) for part in res.lower().split("x"))
        except ValueError:
            raise FormatError(f"--res must look like 96x128, got {res!r}")
        if points < 1 or views < 1 or iters < 1 or h < 8 or w < 8:
            raise DomainError("--points/--views/--iters must be positive, --res at least 8x8")
        cfg = ModelConfig(variant="fwd-d", width=width, n_input_views=views, seed=0)
        model = FwdModel(cfg)
        model.eval()
        rng = np.random.default_rng(0)
        focal = 1.1 * max(h, w)
        intr = Intrinsics(focal, focal, (w - 1) / 2.0, (h - 1) / 2.0, w, h)
        feat_dim = model.cfg.feature_dim
        per_view = []
        for v in range(views):
            angle = 0.05 * (v - (views - 1) / 2.0)
            R = np.array([[np.cos(angle), 0.0, np.sin(angle)],
                          [0.0, 1.0, 0.0],
                          [-np.sin(angle), 0.0, np.cos(angle)]])
            pose = Pose(R, np.zeros(3))
            positions = np.column_stack([
                rng.uniform(-0.8, 0.8, points),
                rng.uniform(-0.6, 0.6, points),
                rng.uniform(1.5, 3.0, points),
            ]).astype(cfg.np_dtype())
            features = rng.standard_normal((points, feat_dim)).astype(cfg.np_dtype())
            per_view.append(PerViewData(
                positions=ad.constant(positions), features=ad.constant(features),
                depth=ad.constant(positions[:, 2:3].copy()), intr=intr, pose=pose,
                depth_sensor=None, mask=None, has_depth_params=False))
        target = Pose(np.eye(3), np.zeros(3))

        model.render_target(per_view, intr, target)  # warm-up
        sums = {"rasterize_ms": 0.0, "fuse_ms": 0.0, "refine_ms": 0.0}
        total_ms = 0.0
        for _ in range(iters):
            timings: dict = {}
            t0 = time.perf_counter()
            model.render_target(per_view, intr, target, timings=timings)
            total_ms += (time.perf_counter() - t0) * 1000.0
            for key in sums:
                sums[key] += timings[key]

        n = float(iters)
        total = total_ms / n
        click.echo(f"points/view {points}  views {views}  res {h}x{w}  iters {iters}")
        click.echo(f"{'phase':<12}{'ms':>10}")
        click.echo(f"{'rasterize':<12}{sums['rasterize_ms'] / n:>10.2f}")
        click.echo(f"{'fuse':<12}{sums['fuse_ms'] / n:>10.2f}")
        click.echo(f"{'refine':<12}{sums['refine_ms'] / n:>10.2f}")
        click.echo(f"{'total':<12}{total:>10.2f}")
        click.echo(f"fps {1000.0 / total:.2f}")

    _guarded(run)


@main.command()
@click.option("--scene", "scene_path", required=True, help="Scene manifest file.")
@click.option("--checkpoint", "checkpoint_path", required=True, help="Model checkpoint.")
@click.option("--port", default=8000, type=int)
@click.option("--host", default="127.0.0.1")
@click.option("--static", "static_dir", default=None,
              help="Directory of viewer assets to serve at /.")
@click.option("--input-views", default=None,
              help="Comma-separated view indices used as inputs.")
def serve(scene_path, checkpoint_path, port, host, static_dir, input_views) -> None:
    """Serve rendered frames over the frame protocol."""

    def run() -> None:
        import uvicorn

        from .server import create_app

        bundle = sc.load_bundle(scene_path)
        model, _ = pl.load_model(checkpoint_path)
        indices = _parse_indices(input_views, len(bundle.views), model.cfg.n_input_views)
        if static_dir is not None and not os.path.isdir(static_dir):
            raise IoError(f"static directory not found: {static_dir}")
        app = create_app(model, bundle, input_indices=indices, static_dir=static_dir)
        click.echo(f"serving {bundle.name} on {host}:{port}")
        uvicorn.run(app, host=host, port=port, log_level="warning")

    _guarded(run)


if __name__ == "__main__":
    main()
