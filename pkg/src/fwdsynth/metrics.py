"""Image quality metrics: PSNR and SSIM on float images in [0, peak]."""

from __future__ import annotations

import csv
import io
import os

import numpy as np

from .errors import FormatError, IoError, ShapeError

METRICS_COLUMNS = ("scene", "view", "psnr_db", "ssim", "ms_per_frame")
LOSS_CURVE_COLUMNS = ("step", "loss")

# Gaussian-weighted SSIM constants (the standard choice).
_K1 = 0.01
_K2 = 0.03
_SIGMA = 1.5
_TRUNCATE = 3.5


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 for MSE below 1e-10."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 99.0
    return 10.0 * np.log10(peak * peak / mse)


def _gaussian_kernel():
    radius = int(_TRUNCATE * _SIGMA + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / _SIGMA) ** 2)
    g /= g.sum()
    return np.outer(g, g), radius


def _windowed(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    k = kernel.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("ijkl,kl->ij", win, kernel)


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Uses weighted (population) local moments; multichannel images are
    averaged over channels. Images must be at least 11 pixels on each side.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    kernel, radius = _gaussian_kernel()
    if a.shape[0] < 2 * radius + 1 or a.shape[1] < 2 * radius + 1:
        raise ShapeError(f"ssim needs images of at least {2 * radius + 1} pixels per side")
    c1 = (_K1 * peak) ** 2
    c2 = (_K2 * peak) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x = a[:, :, ch]
        y = b[:, :, ch]
        ux = _windowed(x, kernel)
        uy = _windowed(y, kernel)
        uxx = _windowed(x * x, kernel)
        uyy = _windowed(y * y, kernel)
        uxy = _windowed(x * y, kernel)
        vx = uxx - ux * ux
        vy = uyy - uy * uy
        cxy = uxy - ux * uy
        s = ((2 * ux * uy + c1) * (2 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def format_metrics_csv(rows: list[dict]) -> str:
    """Render metric rows (scene, view, psnr_db, ssim, ms_per_frame) as CSV text."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRICS_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in METRICS_COLUMNS})
    return buf.getvalue()


def write_metrics_csv(path: str | os.PathLike, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_metrics_csv(rows))


def read_metrics_csv(path: str | os.PathLike) -> list[dict]:
    if not os.path.exists(path):
        raise IoError(f"metrics file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != METRICS_COLUMNS:
            raise FormatError(f"bad metrics header in {path}: {reader.fieldnames}")
        rows = []
        for raw in reader:
            rows.append(
                {
                    "scene": raw["scene"],
                    "view": int(raw["view"]),
                    "psnr_db": float(raw["psnr_db"]),
                    "ssim": float(raw["ssim"]),
                    "ms_per_frame": float(raw["ms_per_frame"]),
                }
            )
    return rows


def write_loss_curve_csv(path: str | os.PathLike, steps: list[int], losses: list[float]) -> None:
    if len(steps) != len(losses):
        raise ShapeError("loss curve steps and losses differ in length")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_CURVE_COLUMNS)
        for step, loss in zip(steps, losses):
            writer.writerow([step, repr(float(loss))])


def read_loss_curve_csv(path: str | os.PathLike) -> tuple[list[int], list[float]]:
    if not os.path.exists(path):
        raise IoError(f"loss curve file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != LOSS_CURVE_COLUMNS:
            raise FormatError(f"bad loss curve header in {path}: {header}")
        steps, losses = [], []
        for row in reader:
            if len(row) != 2:
                raise FormatError(f"bad loss curve row in {path}: {row}")
            steps.append(int(row[0]))
            losses.append(float(row[1]))
    return steps, losses
