"""Network components: feature encoder, depth completion U-Net,
view-direction MLPs, per-pixel attention fusion, and refinement decoder.

Feature maps flow through the package as flat ``(H*W, C)`` tensors in
row-major pixel order with the spatial size carried alongside. All 3x3
convolutions use reflect padding so that spatially constant inputs stay
spatially constant through every block.

Channel plans are specified at full width and scaled by a ``width``
multiplier (rounded to multiples of 4 with a floor of 4); the fused feature
width itself is 64 at width 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, ShapeError

_EPS_NORM = 1e-5


def scale_channels(base: int, width: float, multiple: int = 4, floor: int = 4) -> int:
    return max(floor, multiple * int(round(base * width / multiple)))


# -- parameter registry --------------------------------------------------


class Module:
    """Minimal container tracking parameters, buffers, and submodules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, "Module"] = {}
        self.training = False

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, dtype=data.dtype)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        self._buffers[name] = data
        return data

    def add_child(self, name: str, child: "Module") -> "Module":
        self._children[name] = child
        return child

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield (prefix + name, b)
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def train(self, mode: bool = True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _he_uniform(rng: np.random.Generator, fan_in: int, shape, gain: float, dtype):
    bound = gain * np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# -- index builders (cached) ---------------------------------------------

_IDX_CACHE: dict = {}


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.where(idx < 0, -idx, idx)
    return np.where(idx >= n, 2 * n - 2 - idx, idx)


def conv_indices(h: int, w: int, k: int, stride: int = 1) -> np.ndarray:
    """Row indices mapping a flat (H*W,) image into im2col patches.

    Output is ((H/stride)*(W/stride)*k*k,), ordered (pixel, ky, kx). Borders
    reflect. Requires h, w divisible by stride.
    """
    key = ("conv", h, w, k, stride)
    cached = _IDX_CACHE.get(key)
    if cached is not None:
        return cached
    if h % stride or w % stride:
        raise ShapeError(f"spatial size ({h}, {w}) not divisible by stride {stride}")
    if k > 1 and (h < 2 or w < 2):
        raise ShapeError(f"spatial size ({h}, {w}) too small for {k}x{k} reflect conv")
    ho, wo = h // stride, w // stride
    ys = (np.arange(ho) * stride)[:, None, None, None]
    xs = (np.arange(wo) * stride)[None, :, None, None]
    off = np.arange(k) - (k - 1) // 2
    ky = off[None, None, :, None]
    kx = off[None, None, None, :]
    rows = _reflect(np.broadcast_to(ys + ky, (ho, wo, k, k)), h)
    cols = _reflect(np.broadcast_to(xs + kx, (ho, wo, k, k)), w)
    idx = (rows * w + cols).reshape(-1).astype(np.int64)
    _IDX_CACHE[key] = idx
    return idx


def upsample_indices(h: int, w: int) -> np.ndarray:
    """Nearest-neighbor 2x upsample as a flat gather map of size (2h*2w,)."""
    key = ("up", h, w)
    cached = _IDX_CACHE.get(key)
    if cached is not None:
        return cached
    rows = np.repeat(np.arange(h), 2)[:, None]
    cols = np.repeat(np.arange(w), 2)[None, :]
    idx = (rows * w + cols).reshape(-1).astype(np.int64)
    _IDX_CACHE[key] = idx
    return idx


def pool_indices(h: int, w: int) -> np.ndarray:
    """2x2 average-pool source indices, shape ((h/2)*(w/2)*4,)."""
    key = ("pool", h, w)
    cached = _IDX_CACHE.get(key)
    if cached is not None:
        return cached
    if h % 2 or w % 2:
        raise ShapeError(f"spatial size ({h}, {w}) not divisible by 2")
    ys = (np.arange(h // 2) * 2)[:, None, None, None]
    xs = (np.arange(w // 2) * 2)[None, :, None, None]
    dy = np.arange(2)[None, None, :, None]
    dx = np.arange(2)[None, None, None, :]
    idx = ((ys + dy) * w + (xs + dx)).reshape(-1).astype(np.int64)
    _IDX_CACHE[key] = idx
    return idx


def _col2im(g: np.ndarray, h: int, w: int, k: int, stride: int, cin: int) -> np.ndarray:
    """Scatter im2col-patch gradients back to the (h*w, cin) image.

    Works by slice accumulation on a padded grid followed by folding the
    reflected border strips back inside, avoiding per-element scatters.
    """
    p = k // 2
    ho, wo = h // stride, w // stride
    gp = g.reshape(ho, wo, k, k, cin)
    out = np.zeros((h + 2 * p, w + 2 * p, cin), dtype=g.dtype)
    for ky in range(k):
        for kx in range(k):
            out[ky:ky + (ho - 1) * stride + 1:stride,
                kx:kx + (wo - 1) * stride + 1:stride] += gp[:, :, ky, kx]
    if p:
        for r in range(p):
            out[2 * p - r] += out[r]
        for r in range(h + p, h + 2 * p):
            out[2 * h - 2 - r + 2 * p] += out[r]
        core = out[p:h + p]
        for c in range(p):
            core[:, 2 * p - c] += core[:, c]
        for c in range(w + p, w + 2 * p):
            core[:, 2 * w - 2 - c + 2 * p] += core[:, c]
        return np.ascontiguousarray(core[:, p:w + p]).reshape(h * w, cin)
    return out.reshape(h * w, cin)


def im2col(x: Tensor, h: int, w: int, k: int, stride: int = 1) -> Tensor:
    """Gather reflect-padded conv patches into (ho*wo, k*k*cin) rows."""
    cin = x.data.shape[1]
    idx = conv_indices(h, w, k, stride)
    ho, wo = h // stride, w // stride
    data = x.data[idx].reshape(ho * wo, k * k * cin)
    return ad.custom_op(data, [(x, lambda g: _col2im(g, h, w, k, stride, cin))])


def upsample2x(x: Tensor, h: int, w: int) -> Tensor:
    c = x.data.shape[1]
    data = np.repeat(np.repeat(x.data.reshape(h, w, c), 2, axis=0), 2, axis=1)

    def vjp(g):
        return g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)).reshape(h * w, c)

    return ad.custom_op(data.reshape(4 * h * w, c), [(x, vjp)])


def avgpool2x(x: Tensor, h: int, w: int) -> Tensor:
    if h % 2 or w % 2:
        raise ShapeError(f"spatial size ({h}, {w}) not divisible by 2")
    c = x.data.shape[1]
    hh, ww = h // 2, w // 2
    data = x.data.reshape(hh, 2, ww, 2, c).mean(axis=(1, 3)).reshape(hh * ww, c)

    def vjp(g):
        tile = (g * 0.25).reshape(hh, 1, ww, 1, c)
        return np.broadcast_to(tile, (hh, 2, ww, 2, c)).reshape(h * w, c)

    return ad.custom_op(data, [(x, vjp)])


# -- spectral norm -------------------------------------------------------


def power_iteration_sigma(w: np.ndarray, iters: int, u0: np.ndarray | None = None):
    """Estimate the top singular value of a 2-D matrix by power iteration.

    Returns (sigma, u, v) with u of size w.shape[1], v of size w.shape[0].
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError("power iteration expects a matrix")
    u = np.ones(w.shape[1]) if u0 is None else np.asarray(u0, dtype=np.float64).copy()
    u /= max(np.linalg.norm(u), 1e-12)
    v = np.zeros(w.shape[0])
    for _ in range(iters):
        v = w @ u
        v /= max(np.linalg.norm(v), 1e-12)
        u = w.T @ v
        u /= max(np.linalg.norm(u), 1e-12)
    sigma = float(v @ w @ u)
    return sigma, u, v


# -- primitive layers ----------------------------------------------------


class Conv2d(Module):
    """k x k convolution over flat (H*W, Cin) maps, reflect padded.

    Weight layout: (k*k*Cin, Cout) with rows ordered (ky, kx, cin), matching
    the im2col patch layout.
    """

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, *,
                 rng: np.random.Generator, dtype, gain: float = 1.0, bias: bool = True,
                 spectral_norm: bool = False, zero_init: bool = False):
        super().__init__()
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        fan_in = k * k * cin
        data = (np.zeros((fan_in, cout), dtype=dtype) if zero_init
                else _he_uniform(rng, fan_in, (fan_in, cout), gain, dtype))
        self.weight = self.add_param("weight", data)
        self.bias = self.add_param("bias", np.zeros(cout, dtype=dtype)) if bias else None
        self.spectral_norm = spectral_norm
        if spectral_norm:
            u = rng.normal(size=cout)
            self.add_buffer("sn_u", (u / np.linalg.norm(u)).astype(np.float64))

    def _sn_weight(self) -> Tensor:
        u = self._buffers["sn_u"]
        wd = self.weight.data.astype(np.float64, copy=False)
        if self.training:
            v = wd @ u
            v /= max(np.linalg.norm(v), 1e-12)
            u_new = wd.T @ v
            u_new /= max(np.linalg.norm(u_new), 1e-12)
            self._buffers["sn_u"] = u_new
            u = u_new
        else:
            v = wd @ u
            v /= max(np.linalg.norm(v), 1e-12)
        vc = ad.constant(v[None, :], dtype=self.weight.dtype)
        uc = ad.constant(u[:, None], dtype=self.weight.dtype)
        sigma = ad.matmul(ad.matmul(vc, self.weight), uc)
        return self.weight / ad.reshape(sigma, ())

    def forward(self, x: Tensor, h: int, w: int):
        if x.data.shape != (h * w, self.cin):
            raise ShapeError(f"conv input {x.data.shape} != ({h * w}, {self.cin})")
        ho, wo = h // self.stride, w // self.stride
        if self.k == 1 and self.stride == 1:
            col = x
        else:
            col = im2col(x, h, w, self.k, self.stride)
        weight = self._sn_weight() if self.spectral_norm else self.weight
        y = ad.matmul(col, weight)
        if self.bias is not None:
            y = y + self.bias
        return y, ho, wo


class Linear(Module):
    def __init__(self, cin: int, cout: int, *, rng, dtype, gain: float = 1.0,
                 zero_init: bool = False):
        super().__init__()
        data = (np.zeros((cin, cout), dtype=dtype) if zero_init
                else _he_uniform(rng, cin, (cin, cout), gain, dtype))
        self.weight = self.add_param("weight", data)
        self.bias = self.add_param("bias", np.zeros(cout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class InstanceNorm(Module):
    """Normalize each channel over all pixels of the (single) image."""

    def __init__(self, c: int, *, dtype, eps: float = _EPS_NORM):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(c, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(c, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mu = ad.tmean(x, axis=0, keepdims=True)
        xc = x - mu
        var = ad.tmean(xc * xc, axis=0, keepdims=True)
        y = xc / ad.sqrt(var + self.eps)
        return y * self.gamma + self.beta


class ResBlock(Module):
    """Two 3x3 convs with instance norm and a (projected) skip.

    ``resample`` is one of None, "down" (stride-2 convs), "up" (2x nearest
    upsample first). ``final`` drops the second norm and the output ReLU so
    the block can emit unbounded values.
    """

    def __init__(self, cin: int, cout: int, *, rng, dtype, resample: str | None = None,
                 norm: bool = True, spectral_norm: bool = False, final: bool = False,
                 branch_gain: float = 1.0, zero_init_out: bool = False):
        super().__init__()
        self.resample = resample
        self.final = final
        stride = 2 if resample == "down" else 1
        self.conv1 = self.add_child("conv1", Conv2d(
            cin, cout, 3, stride, rng=rng, dtype=dtype, spectral_norm=spectral_norm))
        self.norm1 = self.add_child("norm1", InstanceNorm(cout, dtype=dtype)) if norm else None
        self.conv2 = self.add_child("conv2", Conv2d(
            cout, cout, 3, 1, rng=rng, dtype=dtype, gain=branch_gain,
            spectral_norm=spectral_norm, zero_init=zero_init_out))
        self.norm2 = (self.add_child("norm2", InstanceNorm(cout, dtype=dtype))
                      if norm and not final else None)
        if cin != cout or resample == "down":
            self.skip = self.add_child("skip", Conv2d(
                cin, cout, 1, stride, rng=rng, dtype=dtype, bias=False,
                spectral_norm=spectral_norm, zero_init=zero_init_out))
        else:
            self.skip = None

    def forward(self, x: Tensor, h: int, w: int):
        if self.resample == "up":
            x = upsample2x(x, h, w)
            h, w = h * 2, w * 2
        y, ho, wo = self.conv1.forward(x, h, w)
        if self.norm1 is not None:
            y = self.norm1.forward(y)
        y = ad.relu(y)
        y, _, _ = self.conv2.forward(y, ho, wo)
        if self.norm2 is not None:
            y = self.norm2.forward(y)
        if self.skip is not None:
            s, _, _ = self.skip.forward(x, h, w)
        else:
            s = x
        out = y + s
        if not self.final:
            out = ad.relu(out)
        return out, ho, wo


# -- feature encoder ------------------------------------------------------

_ENCODER_PLAN = (32, 32, 32, 64, 64, 64, 64)  # block 8 emits feature_dim - 3


@dataclass
class EncoderConfig:
    width: float = 1.0
    n_heads: int = 4
    use_spectral_norm: bool = False
    zero_init_head: bool = False

    @property
    def feature_dim(self) -> int:
        return scale_channels(64, self.width, 4, max(4, self.n_heads))

    @property
    def channel_plan(self) -> tuple:
        plan = tuple(scale_channels(c, self.width) for c in _ENCODER_PLAN)
        return plan + (self.feature_dim - 3,)


class FeatureEncoder(Module):
    """Full-resolution ResNet encoder; the input RGB is concatenated onto
    the learned channels so the output width equals feature_dim."""

    def __init__(self, cfg: EncoderConfig, *, rng, dtype):
        super().__init__()
        self.cfg = cfg
        plan = cfg.channel_plan
        cin = 3
        self.blocks = []
        for i, cout in enumerate(plan):
            last = i == len(plan) - 1
            block = ResBlock(cin, cout, rng=rng, dtype=dtype,
                             spectral_norm=cfg.use_spectral_norm,
                             zero_init_out=cfg.zero_init_head and last)
            self.blocks.append(self.add_child(f"block{i}", block))
            cin = cout

    def forward(self, rgb: Tensor, h: int, w: int) -> Tensor:
        if rgb.data.shape != (h * w, 3):
            raise ShapeError(f"encoder expects ({h * w}, 3), got {rgb.data.shape}")
        x = rgb
        for block in self.blocks:
            x, h, w = block.forward(x, h, w)
        return ad.concat([x, rgb], axis=1)


# -- depth completion / estimation U-Net ----------------------------------


@dataclass
class DepthNetConfig:
    width: float = 1.0
    levels: int = 3
    base_channels: int = 32
    z_near: float = 1e-4

    @property
    def channel_plan(self) -> tuple:
        b = scale_channels(self.base_channels, self.width)
        return tuple(b * (2 ** i) for i in range(self.levels))


class DepthUNet(Module):
    """Predict a strictly positive depth map from RGB + observed depth.

    Input channels: RGB (3), observed depth (1), validity mask (1). The
    network emits a residual that is added to the pre-softplus image of the
    observation (holes filled with a prior), so the initial output tracks
    the observation and training refines it.
    """

    def __init__(self, cfg: DepthNetConfig, *, rng, dtype):
        super().__init__()
        self.cfg = cfg
        plan = cfg.channel_plan
        self.stem = self.add_child("stem", Conv2d(5, plan[0], 3, rng=rng, dtype=dtype))
        self.stem_norm = self.add_child("stem_norm", InstanceNorm(plan[0], dtype=dtype))
        self.down = []
        self.down_norm = []
        for i in range(1, len(plan)):
            self.down.append(self.add_child(f"down{i}", Conv2d(
                plan[i - 1], plan[i], 3, 2, rng=rng, dtype=dtype)))
            self.down_norm.append(self.add_child(f"down{i}_norm", InstanceNorm(plan[i], dtype=dtype)))
        self.up = []
        self.up_norm = []
        for i in range(len(plan) - 1, 0, -1):
            self.up.append(self.add_child(f"up{i}", Conv2d(
                plan[i] + plan[i - 1], plan[i - 1], 3, rng=rng, dtype=dtype)))
            self.up_norm.append(self.add_child(f"up{i}_norm", InstanceNorm(plan[i - 1], dtype=dtype)))
        self.head = self.add_child("head", Conv2d(
            plan[0], 1, 1, rng=rng, dtype=dtype, gain=0.01))

    def forward(self, x: Tensor, h: int, w: int, shift: np.ndarray) -> Tensor:
        """x: (H*W, 5); shift: (H*W, 1) pre-softplus image of the observed
        depth with holes filled. Returns flat positive depth (H*W,)."""
        factor = 2 ** (len(self.cfg.channel_plan) - 1)
        if h % factor or w % factor:
            raise ShapeError(f"resolution ({h}, {w}) not divisible by {factor}")
        y, _, _ = self.stem.forward(x, h, w)
        y = ad.relu(self.stem_norm.forward(y))
        skips = [(y, h, w)]
        for conv, norm in zip(self.down, self.down_norm):
            y, h, w = conv.forward(y, h, w)
            y = ad.relu(norm.forward(y))
            skips.append((y, h, w))
        skips.pop()
        for conv, norm in zip(self.up, self.up_norm):
            y = upsample2x(y, h, w)
            h, w = h * 2, w * 2
            skip, _, _ = skips.pop()
            y = ad.concat([y, skip], axis=1)
            y, _, _ = conv.forward(y, h, w)
            y = ad.relu(norm.forward(y))
        raw, _, _ = self.head.forward(y, h, w)
        depth = ad.softplus(raw + ad.constant(shift, dtype=raw.dtype)) + self.cfg.z_near
        return ad.reshape(depth, (h * w,))


def presoftplus(d: np.ndarray) -> np.ndarray:
    """Inverse of softplus, clamped away from 0 for numerical safety."""
    d = np.maximum(np.asarray(d, dtype=np.float64), 1e-3)
    return d + np.log(-np.expm1(-d))


# -- view-direction conditioning -------------------------------------------


@dataclass
class ViewMLPConfig:
    width: float = 1.0
    residual: bool = True

    @property
    def delta_hidden(self) -> int:
        return scale_channels(16, self.width, 2, 2)

    @property
    def delta_out(self) -> int:
        return scale_channels(32, self.width, 2, 2)


class ViewConditioner(Module):
    """delta embeds the relative view-direction change; psi mixes it into
    per-point features (as a residual correction by default)."""

    def __init__(self, cfg: ViewMLPConfig, feature_dim: int, *, rng, dtype):
        super().__init__()
        self.cfg = cfg
        self.delta1 = self.add_child("delta1", Linear(4, cfg.delta_hidden, rng=rng, dtype=dtype))
        self.delta2 = self.add_child("delta2", Linear(cfg.delta_hidden, cfg.delta_out, rng=rng, dtype=dtype))
        self.psi1 = self.add_child("psi1", Linear(
            feature_dim + cfg.delta_out, feature_dim, rng=rng, dtype=dtype))
        self.psi2 = self.add_child("psi2", Linear(
            feature_dim, feature_dim, rng=rng, dtype=dtype,
            zero_init=cfg.residual, gain=0.1 if not cfg.residual else 1.0))

    def forward(self, features: Tensor, delta_v: Tensor) -> Tensor:
        e = ad.relu(self.delta1.forward(delta_v))
        e = self.delta2.forward(e)
        z = ad.concat([features, e], axis=1)
        z = ad.relu(self.psi1.forward(z))
        z = self.psi2.forward(z)
        if self.cfg.residual:
            return features + z
        return z


# -- per-pixel attention fusion ---------------------------------------------


@dataclass
class FusionConfig:
    width: float = 1.0
    n_heads: int = 4

    @property
    def feature_dim(self) -> int:
        return scale_channels(64, self.width, 4, max(4, self.n_heads))

    @property
    def key_dim(self) -> int:
        return scale_channels(16, self.width, self.n_heads, self.n_heads)


class FusionTransformer(Module):
    """Order-invariant fusion of N per-pixel feature vectors.

    A learnable token (zero-initialized) is projected to the query; the N
    view features provide keys and values. Inputs are first sorted into a
    canonical lexicographic order so the result is bit-identical under any
    permutation of the views. Pixels a view does not cover should be
    substituted with ``empty_token`` before calling fuse.
    """

    def __init__(self, cfg: FusionConfig, *, rng, dtype):
        super().__init__()
        self.cfg = cfg
        c = cfg.feature_dim
        kd = cfg.key_dim
        if c % cfg.n_heads or kd % cfg.n_heads:
            raise ShapeError("feature_dim and key_dim must divide n_heads")
        self.token = self.add_param("token", np.zeros((1, c), dtype=dtype))
        self.wq = self.add_child("wq", Linear(c, kd, rng=rng, dtype=dtype))
        self.wk = self.add_child("wk", Linear(c, kd, rng=rng, dtype=dtype))
        self.wv = self.add_child("wv", Linear(c, c, rng=rng, dtype=dtype))
        self.wo = self.add_child("wo", Linear(c, c, rng=rng, dtype=dtype))
        # Identity-initialized value/output paths make the untrained fusion
        # an exact mean over views (the zero token gives uniform attention).
        self.wv.weight.data[:] = np.eye(c, dtype=dtype)
        self.wo.weight.data[:] = np.eye(c, dtype=dtype)
        self.empty_token = self.add_param("empty_token", np.zeros(c, dtype=dtype))

    def fuse(self, stack: Tensor) -> Tensor:
        """stack: (B, N, C) per-pixel view features -> (B, C) fused.

        A 2-D (N, C) input is treated as a single pixel and returns (1, C).
        """
        if stack.data.ndim == 2:
            stack = ad.reshape(stack, (1,) + stack.data.shape)
        b, n, c = stack.data.shape
        if c != self.cfg.feature_dim:
            raise ShapeError(f"fusion expects width {self.cfg.feature_dim}, got {c}")

        keys = tuple(stack.data[:, :, ci] for ci in range(c - 1, -1, -1))
        perm = np.lexsort(keys, axis=-1)
        flat_idx = (np.arange(b, dtype=np.int64)[:, None] * n + perm).reshape(-1)
        x = ad.take_rows(ad.reshape(stack, (b * n, c)), flat_idx)

        nh = self.cfg.n_heads
        kdh = self.cfg.key_dim // nh
        dvh = c // nh
        q = self.wq.forward(self.token)                       # (1, kd)
        k = self.wk.forward(x)                                # (B*N, kd)
        v = self.wv.forward(x)                                # (B*N, C)
        kh = ad.reshape(k, (b, n, nh, kdh))
        qh = ad.reshape(q, (nh, kdh))
        scores = ad.tsum(kh * qh, axis=3) / np.sqrt(kdh)      # (B, N, nh)
        scores = ad.transpose(scores, (0, 2, 1))              # (B, nh, N)
        attn = ad.softmax(scores, axis=-1)
        vh = ad.transpose(ad.reshape(v, (b, n, nh, dvh)), (0, 2, 1, 3))  # (B, nh, N, dvh)
        mixed = ad.tsum(ad.reshape(attn, (b, nh, n, 1)) * vh, axis=2)    # (B, nh, dvh)
        return self.wo.forward(ad.reshape(mixed, (b, c)))


# -- refinement decoder ------------------------------------------------------

_REFINE_PLAN = (64, 128, 256, 256, 128, 128, 128)  # block 8 emits RGB


@dataclass
class RefinementConfig:
    width: float = 1.0
    downsample_at: tuple = (3,)
    upsample_at: tuple = (6,)
    noise_std: float = 0.0
    branch_gain: float = 1.0
    head_gain: float = 0.05

    @property
    def channel_plan(self) -> tuple:
        return tuple(scale_channels(c, self.width) for c in _REFINE_PLAN) + (3,)


class RefinementDecoder(Module):
    """8 ResNet blocks decoding fused features to RGB.

    Parameter-free 2x average-pool / nearest-upsample steps run after the
    block indices in ``downsample_at`` / ``upsample_at`` (1-based), so the
    channel plan is unchanged by resampling. With the defaults the output
    resolution equals the input resolution. Optional Gaussian noise is
    injected into block inputs during training when ``noise_std > 0``.
    """

    def __init__(self, cfg: RefinementConfig, in_dim: int, *, rng, dtype):
        super().__init__()
        self.cfg = cfg
        plan = cfg.channel_plan
        scale = 0
        for i in range(1, len(plan) + 1):
            scale -= i in cfg.downsample_at
            scale += i in cfg.upsample_at
        self.out_scale = 2 ** scale
        cin = in_dim
        self.blocks = []
        for i, cout in enumerate(plan):
            last = i == len(plan) - 1
            block = ResBlock(cin, cout, rng=rng, dtype=dtype, final=last,
                             branch_gain=cfg.branch_gain)
            self.blocks.append(self.add_child(f"block{i}", block))
            cin = cout
        # Start the output small (but with every weight live) so early
        # training fixes content rather than unwinding a large random range.
        head = self.blocks[-1]
        head.conv2.weight.data *= cfg.head_gain
        if head.skip is not None:
            head.skip.weight.data *= cfg.head_gain

    def forward(self, x: Tensor, h: int, w: int, rng: np.random.Generator | None = None):
        cfg = self.cfg
        for i, block in enumerate(self.blocks, start=1):
            if cfg.noise_std > 0 and self.training and rng is not None:
                x = x + ad.constant(
                    rng.normal(scale=cfg.noise_std, size=x.data.shape).astype(x.data.dtype))
            x, h, w = block.forward(x, h, w)
            if i in cfg.downsample_at:
                x = avgpool2x(x, h, w)
                h, w = h // 2, w // 2
            if i in cfg.upsample_at:
                x = upsample2x(x, h, w)
                h, w = h * 2, w * 2
        return x, h, w
