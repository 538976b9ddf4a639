"""RealNVP-style density model over feature vectors.

Each block is an ActNorm layer followed by a masked affine coupling layer whose
scale and translation come from two ReLU MLPs. All parameters live in a single
flat buffer (``FlowModel.params``); layers hold reshaped views into it, which
lets the optimizer and the checkpoint writer treat the model as one array.

Direction names:

* ``to_latent`` (x -> z) is the normalizing direction scored by ``log_prob``.
  Per block: ActNorm forward, then the coupling *inverse*.
* ``to_data`` (z -> x) is the generative direction. Per block, in reverse
  order: coupling forward ``y_b = x_b * exp(s(x_a)) + t(x_a)``, then ActNorm
  inverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ArgumentError, StateError, ValidationError

LOG_2PI = math.log(2.0 * math.pi)
STD_FLOOR = 1e-6
_CHUNK = 8192

TO_LATENT = "to_latent"
TO_DATA = "to_data"
FORWARD = "forward"
INVERSE = "inverse"


def half_masks(dim: int, n_blocks: int) -> np.ndarray:
    """Alternating contiguous half-split masks; True marks pass-through dims."""
    if dim < 2:
        raise ArgumentError("coupling flows need dim >= 2")
    first = np.zeros(dim, dtype=bool)
    first[: (dim + 1) // 2] = True
    return np.stack([first if k % 2 == 0 else ~first for k in range(n_blocks)])


class MLPNet:
    """Fully connected ReLU net, ``h_{i+1} = relu(h_i @ W_i + b_i)``; the last layer is linear."""

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ArgumentError("MLP needs matching, non-empty weight and bias lists")
        for w0, w1 in zip(weights, weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ArgumentError(f"MLP shape chain broken: {w0.shape} -> {w1.shape}")
        for w, b in zip(weights, biases):
            if b.shape != (w.shape[1],):
                raise ArgumentError(f"bias shape {b.shape} does not match weight {w.shape}")
        self.weights = list(weights)
        self.biases = list(biases)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        last = len(self.weights) - 1
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w
            h += b
            if i < last:
                np.maximum(h, 0, out=h)
        return h

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        last = len(self.weights) - 1
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w
            h += b
            if i < last:
                np.maximum(h, 0, out=h)
                acts.append(h)
        return h, acts

    def backward(self, acts: list[np.ndarray], g: np.ndarray, grad: MLPNet, need_input: bool = True):
        """Write parameter gradients into ``grad`` (an MLPNet of gradient views); return dL/dinput."""
        for i in range(len(self.weights) - 1, -1, -1):
            np.matmul(acts[i].T, g, out=grad.weights[i])
            np.sum(g, axis=0, out=grad.biases[i])
            if i == 0 and not need_input:
                return None
            g = g @ self.weights[i].T
            if i > 0:
                g *= acts[i] > 0
        return g


class ActNormLayer:
    """Per-dimension affine map ``y = (x + bias) * exp(log_scale)``."""

    def __init__(self, log_scale: np.ndarray, bias: np.ndarray, initialized: bool = False):
        if log_scale.shape != bias.shape or log_scale.ndim != 1:
            raise ArgumentError("log_scale and bias must be equal-length vectors")
        self.log_scale = log_scale
        self.bias = bias
        self.initialized = initialized

    @property
    def dim(self) -> int:
        return self.log_scale.shape[0]

    def initialize(self, x: np.ndarray) -> None:
        """Data-dependent init: zero mean and unit population std on ``x``."""
        x64 = np.asarray(x, dtype=np.float64)
        mean = x64.mean(axis=0)
        std = x64.std(axis=0)
        self.bias[...] = -mean
        self.log_scale[...] = -np.log(np.maximum(std, STD_FLOOR))
        self.initialized = True


def actnorm_apply(layer: ActNormLayer, x: np.ndarray, direction: str = FORWARD) -> tuple[np.ndarray, np.ndarray]:
    if x.shape[1] != layer.dim:
        raise ArgumentError(f"ActNorm expects width {layer.dim}, got {x.shape[1]}")
    if not layer.initialized:
        raise StateError("ActNorm layer used before data-dependent initialization")
    ls = layer.log_scale
    logdet = np.full(x.shape[0], np.sum(ls, dtype=np.float64))
    if direction == FORWARD:
        return (x + layer.bias) * np.exp(ls), logdet
    if direction == INVERSE:
        return x * np.exp(-ls) - layer.bias, -logdet
    raise ArgumentError(f"direction must be 'forward' or 'inverse', got {direction!r}")


class CouplingLayer:
    """Masked affine coupling; ``mask`` True = pass-through partition."""

    def __init__(self, mask: np.ndarray, s_net: MLPNet, t_net: MLPNet, clamp: float = 2.0):
        mask = np.asarray(mask, dtype=bool)
        if mask.all() or not mask.any():
            raise ArgumentError("coupling mask needs at least one pass-through and one transformed dim")
        if not clamp > 0:
            raise ArgumentError("clamp must be positive")
        self.mask = mask
        self.pass_idx = np.flatnonzero(mask)
        self.trans_idx = np.flatnonzero(~mask)
        for net in (s_net, t_net):
            if net.in_dim != self.pass_idx.size or net.out_dim != self.trans_idx.size:
                raise ArgumentError(
                    f"coupling net maps {net.in_dim}->{net.out_dim}, mask needs "
                    f"{self.pass_idx.size}->{self.trans_idx.size}"
                )
        self.s_net = s_net
        self.t_net = t_net
        self.clamp = float(clamp)

    @property
    def dim(self) -> int:
        return self.mask.shape[0]

    def log_scale(self, raw: np.ndarray) -> np.ndarray:
        return self.clamp * np.tanh(raw / self.clamp)


def coupling_apply(layer: CouplingLayer, x: np.ndarray, direction: str = FORWARD) -> tuple[np.ndarray, np.ndarray]:
    if x.ndim != 2 or x.shape[1] != layer.dim:
        raise ArgumentError(f"coupling expects width {layer.dim}, got shape {x.shape}")
    xa = x[:, layer.pass_idx]
    xb = x[:, layer.trans_idx]
    s = layer.log_scale(layer.s_net(xa))
    t = layer.t_net(xa)
    logdet = s.sum(axis=1, dtype=np.float64)
    out = np.empty_like(x)
    out[:, layer.pass_idx] = xa
    if direction == FORWARD:
        out[:, layer.trans_idx] = xb * np.exp(s) + t
        return out, logdet
    if direction == INVERSE:
        out[:, layer.trans_idx] = (xb - t) * np.exp(-s)
        return out, -logdet
    raise ArgumentError(f"direction must be 'forward' or 'inverse', got {direction!r}")


@dataclass
class _BlockCache:
    an_out: np.ndarray
    pass_in: np.ndarray
    tanh: np.ndarray
    s: np.ndarray
    zb: np.ndarray
    s_acts: list
    t_acts: list


class FlowModel:
    """K blocks of (ActNorm, affine coupling) over ``dim``-wide inputs."""

    def __init__(
        self,
        dim: int,
        masks: np.ndarray,
        hidden: Sequence[int] = (512, 1024, 512),
        clamp: float = 2.0,
        params: np.ndarray | None = None,
        dtype=np.float32,
        actnorm_initialized: bool = False,
    ):
        masks = np.asarray(masks, dtype=bool)
        if masks.ndim != 2 or masks.shape[1] != dim:
            raise ArgumentError(f"masks must be K x {dim}")
        self.dim = int(dim)
        self.masks = masks
        self.hidden = tuple(int(h) for h in hidden)
        if any(h <= 0 for h in self.hidden):
            raise ArgumentError("hidden widths must be positive")
        self.clamp = float(clamp)
        self.layout = self._layout()
        size = sum(int(np.prod(shape)) for _, shape in self.layout)
        if params is None:
            params = np.zeros(size, dtype=dtype)
        params = np.ascontiguousarray(params, dtype=dtype)
        if params.shape != (size,):
            raise ArgumentError(f"parameter vector has {params.size} entries, architecture needs {size}")
        self.params = params
        self.blocks = self.bind(self.params)
        for an, _ in self.blocks:
            an.initialized = actnorm_initialized

    @classmethod
    def create(
        cls,
        dim: int,
        n_blocks: int = 4,
        hidden: Sequence[int] = (512, 1024, 512),
        clamp: float = 2.0,
        seed: int = 0,
        dtype=np.float32,
    ) -> FlowModel:
        """Fresh model: uniform(+-1/sqrt(fan_in)) hidden layers, zero output layers, identity ActNorm."""
        if n_blocks < 1:
            raise ArgumentError("need at least one block")
        model = cls(dim, half_masks(dim, n_blocks), hidden, clamp, dtype=dtype)
        rng = np.random.default_rng(seed)
        for _, coupling in model.blocks:
            for net in (coupling.s_net, coupling.t_net):
                for w, b in zip(net.weights[:-1], net.biases[:-1]):
                    bound = 1.0 / math.sqrt(w.shape[0])
                    w[...] = rng.uniform(-bound, bound, size=w.shape)
                    b[...] = rng.uniform(-bound, bound, size=b.shape)
        return model

    # -- structure ---------------------------------------------------------- #

    @property
    def n_blocks(self) -> int:
        return self.masks.shape[0]

    @property
    def dtype(self):
        return self.params.dtype

    @property
    def actnorm_initialized(self) -> bool:
        return all(an.initialized for an, _ in self.blocks)

    @actnorm_initialized.setter
    def actnorm_initialized(self, value: bool) -> None:
        for an, _ in self.blocks:
            an.initialized = bool(value)

    def _layout(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for k, mask in enumerate(self.masks):
            n_pass = int(mask.sum())
            widths = [n_pass, *self.hidden, self.dim - n_pass]
            out.append((f"block{k}.actnorm.log_scale", (self.dim,)))
            out.append((f"block{k}.actnorm.bias", (self.dim,)))
            for net in ("s_net", "t_net"):
                for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                    out.append((f"block{k}.{net}.W{i}", (a, b)))
                    out.append((f"block{k}.{net}.b{i}", (b,)))
        return out

    def named_views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        views, pos = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            views[name] = flat[pos : pos + size].reshape(shape)
            pos += size
        return views

    def named_parameters(self) -> dict[str, np.ndarray]:
        return self.named_views(self.params)

    def bind(self, flat: np.ndarray) -> list[tuple[ActNormLayer, CouplingLayer]]:
        """Build layer objects whose arrays are views into ``flat`` (params or gradients)."""
        v = self.named_views(flat)
        n_layers = len(self.hidden) + 1
        blocks = []
        for k, mask in enumerate(self.masks):
            an = ActNormLayer(v[f"block{k}.actnorm.log_scale"], v[f"block{k}.actnorm.bias"])
            nets = [
                MLPNet(
                    [v[f"block{k}.{net}.W{i}"] for i in range(n_layers)],
                    [v[f"block{k}.{net}.b{i}"] for i in range(n_layers)],
                )
                for net in ("s_net", "t_net")
            ]
            blocks.append((an, CouplingLayer(mask, nets[0], nets[1], self.clamp)))
        return blocks

    def copy(self, dtype=None) -> FlowModel:
        return FlowModel(
            self.dim,
            self.masks.copy(),
            self.hidden,
            self.clamp,
            params=self.params.astype(dtype or self.dtype, copy=True),
            dtype=dtype or self.dtype,
            actnorm_initialized=self.actnorm_initialized,
        )

    def initialize_actnorm(self, x: np.ndarray) -> None:
        """Initialize every ActNorm on ``x`` as propagated through the preceding blocks."""
        h = self._as_input(x, check_init=False)
        for an, coupling in self.blocks:
            an.initialize(h)
            h, _ = actnorm_apply(an, h, FORWARD)
            h, _ = coupling_apply(coupling, h, INVERSE)

    # -- transforms --------------------------------------------------------- #

    def _as_input(self, x: np.ndarray, check_init: bool = True) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ArgumentError(f"model expects N x {self.dim} input, got shape {x.shape}")
        if check_init and not self.actnorm_initialized:
            raise StateError("model ActNorm layers are not initialized; train or load a checkpoint first")
        return np.ascontiguousarray(x, dtype=self.dtype)

    def to_latent(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = self._as_input(x)
        total = np.zeros(h.shape[0], dtype=np.float64)
        for an, coupling in self.blocks:
            h, ld = actnorm_apply(an, h, FORWARD)
            total += ld
            h, ld = coupling_apply(coupling, h, INVERSE)
            total += ld
        return h, total

    def to_data(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = self._as_input(z)
        total = np.zeros(h.shape[0], dtype=np.float64)
        for an, coupling in reversed(self.blocks):
            h, ld = coupling_apply(coupling, h, FORWARD)
            total += ld
            h, ld = actnorm_apply(an, h, INVERSE)
            total += ld
        return h, total

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if not np.isfinite(x).all():
            raise ValidationError("log_prob input contains non-finite values")
        out = np.empty(x.shape[0] if x.ndim == 2 else 0, dtype=np.float64)
        if x.ndim == 2 and x.shape[0] == 0:
            self._as_input(x)
            return out
        for lo in range(0, max(x.shape[0], 1), _CHUNK):
            z, logdet = self.to_latent(x[lo : lo + _CHUNK])
            z64 = z.astype(np.float64)
            out[lo : lo + _CHUNK] = -0.5 * self.dim * LOG_2PI - 0.5 * np.einsum("ij,ij->i", z64, z64) + logdet
        return out

    def sample(self, n: int, seed: int) -> np.ndarray:
        if n < 1:
            raise ArgumentError("n must be >= 1")
        z = np.random.default_rng(seed).standard_normal((n, self.dim)).astype(self.dtype)
        return self.to_data(z)[0]

    # -- training support --------------------------------------------------- #

    def nll_and_grad(self, x: np.ndarray, grad: np.ndarray | None = None) -> tuple[float, np.ndarray]:
        """Mean negative log-likelihood of ``x`` and its exact gradient w.r.t. ``params``.

        ``grad`` may be a preallocated flat buffer matching ``params``.
        """
        h = self._as_input(x)
        n = h.shape[0]
        if n == 0:
            raise ArgumentError("empty batch")
        if grad is None:
            grad = np.empty_like(self.params)
        gblocks = self.bind(grad)

        caches = []
        logdet = np.zeros(n, dtype=np.float64)
        for an, cp in self.blocks:
            h, ld = actnorm_apply(an, h, FORWARD)
            logdet += ld
            xa = h[:, cp.pass_idx]
            s_raw, s_acts = cp.s_net.forward_cached(xa)
            t, t_acts = cp.t_net.forward_cached(xa)
            th = np.tanh(s_raw / cp.clamp)
            s = cp.clamp * th
            zb = (h[:, cp.trans_idx] - t) * np.exp(-s)
            logdet -= s.sum(axis=1, dtype=np.float64)
            caches.append(_BlockCache(h, xa, th, s, zb, s_acts, t_acts))
            out = np.empty_like(h)
            out[:, cp.pass_idx] = xa
            out[:, cp.trans_idx] = zb
            h = out

        z64 = h.astype(np.float64)
        loss = 0.5 * self.dim * LOG_2PI + 0.5 * np.einsum("ij,ij->", z64, z64) / n - logdet.sum() / n

        g = h / self.dtype.type(n)
        gl = self.dtype.type(-1.0 / n)
        for (an, cp), (g_an, g_cp), c in zip(reversed(self.blocks), reversed(gblocks), reversed(caches)):
            gb = g[:, cp.trans_idx]
            e = np.exp(-c.s)
            g_yb = gb * e
            g_s = -gb * c.zb - gl
            g_sraw = g_s * (1 - c.tanh * c.tanh)
            g_ya = g[:, cp.pass_idx]
            g_ya = g_ya + cp.s_net.backward(c.s_acts, g_sraw, g_cp.s_net)
            g_ya += cp.t_net.backward(c.t_acts, -g_yb, g_cp.t_net)
            g_y = np.empty_like(g)
            g_y[:, cp.pass_idx] = g_ya
            g_y[:, cp.trans_idx] = g_yb
            scale = np.exp(an.log_scale)
            g = g_y * scale
            np.sum(g, axis=0, out=g_an.bias)
            g_an.log_scale[...] = np.einsum("ij,ij->j", g_y, c.an_out) + gl * n
        return float(loss), grad


def actnorm_initialize(layer: ActNormLayer, x: np.ndarray) -> None:
    layer.initialize(x)


def flow_transform(model: FlowModel, x: np.ndarray, direction: str = TO_LATENT) -> tuple[np.ndarray, np.ndarray]:
    if direction == TO_LATENT:
        return model.to_latent(x)
    if direction == TO_DATA:
        return model.to_data(x)
    raise ArgumentError(f"direction must be 'to_latent' or 'to_data', got {direction!r}")


def log_prob(model: FlowModel, x: np.ndarray) -> np.ndarray:
    return model.log_prob(x)


def sample(model: FlowModel, n: int, seed: int) -> np.ndarray:
    return model.sample(n, seed)


def standard_normal_log_prob(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return -0.5 * z.shape[1] * LOG_2PI - 0.5 * np.einsum("ij,ij->i", z, z)
