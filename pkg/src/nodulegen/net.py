"""Dense autoencoder: tanh hidden layers, sigmoid output, trained with Adam.

The network splits at its bottleneck layer into a feature (encoder) half and
a generator (decoder) half; composing the halves reproduces the full forward
pass exactly. Everything runs in float64 for reproducibility and so analytic
gradients can be checked against central finite differences.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from .dataset import NoduleSet
from .errors import DimensionMismatch, ShapeMismatch
from .voxel import VoxelGrid

NET_MAGIC = b"NDLNET01"

DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPSILON = 1e-8
DEFAULT_BATCH_SIZE = 64


@dataclass(frozen=True)
class Network:
    """Layered dense autoencoder plus its encoder/decoder split point.

    layer_sizes includes the input and output widths (both the voxel count);
    bottleneck_index indexes into layer_sizes. weights[i] has shape
    (layer_sizes[i], layer_sizes[i+1]).
    """

    layer_sizes: tuple[int, ...]
    bottleneck_index: int
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]

    @property
    def latent_dim(self) -> int:
        return self.layer_sizes[self.bottleneck_index]

    @property
    def arch_name(self) -> str:
        return "_".join(str(n) for n in self.layer_sizes[1:-1])


@dataclass(frozen=True)
class AdamState:
    step: int
    m_w: tuple[np.ndarray, ...]
    v_w: tuple[np.ndarray, ...]
    m_b: tuple[np.ndarray, ...]
    v_b: tuple[np.ndarray, ...]
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    epsilon: float = DEFAULT_EPSILON


def parse_arch(spec: str) -> tuple[int, ...]:
    """Hidden layer sizes from an underscore-separated name like '32_3_64_256'."""
    try:
        sizes = tuple(int(tok) for tok in spec.strip().split("_"))
    except ValueError as exc:
        raise ValueError(f"bad architecture spec {spec!r}") from exc
    if not sizes or any(n < 1 for n in sizes):
        raise ValueError(f"bad architecture spec {spec!r}")
    return sizes


def init_network(hidden_sizes: Sequence[int],
                 dims: tuple[int, int, int],
                 spacing: tuple[float, float, float],
                 rng_seed: int = 0,
                 bottleneck_index: int | None = None) -> Network:
    """Uniform +/- 1/sqrt(fan_in) init; bottleneck defaults to the narrowest
    hidden layer (first on ties)."""
    hidden = tuple(int(n) for n in hidden_sizes)
    n_vox = int(np.prod(dims))
    layer_sizes = (n_vox,) + hidden + (n_vox,)
    if bottleneck_index is None:
        bottleneck_index = 1 + int(np.argmin(hidden))
    if not 1 <= bottleneck_index <= len(layer_sizes) - 2:
        raise ValueError(f"bottleneck index {bottleneck_index} out of range")
    rng = np.random.default_rng([rng_seed, 0xAE])
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        w.setflags(write=False)
        b = np.zeros(fan_out)
        b.setflags(write=False)
        weights.append(w)
        biases.append(b)
    return Network(layer_sizes, bottleneck_index, tuple(weights), tuple(biases),
                   tuple(dims), tuple(spacing))


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != net.layer_sizes[0]:
        raise DimensionMismatch(
            f"input width {x.shape[1]} != network input {net.layer_sizes[0]}")
    return x


def _activations(net: Network, x: np.ndarray) -> list[np.ndarray]:
    """All layer activations, input first, sigmoid reconstruction last."""
    acts = [x]
    a = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        a = expit(z) if i == last else np.tanh(z)
        acts.append(a)
    return acts


def reconstruct_batch(net: Network, x: np.ndarray) -> np.ndarray:
    return _activations(net, _check_input(net, x))[-1]


def encode_batch(net: Network, x: np.ndarray) -> np.ndarray:
    a = _check_input(net, x)
    for w, b in zip(net.weights[:net.bottleneck_index],
                    net.biases[:net.bottleneck_index]):
        a = np.tanh(a @ w + b)
    return a


def decode_batch(net: Network, latent: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(latent, dtype=np.float64))
    if a.shape[1] != net.latent_dim:
        raise DimensionMismatch(
            f"latent width {a.shape[1]} != bottleneck {net.latent_dim}")
    ws = net.weights[net.bottleneck_index:]
    bs = net.biases[net.bottleneck_index:]
    last = len(ws) - 1
    for i, (w, b) in enumerate(zip(ws, bs)):
        z = a @ w + b
        a = expit(z) if i == last else np.tanh(z)
    return a


def forward(net: Network, grid: VoxelGrid) -> tuple[VoxelGrid, np.ndarray]:
    """Full pass over one grid: (reconstruction, bottleneck activations)."""
    x = grid.values.reshape(1, -1)
    acts = _activations(net, _check_input(net, x))
    recon = acts[-1][0].reshape(grid.dims)
    latent = acts[net.bottleneck_index][0].copy()
    return grid.with_values(recon), latent


def encode(net: Network, grid: VoxelGrid) -> np.ndarray:
    return encode_batch(net, grid.values.reshape(1, -1))[0]


def decode(net: Network, latent: np.ndarray) -> VoxelGrid:
    vals = decode_batch(net, latent)[0].reshape(net.dims)
    return VoxelGrid(net.dims, net.spacing, vals)


def loss_mse(reconstruction, target) -> float:
    """Mean over all voxels of the squared difference."""
    if isinstance(reconstruction, VoxelGrid):
        reconstruction = reconstruction.values
    if isinstance(target, VoxelGrid):
        target = target.values
    a = np.asarray(reconstruction, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def backward(net: Network, x: np.ndarray, target: np.ndarray):
    """Gradients of loss_mse w.r.t. every weight and bias.

    Returns (grads_w, grads_b) with the same shapes as net.weights/biases.
    """
    x = _check_input(net, x)
    target = _check_input(net, target)
    if x.shape != target.shape:
        raise DimensionMismatch(f"input {x.shape} vs target {target.shape}")
    acts = _activations(net, x)
    out = acts[-1]
    n_total = out.size
    # dL/dz at the sigmoid output layer
    delta = (2.0 / n_total) * (out - target) * out * (1.0 - out)
    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.biases)
    for i in range(len(net.weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i].T) * (1.0 - acts[i] ** 2)
    return grads_w, grads_b


def init_adam(net: Network,
              learning_rate: float = DEFAULT_LEARNING_RATE,
              beta1: float = DEFAULT_BETA1,
              beta2: float = DEFAULT_BETA2,
              epsilon: float = DEFAULT_EPSILON) -> AdamState:
    return AdamState(step=0,
                     m_w=tuple(np.zeros_like(w) for w in net.weights),
                     v_w=tuple(np.zeros_like(w) for w in net.weights),
                     m_b=tuple(np.zeros_like(b) for b in net.biases),
                     v_b=tuple(np.zeros_like(b) for b in net.biases),
                     learning_rate=learning_rate, beta1=beta1, beta2=beta2,
                     epsilon=epsilon)


def adam_step(net: Network, grads, state: AdamState) -> tuple[Network, AdamState]:
    """One bias-corrected Adam update; returns the new network and state."""
    grads_w, grads_b = grads
    if len(grads_w) != len(net.weights) or len(grads_b) != len(net.biases):
        raise ShapeMismatch("gradient layer count does not match network")
    for g, w in zip(grads_w, net.weights):
        if g.shape != w.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != weight {w.shape}")
    t = state.step + 1
    b1, b2, eps, lr = state.beta1, state.beta2, state.epsilon, state.learning_rate
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t

    def upd(params, grads, ms, vs):
        new_p, new_m, new_v = [], [], []
        for p, g, m, v in zip(params, grads, ms, vs):
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            p = p - lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
            new_p.append(p)
            new_m.append(m)
            new_v.append(v)
        return tuple(new_p), tuple(new_m), tuple(new_v)

    w, m_w, v_w = upd(net.weights, grads_w, state.m_w, state.v_w)
    b, m_b, v_b = upd(net.biases, grads_b, state.m_b, state.v_b)
    new_net = replace(net, weights=w, biases=b)
    new_state = replace(state, step=t, m_w=m_w, v_w=v_w, m_b=m_b, v_b=v_b)
    return new_net, new_state


def train(net: Network,
          data: NoduleSet | np.ndarray,
          iterations: int,
          batch_size: int = DEFAULT_BATCH_SIZE,
          learning_rate: float = DEFAULT_LEARNING_RATE,
          rng_seed: int = 0) -> tuple[Network, list[float]]:
    """Run `iterations` Adam minibatch steps on the autoencoding objective.

    The image pool is reshuffled each time it is exhausted (one epoch).
    Deterministic for a fixed rng_seed. Returns the trained network and the
    per-iteration minibatch MSE history.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    x = data.to_matrix() if isinstance(data, NoduleSet) else np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("training set must be a non-empty (n, voxels) matrix")
    _check_input(net, x[:1])
    rng = np.random.default_rng([rng_seed, 0x7A])
    state = init_adam(net, learning_rate=learning_rate)
    history = []
    order = rng.permutation(x.shape[0])
    pos = 0
    for _ in range(iterations):
        if pos >= len(order):
            order = rng.permutation(x.shape[0])
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        batch = x[idx]
        recon = reconstruct_batch(net, batch)
        history.append(loss_mse(recon, batch))
        net, state = adam_step(net, backward(net, batch, batch), state)
    return net, history


def sample_latent(latent_dim: int, rng: np.random.Generator) -> np.ndarray:
    """One latent point, i.i.d. uniform in [-1, 1] per dimension."""
    if latent_dim < 1:
        raise ValueError("latent_dim must be >= 1")
    return rng.uniform(-1.0, 1.0, size=latent_dim)


def save_network(net: Network, path) -> None:
    """Self-describing binary: magic, grid geometry, layer sizes, bottleneck
    index, then all parameters as float64 little-endian."""
    with open(path, "wb") as fh:
        fh.write(NET_MAGIC)
        fh.write(struct.pack("<3I", *net.dims))
        fh.write(struct.pack("<3d", *net.spacing))
        fh.write(struct.pack("<I", len(net.layer_sizes)))
        fh.write(struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes))
        fh.write(struct.pack("<I", net.bottleneck_index))
        for w, b in zip(net.weights, net.biases):
            fh.write(w.astype("<f8").tobytes())
            fh.write(b.astype("<f8").tobytes())


def load_network(path) -> Network:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != NET_MAGIC:
            raise ValueError(f"{path}: not a network file (magic {magic!r})")
        dims = struct.unpack("<3I", fh.read(12))
        spacing = struct.unpack("<3d", fh.read(24))
        (n_layers,) = struct.unpack("<I", fh.read(4))
        layer_sizes = struct.unpack(f"<{n_layers}I", fh.read(4 * n_layers))
        (bottleneck_index,) = struct.unpack("<I", fh.read(4))
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            w = np.frombuffer(fh.read(8 * fan_in * fan_out),
                              dtype="<f8").reshape(fan_in, fan_out).copy()
            b = np.frombuffer(fh.read(8 * fan_out), dtype="<f8").copy()
            w.setflags(write=False)
            b.setflags(write=False)
            weights.append(w)
            biases.append(b)
    return Network(tuple(int(n) for n in layer_sizes), int(bottleneck_index),
                   tuple(weights), tuple(biases), tuple(int(d) for d in dims),
                   spacing)


def finite_difference_grads(net: Network, x: np.ndarray, target: np.ndarray,
                            h: float = 1e-4):
    """Central-difference gradients, using only the forward pass.

    Independent check for backward(); O(params) forward evaluations, so keep
    the networks small.
    """
    x = _check_input(net, x)
    target = _check_input(net, target)

    def loss_with(weights, biases) -> float:
        trial = replace(net, weights=tuple(weights), biases=tuple(biases))
        return loss_mse(reconstruct_batch(trial, x), target)

    grads_w, grads_b = [], []
    for li in range(len(net.weights)):
        gw = np.zeros_like(net.weights[li])
        for idx in np.ndindex(gw.shape):
            ws = [w.copy() for w in net.weights]
            ws[li][idx] += h
            up = loss_with(ws, net.biases)
            ws[li][idx] -= 2 * h
            down = loss_with(ws, net.biases)
            gw[idx] = (up - down) / (2 * h)
        grads_w.append(gw)
        gb = np.zeros_like(net.biases[li])
        for idx in np.ndindex(gb.shape):
            bs = [b.copy() for b in net.biases]
            bs[li][idx] += h
            up = loss_with(net.weights, bs)
            bs[li][idx] -= 2 * h
            down = loss_with(net.weights, bs)
            gb[idx] = (up - down) / (2 * h)
        grads_b.append(gb)
    return grads_w, grads_b


def max_relative_gradient_error(net: Network, x: np.ndarray, target: np.ndarray,
                                h: float = 1e-4) -> float:
    """Worst-case safeguarded relative error, analytic vs central differences."""
    aw, ab = backward(net, x, target)
    fw, fb = finite_difference_grads(net, x, target, h)
    worst = 0.0
    for a, f in zip(aw + ab, fw + fb):
        denom = np.maximum(np.abs(a) + np.abs(f), 1e-3)
        worst = max(worst, float(np.max(np.abs(a - f) / denom)))
    return worst


def gradient_check(rng_seed: int = 0, trials: int = 20) -> float:
    """Max relative gradient error over random small networks."""
    rng = np.random.default_rng([rng_seed, 0x6C])
    worst = 0.0
    for trial in range(trials):
        # up to 64 inputs, up to 3 hidden layers
        nz, ny, nx = 1, int(rng.integers(2, 9)), int(rng.integers(2, 9))
        n_hidden = int(rng.integers(1, 4))
        hidden = [int(rng.integers(2, 7)) for _ in range(n_hidden)]
        net = init_network(hidden, (nz, ny, nx), (1.0, 1.0, 1.0),
                           rng_seed=int(rng.integers(0, 2 ** 31)))
        n_vox = nz * ny * nx
        batch = int(rng.integers(1, 4))
        x = rng.uniform(0.0, 1.0, size=(batch, n_vox))
        t = rng.uniform(0.0, 1.0, size=(batch, n_vox))
        worst = max(worst, max_relative_gradient_error(net, x, t))
    return worst
