"""Fully-connected networks with hand-written reverse-mode gradients.

ReLU follows every affine layer except the last. Everything is float64.
Inputs may be a single vector ``(d,)`` or a batch ``(n, d)``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

POLICY_MAGIC = b"DSPOLICY"
POLICY_FORMAT_VERSION = 1


class Head(str, Enum):
    Q_VALUES = "qvalues"
    LOGITS = "logits"
    GAUSSIAN = "gaussian"


@dataclass
class MlpParams:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i], self.layer_dims[i + 1]):
                raise ValueError(f"layer {i}: weight shape {w.shape} mismatches dims")
            if b.shape != (self.layer_dims[i + 1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} mismatches dims")

    def copy(self) -> "MlpParams":
        return MlpParams(
            self.layer_dims,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in serialization order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def scale(self, k: float) -> "MlpGrads":
        return MlpGrads([w * k for w in self.weights], [b * k for b in self.biases])


def mlp_init(layer_dims, rng: np.random.Generator) -> MlpParams:
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"need at least two positive layer dims, got {layer_dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(dims), weights, biases)


def _forward_cache(params: MlpParams, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.layer_dims[0]:
        raise ValueError(f"input width {x.shape[-1]} != {params.layer_dims[0]}")
    acts = [x]
    pre = []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts, pre


def forward(params: MlpParams, x) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != params.layer_dims[0]:
        raise ValueError(f"input width {h.shape[-1]} != {params.layer_dims[0]}")
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i != last:
            h = np.maximum(h, 0.0)
    return h


def backward(params: MlpParams, x, upstream_grad) -> MlpGrads:
    """Gradient of ``sum(upstream_grad * forward(params, x))`` w.r.t. params.

    For batched input the per-sample gradients are summed.
    """
    acts, pre = _forward_cache(params, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != acts[-1].shape:
        raise ValueError(f"upstream grad shape {g.shape} != output shape {acts[-1].shape}")
    n_layers = len(params.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in reversed(range(n_layers)):
        if i != n_layers - 1:
            g = g * (pre[i] > 0)
        a = acts[i]
        if a.ndim == 1:
            gw[i] = np.outer(a, g)
            gb[i] = g.copy()
        else:
            gw[i] = a.T @ g
            gb[i] = g.sum(axis=0)
        if i:
            g = g @ params.weights[i].T
    return MlpGrads(gw, gb)


def input_grad(params: MlpParams, x, upstream_grad) -> np.ndarray:
    acts, pre = _forward_cache(params, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    n_layers = len(params.weights)
    for i in reversed(range(n_layers)):
        if i != n_layers - 1:
            g = g * (pre[i] > 0)
        g = g @ params.weights[i].T
    return g


# ---------------------------------------------------------------------------
# optimizers


@dataclass(frozen=True)
class OptimizerConfig:
    algo: str = "adam"  # "sgd" | "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_grad_norm: float | None = None


@dataclass
class AdamState:
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class NonFiniteGradient(FloatingPointError):
    pass


def clip_by_global_norm(arrays: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    norm = np.sqrt(sum(float(np.sum(a * a)) for a in arrays))
    if norm <= max_norm or norm == 0.0:
        return arrays
    k = max_norm / norm
    return [a * k for a in arrays]


def optimizer_step(
    params: MlpParams,
    grads: MlpGrads | list[np.ndarray],
    config: OptimizerConfig,
    state: AdamState | None = None,
) -> tuple[MlpParams, AdamState | None]:
    """Return updated params (a new object) and the advanced optimizer state.

    ``grads`` may be an MlpGrads or a flat list of arrays aligned with
    ``params.arrays()``; the latter allows extra trailing parameters (e.g. a
    learned log-std) to be updated through :func:`apply_update`.
    """
    g_arrays = grads.arrays() if isinstance(grads, MlpGrads) else list(grads)
    new_arrays, state = apply_update(params.arrays(), g_arrays, config, state)
    return MlpParams(params.layer_dims, new_arrays[0::2], new_arrays[1::2]), state


def apply_update(
    arrays: list[np.ndarray],
    grads: list[np.ndarray],
    config: OptimizerConfig,
    state: AdamState | None = None,
) -> tuple[list[np.ndarray], AdamState | None]:
    if len(arrays) != len(grads):
        raise ValueError("params/grads length mismatch")
    for a, g in zip(arrays, grads):
        if a.shape != g.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {a.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient; step rejected")
    if config.max_grad_norm is not None:
        grads = clip_by_global_norm(grads, config.max_grad_norm)
    if config.algo == "sgd":
        return [a - config.lr * g for a, g in zip(arrays, grads)], state
    if config.algo != "adam":
        raise ValueError(f"unknown optimizer {config.algo!r}")
    if state is None or not state.m:
        state = AdamState(0, [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])
    b1, b2 = config.betas
    t = state.t + 1
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state.v, grads)]
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    out = [
        a - config.lr * (mi / c1) / (np.sqrt(vi / c2) + config.eps)
        for a, mi, vi in zip(arrays, m, v)
    ]
    return out, AdamState(t, m, v)


# ---------------------------------------------------------------------------
# losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, target_index) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    idx = np.atleast_1d(np.asarray(target_index))
    n = z.shape[0]
    lp = log_softmax(z)
    loss = -lp[np.arange(n), idx].mean()
    grad = np.exp(lp)
    grad[np.arange(n), idx] -= 1.0
    grad /= n
    return float(loss), (grad[0] if single else grad)


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. pred."""
    pred = np.asarray(pred, dtype=np.float64)
    diff = pred - np.asarray(target, dtype=np.float64)
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# policies and the .policy file format


@dataclass
class MlpPolicy:
    params: MlpParams
    head: Head
    input_contract: str = "lidar8"
    log_std: np.ndarray | None = None  # Gaussian head only
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.head = Head(self.head)
        if self.head is Head.GAUSSIAN and self.log_std is None:
            self.log_std = np.zeros(self.params.layer_dims[-1])

    @property
    def obs_dim(self) -> int:
        return self.params.layer_dims[0]

    @property
    def n_outputs(self) -> int:
        return self.params.layer_dims[-1]

    def outputs(self, obs) -> np.ndarray:
        return forward(self.params, obs)

    def action_probs(self, obs) -> np.ndarray:
        """Action distribution; a QValues head puts all mass on its argmax."""
        out = self.outputs(obs)
        if self.head is Head.LOGITS:
            return softmax(out)
        if self.head is Head.Q_VALUES:
            probs = np.zeros_like(out)
            np.put_along_axis(probs, np.argmax(out, axis=-1)[..., None], 1.0, axis=-1)
            return probs
        raise TypeError("Gaussian policies have no discrete action distribution")

    def greedy_action(self, obs) -> np.ndarray:
        return np.argmax(self.outputs(obs), axis=-1)

    def act(self, obs, rng: np.random.Generator, deterministic: bool = False):
        out = self.outputs(obs)
        if self.head is Head.Q_VALUES or (deterministic and self.head is Head.LOGITS):
            return np.argmax(out, axis=-1)
        if self.head is Head.LOGITS:
            p = softmax(out)
            u = rng.random(p.shape[:-1] + (1,))
            return np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), p.shape[-1] - 1)
        if deterministic:
            return out
        return out + np.exp(self.log_std) * rng.standard_normal(out.shape)

    def copy(self) -> "MlpPolicy":
        return replace(
            self,
            params=self.params.copy(),
            log_std=None if self.log_std is None else self.log_std.copy(),
            meta=dict(self.meta),
        )


def policies_equal(a: MlpPolicy, b: MlpPolicy) -> bool:
    if a.head != b.head or a.input_contract != b.input_contract:
        return False
    if a.params.layer_dims != b.params.layer_dims:
        return False
    arrays_a = a.params.arrays() + ([a.log_std] if a.log_std is not None else [])
    arrays_b = b.params.arrays() + ([b.log_std] if b.log_std is not None else [])
    return len(arrays_a) == len(arrays_b) and all(
        x.tobytes() == y.tobytes() for x, y in zip(arrays_a, arrays_b)
    )


def policy_to_bytes(policy: MlpPolicy) -> bytes:
    header = {
        "format_version": POLICY_FORMAT_VERSION,
        "head": policy.head.value,
        "layer_dims": list(policy.params.layer_dims),
        "input_contract": policy.input_contract,
        "has_log_std": policy.log_std is not None,
        "meta": policy.meta,
    }
    blob = io.BytesIO()
    for a in policy.params.arrays():
        blob.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    if policy.log_std is not None:
        blob.write(np.ascontiguousarray(policy.log_std, dtype="<f8").tobytes())
    head_bytes = json.dumps(header, sort_keys=True).encode("ascii")
    return POLICY_MAGIC + struct.pack("<I", len(head_bytes)) + head_bytes + blob.getvalue()


def policy_from_bytes(data: bytes) -> MlpPolicy:
    if not data.startswith(POLICY_MAGIC):
        raise ValueError("not a policy file (bad magic)")
    off = len(POLICY_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hlen].decode("ascii"))
    off += hlen
    if header["format_version"] != POLICY_FORMAT_VERSION:
        raise ValueError(f"unsupported policy format_version {header['format_version']}")
    dims = header["layer_dims"]
    flat = np.frombuffer(data, dtype="<f8", offset=off).astype(np.float64)
    weights, biases = [], []
    pos = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        pos += fan_in * fan_out
        biases.append(flat[pos:pos + fan_out].copy())
        pos += fan_out
    log_std = None
    if header.get("has_log_std"):
        log_std = flat[pos:pos + dims[-1]].copy()
        pos += dims[-1]
    if pos != flat.size:
        raise ValueError(f"policy blob has {flat.size} floats, header implies {pos}")
    return MlpPolicy(
        MlpParams(tuple(dims), weights, biases),
        Head(header["head"]),
        header["input_contract"],
        log_std,
        header.get("meta", {}),
    )


def save_policy(policy: MlpPolicy, path) -> None:
    with open(path, "wb") as fh:
        fh.write(policy_to_bytes(policy))


def load_policy(path) -> MlpPolicy:
    with open(path, "rb") as fh:
        return policy_from_bytes(fh.read())
