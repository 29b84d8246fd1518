"""Reverse-mode automatic differentiation over dense float64 arrays.

Everything the adversarial training loops need lives here: a small tape
engine, MLPs with optional noise injection and spectral normalization,
the Adam optimizer and global gradient-norm clipping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf, which the engine treats as a bug."""


class Tape:
    """Execution-ordered record of primitive operations from one forward pass.

    Nodes are appended in the order ops execute, so the list is already a
    topological order: every node's inputs were recorded (or are leaves)
    before the node itself.  ``backward`` walks the list in reverse.
    """

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        # each node: (output tensor, parent tensors, vjp closure)
        self.nodes: list[tuple["Tensor", tuple["Tensor", ...], object]] = []

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], vjp) -> None:
        self.nodes.append((out, parents, vjp))

    @property
    def output(self) -> "Tensor":
        """The most recently recorded tensor, by convention the loss/output."""
        if not self.nodes:
            raise ValueError("empty tape has no output")
        return self.nodes[-1][0]


class Tensor:
    """Dense row-major float64 array, optionally bound to a tape.

    ``trainable=True`` marks leaf parameters; ``backward`` reports gradients
    for exactly those leaves.  Construction rejects NaN/Inf.
    """

    __slots__ = ("data", "tape", "trainable")

    def __init__(self, data, tape: Tape | None = None, trainable: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.tape = tape
        self.trainable = trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, -np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, trainable={self.trainable})"


def parameter(data) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, trainable=True)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def _tape_of(*operands) -> Tape | None:
    tape = None
    for t in operands:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands are bound to different tapes")
    return tape


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _emit(tape: Tape | None, out_data, parents: tuple, vjp) -> Tensor:
    out = Tensor(out_data, tape=tape)
    if tape is not None:
        tape.record(out, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    ad, bd = _data(a), _data(b)
    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))

    def vjp(g):
        out = []
        if isinstance(a, Tensor):
            out.append(_unbroadcast(g, ad.shape))
        if isinstance(b, Tensor):
            out.append(_unbroadcast(g, bd.shape))
        return tuple(out)

    return _emit(tape, ad + bd, parents, vjp)


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    ad, bd = _data(a), _data(b)
    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))

    def vjp(g):
        out = []
        if isinstance(a, Tensor):
            out.append(_unbroadcast(g * bd, ad.shape))
        if isinstance(b, Tensor):
            out.append(_unbroadcast(g * ad, bd.shape))
        return tuple(out)

    return _emit(tape, ad * bd, parents, vjp)


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    ad, bd = _data(a), _data(b)
    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))

    def vjp(g):
        out = []
        if isinstance(a, Tensor):
            out.append(g @ bd.T)
        if isinstance(b, Tensor):
            out.append(ad.T @ g)
        return tuple(out)

    return _emit(tape, ad @ bd, parents, vjp)


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    ad = _data(a)
    mask = np.where(ad > 0.0, 1.0, slope)
    return _emit(_tape_of(a), ad * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(_data(a))
    return _emit(_tape_of(a), out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(_data(a))
    return _emit(_tape_of(a), out, (a,), lambda g: (g * out * (1.0 - out),))


def clamped_log(a: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(a, floor)).

    The local gradient is 1/max(a, floor) even in the clamped region, so
    gradient signal keeps flowing when a discriminator saturates at 0 or 1.
    """
    clamped = np.maximum(_data(a), floor)
    return _emit(_tape_of(a), np.log(clamped), (a,), lambda g: (g / clamped,))


def mean_all(a: Tensor) -> Tensor:
    ad = _data(a)
    n = ad.size

    def vjp(g):
        return (np.full(ad.shape, float(g) / n),)

    return _emit(_tape_of(a), ad.mean(), (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    ad = _data(a)

    def vjp(g):
        return (np.full(ad.shape, float(g)),)

    return _emit(_tape_of(a), ad.sum(), (a,), vjp)


def concat_cols(a, b) -> Tensor:
    """Concatenate two [n, ·] blocks along the last axis."""
    tape = _tape_of(a, b)
    ad, bd = _data(a), _data(b)
    ka = ad.shape[-1]
    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))

    def vjp(g):
        out = []
        if isinstance(a, Tensor):
            out.append(g[..., :ka])
        if isinstance(b, Tensor):
            out.append(g[..., ka:])
        return tuple(out)

    return _emit(tape, np.concatenate([ad, bd], axis=-1), parents, vjp)


def cycle_cols(a: Tensor, width: int) -> Tensor:
    """Repeat columns cyclically until the last axis has ``width`` entries.

    Used to match a low-dimensional noise vector to the width of the layer
    it is injected into; the adjoint scatter-adds back onto the source.
    """
    ad = _data(a)
    idx = np.arange(width) % ad.shape[-1]

    def vjp(g):
        out = np.zeros_like(ad)
        if ad.ndim == 2:
            np.add.at(out, (slice(None), idx), g)
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _emit(_tape_of(a), ad[..., idx], (a,), vjp)


def spectral_scale(w: Tensor, u: np.ndarray, v: np.ndarray, tape: Tape | None = None) -> Tensor:
    """w / sigma with sigma = u @ w @ v; u and v are treated as constants.

    Gradients flow through both the numerator and the sigma estimate, the
    standard differentiable form of spectral normalization.
    """
    wd = _data(w)
    sigma = float(u @ wd @ v)
    if sigma <= 0.0:
        raise ValueError("spectral scale requires a positive singular-value estimate")
    out = wd / sigma
    uv = np.outer(u, v)

    def vjp(g):
        return (g / sigma - (np.sum(g * wd) / sigma**2) * uv,)

    return _emit(tape if tape is not None else _tape_of(w), out, (w,), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(tape: Tape, output_grad) -> dict[Tensor, np.ndarray]:
    """Walk the tape in reverse and return gradients for trainable leaves.

    ``output_grad`` seeds the gradient of the tape's final tensor (the loss).
    Parameters themselves are left untouched.
    """
    out = tape.output
    g0 = np.asarray(output_grad, dtype=np.float64)
    if g0.shape != out.data.shape:
        raise ValueError(
            f"output_grad shape {g0.shape} does not match output shape {out.data.shape}"
        )
    grads: dict[int, np.ndarray] = {id(out): g0}
    leaves: dict[int, Tensor] = {}
    for node_out, parents, vjp in reversed(tape.nodes):
        g = grads.pop(id(node_out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, vjp(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.trainable:
                leaves[key] = parent
    return {leaf: grads[key] for key, leaf in leaves.items()}


def grads_for(params: list[Tensor], grad_map: dict[Tensor, np.ndarray]) -> list[np.ndarray]:
    """Gradients aligned with ``params``; zeros for parameters off the tape."""
    return [grad_map.get(p, np.zeros_like(p.data)) for p in params]


# ---------------------------------------------------------------------------
# MLPs
# ---------------------------------------------------------------------------

ACTIVATIONS = ("leaky-relu", "tanh", "sigmoid", "identity")
NOISE_MODES = ("multiply", "add")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully-connected network.

    ``widths`` lists the input width followed by one output width per layer;
    ``activations`` names one nonlinearity per layer.  ``noise_index``, if
    set, marks the layer whose pre-activation is combined element-wise with
    an injected noise vector (cycled up to the layer width when ``noise_dim``
    is smaller); ``noise_mode`` selects multiplicative or additive injection.
    ``spectral_norm`` carries one flag per layer (empty tuple = all off).
    """

    widths: tuple[int, ...]
    activations: tuple[str, ...]
    leaky_slope: float = 0.1
    noise_index: int | None = None
    noise_dim: int | None = None
    noise_mode: str = "multiply"
    spectral_norm: tuple[bool, ...] = ()

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("widths needs at least an input and an output entry")
        if any(w <= 0 for w in self.widths):
            raise ValueError("widths must be positive")
        if len(self.activations) != self.n_layers:
            raise ValueError("need exactly one activation per layer")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")
        if (self.noise_index is None) != (self.noise_dim is None):
            raise ValueError("noise_index and noise_dim must be set together")
        if self.noise_index is not None:
            if not 1 <= self.noise_index <= self.n_layers - 1:
                raise ValueError("noise_index must name an interior layer")
            if self.noise_dim <= 0:
                raise ValueError("noise_dim must be positive")
            if self.noise_mode not in NOISE_MODES:
                raise ValueError(f"unknown noise_mode {self.noise_mode!r}")
        if self.spectral_norm and len(self.spectral_norm) != self.n_layers:
            raise ValueError("need one spectral_norm flag per layer (or none)")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def sn_flag(self, layer: int) -> bool:
        return bool(self.spectral_norm) and self.spectral_norm[layer]


@dataclass
class MlpParams:
    """Trainable weights/biases plus persistent power-iteration vectors."""

    weights: list[Tensor]
    biases: list[Tensor]
    sn_u: list[np.ndarray | None]

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases]

    def state_arrays(self) -> list[np.ndarray]:
        """Copies of all parameter arrays, in ``parameters()`` order."""
        return [p.data.copy() for p in self.parameters()]

    def load_state_arrays(self, arrays: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError("state array count mismatch")
        for p, a in zip(params, arrays):
            if a.shape != p.data.shape:
                raise ValueError("state array shape mismatch")
            p.data = a.copy()


def init_mlp(spec: MlpSpec, rng) -> MlpParams:
    """Uniform +-sqrt(1/fan_in) initialization for weights and biases."""
    weights, biases, sn_u = [], [], []
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        bound = np.sqrt(1.0 / fan_in)
        weights.append(parameter(rng.uniform(-bound, bound, (fan_in, fan_out))))
        biases.append(parameter(rng.uniform(-bound, bound, fan_out)))
        if spec.sn_flag(i):
            u = rng.normal((fan_in,))
            sn_u.append(u / np.linalg.norm(u))
        else:
            sn_u.append(None)
    return MlpParams(weights, biases, sn_u)


def _activate(h: Tensor, name: str, slope: float) -> Tensor:
    if name == "leaky-relu":
        return leaky_relu(h, slope)
    if name == "tanh":
        return tanh(h)
    if name == "sigmoid":
        return sigmoid(h)
    return h  # identity


def _power_iteration(w: np.ndarray, u: np.ndarray, iters: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Warm-started power iteration; returns (u, v, sigma_hat) for w [in, out]."""
    eps = 1e-12
    v = None
    for _ in range(iters):
        v = w.T @ u
        v = v / (np.linalg.norm(v) + eps)
        u = w @ v
        u = u / (np.linalg.norm(u) + eps)
    if v is None:
        v = w.T @ u
        v = v / (np.linalg.norm(v) + eps)
    return u, v, float(u @ w @ v)


def spectral_normalize(
    weight: np.ndarray, power_iters: int = 1, u: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Divide a matrix by its power-iteration top-singular-value estimate.

    Returns ``(normalized, u)`` where ``u`` should be fed back in on the next
    call (warm start).  The input is never mutated; an all-zero matrix is
    returned unchanged since it has no direction to normalize.
    """
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("spectral_normalize expects a matrix")
    if power_iters < 1:
        raise ValueError("power_iters must be >= 1")
    if u is None:
        u = np.ones(w.shape[0]) / np.sqrt(w.shape[0])
    if not np.any(w):
        return w.copy(), u
    u, v, sigma = _power_iteration(w, u, power_iters)
    return w / sigma, u


def mlp_forward(
    spec: MlpSpec,
    params: MlpParams,
    x,
    noise=None,
    tape: Tape | None = None,
    update_sn: bool = True,
) -> Tensor:
    """Run the MLP, recording every primitive onto a tape.

    ``x`` is [n, in_dim]; ``noise`` is required iff the spec has a noise
    injection layer and is combined with that layer's pre-activation.
    A fresh tape is created unless one is passed (or ``x`` carries one);
    pass ``tape=None`` on a tape-less input for pure evaluation.
    ``update_sn=False`` freezes the power-iteration vectors, which keeps
    repeated forwards bitwise identical (used by finite-difference checks).
    """
    if isinstance(x, Tensor):
        if tape is None:
            tape = x.tape
            h = x
        elif x.tape is tape:
            h = x
        elif x.tape is None:
            # link the tape-less leaf into this tape via an identity node
            h = _emit(tape, x.data, (x,), lambda g: (g,))
        else:
            raise ValueError("input is bound to a different tape")
    else:
        h = Tensor(x, tape=tape)
    if h.data.ndim != 2 or h.data.shape[1] != spec.in_dim:
        raise ValueError(f"input must be [n, {spec.in_dim}], got {h.data.shape}")
    if (noise is None) == (spec.noise_index is not None):
        raise ValueError("noise must be supplied iff the spec has a noise layer")
    if noise is not None:
        noise = noise if isinstance(noise, Tensor) else Tensor(noise, tape=tape)
        if noise.data.shape != (h.data.shape[0], spec.noise_dim):
            raise ValueError(
                f"noise must be [n, {spec.noise_dim}], got {noise.data.shape}"
            )

    for i in range(spec.n_layers):
        w = params.weights[i]
        if spec.sn_flag(i):
            if update_sn:
                u_new, _, _ = _power_iteration(w.data, params.sn_u[i], 1)
                params.sn_u[i] = u_new
            u = params.sn_u[i]
            v = w.data.T @ u
            v = v / (np.linalg.norm(v) + 1e-12)
            w_eff = spectral_scale(w, u, v, tape=tape)
        else:
            w_eff = w
        h = add(matmul(h, w_eff), params.biases[i])
        if spec.noise_index == i:
            z = noise
            if spec.noise_dim != spec.widths[i + 1]:
                z = cycle_cols(z, spec.widths[i + 1])
            h = mul(h, z) if spec.noise_mode == "multiply" else add(h, z)
        h = _activate(h, spec.activations[i], spec.leaky_slope)
    return h


def forward(spec: MlpSpec, params: MlpParams, x, noise=None, update_sn: bool = True):
    """Recorded forward pass: returns ``(output, tape)``."""
    tape = Tape()
    out = mlp_forward(spec, params, x, noise=noise, tape=tape, update_sn=update_sn)
    return out, tape


# ---------------------------------------------------------------------------
# optimizer and gradient utilities
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter Adam moments plus hyperparameters."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], lr=1e-4, beta1=0.9, beta2=0.99, eps=1e-8):
        return cls(
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            t=0,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )

    def copy(self) -> "AdamState":
        return AdamState(
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            t=self.t,
            m=[m.copy() for m in self.m],
            v=[v.copy() for v in self.v],
        )


def adam_step(
    state: AdamState,
    params: list[Tensor],
    grads: list[np.ndarray],
    maximize: bool = False,
) -> None:
    """One Adam update with bias correction, applied in place.

    ``maximize=True`` adds the step (gradient ascent), which is how both
    adversarial players are driven.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("params/grads/state length mismatch")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ValueError("gradient shape mismatch")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        step = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.data = p.data + step if maximize else p.data - step


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total <= max_norm or total == 0.0:
        return [g.copy() for g in grads], total
    scale = max_norm / total
    return [g * scale for g in grads], total
