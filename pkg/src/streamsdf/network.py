"""SDF network: off-axis positional embedding, 4-hidden-layer softplus MLP,
analytic input gradients and hand-written second-order parameter gradients.

Arrays use the row-vector convention ``z = a @ W + b`` with ``W`` of shape
``(fan_in, fan_out)``. Layer order (also the checkpoint order)::

    W1 (252, 256)  b1 (256,)     embedding -> hidden 1
    W2 (256, 256)  b2 (256,)     hidden 1 -> hidden 2
    W3 (508, 256)  b3 (256,)     [hidden 2 ; embedding] -> hidden 3
    W4 (256, 256)  b4 (256,)     hidden 3 -> hidden 4
    W5 (256, 1)    b5 (1,)       hidden 4 -> output

Embedding layout: for each octave k = 0..L, 21 sines of 2^k A (s x) followed
by 21 cosines of 2^k A (s x), where s is the basis' ``input_scale``.
"""

from __future__ import annotations

import io
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_DIRS = 21
HIDDEN = 256


class NonFiniteError(FloatingPointError):
    """Raised when a loss term or gradient becomes NaN/inf."""


# ---------------------------------------------------------------------------
# embedding


@dataclass(frozen=True)
class EmbeddingBasis:
    A: np.ndarray  # (21, 3) unit rows
    n_octaves: int = 5  # L; octaves run k = 0..L
    # Points are multiplied by this before projection. With s = 1 the top
    # octave has a 0.2 m period, which fits noise between the sparse samples
    # of a room-sized scene; see DEFAULT_INPUT_SCALE.
    input_scale: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.input_scale) and self.input_scale > 0):
            raise ValueError("input_scale must be positive and finite")

    def project(self, x: np.ndarray) -> np.ndarray:
        """(s x) A^T, the per-direction phases of octave 0."""
        return (x * x.dtype.type(self.input_scale)) @ self.A.T.astype(x.dtype, copy=False)

    def pullback(self, dproj: np.ndarray) -> np.ndarray:
        """Adjoint of ``project``: maps d/d(proj) rows to d/dx rows."""
        return (dproj @ self.A.astype(dproj.dtype, copy=False)) * dproj.dtype.type(self.input_scale)

    @property
    def dim(self) -> int:
        return self.A.shape[0] * 2 * (self.n_octaves + 1)


def _icosahedron() -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    phi = (1.0 + 5.0**0.5) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    return verts / np.linalg.norm(verts, axis=1, keepdims=True), faces


DEFAULT_INPUT_SCALE = 0.1


def build_embedding_basis(n_octaves: int = 5, input_scale: float = DEFAULT_INPUT_SCALE) -> EmbeddingBasis:
    """Icosahedron subdivided once (42 vertices), antipodal pairs dropped -> 21 directions."""
    verts, faces = _icosahedron()
    pts = [v for v in verts]
    midpoint: dict[tuple[int, int], int] = {}
    for a, b, c in faces:
        for i, j in ((a, b), (b, c), (c, a)):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                m = pts[i] + pts[j]
                pts.append(m / np.linalg.norm(m))
                midpoint[key] = len(pts) - 1
    pts = np.array(pts)
    assert len(pts) == 42

    rows: list[np.ndarray] = []
    for p in pts:
        if any(np.dot(p, q) < -1.0 + 1e-9 for q in rows):
            continue
        rows.append(p)
    A = np.array(rows)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    return EmbeddingBasis(A=A, n_octaves=n_octaves, input_scale=input_scale)


def embed(basis: EmbeddingBasis, x: np.ndarray) -> np.ndarray:
    """Positional embedding of points ``x`` (..., 3) -> (..., 252)."""
    x = np.asarray(x, dtype=np.result_type(np.asarray(x).dtype, np.float32))
    proj = basis.project(x)
    parts = []
    for k in range(basis.n_octaves + 1):
        arg = proj * (2.0**k)
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def _embed_scaled_derivs(basis: EmbeddingBasis, proj: np.ndarray) -> np.ndarray:
    """d(embedding)/d(proj) along the diagonal, same layout as ``embed``."""
    parts = []
    for k in range(basis.n_octaves + 1):
        s = 2.0**k
        arg = proj * s
        parts.append(s * np.cos(arg))
        parts.append(-s * np.sin(arg))
    return np.concatenate(parts, axis=-1)


# ---------------------------------------------------------------------------
# parameters


LAYER_SHAPES: tuple[tuple[int, int], ...] = (
    (252, HIDDEN),
    (HIDDEN, HIDDEN),
    (HIDDEN + 252, HIDDEN),
    (HIDDEN, HIDDEN),
    (HIDDEN, 1),
)


@dataclass
class NetworkParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, seed: int = 0, dtype=np.float32, embed_dim: int = 252) -> "NetworkParams":
        """Uniform fan-in initialisation, W and b ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

        This is He-uniform with gain 1/sqrt(3); the full He bound sqrt(6/fan_in)
        starts with |grad f| around 7 and trains markedly slower.
        """
        rng = np.random.default_rng(seed)
        shapes = layer_shapes(embed_dim)
        weights, biases = [], []
        for fan_in, fan_out in shapes:
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
            biases.append(rng.uniform(-bound, bound, size=fan_out).astype(dtype))
        return cls(weights, biases)

    @classmethod
    def zeros_like(cls, other: "NetworkParams") -> "NetworkParams":
        return cls([np.zeros_like(w) for w in other.weights], [np.zeros_like(b) for b in other.biases])

    @property
    def dtype(self):
        return self.weights[0].dtype

    def arrays(self) -> list[np.ndarray]:
        """Flat list in checkpoint order: W1, b1, W2, b2, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, flat: np.ndarray) -> "NetworkParams":
        arrays, i = [], 0
        for a in self.arrays():
            arrays.append(flat[i : i + a.size].reshape(a.shape).astype(a.dtype))
            i += a.size
        return NetworkParams(arrays[0::2], arrays[1::2])

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def layer_shapes(embed_dim: int = 252) -> tuple[tuple[int, int], ...]:
    return ((embed_dim, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN + embed_dim, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, 1))


# ---------------------------------------------------------------------------
# forward / gradients


def softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Derivative of softplus; tanh form is stable and much faster than expit."""
    out = np.tanh(z * 0.5)
    out += 1
    out *= 0.5
    return out


@dataclass
class ForwardCache:
    """Intermediates kept for the backward pass."""

    x: np.ndarray
    proj: np.ndarray
    h0: np.ndarray
    zs: list[np.ndarray]
    acts: list[np.ndarray]
    sig: list[np.ndarray]
    f: np.ndarray
    # filled by input-gradient pass
    deltas: list[np.ndarray] = field(default_factory=list)  # dF/dz_l
    qs: list[np.ndarray] = field(default_factory=list)  # dF/da_l (pre-sigmoid-scaling)
    e0: np.ndarray | None = None  # dF/dh0
    grad: np.ndarray | None = None  # dF/dx


def _forward_cache(params: NetworkParams, basis: EmbeddingBasis, x: np.ndarray) -> ForwardCache:
    dtype = params.dtype
    x = np.asarray(x, dtype=dtype).reshape(-1, 3)
    proj = basis.project(x)
    h0 = embed(basis, x)
    W, b = params.weights, params.biases

    z1 = h0 @ W[0] + b[0]
    a1 = softplus(z1)
    z2 = a1 @ W[1] + b[1]
    a2 = softplus(z2)
    z3 = np.concatenate([a2, h0], axis=1) @ W[2] + b[2]
    a3 = softplus(z3)
    z4 = a3 @ W[3] + b[3]
    a4 = softplus(z4)
    f = (a4 @ W[4] + b[4])[:, 0]
    zs = [z1, z2, z3, z4]
    return ForwardCache(x=x, proj=proj, h0=h0, zs=zs, acts=[a1, a2, a3, a4], sig=[], f=f)


def _input_gradient_pass(params: NetworkParams, basis: EmbeddingBasis, c: ForwardCache) -> None:
    W = params.weights
    c.sig = [sigmoid(z) for z in c.zs]
    s1, s2, s3, s4 = c.sig
    q4 = np.broadcast_to(W[4][:, 0], s4.shape)
    d4 = q4 * s4
    q3 = d4 @ W[3].T
    d3 = q3 * s3
    u3 = d3 @ W[2].T
    q2, e_skip = u3[:, :HIDDEN], u3[:, HIDDEN:]
    d2 = q2 * s2
    q1 = d2 @ W[1].T
    d1 = q1 * s1
    e0 = d1 @ W[0].T + e_skip
    c.deltas = [d1, d2, d3, d4]
    c.qs = [q1, q2, q3, q4]
    c.e0 = e0
    dproj = _contract_embedding(basis, c.proj, e0)
    c.grad = basis.pullback(dproj)


def _contract_embedding(basis: EmbeddingBasis, proj: np.ndarray, e0: np.ndarray) -> np.ndarray:
    """Sum of e0 * d(embedding)/d(proj) per direction -> (N, 21)."""
    n = basis.A.shape[0]
    out = np.zeros_like(proj)
    deriv = _embed_scaled_derivs(basis, proj)
    prod = e0 * deriv
    for j in range(prod.shape[1] // n):
        out += prod[:, j * n : (j + 1) * n]
    return out


def forward(params: NetworkParams, basis: EmbeddingBasis, x: np.ndarray) -> np.ndarray:
    """Signed distance prediction for points ``x`` (N, 3) -> (N,)."""
    return _forward_cache(params, basis, x).f


def forward_and_gradient(params: NetworkParams, basis: EmbeddingBasis, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = _forward_cache(params, basis, x)
    _input_gradient_pass(params, basis, c)
    return c.f, c.grad


def input_gradient(params: NetworkParams, basis: EmbeddingBasis, x: np.ndarray) -> np.ndarray:
    return forward_and_gradient(params, basis, x)[1]


def forward_chunked(params, basis, x, chunk: int = 50_000, with_grad: bool = False):
    """Evaluate large point sets in chunks to bound memory."""
    x = np.asarray(x).reshape(-1, 3)
    fs, gs = [], []
    for i in range(0, len(x), chunk):
        if with_grad:
            f, g = forward_and_gradient(params, basis, x[i : i + chunk])
            gs.append(g)
        else:
            f = forward(params, basis, x[i : i + chunk])
        fs.append(f)
    if not fs:
        f = np.zeros(0, params.dtype)
        return (f, np.zeros((0, 3), params.dtype)) if with_grad else f
    if with_grad:
        return np.concatenate(fs), np.concatenate(gs)
    return np.concatenate(fs)


def param_backward(
    params: NetworkParams,
    basis: EmbeddingBasis,
    c: ForwardCache,
    f_bar: np.ndarray,
    grad_bar: np.ndarray | None,
) -> NetworkParams:
    """Parameter gradient of a scalar loss L(f, grad_x f).

    ``f_bar`` is dL/df (N,), ``grad_bar`` is dL/d(grad_x f) (N, 3) or None when
    the loss does not depend on the input gradient.
    """
    W = params.weights
    dt = params.dtype
    gW = [np.zeros_like(w) for w in W]
    gb = [np.zeros_like(b) for b in params.biases]
    a1, a2, a3, a4 = c.acts
    if not c.sig:
        c.sig = [sigmoid(z) for z in c.zs]
    s1, s2, s3, s4 = c.sig
    zbar = [None, None, None, None]

    if grad_bar is not None and np.any(grad_bar):
        if c.e0 is None:
            _input_gradient_pass(params, basis, c)
        d1, d2, d3, d4 = c.deltas
        q1, q2, q3, _ = c.qs
        # grad = s * contract(e0 * deriv(proj)) @ A ; proj does not depend on params
        gproj = (grad_bar.astype(dt) @ basis.A.T.astype(dt)) * dt.type(basis.input_scale)
        deriv = _embed_scaled_derivs(basis, c.proj)
        n = basis.A.shape[0]
        e0_bar = deriv * np.tile(gproj, deriv.shape[1] // n)

        # e0 = d1 @ W1^T + e_skip
        gW[0] += e0_bar.T @ d1
        d1_bar = e0_bar @ W[0]
        # d1 = q1 * s1
        q1_bar = d1_bar * s1
        zbar[0] = d1_bar * q1 * s1 * (1 - s1)
        # q1 = d2 @ W2^T
        gW[1] += q1_bar.T @ d2
        d2_bar = q1_bar @ W[1]
        q2_bar = d2_bar * s2
        zbar[1] = d2_bar * q2 * s2 * (1 - s2)
        # [q2, e_skip] = d3 @ W3^T
        u3_bar = np.concatenate([q2_bar, e0_bar], axis=1)
        gW[2] += u3_bar.T @ d3
        d3_bar = u3_bar @ W[2]
        q3_bar = d3_bar * s3
        zbar[2] = d3_bar * q3 * s3 * (1 - s3)
        # q3 = d4 @ W4^T
        gW[3] += q3_bar.T @ d4
        d4_bar = q3_bar @ W[3]
        # d4 = w5 * s4
        gW[4][:, 0] += (d4_bar * s4).sum(axis=0)
        zbar[3] = d4_bar * W[4][:, 0] * s4 * (1 - s4)

    f_bar = f_bar.astype(dt).reshape(-1, 1)
    gW[4] += a4.T @ f_bar
    gb[4] += f_bar.sum(axis=0)
    a_bar = f_bar @ W[4].T
    inputs = [c.h0, a1, None, a3]
    for layer in (3, 2, 1, 0):
        z_bar = a_bar * c.sig[layer]
        if zbar[layer] is not None:
            z_bar = z_bar + zbar[layer]
        if layer == 2:
            u = np.concatenate([a2, c.h0], axis=1)
            gW[2] += u.T @ z_bar
            gb[2] += z_bar.sum(axis=0)
            a_bar = z_bar @ W[2][:HIDDEN].T
        else:
            gW[layer] += inputs[layer].T @ z_bar
            gb[layer] += z_bar.sum(axis=0)
            if layer > 0:
                a_bar = z_bar @ W[layer].T
    return NetworkParams(gW, gb)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: NetworkParams
    v: NetworkParams
    step: int = 0
    lr: float = 0.0013
    weight_decay: float = 0.012
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: NetworkParams, **kw) -> "AdamState":
        return cls(m=NetworkParams.zeros_like(params), v=NetworkParams.zeros_like(params), **kw)


def adam_step(params: NetworkParams, grads: NetworkParams, state: AdamState) -> NetworkParams:
    """Adam with decoupled weight decay. Updates ``params`` and ``state`` in place."""
    if not grads.all_finite():
        raise NonFiniteError("non-finite parameter gradient passed to adam_step")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    decay = 1.0 - state.lr * state.weight_decay
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay:
            p *= decay
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# checkpoint IO

MAGIC = b"SDFMLP02"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def save_checkpoint(path: str | Path, params: NetworkParams, basis: EmbeddingBasis) -> None:
    """Write the little-endian checkpoint.

    Layout: magic (8 bytes) | u32 dtype code (1=f32, 2=f64) | u32 octaves L |
    u32 n_dirs | u32 n_layers | f64 input scale | n_layers x (u32 fan_in, u32 fan_out) |
    basis A as f64 (n_dirs x 3) | per layer: W (row-major), b.
    """
    code = {v: k for k, v in _DTYPES.items()}[np.dtype(params.dtype).newbyteorder("<")]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<4Id", code, basis.n_octaves, basis.A.shape[0], len(params.weights), basis.input_scale))
    for w in params.weights:
        buf.write(struct.pack("<2I", *w.shape))
    buf.write(basis.A.astype("<f8").tobytes())
    dt = _DTYPES[code]
    for a in params.arrays():
        buf.write(np.ascontiguousarray(a, dtype=dt).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[NetworkParams, EmbeddingBasis]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a network checkpoint (bad magic)")
    code, n_oct, n_dirs, n_layers, scale = struct.unpack_from("<4Id", raw, 8)
    if code not in _DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    off = 32
    shapes = [struct.unpack_from("<2I", raw, off + 8 * i) for i in range(n_layers)]
    off += 8 * n_layers
    expected = layer_shapes(n_dirs * 2 * (n_oct + 1))
    if tuple(tuple(s) for s in shapes) != expected:
        raise ValueError(f"{path}: architecture {shapes} does not match expected {expected}")
    A = np.frombuffer(raw, dtype="<f8", count=n_dirs * 3, offset=off).reshape(n_dirs, 3).copy()
    off += A.nbytes
    dt = _DTYPES[code]
    weights, biases = [], []
    for fan_in, fan_out in shapes:
        w = np.frombuffer(raw, dtype=dt, count=fan_in * fan_out, offset=off).reshape(fan_in, fan_out)
        off += w.nbytes
        b = np.frombuffer(raw, dtype=dt, count=fan_out, offset=off)
        off += b.nbytes
        weights.append(w.astype(dt.newbyteorder("=")))
        biases.append(b.astype(dt.newbyteorder("=")))
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return NetworkParams(weights, biases), EmbeddingBasis(A=A, n_octaves=n_oct, input_scale=scale)


# ---------------------------------------------------------------------------
# loss gradient


def backward(params: NetworkParams, basis: EmbeddingBasis, batch, loss_cfg, timings: dict | None = None):
    """Total training loss on a supervised batch and its parameter gradient.

    Returns (LossBreakdown, parameter gradient). The gradient includes the
    second-order path through grad_x f used by the gradient and Eikonal terms.
    ``timings``, when given, receives ``forward`` and ``backward`` seconds.
    """
    from .supervision import total_loss

    t0 = time.perf_counter()
    c = _forward_cache(params, basis, batch.points)
    if not np.isfinite(c.f).all():
        bad = np.nonzero(~np.isfinite(c.f))[0]
        raise NonFiniteError(f"non-finite network prediction at samples {bad[:10].tolist()}")
    need_grad = loss_cfg.lambda_grad > 0 or loss_cfg.lambda_eik > 0
    if need_grad:
        _input_gradient_pass(params, basis, c)
    loss = total_loss(batch, c.f, c.grad if need_grad else None, loss_cfg)
    t1 = time.perf_counter()
    grads = param_backward(params, basis, c, loss.f_bar, loss.grad_bar if need_grad else None)
    if not grads.all_finite():
        raise NonFiniteError("non-finite parameter gradient")
    if timings is not None:
        timings["forward"] = t1 - t0
        timings["backward"] = time.perf_counter() - t1
    return loss, grads
