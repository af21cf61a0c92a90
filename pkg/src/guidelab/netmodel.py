"""Small magnitude-preserving MLP denoisers with exact analytic gradients.

The network predicts either a scalar energy (whose input gradient is the
score) or the score directly. Both heads are preconditioned so that a
freshly initialized model is exactly the score of the isotropic Gaussian
prior N(0, (sigma^2 + sigma_data^2) I).

Differentiation is hand-rolled: the forward pass stacks value rows with two
input-tangent rows so one matmul per layer carries values and the Jacobian
columns needed for the energy-head score; the backward pass then yields
exact parameter gradients of the score-matching loss, including the mixed
second-order terms the energy head requires. Finite-difference tests pin
this down.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .streams import derive_rng

SILU_GAIN = 1.0 / 0.596   # silu(z) has rms 0.596 for standard normal z
CHECKPOINT_MAGIC = b"AGLB"
CHECKPOINT_VERSION = 1

HEADS = ("energy", "direct_score")


class NonFiniteLossError(RuntimeError):
    """Raised when a training loss turns non-finite; carries batch indices."""

    def __init__(self, message: str, batch_indices):
        super().__init__(message)
        self.batch_indices = list(batch_indices)


@dataclass(frozen=True)
class ArchDescriptor:
    hidden_width: int
    hidden_layers: int = 4
    head: str = "energy"
    class_count: int = 2
    conditional: bool = True

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.hidden_width < 2 or self.hidden_layers < 1:
            raise ValueError("network too small")

    @property
    def input_dim(self) -> int:
        return 4 + (self.class_count if self.conditional else 0)


@dataclass
class ModelParams:
    """Weights plus the scalar output gain; rows are normalized at use."""

    arch: ArchDescriptor
    layer_weights: list[np.ndarray]
    output_gain: float
    sigma_data: float = 0.5

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, [w.copy() for w in self.layer_weights],
                           float(self.output_gain), self.sigma_data)

    def scaled(self, factor: float) -> "ModelParams":
        return ModelParams(self.arch, [w * factor for w in self.layer_weights],
                           self.output_gain * factor, self.sigma_data)

    def add_scaled(self, other: "ModelParams", factor: float) -> None:
        for w, ow in zip(self.layer_weights, other.layer_weights):
            w += factor * ow
        self.output_gain += factor * other.output_gain


@dataclass
class ParamGrads:
    layer_weights: list[np.ndarray]
    output_gain: float


def init_params(arch: ArchDescriptor, seed: int, sigma_data: float = 0.5) -> ModelParams:
    """Standard-normal weights, zero output gain.

    Zero gain makes the head contribute nothing, so the initial score is the
    Gaussian prior score regardless of the weights.
    """
    rng = derive_rng(seed, 11)
    dims = [arch.input_dim] + [arch.hidden_width] * arch.hidden_layers + [arch.hidden_width]
    weights = [rng.standard_normal((dims[i + 1], dims[i])) for i in range(len(dims) - 1)]
    return ModelParams(arch=arch, layer_weights=weights, output_gain=0.0, sigma_data=sigma_data)


def _prep_inputs(params: ModelParams, x, sigma, cls):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    B = x.shape[0]
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (B,)).copy()
    if (sig <= 0).any():
        raise ValueError("model evaluation requires sigma > 0")
    arch = params.arch
    if arch.conditional:
        if cls is None:
            raise ValueError("conditional model needs a class label")
        labels = np.broadcast_to(np.asarray(cls, dtype=np.int64), (B,))
        if (labels < 0).any() or (labels >= arch.class_count).any():
            raise ValueError("class label out of range")
    else:
        labels = None
    return x, sig, labels, squeeze


def _input_features(params: ModelParams, x, sig, labels):
    B = x.shape[0]
    arch = params.arch
    s_in = np.sqrt(sig * sig + params.sigma_data ** 2)
    a = np.zeros((B, arch.input_dim))
    a[:, 0:2] = x / s_in[:, None]
    a[:, 2] = 0.25 * np.log(sig)
    a[:, 3] = 1.0
    if arch.conditional:
        a[np.arange(B), 4 + labels] = 1.0
    return a, s_in


def _silu_parts(zv):
    s = 1.0 / (1.0 + np.exp(-zv))
    val = zv * s
    d1 = s * (1.0 + zv * (1.0 - s))
    return s, val, d1


def _forward(params: ModelParams, x, sig, labels, masks, with_tangents, keep_cache):
    """Trunk forward pass.

    Returns (F, J, s_in, cache). J is (2, B, width) input-tangent rows of F,
    present only when with_tangents. masks, when given, is one (B, width)
    array per activation site (values already rescaled by keep probability).
    """
    B = x.shape[0]
    a0, s_in = _input_features(params, x, sig, labels)
    n_lin = len(params.layer_weights)
    if with_tangents:
        A = np.zeros((3 * B, params.arch.input_dim))
        A[:B] = a0
        A[B:2 * B, 0] = 1.0 / s_in
        A[2 * B:, 1] = 1.0 / s_in
    else:
        A = a0
    cache = {"A": [], "zv": [], "zt": [], "sig": [], "Wn": [], "norms": [], "s_in": s_in} if keep_cache else None
    for li, W in enumerate(params.layer_weights):
        norms = np.maximum(np.linalg.norm(W, axis=1), 1e-300)
        Wn = W / norms[:, None]
        Z = A @ Wn.T
        last = li == n_lin - 1
        if keep_cache:
            cache["A"].append(A)
            cache["Wn"].append(Wn)
            cache["norms"].append(norms)
        if last:
            A = Z
            if keep_cache:
                cache["zv"].append(None)
                cache["zt"].append(None)
                cache["sig"].append(None)
            break
        zv = Z[:B]
        s, val, d1 = _silu_parts(zv)
        out = np.empty_like(Z)
        out[:B] = val * SILU_GAIN
        if with_tangents:
            out[B:2 * B] = Z[B:2 * B] * d1 * SILU_GAIN
            out[2 * B:] = Z[2 * B:] * d1 * SILU_GAIN
        if masks is not None:
            m = masks[li]
            out[:B] *= m
            if with_tangents:
                out[B:2 * B] *= m
                out[2 * B:] *= m
        if keep_cache:
            cache["zv"].append(zv)
            cache["zt"].append((Z[B:2 * B].copy(), Z[2 * B:].copy()) if with_tangents else None)
            cache["sig"].append(s)
        A = out
    F = A[:B]
    J = (A[B:2 * B], A[2 * B:]) if with_tangents else None
    return F, J, s_in, cache


def model_energy(params: ModelParams, x, sigma, cls=None, masks=None):
    """Scalar head output; its x-gradient is the model score (energy head)."""
    if params.arch.head != "energy":
        raise ValueError("energy is only defined for the energy head")
    xb, sig, labels, squeeze = _prep_inputs(params, x, sigma, cls)
    F, _, s_in, _ = _forward(params, xb, sig, labels, masks, False, False)
    n = params.arch.hidden_width
    xs = xb / s_in[:, None]
    G = -0.5 * (xs * xs).sum(axis=1) - (params.output_gain / (sig * n)) * (F * F).sum(axis=1)
    return float(G[0]) if squeeze else G


def model_score(params: ModelParams, x, sigma, cls=None, masks=None):
    xb, sig, labels, squeeze = _prep_inputs(params, x, sigma, cls)
    s = _score_batch(params, xb, sig, labels, masks)
    return s[0] if squeeze else s


def _score_batch(params, xb, sig, labels, masks):
    prior = -xb / (sig * sig + params.sigma_data ** 2)[:, None]
    if params.arch.head == "energy":
        F, J, _, _ = _forward(params, xb, sig, labels, masks, True, False)
        n = params.arch.hidden_width
        coef = -2.0 * params.output_gain / (sig * n)
        u = np.stack([(F * J[0]).sum(axis=1), (F * J[1]).sum(axis=1)], axis=1)
        return prior + coef[:, None] * u
    F, _, s_in, _ = _forward(params, xb, sig, labels, masks, False, False)
    coef = params.output_gain / (sig * s_in)
    return prior + coef[:, None] * F[:, :2]


def model_denoise(params: ModelParams, x, sigma, cls=None, masks=None):
    xb = np.asarray(x, dtype=np.float64)
    sig = np.asarray(sigma, dtype=np.float64)
    s2 = (sig * sig)[..., None] if sig.ndim else sig * sig
    return xb + s2 * model_score(params, x, sigma, cls, masks)


def grad_params(params: ModelParams, x, sigma, cls, target, masks=None, loss_weights=None):
    """Gradient of the weighted score-matching loss wrt all parameters.

    loss = mean_b lambda_b ||score(x_b) - target_b||^2, lambda defaulting to
    sigma_b^2. Returns (ParamGrads, loss). Raises NonFiniteLossError when any
    per-sample term is non-finite.
    """
    xb, sig, labels, _ = _prep_inputs(params, x, sigma, cls)
    target = np.asarray(target, dtype=np.float64)
    B = xb.shape[0]
    lam = sig * sig if loss_weights is None else np.broadcast_to(np.asarray(loss_weights, dtype=np.float64), (B,))
    energy_head = params.arch.head == "energy"
    F, J, s_in, cache = _forward(params, xb, sig, labels, masks, energy_head, True)
    n = params.arch.hidden_width
    prior = -xb / (sig * sig + params.sigma_data ** 2)[:, None]
    g = params.output_gain

    if energy_head:
        coef = -2.0 * g / (sig * n)
        u = np.stack([(F * J[0]).sum(axis=1), (F * J[1]).sum(axis=1)], axis=1)
        score = prior + coef[:, None] * u
    else:
        coef = g / (sig * s_in)
        score = prior + coef[:, None] * F[:, :2]

    resid = score - target
    per_sample = lam * (resid * resid).sum(axis=1)
    if not np.isfinite(per_sample).all():
        bad = np.flatnonzero(~np.isfinite(per_sample))
        raise NonFiniteLossError(f"non-finite loss for batch rows {bad[:8].tolist()}", bad)
    loss = float(per_sample.mean())
    g_score = (2.0 / B) * lam[:, None] * resid

    if energy_head:
        gain_coef = -2.0 / (sig * n)
        g_gain = float((gain_coef[:, None] * u * g_score).sum())
        g_u = (-2.0 * g / (sig * n))[:, None] * g_score
        Abar = np.empty((3 * B, n))
        Abar[:B] = g_u[:, 0:1] * J[0] + g_u[:, 1:2] * J[1]
        Abar[B:2 * B] = g_u[:, 0:1] * F
        Abar[2 * B:] = g_u[:, 1:2] * F
    else:
        g_gain = float(((F[:, :2] * g_score).sum(axis=1) / (sig * s_in)).sum())
        Abar = np.zeros((B, n))
        Abar[:, :2] = coef[:, None] * g_score

    w_grads = _backward(params, cache, Abar, masks, energy_head, B)
    return ParamGrads(layer_weights=w_grads, output_gain=g_gain), loss


def _backward(params, cache, Abar, masks, with_tangents, B):
    n_lin = len(params.layer_weights)
    w_grads = [None] * n_lin
    for li in range(n_lin - 1, -1, -1):
        if li < n_lin - 1:
            # arrive at post-activation output: undo mask, then activation
            if masks is not None:
                m = masks[li]
                Abar = Abar.copy()
                Abar[:B] *= m
                if with_tangents:
                    Abar[B:2 * B] *= m
                    Abar[2 * B:] *= m
            zv = cache["zv"][li]
            s = cache["sig"][li]
            d1 = s * (1.0 + zv * (1.0 - s))
            new = np.empty_like(Abar)
            if with_tangents:
                zt0, zt1 = cache["zt"][li]
                d2 = s * (1.0 - s) * (2.0 + zv * (1.0 - 2.0 * s))
                new[:B] = SILU_GAIN * (d1 * Abar[:B] + d2 * (zt0 * Abar[B:2 * B] + zt1 * Abar[2 * B:]))
                new[B:2 * B] = SILU_GAIN * d1 * Abar[B:2 * B]
                new[2 * B:] = SILU_GAIN * d1 * Abar[2 * B:]
            else:
                new[:B] = SILU_GAIN * d1 * Abar[:B]
            Abar = new
        A_in = cache["A"][li]
        Wn = cache["Wn"][li]
        norms = cache["norms"][li]
        gWn = Abar.T @ A_in
        # project out the radial part: rows of W are normalized at use
        dot = (gWn * Wn).sum(axis=1, keepdims=True)
        w_grads[li] = (gWn - dot * Wn) / norms[:, None]
        if li > 0:
            Abar = Abar @ Wn
    return w_grads


class DenoiserModel:
    """Handle over trained parameters with the shared denoiser interface."""

    def __init__(self, params: ModelParams):
        self.params = params

    @property
    def conditional(self) -> bool:
        return self.params.arch.conditional

    @property
    def has_energy(self) -> bool:
        return self.params.arch.head == "energy"

    def denoise(self, x, sigma, cls=None):
        return model_denoise(self.params, x, sigma, cls)

    def score(self, x, sigma, cls=None):
        return model_score(self.params, x, sigma, cls)

    def energy(self, x, sigma, cls=None):
        return model_energy(self.params, x, sigma, cls)


def save_checkpoint(path, params: ModelParams, step: int = 0, rng_state: dict | None = None,
                    ema: dict[float, ModelParams] | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header, float64 LE weight blobs.

    Blob order is header-defined: main table then each EMA table in
    ema_sigma_rels order; within a table, layer weights in order then the
    output gain.
    """
    ema = ema or {}
    rels = sorted(ema.keys())
    arch = params.arch
    header = {
        "arch": {
            "hidden_width": arch.hidden_width,
            "hidden_layers": arch.hidden_layers,
            "head": arch.head,
            "class_count": arch.class_count,
            "conditional": arch.conditional,
        },
        "sigma_data": params.sigma_data,
        "step": int(step),
        "rng_state": rng_state,
        "ema_sigma_rels": rels,
        "layer_shapes": [list(w.shape) for w in params.layer_weights],
    }
    head_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head_bytes)))
        fh.write(head_bytes)
        for table in [params] + [ema[r] for r in rels]:
            for w in table.layer_weights:
                fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(struct.pack("<d", table.output_gain))


@dataclass
class CheckpointBundle:
    params: ModelParams
    step: int
    rng_state: dict | None
    ema: dict[float, ModelParams] = field(default_factory=dict)


def load_checkpoint(path) -> CheckpointBundle:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arch = ArchDescriptor(**header["arch"])
        shapes = [tuple(s) for s in header["layer_shapes"]]

        def read_table():
            weights = []
            for shape in shapes:
                count = shape[0] * shape[1]
                buf = fh.read(count * 8)
                if len(buf) != count * 8:
                    raise ValueError("checkpoint truncated")
                weights.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
            (gain,) = struct.unpack("<d", fh.read(8))
            return ModelParams(arch, weights, gain, header["sigma_data"])

        params = read_table()
        ema = {float(r): read_table() for r in header["ema_sigma_rels"]}
    return CheckpointBundle(params=params, step=header["step"],
                            rng_state=header["rng_state"], ema=ema)
