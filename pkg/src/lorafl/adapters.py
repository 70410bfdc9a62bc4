"""Low-rank adapters on frozen linear layers.

Three variants share one state object:

* ``lora``    — delta = (alpha/r) * B @ A; A Gaussian at init, B zero.
* ``rslora``  — same parameterisation, rank-stabilised scale alpha/sqrt(r).
* ``vera``    — frozen random A and B (shared across layers of equal shape),
  adapted through trainable scaling vectors d (length r) and b (length k):
  delta = diag(b) @ B @ diag(d) @ A.

All variants start with an exactly-zero delta, so a freshly adapted layer is
bit-identical to its frozen base weight. Forward/backward operate on column
batches (inputs d x n, outputs k x n); gradients are returned per trainable
tensor with frozen tensors omitted.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .linalg import (
    Matrix,
    ParameterError,
    RngStream,
    ShapeError,
    as_matrix,
    check_finite,
    gaussian_matrix,
)

ROLE_A = "A"
ROLE_B = "B"
ROLE_D = "d_vec"
ROLE_B_VEC = "b_vec"


class Variant(str, Enum):
    LORA = "lora"
    RSLORA = "rslora"
    VERA = "vera"


@dataclass(frozen=True)
class AdapterSpec:
    """Variant tag plus the two scaling hyperparameters."""

    variant: Variant
    rank: int
    alpha: float = 16.0

    def __post_init__(self):
        if self.rank < 1:
            raise ParameterError(f"rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ParameterError(f"alpha must be > 0, got {self.alpha}")


def effective_scale(spec: AdapterSpec) -> float:
    """Multiplier applied to B @ A; VeRA keeps scaling inside d/b vectors."""
    if spec.variant == Variant.LORA:
        return spec.alpha / spec.rank
    if spec.variant == Variant.RSLORA:
        return spec.alpha / np.sqrt(spec.rank)
    return 1.0


def a_role(variant: Variant) -> str:
    """Name of the tensor playing the shared/general role for a variant."""
    return ROLE_D if variant == Variant.VERA else ROLE_A


def b_role(variant: Variant) -> str:
    """Name of the tensor playing the client-specific role for a variant."""
    return ROLE_B_VEC if variant == Variant.VERA else ROLE_B


@dataclass
class AdapterState:
    """Trainable adapter tensors for one layer.

    ``a`` is r x d, ``b`` is k x r. VeRA additionally carries the d/b scaling
    vectors and keeps both matrices permanently frozen.
    """

    spec: AdapterSpec
    a: Matrix
    b: Matrix
    d_vec: np.ndarray | None = None
    b_vec: np.ndarray | None = None
    frozen_a: bool = False
    frozen_b: bool = False
    frozen_d_vec: bool = False
    frozen_b_vec: bool = False

    @property
    def r(self) -> int:
        return self.a.shape[0]

    @property
    def d(self) -> int:
        return self.a.shape[1]

    @property
    def k(self) -> int:
        return self.b.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {ROLE_A: self.a, ROLE_B: self.b}
        if self.spec.variant == Variant.VERA:
            out[ROLE_D] = self.d_vec
            out[ROLE_B_VEC] = self.b_vec
        return out

    def trainable_roles(self) -> tuple[str, ...]:
        if self.spec.variant == Variant.VERA:
            roles = []
            if not self.frozen_d_vec:
                roles.append(ROLE_D)
            if not self.frozen_b_vec:
                roles.append(ROLE_B_VEC)
            return tuple(roles)
        roles = []
        if not self.frozen_a:
            roles.append(ROLE_A)
        if not self.frozen_b:
            roles.append(ROLE_B)
        return tuple(roles)

    def set_role(self, role: str, value: np.ndarray) -> None:
        value = np.array(value, dtype=np.float64, copy=True)
        current = self.tensors()[role]
        if current.shape != value.shape:
            raise ShapeError(f"{role} has shape {current.shape}, got {value.shape}")
        if role == ROLE_A:
            self.a = value
        elif role == ROLE_B:
            self.b = value
        elif role == ROLE_D:
            self.d_vec = value
        else:
            self.b_vec = value

    def delta(self) -> Matrix:
        """Current weight update contributed by the adapter (k x d)."""
        if self.spec.variant == Variant.VERA:
            return (self.b_vec[:, None] * self.b) @ (self.d_vec[:, None] * self.a)
        return effective_scale(self.spec) * (self.b @ self.a)

    def clone(self) -> "AdapterState":
        return copy.deepcopy(self)


@dataclass
class FrozenLayer:
    """A linear layer whose base weight (and optional bias) never trains."""

    w0: Matrix
    adapter: AdapterState | None = None
    bias: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.w0.shape[0]

    @property
    def d(self) -> int:
        return self.w0.shape[1]


def init_adapter(spec: AdapterSpec, k: int, d: int, rng: RngStream) -> AdapterState:
    """Initialise adapter tensors so the effective delta is exactly zero.

    LoRA/rsLoRA draw A ~ N(0, (1/r)^2) and zero B. VeRA draws A and B from a
    uniform Kaiming-style bound on a shape-keyed child of ``rng``, so two
    layers of the same shape fed the same stream receive identical matrices;
    d starts at 0.1 and b at zero.
    """
    r = spec.rank
    if r > min(k, d):
        raise ParameterError(f"rank {r} exceeds min(k, d) = {min(k, d)}")
    if spec.variant == Variant.VERA:
        shared = rng.child(k).child(d).child(r)
        bound_a = np.sqrt(6.0 / (d + r))
        bound_b = np.sqrt(6.0 / (r + k))
        a = shared.uniform(-bound_a, bound_a, (r, d))
        b = shared.uniform(-bound_b, bound_b, (k, r))
        return AdapterState(spec=spec, a=a, b=b,
                            d_vec=np.full(r, 0.1), b_vec=np.zeros(k),
                            frozen_a=True, frozen_b=True)
    a = gaussian_matrix(rng, r, d, std=1.0 / r)
    b = np.zeros((k, r))
    return AdapterState(spec=spec, a=a, b=b)


def forward(layer: FrozenLayer, x) -> Matrix:
    """Apply the layer to a d x n column batch, returning k x n outputs."""
    x = as_matrix(x, name="x")
    if x.shape[0] != layer.d:
        raise ShapeError(f"x has {x.shape[0]} rows, layer expects {layer.d}")
    out = layer.w0 @ x
    ad = layer.adapter
    if ad is not None:
        if ad.spec.variant == Variant.VERA:
            out = out + ad.b_vec[:, None] * (ad.b @ (ad.d_vec[:, None] * (ad.a @ x)))
        else:
            out = out + effective_scale(ad.spec) * (ad.b @ (ad.a @ x))
    if layer.bias is not None:
        out = out + layer.bias[:, None]
    check_finite(out, "layer output")
    return out


def backward(layer: FrozenLayer, x, upstream) -> dict[str, np.ndarray]:
    """Gradients of the loss w.r.t. the layer's trainable adapter tensors.

    ``upstream`` is dL/d(output), shape k x n. With Gw = upstream @ x.T the
    gradient w.r.t. the effective weight, the returned entries are

        B: s * Gw @ A.T          A: s * B.T @ Gw
        d: diag(B.T diag(b) Gw A.T)    b: diag(Gw A.T diag(d) B.T)

    Frozen tensors are omitted entirely.
    """
    x = as_matrix(x, name="x")
    upstream = as_matrix(upstream, name="upstream")
    ad = layer.adapter
    if ad is None:
        return {}
    if x.shape[0] != layer.d or upstream.shape[0] != layer.k:
        raise ShapeError(
            f"expected x {layer.d}xn and upstream {layer.k}xn, "
            f"got {x.shape} and {upstream.shape}")
    if x.shape[1] != upstream.shape[1]:
        raise ShapeError("x and upstream must share the batch dimension")
    gw = upstream @ x.T
    grads: dict[str, np.ndarray] = {}
    roles = ad.trainable_roles()
    if ad.spec.variant == Variant.VERA:
        if ROLE_D in roles:
            scaled_b = ad.b_vec[:, None] * ad.b
            grads[ROLE_D] = ((scaled_b.T @ gw) * ad.a).sum(axis=1)
        if ROLE_B_VEC in roles:
            scaled_a = ad.d_vec[:, None] * ad.a
            grads[ROLE_B_VEC] = ((gw @ scaled_a.T) * ad.b).sum(axis=1)
        return grads
    s = effective_scale(ad.spec)
    if ROLE_B in roles:
        grads[ROLE_B] = s * (gw @ ad.a.T)
    if ROLE_A in roles:
        grads[ROLE_A] = s * (ad.b.T @ gw)
    return grads


def input_gradient(layer: FrozenLayer, upstream) -> Matrix:
    """Backpropagate dL/d(output) through the layer: W_eff.T @ upstream."""
    return merge(layer).T @ upstream


def merge(layer: FrozenLayer) -> Matrix:
    """Effective dense weight W0 + delta; does not mutate the layer."""
    if layer.adapter is None:
        return layer.w0.copy()
    return layer.w0 + layer.adapter.delta()


def snapshot(adapter: AdapterState) -> dict:
    """Immutable wire/analysis snapshot of an adapter.

    Matrices are emitted as flat row-major lists; shape is carried by the
    k/d/r fields. The d/b vectors appear only for VeRA.
    """
    doc = {
        "variant": adapter.spec.variant.value,
        "k": adapter.k,
        "d": adapter.d,
        "r": adapter.r,
        "alpha": adapter.spec.alpha,
        "A": [float(v) for v in adapter.a.reshape(-1)],
        "B": [float(v) for v in adapter.b.reshape(-1)],
    }
    if adapter.spec.variant == Variant.VERA:
        doc["d_vec"] = [float(v) for v in adapter.d_vec]
        doc["b_vec"] = [float(v) for v in adapter.b_vec]
    return doc


def snapshot_to_json(adapter: AdapterState) -> str:
    return json.dumps(snapshot(adapter), sort_keys=True)


def from_snapshot(doc: dict) -> AdapterState:
    """Rebuild an adapter from its snapshot document.

    Freeze flags are policy, not payload: the result carries the variant's
    defaults (VeRA matrices frozen, everything else trainable).
    """
    variant = Variant(doc["variant"])
    k, d, r = int(doc["k"]), int(doc["d"]), int(doc["r"])
    spec = AdapterSpec(variant=variant, rank=r, alpha=float(doc["alpha"]))
    a = np.array(doc["A"], dtype=np.float64).reshape(r, d)
    b = np.array(doc["B"], dtype=np.float64).reshape(k, r)
    if variant == Variant.VERA:
        return AdapterState(
            spec=spec, a=a, b=b,
            d_vec=np.array(doc["d_vec"], dtype=np.float64),
            b_vec=np.array(doc["b_vec"], dtype=np.float64),
            frozen_a=True, frozen_b=True)
    return AdapterState(spec=spec, a=a, b=b)
