"""Synthetic supervised tasks and label-based non-IID partitioning.

Two generators cover the simulator's needs: exact linear regression against a
hidden target weight (optionally low-rank, optionally per-client), and a
Gaussian-mixture classification task with controllable class separation.
Partitioning supports IID splits and the per-class Dirichlet scheme commonly
used to model label-skew heterogeneity: small alpha -> skewed shards.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .linalg import Matrix, ParameterError, RngStream, gaussian_matrix

PARTITION_MAX_RETRIES = 100


class PartitionError(RuntimeError):
    """Partitioning could not give every client at least one sample."""


@dataclass
class Dataset:
    """Column-major sample store: inputs are d x N.

    Regression datasets carry dense targets (k x N); classification datasets
    carry integer labels (length N). ``covariance_spec`` records how inputs
    were drawn, for reproducibility and closed-form analysis.
    """

    inputs: Matrix
    targets: Matrix | None = None
    labels: np.ndarray | None = None
    covariance_spec: dict | None = None

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[1] < 1:
            raise ParameterError("inputs must be d x N with N >= 1")
        if not np.all(np.isfinite(self.inputs)):
            raise ParameterError("inputs contain non-finite entries")
        if (self.targets is None) == (self.labels is None):
            raise ParameterError("exactly one of targets/labels must be set")
        if self.targets is not None:
            if self.targets.shape[1] != self.n:
                raise ParameterError("targets must align with inputs columns")
            if not np.all(np.isfinite(self.targets)):
                raise ParameterError("targets contain non-finite entries")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise ParameterError("labels must have one entry per sample")
            if self.labels.min() < 0:
                raise ParameterError("labels must be non-negative")

    @property
    def n(self) -> int:
        return self.inputs.shape[1]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[0]

    @property
    def kind(self) -> str:
        return "regression" if self.targets is not None else "classification"

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            raise ParameterError("regression dataset has no classes")
        return int(self.labels.max()) + 1

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            inputs=self.inputs[:, indices],
            targets=None if self.targets is None else self.targets[:, indices],
            labels=None if self.labels is None else self.labels[indices],
            covariance_spec=self.covariance_spec,
        )


@dataclass
class RegressionGroundTruth:
    """Hidden weights behind a regression dataset: y = (W0 + DeltaW) x."""

    w0: Matrix
    delta_w: Matrix
    client_deltas: list[Matrix] | None = None
    noise_std: float = 0.0


@dataclass(frozen=True)
class PartitionSpec:
    mode: str  # "iid" | "dirichlet"
    num_clients: int
    seed: int
    alpha: float | None = None

    def __post_init__(self):
        if self.mode not in ("iid", "dirichlet"):
            raise ParameterError(f"unknown partition mode '{self.mode}'")
        if self.num_clients < 1:
            raise ParameterError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.mode == "dirichlet":
            if self.alpha is None or self.alpha <= 0:
                raise ParameterError(f"dirichlet alpha must be > 0, got {self.alpha}")

    def label(self) -> str:
        return "iid" if self.mode == "iid" else f"dir({self.alpha:g})"


def _normalize_covariance(covariance_spec, d: int):
    """Return (descriptor dict, column transform L with cov = L L^T or None)."""
    if covariance_spec is None or covariance_spec == "identity":
        return {"kind": "identity"}, None
    arr = np.asarray(covariance_spec, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape[0] != d or np.any(arr <= 0):
            raise ParameterError("diagonal covariance needs d positive entries")
        return ({"kind": "diagonal", "values": arr.tolist()},
                np.sqrt(arr)[:, None])
    if arr.ndim == 2:
        if arr.shape != (d, d):
            raise ParameterError(f"covariance must be {d}x{d}, got {arr.shape}")
        if not np.allclose(arr, arr.T, atol=1e-12):
            raise ParameterError("covariance matrix must be symmetric")
        try:
            chol = np.linalg.cholesky(arr)
        except np.linalg.LinAlgError as exc:
            raise ParameterError("covariance matrix must be SPD") from exc
        return {"kind": "spd", "matrix": arr.tolist()}, chol
    raise ParameterError("covariance must be 'identity', a diagonal, or a matrix")


def sample_inputs(rng: RngStream, d: int, n: int, covariance_spec=None) -> Matrix:
    _, transform = _normalize_covariance(covariance_spec, d)
    z = rng.normal(d, n)
    if transform is None:
        return z
    if transform.shape[1] == 1:  # diagonal: per-row scaling
        return transform * z
    return transform @ z


def _low_rank_delta(rng: RngStream, k: int, d: int, rank: int | None,
                    scale: float) -> Matrix:
    if scale == 0.0:
        return np.zeros((k, d))
    if rank is None:
        return gaussian_matrix(rng, k, d, std=scale / np.sqrt(d))
    if not 1 <= rank <= min(k, d):
        raise ParameterError(f"delta_rank must be in [1, {min(k, d)}], got {rank}")
    left = gaussian_matrix(rng, k, rank, std=1.0)
    right = gaussian_matrix(rng, rank, d, std=scale / np.sqrt(rank * d))
    return left @ right


def gen_regression(rng: RngStream, k: int, d: int, n: int,
                   covariance_spec=None, noise_std: float = 0.0,
                   delta_scale: float = 1.0, delta_rank: int | None = None,
                   ) -> tuple[Dataset, RegressionGroundTruth]:
    """Exact linear data y = (W0 + DeltaW) x (+ optional Gaussian noise).

    ``delta_rank`` caps the rank of the hidden update so a rank-r adapter can
    represent it exactly; None leaves it full-rank.
    """
    if k < 1 or d < 1 or n < 1:
        raise ParameterError("k, d, n must all be >= 1")
    if noise_std < 0:
        raise ParameterError(f"noise_std must be >= 0, got {noise_std}")
    descriptor, _ = _normalize_covariance(covariance_spec, d)
    w0 = gaussian_matrix(rng, k, d, std=1.0 / np.sqrt(d))
    delta = _low_rank_delta(rng, k, d, delta_rank, delta_scale)
    x = sample_inputs(rng, d, n, covariance_spec)
    y = (w0 + delta) @ x
    if noise_std > 0:
        y = y + rng.normal(k, n, noise_std)
    dataset = Dataset(inputs=x, targets=y, covariance_spec=descriptor)
    truth = RegressionGroundTruth(w0=w0, delta_w=delta, noise_std=noise_std)
    return dataset, truth


def gen_regression_clients(rng: RngStream, k: int, d: int, n_per_client: int,
                           num_clients: int, covariance_spec=None,
                           noise_std: float = 0.0, delta_scale: float = 1.0,
                           delta_rank: int | None = None,
                           delta_spread: float = 0.0,
                           ) -> tuple[list[Dataset], RegressionGroundTruth]:
    """Per-client regression shards with client-specific target updates.

    Every client shares W0 and a common base DeltaW; client i regresses
    against DeltaW + spread-scaled private perturbation, modelling non-IID
    regression through diverging optimal updates rather than label skew.
    """
    if num_clients < 1:
        raise ParameterError("num_clients must be >= 1")
    if delta_spread < 0:
        raise ParameterError("delta_spread must be >= 0")
    descriptor, _ = _normalize_covariance(covariance_spec, d)
    w0 = gaussian_matrix(rng, k, d, std=1.0 / np.sqrt(d))
    base = _low_rank_delta(rng, k, d, delta_rank, delta_scale)
    shards = []
    client_deltas = []
    for i in range(num_clients):
        client_rng = rng.child(i)
        delta_i = base
        if delta_spread > 0:
            delta_i = base + _low_rank_delta(client_rng, k, d, delta_rank,
                                             delta_spread)
        x = sample_inputs(client_rng, d, n_per_client, covariance_spec)
        y = (w0 + delta_i) @ x
        if noise_std > 0:
            y = y + client_rng.normal(k, n_per_client, noise_std)
        shards.append(Dataset(inputs=x, targets=y, covariance_spec=descriptor))
        client_deltas.append(delta_i)
    truth = RegressionGroundTruth(w0=w0, delta_w=base,
                                  client_deltas=client_deltas,
                                  noise_std=noise_std)
    return shards, truth


def gen_classification(rng: RngStream, d: int, num_classes: int, n: int,
                       separation: float) -> Dataset:
    """Balanced Gaussian mixture with one unit-variance component per class.

    Class means sit ``separation`` apart (pairwise, via orthogonalised random
    directions when num_classes <= d). Sample counts are balanced before any
    partitioning: class c receives floor(n / C) samples plus one of the
    remainder for the lowest class ids.
    """
    if num_classes < 2:
        raise ParameterError(f"num_classes must be >= 2, got {num_classes}")
    if separation <= 0:
        raise ParameterError(f"separation must be > 0, got {separation}")
    if n < num_classes:
        raise ParameterError("need at least one sample per class")
    directions = rng.normal(d, num_classes)
    if num_classes <= d:
        q, _ = np.linalg.qr(directions)
        directions = q[:, :num_classes]
    else:
        directions = directions / np.linalg.norm(directions, axis=0, keepdims=True)
    # orthonormal means at radius sep/sqrt(2) are exactly `sep` apart
    means = (separation / np.sqrt(2.0)) * directions
    counts = np.full(num_classes, n // num_classes)
    counts[: n % num_classes] += 1
    blocks = []
    labels = []
    for c in range(num_classes):
        x = means[:, c:c + 1] + rng.normal(d, int(counts[c]))
        blocks.append(x)
        labels.append(np.full(int(counts[c]), c, dtype=np.int64))
    return Dataset(inputs=np.concatenate(blocks, axis=1),
                   labels=np.concatenate(labels))


def partition(dataset: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Split sample indices into disjoint, exhaustive per-client sets.

    IID mode deals a random near-equal split. Dirichlet mode draws, per
    class, client proportions p ~ Dir(alpha * 1_m) and assigns that class's
    samples multinomially; regression data (no labels) degenerates to a
    single pseudo-class, i.e. pure size skew. Draws leaving any client empty
    are redrawn, up to PARTITION_MAX_RETRIES attempts.
    """
    rng = RngStream(spec.seed, stream_id=0x7A57).child(spec.num_clients)
    m = spec.num_clients
    n = dataset.n
    if spec.mode == "iid":
        perm = rng.permutation(n)
        base, extra = divmod(n, m)
        parts = []
        start = 0
        for i in range(m):
            size = base + (1 if i < extra else 0)
            parts.append(np.sort(perm[start:start + size]))
            start += size
        return parts

    labels = dataset.labels if dataset.labels is not None else np.zeros(n, dtype=np.int64)
    class_ids = np.unique(labels)
    for _ in range(PARTITION_MAX_RETRIES):
        assignments: list[list[np.ndarray]] = [[] for _ in range(m)]
        for c in class_ids:
            idx_c = np.flatnonzero(labels == c)
            idx_c = idx_c[rng.permutation(len(idx_c))]
            p = rng.dirichlet(np.full(m, spec.alpha))
            counts = rng.multinomial(len(idx_c), p)
            start = 0
            for i in range(m):
                assignments[i].append(idx_c[start:start + counts[i]])
                start += counts[i]
        parts = [np.sort(np.concatenate(chunks)) for chunks in assignments]
        if all(len(p) >= 1 for p in parts):
            return parts
    raise PartitionError(
        f"could not give all {m} clients a sample after "
        f"{PARTITION_MAX_RETRIES} Dirichlet draws (alpha={spec.alpha})")


def label_distributions(dataset: Dataset, parts: list[np.ndarray]) -> np.ndarray:
    """Per-client label histogram, normalised; m x C."""
    num_classes = dataset.num_classes
    out = np.zeros((len(parts), num_classes))
    for i, idx in enumerate(parts):
        counts = np.bincount(dataset.labels[idx], minlength=num_classes)
        out[i] = counts / max(1, len(idx))
    return out


def partition_to_json(spec: PartitionSpec, parts: list[np.ndarray]) -> str:
    doc = {
        "mode": spec.mode,
        "alpha": spec.alpha,
        "num_clients": spec.num_clients,
        "seed": spec.seed,
        "indices": [[int(i) for i in p] for p in parts],
    }
    return json.dumps(doc, sort_keys=True)


def dataset_to_csv(dataset: Dataset, path) -> None:
    """Write samples one row per column: x0..x{d-1} then targets or label."""
    d = dataset.input_dim
    header = [f"x{i}" for i in range(d)]
    if dataset.targets is not None:
        header += [f"y{i}" for i in range(dataset.targets.shape[0])]
    else:
        header += ["label"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(dataset.n):
            row = [repr(float(v)) for v in dataset.inputs[:, t]]
            if dataset.targets is not None:
                row += [repr(float(v)) for v in dataset.targets[:, t]]
            else:
                row += [int(dataset.labels[t])]
            writer.writerow(row)
