"""Synthetic cluster datasets and Haar capacity datasets.

The classification dataset is 2048 points sampled uniformly from a ball of
radius pi/4, partitioned into 32 clusters of 64, each translated by a
distinct corner of {-pi/4, +pi/4}^dim, with balanced random +-1 labels per
cluster.  The construction keeps the linear correlation between any single
attribute and the label low, which is what makes the task hard.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .qstate import haar_unitary


class DatasetError(ValueError):
    """Raised for invalid dataset configurations."""


@dataclass
class SyntheticDataset:
    attributes: np.ndarray  # (n, dim)
    labels: np.ndarray  # (n,) values in {-1, 1}
    cluster_ids: np.ndarray  # (n,)
    corners: np.ndarray  # (n_clusters, dim)
    train_idx: np.ndarray
    val_idx: np.ndarray
    rho: np.ndarray  # (dim,) per-attribute Pearson coefficients
    rho_max: float
    seed: int
    radius: float

    @property
    def n_instances(self) -> int:
        return self.attributes.shape[0]

    @property
    def dim(self) -> int:
        return self.attributes.shape[1]

    def train_arrays(self):
        return self.attributes[self.train_idx], self.labels[self.train_idx]

    def val_arrays(self):
        return self.attributes[self.val_idx], self.labels[self.val_idx]


def sample_ball(n: int, dim: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. uniform points in the open ball of the given radius.

    Gaussian direction times radius * U**(1/dim), the standard exact
    construction.
    """
    if n < 1 or dim < 1 or radius <= 0:
        raise DatasetError("need n >= 1, dim >= 1, radius > 0")
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.uniform(0.0, 1.0, n) ** (1.0 / dim)
    return direction * r[:, None]


def pearson(x, labels) -> float:
    """Population-normalized Pearson coefficient cov/(sigma_x sigma_y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(labels, dtype=float)
    sx, sy = x.std(), y.std()
    if sx == 0.0 or sy == 0.0:
        raise DatasetError("pearson is undefined for zero variance")
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))


def _split_indices(cluster_ids, n_clusters, train_per_cluster, rng):
    """Stratified split: a fixed number of training rows per cluster."""
    train, val = [], []
    for k in range(n_clusters):
        members = np.flatnonzero(cluster_ids == k)
        members = members[rng.permutation(len(members))]
        train.extend(members[:train_per_cluster])
        val.extend(members[train_per_cluster:])
    return np.sort(np.array(train)), np.sort(np.array(val))


def split(dataset: SyntheticDataset):
    """(train indices, validation indices) of a dataset."""
    return dataset.train_idx, dataset.val_idx


def make_dataset(
    seed: int,
    dim: int = 8,
    n_clusters: int = 32,
    per_cluster: int = 64,
    train_per_cluster: int = 48,
    radius: float = np.pi / 4,
    corners: np.ndarray | None = None,
) -> SyntheticDataset:
    """Build the full labeled cluster dataset from a single seed.

    Defaults give 2048 instances, a 1536/512 stratified split (48/16 per
    cluster), and corners drawn without replacement from the 2**dim
    possibilities.  Independent seeded streams drive the ball samples,
    corner choice, labeling, and split so the whole object is reproducible
    from one integer.
    """
    if n_clusters % 2:
        raise DatasetError("need an even number of clusters for balanced labels")
    if corners is None and n_clusters > 2**dim:
        raise DatasetError(f"at most {2**dim} distinct corners in dimension {dim}")
    if not 0 < train_per_cluster < per_cluster:
        raise DatasetError("train_per_cluster must be inside each cluster")
    ss = np.random.SeedSequence(seed)
    ball_rng, corner_rng, label_rng, split_rng = (
        np.random.default_rng(s) for s in ss.spawn(4)
    )

    n = n_clusters * per_cluster
    points = sample_ball(n, dim, radius, ball_rng)
    cluster_ids = np.repeat(np.arange(n_clusters), per_cluster)

    if corners is None:
        picks = corner_rng.choice(2**dim, size=n_clusters, replace=False)
        bits = ((picks[:, None] >> np.arange(dim)[None, :]) & 1).astype(float)
        corners = radius * (2.0 * bits - 1.0)
    else:
        corners = np.asarray(corners, dtype=float)
        if corners.shape != (n_clusters, dim):
            raise DatasetError("corners must be (n_clusters, dim)")

    attributes = points + corners[cluster_ids]

    cluster_labels = np.array([-1.0] * (n_clusters // 2) + [1.0] * (n_clusters // 2))
    label_rng.shuffle(cluster_labels)
    labels = cluster_labels[cluster_ids]

    rho = np.array([pearson(attributes[:, i], labels) for i in range(dim)])
    train_idx, val_idx = _split_indices(
        cluster_ids, n_clusters, train_per_cluster, split_rng
    )
    return SyntheticDataset(
        attributes=attributes,
        labels=labels,
        cluster_ids=cluster_ids,
        corners=corners,
        train_idx=train_idx,
        val_idx=val_idx,
        rho=rho,
        rho_max=float(np.max(rho)),
        seed=seed,
        radius=radius,
    )


def haar_dataset(n: int, qubits_per_qpu: int, rng: np.random.Generator, n_qpus: int = 2):
    """Capacity inputs: per QPU, a stack of n Haar unitaries (n, D, D)."""
    dim = 2**qubits_per_qpu
    blocks = []
    for _ in range(n_qpus):
        stack = np.empty((n, dim, dim), dtype=complex)
        for i in range(n):
            stack[i] = haar_unitary(qubits_per_qpu, rng)
        blocks.append(stack)
    return blocks


# ---------------------------------------------------------------------------
# file format: CSV of rows plus a JSON sidecar
# ---------------------------------------------------------------------------

def save_dataset(dataset: SyntheticDataset, csv_path, json_path):
    """Write x1..xD,label,cluster,split rows and a JSON sidecar.

    Floats are written with repr so a round trip is bit-exact.
    """
    dim = dataset.dim
    in_train = np.zeros(dataset.n_instances, dtype=bool)
    in_train[dataset.train_idx] = True
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(dim)] + ["label", "cluster", "split"])
        for row in range(dataset.n_instances):
            writer.writerow(
                [repr(float(v)) for v in dataset.attributes[row]]
                + [int(dataset.labels[row]), int(dataset.cluster_ids[row]),
                   "train" if in_train[row] else "val"]
            )
    sidecar = {
        "seed": dataset.seed,
        "radius": dataset.radius,
        "corners": [[float(v) for v in corner] for corner in dataset.corners],
        "rho": [float(v) for v in dataset.rho],
        "rho_max": dataset.rho_max,
    }
    with open(json_path, "w") as fh:
        json.dump(sidecar, fh, indent=1)


def load_dataset(csv_path, json_path) -> SyntheticDataset:
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 3
        rows = list(reader)
    attributes = np.array([[float(v) for v in row[:dim]] for row in rows])
    labels = np.array([float(row[dim]) for row in rows])
    cluster_ids = np.array([int(row[dim + 1]) for row in rows])
    split_col = [row[dim + 2] for row in rows]
    train_idx = np.array([i for i, s in enumerate(split_col) if s == "train"])
    val_idx = np.array([i for i, s in enumerate(split_col) if s == "val"])
    with open(json_path) as fh:
        sidecar = json.load(fh)
    rho = np.array(sidecar["rho"])
    return SyntheticDataset(
        attributes=attributes,
        labels=labels,
        cluster_ids=cluster_ids,
        corners=np.array(sidecar["corners"]),
        train_idx=train_idx,
        val_idx=val_idx,
        rho=rho,
        rho_max=sidecar["rho_max"],
        seed=sidecar["seed"],
        radius=sidecar["radius"],
    )
