"""Dataset ingestion and task-stream construction.

Builds the three benchmark streams: Split-MNIST (five fixed binary digit
pairs), Permuted-MNIST (ten-class tasks under fixed pixel permutations),
and synthetic Gaussian blob streams used by the detector and forgetting
tests. MNIST arrives in the classic IDX binary format; pixels are scaled to
[0, 1] with no mean-centering.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, CountMismatch, TruncatedFile
from .objectives import Likelihood

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
SPLIT_MNIST_PAIRS = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9))


@dataclass(frozen=True)
class Task:
    name: str
    train_X: np.ndarray
    train_y: np.ndarray
    test_X: np.ndarray
    test_y: np.ndarray
    likelihood: Likelihood


@dataclass(frozen=True)
class TaskStream:
    tasks: list[Task]
    # filled in by minibatch_stream for detected-boundary runs
    boundaries: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tasks)

    def eval_sets(self):
        return [(t.test_X, t.test_y) for t in self.tasks]


def _read_be_u32(fh, what: str) -> int:
    raw = fh.read(4)
    if len(raw) < 4:
        raise TruncatedFile(f"missing {what}")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair; returns (X in [0,1] of shape (N, 784), y)."""
    with open(images_path, "rb") as fh:
        magic = _read_be_u32(fh, "image magic")
        if magic != IDX_IMAGE_MAGIC:
            raise BadMagic(f"image file magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
        n = _read_be_u32(fh, "image count")
        rows = _read_be_u32(fh, "row count")
        cols = _read_be_u32(fh, "column count")
        raw = fh.read(n * rows * cols)
        if len(raw) < n * rows * cols:
            raise TruncatedFile(f"image data ends early ({len(raw)} of {n * rows * cols} bytes)")
        X = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)
    with open(labels_path, "rb") as fh:
        magic = _read_be_u32(fh, "label magic")
        if magic != IDX_LABEL_MAGIC:
            raise BadMagic(f"label file magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
        n_labels = _read_be_u32(fh, "label count")
        raw = fh.read(n_labels)
        if len(raw) < n_labels:
            raise TruncatedFile(f"label data ends early ({len(raw)} of {n_labels} bytes)")
        y = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if n != n_labels:
        raise CountMismatch(f"{n} images but {n_labels} labels")
    return X.astype(np.float64) / 255.0, y


def make_split_mnist(train_X, train_y, test_X, test_y) -> TaskStream:
    """Five binary tasks over digit pairs 0/1, 2/3, 4/5, 6/7, 8/9.

    Within each pair the lower digit maps to label -1 and the higher to +1.
    """
    tasks = []
    likelihood = Likelihood("bernoulli-logit", 2)
    for lo, hi in SPLIT_MNIST_PAIRS:
        tr = np.isin(train_y, (lo, hi))
        te = np.isin(test_y, (lo, hi))
        tasks.append(
            Task(
                name=f"{lo}v{hi}",
                train_X=train_X[tr],
                train_y=np.where(train_y[tr] == hi, 1, -1),
                test_X=test_X[te],
                test_y=np.where(test_y[te] == hi, 1, -1),
                likelihood=likelihood,
            )
        )
    return TaskStream(tasks=tasks)


def make_permuted_mnist(train_X, train_y, test_X, test_y, task_count=10, seed=0) -> TaskStream:
    """Ten-class tasks under fixed random pixel permutations.

    Task 0 keeps the original pixel order; each later task applies its own
    permutation drawn deterministically from the seed.
    """
    if task_count < 1:
        raise ValueError("task_count must be >= 1")
    rng = np.random.default_rng(seed)
    likelihood = Likelihood("softmax", 10)
    D = train_X.shape[1]
    tasks = []
    for t in range(task_count):
        perm = np.arange(D) if t == 0 else rng.permutation(D)
        tasks.append(
            Task(
                name=f"perm{t}",
                train_X=train_X[:, perm],
                train_y=train_y.copy(),
                test_X=test_X[:, perm],
                test_y=test_y.copy(),
                likelihood=likelihood,
            )
        )
    return TaskStream(tasks=tasks)


def make_blobs(
    task_count=3,
    classes=2,
    dims=2,
    separation=10.0,
    points_per_task=200,
    test_points_per_task=200,
    seed=0,
) -> TaskStream:
    """Synthetic stream of Gaussian-cluster tasks with unit covariance.

    Cluster centers are rejection-sampled from the positive orthant until
    all pairwise distances (within and across tasks) reach `separation`, so
    a linear model separates every task. Nonnegative inputs mirror image
    pixels and keep ReLU features away from the all-dead region the
    surprise scorer rejects.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    centers: list[np.ndarray] = []
    # spread the separation across coordinates: per-coordinate spans near
    # separation * sqrt(6 / dims) keep individual coordinates O(1) (image
    # pixels have the same property), which keeps the initial feature
    # magnitudes sane under Glorot weights
    span = 1.7 * separation * np.sqrt(6.0 / dims)
    attempts = 0
    while len(centers) < task_count * classes:
        cand = rng.uniform(0.0, span, size=dims)
        if all(np.linalg.norm(cand - c) >= separation for c in centers):
            centers.append(cand)
        attempts += 1
        if attempts > 200 * task_count * classes:
            span *= 1.3
            attempts = 0
            centers.clear()
    if classes == 2:
        likelihood = Likelihood("bernoulli-logit", 2)
        labels = np.array([-1, 1])
    else:
        likelihood = Likelihood("softmax", classes)
        labels = np.arange(classes)

    def sample(n):
        per = [n // classes + (1 if c < n % classes else 0) for c in range(classes)]
        Xs, ys = [], []
        for c, cnt in enumerate(per):
            Xs.append(task_centers[c] + rng.standard_normal((cnt, dims)))
            ys.append(np.full(cnt, labels[c]))
        X = np.vstack(Xs)
        y = np.concatenate(ys)
        order = rng.permutation(n)
        return X[order], y[order]

    tasks = []
    for t in range(task_count):
        task_centers = centers[t * classes : (t + 1) * classes]
        train_X, train_y = sample(points_per_task)
        test_X, test_y = sample(test_points_per_task)
        tasks.append(
            Task(
                name=f"blob{t}",
                train_X=train_X, train_y=train_y,
                test_X=test_X, test_y=test_y,
                likelihood=likelihood,
            )
        )
    return TaskStream(tasks=tasks)


def minibatch_stream(stream: TaskStream, steps_per_task: int, batch_size: int, seed: int):
    """Flatten a task stream into (X_batch, y_batch) minibatches.

    Batches are sampled uniformly from each task in turn for
    steps_per_task steps. Returns (generator, true_boundaries) where the
    boundaries list the step indices (0-based) at which a new task begins.
    """
    boundaries = [t * steps_per_task for t in range(1, len(stream))]
    rng = np.random.default_rng(seed)

    def generate():
        for task in stream.tasks:
            N = task.train_X.shape[0]
            B = min(batch_size, N)
            for _ in range(steps_per_task):
                idx = rng.choice(N, size=B, replace=False)
                yield task.train_X[idx], task.train_y[idx]

    return generate(), boundaries
