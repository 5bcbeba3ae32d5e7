from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from app.schemas import Task
from app.utils.rng import stream


@dataclass(frozen=True)
class LabeledDataset:
    """Normalized samples with integer class labels"""
    task: Task
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    image_shape: Optional[Tuple[int, int]]
    norm_mean: float
    norm_std: float

    @property
    def data_dim(self) -> int:
        return int(self.x.shape[1])

    @property
    def variance(self) -> float:
        return float(np.var(self.x))

    def __len__(self) -> int:
        return int(self.x.shape[0])


POINTS2D_MEANS = np.array([[-1.5, 0.0], [1.5, 0.0]])
POINTS2D_STD = 0.3
BARS_SIDE = 16
BARS_NOISE_STD = 0.05


def _points2d(n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    y = rng.integers(0, 2, size=n)
    x = POINTS2D_MEANS[y] + POINTS2D_STD * rng.standard_normal((n, 2))
    return x, y


def _bar_image(label: int, rng: np.random.Generator) -> np.ndarray:
    lit = rng.random(BARS_SIDE) < 0.25
    if not lit.any():
        lit[rng.integers(0, BARS_SIDE)] = True
    image = np.zeros((BARS_SIDE, BARS_SIDE))
    if label == 0:
        image[lit, :] = 1.0
    else:
        image[:, lit] = 1.0
    return image


def _bars16(n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    y = rng.integers(0, 2, size=n)
    images = np.stack([_bar_image(int(label), rng) for label in y]) if n else np.zeros((0, BARS_SIDE, BARS_SIDE))
    images = images + BARS_NOISE_STD * rng.standard_normal(images.shape)
    return images.reshape(n, BARS_SIDE * BARS_SIDE), y


def generate_dataset(task: Task, n: int, seed: int) -> LabeledDataset:
    """
    Generate a labeled toy dataset

    points2d: two Gaussian blobs in 2-D at (-1.5, 0) and (1.5, 0), std 0.3.
    bars16: 16x16 images, class 0 horizontal bars, class 1 vertical bars,
    pixel noise std 0.05.

    Both are normalized with one scalar mean/std over every entry so that
    image symmetries survive normalization.

    Args:
        task: Which toy task
        n: Number of samples
        seed: Experiment seed

    Returns:
        LabeledDataset
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    try:
        task = Task(task)
    except ValueError:
        raise ValueError(f"Unknown task: {task}") from None
    rng = stream(seed, "data")
    if task == Task.POINTS2D:
        x, y = _points2d(n, rng)
        image_shape = None
    elif task == Task.BARS16:
        x, y = _bars16(n, rng)
        image_shape = (BARS_SIDE, BARS_SIDE)
    else:
        raise ValueError(f"Unknown task: {task}")

    mu = float(np.mean(x))
    sigma = float(np.std(x))
    x = (x - mu) / sigma
    return LabeledDataset(
        task=task,
        x=x,
        y=y.astype(np.int64),
        num_classes=2,
        image_shape=image_shape,
        norm_mean=mu,
        norm_std=sigma
    )


def split(dataset: LabeledDataset, holdout_fraction: float) -> Tuple[LabeledDataset, LabeledDataset]:
    """Deterministic head/tail split into (train, held-out)"""
    cut = int(round(len(dataset) * (1.0 - holdout_fraction)))

    def part(sl: slice) -> LabeledDataset:
        return LabeledDataset(dataset.task, dataset.x[sl], dataset.y[sl], dataset.num_classes,
                              dataset.image_shape, dataset.norm_mean, dataset.norm_std)

    return part(slice(0, cut)), part(slice(cut, None))
