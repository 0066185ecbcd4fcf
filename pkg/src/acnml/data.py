"""Synthetic datasets, heatmap grids, image rotation and delimited-text I/O."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError, DataFormatError
from .models import Dataset


@dataclass(frozen=True)
class BlobSpec:
    """Isotropic Gaussian cluster for one class."""

    mean: tuple
    std: float
    count: int
    seed: int = 0

    def __post_init__(self):
        if not self.std > 0 or self.count < 1:
            raise ContractError("blob std must be > 0 and count >= 1")


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    resolution: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ContractError("grid bounds must satisfy min < max")
        if self.resolution < 1:
            raise ContractError("grid resolution must be >= 1")

    def axes(self):
        """Cell-centre coordinates along each axis."""
        r = self.resolution
        centres = (np.arange(r) + 0.5) / r
        return (self.x_min + centres * (self.x_max - self.x_min),
                self.y_min + centres * (self.y_max - self.y_min))

    def points(self) -> np.ndarray:
        """(resolution^2, 2) cell centres, row-major (y outer, x inner)."""
        xs, ys = self.axes()
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])


# Pinned two-class fixture used for the logistic-regression heatmaps.
FIG_BLOBS = (BlobSpec((-2.0, 0.0), 0.6, 20, 7), BlobSpec((2.0, 0.0), 0.6, 20, 7))
FIG_GRID = GridSpec(-8.0, 8.0, -8.0, 8.0, 40)


def make_blobs(specs: Sequence[BlobSpec]) -> Dataset:
    """One Gaussian cluster per spec; spec ``i`` supplies label ``i``."""
    if len(specs) < 2:
        raise ContractError("need at least two classes")
    xs, ys = [], []
    for label, spec in enumerate(specs):
        mean = np.asarray(spec.mean, dtype=float)
        rng = np.random.default_rng([spec.seed, label])
        xs.append(mean + spec.std * rng.standard_normal((spec.count, mean.shape[0])))
        ys.append(np.full(spec.count, label))
    return Dataset(np.vstack(xs), np.concatenate(ys), len(specs))


def heatmap(predictor: Callable[[np.ndarray], np.ndarray], grid: GridSpec) -> np.ndarray:
    """Evaluate ``predictor`` at every grid cell.

    Returns a (resolution^2, 2 + k) array with columns ``x0, x1, p_0 .. p_{k-1}``.
    """
    pts = grid.points()
    rows = []
    for pt in pts:
        probs = np.asarray(predictor(pt), dtype=float)
        if probs.ndim != 1:
            raise ContractError("predictor must return a probability vector")
        rows.append(np.concatenate([pt, probs]))
    return np.array(rows)


def rotate_square_images(data: Dataset, side: int, angle_degrees: float = 0.0,
                         seed: Optional[int] = None) -> Dataset:
    """Rotate flattened ``side x side`` images counter-clockwise about the centre.

    Bilinear interpolation with zero fill outside the frame. With ``seed``
    each image gets its own angle drawn uniformly from [0, 360) and
    ``angle_degrees`` is ignored.
    """
    if side < 1 or data.dim != side * side:
        raise ContractError(f"input dimension {data.dim} is not {side}^2")
    n = data.n
    if seed is not None:
        angles = np.random.default_rng(seed).uniform(0.0, 360.0, n)
    else:
        angles = np.full(n, float(angle_degrees))
    imgs = data.inputs.reshape(n, side, side)
    c = (side - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(side, dtype=float), np.arange(side, dtype=float),
                         indexing="ij")
    # output pixel (x, y) samples the input at R(-angle) (x, y); y points up
    x, y = cc - c, c - rr
    out = np.empty_like(imgs)
    for i in range(n):
        a = np.deg2rad(angles[i])
        ca, sa = np.cos(a), np.sin(a)
        src_x = ca * x + sa * y
        src_y = -sa * x + ca * y
        coords = np.array([c - src_y, src_x + c])
        out[i] = ndimage.map_coordinates(imgs[i], coords, order=1, mode="constant", cval=0.0)
    return Dataset(out.reshape(n, -1), data.labels, data.num_classes)


def fmt(v) -> str:
    """Render a number with 17 significant digits."""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def save_dataset(data: Dataset, path) -> None:
    header = [f"x{j}" for j in range(data.dim)] + ["label"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row, label in zip(data.inputs, data.labels):
            w.writerow([fmt(v) for v in row] + [str(int(label))])


def read_table(path, require_label: bool = True):
    """Parse an ``x0,...,x{d-1}[,label]`` file into (inputs, labels or None)."""
    with open(path, newline="") as fh:
        rows = [(i, r) for i, r in enumerate(csv.reader(fh), start=1)
                if r and not r[0].startswith("#")]
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    line, header = rows[0]
    has_label = header[-1] == "label"
    d = len(header) - 1 if has_label else len(header)
    if d < 1 or header[:d] != [f"x{j}" for j in range(d)]:
        raise DataFormatError(f"{path}:{line}: header must be x0,...,x{{d-1}}[,label]")
    if require_label and not has_label:
        raise DataFormatError(f"{path}:{line}: missing label column")
    X, y = [], []
    for line, r in rows[1:]:
        if len(r) != len(header):
            raise DataFormatError(f"{path}:{line}: expected {len(header)} fields, got {len(r)}")
        try:
            X.append([float(v) for v in r[:d]])
            if has_label:
                y.append(int(r[d]))
        except ValueError as exc:
            raise DataFormatError(f"{path}:{line}: {exc}") from None
    if not X:
        raise DataFormatError(f"{path}: no data rows")
    return np.array(X), (np.array(y) if has_label else None)


def load_dataset(path, num_classes: int) -> Dataset:
    X, y = read_table(path, require_label=True)
    try:
        return Dataset(X, y, num_classes)
    except ContractError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def write_heatmap(table: np.ndarray, path, comment: Optional[str] = None) -> None:
    k = table.shape[1] - 2
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x0", "x1"] + [f"p{c}" for c in range(k)])
        for row in table:
            w.writerow([fmt(v) for v in row])


def rotate_points(data: Dataset, angle_degrees: float) -> Dataset:
    """Rotate 2-D inputs counter-clockwise about the origin; labels unchanged."""
    if data.dim != 2:
        raise ContractError(f"point rotation needs 2-D inputs, got d={data.dim}")
    a = np.deg2rad(angle_degrees)
    R = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    return Dataset(data.inputs @ R.T, data.labels, data.num_classes)
