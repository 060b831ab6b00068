"""Synthetic separable datasets with certified margins, plus CSV I/O."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .net import NetSpec, Sample, batch_outputs


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.X.shape[0] == 0:
            raise DatasetError("dataset is empty")
        if self.X.shape[0] != self.y.size:
            raise DatasetError("number of labels does not match number of rows")
        if not np.all(np.isin(self.y, (-1.0, 1.0))):
            raise DatasetError("labels must be -1 or +1")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def samples(self) -> list:
        return [Sample(x, int(t)) for x, t in zip(self.X, self.y)]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], dict(self.meta))


def _uniform_ball(rng, d, radius):
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    return radius * rng.uniform() ** (1.0 / d) * v


def gen_linear_separable(seed: int, n: int, d: int, margin: float, radius: float = 1.0,
                         symmetric: bool = False) -> Dataset:
    """Points uniform in a ball, keeping only those at distance >= margin
    from a random hyperplane through the origin.

    With ``symmetric=True`` the points come in pairs ``(x, +1), (-x, -1)``
    (``n`` must be even). ``meta["nu"]`` is the separating unit normal and
    ``meta["certified_margin"]`` is ``min_i y_i <nu, x_i> >= margin``.
    """
    if not 0 < margin < radius:
        raise DatasetError("need 0 < margin < radius")
    if n < 1 or d < 1:
        raise DatasetError("n and d must be positive")
    if symmetric and n % 2:
        raise DatasetError("symmetric datasets need an even n")
    rng = np.random.default_rng(seed)
    nu = rng.standard_normal(d)
    nu /= np.linalg.norm(nu)
    want = n // 2 if symmetric else n
    pts, draws = [], 0
    while len(pts) < want:
        if draws >= 1000 * n:
            raise DatasetError(
                f"rejection sampling failed after {draws} draws; margin too large"
            )
        draws += 1
        x = _uniform_ball(rng, d, radius)
        s = float(nu @ x)
        if abs(s) < margin:
            continue
        if symmetric and s < 0:
            x = -x
        pts.append(x)
    X = np.array(pts)
    y = np.sign(X @ nu)
    if symmetric:
        X = np.vstack([X, -X])
        y = np.concatenate([y, -y])
    cert = float(np.min(y * (X @ nu)))
    meta = {
        "generator": "linear",
        "seed": int(seed),
        "n": int(n),
        "d": int(d),
        "margin": float(margin),
        "radius": float(radius),
        "nu": nu.tolist(),
        "certified_margin": cert,
        "certified_normalized_margin": float(margin / radius),
    }
    return Dataset(X, y, meta)


XOR_WITNESS_SPEC = NetSpec((2, 4, 1), "relu")


def xor_witness_weights() -> np.ndarray:
    """Width-4 ReLU net computing ``|x1 + x2| - |x1 - x2|``."""
    W1 = np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
    w2 = np.array([[1.0, 1.0, -1.0, -1.0]])
    return np.concatenate([W1.ravel(), w2.ravel()])


def gen_xor_ring(seed: int, n: int, cluster_radius: float = 0.2) -> Dataset:
    """Four clusters around (+-1, +-1) labelled by the sign of x1 * x2."""
    if n < 8 or n % 4:
        raise DatasetError("xor ring needs n >= 8 and divisible by 4")
    rng = np.random.default_rng(seed)
    centers = np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
    labels = np.array([1.0, 1.0, -1.0, -1.0])
    per = n // 4
    X = np.vstack([c + np.array([_uniform_ball(rng, 2, cluster_radius) for _ in range(per)])
                   for c in centers])
    y = np.repeat(labels, per)
    w = xor_witness_weights()
    margin = float(np.min(y * batch_outputs(XOR_WITNESS_SPEC, w, X)))
    meta = {
        "generator": "xor_ring",
        "seed": int(seed),
        "n": int(n),
        "cluster_radius": float(cluster_radius),
        "witness_spec": XOR_WITNESS_SPEC.to_dict(),
        "witness_weights": w.tolist(),
        "witness_margin": margin,
    }
    return Dataset(X, y, meta)


def _parse_label(text, lineno):
    try:
        v = float(text)
    except ValueError:
        raise DatasetError(f"line {lineno}: label {text!r} is not numeric") from None
    if v not in (-1.0, 1.0):
        raise DatasetError(f"line {lineno}: label must be -1 or +1, got {text!r}")
    return v


def load_csv(path) -> Dataset:
    """Read ``x1,...,xd,y`` rows; a non-numeric first row is taken as a header."""
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            rows.append((lineno, [c.strip() for c in row]))
    if not rows:
        raise DatasetError(f"{path}: file is empty")
    first = rows[0][1]
    try:
        [float(c) for c in first]
    except ValueError:
        rows = rows[1:]
        if not rows:
            raise DatasetError(f"{path}: header but no data rows") from None
    width = len(rows[0][1])
    if width < 2:
        raise DatasetError(f"line {rows[0][0]}: need at least one feature and a label")
    X, y = [], []
    for lineno, row in rows:
        if len(row) != width:
            raise DatasetError(f"line {lineno}: expected {width} columns, got {len(row)}")
        try:
            X.append([float(c) for c in row[:-1]])
        except ValueError:
            raise DatasetError(f"line {lineno}: non-numeric feature") from None
        y.append(_parse_label(row[-1], lineno))
    meta = {"generator": "csv", "source": str(path)}
    meta_path = path.with_suffix(".meta.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    return Dataset(np.array(X), np.array(y), meta)


def save_csv(ds: Dataset, path, write_meta: bool = True):
    """Write with a header and 17 significant digits (exact double round trip)."""
    path = Path(path)
    header = [f"x{j + 1}" for j in range(ds.dim)] + ["y"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for x, t in zip(ds.X, ds.y):
            w.writerow([f"{v:.17g}" for v in x] + [str(int(t))])
    if write_meta:
        path.with_suffix(".meta.json").write_text(json.dumps(ds.meta, indent=2, sort_keys=True))
    return path
