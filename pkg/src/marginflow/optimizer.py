"""Constant-step (stochastic) subgradient descent on the empirical risk.

Each step evaluates the network at the normalized direction ``u = w / ||w||``
and rescales by homogeneity. Signed outputs are ``||w||^L p_i(u)`` and
gradients are ``||w||^{L-1} a_i(u)``, so deep nets never overflow in the
forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datasets import Dataset
from .losses import LossKind, _log_neg_deriv_unchecked, log_risk
from .net import KinkSelection, NetSpec, _signed_grads, as_flat, init_weights

LINEAR_DOMAIN_LIMIT = 500.0
SEPARATION_THRESHOLD = 1e-6
SEPARATION_PERSISTENCE = 10


class ConfigError(ValueError):
    pass


class NumericalAbort(RuntimeError):
    """Weights became non-finite. Carries the last finite state."""

    def __init__(self, message, k, last_w, trajectory):
        super().__init__(message)
        self.k = k
        self.last_w = last_w
        self.trajectory = trajectory


@dataclass(frozen=True)
class StepSchedule:
    """``constant``: gamma_k = gamma0. ``power``: gamma0 (k + 1)^-exponent.

    For ``power`` the exponent must make ``sum gamma_k`` diverge and
    ``sum gamma_k^{1 + q/2}`` converge, i.e. ``1 / (1 + q/2) < exponent <= 1``.
    """

    kind: str = "constant"
    gamma0: float = 0.1
    exponent: float = 1.0
    q: float = 2.0

    def __post_init__(self):
        if self.kind not in ("constant", "power"):
            raise ConfigError(f"unknown step schedule {self.kind!r}")
        if not self.gamma0 >= 0:
            raise ConfigError("step size must be nonnegative")
        if self.kind == "power":
            if self.q < 2:
                raise ConfigError("schedule moment q must be >= 2")
            lo = 1.0 / (1.0 + self.q / 2.0)
            if not lo < self.exponent <= 1.0:
                raise ConfigError(f"power schedule exponent must lie in ({lo:g}, 1]")

    def __call__(self, k: int) -> float:
        if self.kind == "constant":
            return self.gamma0
        return self.gamma0 * (k + 1.0) ** (-self.exponent)

    def to_json(self):
        if self.kind == "constant":
            return self.gamma0
        return {"schedule": "power", "gamma0": self.gamma0,
                "exponent": self.exponent, "q": self.q}

    @classmethod
    def from_json(cls, obj) -> "StepSchedule":
        if isinstance(obj, (int, float)):
            return cls("constant", float(obj))
        kind = obj.get("schedule", "constant")
        if kind == "constant":
            return cls("constant", float(obj["gamma0"]))
        return cls("power", float(obj["gamma0"]), float(obj["exponent"]), float(obj.get("q", 2.0)))


@dataclass
class ExperimentConfig:
    net: NetSpec
    loss: LossKind = field(default_factory=LossKind)
    gamma: StepSchedule = field(default_factory=StepSchedule)
    batch_size: Optional[int] = None
    iterations: int = 1000
    seed: int = 0
    kink: Optional[KinkSelection] = None
    record_stride: int = 1
    snapshot_stride: int = 100
    init_scale: float = 1.0
    init_target_norm: Optional[float] = None

    def __post_init__(self):
        if self.kink is None:
            self.kink = self.net.default_kink()
        elif not isinstance(self.kink, KinkSelection):
            self.kink = KinkSelection(float(self.kink))

    def validate(self, n: int):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.record_stride < 1 or self.snapshot_stride < 1:
            raise ConfigError("strides must be >= 1")
        nb = self.batch_size_for(n)
        if not 1 <= nb <= n:
            raise ConfigError(f"batch size {nb} outside [1, {n}]")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        try:
            self.kink.validate(self.net)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def batch_size_for(self, n: int) -> int:
        return n if self.batch_size is None else int(self.batch_size)

    def to_dict(self) -> dict:
        return {
            "net": self.net.to_dict(),
            "loss": str(self.loss),
            "gamma": self.gamma.to_json(),
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "seed": self.seed,
            "kink": self.kink.e,
            "record_stride": self.record_stride,
            "snapshot_stride": self.snapshot_stride,
            "init": {"scale": self.init_scale, "target_norm": self.init_target_norm},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"net", "loss", "gamma", "batch_size", "iterations", "seed", "kink",
                 "record_stride", "snapshot_stride", "init"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if "net" not in d:
            raise ConfigError("config needs a 'net' section")
        try:
            net = NetSpec.from_dict(d["net"])
            init = d.get("init", {}) or {}
            kink = d.get("kink")
            return cls(
                net=net,
                loss=LossKind.parse(d.get("loss", "exp")),
                gamma=StepSchedule.from_json(d.get("gamma", 0.1)),
                batch_size=d.get("batch_size"),
                iterations=int(d.get("iterations", 1000)),
                seed=int(d.get("seed", 0)),
                kink=net.default_kink() if kink is None else KinkSelection(float(kink)),
                record_stride=int(d.get("record_stride", 1)),
                snapshot_stride=int(d.get("snapshot_stride", 100)),
                init_scale=float(init.get("scale", 1.0)),
                init_target_norm=init.get("target_norm"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None


@dataclass
class StepRecord:
    """Diagnostics of the iterate ``w_k`` (before the update to ``w_{k+1}``).

    Step sizes are stored as logs; ``gamma_bar_cumsum`` is the exact sum of
    the effective steps of all iterations before ``k``.
    """

    k: int
    norm_w: float
    normalized_margin: float
    log_loss: float
    gamma_k: float
    log_gamma_tilde: float
    log_gamma_bar: float
    gamma_bar_cumsum: float
    active_gap: float

    @property
    def gamma_bar(self) -> float:
        return math.exp(self.log_gamma_bar)

    @property
    def gamma_tilde(self) -> float:
        return math.exp(self.log_gamma_tilde)

    @property
    def gamma_eff(self) -> float:
        return self.gamma_bar


RECORD_FIELDS = tuple(StepRecord.__dataclass_fields__)


@dataclass
class Snapshot:
    """Full weights at ``k`` and ``k + 1`` and the batch used in between."""

    k: int
    w: np.ndarray
    w_next: np.ndarray
    batch: np.ndarray


@dataclass
class Trajectory:
    records: list
    snapshots: list
    config: ExperimentConfig
    final_w: np.ndarray
    k_sep: Optional[int] = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def ks(self) -> np.ndarray:
        return np.array([r.k for r in self.records], dtype=np.int64)

    def config_echo(self) -> dict:
        return self.config.to_dict()


def sample_batch(rng: np.random.Generator, n: int, n_b: int) -> np.ndarray:
    """Uniform random subset of ``range(n)`` of size ``n_b`` (sorted).

    Partial Fisher-Yates driven by one vector of uniforms per call. The full
    batch is returned without touching the generator.
    """
    if not 1 <= n_b <= n:
        raise ValueError(f"batch size {n_b} outside [1, {n}]")
    if n_b == n:
        return np.arange(n)
    perm = np.arange(n)
    r = rng.random(n_b)
    for i in range(n_b):
        j = i + int(r[i] * (n - i))
        perm[i], perm[j] = perm[j], perm[i]
    return np.sort(perm[:n_b])


def _lse(v: np.ndarray) -> float:
    m = v.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(v - m).sum()))


def _eval_at_direction(spec, w, X, y, e):
    """Signed outputs, per-sample grads at ``u``, ``||w||`` and ``log ||w||``.

    At ``w = 0`` the grads are taken at ``w`` itself and ``log ||w||`` is
    reported as 0 so that rescaling is a no-op.
    """
    with np.errstate(over="ignore"):
        nw = math.sqrt(float(w @ w))
    if not math.isfinite(nw):
        raise FloatingPointError("weight norm overflows")
    if nw == 0.0:
        p, G = _signed_grads(spec, w, X, y, e)
        return p, p, G, 0.0, 0.0
    pu, Gu = _signed_grads(spec, w / nw, X, y, e)
    return pu * nw ** spec.depth, pu, Gu, nw, math.log(nw)


def _direction(spec, w, dataset, loss, kink, batch):
    n_b = len(batch)
    e = (kink or spec.default_kink()).validate(spec).e if not isinstance(kink, (int, float)) else float(kink)
    p, _, Gu, nw, logn = _eval_at_direction(spec, as_flat(spec, w), dataset.X, dataset.y, e)
    logc = _log_neg_deriv_unchecked(loss, p[batch])
    lse = _lse(logc)
    if not np.isfinite(lse):
        return np.zeros(spec.n_params), -math.inf
    lam = np.exp(logc - lse)
    v = lam @ Gu[batch]
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return np.zeros_like(v), -math.inf
    L = spec.depth
    log_scale = -math.log(n_b) + lse + (L - 1) * logn + math.log(nv)
    return v / nv, log_scale


def full_batch_direction(spec: NetSpec, w, dataset: Dataset, loss: LossKind, kink=None):
    """``-(1/n) sum_i l'(p_i(w)) a_i(w)`` as (unit direction, log magnitude).

    A vanishing direction is returned as zeros with log magnitude ``-inf``.
    """
    return _direction(spec, w, dataset, loss, kink, np.arange(dataset.n))


def minibatch_direction(spec: NetSpec, w, dataset: Dataset, loss: LossKind, batch, kink=None):
    """Same as :func:`full_batch_direction` restricted to ``batch``."""
    return _direction(spec, w, dataset, loss, kink, np.asarray(batch))


def detect_separation(records, threshold=SEPARATION_THRESHOLD,
                      persistence=SEPARATION_PERSISTENCE) -> Optional[int]:
    """First recorded k whose normalized margin exceeds ``threshold`` and
    stays above it for the next ``persistence`` records."""
    m = np.array([r.normalized_margin for r in records], dtype=float)
    ok = m > threshold
    for i in range(len(records) - persistence):
        if ok[i] and ok[i + 1:i + 1 + persistence].all():
            return records[i].k
    return None


def _make_record(k, loss, p, pu, nw, gamma_k, log_gt, log_gb, cumsum):
    if nw > 0:
        srt = np.sort(pu)
        nm = float(srt[0])
        gap = float(srt[1] - srt[0]) if srt.size > 1 else math.nan
    else:
        nm, gap = math.nan, math.nan
    return StepRecord(
        k=int(k),
        norm_w=float(nw),
        normalized_margin=nm,
        log_loss=log_risk(loss, p),
        gamma_k=float(gamma_k),
        log_gamma_tilde=float(log_gt),
        log_gamma_bar=float(log_gb),
        gamma_bar_cumsum=float(cumsum),
        active_gap=gap,
    )


def run(config: ExperimentConfig, dataset: Dataset, w0=None) -> Trajectory:
    """Run (S)GD and record diagnostics.

    The update is ``w_{k+1} = w_k - (gamma_k / n_b) sum_{i in B_k} l'(p_i(w_k)) a_i(w_k)``
    with ``B_k`` the full index set when ``batch_size`` equals ``n``.

    Parameters
    ----------
    w0 : array_like, optional
        Initial weights. Drawn from ``config`` (uniform init) when omitted.

    Raises
    ------
    NumericalAbort
        If the weights stop being finite.
    """
    spec, loss = config.net, config.loss
    n = dataset.n
    config.validate(n)
    n_b = config.batch_size_for(n)
    L = spec.depth
    rng = np.random.default_rng(config.seed)
    if w0 is None:
        w = init_weights(spec, rng, config.init_scale, config.init_target_norm).data.copy()
    else:
        w = as_flat(spec, w0).astype(float).copy()
    X, y = dataset.X, dataset.y
    e = config.kink.e
    log_inv_n = -math.log(n)

    records, snapshots = [], []
    cumsum = 0.0
    K = config.iterations
    rs, ss = config.record_stride, config.snapshot_stride
    for k in range(K + 1):
        try:
            p, pu, Gu, nw, logn = _eval_at_direction(spec, w, X, y, e)
        except FloatingPointError as exc:
            traj = Trajectory(records, snapshots, config, w, detect_separation(records))
            raise NumericalAbort(f"{exc} at iteration {k}", k, w.copy(), traj) from None
        gamma_k = config.gamma(k)
        logc = _log_neg_deriv_unchecked(loss, p)
        lse = _lse(logc)
        log_gt = (math.log(gamma_k) if gamma_k > 0 else -math.inf) + log_inv_n + lse
        if nw > 0:
            log_gt += (L - 1) * logn
            log_gb = log_gt - logn
        else:
            log_gt = log_gt if L == 1 else -math.inf
            log_gb = math.nan
        snap = k < K and k % ss == 0
        if k % rs == 0 or k == K or snap:
            records.append(_make_record(k, loss, p, pu, nw, gamma_k, log_gt, log_gb, cumsum))
        if k == K:
            break
        batch = sample_batch(rng, n, n_b)
        pb = p[batch]
        if np.max(np.abs(pb)) <= LINEAR_DOMAIN_LIMIT:
            coef = np.exp(logc[batch]) * nw ** (L - 1) if nw > 0 else np.exp(logc[batch])
        else:
            coef = np.exp(logc[batch] + (L - 1) * logn)
        w_next = w + (gamma_k / n_b) * (coef @ Gu[batch])
        if not math.isfinite(float(w_next.sum())):
            traj = Trajectory(records, snapshots, config, w, detect_separation(records))
            raise NumericalAbort(f"non-finite weights at iteration {k + 1}", k, w.copy(), traj)
        if snap:
            snapshots.append(Snapshot(k, w.copy(), w_next.copy(), batch.copy()))
        if nw > 0:
            cumsum += math.exp(log_gb)
        w = w_next
    return Trajectory(records, snapshots, config, w, detect_separation(records))
