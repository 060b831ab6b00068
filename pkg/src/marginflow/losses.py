"""Exponential-tailed classification losses evaluated in the log domain.

Signed outputs grow like ``||w||^L``, so ``-l'(q)`` underflows long before
training ends. Everything downstream works with ``log(-l'(q))`` and combines
terms with log-sum-exp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

KINDS = ("exp", "logistic", "exp_pow", "logistic_pow")


class LossDomainError(ValueError):
    pass


@dataclass(frozen=True)
class LossKind:
    """``exp``: e^{-q}; ``logistic``: log(1 + e^{-q}); the ``_pow`` variants
    replace q by q^a with a >= 1."""

    name: str = "exp"
    power: float = 1.0

    def __post_init__(self):
        if self.name not in KINDS:
            raise ValueError(f"unknown loss {self.name!r}")
        if self.power < 1:
            raise ValueError("loss power must be >= 1")
        if self.name in ("exp", "logistic") and self.power != 1:
            raise ValueError(f"{self.name} loss takes no power")

    @property
    def q0(self) -> float:
        return 0.0

    @classmethod
    def parse(cls, text: str) -> "LossKind":
        """Parse ``"exp"``, ``"logistic"``, ``"exp_pow:a"`` or ``"logistic_pow:a"``."""
        name, _, arg = text.strip().partition(":")
        if name in ("exp_pow", "logistic_pow"):
            if not arg:
                raise ValueError(f"{name} needs a power, e.g. {name}:2")
            return cls(name, float(arg))
        if arg:
            raise ValueError(f"{name} takes no argument")
        return cls(name)

    def __str__(self):
        if self.name in ("exp_pow", "logistic_pow"):
            return f"{self.name}:{self.power:g}"
        return self.name


EXP = LossKind("exp")
LOGISTIC = LossKind("logistic")


def _spow(q, a):
    # odd extension keeps q -> q^a increasing on the whole line
    return np.sign(q) * np.abs(q) ** a


def loss_value(kind: LossKind, q):
    q = np.asarray(q, dtype=float)
    t = q if kind.power == 1 else _spow(q, kind.power)
    if kind.name in ("exp", "exp_pow"):
        out = np.exp(-t)
    else:
        out = np.logaddexp(0.0, -t)
    return out if out.ndim else float(out)


def log_loss_value(kind: LossKind, q):
    """``log l(q)``, finite for arguments far beyond the underflow range."""
    q = np.asarray(q, dtype=float)
    t = q if kind.power == 1 else _spow(q, kind.power)
    if kind.name in ("exp", "exp_pow"):
        out = -t
    else:
        # log(log1p(e^{-t})): switch to -t + log1p(-e^{-t}/2 ...) for large t
        with np.errstate(divide="ignore"):
            out = np.where(t > 30, -t - 0.5 * np.exp(-t), np.log(np.logaddexp(0.0, -t)))
    return out if out.ndim else float(out)


def log_neg_deriv(kind: LossKind, q):
    """``log(-l'(q))`` for ``q >= q0``.

    Raises
    ------
    LossDomainError
        If any ``q`` lies below the loss's ``q0``.
    """
    q = np.asarray(q, dtype=float)
    if np.any(q < kind.q0):
        raise LossDomainError(f"log(-l'(q)) requested below q0 = {kind.q0}")
    return _log_neg_deriv_unchecked(kind, q)


def _log_neg_deriv_unchecked(kind: LossKind, q):
    q = np.asarray(q, dtype=float)
    if kind.name == "exp":
        out = -q
    elif kind.name == "logistic":
        out = -np.logaddexp(0.0, q)
    else:
        a = kind.power
        aq = np.abs(q)
        t = _spow(q, a)
        with np.errstate(divide="ignore"):
            pre = np.log(a) + (a - 1) * np.log(aq) if a != 1 else np.zeros_like(q)
        tail = -t if kind.name == "exp_pow" else -np.logaddexp(0.0, t)
        out = pre + tail
    return out if np.ndim(out) else float(out)


def neg_deriv(kind: LossKind, q):
    """``-l'(q)``; underflows to 0 where the log-domain path must be used."""
    out = np.exp(log_neg_deriv(kind, q))
    return out if np.ndim(out) else float(out)


def log_risk(kind: LossKind, p) -> float:
    """``log((1/n) sum_i l(p_i))`` computed without underflow."""
    p = np.asarray(p, dtype=float)
    return float(logsumexp(log_loss_value(kind, p)) - np.log(p.size))


def log_sum_neg_deriv(kind: LossKind, p) -> float:
    """``log(sum_i -l'(p_i))``."""
    return float(logsumexp(log_neg_deriv(kind, p)))
