"""Separable, weakly convex regularizers with closed-form proximal maps.

Every penalty is a kappa-scaled sum of a scalar function applied
coordinatewise::

    h(z) = kappa * sum_j p(z_j)

where ``p`` has unit threshold.  For MCP and SCAD this keeps the weak
convexity modulus proportional to ``kappa`` (``rho = kappa / gamma`` and
``rho = kappa / (a - 1)``), so ``kappa = 0`` degenerates to the zero
regularizer in every respect.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

VARIANTS = ("zero", "l1", "mcp", "scad", "box")

_FIELDS = {"variant", "kappa", "gamma", "a", "lo", "hi"}
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class ProxConditionError(ValueError):
    """Raised when a proximal step is requested with ``alpha * rho >= 1``."""


@dataclass(frozen=True)
class Regularizer:
    """Coordinatewise penalty ``kappa * p(z)``.

    Parameters
    ----------
    variant : str
        One of ``zero``, ``l1``, ``mcp``, ``scad`` or ``box`` (indicator of
        ``[lo, hi]^d``).
    kappa : float
        Nonnegative scale.  Ignored for ``zero`` and ``box``.
    gamma : float
        MCP concavity parameter, ``gamma > 0``.
    a : float
        SCAD shape parameter, ``a > 2``.
    lo, hi : float
        Box bounds, ``lo <= 0 <= hi`` so that ``prox(0) = 0``.
    """

    variant: str = "zero"
    kappa: float = 0.0
    gamma: float = 2.0
    a: float = 3.7
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown regularizer variant {self.variant!r}; expected one of {VARIANTS}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be nonnegative, got {self.kappa}")
        if self.variant == "mcp" and self.gamma <= 0:
            raise ValueError(f"MCP requires gamma > 0, got {self.gamma}")
        if self.variant == "scad" and self.a <= 2:
            raise ValueError(f"SCAD requires a > 2, got {self.a}")
        if self.variant == "box" and not self.lo <= self.hi:
            raise ValueError(f"box requires lo <= hi, got [{self.lo}, {self.hi}]")

    @classmethod
    def from_dict(cls, spec: dict | None) -> "Regularizer":
        spec = dict(spec or {"variant": "zero"})
        unknown = sorted(set(spec) - _FIELDS)
        if unknown:
            raise ValueError(f"unknown regularizer fields: {unknown}")
        kwargs = {k: float(v) for k, v in spec.items() if k != "variant"}
        return cls(variant=spec.get("variant", "zero"), **kwargs)

    def to_dict(self) -> dict:
        out = {"variant": self.variant, "kappa": self.kappa}
        if self.variant == "mcp":
            out["gamma"] = self.gamma
        elif self.variant == "scad":
            out["a"] = self.a
        elif self.variant == "box":
            out.update(lo=self.lo, hi=self.hi)
        return out

    @property
    def rho(self) -> float:
        return weak_convexity(self)

    @property
    def is_zero(self) -> bool:
        return self.variant == "zero" or (self.variant != "box" and self.kappa == 0.0)


def weak_convexity(reg: Regularizer) -> float:
    """Smallest ``rho >= 0`` such that ``h + rho/2 ||.||^2`` is convex."""
    if reg.variant == "mcp":
        return reg.kappa / reg.gamma
    if reg.variant == "scad":
        return reg.kappa / (reg.a - 1.0)
    return 0.0


def subgrad_bound(reg: Regularizer, d: int):
    """Uniform bound ``B_h`` on ``||h'(z)||^2`` over all subgradients.

    All unit penalties have slope at most one, hence ``kappa^2 * d``.  The box
    indicator has unbounded normal cones; ``None`` flags that no bound exists.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if reg.variant == "box":
        return None
    if reg.variant == "zero":
        return 0.0
    return reg.kappa ** 2 * d


def _unit_penalty(reg: Regularizer, u: np.ndarray) -> np.ndarray:
    # u = |z|
    if reg.variant == "l1":
        return u
    if reg.variant == "mcp":
        g = reg.gamma
        return np.where(u <= g, u - u * u / (2.0 * g), g / 2.0)
    if reg.variant == "scad":
        a = reg.a
        mid = (2.0 * a * u - u * u - 1.0) / (2.0 * (a - 1.0))
        return np.where(u <= 1.0, u, np.where(u <= a, mid, (a + 1.0) / 2.0))
    return np.zeros_like(u)


def h_value(reg: Regularizer, z) -> float:
    """Evaluate ``h(z)``; the box indicator returns ``inf`` outside the box."""
    z = np.asarray(z, dtype=float)
    if reg.variant == "box":
        inside = np.all((z >= reg.lo) & (z <= reg.hi))
        return 0.0 if inside else math.inf
    if reg.is_zero:
        return 0.0
    return float(reg.kappa * np.sum(_unit_penalty(reg, np.abs(z))))


def check_prox_step(reg: Regularizer, alpha: float) -> None:
    if alpha <= 0:
        raise ProxConditionError(f"proximal step requires alpha > 0, got {alpha}")
    rho = weak_convexity(reg)
    if alpha * rho >= 1.0:
        raise ProxConditionError(
            f"proximal step violates 0 < alpha < 1/rho: alpha={alpha}, rho={rho}, alpha*rho={alpha * rho}"
        )


def prox(reg: Regularizer, alpha: float, y) -> np.ndarray:
    """Exact ``argmin_x h(x) + ||x - y||^2 / (2 alpha)``, coordinatewise.

    Region boundaries use non-strict comparisons toward the smaller-magnitude
    branch; with ``alpha * rho < 1`` the subproblem is strongly convex, so the
    branches agree there and the minimizer is unique.
    """
    check_prox_step(reg, alpha)
    y = np.asarray(y, dtype=float)
    if reg.variant == "box":
        return np.clip(y, reg.lo, reg.hi)
    if reg.is_zero:
        return y.copy()

    tau = alpha * reg.kappa
    u = np.abs(y)
    s = np.sign(y)
    if reg.variant == "l1":
        return s * np.maximum(u - tau, 0.0)
    if reg.variant == "mcp":
        g = reg.gamma
        shrunk = (u - tau) / (1.0 - tau / g)
        out = np.where(u <= tau, 0.0, np.where(u <= g, shrunk, u))
        return s * out
    # scad
    a = reg.a
    mid = ((a - 1.0) * u - a * tau) / (a - 1.0 - tau)
    out = np.where(
        u <= tau,
        0.0,
        np.where(u <= 1.0 + tau, u - tau, np.where(u <= a, mid, u)),
    )
    return s * out


# -- brute-force scalar oracle ------------------------------------------------

def _segments(reg: Regularizer):
    """Piecewise form ``p(u) = c + b1*u - b2*u^2`` on ``[u_lo, u_hi]``."""
    if reg.variant == "l1":
        return [(0.0, math.inf, 0.0, 1.0, 0.0)]
    if reg.variant == "mcp":
        g = reg.gamma
        return [(0.0, g, 0.0, 1.0, 1.0 / (2.0 * g)), (g, math.inf, g / 2.0, 0.0, 0.0)]
    if reg.variant == "scad":
        a = reg.a
        return [
            (0.0, 1.0, 0.0, 1.0, 0.0),
            (1.0, a, -1.0 / (2.0 * (a - 1.0)), a / (a - 1.0), 1.0 / (2.0 * (a - 1.0))),
            (a, math.inf, (a + 1.0) / 2.0, 0.0, 0.0),
        ]
    return [(0.0, math.inf, 0.0, 0.0, 0.0)]


def _seg_of(segs, u):
    for k, (lo, hi, *_rest) in enumerate(segs):
        if lo <= u <= hi:
            return k
    return len(segs) - 1


def _objective_diff(reg, segs, alpha, y, x1, x2):
    """``F(x1) - F(x2)`` for ``F(x) = kappa p(|x|) + (x - y)^2 / (2 alpha)``.

    Written as products of differences so the sign stays reliable when the two
    points are within rounding distance of each other.
    """
    quad = (x1 - x2) * (x1 + x2 - 2.0 * y) / (2.0 * alpha)
    if reg.is_zero or reg.variant == "box":
        return quad
    u1, u2 = abs(x1), abs(x2)
    k1, k2 = _seg_of(segs, u1), _seg_of(segs, u2)
    if k1 == k2:
        _, _, _, b1, b2 = segs[k1]
        pen = (u1 - u2) * (b1 - b2 * (u1 + u2))
    else:
        def p(u, k):
            _, _, c, b1, b2 = segs[k]
            return c + b1 * u - b2 * u * u
        pen = p(u1, k1) - p(u2, k2)
    return reg.kappa * pen + quad


def prox_oracle_scalar(reg: Regularizer, alpha: float, y: float, grid: int = 4001, tol: float = 1e-10) -> float:
    """Brute-force scalar prox: dense grid scan refined by golden-section search.

    Independent of the closed forms in :func:`prox`; used as a test oracle.
    """
    check_prox_step(reg, alpha)
    y = float(y)
    if reg.variant == "box":
        lo, hi = reg.lo, reg.hi
    else:
        width = abs(y) + 1.0 + (reg.gamma if reg.variant == "mcp" else reg.a if reg.variant == "scad" else 1.0) * max(reg.kappa, 1.0)
        lo, hi = -width, width
    segs = _segments(reg)

    xs = np.linspace(lo, hi, grid)
    vals = (xs - y) ** 2 / (2.0 * alpha)
    if reg.variant != "box":
        vals += reg.kappa * _unit_penalty(reg, np.abs(xs))
    k = int(np.argmin(vals))
    a, b = xs[max(k - 1, 0)], xs[min(k + 1, grid - 1)]

    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    while b - a > tol:
        if _objective_diff(reg, segs, alpha, y, c, d) <= 0.0:
            b = d
        else:
            a = c
        c = b - _GOLDEN * (b - a)
        d = a + _GOLDEN * (b - a)
    x = 0.5 * (a + b)
    # snap onto an exact kink when it is at least as good
    for cand in (0.0, lo, hi):
        if a - tol <= cand <= b + tol and _objective_diff(reg, segs, alpha, y, cand, x) <= 0.0:
            x = cand
    return float(x)
