"""Benchmark target densities and their reference statistics.

Every target exposes an analytic log-density and score written in
``jax.numpy`` so they can be traced inside jitted simulations. Reference
statistics (log-normalizer and moments) are computed separately with
numpy/scipy, in closed form where possible and by 1-D quadrature otherwise,
exploiting that every benchmark density factorizes over coordinates (or
conditionally on the first coordinate for the funnel).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp
from scipy.special import erf

from .errors import InputError, OracleError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ReferenceStats:
    log_Z: float
    expected_sq_norm: float
    expected_l1_norm: float
    per_dim_std: tuple
    provenance: str  # "closed_form" | "quadrature"

    @property
    def avg_std(self) -> float:
        return float(np.mean(self.per_dim_std))

    def __post_init__(self):
        vals = [self.log_Z, self.expected_sq_norm, self.expected_l1_norm, *self.per_dim_std]
        if not np.all(np.isfinite(vals)):
            raise OracleError("reference statistics are not finite")
        if min(self.per_dim_std) <= 0:
            raise OracleError("reference standard deviations must be positive")


def _check_dim(x, dim):
    if x.shape[-1:] != (dim,):
        raise InputError(f"expected trailing dimension {dim}, got shape {tuple(x.shape)}")


class TargetDensity:
    """Base class. Subclasses implement ``_log_rho``/``_grad`` on arrays of shape (..., d)."""

    kind: str
    dim: int

    def log_rho(self, x):
        x = jnp.asarray(x)
        _check_dim(x, self.dim)
        return self._log_rho(x)

    def grad_log_rho(self, x):
        x = jnp.asarray(x)
        _check_dim(x, self.dim)
        return self._grad(x)

    def reference_stats(self) -> ReferenceStats:
        raise NotImplementedError

    @property
    def spec(self) -> str:
        raise NotImplementedError

    def _log_rho(self, x):
        raise NotImplementedError

    def _grad(self, x):
        raise NotImplementedError


def _abs_normal_mean(mu, s):
    """E|Z| for Z ~ N(mu, s^2)."""
    mu = np.asarray(mu, dtype=float)
    return s * math.sqrt(2.0 / math.pi) * np.exp(-(mu**2) / (2 * s**2)) + mu * erf(mu / (s * math.sqrt(2.0)))


@dataclass(frozen=True)
class GMM(TargetDensity):
    """Isotropic Gaussian mixture; defaults to the 3x3 grid of modes at {-5, 0, 5}^2."""

    means: tuple = tuple(product((-5.0, 0.0, 5.0), repeat=2))
    variance: float = 0.3
    weights: tuple | None = None
    kind: str = field(default="gmm", init=False)

    def __post_init__(self):
        means = tuple(tuple(float(v) for v in m) for m in self.means)
        object.__setattr__(self, "means", means)
        if len({len(m) for m in means}) != 1:
            raise InputError("all GMM means must have the same dimension")
        if self.weights is None:
            object.__setattr__(self, "weights", tuple([1.0 / len(means)] * len(means)))
        if len(self.weights) != len(means):
            raise InputError("one weight per mixture component required")
        if abs(sum(self.weights) - 1.0) > 1e-12 or min(self.weights) <= 0:
            raise InputError("GMM weights must be positive and sum to 1")
        if self.variance <= 0:
            raise InputError("GMM variance must be positive")

    @property
    def dim(self):
        return len(self.means[0])

    @property
    def spec(self):
        if self == GMM():
            return "gmm"
        return f"gmm:d={self.dim},var={self.variance!r}"

    def _component_logpdf(self, x):
        mu = jnp.asarray(self.means, x.dtype)  # (K, d)
        diff = x[..., None, :] - mu
        sq = jnp.sum(diff**2, axis=-1)
        return (
            jnp.log(jnp.asarray(self.weights, x.dtype))
            - 0.5 * sq / self.variance
            - 0.5 * self.dim * (LOG_2PI + math.log(self.variance))
        )

    def _log_rho(self, x):
        return logsumexp(self._component_logpdf(x), axis=-1)

    def _grad(self, x):
        resp = jax.nn.softmax(self._component_logpdf(x), axis=-1)
        mu = jnp.asarray(self.means, x.dtype)
        return (resp @ mu - x) / self.variance

    def reference_stats(self):
        mu = np.asarray(self.means)
        w = np.asarray(self.weights)
        s = math.sqrt(self.variance)
        sq = float(np.sum(w * (np.sum(mu**2, axis=1) + self.dim * self.variance)))
        l1 = float(np.sum(w[:, None] * _abs_normal_mean(mu, s)))
        mean = w @ mu
        var = w @ (mu**2 + self.variance) - mean**2
        return ReferenceStats(0.0, sq, l1, tuple(np.sqrt(var)), "closed_form")


@dataclass(frozen=True)
class Funnel(TargetDensity):
    """Neal's funnel: x1 ~ N(0, nu^2), x_i | x1 ~ N(0, exp(x1))."""

    dim: int = 10
    nu: float = 3.0
    kind: str = field(default="funnel", init=False)

    def __post_init__(self):
        if self.dim < 2 or self.nu <= 0:
            raise InputError("funnel needs d >= 2 and nu > 0")

    @property
    def spec(self):
        return f"funnel:d={self.dim},nu={self.nu!r}"

    def _log_rho(self, x):
        x1, rest = x[..., 0], x[..., 1:]
        k = self.dim - 1
        return (
            -0.5 * x1**2 / self.nu**2
            - 0.5 * LOG_2PI
            - math.log(self.nu)
            - 0.5 * k * (LOG_2PI + x1)
            - 0.5 * jnp.sum(rest**2, axis=-1) * jnp.exp(-x1)
        )

    def _grad(self, x):
        x1, rest = x[..., :1], x[..., 1:]
        e = jnp.exp(-x1)
        g1 = -x1 / self.nu**2 - 0.5 * (self.dim - 1) + 0.5 * e * jnp.sum(rest**2, axis=-1, keepdims=True)
        return jnp.concatenate([g1, -rest * e], axis=-1)

    def reference_stats(self, n_nodes=100):
        # E||x||^2 = nu^2 + (d-1) E[e^{x1}] in closed form; the remaining moments
        # integrate conditional closed forms over x1 with Gauss-Hermite.
        def gh_expect(g, n):
            z, w = np.polynomial.hermite_e.hermegauss(n)
            return float(np.sum(w * g(self.nu * z)) / math.sqrt(2.0 * math.pi))

        def converged(g):
            a, b = gh_expect(g, n_nodes), gh_expect(g, 2 * n_nodes)
            if abs(b - a) > 1e-10 * abs(b):
                raise OracleError(f"Gauss-Hermite quadrature did not converge ({a!r} vs {b!r})")
            return b

        k = self.dim - 1
        half = converged(lambda x1: np.exp(0.5 * x1))  # E[sqrt(Var(x_i | x1))]
        second = converged(np.exp)  # E[Var(x_i | x1)]
        sq = self.nu**2 + k * math.exp(self.nu**2 / 2)
        l1 = self.nu * math.sqrt(2 / math.pi) + k * math.sqrt(2 / math.pi) * half
        std = (self.nu,) + (math.sqrt(second),) * k
        return ReferenceStats(0.0, sq, l1, std, "quadrature")


def simpson(fvals, a, b):
    """Composite Simpson rule on an even number of uniform panels."""
    n = len(fvals) - 1
    if n % 2:
        raise InputError("Simpson's rule needs an even number of panels")
    h = (b - a) / n
    return h / 3.0 * (fvals[0] + fvals[-1] + 4.0 * fvals[1:-1:2].sum() + 2.0 * fvals[2:-1:2].sum())


def double_well_moments(delta, panels=1_000_000, half_width=None):
    """Return (z, E|x|, E x^2) for the 1-D density exp(-(x^2 - delta)^2) by Simpson's rule.

    The interval [-c, c] is wide enough that the neglected tail mass is
    below exp(-64).
    """
    c = half_width if half_width is not None else max(10.0, math.sqrt(delta + 8.0) + 1.0)
    x = np.linspace(-c, c, panels + 1)
    dens = np.exp(-((x**2 - delta) ** 2))
    z = simpson(dens, -c, c)
    m1 = simpson(np.abs(x) * dens, -c, c) / z
    m2 = simpson(x**2 * dens, -c, c) / z
    return z, m1, m2


@dataclass(frozen=True)
class DoubleWell(TargetDensity):
    """rho(x) = exp(-sum_{i<=w} (x_i^2 - delta)^2 - 1/2 sum_{i>w} x_i^2), unnormalized."""

    dim: int = 2
    w: int = 1
    delta: float = 3.0
    kind: str = field(default="dw", init=False)

    def __post_init__(self):
        if self.dim < 1 or not (0 <= self.w <= self.dim) or self.delta <= 0:
            raise InputError("double well needs 0 <= w <= d and delta > 0")

    @property
    def spec(self):
        return f"dw:d={self.dim},w={self.w},delta={self.delta!r}"

    def _log_rho(self, x):
        wells, rest = x[..., : self.w], x[..., self.w :]
        return -jnp.sum((wells**2 - self.delta) ** 2, axis=-1) - 0.5 * jnp.sum(rest**2, axis=-1)

    def _grad(self, x):
        wells, rest = x[..., : self.w], x[..., self.w :]
        return jnp.concatenate([-4.0 * wells * (wells**2 - self.delta), -rest], axis=-1)

    def reference_stats(self, panels=1_000_000):
        k = self.dim - self.w
        gauss_l1 = math.sqrt(2.0 / math.pi)
        if self.w == 0:
            return ReferenceStats(0.5 * k * LOG_2PI, float(k), k * gauss_l1, (1.0,) * k, "closed_form")
        z, m1, m2 = double_well_moments(self.delta, panels)
        z2, m1b, m2b = double_well_moments(self.delta, panels // 2)
        for fine, coarse in ((z, z2), (m1, m1b), (m2, m2b)):
            if abs(fine - coarse) > 1e-10 * abs(fine):
                raise OracleError(f"Simpson quadrature did not converge ({coarse!r} -> {fine!r})")
        return ReferenceStats(
            self.w * math.log(z) + 0.5 * k * LOG_2PI,
            self.w * m2 + k,
            self.w * m1 + k * gauss_l1,
            (math.sqrt(m2),) * self.w + (1.0,) * k,
            "quadrature",
        )


@dataclass(frozen=True)
class Gaussian(TargetDensity):
    """Normalized isotropic Gaussian N(mean, nu^2 I)."""

    dim: int = 2
    mean: tuple | float = 0.0
    nu: float = 1.0
    kind: str = field(default="gauss", init=False)

    def __post_init__(self):
        m = self.mean
        if np.isscalar(m):
            m = (float(m),) * self.dim
        m = tuple(float(v) for v in m)
        if len(m) != self.dim:
            raise InputError("mean must have length d")
        object.__setattr__(self, "mean", m)
        if self.nu <= 0:
            raise InputError("nu must be positive")

    @property
    def spec(self):
        if len(set(self.mean)) == 1:
            m = repr(self.mean[0])
        else:
            m = ";".join(repr(v) for v in self.mean)
        return f"gauss:d={self.dim},nu={self.nu!r},m={m}"

    def _log_rho(self, x):
        m = jnp.asarray(self.mean, x.dtype)
        return -0.5 * jnp.sum((x - m) ** 2, axis=-1) / self.nu**2 - self.dim * (0.5 * LOG_2PI + math.log(self.nu))

    def _grad(self, x):
        return (jnp.asarray(self.mean, x.dtype) - x) / self.nu**2

    def reference_stats(self):
        m = np.asarray(self.mean)
        sq = float(np.sum(m**2) + self.dim * self.nu**2)
        l1 = float(np.sum(_abs_normal_mean(m, self.nu)))
        return ReferenceStats(0.0, sq, l1, (self.nu,) * self.dim, "closed_form")


@dataclass(frozen=True)
class Shifted(TargetDensity):
    """``base`` with log_rho offset by ``log_c``, i.e. rho -> c * rho. Test shim."""

    base: TargetDensity
    log_c: float = 0.0

    @property
    def kind(self):
        return self.base.kind

    @property
    def dim(self):
        return self.base.dim

    @property
    def spec(self):
        return self.base.spec

    def _log_rho(self, x):
        return self.base._log_rho(x) + self.log_c

    def _grad(self, x):
        return self.base._grad(x)

    def reference_stats(self):
        ref = self.base.reference_stats()
        return ReferenceStats(ref.log_Z + self.log_c, ref.expected_sq_norm, ref.expected_l1_norm,
                              ref.per_dim_std, ref.provenance)


def log_rho(target: TargetDensity, x):
    return target.log_rho(x)


def grad_log_rho(target: TargetDensity, x):
    return target.grad_log_rho(x)


def reference_stats(target: TargetDensity) -> ReferenceStats:
    return target.reference_stats()


_KINDS = {"gmm": GMM, "funnel": Funnel, "dw": DoubleWell, "gauss": Gaussian}


def parse_target(text: str) -> TargetDensity:
    """Parse ``gmm``, ``funnel:d=10,nu=3``, ``dw:d=20,w=5,delta=3`` or ``gauss:d=2,nu=1,m=0``."""
    name, _, rest = text.strip().partition(":")
    name = name.lower()
    if name not in _KINDS:
        raise InputError(f"unknown target kind {name!r}; expected one of {sorted(_KINDS)}")
    opts = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, val = item.partition("=")
        if not eq:
            raise InputError(f"malformed target option {item!r}")
        opts[key.strip()] = val.strip()
    try:
        if name == "gmm":
            if not opts:
                return GMM()
            d = int(opts.pop("d", 2))
            var = float(opts.pop("var", 0.3))
            if d != 2:
                raise InputError("only the 2-D grid mixture is available from a spec string")
            target = GMM(variance=var)
        elif name == "funnel":
            target = Funnel(dim=int(opts.pop("d", 10)), nu=float(opts.pop("nu", 3.0)))
        elif name == "dw":
            target = DoubleWell(dim=int(opts.pop("d", 2)), w=int(opts.pop("w", 1)),
                                delta=float(opts.pop("delta", 3.0)))
        else:
            d = int(opts.pop("d", 2))
            m = [float(v) for v in opts.pop("m", "0").split(";")]
            target = Gaussian(dim=d, mean=m[0] if len(m) == 1 else tuple(m), nu=float(opts.pop("nu", 1.0)))
    except ValueError as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"bad target option in {text!r}: {exc}") from exc
    if opts:
        raise InputError(f"unknown option(s) {sorted(opts)} for target {name!r}")
    return target
