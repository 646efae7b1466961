"""Laplace-eigenbasis engine for restricted diffusion.

Everything is computed at unit outer size (L = 1); callers express time
through p = D*t/L**2 and field strength through q = gamma*beta*t.  The
eigenvalue matrix is diagonal; the field matrix for a linear gradient is
evaluated in closed form on the disk (it is a rational function of the
eigenvalues) and by Gauss-Legendre quadrature elsewhere; the surface
matrix collects boundary values of the eigenfunctions.  Signals come
from products of complex-symmetric matrix exponentials over the
piecewise-constant segments of the temporal profile; moments come from
block-triangular (Van Loan) exponentials of the same segments, which
evaluate the nested ordered time integrals exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq
from scipy.special import jv, jvp, polygamma, spherical_jn, spherical_yn, yv, yvp

from .errors import ConvergenceError, ValidationError

DOMAIN_KINDS = ("interval", "disk", "sphere", "circular_layer", "spherical_layer")


@dataclass(frozen=True)
class SpectralDomain:
    """Confining domain at unit outer size with Robin parameter h >= 0;
    h = 0 is a purely reflecting boundary."""

    kind: str
    h: float = 0.0
    inner_radius: float = 0.0

    def __post_init__(self):
        if self.kind not in DOMAIN_KINDS:
            raise ValidationError(f"unknown domain kind {self.kind!r}")
        if self.h < 0:
            raise ValidationError("Robin parameter h must be >= 0")
        if self.kind.endswith("layer"):
            if not (0.0 < self.inner_radius < 1.0):
                raise ValidationError("layer needs 0 < inner_radius < 1")
        elif self.inner_radius != 0.0:
            raise ValidationError("inner_radius only applies to layers")

    @property
    def ndim(self) -> int:
        return {"interval": 1, "disk": 2, "circular_layer": 2,
                "sphere": 3, "spherical_layer": 3}[self.kind]

    @property
    def volume(self) -> float:
        r = self.inner_radius
        return {"interval": 1.0, "disk": math.pi,
                "circular_layer": math.pi * (1 - r * r),
                "sphere": 4 * math.pi / 3,
                "spherical_layer": 4 * math.pi / 3 * (1 - r ** 3)}[self.kind]

    @property
    def surface(self) -> float:
        r = self.inner_radius
        return {"interval": 2.0, "disk": 2 * math.pi,
                "circular_layer": 2 * math.pi * (1 + r),
                "sphere": 4 * math.pi,
                "spherical_layer": 4 * math.pi * (1 + r * r)}[self.kind]


# ----------------------------------------------------------------------
# Temporal profiles and ordered-integral brackets
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class TemporalProfile:
    """Piecewise-constant profile: value ``values[i]`` on
    [breakpoints[i], breakpoints[i+1])."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if bp.ndim != 1 or vals.ndim != 1 or bp.size != vals.size + 1:
            raise ValidationError("need len(breakpoints) = len(values) + 1")
        if bp[0] != 0.0 or np.any(np.diff(bp) <= 0):
            raise ValidationError("breakpoints must increase strictly from 0")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    @property
    def duration(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    def __call__(self, s):
        idx = np.clip(np.searchsorted(self.breakpoints, s, side="right") - 1,
                      0, self.values.size - 1)
        return self.values[idx]

    def integral(self) -> float:
        return float(np.sum(self.values * self.widths))

    def is_refocused(self, tol: float = 1e-12) -> bool:
        scale = float(np.sum(np.abs(self.values) * self.widths)) or 1.0
        return abs(self.integral()) <= tol * scale

    def rescaled(self, t: float) -> "TemporalProfile":
        if t <= 0:
            raise ValidationError("duration must be positive")
        return TemporalProfile(self.breakpoints * (t / self.duration), self.values)

    @staticmethod
    def fid(t: float = 1.0) -> "TemporalProfile":
        return TemporalProfile(np.array([0.0, t]), np.array([1.0]))

    @staticmethod
    def bipolar(t: float = 1.0) -> "TemporalProfile":
        return TemporalProfile(np.array([0.0, t / 2, t]), np.array([1.0, -1.0]))

    @staticmethod
    def cpmg(n_echoes: int, t: float = 1.0) -> "TemporalProfile":
        if n_echoes < 1:
            raise ValidationError("cpmg needs at least one echo")
        k = 2 * n_echoes
        bp = np.linspace(0.0, t, k + 1)
        vals = np.array([1.0 if i % 2 == 0 else -1.0 for i in range(k)])
        return TemporalProfile(bp, vals)


def _h2(x):
    """(exp(-x) - 1 + x) / x**2, stable near 0."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-4
    xs = x[small]
    out[small] = 0.5 - xs / 6.0 + xs * xs / 24.0
    xl = x[~small]
    out[~small] = (np.expm1(-xl) + xl) / (xl * xl)
    return out


def _g1(x):
    """(1 - exp(-x)) / x, stable near 0."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-4
    xs = x[small]
    out[small] = 1.0 - xs / 2.0 + xs * xs / 6.0
    xl = x[~small]
    out[~small] = -np.expm1(-xl) / xl
    return out


def bracket_exp(profile: TemporalProfile, rates) -> np.ndarray:
    """Ordered double integral (2/t^2) iint f(t1) f(t2) exp(-c (t2-t1))
    over 0 < t1 < t2 < t, vectorized over decay rates ``c``."""
    c = np.atleast_1d(np.asarray(rates, dtype=float))
    if np.any(c < 0):
        raise ValidationError("decay rates must be >= 0")
    t = profile.duration
    a = profile.breakpoints[:-1]
    b = profile.breakpoints[1:]
    f = profile.values
    w = profile.widths
    acc = np.zeros_like(c)
    for i in range(f.size):
        acc += f[i] ** 2 * w[i] ** 2 * _h2(c * w[i])
        for j in range(i + 1, f.size):
            gap = a[j] - b[i]
            acc += (f[i] * f[j] * w[i] * w[j] * np.exp(-c * gap)
                    * _g1(c * w[i]) * _g1(c * w[j]))
    return 2.0 * acc / (t * t)


def bracket_power(profile: TemporalProfile, power: float) -> float:
    """Ordered double integral (2/t^2) iint f f (t2-t1)**power."""
    if power <= -1:
        raise ValidationError("power must exceed -1")
    t = profile.duration
    a = profile.breakpoints[:-1]
    b = profile.breakpoints[1:]
    f = profile.values
    w = profile.widths
    den = (power + 1.0) * (power + 2.0)

    def G(s):
        return np.maximum(s, 0.0) ** (power + 2.0) / den

    acc = 0.0
    for i in range(f.size):
        acc += f[i] ** 2 * G(w[i])
        for j in range(i + 1, f.size):
            u = a[j] - b[i]
            v = a[j] - a[i]
            ww = b[j] - b[i]
            z = b[j] - a[i]
            acc += f[i] * f[j] * (G(z) - G(v) - G(ww) + G(u))
    return 2.0 * acc / (t * t)


def free_diffusion_second_moment(profile: TemporalProfile, p: float) -> float:
    """Half second moment of the normalized phase for unrestricted
    diffusion and a refocused profile (bipolar at duration t gives p/12)."""
    if not profile.is_refocused():
        raise ValidationError("free-diffusion form requires a refocused profile")
    return -p * bracket_power(profile, 1.0) / (2.0 * profile.duration)


def profile_restriction_factor(profile: TemporalProfile) -> float:
    """<(t2-t1)^{3/2}>_2 / (<(t2-t1)>_2 sqrt(t)): the temporal-profile
    factor of the short-time surface-to-volume law."""
    num = bracket_power(profile, 1.5)
    den = bracket_power(profile, 1.0)
    if den == 0:
        raise ValidationError("degenerate profile normalization")
    return num / den / math.sqrt(profile.duration)


# ----------------------------------------------------------------------
# Characteristic functions and root finding
# ----------------------------------------------------------------------

def _char_function(domain: SpectralDomain, n: int):
    """Returns (f, low-branch spacing hint) where f(z)=0 gives the radial
    roots of angular order n."""
    h = domain.h
    R = domain.inner_radius
    if domain.kind == "interval":
        def f(z):
            return (z * z - h * h) * np.sin(z) - 2.0 * h * z * np.cos(z)
        return f, math.pi
    if domain.kind == "disk":
        def f(z):
            return (n + h) * jv(n, z) - z * jv(n + 1, z)
        return f, math.pi
    if domain.kind == "sphere":
        def f(z):
            return z * spherical_jn(n, z, derivative=True) + h * spherical_jn(n, z)
        return f, math.pi
    if domain.kind == "circular_layer":
        def f(z):
            f1 = z * jvp(n, z) + h * jv(n, z)
            g1 = z * yvp(n, z) + h * yv(n, z)
            f2 = -z * jvp(n, z * R) + h * jv(n, z * R)
            g2 = -z * yvp(n, z * R) + h * yv(n, z * R)
            return f1 * g2 - g1 * f2
        return f, math.pi / (1.0 - R)
    def f(z):
        f1 = z * spherical_jn(n, z, derivative=True) + h * spherical_jn(n, z)
        g1 = z * _sph_yn_deriv(n, z) + h * spherical_yn(n, z)
        f2 = -z * spherical_jn(n, z * R, derivative=True) + h * spherical_jn(n, z * R)
        g2 = -z * _sph_yn_deriv(n, z * R) + h * spherical_yn(n, z * R)
        return f1 * g2 - g1 * f2
    return f, math.pi / (1.0 - R)


def _sph_yn_deriv(n, z):
    return spherical_yn(n, z, derivative=True)


def find_roots(domain: SpectralDomain, n: int, count: int,
               h: float | None = None) -> np.ndarray:
    """First ``count`` nonnegative radial roots of angular order ``n``.

    The scan step stays well below half the asymptotic root spacing, and
    a bracket that cannot be refined raises rather than dropping a root.
    The n = 0 constant mode (root 0) of a reflecting domain is included.
    """
    if count < 1:
        raise ValidationError("count must be >= 1")
    if h is not None and h != domain.h:
        domain = SpectralDomain(domain.kind, h, domain.inner_radius)
    roots: list[float] = []
    if n == 0 and domain.h == 0.0:
        roots.append(0.0)
    if domain.kind == "interval":
        if domain.h == 0.0:
            return math.pi * np.arange(count, dtype=float)
        if n != 0:
            raise ValidationError("interval modes have a single angular order")
    f, spacing = _char_function(domain, n)
    step = spacing / 8.0
    z0 = max(1e-8, step * 1e-6)
    # large orders only start oscillating past the turning point ~ n
    if domain.kind in ("disk", "sphere") and n > 4:
        z0 = max(z0, 0.5 * n)
    z_prev = z0
    f_prev = f(z_prev)
    z = z0
    guard = 0
    while len(roots) < count:
        z += step
        val = f(z)
        if np.isfinite(val) and np.isfinite(f_prev) and val * f_prev < 0:
            try:
                r = brentq(f, z_prev, z, xtol=1e-15, rtol=8.9e-16)
            except ValueError as exc:
                raise ConvergenceError(f"bracket refinement failed near {z}") from exc
            if r > 1e-9:
                roots.append(float(r))
        elif val == 0.0 and z > 1e-9:
            # grid landed exactly on a root (or on an underflowed stretch);
            # count it only if the sign genuinely flips across it
            lo, hi = f(z - 0.49 * step), f(z + 0.49 * step)
            if np.isfinite(lo) and np.isfinite(hi) and lo * hi < 0:
                roots.append(float(z))
        z_prev, f_prev = z, val
        guard += 1
        if guard > 100000:
            raise ConvergenceError(
                f"root scan for order {n} did not find {count} roots")
    out = np.array(roots[:count])
    _verify_roots(domain, n, out)
    return out


def _verify_roots(domain: SpectralDomain, n: int, roots: np.ndarray) -> None:
    """Residual check: |f(root)| against the function's magnitude a
    quarter-spacing away (the terms cancel exactly at the root, so a
    fixed scale would be meaningless)."""
    pos = roots[roots > 0]
    if pos.size == 0:
        return
    f, spacing = _char_function(domain, n)
    delta = spacing / 4.0
    for z in pos:
        scale = max(abs(f(z - delta)), abs(f(z + delta)), 1e-300)
        if abs(f(z)) > 1e-12 * scale:
            raise ConvergenceError(
                f"characteristic residual {abs(f(z)) / scale:.2e} at root "
                f"{z:.6f} (order {n}) exceeds 1e-12")


# ----------------------------------------------------------------------
# Bases
# ----------------------------------------------------------------------

@dataclass
class SpectralBasis:
    """Truncated eigenbasis: eigenvalues lam = z**2, angular orders, radial
    profiles normalized so that each full eigenfunction has unit L2 norm."""

    domain: SpectralDomain
    size: int
    lam: np.ndarray
    order: np.ndarray
    root: np.ndarray
    norm: np.ndarray          # multiplies the raw radial profile
    _nodes: np.ndarray = field(repr=False, default=None)
    _weights: np.ndarray = field(repr=False, default=None)

    def radial_raw(self, n: int, z: float, r: np.ndarray) -> np.ndarray:
        d = self.domain
        if d.kind == "interval":
            if z == 0.0:
                return np.ones_like(r)
            if d.h == 0.0:
                return np.cos(z * r)
            return np.cos(z * r) + (d.h / z) * np.sin(z * r)
        if z == 0.0:
            return np.ones_like(r)
        if d.kind == "disk":
            return jv(n, z * r)
        if d.kind == "sphere":
            return spherical_jn(n, z * r)
        if d.kind == "circular_layer":
            a = z * yvp(n, z) + d.h * yv(n, z)
            b = -(z * jvp(n, z) + d.h * jv(n, z))
            return a * jv(n, z * r) + b * yv(n, z * r)
        a = z * _sph_yn_deriv(n, z) + d.h * spherical_yn(n, z)
        b = -(z * spherical_jn(n, z, derivative=True) + d.h * spherical_jn(n, z))
        return a * spherical_jn(n, z * r) + b * spherical_yn(n, z * r)

    def radial(self, m: int, r: np.ndarray) -> np.ndarray:
        return self.norm[m] * self.radial_raw(int(self.order[m]),
                                              float(self.root[m]), r)

    def radial_matrix(self, r: np.ndarray) -> np.ndarray:
        out = np.empty((self.size, r.size))
        for m in range(self.size):
            out[m] = self.radial(m, r)
        return out

    @property
    def nodes(self) -> np.ndarray:
        return self._nodes

    @property
    def weights(self) -> np.ndarray:
        """Quadrature weights including the radial measure r**(d-1)."""
        return self._weights


def _angular_gradient_factor(kind: str, n: int, n2: int) -> float:
    """Matrix element of the direction cosine between normalized angular
    modes of adjacent order."""
    if abs(n - n2) != 1:
        return 0.0
    if kind in ("disk", "circular_layer"):
        return 0.5 * math.sqrt(1.0 + (n == 0) + (n2 == 0))
    lo = min(n, n2)
    return (lo + 1.0) / math.sqrt((2.0 * lo + 1.0) * (2.0 * lo + 3.0))


def _interval_norm_sq(z: float, h: float) -> float:
    """Closed-form L2 norm^2 of cos(zx) + (h/z) sin(zx) on [0,1]."""
    if z == 0.0:
        return 1.0
    s2 = math.sin(2 * z) / (2 * z)
    val = 0.5 * (1 + s2)
    if h != 0.0:
        val += (h / z) ** 2 * 0.5 * (1 - s2)
        val += (2 * h / z) * (math.sin(z) ** 2 / (2 * z))
    return val


def build_basis(domain: SpectralDomain, size: int) -> SpectralBasis:
    """Assemble the ``size`` lowest eigenvalues across angular orders."""
    if size < 1:
        raise ValidationError("basis size must be >= 1")
    if domain.kind == "interval":
        if domain.h == 0.0:
            z = math.pi * np.arange(size, dtype=float)
        else:
            z = find_roots(domain, 0, size)
        orders = np.zeros(size, dtype=int)
        roots = z
    else:
        per = max(6, int(2.5 * math.sqrt(size)) + 4)
        per_order: dict[int, np.ndarray] = {}
        n = 0
        while True:
            per_order[n] = find_roots(domain, n, per)
            total = sum(len(v) for v in per_order.values())
            if total >= size:
                lam_all = np.sort(np.concatenate(
                    [v * v for v in per_order.values()]))
                lam_cut = lam_all[size - 1]
                # ensure no order was truncated below the cut
                grew = False
                for nn in list(per_order):
                    while per_order[nn][-1] ** 2 < lam_cut:
                        per_order[nn] = find_roots(domain, nn,
                                                   len(per_order[nn]) + per)
                        grew = True
                if grew:
                    lam_all = np.sort(np.concatenate(
                        [v * v for v in per_order.values()]))
                    lam_cut = lam_all[size - 1]
                if _first_root_lower_bound(domain, n + 1) ** 2 > lam_cut:
                    break
            n += 1
            if n > 4 * size + 8:
                raise ConvergenceError("angular order scan ran away")
        entries = []
        for nn, zs in per_order.items():
            for z in zs:
                entries.append((z * z, nn, z))
        entries.sort()
        entries = entries[:size]
        roots = np.array([e[2] for e in entries])
        orders = np.array([e[1] for e in entries], dtype=int)
    lam = roots ** 2
    lo = domain.inner_radius if domain.kind.endswith("layer") else 0.0
    zmax = float(roots.max()) if roots.size else 1.0
    nq = max(160, min(int(4 * zmax) + 32, 16384))
    from scipy.special import roots_legendre
    x, w = roots_legendre(nq)
    nodes = 0.5 * (x + 1.0) * (1.0 - lo) + lo
    wts = 0.5 * (1.0 - lo) * w
    d = domain.ndim
    if domain.kind == "interval":
        meas = wts
    else:
        meas = wts * nodes ** (d - 1)
    basis = SpectralBasis(domain, size, lam, orders, roots,
                          np.ones(size), _nodes=nodes, _weights=meas)
    if domain.kind == "interval":
        basis.norm = np.array(
            [1.0 / math.sqrt(_interval_norm_sq(float(zz), domain.h))
             for zz in roots])
    else:
        raw = np.empty((size, nodes.size))
        for m in range(size):
            raw[m] = basis.radial_raw(int(orders[m]), float(roots[m]), nodes)
        nrm2 = raw ** 2 @ meas
        basis.norm = 1.0 / np.sqrt(nrm2)
    return basis


def _first_root_lower_bound(domain: SpectralDomain, n: int) -> float:
    # the angular part alone contributes n^2 / r^2 >= n^2 to any
    # eigenvalue of order n, so roots satisfy z >= n on all radial domains
    return max(float(n), 1e-6)


# ----------------------------------------------------------------------
# Governing matrices
# ----------------------------------------------------------------------

@dataclass
class GoverningMatrices:
    lam: np.ndarray
    B: np.ndarray
    Bs: np.ndarray | None
    U: np.ndarray
    Ut: np.ndarray
    size: int


def build_B_linear(basis: SpectralBasis) -> np.ndarray:
    """Field matrix of a unit linear gradient along a fixed direction.

    Disk: closed form in the eigenvalues (adjacent angular orders only).
    Interval, sphere, layers: radial Gauss-Legendre quadrature times the
    exact angular factor.
    """
    d = basis.domain
    M = basis.size
    B = np.zeros((M, M))
    if d.kind == "disk":
        h = d.h
        beta = np.empty(M)
        sign = np.empty(M)
        for m in range(M):
            lam, n = basis.lam[m], basis.order[m]
            if lam == 0.0:
                beta[m] = 1.0
                sign[m] = 1.0
            else:
                beta[m] = math.sqrt(lam / (lam - n * n + h * h))
                # align with the positive-normalization convention used
                # everywhere else (radial profiles scaled by |norm| > 0)
                sign[m] = math.copysign(1.0, jv(n, math.sqrt(lam)))
        for m in range(M):
            for mp in range(m + 1, M):
                n, np_ = int(basis.order[m]), int(basis.order[mp])
                if abs(n - np_) != 1:
                    continue
                lam, lamp = basis.lam[m], basis.lam[mp]
                pref = math.sqrt(1.0 + (n == 0) + (np_ == 0))
                val = (pref * beta[m] * beta[mp] * sign[m] * sign[mp]
                       * (lam + lamp - 2.0 * n * np_ + 2.0 * h * (h - 1.0))
                       / (lam - lamp) ** 2)
                B[m, mp] = B[mp, m] = val
        return B
    r = basis.nodes
    w = basis.weights
    rad = basis.radial_matrix(r)
    if d.kind == "interval":
        return (rad * (r * w)) @ rad.T
    radial_int = (rad * (r * w)) @ rad.T
    for m in range(M):
        for mp in range(m + 1, M):
            a = _angular_gradient_factor(d.kind, int(basis.order[m]),
                                         int(basis.order[mp]))
            if a == 0.0:
                continue
            B[m, mp] = B[mp, m] = a * radial_int[m, mp]
    return B


def build_B_cosine(basis: SpectralBasis) -> np.ndarray:
    """Field matrix of the lowest cosine profile on a reflecting interval:
    exactly off-diagonal, 1/(eps_m eps_m')."""
    d = basis.domain
    if d.kind != "interval" or d.h != 0.0:
        raise ValidationError("cosine field matrix needs a reflecting interval")
    M = basis.size
    B = np.zeros((M, M))
    eps = np.where(np.arange(M) == 0, 1.0, math.sqrt(2.0))
    for m in range(M - 1):
        B[m, m + 1] = B[m + 1, m] = 1.0 / (eps[m] * eps[m + 1])
    return B


def build_B_surface(basis: SpectralBasis) -> np.ndarray:
    """Boundary-value matrix: integral of u_m u_m' over the boundary."""
    d = basis.domain
    if d.h != 0.0:
        raise ValidationError("surface matrix is defined on the reflecting basis")
    M = basis.size
    Bs = np.zeros((M, M))
    if d.kind == "interval":
        v0 = np.array([basis.radial(m, np.array([0.0]))[0] for m in range(M)])
        v1 = np.array([basis.radial(m, np.array([1.0]))[0] for m in range(M)])
        return np.outer(v0, v0) + np.outer(v1, v1)
    v1 = np.array([basis.radial(m, np.array([1.0]))[0] for m in range(M)])
    same = basis.order[:, None] == basis.order[None, :]
    Bs = np.where(same, np.outer(v1, v1), 0.0)
    if d.kind.endswith("layer"):
        R = d.inner_radius
        vR = np.array([basis.radial(m, np.array([R]))[0] for m in range(M)])
        Bs = Bs + np.where(same, np.outer(vR, vR) * R ** (d.ndim - 1), 0.0)
    return Bs


def build_B_indicator(basis: SpectralBasis, region: tuple) -> np.ndarray:
    """Occupation matrix of a coordinate-aligned region.

    ``region`` is ("interval", x0, x1) on the interval or
    ("annulus"/"shell", r0, r1) on the radial domains.
    """
    d = basis.domain
    kind, lo, hi = region
    expected = {"interval": "interval", "disk": "annulus",
                "circular_layer": "annulus", "sphere": "shell",
                "spherical_layer": "shell"}[d.kind]
    if kind != expected:
        raise ValidationError(
            f"region kind {kind!r} unsupported on {d.kind}; use {expected!r}")
    inner = d.inner_radius if d.kind.endswith("layer") else 0.0
    if not (inner <= lo <= hi <= 1.0):
        raise ValidationError("region must lie inside the domain")
    if lo == hi:
        return np.zeros((basis.size, basis.size))
    nq = max(200, int(4 * float(basis.root.max() if basis.size else 1)) + 32)
    x, w = np.polynomial.legendre.leggauss(nq)
    nodes = 0.5 * (x + 1.0) * (hi - lo) + lo
    wts = 0.5 * (hi - lo) * w
    meas = wts if d.kind == "interval" else wts * nodes ** (d.ndim - 1)
    rad = basis.radial_matrix(nodes)
    B = (rad * meas) @ rad.T
    if d.kind == "interval":
        return B
    same = basis.order[:, None] == basis.order[None, :]
    return np.where(same, B, 0.0)


def uniform_vectors(basis: SpectralBasis) -> np.ndarray:
    """Components of a uniform density (and pickup) in the eigenbasis."""
    d = basis.domain
    M = basis.size
    if d.h == 0.0:
        U = np.zeros(M)
        U[int(np.argmin(basis.lam))] = 1.0
        return U
    rad = basis.radial_matrix(basis.nodes)
    radial_int = rad @ basis.weights
    ang = {1: 1.0, 2: math.sqrt(2 * math.pi), 3: math.sqrt(4 * math.pi)}[d.ndim]
    U = np.where(basis.order == 0, ang * radial_int, 0.0)
    return U / math.sqrt(d.volume)


def governing_matrices(basis: SpectralBasis, kind: str = "linear",
                       region: tuple | None = None,
                       with_surface: bool = False) -> GoverningMatrices:
    if kind == "linear":
        B = build_B_linear(basis)
    elif kind == "cosine":
        B = build_B_cosine(basis)
    elif kind == "indicator":
        if region is None:
            raise ValidationError("indicator matrices need a region")
        B = build_B_indicator(basis, region)
    elif kind == "surface":
        B = build_B_surface(basis)
    else:
        raise ValidationError(f"unknown field kind {kind!r}")
    Bs = build_B_surface(basis) if (with_surface and basis.domain.h == 0.0) else None
    U = uniform_vectors(basis)
    return GoverningMatrices(basis.lam.copy(), B, Bs, U, U.copy(), basis.size)


# ----------------------------------------------------------------------
# Signals, moments, residence times
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class SignalResult:
    signal: complex
    attenuation: float
    phase: float
    p: float
    q: float
    truncation: int


def _apply_exp_neg(A: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """exp(-A) @ vec; spectral route for stiff segments.

    Scaling-and-squaring loses accuracy when the exponent mixes a huge
    diagonal decay range with a strong skew part (deep-attenuation
    regime), so large-norm segments go through the eigendecomposition of
    the complex-symmetric exponent instead.
    """
    scale = float(np.max(np.abs(A.diagonal()))) + float(np.max(np.abs(A.imag)))
    if scale < 50.0:
        return expm(-A) @ vec
    w, V = np.linalg.eig(A)
    return V @ (np.exp(-w) * np.linalg.solve(V, vec))


def _segment_product_apply(vec, lam, B, profile, p, q, surface_term=None,
                           hs_p: float = 0.0):
    """Left-multiply ``vec`` by the product of segment exponentials."""
    t = profile.duration
    out = vec.astype(complex)
    for kseg in range(profile.values.size):
        frac = profile.widths[kseg] / t
        A = np.diag(p * frac * lam).astype(complex)
        A += 1j * (q * frac * profile.values[kseg]) * B
        if surface_term is not None and hs_p != 0.0:
            A += (hs_p * frac) * surface_term
        out = _apply_exp_neg(A, out)
    return out


class SpectralModel:
    """Cached bases and matrices for one domain; entry point for signal,
    diffusion-coefficient, moment and residence-time evaluations."""

    def __init__(self, domain: SpectralDomain):
        self.domain = domain
        self._bases: dict[int, SpectralBasis] = {}
        self._mats: dict[tuple, GoverningMatrices] = {}

    def basis(self, size: int) -> SpectralBasis:
        if size not in self._bases:
            self._bases[size] = build_basis(self.domain, size)
        return self._bases[size]

    def matrices(self, size: int, kind: str = "linear",
                 region: tuple | None = None,
                 with_surface: bool = False) -> GoverningMatrices:
        key = (size, kind, region, with_surface)
        if key not in self._mats:
            self._mats[key] = governing_matrices(self.basis(size), kind,
                                                 region, with_surface)
        return self._mats[key]

    def gradient_ladder(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        if not hasattr(self, "_ladders"):
            self._ladders = {}
        if count not in self._ladders:
            self._ladders[count] = gradient_mode_weights(self.domain, count)
        return self._ladders[count]


def evaluate_signal(model: SpectralModel, profile: TemporalProfile,
                    p: float, q: float, field: str = "linear",
                    surface_relaxation: float = 0.0,
                    m_init: int = 24, m_max: int = 1024,
                    tol: float = 1e-8) -> SignalResult:
    """Macroscopic signal for the profile at p = D t / L^2, q = gamma beta t.

    The truncation doubles until the attenuation moves by less than
    ``tol``; failure to stabilize raises with the last two estimates.
    ``surface_relaxation`` adds the boundary relaxation term h_s * p * Bs
    on a reflecting basis.
    """
    if p < 0:
        raise ValidationError("p must be >= 0")
    prev = None
    m = m_init
    while m <= m_max:
        mats = model.matrices(m, field, with_surface=surface_relaxation != 0.0)
        vec = _segment_product_apply(mats.Ut, mats.lam, mats.B, profile, p, q,
                                     surface_term=mats.Bs,
                                     hs_p=surface_relaxation * p)
        e = complex(mats.U @ vec)
        if prev is not None and abs(e - prev) < tol * max(1.0, abs(e)):
            return SignalResult(e, abs(e), math.atan2(e.imag, e.real), p, q, m)
        prev = e
        m *= 2
    raise ConvergenceError(
        f"signal truncation did not stabilize: E({m // 4})={prev}, last={e}")


def cpmg_echoes(model: SpectralModel, n_echoes: int, p: float, q: float,
                m_size: int = 64) -> np.ndarray:
    """Echo amplitudes of an alternating-pair sequence: the k-th echo is
    the k-th power of the conjugate exponential pair."""
    mats = model.matrices(m_size, "linear")
    t_frac = 1.0 / (2 * n_echoes)
    A = np.diag(p * t_frac * mats.lam).astype(complex) + 1j * (q * t_frac) * mats.B
    Ep = expm(-A)
    Em = expm(-A.conj())
    pair = Ep @ Em
    out = np.empty(n_echoes, dtype=complex)
    vec = mats.Ut.astype(complex)
    for k in range(n_echoes):
        vec = pair @ vec
        out[k] = mats.U @ vec
    return out


def gradient_mode_weights(domain: SpectralDomain, count: int
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and weights lam * B0m^2 of the gradient-coupled sector.

    Only one angular ladder couples the ground mode to a linear gradient
    (order 1 on radial domains, the full mode set on the interval), so
    the diffusion-coefficient sum runs over this ladder alone.  Weights
    sum to 1 over the infinite ladder.
    """
    if domain.h != 0.0:
        raise ValidationError("gradient mode weights assume no surface relaxation")
    if domain.kind == "interval":
        m = np.arange(1, 2 * count, 2, dtype=float)[:count]
        lam = math.pi ** 2 * m ** 2
        return lam, 8.0 / (math.pi ** 2 * m ** 2)
    if domain.kind == "disk":
        from scipy.special import jnp_zeros
        lam = jnp_zeros(1, count) ** 2
        return lam, 2.0 / (lam - 1.0)
    roots = find_roots(domain, 1, count)
    roots = roots[roots > 0][:count]
    lam = roots ** 2
    lo = domain.inner_radius if domain.kind.endswith("layer") else 0.0
    zmax = float(roots.max())
    from scipy.special import roots_legendre
    nq = max(200, min(int(4 * zmax) + 32, 20000))
    x, w = roots_legendre(nq)
    nodes = 0.5 * (x + 1.0) * (1.0 - lo) + lo
    wts = 0.5 * (1.0 - lo) * w
    d = domain.ndim
    meas = wts * nodes ** (d - 1)
    v0 = np.full(nodes.size, 1.0 / math.sqrt(float(np.sum(meas))))
    helper = SpectralBasis(domain, roots.size, lam,
                           np.ones(roots.size, dtype=int), roots,
                           np.ones(roots.size), _nodes=nodes, _weights=meas)
    a = _angular_gradient_factor(domain.kind, 0, 1)
    weights = np.empty(roots.size)
    for kk in range(roots.size):
        raw = helper.radial_raw(1, float(roots[kk]), nodes)
        nrm = math.sqrt(float(np.sum(raw * raw * meas)))
        integral = float(np.sum(v0 * nodes * (raw / nrm) * meas))
        weights[kk] = lam[kk] * (a * integral) ** 2
    return lam, weights


def time_dependent_diffusion(model: SpectralModel, profile: TemporalProfile,
                             p: float, k_max: int = 2048,
                             tol: float = 1e-6) -> float:
    """Normalized diffusion coefficient D(t)/D for a refocused profile.

    Weighted sum over the gradient-coupled ladder: sum w_m wf(p lam_m)
    with the temporal weight wf evaluated in closed form per segment
    pair.  Past the exact ladder the weights follow their asymptotic
    c/lam law, so the sum is continued on a synthetic arithmetic ladder
    until the temporal weight has decayed; the final remainder must fall
    below ``tol`` or the evaluation fails loudly.
    """
    if not profile.is_refocused():
        raise ValidationError(
            "diffusion-coefficient extraction needs a refocused profile "
            "(zero net gradient area)")
    if p <= 0:
        raise ValidationError("p must be positive")
    den0 = bracket_power(profile, 1.0)
    if den0 == 0.0:
        raise ValidationError("degenerate profile normalization")
    t = profile.duration

    def wf_of(rates):
        return bracket_exp(profile, rates) / (-rates * den0)

    k = 64
    while True:
        lam, wgt = model.gradient_ladder(k)
        if p * lam[-1] > 2000.0 or k >= k_max:
            break
        k *= 2
    val = float(np.sum(wgt * wf_of(p * lam / t)))
    z = np.sqrt(lam)
    spacing = float(np.mean(np.diff(z[-6:])))
    # coefficient model c(z) = A + Bc/z^2 of the weight ladder w = c/z^2
    ztail = z[-8:]
    ctail = (wgt * lam)[-8:]
    design = np.vstack([np.ones(8), 1.0 / ztail ** 2]).T
    (A, Bc), *_ = np.linalg.lstsq(design, ctail, rcond=None)
    z_end = z[-1]
    if p * lam[-1] <= 2000.0:
        z_need = math.sqrt(2000.0 / p)
        n_ext = min(int((z_need - z_end) / spacing) + 1, 400000)
        if n_ext > 0:
            zx = z_end + spacing * np.arange(1, n_ext + 1)
            cw = (A + Bc / zx ** 2) / zx ** 2
            val += float(np.sum(cw * wf_of(p * zx ** 2 / t)))
            z_end = float(zx[-1])
    wf_end = float(wf_of(np.array([p * z_end ** 2 / t]))[0])
    remainder = (abs(A) * float(polygamma(1, z_end / spacing + 1.0))
                 / spacing ** 2 * abs(wf_end))
    if remainder > tol * max(abs(val), 1e-3):
        raise ConvergenceError(
            f"diffusion-coefficient tail {remainder:.2e} above tolerance")
    return val


def _ladder_tail(z: np.ndarray, coef: np.ndarray) -> float:
    """Remainder of sum coef_k / z_k^2 continued past the computed ladder.

    The roots approach an arithmetic ladder and the coefficients settle
    onto per-residue-class levels (period 1 or 2) with a 1/z^2 drift;
    each class tail is a polygamma sum of A/z^2 + B/z^4.
    """
    if z.size < 6 or np.max(coef) <= 0:
        return 0.0
    idx = np.argsort(z)
    z = z[idx]
    coef = coef[idx]
    cmax = float(np.max(coef[-8:]))
    if cmax < 1e-13 or coef[-1] + coef[-2] <= 0.05 * cmax:
        return 0.0
    nt = min(7, z.size - 1)
    spacing = float(np.mean(np.diff(z[-nt:])))
    period = 1
    if z.size >= 10:
        c_tail = coef[-8:]
        var1 = float(np.var(c_tail))
        var2 = float(np.var(c_tail[::2]) + np.var(c_tail[1::2])) / 2.0
        period = 2 if var2 < 0.01 * var1 else 1
    cls_spacing = period * spacing
    tail = 0.0
    for rho in range(period):
        members_c = coef[z.size - 1 - rho:: -period][:6][::-1]
        members_z = z[z.size - 1 - rho:: -period][:6][::-1]
        if members_c.size == 0 or np.all(members_c == 0.0):
            continue
        z_last = float(members_z[-1])
        kidx = z_last / cls_spacing
        t2 = float(polygamma(1, kidx + 1.0)) / cls_spacing ** 2
        if members_c.size >= 4:
            A_mat = np.vstack([np.ones(members_c.size), 1.0 / members_z ** 2]).T
            ab, *_ = np.linalg.lstsq(A_mat, members_c, rcond=None)
            t4 = float(polygamma(3, kidx + 1.0)) / (6.0 * cls_spacing ** 4)
            tail += ab[0] * t2 + ab[1] * t4
        else:
            tail += float(np.mean(members_c)) * t2
    return tail


def gradient_sum_rule(model: SpectralModel, size: int = 256) -> float:
    """sum lam_m B0m^2 (equals 1 for a unit linear gradient at L=1).

    The truncated series is completed with the closed-form ladder tail of
    its 1/lam coefficients.
    """
    mats = model.matrices(size, "linear")
    basis = model.basis(size)
    i0 = int(np.argmin(mats.lam))
    lam = mats.lam
    row = mats.B[i0]
    pos = lam > 0
    total = float(np.sum(lam[pos] * row[pos] ** 2))
    if model.domain.kind == "disk" and model.domain.h == 0.0:
        # ground-row terms are pure eigenvalue functions, 2/(lam - 1) on
        # the order-1 ladder: extend it far with exact roots, finish with
        # the asymptotic arithmetic ladder
        from scipy.special import jnp_zeros
        sel = pos & (basis.order == 1)
        z_have = np.sqrt(lam[sel])
        kmax = 4000
        zs = jnp_zeros(1, kmax)
        zs = zs[zs > z_have.max() + 1e-9]
        total += float(np.sum(2.0 / (zs ** 2 - 1.0)))
        z_end = zs[-1]
        total += 2.0 * float(polygamma(1, z_end / math.pi + 1.0)) / math.pi ** 2
        return total
    # generic: the ground row couples a single angular order; its terms
    # decay as coef/z^2 with coef -> const
    coupled = pos & (row ** 2 > 0)
    if np.any(coupled):
        ncpl = basis.order[coupled]
        n_star = int(np.bincount(ncpl).argmax())
        sel = coupled & (basis.order == n_star)
        zsel = np.sqrt(lam[sel])
        csel = lam[sel] ** 2 * row[sel] ** 2  # term = csel / z^2
        total += _ladder_tail(zsel, csel)
    return total


def _block_generator(A: np.ndarray, B: np.ndarray, order: int) -> np.ndarray:
    M = A.shape[0]
    G = np.zeros(((order + 1) * M, (order + 1) * M))
    for b in range(order + 1):
        G[b * M:(b + 1) * M, b * M:(b + 1) * M] = A
        if b < order:
            G[b * M:(b + 1) * M, (b + 1) * M:(b + 2) * M] = B
    return G


def _ordered_integral_block(lam, B, profile, p, order, window=None):
    """(0, order) block of the product of Van Loan exponentials: the
    ordered integral of exp-weave with ``order`` field insertions.

    ``window`` = (t1, t2) multiplies B by the indicator of that span.
    """
    t = profile.duration
    M = lam.shape[0]
    segs = []
    if window is None:
        for kseg in range(profile.values.size):
            segs.append((profile.widths[kseg] / t, profile.values[kseg]))
    else:
        t1, t2 = window
        if not (0 <= t1 <= t2 <= t):
            raise ValidationError("window must satisfy 0 <= t1 <= t2 <= t")
        cuts = sorted({0.0, t1, t2, t})
        for a, b in zip(cuts[:-1], cuts[1:]):
            if b > a:
                segs.append(((b - a) / t, 1.0 if (a >= t1 and b <= t2) else 0.0))
    prod = np.eye((order + 1) * M)
    for frac, f in segs:
        A = np.diag(p * frac * lam)
        G = _block_generator(-A, f * frac * B, order)
        prod = expm(G) @ prod
    return prod[:M, order * M:]


def moment(model: SpectralModel, profile: TemporalProfile, p: float,
           order: int, field: str = "linear", region: tuple | None = None,
           m_size: int = 48) -> float:
    """Moment of the normalized accumulated field integral, E{phi^n}.

    Evaluated exactly (to matrix-exponential accuracy) via block
    upper-triangular exponentials over the profile segments.
    """
    if not (1 <= order <= 8):
        raise ValidationError("moment order must lie in 1..8")
    mats = model.matrices(m_size, field, region=region)
    blk = _ordered_integral_block(mats.lam, mats.B, profile, p, order)
    val = float(mats.U @ blk @ mats.Ut)
    return math.factorial(order) * val


def second_moment_cosine_exact(profile: TemporalProfile, p: float) -> float:
    """Closed form of E{phi^2/2} for the lowest cosine field on the
    reflecting interval: the squared coupling 1/2 times the ordered
    exponential integral at the first nonzero eigenvalue."""
    t = profile.duration
    return 0.25 * float(bracket_exp(profile, np.array([p * math.pi ** 2 / t]))[0])


def residence_time_cumulants(basis: SpectralBasis, B: np.ndarray
                             ) -> tuple[float, float]:
    """Long-time growth coefficients of the first two cumulants of an
    occupation/boundary functional: (B00, 2 sum_m B0m^2 / lam_m).

    Only order-0 modes couple to the ground row.  The series over the
    computed modes is completed with a closed-form ladder tail: the
    squared coefficients settle onto per-residue-class levels (period 1
    or 2 along the root ladder), so the remainder is a polygamma sum over
    each class.  A non-decaying term pattern raises instead of silently
    truncating.
    """
    d = basis.domain
    if d.h != 0.0:
        raise ValidationError("cumulant coefficients use the reflecting basis")
    i0 = int(np.argmin(basis.lam))
    b11 = float(B[i0, i0])
    lam = basis.lam
    row = B[i0]
    pos = lam > 0
    terms = row[pos] ** 2 / lam[pos]
    partial = float(np.sum(terms))
    if terms.size >= 8:
        recent = terms[np.argsort(lam[pos])][-8:]
        if np.all(recent[1:] >= recent[:-1]) and recent[-1] > 1e-12:
            raise ConvergenceError("cumulant series does not decay")
    # ladder tail over the order-0 modes (the only ones the ground row sees)
    sel = pos & (basis.order == 0)
    partial += _ladder_tail(np.sqrt(lam[sel]), row[sel] ** 2)
    return b11, 2.0 * partial


def windowed_residence_characteristic(model: SpectralModel, q: float,
                                      t1: float, t2: float, t: float,
                                      region: tuple, p_rate: float = 1.0,
                                      m_size: int = 48) -> complex:
    """E{exp(i q phi)} for the occupation time of ``region`` accumulated
    during [t1, t2] out of [0, t]; three matrix exponentials.

    ``p_rate`` is the diffusion coefficient in domain units (D/L^2), so
    exponents use p = p_rate * duration.
    """
    if not (0 <= t1 <= t2 <= t):
        raise ValidationError("need 0 <= t1 <= t2 <= t")
    mats = model.matrices(m_size, "indicator", region=region)
    A1 = np.diag(p_rate * t1 * mats.lam).astype(complex)
    A2 = (np.diag(p_rate * (t2 - t1) * mats.lam).astype(complex)
          - 1j * q * (t2 - t1) * mats.B)
    A3 = np.diag(p_rate * (t - t2) * mats.lam).astype(complex)
    vec = expm(-A3) @ mats.Ut.astype(complex)
    vec = expm(-A2) @ vec
    vec = expm(-A1) @ vec
    return complex(mats.U @ vec)


def windowed_residence_moments(model: SpectralModel, t1: float, t2: float,
                               t: float, region: tuple, p_rate: float = 1.0,
                               orders: int = 2, m_size: int = 48) -> list[float]:
    """Raw moments E{phi^n}, n = 1..orders, of the windowed occupation time."""
    mats = model.matrices(m_size, "indicator", region=region)
    prof = TemporalProfile(np.array([0.0, t]), np.array([1.0]))
    out = []
    for n in range(1, orders + 1):
        blk = _ordered_integral_block(mats.lam, mats.B, prof, p_rate * t, n,
                                      window=(t1, t2))
        val = float(mats.U @ blk @ mats.Ut)
        out.append(math.factorial(n) * (t ** n) * val)
    return out


def gpa_prediction(model: SpectralModel, profile: TemporalProfile,
                   p: float, q: float, m_size: int = 64) -> float:
    """Weak-encoding prediction exp(-q^2 E{phi^2/2}) of the attenuation."""
    mats = model.matrices(m_size, "linear")
    i0 = int(np.argmin(mats.lam))
    lam = mats.lam
    row = mats.B[i0]
    t = profile.duration
    br = bracket_exp(profile, p * lam / t)
    half_m2 = float(np.sum(row ** 2 * br)) / 2.0
    # remove the squared-mean (pure phase) part carried by the ground mode
    half_m2 -= 0.5 * row[i0] ** 2 * (profile.integral() / t) ** 2
    return math.exp(-q * q * half_m2)
