"""Invertible transform blocks with log-determinants.

Blocks map base-side points to target-side points (``forward``) and back
(``inverse``); a :class:`FlowChain` composes them over a standard-normal
base, giving densities via the change-of-variables sum of log-determinants
and reparametrized samples via the forward pass.

Block math is written against the polymorphic helpers in
:mod:`flowreco.autodiff`, so every block runs on tape Vars (trainable) and
on plain ndarrays (fast evaluation). Where a direction has no closed form
(kernel-mixture inverses, convex Moebius inverses, the radial sphere map
for d >= 3) a safeguarded bisection solves it; on tape the solution is
re-inserted through the implicit-function correction, which keeps it
differentiable.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .special import (
    ConvergenceError,
    DomainError,
    RootBracket,
    erf_inv,
    gauss_2f1,
    reg_upper_gamma,
    solve_monotone,
    sphere_surface_area,
)
from scipy import special as _sp

_LOG_2PI = math.log(2.0 * math.pi)
_TWO_PI = 2.0 * math.pi
_CDF_CLAMP = 1e-13
_ERFINV_EDGE = math.sqrt(2.0) * float(_sp.erfinv(1.0 - 2.0 * _CDF_CLAMP))


def _slice_cols(x, a: int, b: int):
    if ad.is_var(x):
        return ad.gather(x, np.arange(a, b), axis=1)
    return x[:, a:b]


def _bisect_batch(f, lo: np.ndarray, hi: np.ndarray, n_iter: int = 90) -> np.ndarray:
    """Vectorized bisection for elementwise-monotone increasing f."""
    lo = lo.astype(np.float64).copy()
    hi = hi.astype(np.float64).copy()
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        below = f(mid) < 0.0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    out = 0.5 * (lo + hi)
    if not np.all(np.isfinite(out)):
        raise ConvergenceError("block inversion produced non-finite values")
    return out


def _implicit_root(x_star: np.ndarray, residual_fn, dres_dx: np.ndarray, template):
    """Re-insert a numerically solved root into the tape.

    ``residual_fn(x)`` must vanish at ``x_star`` and be built from tape Vars
    where gradients should flow; the returned Var equals ``x_star`` in value
    and carries the implicit-function derivatives.
    """
    if not ad.is_var(template):
        return x_star
    tape = template.tape
    x_const = tape.constant(x_star)
    res = residual_fn(x_const)
    return x_const - res / tape.constant(dres_dx)


# -- blocks -------------------------------------------------------------------

class AffineBlock:
    """x = mu + exp(log_sigma) * z with a single scaling parameter.

    ``fixed_sigma`` pins sigma to 1, which turns the induced density into
    the unit-variance Gaussian of the mean-squared-error loss.
    """

    kind = "affine"

    def __init__(self, dim: int, fixed_sigma: bool = False):
        self.dim = dim
        self.fixed_sigma = fixed_sigma

    @property
    def param_count(self) -> int:
        return self.dim + (0 if self.fixed_sigma else 1)

    def _mu_logsig(self, params):
        mu = _slice_cols(params, 0, self.dim)
        if self.fixed_sigma:
            return mu, None
        return mu, _slice_cols(params, self.dim, self.dim + 1)

    def forward(self, params, z):
        mu, logsig = self._mu_logsig(params)
        if logsig is None:
            return z + mu, ad.asum(z * 0.0, axis=1)
        x = mu + ad.exp(logsig) * z
        ld = ad.asum(logsig, axis=1) * float(self.dim)
        return x, ld

    def inverse(self, params, x):
        mu, logsig = self._mu_logsig(params)
        if logsig is None:
            z = x - mu
            ld = ad.asum(z * 0.0, axis=1)
            return z, ld
        z = (x - mu) * ad.exp(-1.0 * logsig)
        ld = ad.asum(logsig, axis=1) * float(-self.dim)
        return z, ld

    def spec(self):
        return {"kind": "affine", "dim": self.dim, "fixed_sigma": self.fixed_sigma}


class GaussianizationBlock:
    """Per-dimension monotone kernel-CDF map composed with a reflection.

    The normalizing direction sends a target coordinate x through the CDF of
    a logistic mixture and the probit, u = Phi^-1(sum_k w_k sigma((x - mu_k)
    / s_k)); a Householder reflection then mixes dimensions. The generative
    direction inverts the per-dimension map by bisection.
    """

    kind = "gf"

    def __init__(self, dim: int, kernels: int = 5):
        self.dim = dim
        self.kernels = kernels

    @property
    def param_count(self) -> int:
        n, k = self.dim, self.kernels
        return 3 * n * k + (n if n > 1 else 0)

    def _kernel_params(self, params):
        n, k = self.dim, self.kernels
        logits = ad.reshape(_slice_cols(params, 0, n * k), (-1, n, k))
        mu = ad.reshape(_slice_cols(params, n * k, 2 * n * k), (-1, n, k))
        log_s = ad.reshape(_slice_cols(params, 2 * n * k, 3 * n * k), (-1, n, k))
        w = ad.softmax(logits, axis=-1)
        s = ad.exp(ad.tanh(log_s * 0.25) * 4.0)  # widths soft-bounded to e^+-4
        return w, mu, s

    def _householder(self, params, vec):
        if self.dim == 1:
            return vec
        n, k = self.dim, self.kernels
        v = _slice_cols(params, 3 * n * k, 3 * n * k + n)
        e1 = np.zeros(n)
        e1[0] = 1.0
        v = v + e1  # bias away from the zero vector; any v gives a reflection
        vv = ad.asum(ad.square(v), axis=1, keepdims=True) + 1e-12
        vu = ad.asum(v * vec, axis=1, keepdims=True)
        return vec - v * (2.0 * vu / vv)

    def _to_base_per_dim(self, params, x):
        """(u, log |du/dx|) per dimension; both (B, dim)."""
        w, mu, s = self._kernel_params(params)
        xe = ad.reshape(x, (-1, self.dim, 1))
        t = (xe - mu) / s
        sig = ad.sigmoid(t)
        cdf = ad.asum(w * sig, axis=2)
        pdf = ad.asum(w * sig * (1.0 - sig) / s, axis=2)
        cdf = ad.clip(cdf, _CDF_CLAMP, 1.0 - _CDF_CLAMP)
        u = ad.erfinv(2.0 * cdf - 1.0) * math.sqrt(2.0)
        # d/dx Phi^-1(F(x)) = F'(x) / phi(u)
        log_phi = -0.5 * ad.square(u) - 0.5 * _LOG_2PI
        ld = ad.log(pdf + 1e-300) - log_phi
        return u, ld

    def inverse(self, params, x):
        u, ld = self._to_base_per_dim(params, x)
        z = self._householder(params, u)
        return z, ad.asum(ld, axis=1)

    def forward(self, params, z):
        u = self._householder(params, z)  # reflections are involutions
        u_vals = np.clip(ad.value_of(u), -_ERFINV_EDGE + 1e-3, _ERFINV_EDGE - 1e-3)
        w, mu, s = (ad.value_of(v) for v in self._kernel_params(params))
        if w.shape[0] == 1 and u_vals.shape[0] != 1:
            w, mu, s = (np.broadcast_to(a, (u_vals.shape[0],) + a.shape[1:]) for a in (w, mu, s))

        def g_of(xv):
            t = (xv[:, :, None] - mu) / s
            sig = 1.0 / (1.0 + np.exp(-t))
            cdf = np.clip((w * sig).sum(axis=2), _CDF_CLAMP, 1.0 - _CDF_CLAMP)
            return math.sqrt(2.0) * _sp.erfinv(2.0 * cdf - 1.0)

        pad = 40.0 * s.max(axis=2)
        lo = (mu - 40.0 * s).min(axis=2) - pad
        hi = (mu + 40.0 * s).max(axis=2) + pad
        x_star = _bisect_batch(lambda xv: g_of(xv) - u_vals, lo, hi)

        if ad.is_var(u):
            tape = u.tape
            u_clipped = ad.clip(u, -_ERFINV_EDGE + 1e-3, _ERFINV_EDGE - 1e-3)

            def residual(x_const):
                g, _ = self._to_base_per_dim(params, x_const)
                return g - u_clipped

            _, ld_star = self._to_base_per_dim(params, tape.constant(x_star))
            gprime = np.exp(ad.value_of(ld_star))
            x = _implicit_root(x_star, residual, gprime, u)
        else:
            x = x_star
        _, ld = self._to_base_per_dim(params, x)
        return x, -1.0 * ad.asum(ld, axis=1)

    def spec(self):
        return {"kind": "gf", "dim": self.dim, "kernels": self.kernels}


class CircleFlatBlock:
    """1-d standard normal to the flat distribution on the circle.

    alpha = pi * (1 - erf(z / sqrt(2))) maps the real line monotonically
    onto (0, 2*pi); the image of a unit Gaussian is uniform, so the block's
    density bookkeeping is exact for any circle flow stacked on top.
    """

    kind = "circle_flat"
    dim = 1
    param_count = 0

    def forward(self, params, z):
        alpha = (1.0 - ad.erf(z * (1.0 / math.sqrt(2.0)))) * math.pi
        ld = ad.asum(0.5 * _LOG_2PI - 0.5 * ad.square(z), axis=1)
        return alpha, ld

    def inverse(self, params, x):
        arg = ad.clip(1.0 - x * (1.0 / math.pi), -1.0 + 1e-15, 1.0 - 1e-15)
        z = ad.erfinv(arg) * math.sqrt(2.0)
        ld = -1.0 * ad.asum(0.5 * _LOG_2PI - 0.5 * ad.square(z), axis=1)
        return z, ld

    def spec(self):
        return {"kind": "circle_flat"}


class MoebiusBlock:
    """Convex combination of disk Moebius maps acting on circle angles.

    Each center inside the unit disk induces a monotone degree-1 circle map;
    their convex combination (anchored to fix angle zero) plus a learned
    rotation is again a monotone bijection of [0, 2*pi). Centers are kept
    at radius < 0.99 by a radial squash.
    """

    kind = "moebius"
    dim = 1

    def __init__(self, kernels: int = 8):
        self.kernels = kernels

    @property
    def param_count(self) -> int:
        return 3 * self.kernels + 1

    def _params(self, params):
        k = self.kernels
        raw = ad.reshape(_slice_cols(params, 0, 2 * k), (-1, k, 2))
        logits = _slice_cols(params, 2 * k, 3 * k)
        rot = _slice_cols(params, 3 * k, 3 * k + 1)
        w = ad.softmax(logits, axis=-1)
        r = ad.sqrt(ad.asum(ad.square(raw), axis=2, keepdims=True) + 1e-24)
        centers = raw * (ad.tanh(r) / r * 0.99)
        return centers, w, rot

    def _center_angles(self, centers, alpha):
        """Angle images of exp(i alpha) under each center map; (B, K)."""
        cxk = ad.reshape(ad.cos(alpha), (-1, 1))
        sxk = ad.reshape(ad.sin(alpha), (-1, 1))
        ocx = _gather_last(centers, 0) if ad.is_var(centers) else centers[:, :, 0]
        ocy = _gather_last(centers, 1) if ad.is_var(centers) else centers[:, :, 1]
        dx = cxk - ocx
        dy = sxk - ocy
        dist2 = ad.square(dx) + ad.square(dy) + 1e-300
        nrm2 = ad.square(ocx) + ad.square(ocy)
        scale = (1.0 - nrm2) / dist2
        yx = scale * dx - ocx
        yy = scale * dy - ocy
        return ad.atan2(yy, yx)

    def _lifted(self, params_tuple, alpha):
        """Anchored monotone map m: [0, 2*pi) -> [0, 2*pi) with m(0) = 0."""
        centers, w, _ = params_tuple
        theta = self._center_angles(centers, alpha)
        zeros = ad.value_of(alpha) * 0.0
        theta0 = self._center_angles(centers, zeros if not ad.is_var(alpha) else alpha.tape.constant(zeros))
        beta = ad.mod2pi(theta - theta0)
        return ad.asum(w * beta, axis=1)

    def _derivative(self, params_tuple, alpha):
        centers, w, _ = params_tuple
        cxk = ad.reshape(ad.cos(alpha), (-1, 1))
        sxk = ad.reshape(ad.sin(alpha), (-1, 1))
        ocx = centers[:, :, 0] if not ad.is_var(centers) else _gather_last(centers, 0)
        ocy = centers[:, :, 1] if not ad.is_var(centers) else _gather_last(centers, 1)
        dist2 = ad.square(cxk - ocx) + ad.square(sxk - ocy)
        nrm2 = ad.square(ocx) + ad.square(ocy)
        return ad.asum(w * (1.0 - nrm2) / dist2, axis=1)

    def forward(self, params, z):
        pt = self._params(params)
        alpha = ad.reshape(z, (-1,))
        m = self._lifted(pt, alpha)
        rot = ad.reshape(pt[2], (-1,))
        out = ad.mod2pi(m + rot)
        ld = ad.log(self._derivative(pt, alpha))
        return ad.reshape(out, (-1, 1)), ld

    def inverse(self, params, x):
        pt = self._params(params)
        alpha_out = ad.reshape(x, (-1,))
        rot = ad.reshape(pt[2], (-1,))
        target = ad.mod2pi(alpha_out - rot)
        t_vals = ad.value_of(target)
        vals = tuple(ad.value_of(p) for p in pt)
        B = t_vals.shape[0]
        if vals[0].shape[0] == 1 and B != 1:
            vals = tuple(np.broadcast_to(v, (B,) + v.shape[1:]) for v in vals)

        def m_vals(a):
            return self._lifted(vals, a)

        lo = np.zeros(B)
        hi = np.full(B, _TWO_PI - 1e-12)
        a_star = _bisect_batch(lambda a: m_vals(a) - t_vals, lo, hi)
        if ad.is_var(x):
            def residual(a_const):
                return self._lifted(pt, a_const) - target

            dm = self._lifted_derivative_values(vals, a_star)
            alpha = _implicit_root(a_star, residual, dm, x)
        else:
            alpha = a_star
        ld = -1.0 * ad.log(self._derivative(pt, alpha))
        return ad.reshape(alpha, (-1, 1)), ld

    def _lifted_derivative_values(self, vals, a):
        return ad.value_of(self._derivative(vals, a))

    def spec(self):
        return {"kind": "moebius", "kernels": self.kernels}


def _gather_last(x, idx: int):
    """x[:, :, idx] for a Var of shape (B, K, 2)."""
    b, k, two = x.shape
    flat = ad.reshape(x, (-1, k * two))
    cols = np.arange(k) * two + idx
    return ad.gather(flat, cols, axis=1)


_BLOCK_KINDS = {
    "affine": lambda spec: AffineBlock(spec["dim"], spec.get("fixed_sigma", False)),
    "gf": lambda spec: GaussianizationBlock(spec["dim"], spec.get("kernels", 5)),
    "circle_flat": lambda spec: CircleFlatBlock(),
    "moebius": lambda spec: MoebiusBlock(spec.get("kernels", 8)),
}


def block_from_spec(spec: dict):
    try:
        return _BLOCK_KINDS[spec["kind"]](spec)
    except KeyError as exc:
        raise ValueError(f"unknown flow block spec {spec!r}") from exc


class FlowChain:
    """Composition of blocks over a standard-normal base of equal dimension."""

    def __init__(self, blocks):
        if not blocks:
            blocks = []
        dims = {b.dim for b in blocks}
        if len(dims) > 1:
            raise ValueError("all blocks in a chain must share a dimension")
        self.blocks = list(blocks)
        self.dim = blocks[0].dim if blocks else None

    @classmethod
    def from_specs(cls, specs, dim=None):
        chain = cls([block_from_spec(s) for s in specs])
        if chain.dim is None:
            chain.dim = dim
        return chain

    @property
    def param_count(self) -> int:
        return sum(b.param_count for b in self.blocks)

    def param_slices(self):
        out = []
        start = 0
        for b in self.blocks:
            out.append((b, start, start + b.param_count))
            start += b.param_count
        return out

    def _block_params(self, params, a, b):
        if a == b:
            return None
        return _slice_cols(params, a, b)

    def transform(self, params, z):
        """Base -> target with the total forward log-determinant."""
        ld_total = None
        x = z
        for block, a, b in self.param_slices():
            x, ld = block.forward(self._block_params(params, a, b), x)
            ld_total = ld if ld_total is None else ld_total + ld
        if ld_total is None:
            ld_total = ad.asum(z * 0.0, axis=1)
        return x, ld_total

    def inverse(self, params, x):
        """Target -> base with the log-determinant of the inverse map."""
        ld_total = None
        z = x
        for block, a, b in reversed(self.param_slices()):
            z, ld = block.inverse(self._block_params(params, a, b), z)
            ld_total = ld if ld_total is None else ld_total + ld
        if ld_total is None:
            ld_total = ad.asum(x * 0.0, axis=1)
        return z, ld_total

    def base_log_prob(self, z):
        dim = self.dim if self.dim is not None else ad.value_of(z).shape[1]
        return -0.5 * float(dim) * _LOG_2PI - 0.5 * ad.asum(ad.square(z), axis=1)

    def log_prob(self, params, x):
        z, ld = self.inverse(params, x)
        return self.base_log_prob(z) + ld

    def sample_from_eps(self, params, eps):
        """Transform base draws; returns (points, their log-probabilities)."""
        x, ld = self.transform(params, eps)
        return x, self.base_log_prob(eps) - ld

    def sample(self, params, rng: np.random.Generator, n: int):
        if n <= 0:
            raise ValueError("n must be > 0")
        dim = self.dim
        eps = rng.standard_normal((n, dim))
        return self.sample_from_eps(params, eps)

    def specs(self):
        return [b.spec() for b in self.blocks]


# -- radial sphere transform ---------------------------------------------------

def _cdf_radial_gauss(d: int, r: float) -> float:
    return 1.0 - reg_upper_gamma(d / 2.0, r * r / 2.0)


def _cdf_radial_flat(d: int, rf: float) -> float:
    if rf <= 0.0:
        return 0.0
    pre = sphere_surface_area(d - 1) * (2.0 * rf) ** d / (sphere_surface_area(d) * d)
    return pre * gauss_2f1(d / 2.0, float(d), d / 2.0 + 1.0, -rf * rf)


def _pdf_radial_flat(d: int, rf: float) -> float:
    return (sphere_surface_area(d - 1) / sphere_surface_area(d)
            * (2.0 / (1.0 + rf * rf)) ** d * rf ** (d - 1))


def rho_tot(d: int, r_g: float, force_general: bool = False) -> float:
    """Radial map from a d-dim standard normal to the flat d-sphere.

    Returns the polar angle in [0, pi]; monotone decreasing in the radius
    (r = 0 maps to pi, r -> inf maps to 0). Closed forms exist for d = 1, 2;
    other dimensions compose the two radial CDFs through a bracketed solve.
    """
    if d < 1:
        raise DomainError("sphere dimension must be >= 1")
    if r_g < 0:
        raise DomainError("radius must be >= 0")
    if not force_general:
        if d == 1:
            # complementary form: exact for large radii where 1 - erf cancels
            return math.pi * float(_sp.erfc(r_g / math.sqrt(2.0)))
        if d == 2:
            arg = 1.0 - 2.0 * math.exp(-r_g * r_g / 2.0)
            return math.acos(min(max(arg, -1.0 + 1e-12), 1.0 - 1e-12)) if abs(arg) < 1.0 else math.acos(np.sign(arg))
    p = _cdf_radial_gauss(d, r_g)
    if p <= 0.0:
        return math.pi
    if p >= 1.0:
        return 0.0
    hi = 1.0
    while _cdf_radial_flat(d, hi) < p:
        hi *= 2.0
        if hi > 1e12:
            raise ConvergenceError("flat radial CDF bracket expansion failed")
    bracket = RootBracket(0.0, hi, -p, _cdf_radial_flat(d, hi) - p)
    rf = solve_monotone(lambda x: _cdf_radial_flat(d, x) - p, bracket, 1e-13,
                        df=lambda x: _pdf_radial_flat(d, x))
    arg = (rf * rf - 1.0) / (rf * rf + 1.0)
    return math.acos(min(max(arg, -1.0 + 1e-15), 1.0 - 1e-15))


def rho_tot_inverse(d: int, theta: float, force_general: bool = False) -> float:
    """Radius whose rho_tot image is the given polar angle in (0, pi)."""
    if d < 1:
        raise DomainError("sphere dimension must be >= 1")
    if not (0.0 < theta < math.pi):
        raise DomainError("theta must lie strictly inside (0, pi)")
    if not force_general:
        if d == 1:
            return math.sqrt(2.0) * float(erf_inv(1.0 - theta / math.pi))
        if d == 2:
            return math.sqrt(-2.0 * math.log((1.0 - math.cos(theta)) / 2.0))
    rf = math.sqrt(2.0 / (1.0 - math.cos(theta)) - 1.0)
    p = _cdf_radial_flat(d, rf)
    p = min(max(p, 1e-300), 1.0 - 1e-16)
    return math.sqrt(2.0 * float(_sp.gammainccinv(d / 2.0, 1.0 - p)))


def sample_uniform_sphere_via_flow(d: int, rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform samples on the d-sphere from d-dim Gaussian draws.

    Column 0 is the polar angle rho_tot(d, |z|) (for d = 1 the full circle
    angle in [0, 2*pi)); remaining columns are the unchanged angular
    coordinates of the Gaussian draw.
    """
    if n <= 0:
        raise ValueError("n must be > 0")
    z = rng.standard_normal((n, d))
    if d == 1:
        alpha = math.pi * _sp.erfc(z[:, 0] / math.sqrt(2.0))
        return alpha.reshape(-1, 1) % _TWO_PI
    r = np.linalg.norm(z, axis=1)
    if d == 2:
        arg = np.clip(1.0 - 2.0 * np.exp(-r * r / 2.0), -1.0, 1.0)
        theta = np.arccos(arg)
    else:
        theta = np.array([rho_tot(d, float(ri)) for ri in r])
    out = np.empty((n, d))
    out[:, 0] = theta
    # plane angular coordinates: polar angles against leading axes, then phi
    for i in range(d - 2):
        tail = np.linalg.norm(z[:, i:], axis=1)
        out[:, 1 + i] = np.arccos(np.clip(z[:, i] / np.maximum(tail, 1e-300), -1.0, 1.0))
    out[:, d - 1] = np.arctan2(z[:, d - 1], z[:, d - 2]) % _TWO_PI
    return out


def sphere_log_prob(chain: FlowChain, points, params=None) -> np.ndarray:
    """Density of a circle chain with respect to the circle's length element."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not chain.blocks or not isinstance(chain.blocks[0], CircleFlatBlock):
        raise ValueError("sphere_log_prob expects a chain starting at the flat circle")
    if params is None:
        params = np.zeros((1, chain.param_count))
    return chain.log_prob(params, points)


def flat_sphere_log_prob(d: int) -> float:
    """Log-density of the uniform law on the d-sphere (area element)."""
    return -math.log(sphere_surface_area(d))
