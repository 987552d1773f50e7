"""Real spherical harmonics and the view-direction density they encode.

Basis convention: real, orthonormal on the unit sphere, graphics ordering
(no Condon-Shortley phase), coefficients indexed lexicographically by
(l, m) with m in [-l, l], i.e. index l*l + l + m.  The same evaluator serves
view-dependent color and the per-Gaussian view-density coefficients.

The density encoded by a coefficient vector ``a`` of length (L+1)^2 is

    p(v) = (sum_k a_k Y_k(v))^2 / |a|^2

which is nonnegative, invariant to scaling of ``a`` and integrates to 1 over
the sphere by orthonormality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "ShCoefficients",
    "as_unit_dirs",
    "eval_sh_basis",
    "sh_density",
    "sh_density_grad",
    "kde_oracle",
    "fit_sh_to_dirs",
    "FitDivergence",
]

MAX_DEGREE = 8


class FitDivergence(RuntimeError):
    """Raised when the direction fit produces a non-finite objective."""

    def __init__(self, step: int):
        super().__init__(f"non-finite log-likelihood at step {step}")
        self.step = step


@dataclass
class ShCoefficients:
    """Coefficient vector for a degree-L expansion; len(a) == (L+1)^2."""

    a: np.ndarray
    L: int

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.L < 0 or self.a.shape != ((self.L + 1) ** 2,):
            raise ValueError(f"coefficient length {self.a.shape} does not match degree {self.L}")


def _coeff_array(a):
    return a.a if isinstance(a, ShCoefficients) else a


def as_unit_dirs(v, atol: float = 0.01):
    """Validate and normalize direction(s); shape [3] or [N, 3].

    Norms within ``1 +- atol`` are renormalized, anything else is rejected.
    """
    istorch = isinstance(v, torch.Tensor)
    if not istorch:
        v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 3:
        raise ValueError("directions must have a trailing dimension of 3")
    n = (v * v).sum(-1) ** 0.5
    bad = (n < 1.0 - atol) | (n > 1.0 + atol)
    if bool(bad.any()):
        raise ValueError("direction norm outside [0.99, 1.01]")
    return v / n[..., None]


def _dispatch(v):
    if isinstance(v, torch.Tensor):
        return torch.stack, v
    return np.stack, np.asarray(v, dtype=np.float64)


def eval_sh_basis(L: int, v) -> "np.ndarray | torch.Tensor":
    """Real orthonormal SH basis values Y_k(v), k = 0..(L+1)^2-1.

    Accepts numpy or torch input of shape [3] or [N, 3]; returns the matching
    backend with shape [..., (L+1)^2].  Differentiable in v for torch inputs.

    Evaluation uses the hemispherically stable split P_l^m = rho^m * W_l^m(z)
    with the azimuth factors rho^m cos(m phi), rho^m sin(m phi) generated by
    the polynomial recurrence in (x, y), so no angles are ever extracted.
    """
    if not (0 <= L <= MAX_DEGREE):
        raise ValueError(f"degree must be in [0, {MAX_DEGREE}], got {L}")
    stack, v = _dispatch(v)
    v = as_unit_dirs(v)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    one = x * 0 + 1.0

    # A[m] = rho^m cos(m phi), B[m] = rho^m sin(m phi) as polynomials in x, y.
    A = [one]
    B = [x * 0]
    for m in range(1, L + 1):
        A.append(x * A[m - 1] - y * B[m - 1])
        B.append(x * B[m - 1] + y * A[m - 1])

    # W[m][l] = P_l^m(z) / rho^m (polynomial in z, no Condon-Shortley phase).
    W = {}
    for m in range(0, L + 1):
        W[(m, m)] = one * float(_double_factorial(2 * m - 1))
        if m + 1 <= L:
            W[(m + 1, m)] = (2 * m + 1) * z * W[(m, m)]
        for l in range(m + 2, L + 1):
            W[(l, m)] = ((2 * l - 1) * z * W[(l - 1, m)] - (l - 1 + m) * W[(l - 2, m)]) / (l - m)

    cols = []
    for l in range(L + 1):
        for m in range(-l, l + 1):
            am = abs(m)
            n = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - am) / math.factorial(l + am))
            if m == 0:
                cols.append(n * W[(l, 0)])
            elif m > 0:
                cols.append(math.sqrt(2.0) * n * W[(l, m)] * A[m])
            else:
                cols.append(math.sqrt(2.0) * n * W[(l, am)] * B[am])
    return stack(cols, -1)


def _double_factorial(n: int) -> int:
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


def sh_density(a, v):
    """p(v) = (a . Y(v))^2 / |a|^2 for coefficients ``a`` (array or ShCoefficients)."""
    arr = _coeff_array(a)
    L = int(round(math.sqrt(arr.shape[-1]))) - 1
    nrm2 = (arr * arr).sum(-1)
    if float(nrm2 if np.isscalar(nrm2) or getattr(nrm2, "ndim", 0) == 0 else nrm2.min()) <= 0.0:
        raise ValueError("density undefined for zero coefficient vector")
    Y = eval_sh_basis(L, v)
    s = (Y * arr).sum(-1) if not isinstance(Y, torch.Tensor) else (Y * torch.as_tensor(arr, dtype=Y.dtype)).sum(-1)
    return s * s / nrm2


def sh_density_grad(a, v):
    """d p / d a at (a, v):  2 S Y / |a|^2 - 2 S^2 a / |a|^4,  S = a . Y(v).

    Returns an array shaped like broadcast(v_batch, a): [..., (L+1)^2].
    """
    arr = np.asarray(_coeff_array(a), dtype=np.float64)
    L = int(round(math.sqrt(arr.shape[-1]))) - 1
    nrm2 = float(arr @ arr)
    if nrm2 <= 0.0:
        raise ValueError("density undefined for zero coefficient vector")
    Y = np.asarray(eval_sh_basis(L, np.asarray(v, dtype=np.float64)))
    s = Y @ arr
    return 2.0 * s[..., None] * Y / nrm2 - 2.0 * (s * s)[..., None] * arr / (nrm2 * nrm2)


def _kernel_values(kernel, cos):
    kind, param = kernel
    if kind == "vmf":
        kappa = float(param)
        # kappa / (4 pi sinh kappa) * exp(kappa cos), evaluated in log space so
        # large kappa does not overflow.
        return kappa / (2.0 * math.pi) * np.exp(kappa * (cos - 1.0)) / (1.0 - math.exp(-2.0 * kappa))
    if kind == "cospow":
        k = float(param)
        return (k + 1.0) / (2.0 * math.pi) * np.clip(cos, 0.0, None) ** k
    raise ValueError(f"unknown kernel {kind!r}")


def kde_oracle(dirs, kernel, v):
    """Empirical mixture density (1/N) sum_i K(v, d_i) on the sphere.

    ``kernel`` is ("vmf", kappa) or ("cospow", k); each K(., d_i) integrates
    to 1 over the sphere.  ``v`` may be a single direction or a batch.
    """
    dirs = np.atleast_2d(np.asarray(as_unit_dirs(np.asarray(dirs, dtype=np.float64))))
    if dirs.shape[0] == 0:
        raise ValueError("empty direction set")
    q = np.asarray(as_unit_dirs(np.asarray(v, dtype=np.float64)))
    single = q.ndim == 1
    cos = np.atleast_2d(q) @ dirs.T
    out = _kernel_values(kernel, cos).mean(axis=-1)
    return float(out[0]) if single else out


def fit_sh_to_dirs(dirs, L: int, steps: int = 1500, lr: float = 0.2) -> ShCoefficients:
    """Maximum-likelihood fit of the density to observed directions.

    Gradient ascent on the mean log density, starting from the DC vector e_0;
    the coefficient vector is renormalized to unit length every step (the
    density is scale invariant).  Densities are floored at 1e-12 inside the
    log purely as a numerical guard.
    """
    dirs = np.atleast_2d(np.asarray(as_unit_dirs(np.asarray(dirs, dtype=np.float64))))
    if dirs.shape[0] == 0:
        raise ValueError("empty direction set")
    Y = np.asarray(eval_sh_basis(L, dirs))
    k = (L + 1) ** 2
    a = np.zeros(k, dtype=np.float64)
    a[0] = 1.0
    for step in range(steps):
        s = Y @ a
        p = s * s  # |a| == 1 throughout
        loss = np.log(np.maximum(p, 1e-12)).mean()
        if not np.isfinite(loss):
            raise FitDivergence(step)
        grad_p = 2.0 * s[:, None] * Y - 2.0 * p[:, None] * a[None, :]
        grad = (grad_p / np.maximum(p, 1e-12)[:, None]).mean(axis=0)
        a = a + lr * grad
        a /= np.linalg.norm(a)
    return ShCoefficients(a, L)
