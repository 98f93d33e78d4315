"""Gaussian-process surrogate with a squared-exponential kernel."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize
from scipy.special import ndtr

MIN_NOISE = 1e-8


class GPError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class Kernel:
    lengthscales: tuple[float, ...] | float = 0.3
    signal_var: float = 1.0
    noise_var: float = 1e-4

    def __post_init__(self):
        if self.signal_var <= 0:
            raise ValueError("signal_var must be > 0")
        object.__setattr__(self, "noise_var", max(float(self.noise_var), MIN_NOISE))
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if np.any(ls <= 0):
            raise ValueError("lengthscales must be > 0")
        object.__setattr__(
            self, "lengthscales", float(ls[0]) if ls.size == 1 and np.ndim(self.lengthscales) == 0 else tuple(ls)
        )

    def ls(self, dim: int) -> np.ndarray:
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if ls.size == 1:
            return np.full(dim, ls[0])
        if ls.size != dim:
            raise ValueError(f"kernel has {ls.size} lengthscales for {dim}-dimensional inputs")
        return ls

    def __call__(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        ls = self.ls(A.shape[1])
        a, b = A / ls, B / ls
        d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
        return self.signal_var * np.exp(-0.5 * np.maximum(d2, 0.0))


@dataclass(frozen=True)
class GPSurrogate:
    X: np.ndarray
    y: np.ndarray
    noise: np.ndarray  # per-observation noise variance
    kernel: Kernel
    prior_mean: float = 0.0
    jitter: float = 0.0
    _chol: np.ndarray | None = field(default=None, repr=False, compare=False)
    _alpha: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def predict(self, Xq) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised posterior mean and variance at the rows of ``Xq``."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        if Xq.shape[1] != self.dim:
            raise ValueError(f"query dimension {Xq.shape[1]} does not match GP dimension {self.dim}")
        prior = np.full(Xq.shape[0], self.kernel.signal_var)
        if self.n == 0:
            return np.full(Xq.shape[0], self.prior_mean), prior
        Ks = self.kernel(self.X, Xq)
        mean = self.prior_mean + Ks.T @ self._alpha
        v = linalg.solve_triangular(self._chol, Ks, lower=True)
        var = prior - (v * v).sum(0)
        return mean, np.maximum(var, 0.0)


def gp_fit(
    X,
    y,
    kernel: Kernel | None = None,
    *,
    noise=None,
    prior_mean: float = 0.0,
    optimize_hyperparams: bool = False,
    max_jitter: float = 1e-2,
) -> GPSurrogate:
    """Condition a zero-mean (or constant ``prior_mean``) GP on observations.

    ``noise`` optionally gives a per-observation noise variance (defaults to
    the kernel's). If the Cholesky factorisation fails, diagonal jitter is
    escalated by decades up to ``max_jitter * signal_var`` before giving up.
    """
    kernel = kernel or Kernel()
    y = np.asarray(y, dtype=float).reshape(-1)
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        X = X.reshape(0, X.shape[1] if X.ndim == 2 else 0)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n, d) with one y per row")
    if not np.all(np.isfinite(y)):
        raise ValueError("observations must be finite")
    noise = np.full(len(y), kernel.noise_var) if noise is None else np.maximum(np.asarray(noise, float), MIN_NOISE)
    if optimize_hyperparams and len(y) >= 2:
        kernel = _optimize_kernel(X, y, noise, kernel, prior_mean)
        noise = np.maximum(noise, kernel.noise_var)
    if len(y) == 0:
        return GPSurrogate(X, y, noise, kernel, prior_mean)

    K = kernel(X, X)
    jitter = 0.0
    while True:
        try:
            L = linalg.cholesky(K + np.diag(noise + jitter), lower=True)
            break
        except linalg.LinAlgError:
            jitter = 1e-10 * kernel.signal_var if jitter == 0 else jitter * 10
            if jitter > max_jitter * kernel.signal_var:
                cond = np.linalg.cond(K + np.diag(noise))
                raise GPError(f"Gram matrix not positive definite (condition estimate {cond:.3e})") from None
    alpha = linalg.cho_solve((L, True), y - prior_mean)
    return GPSurrogate(X, y, noise, kernel, prior_mean, jitter, L, alpha)


def neg_log_marginal_likelihood(X, y, noise, kernel: Kernel, prior_mean: float = 0.0) -> float:
    K = kernel(X, X) + np.diag(noise)
    try:
        L = linalg.cholesky(K, lower=True)
    except linalg.LinAlgError:
        return math.inf
    r = y - prior_mean
    a = linalg.cho_solve((L, True), r)
    return float(0.5 * r @ a + np.log(np.diag(L)).sum() + 0.5 * len(y) * math.log(2 * math.pi))


def _optimize_kernel(X, y, noise, kernel: Kernel, prior_mean: float) -> Kernel:
    d = X.shape[1]
    theta0 = np.concatenate([np.log(kernel.ls(d)), [math.log(kernel.signal_var), math.log(kernel.noise_var)]])
    bounds = [(math.log(1e-2), math.log(1e2))] * d + [(math.log(1e-3), math.log(1e2)), (math.log(MIN_NOISE), 0.0)]

    def unpack(theta):
        return Kernel(tuple(np.exp(theta[:d])), float(np.exp(theta[d])), float(np.exp(theta[d + 1])))

    def objective(theta):
        k = unpack(theta)
        return neg_log_marginal_likelihood(X, y, np.maximum(noise, k.noise_var), k, prior_mean)

    res = optimize.minimize(objective, theta0, method="L-BFGS-B", bounds=bounds)
    return unpack(res.x) if np.isfinite(res.fun) else kernel


def gp_posterior(gp: GPSurrogate, x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != gp.dim:
        raise ValueError(f"query dimension {x.shape[0]} does not match GP dimension {gp.dim}")
    m, v = gp.predict(x[None, :])
    return float(m[0]), float(v[0])


def add_observations(gp: GPSurrogate, X, y, noise=None) -> GPSurrogate:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    noise = np.full(len(y), gp.kernel.noise_var) if noise is None else np.asarray(noise, float)
    return gp_fit(
        np.vstack([gp.X, X]) if gp.n else X,
        np.concatenate([gp.y, y]),
        gp.kernel,
        noise=np.concatenate([gp.noise, noise]),
        prior_mean=gp.prior_mean,
    )


@dataclass(frozen=True)
class ProxyDataset:
    """Observations from a cheaper task over the same encoded space."""

    X: np.ndarray
    y: np.ndarray
    fidelity: float = 0.0

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError("proxy X and y lengths differ")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def augmented(self) -> np.ndarray:
        return np.hstack([self.X, np.full((self.X.shape[0], 1), self.fidelity)])


def transfer_init(gp_target: GPSurrogate, proxy: ProxyDataset, discount: float) -> GPSurrogate:
    """Fold proxy observations in with noise inflated to ``noise_var / discount``.

    The target GP's inputs carry the fidelity coordinate as their last
    column; the proxy rows get the proxy's own coordinate there.
    """
    if not 0 < discount <= 1:
        raise ValueError("discount must lie in (0, 1]")
    if proxy.X.shape[1] + 1 != gp_target.dim and gp_target.n:
        raise ValueError(
            f"proxy encoding has {proxy.X.shape[1]} columns, target expects {gp_target.dim - 1} + fidelity"
        )
    if len(proxy.y) == 0:
        return gp_target
    noise = np.full(len(proxy.y), gp_target.kernel.noise_var / discount)
    if gp_target.n == 0:
        return gp_fit(proxy.augmented(), proxy.y, gp_target.kernel, noise=noise, prior_mean=gp_target.prior_mean)
    return add_observations(gp_target, proxy.augmented(), proxy.y, noise)


def expected_improvement(mean, std, best_so_far):
    """Maximisation EI; reduces to ``max(0, mean - best)`` where ``std == 0``."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    if np.any(std < 0):
        raise ValueError("std must be >= 0")
    imp = mean - best_so_far
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(std > 0, imp / np.where(std > 0, std, 1.0), 0.0)
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    ei = np.where(std > 0, imp * ndtr(z) + std * pdf, np.maximum(imp, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def cost_aware_acquisition(ei, cost):
    if np.any(np.asarray(cost) <= 0):
        raise ValueError("cost must be > 0")
    return np.asarray(ei, dtype=float) / cost if np.ndim(ei) else float(ei) / float(cost)
