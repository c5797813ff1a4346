"""Toy densities: the Checkerboard and isotropic Gaussian mixtures."""

from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, ParameterError


@dataclass(frozen=True)
class Checkerboard:
    """Uniform density on the unit squares of [-extent, extent]^2 whose
    integer coordinates have an even sum."""

    extent: float = 4.0
    square: float = 1.0

    @property
    def bounds(self):
        return (-self.extent, self.extent, -self.extent, self.extent)

    def on_support(self, x):
        x = np.asarray(x, dtype=np.float64)
        cells = np.floor(x / self.square).astype(np.int64)
        inside = np.all(np.abs(x) <= self.extent, axis=-1)
        return inside & ((cells[..., 0] + cells[..., 1]) % 2 == 0)

    def sample(self, n, rng, return_rate=False):
        """Rejection sampling from the bounding box; exactly ``n`` points."""
        if n < 0:
            raise ParameterError("n must be non-negative")
        out = np.empty((0, 2))
        proposed = accepted = 0
        while len(out) < n:
            m = max(2 * (n - len(out)) + 16, 64)
            prop = rng.uniform(-self.extent, self.extent, size=(m, 2))
            keep = prop[self.on_support(prop)]
            proposed += m
            accepted += len(keep)
            out = np.concatenate([out, keep])
        out = out[:n]
        return (out, accepted / proposed) if return_rate else out

    def on_squares(self):
        """Lower-left corners of the positive-density squares, row-major."""
        k = int(round(self.extent / self.square))
        corners = [(i * self.square, j * self.square)
                   for j in range(-k, k) for i in range(-k, k) if (i + j) % 2 == 0]
        return np.array(corners)

    def occupancy(self, x):
        """Fraction of ``x`` falling in each on-square (same order as on_squares)."""
        x = np.asarray(x, dtype=np.float64)
        corners = self.on_squares()
        if len(x) == 0:
            return np.zeros(len(corners))
        idx = np.floor(x / self.square).astype(np.int64)
        k = int(round(self.extent / self.square))
        ok = self.on_support(x)
        flat = (idx[ok, 1] + k) * (2 * k) + (idx[ok, 0] + k)
        counts = np.bincount(flat, minlength=(2 * k) ** 2)
        cells = ((corners[:, 1] / self.square).round().astype(int) + k) * (2 * k) + \
            (corners[:, 0] / self.square).round().astype(int) + k
        return counts[cells] / len(x)

    def score(self, x, extra_var=0.0):
        raise CapabilityError("the Checkerboard has no analytic score; use on-support mass")


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        tau = np.asarray(self.stds, dtype=np.float64)
        if np.any(w <= 0) or not np.isclose(w.sum(), 1.0):
            raise ParameterError("weights must be positive and sum to 1")
        if np.any(tau <= 0):
            raise ParameterError("component stds must be positive")
        if not (len(w) == len(mu) == len(tau)):
            raise ParameterError("weights, means and stds disagree on component count")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", tau)
        # variances are kept exactly so that widening adds without rounding
        object.__setattr__(self, "_var", tau ** 2)

    @classmethod
    def ring(cls, k=8, radius=3.0, std=0.3):
        angles = 2 * np.pi * np.arange(k) / k
        means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return cls(np.full(k, 1.0 / k), means, np.full(k, std))

    @property
    def dim(self):
        return self.means.shape[1]

    def widened(self, extra_var):
        """The mixture convolved with N(0, extra_var I)."""
        var = self._var + extra_var
        out = GaussianMixture(self.weights, self.means, np.sqrt(var))
        object.__setattr__(out, "_var", var)
        return out

    def _log_terms(self, x, extra_var):
        if np.any(np.asarray(extra_var) < 0):
            raise ParameterError("extra_var must be non-negative")
        x = np.asarray(x, dtype=np.float64)
        var = self._var + np.asarray(extra_var, dtype=np.float64)[..., None]
        d = self.dim
        diff = self.means - x[..., None, :]
        sq = np.sum(diff * diff, axis=-1)
        logs = np.log(self.weights) - 0.5 * d * np.log(2 * np.pi * var) - 0.5 * sq / var
        return logs, diff, var

    def log_prob(self, x, extra_var=0.0):
        logs, _, _ = self._log_terms(x, extra_var)
        top = logs.max(axis=-1, keepdims=True)
        return top[..., 0] + np.log(np.exp(logs - top).sum(axis=-1))

    def score(self, x, extra_var=0.0):
        """sum_k r_k(x) (mu_k - x) / (tau_k^2 + extra_var), responsibilities in log space.

        ``extra_var`` is a scalar or one value per row of ``x``.
        """
        logs, diff, var = self._log_terms(x, extra_var)
        r = np.exp(logs - logs.max(axis=-1, keepdims=True))
        r /= r.sum(axis=-1, keepdims=True)
        return np.sum((r / var)[..., None] * diff, axis=-2)

    def time_score(self, x, sde, t):
        """Score of p_t = p_0 pushed through the forward SDE to time t.

        p_t(x) = sum_k w_k N(x; m mu_k, m^2 tau_k^2 + sigma_t^2), so the score is
        score(x / m, extra_var=sigma_t^2 / m^2) / m with m = sde.mean_scale(t).
        """
        x = np.asarray(x, dtype=np.float64)
        m = np.asarray(sde.mean_scale(t), dtype=np.float64)
        v = np.asarray(sde.marginal_std(t), dtype=np.float64) ** 2 / m ** 2
        mc = m[..., None] if m.ndim == 1 else m
        return self.score(x / mc, v) / mc

    def sample(self, n, rng):
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + self.stds[comp, None] * rng.standard_normal((n, self.dim))

    def moments(self, extra_var=0.0):
        """Exact mean vector and covariance matrix."""
        var = self._var + extra_var
        mean = self.weights @ self.means
        centred = self.means - mean
        cov = (self.weights[:, None, None] * (np.einsum("ki,kj->kij", centred, centred)
                                              + var[:, None, None] * np.eye(self.dim))).sum(axis=0)
        return mean, cov


def write_samples_csv(points, path):
    """One point per line, 17 significant digits, header x1,x2,..."""
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        points = points.reshape(0, 2)
    d = points.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(f"x{i + 1}" for i in range(d)) + "\n")
        for row in points:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_samples_csv(path):
    with open(path) as fh:
        fh.readline()
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    return np.array(rows).reshape(len(rows), -1) if rows else np.empty((0, 2))
