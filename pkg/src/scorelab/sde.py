"""VE and subVP forward SDEs, reverse-time Euler-Maruyama, Langevin dynamics."""

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ParameterError

T_MIN = 1e-5


@dataclass(frozen=True)
class SdeSchedule:
    """Drift f(x, t), diffusion g(t) and marginal std sigma_t of a forward SDE.

    VE:    f = 0, sigma_t = sigma_min (sigma_max / sigma_min)^t, g(t) = sigma_t sqrt(2 log(sigma_max / sigma_min))
    subVP: f = -beta(t) x / 2, g(t)^2 = beta(t) (1 - exp(-2 B(t))), sigma_t = 1 - exp(-B(t)),
           beta(t) = beta_min + t (beta_max - beta_min), B(t) = int_0^t beta.

    The VE marginal drops the -sigma_min^2 offset so that sigma_t = g(t) up to
    a constant factor and lambda(t) = sigma_t^2 cancels the objectives'
    1/sigma_t^2 exactly.
    """

    kind: str = "ve"
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    beta_min: float = 0.1
    beta_max: float = 20.0
    T: float = 1.0
    t_min: float = T_MIN

    def __post_init__(self):
        if self.kind not in ("ve", "subvp"):
            raise ParameterError(f"unknown SDE kind {self.kind!r}")
        if not self.sigma_max > self.sigma_min > 0:
            raise ParameterError("need sigma_max > sigma_min > 0")
        if not self.beta_max > self.beta_min > 0:
            raise ParameterError("need beta_max > beta_min > 0")
        if not 0 < self.t_min < self.T:
            raise ParameterError("need 0 < t_min < T")

    def _check_t(self, t, open_left=False):
        t = np.asarray(t, dtype=np.float64)
        lo_bad = np.any(t <= 0) if open_left else np.any(t < 0)
        if lo_bad or np.any(t > self.T):
            raise ParameterError(f"t outside {'(' if open_left else '['}0, {self.T}]")
        return t

    def beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def beta_integral(self, t):
        return self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min)

    def drift(self, x, t):
        t = self._check_t(t)
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "ve":
            return np.zeros_like(x)
        b = self.beta(t)
        if x.ndim == 2 and np.ndim(b) == 1:
            b = b[:, None]
        return -0.5 * b * x

    def diffusion(self, t):
        t = self._check_t(t)
        if self.kind == "ve":
            ratio = self.sigma_max / self.sigma_min
            return self.sigma_min * ratio ** t * np.sqrt(2.0 * np.log(ratio))
        return np.sqrt(self.beta(t) * -np.expm1(-2.0 * self.beta_integral(t)))

    def marginal_std(self, t):
        t = self._check_t(t, open_left=True)
        if self.kind == "ve":
            return self.sigma_min * (self.sigma_max / self.sigma_min) ** t
        return -np.expm1(-self.beta_integral(t))

    def mean_scale(self, t):
        """m_t with E[x_t | x0] = m_t x0: 1 for VE, exp(-B(t)/2) for subVP."""
        t = self._check_t(t)
        if self.kind == "ve":
            return np.ones_like(t)
        return np.exp(-0.5 * self.beta_integral(t))

    def prior_std(self):
        return self.sigma_max if self.kind == "ve" else 1.0

    def prior_sample(self, n, d, rng):
        return self.prior_std() * rng.standard_normal((n, d))

    def time_feature(self, t):
        """log sigma_t rescaled to [-1/2, 1/2] over [t_min, T]."""
        lo = np.log(self.marginal_std(self.t_min))
        hi = np.log(self.marginal_std(self.T))
        return (np.log(self.marginal_std(t)) - 0.5 * (lo + hi)) / (hi - lo)

    def perturb(self, x0, t, rng, noise=None):
        """x0 + sigma_t z with z ~ N(0, I)."""
        x0 = np.asarray(x0, dtype=np.float64)
        z = rng.standard_normal(x0.shape) if noise is None else np.asarray(noise)
        sig = np.asarray(self.marginal_std(t))
        if x0.ndim == 2 and sig.ndim == 1:
            sig = sig[:, None]
        return x0 + sig * z


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 1000
    langevin_eps: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")
        if not self.langevin_eps > 0:
            raise ParameterError("langevin_eps must be positive")


def reverse_em(sde, score_fn, x_T, steps, rng, diffusion=None, return_path=False):
    """Euler-Maruyama for dx = [f - g^2 score] dt + g dw-bar, from T down to t_min.

    ``score_fn(x, t)`` takes a batch and a scalar time.  ``diffusion`` replaces
    g(t) when given (used to switch the noise off in tests).
    """
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    x = np.array(x_T, dtype=np.float64)
    g_fn = sde.diffusion if diffusion is None else diffusion
    dt = (sde.T - sde.t_min) / steps
    path = [x.copy()] if return_path else None
    for k in range(steps):
        t = sde.T - k * dt
        g = g_fn(t)
        mean = x - (sde.drift(x, t) - g * g * score_fn(x, t)) * dt
        x = mean + g * np.sqrt(dt) * rng.standard_normal(x.shape) if g else mean
        if not np.all(np.isfinite(x)):
            raise DivergenceError("reverse integration produced non-finite values", k)
        if return_path:
            path.append(x.copy())
    return (x, path) if return_path else x


def langevin(score_fn, x_init, eps, steps, rng, noise=True, final_noise=True):
    """x <- x + (eps / 2) score(x) + z, z ~ N(0, eps I), ``steps`` times.

    ``final_noise=False`` returns the mean of the last update (no noise on the
    final step); ``noise=False`` switches the noise off throughout.
    """
    if eps < 0:
        raise ParameterError("eps must be non-negative")
    x = np.array(x_init, dtype=np.float64)
    sd = np.sqrt(eps)
    for k in range(steps):
        x = x + 0.5 * eps * score_fn(x)
        if noise and (final_noise or k < steps - 1):
            x = x + sd * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x), initial=0.0) > 1e6:
            raise DivergenceError("Langevin chain diverged", k)
    return x


def annealed_langevin(score_fn, x_init, sigmas, eps, steps_per_level, rng):
    """Annealed Langevin over decreasing noise levels.

    ``score_fn(x, sigma)``; the step at level sigma is eps * (sigma / sigma_last)^2.
    """
    x = np.array(x_init, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    for sigma in sigmas:
        step = eps * (sigma / sigmas[-1]) ** 2
        x = langevin(lambda y: score_fn(y, sigma), x, step, steps_per_level, rng)
    return x
