"""Per-sample score-matching objectives and the time-integrated diffusion loss.

All objectives take a batch ``x`` of shape (B, d) (a single vector is
treated as a batch of one) and return the batch mean as a scalar tensor that
is differentiable with respect to the network parameters.  Noise can be
passed explicitly (``noise=``) to pin a draw; otherwise it comes from ``rng``.
With ``mc_samples=k`` the k draws are taken in sequence and the result is
the running sum of the k single-draw losses times 1/k.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import CapabilityError, ContractError, ParameterError

KINDS = ("SM", "SSM", "FDSSM", "DSM", "LCS_EXACT", "LCSS", "LCSS_GAMMA")
SDM_KINDS = ("DSM", "LCSS", "LCSS_GAMMA", "SSM", "FDSSM")
MAX_EXACT_DIM = 16

# Test hook: set to -1.0 to plant a sign error in the LCSS inner product.
_LCSS_INNER_SIGN = 1.0


@dataclass(frozen=True)
class ProjectionSampler:
    """Random projections v with E[v v^T] = (epsilon^2 / d) I."""

    distribution: str = "rademacher"
    epsilon: float = 1.0

    def __post_init__(self):
        if self.distribution not in ("rademacher", "gaussian"):
            raise ParameterError(f"unknown projection distribution {self.distribution!r}")
        if not self.epsilon > 0:
            raise ParameterError("epsilon must be positive")

    def scale(self, d):
        return self.epsilon / np.sqrt(d)

    def draw(self, shape, rng):
        if self.distribution == "rademacher":
            u = rng.integers(0, 2, size=shape) * 2.0 - 1.0
        else:
            u = rng.standard_normal(shape)
        return self.scale(shape[-1]) * u


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "LCSS"
    sigma: float = 0.1
    epsilon: float = 1.0
    gamma: float = 1.0
    mc_samples: int = 1
    projection: str = "rademacher"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown objective {self.kind!r}")
        if self.kind in ("DSM", "LCS_EXACT", "LCSS", "LCSS_GAMMA") and not self.sigma > 0:
            raise ParameterError("sigma must be positive")
        if self.kind in ("SSM", "FDSSM") and not self.epsilon > 0:
            raise ParameterError("epsilon must be positive")
        if self.mc_samples < 1:
            raise ParameterError("mc_samples must be >= 1")
        if not np.isfinite(self.gamma):
            raise ParameterError("gamma must be finite")

    @property
    def sampler(self):
        return ProjectionSampler(self.projection, self.epsilon)


# ------------------------------------------------------------------ helpers

def _batch(x):
    data = x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)
    return data.reshape(1, -1) if data.ndim == 1 else data


def _mean(rows):
    return ad.scale(ad.tsum(rows), 1.0 / rows.shape[0])


def _column(sig, n):
    """sigma as a scalar or an (n, 1) column for row-wise broadcasting."""
    sig = np.asarray(sig, dtype=np.float64)
    return sig.reshape(n, 1) if sig.ndim == 1 else sig


def _draws(noise, k, shape, draw):
    if noise is None:
        return [draw(shape) for _ in range(k)]
    noise = np.asarray(noise, dtype=np.float64)
    if shape[0] == 1 and noise.shape[-1:] == shape[1:] and noise.ndim in (1, 2):
        noise = noise.reshape(-1, *shape)
    if noise.shape == shape:
        noise = noise[None]
    if noise.shape != (k, *shape):
        raise ParameterError(f"noise of shape {noise.shape} does not fit {k} draws of {shape}")
    return list(noise)


def _average(losses):
    total = losses[0]
    for loss in losses[1:]:
        total = ad.add(total, loss)
    return total if len(losses) == 1 else ad.scale(total, 1.0 / len(losses))


def _need_rng(rng, noise):
    if rng is None and noise is None:
        raise ContractError("pass rng or noise")


def _check_exact_dim(d):
    if d > MAX_EXACT_DIM:
        raise CapabilityError(
            f"exact Jacobian terms cost d={d} backward passes (limit {MAX_EXACT_DIM}); use LCSS or SSM")


def jacobian_terms(net, x, t=None):
    """Score, Jacobian trace and squared Frobenius norm per row, all on the tape."""
    x = ad.Tensor(_batch(x), requires_grad=True)
    d = x.shape[1]
    _check_exact_dim(d)
    s = net.forward(x, t)
    trace = frob = None
    for i in range(d):
        row = ad.jacobian_row(s, x, i)
        diag = ad.reshape(ad.slice_axis(row, i, i + 1, axis=1), (x.shape[0],))
        sq = ad.sqnorm(row, axis=1)
        trace = diag if trace is None else ad.add(trace, diag)
        frob = sq if frob is None else ad.add(frob, sq)
    return s, trace, frob


# -------------------------------------------------------------- objectives

def sm_exact_terms(net, x, t=None):
    """(Tr grad_x s, 1/2 ||s||^2) per row."""
    s, trace, _ = jacobian_terms(net, x, t)
    return trace, ad.scale(ad.sqnorm(s, axis=1), 0.5)


def sm_exact(net, x, t=None):
    """Tr(grad_x s(x)) + 1/2 ||s(x)||^2, trace from d backward passes."""
    trace, half_sq = sm_exact_terms(net, x, t)
    return _mean(ad.add(trace, half_sq))


def lcs_exact(net, x, sigma, t=None):
    """Exact score matching plus 1/2 sigma^2 ||grad_x s||_F^2 (reference objective)."""
    if sigma < 0:
        raise ParameterError("sigma must be non-negative")
    s, trace, frob = jacobian_terms(net, x, t)
    rows = ad.add(ad.add(trace, ad.scale(ad.sqnorm(s, axis=1), 0.5)), ad.scale(frob, 0.5 * sigma ** 2))
    return _mean(rows)


def ssm_terms(net, x, v, epsilon, t=None):
    """(v^T grad_x s v / eps^2, ||s||^2 / (2d)) per row.

    The quadratic form is v . grad_x (s . v): one extra backward pass, the
    Jacobian itself is never built.
    """
    x = ad.Tensor(_batch(x), requires_grad=True)
    d = x.shape[1]
    v = ad.Tensor(v)
    s = net.forward(x, t)
    jtv = ad.grad(ad.tsum(ad.inner(s, v, axis=1)), x, create_graph=True)
    first = ad.scale(ad.inner(v, jtv, axis=1), 1.0 / epsilon ** 2)
    second = ad.scale(ad.sqnorm(s, axis=1), 1.0 / (2 * d))
    return first, second


def ssm(net, x, sampler=None, rng=None, noise=None, t=None, mc_samples=1):
    sampler = sampler or ProjectionSampler()
    _need_rng(rng, noise)
    xb = _batch(x)
    vs = _draws(noise, mc_samples, xb.shape, lambda shape: sampler.draw(shape, rng))
    losses = []
    for v in vs:
        first, second = ssm_terms(net, xb, v, sampler.epsilon, t)
        losses.append(_mean(ad.add(first, second)))
    return _average(losses)


def fd_ssm_terms(net, x, v, epsilon, t=None):
    """Finite-difference SSM terms per row; first order only."""
    xb = _batch(x)
    d = xb.shape[1]
    vt = ad.Tensor(v)
    s_plus = net.forward(ad.Tensor(xb + v), t)
    s_minus = net.forward(ad.Tensor(xb - v), t)
    diff = ad.sub(ad.inner(vt, s_plus, axis=1), ad.inner(vt, s_minus, axis=1))
    first = ad.scale(diff, 1.0 / (2 * epsilon ** 2))
    second = ad.scale(ad.sqnorm(ad.add(s_plus, s_minus), axis=1), 1.0 / (8 * d))
    return first, second


def fd_ssm(net, x, sampler=None, rng=None, noise=None, t=None, mc_samples=1):
    sampler = sampler or ProjectionSampler()
    _need_rng(rng, noise)
    xb = _batch(x)
    vs = _draws(noise, mc_samples, xb.shape, lambda shape: sampler.draw(shape, rng))
    losses = []
    for v in vs:
        first, second = fd_ssm_terms(net, xb, v, sampler.epsilon, t)
        losses.append(_mean(ad.add(first, second)))
    return _average(losses)


def dsm_target(x0, x_tilde, sigma):
    """Score of the Gaussian kernel q(x_tilde | x0): (x0 - x_tilde) / sigma^2."""
    return (np.asarray(x0) - np.asarray(x_tilde)) / np.asarray(sigma) ** 2


def dsm(net, x0, sigma, t=None, rng=None, noise=None, mc_samples=1):
    """1/2 ||s(x_tilde) - (x0 - x_tilde) / sigma^2||^2 with x_tilde = x0 + sigma z."""
    if np.any(np.asarray(sigma) <= 0):
        raise ParameterError("sigma must be positive")
    _need_rng(rng, noise)
    xb = _batch(x0)
    sig = _column(sigma, xb.shape[0])
    zs = _draws(noise, mc_samples, xb.shape, rng.standard_normal if rng is not None else None)
    losses = []
    for z in zs:
        x_tilde = xb + sig * z
        s = net.forward(ad.Tensor(x_tilde), t)
        r = ad.sub(s, ad.Tensor(dsm_target(xb, x_tilde, sig)))
        losses.append(_mean(ad.scale(ad.sqnorm(r, axis=1), 0.5)))
    return _average(losses)


def lcss_rows(net, x, z, sigma, t=None, gamma=None):
    """gamma s(x')^T (x' - x) / sigma^2 + 1/2 ||s(x')||^2 per row, x' = x + sigma z."""
    xb = _batch(x)
    sig = _column(sigma, xb.shape[0])
    x_prime = xb + sig * z
    s = net.forward(ad.Tensor(x_prime), t)
    disp = (x_prime - xb) / sig ** 2
    inner = ad.inner(s, ad.Tensor(disp), axis=1)
    if _LCSS_INNER_SIGN != 1.0:
        inner = ad.scale(inner, _LCSS_INNER_SIGN)
    if gamma is not None:
        inner = ad.scale(inner, gamma)
    return ad.add(inner, ad.scale(ad.sqnorm(s, axis=1), 0.5))


def lcss(net, x, sigma, t=None, gamma=None, rng=None, noise=None, mc_samples=1):
    """Local curvature smoothing with Stein's identity.

    The Jacobian trace of exact score matching is replaced by the inner
    product s(x')^T (x' - x) / sigma^2 under x' ~ N(x, sigma^2 I); no
    derivative of s with respect to x is taken.  ``gamma`` weights the inner
    product (``None`` leaves it unweighted).
    """
    if np.any(np.asarray(sigma) <= 0):
        raise ParameterError("sigma must be positive")
    _need_rng(rng, noise)
    xb = _batch(x)
    zs = _draws(noise, mc_samples, xb.shape, rng.standard_normal if rng is not None else None)
    return _average([_mean(lcss_rows(net, xb, z, sigma, t, gamma)) for z in zs])


def objective_loss(spec: ObjectiveSpec, net, x, rng=None, t=None, noise=None):
    """Dispatch on ``spec.kind``; the per-sample objective averaged over ``x``."""
    k = spec.kind
    if k == "SM":
        return sm_exact(net, x, t)
    if k == "LCS_EXACT":
        return lcs_exact(net, x, spec.sigma, t)
    if k == "SSM":
        return ssm(net, x, spec.sampler, rng, noise, t, spec.mc_samples)
    if k == "FDSSM":
        return fd_ssm(net, x, spec.sampler, rng, noise, t, spec.mc_samples)
    if k == "DSM":
        return dsm(net, x, spec.sigma, t, rng, noise, spec.mc_samples)
    gamma = spec.gamma if k == "LCSS_GAMMA" else None
    return lcss(net, x, spec.sigma, t, gamma, rng, noise, spec.mc_samples)


# ------------------------------------------------------------ SDM training

def sdm_loss(net, x0, sde, spec: ObjectiveSpec, rng=None, t=None, noise=None):
    """Monte Carlo estimate of int lambda(t) E[J(theta, x0, t)] dt.

    t ~ U(t_min, T) per batch element, sigma_t = sde.marginal_std(t) and
    lambda(t) = sigma_t^2.  For DSM and LCSS the weight is folded into the
    objective, so no 1/sigma_t^2 is ever formed:

        DSM:   lambda/2 ||s - (x0 - x~)/sigma^2||^2 = 1/2 ||sigma s + z||^2
        LCSS:  lambda [gamma s.(x'-x0)/sigma^2 + ||s||^2/2]
                   = gamma s.(x'-x0) + sigma^2 ||s||^2 / 2
    """
    if not net.config.time_conditional:
        raise ContractError("sdm_loss needs a time-conditional net")
    if spec.kind not in SDM_KINDS:
        raise ContractError(f"{spec.kind} is not usable as a diffusion loss")
    xb = _batch(x0)
    n, d = xb.shape
    if t is None:
        if rng is None:
            raise ContractError("pass rng or t")
        t = rng.uniform(sde.t_min, sde.T, size=n)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    sig = sde.marginal_std(t).reshape(n, 1)
    lam = sig[:, 0] ** 2
    k = spec.kind
    if noise is None:
        if rng is None:
            raise ContractError("pass rng or noise")
        if k in ("SSM", "FDSSM"):
            noise = (rng.standard_normal((n, d)), spec.sampler.draw((n, d), rng))
        else:
            noise = rng.standard_normal((n, d))

    if k == "DSM":
        s = net.forward(ad.Tensor(xb + sig * noise), t)
        r = ad.add(ad.mul(s, ad.Tensor(sig)), ad.Tensor(noise))
        rows = ad.scale(ad.sqnorm(r, axis=1), 0.5)
    elif k in ("LCSS", "LCSS_GAMMA"):
        x_prime = xb + sig * noise
        s = net.forward(ad.Tensor(x_prime), t)
        inner = ad.inner(s, ad.Tensor(x_prime - xb), axis=1)
        if _LCSS_INNER_SIGN != 1.0:
            inner = ad.scale(inner, _LCSS_INNER_SIGN)
        if k == "LCSS_GAMMA":
            inner = ad.scale(inner, spec.gamma)
        rows = ad.add(inner, ad.mul(ad.scale(ad.sqnorm(s, axis=1), 0.5), ad.Tensor(lam)))
    else:
        z, v = noise
        xt = xb + sig * z
        terms = ssm_terms if k == "SSM" else fd_ssm_terms
        first, second = terms(net, xt, v, spec.epsilon, t)
        rows = ad.mul(ad.add(first, second), ad.Tensor(lam))
    return _mean(rows)


# ---------------------------------------------------- Hutchinson estimator

@dataclass
class HutchinsonReport:
    M: int
    trials: int
    bound: float
    fraction_within: float
    rms_error: float
    rms_error_4m: float
    slope: float


def hutchinson_estimates(A, M, trials, rng, distribution="rademacher"):
    """``trials`` independent M-probe Hutchinson estimates of Tr(A)."""
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[0]
    sampler = ProjectionSampler(distribution, np.sqrt(d))  # unit-variance probes
    out = np.empty(trials)
    chunk = max(1, 2_000_000 // max(1, M * d))
    for lo in range(0, trials, chunk):
        hi = min(trials, lo + chunk)
        u = sampler.draw((hi - lo, M, d), rng)
        out[lo:hi] = np.einsum("tmi,ij,tmj->t", u, A, u) / M
    return out


def hutchinson_error_bound_check(A, M, trials, rng, distribution="rademacher"):
    """Empirical check of |Tr A - T_M| <= ||A||_F / sqrt(M).

    Reports the fraction of trials inside the bound at M probes and the
    slope of log RMS error against log M measured between M and 4M.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ParameterError("A must be square")
    _check_exact_dim(A.shape[0])
    tr = np.trace(A)
    bound = np.linalg.norm(A, "fro") / np.sqrt(M)
    err = np.abs(hutchinson_estimates(A, M, trials, rng, distribution) - tr)
    err4 = np.abs(hutchinson_estimates(A, 4 * M, trials, rng, distribution) - tr)
    rms, rms4 = np.sqrt(np.mean(err ** 2)), np.sqrt(np.mean(err4 ** 2))
    slope = np.log(rms4 / rms) / np.log(4.0) if rms > 0 and rms4 > 0 else float("nan")
    return HutchinsonReport(M, trials, bound, float(np.mean(err <= bound + 1e-12)), rms, rms4, slope)
