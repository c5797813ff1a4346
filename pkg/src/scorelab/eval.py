"""Monte Carlo validators, score-field error, density rendering and timing.

The estimators here check the identities the objectives rely on: Stein's
identity for Gaussian measures, the inner-product estimate of the Jacobian
trace, and the expected exact-score-matching loss under Gaussian smoothing.
Smoothed references use tensor-product Gauss-Hermite quadrature (d <= 3).
"""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from . import autodiff as ad
from .errors import CapabilityError, ParameterError
from .objectives import jacobian_terms, sm_exact_terms

PASS_BAR = 4.0
MAX_QUADRATURE_DIM = 3


# ------------------------------------------------------------ stats helpers

class _Moments:
    """Running sums for means and standard errors of per-sample statistics."""

    def __init__(self):
        self.n = 0
        self.s1 = 0.0
        self.s2 = 0.0

    def add(self, samples):
        self.n += samples.shape[0]
        self.s1 = self.s1 + samples.sum(axis=0)
        self.s2 = self.s2 + (samples * samples).sum(axis=0)

    @property
    def mean(self):
        return self.s1 / self.n

    @property
    def se(self):
        var = np.maximum(self.s2 / self.n - self.mean ** 2, 0.0) * self.n / (self.n - 1)
        return np.sqrt(var / self.n)


def standardized(diff, se):
    """|diff| / se elementwise; 0 where both vanish, inf where only se does."""
    diff, se = np.abs(np.asarray(diff, float)), np.asarray(se, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = diff / se
    return np.where(se > 0, z, np.where(diff <= 1e-12, 0.0, np.inf))


def loglog_slope(ns, errors):
    """Least-squares slope of log(error) against log(n)."""
    return float(np.polyfit(np.log(ns), np.log(errors), 1)[0])


def _chunks(n, size):
    for lo in range(0, n, size):
        yield min(size, n - lo)


# ------------------------------------------------------------- Stein check

@dataclass
class SteinCheckReport:
    """lhs[i, j] = E[h_i(z) (z_j - mu_j)] / sigma^2, rhs[i, j] = E[dh_i/dz_j]."""

    lhs: np.ndarray
    rhs: np.ndarray
    n: int
    se: np.ndarray
    max_discrepancy: float

    @property
    def passed(self):
        return self.max_discrepancy < PASS_BAR


def jacobian(h, z):
    """Per-sample Jacobians dh_i/dz_j of a batched tensor function, shape (n, d_out, d)."""
    with ad.Tape():
        zt = ad.Tensor(z, requires_grad=True)
        hz = h(zt)
        rows = [ad.grad(ad.tsum(ad.slice_axis(hz, i, i + 1, axis=1)), zt).data
                for i in range(hz.shape[1])]
    return hz.data, np.stack(rows, axis=1)


def stein_check(h, mu, sigma, n, rng, exact_rhs=None, chunk=100_000):
    """Monte Carlo check of E[h(z)(z - mu)^T] / sigma^2 = E[grad h(z)], z ~ N(mu, sigma^2 I).

    ``h`` maps a (B, d) tensor to a (B, d') tensor on the autodiff tape.  The
    discrepancy is the paired difference of the two per-sample quantities
    divided by its standard error.  With ``exact_rhs`` the Monte Carlo lhs is
    compared with the closed form instead.
    """
    if n < 100:
        raise ParameterError("stein_check needs n >= 100")
    if not sigma > 0:
        raise ParameterError("sigma must be positive")
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    d = mu.size
    lhs, rhs, diff = _Moments(), _Moments(), _Moments()
    for m in _chunks(n, chunk):
        z = mu + sigma * rng.standard_normal((m, d))
        hz, jac = jacobian(h, z)
        left = hz[:, :, None] * (z - mu)[:, None, :] / sigma ** 2
        lhs.add(left)
        rhs.add(jac)
        diff.add(left - jac)
    if exact_rhs is None:
        se = diff.se
        disc = standardized(diff.mean, se)
        rhs_mean = rhs.mean
    else:
        rhs_mean = np.broadcast_to(np.asarray(exact_rhs, dtype=np.float64), lhs.mean.shape)
        se = lhs.se
        disc = standardized(lhs.mean - rhs_mean, se)
    return SteinCheckReport(lhs.mean, rhs_mean, n, se, float(np.max(disc)))


# -------------------------------------------------------- trace estimators

def exact_trace(net, x, t=None):
    """Tr(grad_x s(x)) per row via d backward passes."""
    with ad.Tape():
        _, trace, _ = jacobian_terms(net, x, t)
    return trace.data


def sm_rows(net, x, t=None):
    """Per-row exact score-matching loss Tr(grad s) + ||s||^2 / 2."""
    with ad.Tape():
        trace, half_sq = sm_exact_terms(net, x, t)
    return trace.data + half_sq.data


def gauss_expectation(fn, x, sigma, nodes=40, chunk=20_000):
    """E[fn(x + sigma z)], z ~ N(0, I), by tensor-product Gauss-Hermite quadrature.

    ``fn`` maps an (m, d) array to m values.  Exact for polynomials of degree
    below 2 * nodes; limited to d <= 3.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.size
    if d > MAX_QUADRATURE_DIM:
        raise CapabilityError(f"quadrature in d={d} is too costly (limit {MAX_QUADRATURE_DIM})")
    z1, w1 = hermegauss(nodes)
    w1 = w1 / np.sqrt(2 * np.pi)
    grids = np.meshgrid(*([z1] * d), indexing="ij")
    z = np.stack([g.reshape(-1) for g in grids], axis=1)
    w = np.prod(np.meshgrid(*([w1] * d), indexing="ij"), axis=0).reshape(-1)
    pts = x + sigma * z
    vals = np.concatenate([fn(pts[lo:lo + m]) for lo, m in
                           zip(range(0, len(pts), chunk), _chunks(len(pts), chunk))])
    return float(w @ vals)


def smoothed_trace(net, x, sigma, nodes=40):
    """E[Tr grad s(x')] under x' ~ N(x, sigma^2 I): the mean of the inner-product estimator."""
    return gauss_expectation(lambda p: exact_trace(net, p), x, sigma, nodes)


def trace_samples(net, x, sigma, n, rng, t=None):
    """n draws of s(x')^T (x' - x) / sigma^2 with x' = x + sigma z."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    z = rng.standard_normal((n, x.size))
    s = net.score(x + sigma * z, t)
    return np.einsum("ij,ij->i", s, z) / sigma


def trace_estimate(net, x, sigma, n, rng, t=None, chunk=250_000):
    """(mean, standard error) of the inner-product trace estimator over n draws."""
    acc = _Moments()
    for m in _chunks(n, chunk):
        acc.add(trace_samples(net, x, sigma, m, rng, t))
    return float(acc.mean), float(acc.se)


@dataclass
class TraceConvergenceReport:
    ns: list
    rms_errors: np.ndarray
    slope: float
    reference: float
    replicates: int


def lcss_trace_convergence(net, x, sigma, ns, rng, replicates=30, reference=None):
    """RMS error of the inner-product trace estimator against its exact mean, per N.

    The reference is E[Tr grad s(x')] (Gauss-Hermite, or ``reference`` if
    given); the slope of log RMS error against log N should be about -1/2.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size > 16:
        raise CapabilityError("exact trace reference needs d <= 16")
    if reference is None:
        reference = smoothed_trace(net, x, sigma)
    rms = []
    for n in ns:
        est = np.array([trace_estimate(net, x, sigma, n, rng)[0] for _ in range(replicates)])
        rms.append(np.sqrt(np.mean((est - reference) ** 2)))
    rms = np.array(rms)
    slope = loglog_slope(ns, rms) if np.all(rms > 0) else float("nan")
    return TraceConvergenceReport(list(ns), rms, slope, float(reference), replicates)


# ------------------------------------------------- smoothing equivalence

def sm_expectation_mc(net, x, sigma, n, rng, chunk=100_000):
    """(mean, se) of the exact score-matching loss at x' ~ N(x, sigma^2 I)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    acc = _Moments()
    for m in _chunks(n, chunk):
        acc.add(sm_rows(net, x + sigma * rng.standard_normal((m, x.size))))
    return float(acc.mean), float(acc.se)


def lcs_value(net, x, sigma):
    with ad.Tape():
        s, trace, frob = jacobian_terms(net, x)
        half_sq = ad.sqnorm(s, axis=1).data / 2
    return float(np.mean(trace.data + half_sq + 0.5 * sigma ** 2 * frob.data))


def smoothing_residual(net, x, sigma, nodes=40):
    """E[J_SM(x')] - J_LCS(x), x' ~ N(x, sigma^2 I); zero for linear nets, O(sigma^2) otherwise."""
    smoothed = gauss_expectation(lambda p: sm_rows(net, p), x, sigma, nodes)
    return smoothed - lcs_value(net, np.asarray(x).reshape(1, -1), sigma)


# ------------------------------------------------------------- interchange

@dataclass
class InterchangeReport:
    expectation_of_sum: float
    sum_of_expectations: float
    discrepancy: float
    combined_se: float
    common_random_numbers: bool

    @property
    def standardized(self):
        return float(standardized(self.discrepancy, self.combined_se))


def _diag_jacobian(net, pts):
    with ad.Tape():
        x = ad.Tensor(pts, requires_grad=True)
        s = net.forward(x)
        cols = [ad.grad(ad.tsum(ad.slice_axis(s, i, i + 1, axis=1)), x).data[:, i]
                for i in range(pts.shape[1])]
    return np.stack(cols, axis=1)


def interchange_check(net, x, sigma, n, rng, common=True):
    """Compare E[sum_i ds_i/dx_i(x')] with sum_i E[ds_i/dx_i(x')].

    With common random numbers both sides average the same n x (d) array, so
    they differ only by summation order.  Otherwise each component gets its
    own stream spawned from ``rng``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.size
    if d > 16:
        raise CapabilityError("interchange_check needs d <= 16")
    z = rng.standard_normal((n, d))
    diag = _diag_jacobian(net, x + sigma * z)
    total = diag.sum(axis=1)
    lhs = float(np.mean(total))
    se_l = np.std(total, ddof=1) / np.sqrt(n)
    if common:
        parts = diag
    else:
        streams = rng.spawn(d)
        parts = np.stack([_diag_jacobian(net, x + sigma * s.standard_normal((n, d)))[:, i]
                          for i, s in enumerate(streams)], axis=1)
    rhs = float(np.sum(np.mean(parts, axis=0)))
    se_r = np.sqrt(np.sum(np.var(parts, axis=0, ddof=1)) / n)
    combined = float(np.hypot(se_l, se_r))
    return InterchangeReport(lhs, rhs, abs(lhs - rhs), combined, common)


# ------------------------------------------------------------- score error

def score_error(model, oracle, points, t=None):
    """Mean over points of ||s_model - s_oracle||^2.

    ``model`` is a ScoreNet or a callable ``(x, t) -> scores``; ``oracle`` is
    a callable ``x -> scores`` or a dataset with an analytic ``score``.
    """
    if oracle is None:
        raise CapabilityError("no analytic score available; use on-support mass instead")
    points = np.asarray(points, dtype=np.float64)
    ref = oracle.score(points) if hasattr(oracle, "score") else oracle(points)
    pred = model.score(points, t) if hasattr(model, "score") else model(points, t)
    diff = pred - ref
    return float(np.mean(np.sum(diff * diff, axis=1)))


# ---------------------------------------------------------- density output

def density_grid(samples, bounds=((-4.0, 4.0), (-4.0, 4.0)), bins=64):
    """2-D histogram of counts, row 0 = top (largest x2), column 0 = smallest x1.

    Samples outside ``bounds`` are dropped.
    """
    (x_lo, x_hi), (y_lo, y_hi) = bounds
    if bins < 2:
        raise ParameterError("bins must be >= 2")
    if not (x_hi > x_lo and y_hi > y_lo):
        raise ParameterError("bounds must be non-degenerate")
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    counts, _, _ = np.histogram2d(samples[:, 1], samples[:, 0], bins=bins,
                                  range=[[y_lo, y_hi], [x_lo, x_hi]])
    return np.flipud(counts).astype(np.int64)


def to_gray(counts):
    """Counts scaled to 0..255 by the maximum; an all-zero grid stays zero."""
    counts = np.asarray(counts, dtype=np.int64)
    top = counts.max(initial=0)
    if top == 0:
        return np.zeros(counts.shape, dtype=np.uint8)
    return (counts * 255 // top).astype(np.uint8)


def write_pgm(grid, path):
    """Binary P5 greyscale; ``grid`` holds counts and is normalised by its max."""
    gray = to_gray(grid)
    h, w = gray.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(gray.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write PGM to {path}: {exc.strerror or exc}") from exc


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path} is not an 8-bit P5 image")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def write_counts_csv(counts, path):
    """Raw histogram counts, one cell per line: row,col,count."""
    counts = np.asarray(counts)
    try:
        with open(path, "w", newline="") as fh:
            fh.write("row,col,count\n")
            for (r, c), v in np.ndenumerate(counts):
                fh.write(f"{r},{c},{v}\n")
    except OSError as exc:
        raise OSError(f"cannot write counts to {path}: {exc.strerror or exc}") from exc


# --------------------------------------------------------------- benchmark

@dataclass
class BenchReport:
    method: str
    mean_ms: float
    std_ms: float
    steps: int
    times_ms: np.ndarray = field(repr=False, default=None)

    @property
    def cv(self):
        return self.std_ms / self.mean_ms if self.mean_ms > 0 else 0.0


def bench(method, net_config, dataset, steps=100, batch=10_000, seed=0, lr=1e-3, sde=None,
          sigma=0.1, epsilon=None, pool=8):
    """Wall-clock ms per optimisation step (loss, gradient, update).

    Batches are drawn up front from a pool of ``pool`` batches and cycled, so
    data generation is outside the timed region.  The first 10% of steps are
    warm-up and are not reported.
    """
    from . import nets
    from . import rng as rngs
    from .training import loss_and_grad, make_spec

    if steps < 100:
        raise ParameterError("bench needs steps >= 100")
    spec = make_spec(method, sigma=sigma, epsilon=epsilon)
    net = nets.init(net_config, seed, sde)
    opt = nets.SGD(lr)
    data_rng = rngs.stream(seed, rngs.DATA)
    noise_rng = rngs.stream(seed, rngs.NOISE)
    batches = [dataset.sample(batch, data_rng) for _ in range(min(pool, steps))]
    times = np.empty(steps)
    for k in range(steps):
        x = batches[k % len(batches)]
        t0 = time.perf_counter()
        _, g = loss_and_grad(net, spec, x, noise_rng, sde)
        opt.step(net, g)
        times[k] = (time.perf_counter() - t0) * 1e3
    warm = times[steps // 10:]
    report = BenchReport(method, float(warm.mean()), float(warm.std(ddof=1)), steps, times)
    if report.cv > 0.25:
        warnings.warn(f"bench {method}: per-step time varies by {report.cv:.0%}; machine may be busy")
    return report


ORDERING = (("lcss", "dsm", 1.1), ("dsm", "fdssm", 1.0), ("fdssm", "ssm", 1.0))


def ordering_verdict(reports):
    """Check time(lcss) <= 1.1 time(dsm) < time(fdssm) < time(ssm) over the methods present.

    Returns (ok, lines); comparisons with a missing method are skipped, so a
    single method gives a vacuous pass.
    """
    ms = {r.method: r.mean_ms for r in reports}
    ok, lines = True, []
    for fast, slow, factor in ORDERING:
        if fast in ms and slow in ms:
            good = ms[fast] <= factor * ms[slow] if factor != 1.0 else ms[fast] < ms[slow]
            rel = "<=" if factor != 1.0 else "<"
            scale = f"{factor:g}*" if factor != 1.0 else ""
            lines.append(f"{fast} {rel} {scale}{slow}: {ms[fast]:.1f} vs {ms[slow]:.1f} ms "
                         f"{'ok' if good else 'VIOLATED'}")
            ok &= good
    if not lines:
        lines.append("ordering: vacuous (fewer than two comparable methods)")
    return ok, lines


def write_bench_csv(reports, path):
    with open(path, "w", newline="") as fh:
        fh.write("method,mean_ms,std_ms,steps\n")
        for r in reports:
            fh.write(f"{r.method},{r.mean_ms:.6g},{r.std_ms:.6g},{r.steps}\n")
