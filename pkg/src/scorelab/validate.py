"""Registry of fast self-checks run by ``scorelab validate``.

Each check returns (passed, statistic).  Monte Carlo checks use the
standardized-discrepancy bar of 4 standard errors.
"""

import io
import itertools
import os
import tempfile

import numpy as np

from . import autodiff as ad
from . import eval as ev
from . import objectives as ob
from .datasets import GaussianMixture
from .nets import MlpConfig, ScoreNet, init, load_checkpoint, save_checkpoint
from .rng import stream
from .sde import SdeSchedule, langevin, reverse_em

CHECKS = {}


def check(name):
    def register(fn):
        CHECKS[name] = fn
        return fn
    return register


_A = np.array([[-1.0, 0.3], [0.2, -2.0]])


@check("sm_exact_linear")
def _sm_exact_linear(seed):
    with ad.Tape():
        val = ob.sm_exact(ScoreNet.linear(np.diag([-1.0, -2.0])), np.zeros(2)).data
    return val == -3.0, float(val)


@check("ssm_rademacher_enumeration")
def _ssm_enumeration(seed):
    net = ScoreNet.linear(_A)
    x = np.array([0.5, -1.0])
    with ad.Tape():
        exact = ob.sm_exact(net, x).data
        vals = [ob.ssm(net, x, noise=np.array(u) / np.sqrt(2)).data
                for u in itertools.product((-1.0, 1.0), repeat=2)]
    gap = abs(np.mean(vals) - exact / 2)
    return gap < 1e-12, gap


@check("fdssm_first_term_linear")
def _fdssm_first_term(seed):
    net = ScoreNet.linear(_A)
    rng = stream(seed, 4)
    x = rng.standard_normal((8, 2))
    v = ob.ProjectionSampler(epsilon=0.1).draw(x.shape, rng)
    with ad.Tape():
        a = ob.ssm_terms(net, x, v, 0.1)[0].data
        b = ob.fd_ssm_terms(net, x, v, 0.1)[0].data
    gap = float(np.max(np.abs(a - b)))
    return gap < 1e-9, gap


@check("lcss_matches_lcs_exact")
def _lcss_vs_lcs(seed):
    net = ScoreNet.linear(np.diag([-1.0, -2.0]))
    rng = stream(seed, 4)
    n, sigma = 200_000, 0.5
    x = np.ones((n, 2))
    with ad.Tape():
        rows = ob.lcss_rows(net, x, rng.standard_normal((n, 2)), sigma).data
        target = ob.lcs_exact(net, np.ones(2), sigma).data
    z = float(ev.standardized(rows.mean() - target, rows.std(ddof=1) / np.sqrt(n)))
    return z < ev.PASS_BAR, z


@check("lcss_gamma_one_bitwise")
def _gamma_one(seed):
    net = init(MlpConfig(2, hidden=(8,)), seed)
    rng = stream(seed, 4)
    x, z = rng.standard_normal((16, 2)), rng.standard_normal((16, 2))
    with ad.Tape():
        a = ob.lcss(net, x, 0.3, noise=z).data
        b = ob.lcss(net, x, 0.3, gamma=1.0, noise=z).data
    return bool(a == b), float(abs(a - b))


@check("dsm_target_hand_case")
def _dsm_target(seed):
    got = ob.dsm_target(np.array([1.0, 0.0]), np.array([1.5, 0.0]), 0.5)
    gap = float(np.max(np.abs(got - np.array([-2.0, 0.0]))))
    return gap == 0.0, gap


@check("stein_identity_linear")
def _stein_identity(seed):
    rep = ev.stein_check(lambda z: z, np.array([0.5, -1.0]), 0.7, 20_000, stream(seed, 4))
    return rep.passed, rep.max_discrepancy


@check("stein_square_1d")
def _stein_square(seed):
    rep = ev.stein_check(lambda z: ad.mul(z, z), np.array([1.0]), 1.0, 20_000, stream(seed, 4),
                         exact_rhs=2.0)
    return rep.passed, rep.max_discrepancy


@check("trace_estimator_rate")
def _trace_rate(seed):
    rep = ev.lcss_trace_convergence(ScoreNet.linear(_A), np.zeros(2), 0.1, [100, 1000, 10_000],
                                    stream(seed, 4), replicates=40, reference=np.trace(_A))
    return -0.65 <= rep.slope <= -0.35, rep.slope


@check("interchange_common_numbers")
def _interchange(seed):
    net = init(MlpConfig(2, hidden=(16,)), seed)
    rep = ev.interchange_check(net, np.array([0.3, -0.2]), 0.2, 20_000, stream(seed, 4))
    return rep.discrepancy <= 1e-12 * max(1.0, abs(rep.expectation_of_sum)), rep.discrepancy


@check("smoothing_residual_linear")
def _smoothing_linear(seed):
    r = ev.smoothing_residual(ScoreNet.linear(_A), np.array([1.0, 1.0]), 0.5, nodes=8)
    return abs(r) < 1e-10, abs(r)


@check("hutchinson_identity_exact")
def _hutchinson(seed):
    rep = ob.hutchinson_error_bound_check(np.eye(2), 4, 1000, stream(seed, 4))
    return rep.rms_error == 0.0, rep.rms_error


@check("langevin_stationary_variance")
def _langevin(seed):
    eps = 0.1
    rng = stream(seed, 3)
    x = langevin(lambda y: -y, rng.standard_normal((10_000, 1)), eps, 300, rng)
    rel = abs(x.var() / (1.0 / (1.0 - eps / 4)) - 1.0)
    return rel < 0.1, rel


@check("reverse_em_gaussian_moments")
def _reverse_em(seed):
    sde = SdeSchedule("ve")
    rng = stream(seed, 3)

    def score(x, t):
        return -x / (1.0 + sde.marginal_std(t) ** 2)

    x_T = np.sqrt(1.0 + sde.sigma_max ** 2) * rng.standard_normal((10_000, 1))
    x = reverse_em(sde, score, x_T, 500, rng)
    stat = max(abs(x.mean()) / 0.05, abs(x.var() - 1.0) / 0.1)
    return stat < 1.0, stat


@check("gmm_score_vs_log_density")
def _gmm_fd(seed):
    gmm = GaussianMixture.ring()
    x = stream(seed, 4).uniform(-4, 4, (20, 2))
    h = 1e-5
    fd = np.stack([(gmm.log_prob(x + h * e, 0.1) - gmm.log_prob(x - h * e, 0.1)) / (2 * h)
                   for e in np.eye(2)], axis=1)
    an = gmm.score(x, 0.1)
    rel = float(np.max(np.abs(fd - an)) / np.max(np.abs(an)))
    return rel < 1e-6, rel


@check("sdm_loss_finite_at_t_min")
def _sdm_finite(seed):
    sde = SdeSchedule("ve")
    net = init(MlpConfig(2, hidden=(16, 16), time_conditional=True), seed, sde)
    rng = stream(seed, 4)
    x = rng.standard_normal((32, 2))
    vals = []
    with ad.Tape():
        for kind in ("DSM", "LCSS"):
            vals.append(ob.sdm_loss(net, x, sde, ob.ObjectiveSpec(kind), rng, t=sde.t_min).data)
    worst = float(np.max(np.abs(vals)))
    return bool(np.all(np.isfinite(vals))), worst


@check("gradient_fd_lcss")
def _grad_check(seed):
    net = init(MlpConfig(2, hidden=(8,)), seed)
    rng = stream(seed, 4)
    x, z = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))

    def loss(theta):
        with ad.Tape():
            return ob.lcss(ScoreNet(net.config, theta), x, 0.5, noise=z).data

    with ad.Tape():
        g = net.flatten(ad.backward(ob.lcss(net, x, 0.5, noise=z), net.leaves))
    h = 1e-6
    fd = np.array([(loss(net.theta + h * e) - loss(net.theta - h * e)) / (2 * h)
                   for e in np.eye(net.theta.size)])
    rel = float(np.linalg.norm(fd - g) / np.linalg.norm(fd))
    return rel < 1e-3, rel


@check("checkpoint_roundtrip")
def _checkpoint(seed):
    net = init(MlpConfig(2, hidden=(4,)), seed)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "net.smlb")
        save_checkpoint(net, path)
        back = load_checkpoint(path, net.config)
    same = np.array_equal(back.theta.view(np.uint64), net.theta.view(np.uint64))
    return same, 0.0 if same else 1.0


def run_all(seed=0, out=None):
    """Run every registered check; write one ``name,status,statistic`` line each.

    Returns True when all checks pass.
    """
    out = out or io.StringIO()
    ok = True
    for name, fn in CHECKS.items():
        try:
            passed, stat = fn(seed)
            status = "pass" if passed else "FAIL"
        except Exception as exc:  # a crashing check is a failed check
            passed, stat, status = False, float("nan"), f"ERROR({type(exc).__name__})"
        ok &= bool(passed)
        out.write(f"{name},{status},{float(stat):.6g}\n")
    return ok
