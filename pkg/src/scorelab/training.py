"""Training loop shared by the CLI and the benchmark harness."""

import numpy as np

from . import autodiff as ad
from . import rng as rngs
from .errors import DivergenceError, ParameterError
from .objectives import ObjectiveSpec, objective_loss, sdm_loss

METHODS = {
    "sm": "SM",
    "ssm": "SSM",
    "fdssm": "FDSSM",
    "dsm": "DSM",
    "lcs": "LCS_EXACT",
    "lcss": "LCSS",
}


def make_spec(method, sigma=0.1, epsilon=None, gamma=None, mc_samples=1):
    """ObjectiveSpec for a CLI method name.  ``lcss`` with gamma != 1 selects LCSS_GAMMA."""
    try:
        kind = METHODS[method]
    except KeyError:
        raise ParameterError(f"unknown method {method!r}; choose from {', '.join(METHODS)}") from None
    if epsilon is None:
        epsilon = 0.1 if kind == "FDSSM" else 1.0
    if kind == "LCSS" and gamma is not None and gamma != 1.0:
        kind = "LCSS_GAMMA"
    return ObjectiveSpec(kind=kind, sigma=sigma, epsilon=epsilon,
                         gamma=1.0 if gamma is None else gamma, mc_samples=mc_samples)


def loss_and_grad(net, spec, x, rng, sde=None):
    """(loss, flat gradient w.r.t. theta) for one batch, on a fresh tape."""
    with ad.Tape():
        if sde is not None:
            loss = sdm_loss(net, x, sde, spec, rng)
        else:
            loss = objective_loss(spec, net, x, rng)
        grads = ad.backward(loss, net.leaves)
    return float(loss.data), net.flatten(grads)


def train(net, spec, dataset, iters, batch, optimizer, seed, sde=None, callback=None):
    """Run ``iters`` optimisation steps; returns the per-step losses.

    Batches come from ``dataset.sample`` on the DATA stream and objective
    noise from the NOISE stream, so a run is fully determined by ``seed``.
    ``callback(step, loss, net)`` is called after every successful update.
    A non-finite loss or gradient raises DivergenceError before the update,
    leaving ``net`` at its last good state.
    """
    if iters < 0 or batch < 1:
        raise ParameterError("need iters >= 0 and batch >= 1")
    data_rng = rngs.stream(seed, rngs.DATA)
    noise_rng = rngs.stream(seed, rngs.NOISE)
    losses = np.empty(iters)
    for step in range(iters):
        x = dataset.sample(batch, data_rng)
        loss, g = loss_and_grad(net, spec, x, noise_rng, sde)
        if not (np.isfinite(loss) and np.all(np.isfinite(g))):
            raise DivergenceError(f"non-finite loss at step {step}", step)
        optimizer.step(net, g)
        losses[step] = loss
        if callback is not None:
            callback(step, loss, net)
    return losses
