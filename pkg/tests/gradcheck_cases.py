"""Random small instances of the VTC objective for finite-difference checks."""

import numpy as np
import torch

from fedvtc.losses import dm_loss, elbo_loss, vtc_loss

import oracles

STEP = 1e-5


def random_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    p = int(rng.integers(2, 5))
    d = int(rng.integers(3, 7))
    n_cls = int(rng.integers(1, 4))
    y = np.concatenate([np.arange(n_cls), rng.integers(0, n_cls, max(0, n - n_cls))])[:n]
    return {
        "x": rng.random((n, d)),
        "x_gen": rng.random((n, d)),
        "z": rng.normal(size=(n, p)),
        "latent_gen": rng.normal(size=(n, p)),
        "sigma": rng.uniform(0.3, 2.0, p),
        "y": y,
        "protos": {k: rng.normal(size=p) for k in range(n_cls)},
        "lam": float(rng.uniform(0.01, 1.0)),
    }


def ltc_value(inst, **override):
    v = {**inst, **override}
    T = lambda a: torch.as_tensor(a, dtype=torch.float64)  # noqa: E731
    protos = {k: T(c) for k, c in v["protos"].items()}
    labels = torch.as_tensor(v["y"])
    elbo = elbo_loss(T(v["x"]), T(v["z"]), T(v["x_gen"]), labels, protos, T(v["sigma"]))
    return vtc_loss(elbo, dm_loss(T(v["latent_gen"]), labels, protos), v["lam"]).total


def gradient_errors(seed):
    """Relative error between autograd and central differences for each input."""
    inst = random_instance(seed)
    errors = {}
    for name in ("z", "sigma", "x_gen", "latent_gen"):
        leaf = torch.tensor(inst[name], dtype=torch.float64, requires_grad=True)
        ltc_value(inst, **{name: leaf}).backward()
        numeric = oracles.central_difference(lambda a: float(ltc_value(inst, **{name: a})), inst[name], STEP)
        errors[name] = oracles.relative_error(leaf.grad.numpy(), numeric)
    return errors
