"""Finite-difference verification of every parameter group of every variant."""

from __future__ import annotations

import numpy as np

from .data import SynthConfig, corrupt, gen_synthetic
from .model import (
    VARIANTS,
    CalParams,
    build_model,
    discriminator_loss_and_grads,
    encode_batch,
    generator_loss_and_grads,
)
from .numeric import GradCheckReport, RngStream, gaussian_sample, grad_check


def toy_problem(seed: int = 0, n_shared: int = 4, n_items: int = 6, latent_dim: int = 3, hidden_dim: int = 4):
    """A tiny two-domain instance with fixed corrupted inputs and prior draws."""
    data = gen_synthetic(
        SynthConfig(n_shared=n_shared, n_domains=2, items_per_domain=n_items, n_clusters=2, p_in=0.6, p_out=0.2, seed=seed)
    )
    rng = RngStream(seed, ("gradcheck",))
    users = np.arange(n_shared)
    targets = {d: data[d].dense(users) for d in data.names}
    corrupted = {d: corrupt(targets[d], 0.3, rng.split(f"corrupt/{d}")) for d in data.names}
    prior = {d: gaussian_sample(rng.split(f"prior/{d}"), (n_shared, latent_dim)) for d in data.names}
    return data, users, targets, corrupted, prior, (latent_dim, hidden_dim)


def check_params(params: CalParams, users, targets, corrupted, prior, lambda_adv=1.0, h=1e-5, tol=1e-4,
                 saturating=False, generator_grads=generator_loss_and_grads) -> GradCheckReport:
    """Check generator-side groups against the generator loss and
    discriminator groups against the discriminator loss."""
    base = params.arrays
    g_keys = params.keys_of("G", "F", "V")
    d_keys = params.keys_of("D")

    def g_loss(arrays):
        p = params.with_arrays(arrays)
        bd, grads = generator_grads(p, users, targets, corrupted, lambda_adv, saturating)
        return bd.total, grads

    report = grad_check(g_loss, base, h=h, tol=tol, keys=g_keys)
    if d_keys:
        z_enc = encode_batch(params, users, corrupted)

        def d_loss(arrays):
            p = params.with_arrays(arrays)
            losses, grads = discriminator_loss_and_grads(p, z_enc, {d: prior[d] for d in p.domains})
            return sum(losses.values()), grads

        d_report = grad_check(d_loss, base, h=h, tol=tol, keys=d_keys)
        report.max_rel_error.update(d_report.max_rel_error)
        report.nonfinite.extend(d_report.nonfinite)
    return report


def gradcheck_all(seed: int = 0, h: float = 1e-5, tol: float = 1e-4, variants=None, **kw) -> dict[str, GradCheckReport]:
    data, users, targets, corrupted, prior, (latent, hidden) = toy_problem(seed)
    out = {}
    for name in variants or VARIANTS:
        variant = VARIANTS[name]
        names = data.names[:1] if variant.single_domain else data.names
        params = build_model(variant, {d: data[d].n_items for d in names}, data.n_shared, latent, hidden, init_seed=seed)
        # a larger embedding keeps the shared-embedding path well exercised
        params.arrays["V"] = RngStream(seed, ("gradcheck", "V")).normal(0, 0.5, params.arrays["V"].shape)
        out[name] = check_params(params, users, targets, corrupted, prior, h=h, tol=tol, **kw)
    return out
