"""CAL architecture: per-domain generators, decoders and discriminators
around one shared-entity embedding table, with hand-written backward passes.

Parameter arrays live in a flat dict keyed ``"<net>/<domain>/<W1|b1|W2|b2>"``
plus ``"V"`` for the embedding table. A parameter group is everything before
the last slash: ``G/<domain>``, ``F/<domain>``, ``D/<domain>`` or ``V``.

Every network is a two-layer perceptron with a tanh hidden layer. Generator
outputs are linear; decoder and discriminator outputs go through a sigmoid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .numeric import (
    AffineLayer,
    OptimizerState,
    RngStream,
    ShapeError,
    activation_apply,
    activation_backward,
    affine_backward,
    affine_forward,
    bce_loss,
    bce_sigmoid_grad,
)

CHECKPOINT_FORMAT = "calgraph-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ModelVariant:
    kind: str
    use_adversarial: bool
    use_cross_reconstruction: bool
    single_domain: bool


VARIANTS = {
    "cal": ModelVariant("cal", True, True, False),
    "aaepp": ModelVariant("aaepp", True, False, False),
    "aae": ModelVariant("aae", True, False, True),
    "cdae": ModelVariant("cdae", False, False, True),
}
VARIANT_ALIASES = {"aae++": "aaepp", "aae_pp": "aaepp"}


def get_variant(name: str | ModelVariant) -> ModelVariant:
    if isinstance(name, ModelVariant):
        return name
    key = VARIANT_ALIASES.get(name.lower(), name.lower())
    try:
        return VARIANTS[key]
    except KeyError:
        raise ConfigurationError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


@dataclass
class CalParams:
    variant: ModelVariant
    domains: tuple[str, ...]
    n_items: tuple[int, ...]
    n_shared: int
    latent_dim: int
    hidden_dim: int
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def items_of(self, domain: str) -> int:
        return self.n_items[self.domains.index(domain)]

    @property
    def dtype(self):
        return self.arrays["V"].dtype

    @property
    def groups(self) -> list[str]:
        seen = []
        for k in self.arrays:
            g = k.rsplit("/", 1)[0] if "/" in k else k
            if g not in seen:
                seen.append(g)
        return seen

    def keys_of(self, *nets: str) -> list[str]:
        """Array keys belonging to the given nets, e.g. ``keys_of("D")``."""
        return [k for k in self.arrays if k.split("/", 1)[0] in nets]

    @property
    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "CalParams":
        merged = dict(self.arrays)
        merged.update(arrays)
        return replace(self, arrays=merged)

    def copy(self) -> "CalParams":
        return replace(self, arrays={k: a.copy() for k, a in self.arrays.items()})

    def as_variant(self, variant, domains: Sequence[str] | None = None) -> "CalParams":
        """The same weights viewed as another (usually smaller) variant."""
        variant = get_variant(variant)
        domains = tuple(domains) if domains is not None else self.domains
        if variant.single_domain and len(domains) != 1:
            raise ConfigurationError(f"variant {variant.kind} takes exactly one domain")
        arrays = {"V": self.arrays["V"]}
        for d in domains:
            nets = ("G", "F", "D") if variant.use_adversarial else ("G", "F")
            for net in nets:
                for part in ("W1", "b1", "W2", "b2"):
                    key = f"{net}/{d}/{part}"
                    if key not in self.arrays:
                        raise ConfigurationError(f"parameters have no {key}")
                    arrays[key] = self.arrays[key]
        return CalParams(
            variant,
            domains,
            tuple(self.items_of(d) for d in domains),
            self.n_shared,
            self.latent_dim,
            self.hidden_dim,
            arrays,
        )


def build_model(
    variant,
    dims: Mapping[str, int],
    n_shared: int,
    latent_dim: int = 200,
    hidden_dim: int | None = None,
    init_seed: int = 0,
    dtype=np.float64,
    embedding_scale: float = 0.01,
) -> CalParams:
    """Initialise parameters for ``variant`` over the domains in ``dims``.

    Weights and biases are uniform in +-1/sqrt(fan_in). Each array draws from
    its own named stream, so adding a domain leaves the others untouched.
    """
    variant = get_variant(variant)
    hidden_dim = latent_dim if hidden_dim is None else hidden_dim
    if latent_dim < 1 or hidden_dim < 1:
        raise ConfigurationError("latent_dim and hidden_dim must be at least 1")
    if n_shared < 1 or not dims or min(dims.values()) < 1:
        raise ConfigurationError("need at least one shared entity and one item per domain")
    if variant.single_domain and len(dims) != 1:
        raise ConfigurationError(f"variant {variant.kind} takes exactly one domain, got {list(dims)}")
    if not variant.single_domain and len(dims) < 2:
        raise ConfigurationError(f"variant {variant.kind} needs at least two domains")
    root = RngStream(init_seed, ("init",))

    def uniform(key, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return root.split(key).uniform(-bound, bound, size=shape).astype(dtype)

    arrays = {}
    for d, n in dims.items():
        shapes = {
            "G": [(hidden_dim, n), (latent_dim, hidden_dim)],
            "F": [(hidden_dim, latent_dim), (n, hidden_dim)],
            "D": [(hidden_dim, latent_dim), (1, hidden_dim)],
        }
        nets = ("G", "F", "D") if variant.use_adversarial else ("G", "F")
        for net in nets:
            for layer, (out_dim, in_dim) in enumerate(shapes[net], start=1):
                prefix = f"{net}/{d}"
                arrays[f"{prefix}/W{layer}"] = uniform(f"{prefix}/W{layer}", (out_dim, in_dim), in_dim)
                arrays[f"{prefix}/b{layer}"] = uniform(f"{prefix}/b{layer}", (out_dim,), in_dim)
    arrays["V"] = (embedding_scale * root.split("V").standard_normal((n_shared, latent_dim))).astype(dtype)
    return CalParams(variant, tuple(dims), tuple(dims.values()), n_shared, latent_dim, hidden_dim, arrays)


# --------------------------------------------------------------------------
# two-layer perceptrons

OUTPUT_ACTIVATION = {"G": "identity", "F": "sigmoid", "D": "sigmoid"}


def _layers(arrays, prefix):
    return (
        AffineLayer(arrays[f"{prefix}/W1"], arrays[f"{prefix}/b1"]),
        AffineLayer(arrays[f"{prefix}/W2"], arrays[f"{prefix}/b2"]),
    )


def mlp_forward(arrays, prefix: str, x: np.ndarray):
    """Run one perceptron. Returns ``(output, cache)``."""
    l1, l2 = _layers(arrays, prefix)
    pre1, c1 = affine_forward(l1, x)
    h = activation_apply("tanh", pre1)
    pre2, c2 = affine_forward(l2, h)
    out = activation_apply(OUTPUT_ACTIVATION[prefix[0]], pre2)
    return out, (c1, c2, h)


def mlp_backward(arrays, prefix: str, cache, d_pre_out: np.ndarray, grads: dict | None):
    """Backprop a gradient taken w.r.t. the output *pre-activation*.

    Adds parameter gradients into ``grads`` (skipped when None) and returns
    the gradient w.r.t. the perceptron's input.
    """
    l1, l2 = _layers(arrays, prefix)
    c1, c2, h = cache
    dh, dw2, db2 = affine_backward(l2, c2, d_pre_out)
    d_pre1 = activation_backward("tanh", h, dh)
    dx, dw1, db1 = affine_backward(l1, c1, d_pre1)
    if grads is not None:
        for part, g in (("W1", dw1), ("b1", db1), ("W2", dw2), ("b2", db2)):
            key = f"{prefix}/{part}"
            grads[key] = grads[key] + g if key in grads else g
    return dx


# --------------------------------------------------------------------------
# forward operations


def _check_domain(params: CalParams, domain: str):
    if domain not in params.domains:
        raise ConfigurationError(f"model has no domain {domain!r}; have {list(params.domains)}")


def _check_users(params: CalParams, users):
    users = np.asarray(users, dtype=np.int64)
    if users.size and (users.min() < 0 or users.max() >= params.n_shared):
        raise IndexError(f"shared-entity index out of range [0, {params.n_shared})")
    return users


def encode(params: CalParams, domain: str, x_tilde: np.ndarray, u) -> np.ndarray:
    """Latent code: generator output plus the entity's shared embedding row."""
    _check_domain(params, domain)
    x_tilde = np.asarray(x_tilde, dtype=params.dtype)
    if x_tilde.shape[-1] != params.items_of(domain):
        raise ShapeError(f"input has {x_tilde.shape[-1]} items, domain {domain!r} has {params.items_of(domain)}")
    u = _check_users(params, u)
    g, _ = mlp_forward(params.arrays, f"G/{domain}", x_tilde)
    return g + params.arrays["V"][u]


def decode(params: CalParams, domain: str, z: np.ndarray) -> np.ndarray:
    _check_domain(params, domain)
    out, _ = mlp_forward(params.arrays, f"F/{domain}", np.asarray(z, dtype=params.dtype))
    return out


def discriminate(params: CalParams, domain: str, z: np.ndarray):
    """Probability that ``z`` was drawn from the prior; scalar for one code."""
    _check_domain(params, domain)
    if not params.variant.use_adversarial:
        raise ConfigurationError(f"variant {params.variant.kind} has no discriminators")
    out, _ = mlp_forward(params.arrays, f"D/{domain}", np.asarray(z, dtype=params.dtype))
    return out[..., 0] if np.ndim(z) > 1 else float(out[0])


def predict(params: CalParams, domain: str, x_u: np.ndarray, u, include_embedding: bool = True) -> np.ndarray:
    """Scores for every item of ``domain`` from an uncorrupted training row.

    With ``include_embedding=False`` the shared embedding is left out of
    the latent code, i.e. the decoder sees the bare generator output.
    """
    _check_domain(params, domain)
    u = _check_users(params, u)
    x_u = np.asarray(x_u, dtype=params.dtype)
    z, _ = mlp_forward(params.arrays, f"G/{domain}", x_u)
    if include_embedding:
        z = z + params.arrays["V"][u]
    return decode(params, domain, z)


# --------------------------------------------------------------------------
# losses


@dataclass
class LossBreakdown:
    rec_self: dict[str, float] = field(default_factory=dict)
    rec_cross: dict[tuple[str, str], float] = field(default_factory=dict)
    adv_g: dict[str, float] = field(default_factory=dict)
    adv_d: dict[str, float] = field(default_factory=dict)
    lambda_adv: float = 1.0

    @property
    def rec_total(self) -> float:
        return sum(self.rec_self.values()) + sum(self.rec_cross.values())

    @property
    def total(self) -> float:
        return total_generator_loss(self, self.lambda_adv)

    def record(self) -> dict[str, float]:
        """Flat name -> value mapping used in logs."""
        out = {f"rec_self/{d}": v for d, v in self.rec_self.items()}
        out.update({f"rec_cross/{s}->{t}": v for (s, t), v in self.rec_cross.items()})
        out.update({f"adv_g/{d}": v for d, v in self.adv_g.items()})
        out.update({f"adv_d/{d}": v for d, v in self.adv_d.items()})
        out["total"] = self.total
        return out

    @classmethod
    def mean(cls, parts: Sequence["LossBreakdown"]) -> "LossBreakdown":
        out = cls(lambda_adv=parts[0].lambda_adv if parts else 1.0)
        for name in ("rec_self", "rec_cross", "adv_g", "adv_d"):
            keys = getattr(parts[0], name).keys() if parts else ()
            setattr(out, name, {k: float(np.mean([getattr(p, name)[k] for p in parts])) for k in keys})
        return out

    def nonfinite_terms(self) -> list[str]:
        return [k for k, v in self.record().items() if not np.isfinite(v)]


def total_generator_loss(breakdown: LossBreakdown, lambda_adv: float = 1.0) -> float:
    return breakdown.rec_total + lambda_adv * sum(breakdown.adv_g.values())


def _recon_targets(params: CalParams, source: str) -> list[str]:
    if params.variant.use_cross_reconstruction:
        return list(params.domains)
    return [source]


def _validate_batch(params, users, targets, corrupted):
    if params.variant.single_domain and len(params.domains) != 1:
        raise ConfigurationError(f"variant {params.variant.kind} with {len(params.domains)} active domains")
    users = _check_users(params, users)
    if users.size == 0:
        raise ValueError("empty batch")
    for d in params.domains:
        for what, arr in (("target", targets), ("corrupted input", corrupted)):
            if d not in arr:
                raise ConfigurationError(f"missing {what} rows for domain {d!r}")
            if arr[d].shape != (len(users), params.items_of(d)):
                raise ShapeError(f"{what} for {d!r} has shape {arr[d].shape}")
    return users


def generator_loss_and_grads(
    params: CalParams,
    users,
    targets: Mapping[str, np.ndarray],
    corrupted: Mapping[str, np.ndarray],
    lambda_adv: float = 1.0,
    saturating: bool = False,
    need_grads: bool = True,
):
    """Generator-phase loss (reconstruction + weighted adversarial) and its gradients.

    ``targets`` are the uncorrupted rows, ``corrupted`` the encoder inputs,
    both keyed by domain with one row per entry of ``users``. Discriminator
    weights act as constants: their entries in the returned gradients are
    zero. All terms are means over the batch.
    """
    users = _validate_batch(params, users, targets, corrupted)
    arrays = params.arrays
    B = len(users)
    grads = {k: np.zeros_like(a) for k, a in arrays.items()} if need_grads else None
    bd = LossBreakdown(lambda_adv=lambda_adv)

    enc = {}
    for d in params.domains:
        g_out, cache = mlp_forward(arrays, f"G/{d}", corrupted[d])
        enc[d] = (g_out + arrays["V"][users], cache)

    for s in params.domains:
        z, g_cache = enc[s]
        dz = np.zeros_like(z) if need_grads else None
        for t in _recon_targets(params, s):
            prob, f_cache = mlp_forward(arrays, f"F/{t}", z)
            loss = bce_loss(targets[t], prob) / B
            if s == t:
                bd.rec_self[s] = loss
            else:
                bd.rec_cross[(s, t)] = loss
            if need_grads:
                d_logit = bce_sigmoid_grad(targets[t], prob) / B
                dz += mlp_backward(arrays, f"F/{t}", f_cache, d_logit, grads)

        if params.variant.use_adversarial:
            prob, d_cache = mlp_forward(arrays, f"D/{s}", z)
            if saturating:
                # minimise mean log(1 - D(z))
                zeros = np.zeros_like(prob)
                bd.adv_g[s] = -bce_loss(zeros, prob) / B
                d_logit = -bce_sigmoid_grad(zeros, prob) / B
            else:
                ones = np.ones_like(prob)
                bd.adv_g[s] = bce_loss(ones, prob) / B
                d_logit = bce_sigmoid_grad(ones, prob) / B
            if need_grads and lambda_adv != 0.0:
                dz += lambda_adv * mlp_backward(arrays, f"D/{s}", d_cache, d_logit, None)

        if need_grads:
            np.add.at(grads["V"], users, dz)
            mlp_backward(arrays, f"G/{s}", g_cache, dz, grads)
    return bd, grads


def reconstruction_loss(params: CalParams, users, targets, corrupted) -> LossBreakdown:
    """Self and (if the variant has them) cross reconstruction terms only."""
    bd, _ = generator_loss_and_grads(params, users, targets, corrupted, need_grads=False)
    return LossBreakdown(rec_self=bd.rec_self, rec_cross=bd.rec_cross)


def adversarial_g_loss(params: CalParams, domain: str, z_enc: np.ndarray, saturating: bool = False) -> float:
    z_enc = np.atleast_2d(z_enc)
    if len(z_enc) == 0:
        raise ValueError("empty batch")
    prob = np.atleast_1d(discriminate(params, domain, z_enc))
    if saturating:
        return -bce_loss(np.zeros_like(prob), prob) / len(prob)
    return bce_loss(np.ones_like(prob), prob) / len(prob)


def adversarial_d_loss(params: CalParams, domain: str, z_enc: np.ndarray, z_prior: np.ndarray) -> float:
    losses, _ = discriminator_loss_and_grads(
        params, {domain: np.atleast_2d(z_enc)}, {domain: np.atleast_2d(z_prior)}, need_grads=False
    )
    return losses[domain]


def discriminator_loss_and_grads(
    params: CalParams,
    z_enc: Mapping[str, np.ndarray],
    z_prior: Mapping[str, np.ndarray],
    need_grads: bool = True,
):
    """Per-domain discriminator loss ``-mean[log D(prior) + log(1 - D(enc))]``.

    Encoded codes are constants here, so only discriminator entries of the
    returned gradient dict are nonzero.
    """
    if not params.variant.use_adversarial:
        raise ConfigurationError(f"variant {params.variant.kind} has no discriminators")
    arrays = params.arrays
    grads = {k: np.zeros_like(a) for k, a in arrays.items()} if need_grads else None
    losses = {}
    for d, ze in z_enc.items():
        zp = z_prior[d]
        if len(ze) == 0 or len(zp) == 0:
            raise ValueError("empty batch")
        if len(ze) != len(zp):
            raise ValueError("one prior draw per encoded sample is required")
        B = len(ze)
        p_prior, c_prior = mlp_forward(arrays, f"D/{d}", np.asarray(zp, dtype=params.dtype))
        p_enc, c_enc = mlp_forward(arrays, f"D/{d}", np.asarray(ze, dtype=params.dtype))
        ones, zeros = np.ones_like(p_prior), np.zeros_like(p_enc)
        losses[d] = (bce_loss(ones, p_prior) + bce_loss(zeros, p_enc)) / B
        if need_grads:
            mlp_backward(arrays, f"D/{d}", c_prior, bce_sigmoid_grad(ones, p_prior) / B, grads)
            mlp_backward(arrays, f"D/{d}", c_enc, bce_sigmoid_grad(zeros, p_enc) / B, grads)
    return losses, grads


def encode_batch(params: CalParams, users, corrupted: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    users = _check_users(params, users)
    return {d: encode(params, d, corrupted[d], users) for d in params.domains}


# --------------------------------------------------------------------------
# checkpoints


def _optimizer_meta(state: OptimizerState) -> dict:
    return {
        "kind": state.kind,
        "learning_rate": state.learning_rate,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "epsilon": state.epsilon,
        "step": state.step,
    }


def save_checkpoint(
    path,
    params: CalParams,
    optimizers: Mapping[str, OptimizerState] | None = None,
    rng_state: dict | None = None,
    meta: dict | None = None,
) -> None:
    """Write parameters (and optionally optimizer/RNG state) to an ``.npz``."""
    optimizers = dict(optimizers or {})
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": params.variant.kind,
        "domains": list(params.domains),
        "n_items": list(params.n_items),
        "n_shared": params.n_shared,
        "latent_dim": params.latent_dim,
        "hidden_dim": params.hidden_dim,
        "dtype": np.dtype(params.dtype).name,
        "param_keys": list(params.arrays),
        "optimizers": {n: _optimizer_meta(s) for n, s in optimizers.items()},
        "rng_state": rng_state,
        "meta": meta or {},
    }
    payload = {f"param:{k}": a for k, a in params.arrays.items()}
    for name, st in optimizers.items():
        for k, a in st.m.items():
            payload[f"opt:{name}:m:{k}"] = a
        for k, a in st.v.items():
            payload[f"opt:{name}:v:{k}"] = a
    payload["__header__"] = np.array(json.dumps(header))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Return ``(params, optimizers, header)``."""
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        arrays = {k: z[f"param:{k}"] for k in header["param_keys"]}
        optimizers = {}
        for name, meta in header["optimizers"].items():
            m = {k[len(f"opt:{name}:m:"):]: z[k] for k in z.files if k.startswith(f"opt:{name}:m:")}
            v = {k[len(f"opt:{name}:v:"):]: z[k] for k in z.files if k.startswith(f"opt:{name}:v:")}
            optimizers[name] = OptimizerState(m=m, v=v, **meta)
    params = CalParams(
        get_variant(header["variant"]),
        tuple(header["domains"]),
        tuple(header["n_items"]),
        header["n_shared"],
        header["latent_dim"],
        header["hidden_dim"],
        arrays,
    )
    return params, optimizers, header
