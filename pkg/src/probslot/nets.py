"""Piecewise-affine encoder/decoder, Adam, and the slot autoencoder trainer."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from ._alloc import tune_allocator
from .errors import ContractError, NumericalError
from .psa import PsaParams, PsaState, Variant, psa_init, run_psa

log = logging.getLogger(__name__)

RANK_TOL = 1e-6


@dataclass
class AffineLayer:
    weight: object  # (n_out, n_in)
    bias: object  # (n_out,)

    @property
    def n_in(self) -> int:
        return ad.value_of(self.weight).shape[1]

    @property
    def n_out(self) -> int:
        return ad.value_of(self.weight).shape[0]

    def min_singular_value(self) -> float:
        return float(np.linalg.svd(ad.value_of(self.weight), compute_uv=False).min())


@dataclass
class Network:
    """``h_t o lrelu o h_{t-1} o ... o lrelu o h_1`` with affine ``h_i``."""

    layers: list[AffineLayer]
    slope: float = 0.2

    def __post_init__(self) -> None:
        if not self.layers:
            raise ContractError("network needs at least one layer")
        if not 0.0 < self.slope <= 1.0:
            raise ContractError(f"leaky slope must be in (0, 1], got {self.slope}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.n_out != nxt.n_in:
                raise ContractError(f"layer widths do not chain: {prev.n_out} -> {nxt.n_in}")

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.n_in,) + tuple(layer.n_out for layer in self.layers)

    def __call__(self, x):
        return net_forward(self, x)


def full_rank_layer(n_in: int, n_out: int, rng: np.random.Generator, gain: float = 1.0) -> AffineLayer:
    """Orthogonal-ish init: QR of a Gaussian matrix, so the weight has full rank."""
    big, small = max(n_in, n_out), min(n_in, n_out)
    q, r = np.linalg.qr(rng.standard_normal((big, small)))
    q = q * np.sign(np.diag(r))
    w = q if n_out >= n_in else q.T
    w = gain * w * math.sqrt(max(1.0, n_out / n_in))
    layer = AffineLayer(w, np.zeros(n_out))
    if layer.min_singular_value() <= RANK_TOL:
        raise NumericalError("initial weight is rank deficient")
    return layer


def init_network(
    widths: Iterable[int],
    rng: np.random.Generator,
    slope: float = 0.2,
    non_decreasing: bool = False,
) -> Network:
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise ContractError("need at least input and output widths")
    # the final readout layer is exempt: it maps to the fixed output dimension
    hidden = widths[:-1]
    if non_decreasing and any(b < a for a, b in zip(hidden, hidden[1:])):
        raise ContractError(f"decoder widths must be non-decreasing, got {widths}")
    layers = [full_rank_layer(a, b, rng) for a, b in zip(widths, widths[1:])]
    return Network(layers, slope)


def net_forward(net: Network, x):
    """Alternating affine / leaky-rectifier layers; the last layer is linear."""
    n_in = ad.value_of(x).shape[-1]
    if n_in != net.n_in:
        raise ContractError(f"input has dim {n_in}, network expects {net.n_in}")
    h = x
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        h = ad.add(ad.matmul(h, ad.swapaxes(layer.weight, -1, -2)), layer.bias)
        if i < last:
            h = ad.leaky_relu(h, net.slope)
    return h


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    moments: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ContractError(f"grad shape {g.shape} != param shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r}; step aborted")
    moments.step += 1
    t = moments.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        p = params[name]
        m = moments.m.get(name)
        v = moments.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        moments.m[name] = m
        moments.v[name] = v
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- slot autoencoder ----------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 300
    batch_size: int = 32
    T: int = 5
    K: int = 5
    d: int = 2
    variant: str = "base"
    seed: int = 0
    slope: float = 0.2
    encoder_hidden: tuple[int, ...] = (16, 16)
    decoder_hidden: tuple[int, ...] = (16, 16)
    decoder: str = "nonadditive"  # or "additive"
    learn_query: bool = True
    clip_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self) -> None:
        self.encoder_hidden = tuple(int(w) for w in self.encoder_hidden)
        self.decoder_hidden = tuple(int(w) for w in self.decoder_hidden)
        if self.lr <= 0 or not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError("lr must be positive and decay rates in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.T < 1 or self.K < 1 or self.d < 1:
            raise ContractError("epochs >= 0 and batch_size, T, K, d >= 1 required")
        if self.decoder not in ("nonadditive", "additive"):
            raise ContractError(f"unknown decoder wiring {self.decoder!r}")
        Variant(self.variant)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class SlotAutoencoder:
    """Point-set autoencoder: encoder -> PSA -> decoder.

    ``slot_init_loc``/``slot_init_scale`` define the distribution of the
    initial slot means; the defaults give N(0, I).
    """

    encoder: Network
    psa: PsaParams
    decoder: Network
    K: int
    T: int
    wiring: str = "nonadditive"
    slot_init_loc: np.ndarray = field(default_factory=lambda: np.zeros(2))
    slot_init_scale: np.ndarray = field(default_factory=lambda: np.ones(2))

    @property
    def d(self) -> int:
        return self.psa.dim

    def parameters(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for prefix, net in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, layer in enumerate(net.layers):
                out[f"{prefix}.{i}.weight"] = layer.weight
                out[f"{prefix}.{i}.bias"] = layer.bias
        out["psa.w_q"] = self.psa.w_q
        out["psa.w_k"] = self.psa.w_k
        out["psa.w_v"] = self.psa.w_v
        return out

    def trainable_names(self, learn_query: bool = True) -> list[str]:
        names = [n for n in self.parameters() if not n.startswith("psa.")]
        if learn_query:
            names.append("psa.w_q")
        if self.psa.variant is not Variant.BASE:
            names += ["psa.w_k", "psa.w_v"]
        return names

    def with_parameters(self, values: dict[str, object]) -> SlotAutoencoder:
        """Shallow copy with the named parameters replaced."""

        def rebuild(prefix, net):
            layers = [
                AffineLayer(
                    values.get(f"{prefix}.{i}.weight", layer.weight),
                    values.get(f"{prefix}.{i}.bias", layer.bias),
                )
                for i, layer in enumerate(net.layers)
            ]
            return Network(layers, net.slope)

        psa = PsaParams.__new__(PsaParams)
        psa.w_q = values.get("psa.w_q", self.psa.w_q)
        psa.w_k = values.get("psa.w_k", self.psa.w_k)
        psa.w_v = values.get("psa.w_v", self.psa.w_v)
        psa.variant = self.psa.variant
        return dataclasses.replace(
            self,
            encoder=rebuild("encoder", self.encoder),
            decoder=rebuild("decoder", self.decoder),
            psa=psa,
        )

    def bind(self, tape: ad.Tape, names: Iterable[str]) -> tuple[SlotAutoencoder, dict[str, ad.Var]]:
        params = self.parameters()
        leaves = {n: tape.var(params[n], name=n) for n in names}
        return self.with_parameters(leaves), leaves

    def init_state(self, rng: np.random.Generator, batch_shape: tuple[int, ...]) -> PsaState:
        return psa_init(self.K, self.d, rng, batch_shape, self.slot_init_loc, self.slot_init_scale)


def build_model(config: TrainConfig, rng: np.random.Generator) -> SlotAutoencoder:
    d = config.d
    encoder = init_network((2,) + config.encoder_hidden + (d,), rng, config.slope)
    decoder = init_network((d,) + config.decoder_hidden + (2,), rng, config.slope, non_decreasing=True)
    psa = PsaParams.identity(d, config.variant)
    if config.variant != "base":
        psa.w_k = full_rank_layer(d, d, rng).weight
        psa.w_v = full_rank_layer(d, d, rng).weight
    return SlotAutoencoder(encoder, psa, decoder, config.K, config.T, config.decoder, np.zeros(d), np.ones(d))


class ForwardOutput:
    __slots__ = ("recon", "state", "attention", "features")

    def __init__(self, recon, state, attention, features):
        self.recon = recon
        self.state = state
        self.attention = attention
        self.features = features


def autoencode_forward(
    model: SlotAutoencoder,
    points,
    rng: np.random.Generator | None = None,
    init: PsaState | None = None,
) -> ForwardOutput:
    """Encode points, route them into K slots, reconstruct every point.

    Non-additive wiring decodes the attention-weighted slot mean per point,
    ``x_n = f_d(sum_k A_nk mu_k)``; additive wiring decodes each slot and
    mixes the outputs, ``x_n = sum_k A_nk f_d(mu_k)``.
    """
    pts = ad.value_of(points)
    if pts.ndim < 2 or pts.shape[-2] == 0:
        raise ContractError("each point set must be a non-empty (N, 2) array")
    if not np.all(np.isfinite(pts)):
        raise ContractError("points must be finite")
    z = net_forward(model.encoder, points)
    if not np.all(np.isfinite(ad.value_of(z))):
        raise NumericalError("encoder produced non-finite features")
    if init is None:
        if rng is None:
            raise ContractError("either rng or init is required")
        init = model.init_state(rng, pts.shape[:-2])
    state, attn = run_psa(z, model.psa, init, model.T)
    if model.wiring == "additive":
        recon = ad.matmul(attn.a, net_forward(model.decoder, state.mu))
    else:
        recon = net_forward(model.decoder, ad.matmul(attn.a, state.mu))
    return ForwardOutput(recon, state, attn, z)


def slot_decoder(model: SlotAutoencoder, attention):
    """One scene's flattened reconstruction as a function of its (K, d)
    slots, with the routing ``attention`` (N, K) held fixed."""
    a = np.asarray(attention, dtype=np.float64)

    def decode(slots):
        if model.wiring == "additive":
            out = ad.matmul(a, net_forward(model.decoder, slots))
        else:
            out = net_forward(model.decoder, ad.matmul(a, slots))
        return ad.reshape(out, (-1,))

    return decode


def reconstruction_loss(recon, points):
    """Mean over points of the squared reconstruction error."""
    diff = ad.sub(recon, points)
    return ad.mean(ad.sum(ad.square(diff), axis=-1))


# -- training ------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    model: SlotAutoencoder
    adam: AdamState
    epoch: int
    loss_curve: list[float]
    initial_loss: float


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    if max_norm <= 0:
        return
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        for name in grads:
            grads[name] = grads[name] * (max_norm / total)


def evaluate_loss(model: SlotAutoencoder, data: np.ndarray, rng: np.random.Generator, batch_size: int = 100) -> float:
    total = 0.0
    for start in range(0, len(data), batch_size):
        batch = data[start : start + batch_size]
        out = autoencode_forward(model, batch, rng)
        total += float(reconstruction_loss(out.recon, batch)) * len(batch)
    return total / len(data)


def train_step(
    model: SlotAutoencoder,
    batch: np.ndarray,
    rng: np.random.Generator,
    names: list[str],
) -> tuple[float, dict[str, np.ndarray]]:
    tape = ad.Tape()
    bound, leaves = model.bind(tape, names)
    out = autoencode_forward(bound, batch, rng)
    loss = reconstruction_loss(out.recon, batch)
    tape.backward(loss)
    return float(ad.value_of(loss)), {n: v.grad for n, v in leaves.items()}


def train(
    data: np.ndarray,
    config: TrainConfig,
    progress: Callable[[int, float], None] | None = None,
) -> Checkpoint:
    """Minibatch Adam on the reconstruction loss; deterministic given the seed.

    ``data`` is ``(M, N, 2)``: M point sets of N points each.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] == 0 or data.shape[-1] != 2:
        raise ContractError(f"dataset must be a non-empty (M, N, 2) array, got {data.shape}")
    tune_allocator()
    rng = np.random.default_rng(config.seed)
    model = build_model(config, rng)
    initial_loss = evaluate_loss(model, data, np.random.default_rng([config.seed, 1]))
    names = model.trainable_names(config.learn_query)
    params = {n: np.array(v, copy=True) for n, v in model.parameters().items()}
    model = model.with_parameters(params)
    adam = AdamState()
    curve: list[float] = []
    M = len(data)
    for epoch in range(config.epochs):
        order = rng.permutation(M)
        total = 0.0
        for start in range(0, M, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = train_step(model, data[idx], rng, names)
            if not math.isfinite(loss):
                raise NumericalError(f"loss became non-finite at epoch {epoch} (seed {config.seed})")
            _clip(grads, config.clip_norm)
            optimizer_step(params, grads, adam, config.lr, config.beta1, config.beta2)
            total += loss * len(idx)
        curve.append(total / M)
        if progress is not None:
            progress(epoch, curve[-1])
    for name in ("encoder", "decoder"):
        net = getattr(model, name)
        for i, layer in enumerate(net.layers):
            if layer.min_singular_value() <= RANK_TOL:
                log.warning("%s layer %d lost rank during training", name, i)
    return Checkpoint(config, model, adam, config.epochs, curve, initial_loss)
