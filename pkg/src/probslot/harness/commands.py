"""Experiment commands behind the CLI.

Every command takes a :class:`RunConfig`, writes seed-scoped files under the
output directory and returns a small result dict (paths and headline
numbers). All randomness is derived from the config, so reruns reproduce
every artifact byte for byte.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .. import autodiff as ad
from .. import metrics, serialize
from ..errors import ContractError
from ..gmm import (
    ConcatSlotMixture,
    GaussianMixture,
    aggregate_posterior,
    concat_mixture_sample,
    grid_normalization_2d,
    sample_mixture,
)
from ..nets import AffineLayer, Checkpoint, Network, SlotAutoencoder, autoencode_forward, net_forward, slot_decoder, train
from ..psa import PsaParams, PsaState, Variant
from ..synthdata import gen_dataset, make_scene_spec, stack_labels, stack_points
from .config import RunConfig

log = logging.getLogger(__name__)

INFER_CHUNK = 250


# -- dataset -------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> dict:
    spec = make_scene_spec(cfg.spec_seed, cfg.radius, cfg.variance, cfg.jitter, cfg.sampling)
    scenes = gen_dataset(spec, cfg.scenes, cfg.data_seed)
    points, labels = stack_points(scenes), stack_labels(scenes)
    digest = cfg.digest("data")
    path = serialize.save_dataset(cfg.dataset_path, points, labels, spec, cfg.data_seed, digest)
    out = {"dataset": str(path), "scenes": len(scenes), "points_per_scene": points.shape[1]}
    if cfg.export_csv:
        out["csv"] = str(serialize.export_dataset_csv(path.with_suffix(".csv"), points, labels, digest))
    return out


def load_points(cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    if not cfg.dataset_path.exists():
        raise ContractError(f"dataset {cfg.dataset_path} does not exist; run synth first")
    points, labels, _, _ = serialize.load_dataset(cfg.dataset_path)
    return points, labels


# -- training ------------------------------------------------------------------


def _train_one(args) -> tuple[int, str]:
    cfg, seed, points = args
    tc = cfg.train_config(seed)
    try:
        ck = train(points, tc)
    except ArithmeticError as exc:
        raise type(exc)(f"seed {seed}: {exc}") from exc
    digest = cfg.digest("train", seed)
    path = serialize.save_checkpoint(cfg.checkpoint_path(seed), ck, digest)
    lines = ["epoch,loss"] + [f"{i},{v:.17g}" for i, v in enumerate(ck.loss_curve)]
    lines.append(f"# config_digest={digest}")
    (cfg.seed_dir(seed) / "loss.csv").write_text("\n".join(lines) + "\n")
    return seed, str(path)


def cmd_train(cfg: RunConfig) -> dict:
    points, _ = load_points(cfg)
    jobs = [(cfg, s, points) for s in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            done = list(pool.map(_train_one, jobs))
    else:
        done = [_train_one(j) for j in jobs]
    return {"checkpoints": {str(s): p for s, p in done}}


def load_checkpoints(cfg: RunConfig, paths=None) -> dict[str, Checkpoint]:
    if paths:
        return {str(p): serialize.load_checkpoint(p) for p in paths}
    return {f"seed{s}": serialize.load_checkpoint(cfg.checkpoint_path(s)) for s in cfg.seeds}


# -- inference -----------------------------------------------------------------


@dataclass
class Inference:
    pi: np.ndarray  # (M, K)
    mu: np.ndarray  # (M, K, d)
    var: np.ndarray  # (M, K, d)
    a: np.ndarray  # (M, N, K)
    a_hat: np.ndarray  # (M, N, K)
    recon: np.ndarray  # (M, N, 2)

    def locals(self) -> list[GaussianMixture]:
        return [GaussianMixture(p / p.sum(), m, v) for p, m, v in zip(self.pi, self.mu, self.var)]


def infer(model: SlotAutoencoder, points: np.ndarray, seed: int) -> Inference:
    """Deterministic routing for every scene; slot inits come from one stream."""
    points = np.asarray(points, dtype=np.float64)
    M = len(points)
    init = model.init_state(np.random.default_rng(seed), (M,))
    parts = []
    for start in range(0, M, INFER_CHUNK):
        sl = slice(start, start + INFER_CHUNK)
        out = autoencode_forward(model, points[sl], init=PsaState(init.pi[sl], init.mu[sl], init.var[sl]))
        st = out.state.numpy()
        parts.append((st.pi, st.mu, st.var, out.attention.a, out.attention.a_hat, out.recon))
    return Inference(*(np.concatenate(p) for p in zip(*parts)))


def match_slots(ref: Inference, other: Inference) -> np.ndarray:
    """Per-scene slot permutation of ``other`` that best overlaps ``ref``.

    Overlap is measured on the column-normalized attention, the weights
    that define each slot's mean, so both runs' slots are compared through
    the points they summarize rather than through their latent coordinates.
    """
    M, _, K = ref.a_hat.shape
    perms = np.empty((M, K), dtype=np.int64)
    for i in range(M):
        overlap = ref.a_hat[i].T @ other.a_hat[i]
        _, cols = linear_sum_assignment(-overlap)
        perms[i] = cols
    return perms


def _gather(x: np.ndarray, perms: np.ndarray) -> np.ndarray:
    return np.take_along_axis(x, perms.reshape(perms.shape + (1,) * (x.ndim - 2)), axis=1)


def slot_batch(inf: Inference, mode: str = "mean", seed: int = 0) -> np.ndarray:
    if mode == "mean":
        return inf.mu
    rng = np.random.default_rng(seed)
    return inf.mu + np.sqrt(inf.var) * rng.standard_normal(inf.mu.shape)


# -- affine clone ----------------------------------------------------------------


def affine_clone(model: SlotAutoencoder, h, c) -> SlotAutoencoder:
    """A model whose latent space is ``z' = diag(h) z + c``, with identical outputs.

    The map is folded into the encoder's last layer and its inverse into the
    decoder's first layer; the slot initialization is transformed the same
    way. A learned query projection ``W_q`` becomes ``H W_q H^-1``, which is
    only consistent with a zero offset, so ``c`` must vanish unless ``W_q`` is
    the identity. Only the base variant is supported.
    """
    h = np.asarray(h, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    d = model.d
    if h.shape != (d,) or c.shape != (d,) or np.any(h == 0):
        raise ContractError("h must be a nonzero length-d vector and c a length-d vector")
    if model.psa.variant is not Variant.BASE:
        raise ContractError("affine clones are only defined for the base variant")
    w_q = np.asarray(ad.value_of(model.psa.w_q))
    eye = np.eye(d)
    if np.array_equal(w_q, eye):
        new_q = eye.copy()
    else:
        if np.any(c != 0):
            raise ContractError("a learned query projection admits only a zero offset")
        new_q = (h[:, None] * w_q) / h[None, :]

    enc = list(model.encoder.layers)
    last = enc[-1]
    enc[-1] = AffineLayer(h[:, None] * np.asarray(last.weight), h * np.asarray(last.bias) + c)
    dec = list(model.decoder.layers)
    first = dec[0]
    w1 = np.asarray(first.weight) / h[None, :]
    dec[0] = AffineLayer(w1, np.asarray(first.bias) - w1 @ c)
    return dataclasses.replace(
        model,
        encoder=Network(enc, model.encoder.slope),
        decoder=Network(dec, model.decoder.slope),
        psa=PsaParams(new_q, eye.copy(), eye.copy(), Variant.BASE),
        slot_init_loc=h * np.asarray(model.slot_init_loc) + c,
        # signed, so every drawn initial mean maps exactly (variance uses its square)
        slot_init_scale=h * np.asarray(model.slot_init_scale),
    )


def clone_checkpoint(ck: Checkpoint, h, c) -> Checkpoint:
    return dataclasses.replace(ck, model=affine_clone(ck.model, h, c))


# -- aggregate posterior ----------------------------------------------------------


def cmd_aggregate(cfg: RunConfig, checkpoint=None, out_path=None) -> dict:
    points, _ = load_points(cfg)
    path = Path(checkpoint) if checkpoint else cfg.checkpoint_path(cfg.seeds[0])
    ck = serialize.load_checkpoint(path)
    if ck.model.d != 2:
        raise ContractError(f"aggregate grid check needs d = 2, checkpoint has d = {ck.model.d}")
    inf = infer(ck.model, points, cfg.infer_seed)
    encodings = None
    if cfg.aggregate_mode == "gaussian":
        raise ContractError("gaussian aggregation needs a stochastic encoder; this model is deterministic")
    agg = aggregate_posterior(inf.locals(), encodings, mode=cfg.aggregate_mode)
    integral, mass = grid_normalization_2d(agg.flattened, n=cfg.grid_n)
    ratio = integral / mass
    summary = {
        "checkpoint_digest": serialize.checkpoint_digest(ck),
        "n_datapoints": agg.n_datapoints,
        "n_components": agg.flattened.n_components,
        "grid_integral": integral,
        "box_mass": mass,
        "normalization": ratio,
        "normalized_ok": bool(0.999 <= ratio <= 1.001),
    }
    digest = cfg.digest()
    out_path = Path(out_path) if out_path else path.parent / "aggregate.json"
    serialize.save_mixture(out_path, agg.flattened, digest, meta=summary)
    summary["checkpoint"] = str(path)
    summary["mixture"] = str(out_path)
    return summary


# -- identifiability sweep --------------------------------------------------------


def aggregate_alignment_residual(ref: Inference, other: Inference, perms: np.ndarray) -> float:
    """Weighted affine fit between matched aggregate-posterior component means.

    Returns the weighted RMS residual divided by the weighted RMS spread of
    the reference means (0 for exact affine copies).
    """
    M, K, d = ref.mu.shape
    wa = (ref.pi / ref.pi.sum(1, keepdims=True)).reshape(-1) / M
    ob = _gather(other.pi, perms)
    wb = (ob / ob.sum(1, keepdims=True)).reshape(-1) / M
    w = 0.5 * (wa + wb)
    Y = ref.mu.reshape(M * K, d)
    X = _gather(other.mu, perms).reshape(M * K, d)
    fit = metrics.affine_fit(X, Y, weights=w)
    resid = Y - fit.apply(X)
    centre = (w[:, None] * Y).sum(0) / w.sum()
    scale = math.sqrt(float((w * ((Y - centre) ** 2).sum(1)).sum() / w.sum()))
    rms = math.sqrt(float((w * (resid**2).sum(1)).sum() / w.sum()))
    return rms / scale if scale > 0 else 0.0


def pair_scores(ref: Inference, other: Inference, mode: str = "mean", seed: int = 0) -> dict:
    perms = match_slots(ref, other)
    a = metrics.SlotBatch(slot_batch(ref, mode, seed))
    b = metrics.SlotBatch(_gather(slot_batch(other, mode, seed + 1), perms))
    fwd = metrics.align(a, b)
    bwd = metrics.align(b, a)
    return {
        "smcc_ab": fwd.smcc,
        "smcc_ba": bwd.smcc,
        "smcc": 0.5 * (fwd.smcc + bwd.smcc),
        "r2_ab": fwd.r2,
        "r2_ba": bwd.r2,
        "r2": 0.5 * (fwd.r2 + bwd.r2),
        "degenerate": len(fwd.degenerate) + len(bwd.degenerate),
        "aggregate_residual": aggregate_alignment_residual(ref, other, perms),
    }


def ard_stats(model: SlotAutoencoder, inf: Inference, labels: np.ndarray, tau: float) -> dict:
    """Active-slot counts under threshold ``tau`` and the decode work saved."""
    M, K = inf.pi.shape
    active = inf.pi > tau
    counts = active.sum(1)
    truth = np.array([len(np.unique(lab)) for lab in labels])
    with ad.count_ops() as full:
        net_forward(model.decoder, inf.mu.reshape(M * K, -1))
    with ad.count_ops() as pruned:
        net_forward(model.decoder, inf.mu[active])
    savings = 1.0 - counts.sum() / (K * M)
    counted = 1.0 - pruned.count / full.count
    return {
        "tau": tau,
        "histogram": np.bincount(counts, minlength=K + 1).tolist(),
        "modal_count": int(np.bincount(counts).argmax()),
        "mean_active": float(counts.mean()),
        "mae": float(np.abs(counts - truth).mean()),
        "savings": float(savings),
        "savings_counted": float(counted),
    }


def mean_ari(inf: Inference, labels: np.ndarray) -> float:
    hard = inf.a.argmax(-1)
    return float(np.mean([metrics.ari(lab, h) for lab, h in zip(labels, hard)]))


def mean_contrast(model: SlotAutoencoder, inf: Inference, scenes: int = 20) -> float:
    """Compositional contrast of the decoder at the inferred slots, averaged
    over the first ``scenes`` scenes."""
    values = []
    for i in range(min(scenes, len(inf.mu))):
        f = slot_decoder(model, inf.a[i])
        values.append(metrics.compositional_contrast(f, inf.mu[i], inf.recon[i].size).value)
    return float(np.mean(values))


def cmd_identifiability(cfg: RunConfig, checkpoints=None, extra: dict | None = None) -> dict:
    """Pairwise SMCC / R² / aggregate alignment over runs, plus ARI, ARD and
    (when selected) decoder contrast per run.

    ``extra`` maps names to already-built checkpoints (used for controls
    such as an affine clone).
    """
    points, labels = load_points(cfg)
    cks = load_checkpoints(cfg, checkpoints)
    cks.update(extra or {})
    if len(cks) < 2:
        raise ContractError("identifiability needs at least two checkpoints")
    Ks = {ck.model.K for ck in cks.values()}
    if len(Ks) != 1:
        raise ContractError(f"checkpoints disagree on K: {sorted(Ks)}")
    names = list(cks)
    known = {"smcc", "r2", "ari", "ard", "aggregate", "contrast"}
    chosen = set(cfg.metrics)
    if not chosen <= known:
        raise ContractError(f"unknown metrics {sorted(chosen - known)}; choose from {sorted(known)}")
    infs = {n: infer(cks[n].model, points, cfg.infer_seed) for n in names}
    n = len(names)
    smcc = np.eye(n)
    r2 = np.eye(n)
    resid = np.zeros((n, n))
    pairs = []
    if chosen & {"smcc", "r2", "aggregate"}:
        for i, j in itertools.combinations(range(n), 2):
            sc = pair_scores(infs[names[i]], infs[names[j]], cfg.slot_mode, cfg.infer_seed)
            smcc[i, j] = smcc[j, i] = sc["smcc"]
            r2[i, j] = r2[j, i] = sc["r2"]
            resid[i, j] = resid[j, i] = sc["aggregate_residual"]
            pairs.append({"a": names[i], "b": names[j], **sc})
    off = ~np.eye(n, dtype=bool)
    runs = {}
    for name in names:
        entry = {"final_loss": _final_loss(cks[name]), "checkpoint_digest": serialize.checkpoint_digest(cks[name])}
        if "ari" in chosen:
            entry["ari"] = mean_ari(infs[name], labels)
        if "ard" in chosen:
            entry["ard"] = ard_stats(cks[name].model, infs[name], labels, cfg.tau)
        if "contrast" in chosen:
            entry["contrast"] = mean_contrast(cks[name].model, infs[name])
        runs[name] = entry
    report = {"runs": names, "metrics": sorted(chosen), "pairs": pairs, "per_run": runs}
    if "smcc" in chosen:
        report.update(smcc_matrix=smcc, mean_smcc=float(smcc[off].mean()))
    if "r2" in chosen:
        report.update(r2_matrix=r2, mean_r2=float(r2[off].mean()))
    if "aggregate" in chosen:
        report.update(aggregate_residual_matrix=resid, mean_aggregate_residual=float(resid[off].mean()))
    path = serialize.save_report(cfg.out / "identifiability.json", "sweep_report", report, cfg.digest())
    report["report"] = str(path)
    return report


def _final_loss(ck: Checkpoint) -> float | None:
    return ck.loss_curve[-1] if ck.loss_curve else None


def cmd_ard_report(cfg: RunConfig, checkpoint=None) -> dict:
    points, labels = load_points(cfg)
    path = Path(checkpoint) if checkpoint else cfg.checkpoint_path(cfg.seeds[0])
    ck = serialize.load_checkpoint(path)
    inf = infer(ck.model, points, cfg.infer_seed)
    stats = ard_stats(ck.model, inf, labels, cfg.tau)
    stats["checkpoint_digest"] = serialize.checkpoint_digest(ck)
    stats["per_scene_active"] = (inf.pi > cfg.tau).sum(1)
    out = serialize.save_report(path.parent / f"ard_tau{cfg.tau:g}.json", "ard_report", stats, cfg.digest())
    stats["checkpoint"] = str(path)
    stats["report"] = str(out)
    stats["per_scene_active"] = stats["per_scene_active"].tolist()
    return stats


# -- sampling ------------------------------------------------------------------


def cmd_sample(cfg: RunConfig, source, count: int, mode: str = "aggregate", scene: int = 0, out_path=None, seed=None) -> dict:
    """Draw from an aggregate mixture file, or from one scene's concatenated slot mixture."""
    if count < 0:
        raise ContractError("count must be nonnegative")
    rng = np.random.default_rng(cfg.infer_seed if seed is None else seed)
    source = Path(source)
    if mode == "aggregate":
        mix, _ = serialize.load_mixture(source)
        if mix is None:
            raise ContractError("cannot sample from an empty mixture")
        samples = sample_mixture(mix, rng, count) if count else np.zeros((0, mix.dim))
        cols = [f"z{j + 1}" for j in range(mix.dim)]
    elif mode == "concat":
        base = _scene_mixture(cfg, source, scene)
        cm = ConcatSlotMixture(base)
        samples = concat_mixture_sample(cm, rng, count) if count else np.zeros((0, cm.dim))
        cols = [f"s{k + 1}_z{j + 1}" for k in range(base.n_components) for j in range(base.dim)]
    else:
        raise ContractError(f"unknown sample mode {mode!r}")
    out_path = Path(out_path) if out_path else cfg.out / f"samples_{mode}.csv"
    serialize.save_samples(out_path, samples, cfg.digest(), cols)
    return {"samples": str(out_path), "count": int(len(samples)), "dim": int(samples.shape[1])}


def _scene_mixture(cfg: RunConfig, source: Path, scene: int) -> GaussianMixture:
    """The local slot mixture of one scene: from a mixture file or a checkpoint."""
    record = serialize.read_record(source)
    if record.get("kind") == "mixture":
        mix = serialize.mixture_from_record(record, source)
        if mix is None:
            raise ContractError("cannot sample from an empty mixture")
        return mix
    ck = serialize.checkpoint_from_record(record, source)
    points, _ = load_points(cfg)
    if not 0 <= scene < len(points):
        raise ContractError(f"scene index {scene} out of range")
    inf = infer(ck.model, points[scene : scene + 1], cfg.infer_seed)
    return inf.locals()[0]


# -- plots ----------------------------------------------------------------------


def cmd_plot(cfg: RunConfig, inputs, out_dir=None) -> dict:
    """SVG per input (mixture file, sample CSV or dataset), plus a side-by-side
    panel figure when several mixtures are given."""
    from . import plots

    out = Path(out_dir) if out_dir else cfg.out / "plots"
    digest = cfg.digest()
    made = []
    mixtures = []
    for raw in inputs:
        src = Path(raw)
        if not src.exists():
            raise ContractError(f"plot input {src} does not exist")
        target = out / f"{src.stem}.svg"
        if src.suffix == ".json":
            mix, _ = serialize.load_mixture(src)
            name = src.parent.name or src.stem
            plots.plot_mixture(mix, target, digest, title=name)
            mixtures.append((name, mix))
        elif src.suffix == ".csv":
            samples, cols, _ = serialize.load_samples(src)
            labels = None
            if {"x", "y", "label"} <= set(cols):  # exported dataset
                labels = samples[:, cols.index("label")]
                samples = samples[:, [cols.index("x"), cols.index("y")]]
            plots.plot_scatter(samples[:, :2], target, digest, labels=labels, title=src.stem)
        elif src.suffix == ".bin":
            points, labels, _, _ = serialize.load_dataset(src)
            plots.plot_scatter(points[:5], target, digest, labels=labels[:5].ravel(), title="first scenes")
        else:
            raise ContractError(f"don't know how to plot {src}")
        made.append(str(target))
    if len(mixtures) > 1:
        made.append(str(plots.plot_panels(mixtures, out / "panels.svg", digest)))
    return {"plots": made}
