"""File formats: mixtures, checkpoints, datasets, samples and reports.

Text formats are JSON. Python writes floats with the shortest repr that
round-trips, so every array reloads bit-exactly. Every file carries the
digest of the configuration that produced it (last JSON key, trailing
comment line for CSV, trailing bytes for the binary dataset).
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError
from .gmm import GaussianMixture
from .nets import AdamState, AffineLayer, Checkpoint, Network, SlotAutoencoder, TrainConfig
from .psa import PsaParams
from .synthdata import SceneSpec

FORMAT_VERSION = 1
DATASET_MAGIC = b"PSLOTDS1"
DIGEST_LEN = 16


class ParseError(ContractError):
    """Malformed input file; carries the 1-based line and column when known."""

    def __init__(self, path, message: str, line: int | None = None, col: int | None = None):
        where = f"{path}"
        if line is not None:
            where += f":{line}:{col}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.col = col


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()[:DIGEST_LEN]


def _array(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ContractError("refusing to serialize non-finite values")
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unarray(obj: dict) -> np.ndarray:
    return np.asarray(obj["data"], dtype=np.float64).reshape(obj["shape"])


def _emit(obj, indent: int = 0) -> str:
    """JSON text with every float written to 17 significant digits."""
    pad = " " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_emit(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + " " * indent + "}"
    if isinstance(obj, (list, tuple)):
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_emit(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _emit(v, indent + 1) for v in obj) + "\n" + " " * indent + "]"
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ContractError("refusing to serialize non-finite values")
        text = format(obj, ".17g")
        return text if any(ch in text for ch in ".en") else text + ".0"
    return json.dumps(obj)


def _dump(record: dict, digest: str) -> str:
    record = dict(record)
    record["config_digest"] = digest
    return _emit(record) + "\n"


def _write_text(path, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise ContractError(f"cannot write {path}: {exc}") from exc
    return path


def read_record(path, kind: str | None = None) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ContractError(f"cannot read {path}: {exc}") from exc
    try:
        record = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.msg, exc.lineno, exc.colno) from exc
    if not isinstance(record, dict):
        raise ParseError(path, "top level must be an object", 1, 1)
    if kind is not None and record.get("kind") != kind:
        raise ParseError(path, f"expected a {kind!r} record, found {record.get('kind')!r}")
    if record.get("version") != FORMAT_VERSION:
        raise ParseError(path, f"unsupported format version {record.get('version')!r}")
    return record


# -- mixtures ------------------------------------------------------------------


def mixture_record(m: GaussianMixture, meta: dict | None = None) -> dict:
    return {
        "kind": "mixture",
        "version": FORMAT_VERSION,
        "d": m.dim,
        "K": m.n_components,
        "weights": m.weights.tolist(),
        "components": [{"mean": mu.tolist(), "var": v.tolist()} for mu, v in zip(m.means, m.vars)],
        "meta": meta or {},
    }


def save_mixture(path, m: GaussianMixture | None, digest: str, meta: dict | None = None, d: int = 2) -> Path:
    record = mixture_record(m, meta) if m is not None else empty_mixture_record(d, meta)
    return _write_text(path, _dump(record, digest))


def empty_mixture_record(d: int, meta: dict | None = None) -> dict:
    return {"kind": "mixture", "version": FORMAT_VERSION, "d": d, "K": 0, "weights": [], "components": [], "meta": meta or {}}


def mixture_from_record(record: dict, path="<record>") -> GaussianMixture | None:
    try:
        d, K = int(record["d"]), int(record["K"])
        w = np.asarray(record["weights"], dtype=np.float64)
        if K == 0:
            return None
        comps = record["components"]
        if len(comps) != K or len(w) != K:
            raise ValueError(f"header says K={K}, found {len(w)} weights and {len(comps)} components")
        mu = np.asarray([c["mean"] for c in comps], dtype=np.float64).reshape(K, d)
        var = np.asarray([c["var"] for c in comps], dtype=np.float64).reshape(K, d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(path, f"bad mixture record: {exc}") from exc
    return GaussianMixture(w, mu, var)


def load_mixture(path) -> tuple[GaussianMixture | None, dict]:
    """Returns (mixture, record); the mixture is None for an empty record."""
    record = read_record(path, "mixture")
    return mixture_from_record(record, path), record


# -- checkpoints ---------------------------------------------------------------


def checkpoint_record(ck: Checkpoint) -> dict:
    model = ck.model
    params = {name: _array(value) for name, value in model.parameters().items()}
    return {
        "kind": "checkpoint",
        "version": FORMAT_VERSION,
        "config": ck.config.to_dict(),
        "model": {
            "K": model.K,
            "T": model.T,
            "wiring": model.wiring,
            "variant": model.psa.variant.value,
            "slope": model.encoder.slope,
            "encoder_layers": len(model.encoder.layers),
            "decoder_layers": len(model.decoder.layers),
            "slot_init_loc": _array(model.slot_init_loc),
            "slot_init_scale": _array(model.slot_init_scale),
            "params": params,
        },
        "adam": {
            "step": ck.adam.step,
            "m": {k: _array(v) for k, v in sorted(ck.adam.m.items())},
            "v": {k: _array(v) for k, v in sorted(ck.adam.v.items())},
        },
        "epoch": ck.epoch,
        "loss_curve": list(ck.loss_curve),
        "initial_loss": ck.initial_loss,
    }


def checkpoint_digest(ck: Checkpoint) -> str:
    return config_digest(checkpoint_record(ck))


def save_checkpoint(path, ck: Checkpoint, digest: str) -> Path:
    return _write_text(path, _dump(checkpoint_record(ck), digest))


def checkpoint_from_record(record: dict, path="<record>") -> Checkpoint:
    try:
        config = TrainConfig.from_dict(record["config"])
        m = record["model"]
        params = {k: _unarray(v) for k, v in m["params"].items()}

        def net(prefix, n):
            layers = [AffineLayer(params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"]) for i in range(n)]
            return Network(layers, float(m["slope"]))

        psa = PsaParams(params["psa.w_q"], params["psa.w_k"], params["psa.w_v"], m["variant"])
        model = SlotAutoencoder(
            net("encoder", int(m["encoder_layers"])),
            psa,
            net("decoder", int(m["decoder_layers"])),
            int(m["K"]),
            int(m["T"]),
            m["wiring"],
            _unarray(m["slot_init_loc"]),
            _unarray(m["slot_init_scale"]),
        )
        a = record["adam"]
        adam = AdamState(
            {k: _unarray(v) for k, v in a["m"].items()},
            {k: _unarray(v) for k, v in a["v"].items()},
            int(a["step"]),
        )
        return Checkpoint(
            config,
            model,
            adam,
            int(record["epoch"]),
            [float(x) for x in record["loss_curve"]],
            float(record["initial_loss"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(path, f"bad checkpoint record: {exc!r}") from exc


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_record(read_record(path, "checkpoint"), path)


# -- datasets ------------------------------------------------------------------


def save_dataset(path, points: np.ndarray, labels: np.ndarray, spec: SceneSpec, seed: int, digest: str) -> Path:
    """Binary layout: magic, u32 header length, JSON header, float64 LE points,
    uint8 labels, then the ASCII config digest."""
    points = np.asarray(points, dtype="<f8")
    labels = np.asarray(labels)
    if points.ndim != 3 or points.shape[-1] != 2 or labels.shape != points.shape[:2]:
        raise ContractError("dataset must be (M, N, 2) points with (M, N) labels")
    header = json.dumps(
        {"version": FORMAT_VERSION, "M": points.shape[0], "N": points.shape[1], "d": 2, "spec": spec.to_dict(), "seed": seed},
        sort_keys=True,
    ).encode()
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(points.tobytes())
    buf.write(labels.astype(np.uint8).tobytes())
    buf.write(digest.encode("ascii"))
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(buf.getvalue())
    except OSError as exc:
        raise ContractError(f"cannot write {path}: {exc}") from exc
    return path


def load_dataset(path) -> tuple[np.ndarray, np.ndarray, dict, str]:
    """Returns (points, labels, header, digest)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ContractError(f"cannot read {path}: {exc}") from exc
    if not raw.startswith(DATASET_MAGIC):
        raise ParseError(path, "not a dataset file (bad magic)", None)
    off = len(DATASET_MAGIC)
    try:
        (hlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        header = json.loads(raw[off : off + hlen])
        off += hlen
        M, N = int(header["M"]), int(header["N"])
        n_pts = M * N * 2 * 8
        points = np.frombuffer(raw, dtype="<f8", count=M * N * 2, offset=off).reshape(M, N, 2).astype(np.float64)
        off += n_pts
        labels = np.frombuffer(raw, dtype=np.uint8, count=M * N, offset=off).reshape(M, N).astype(np.int64)
        off += M * N
    except (struct.error, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ParseError(path, f"truncated or corrupt dataset at byte {off}: {exc}") from exc
    digest = raw[off:].decode("ascii", errors="replace")
    if len(digest) != DIGEST_LEN:
        raise ParseError(path, f"missing config digest footer at byte {off}")
    return points, labels, header, digest


def export_dataset_csv(path, points: np.ndarray, labels: np.ndarray, digest: str) -> Path:
    M, N, _ = points.shape
    lines = ["scene,point,x,y,label"]
    for i in range(M):
        for n in range(N):
            lines.append(f"{i},{n},{points[i, n, 0]:.17g},{points[i, n, 1]:.17g},{int(labels[i, n])}")
    lines.append(f"# config_digest={digest}")
    return _write_text(path, "\n".join(lines) + "\n")


# -- samples and reports ---------------------------------------------------------


def save_samples(path, samples: np.ndarray, digest: str, columns: list[str] | None = None) -> Path:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ContractError("samples must be a 2D array")
    cols = columns or [f"x{j}" for j in range(samples.shape[1])]
    lines = [",".join(cols)]
    lines += [",".join(format(float(v), ".17g") for v in row) for row in samples]
    lines.append(f"# config_digest={digest}")
    return _write_text(path, "\n".join(lines) + "\n")


def load_samples(path) -> tuple[np.ndarray, list[str], str]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ContractError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise ParseError(path, "empty file", 1, 1)
    cols = lines[0].split(",")
    digest = ""
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("# config_digest="):
            digest = line.split("=", 1)[1]
            continue
        row, col = [], 1
        for field in line.split(","):
            try:
                row.append(float(field))
            except ValueError as exc:
                raise ParseError(path, f"not a number: {field!r}", lineno, col) from exc
            col += len(field) + 1
        if len(row) != len(cols):
            raise ParseError(path, f"expected {len(cols)} values, got {len(row)}", lineno, 1)
        rows.append(row)
    arr = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(cols))
    return arr, cols, digest


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def save_report(path, kind: str, body: dict, digest: str) -> Path:
    record = {"kind": kind, "version": FORMAT_VERSION}
    record.update(_clean(body))
    return _write_text(path, _dump(record, digest))
