"""On-disk artifacts: posterior binaries, surface CSVs, dataset JSON, joint
cache, and report JSON.

Posterior payloads are stored as little-endian float64 with a fixed 32-byte
header (magic, format version, kind, layout, P, K) plus a JSON sidecar
carrying provenance and a SHA-256 checksum of the binary.  All writes go
through a temp file and ``os.replace``, so readers never observe partial
artifacts; nothing here embeds timestamps, so identical inputs produce
identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import re
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .exceptions import (
    ChecksumError,
    GridMismatchError,
    MissingArtifactError,
    StoreError,
    VersionMismatchError,
)
from .posteriors import DIAG, FULL, GaussianPosterior, MixturePosterior
from .preview import PreviewSurface, simplex_grid
from .tasks import ClassSplitDataset
from .training import PosteriorArtifact, Provenance, TrainerConfig

MAGIC = b"MRGPOST\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIBBHQQ")

_KIND_CODES = {"point": 0, "gaussian_diag": 1, "gaussian_full": 2, "mixture": 3}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_LAYOUT_CODES = {None: 0, DIAG: 1, FULL: 2}
_LAYOUT_NAMES = {v: k for k, v in _LAYOUT_CODES.items()}


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_json(path, payload: dict):
    blob = json.dumps(payload, indent=2, sort_keys=True).encode() + b"\n"
    _atomic_write(Path(path), blob)


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# posterior binary format
# ---------------------------------------------------------------------------


def _f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _encode_payload(artifact: PosteriorArtifact) -> tuple[bytes, int, str | None, int]:
    p = artifact.payload
    if artifact.kind == "point":
        return _f64(p), p.shape[0], None, 0
    if artifact.kind in ("gaussian_diag", "gaussian_full"):
        return _f64(p.mean) + _f64(p.precision), p.dim, p.layout, 0
    parts = [_f64(p.weights)]
    for comp in p.components:
        parts.append(_f64(comp.mean))
        parts.append(_f64(comp.precision))
    return b"".join(parts), p.dim, p.layout, len(p.components)


def _decode_payload(kind: str, layout: str | None, dim: int, k: int, body: bytes):
    buf = np.frombuffer(body, dtype="<f8")
    if kind == "point":
        if buf.shape[0] != dim:
            raise StoreError(f"point payload has {buf.shape[0]} values, expected {dim}")
        return buf.astype(np.float64)

    prec_len = dim if layout == DIAG else dim * dim

    def gaussian(offset):
        mean = buf[offset : offset + dim]
        prec = buf[offset + dim : offset + dim + prec_len]
        if layout == FULL:
            prec = prec.reshape(dim, dim)
        return GaussianPosterior(mean.astype(np.float64), prec.astype(np.float64))

    if kind in ("gaussian_diag", "gaussian_full"):
        if buf.shape[0] != dim + prec_len:
            raise StoreError("gaussian payload has wrong length")
        return gaussian(0)
    if buf.shape[0] != k + k * (dim + prec_len):
        raise StoreError("mixture payload has wrong length")
    weights = buf[:k].astype(np.float64)
    comps = tuple(gaussian(k + i * (dim + prec_len)) for i in range(k))
    return MixturePosterior(weights, comps)


def encode_posterior(artifact: PosteriorArtifact) -> bytes:
    body, dim, layout, k = _encode_payload(artifact)
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        _KIND_CODES[artifact.kind],
        _LAYOUT_CODES[layout],
        0,
        dim,
        k,
    )
    return header + body


def decode_posterior(blob: bytes, provenance: Provenance) -> PosteriorArtifact:
    if len(blob) < _HEADER.size:
        raise StoreError("posterior file truncated")
    magic, version, kind_code, layout_code, _, dim, k = _HEADER.unpack(
        blob[: _HEADER.size]
    )
    if magic != MAGIC:
        raise StoreError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"posterior format version {version}, this build reads {FORMAT_VERSION}"
        )
    kind = _KIND_NAMES.get(kind_code)
    if kind is None:
        raise StoreError(f"unknown kind code {kind_code}")
    payload = _decode_payload(
        kind, _LAYOUT_NAMES.get(layout_code), dim, k, blob[_HEADER.size :]
    )
    return PosteriorArtifact(kind=kind, payload=payload, provenance=provenance)


def _provenance_dict(p: Provenance) -> dict:
    return {
        "task_id": p.task_id,
        "config": asdict(p.config),
        "final_loss": p.final_loss,
        "notes": list(p.notes),
    }


def _provenance_from_dict(d: dict) -> Provenance:
    return Provenance(
        task_id=d["task_id"],
        config=TrainerConfig(**d["config"]),
        final_loss=float(d["final_loss"]),
        notes=tuple(d["notes"]),
    )


def _safe_name(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", text)


class ArtifactStore:
    """Posterior artifacts under ``root/<experiment>/posteriors/``, keyed by
    (task id, training method, seed)."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _dir(self, experiment: str) -> Path:
        return self.root / _safe_name(experiment) / "posteriors"

    def path_for(self, experiment: str, task_id: str, method: str, seed: int) -> Path:
        name = f"{_safe_name(task_id)}__{_safe_name(method)}__seed{int(seed)}"
        return self._dir(experiment) / (name + ".post")

    def save(self, experiment: str, artifact: PosteriorArtifact,
             method: str | None = None) -> Path:
        prov = artifact.provenance
        method = method or prov.config.method
        path = self.path_for(experiment, prov.task_id, method, prov.config.seed)
        blob = encode_posterior(artifact)
        _atomic_write(path, blob)
        sidecar = {
            "format_version": FORMAT_VERSION,
            "kind": artifact.kind,
            "dim": artifact.dim,
            "method": method,
            "checksum_sha256": hashlib.sha256(blob).hexdigest(),
            "provenance": _provenance_dict(prov),
        }
        save_json(path.with_suffix(".json"), sidecar)
        return path

    def load(self, experiment: str, task_id: str, method: str, seed: int) -> PosteriorArtifact:
        path = self.path_for(experiment, task_id, method, seed)
        if not path.exists() or not path.with_suffix(".json").exists():
            raise MissingArtifactError(f"no artifact at {path}")
        sidecar = load_json(path.with_suffix(".json"))
        if sidecar.get("format_version") != FORMAT_VERSION:
            raise VersionMismatchError(
                f"sidecar format version {sidecar.get('format_version')}"
            )
        blob = path.read_bytes()
        digest = hashlib.sha256(blob).hexdigest()
        if digest != sidecar["checksum_sha256"]:
            raise ChecksumError(f"checksum mismatch for {path}")
        return decode_posterior(blob, _provenance_from_dict(sidecar["provenance"]))

    def exists(self, experiment: str, task_id: str, method: str, seed: int) -> bool:
        return self.path_for(experiment, task_id, method, seed).exists()

    def index(self, experiment: str) -> list[dict]:
        out = []
        directory = self._dir(experiment)
        if not directory.exists():
            return out
        for sidecar in sorted(directory.glob("*.json")):
            d = load_json(sidecar)
            prov = d.get("provenance", {})
            out.append(
                {
                    "task_id": prov.get("task_id"),
                    "method": d.get("method"),
                    "seed": prov.get("config", {}).get("seed"),
                    "kind": d.get("kind"),
                    "path": str(sidecar.with_suffix(".post")),
                }
            )
        return out


class JointCache:
    """Per-point joint-training results keyed by content hash; hits skip
    retraining entirely."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / (key + ".npy")

    def get(self, key: str) -> np.ndarray | None:
        path = self._path(key)
        if not path.exists():
            return None
        return np.load(path)

    def put(self, key: str, theta: np.ndarray):
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".joint.")
        try:
            with os.fdopen(fd, "wb") as fh:
                np.save(fh, np.asarray(theta, dtype=np.float64))
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


# ---------------------------------------------------------------------------
# surface CSV
# ---------------------------------------------------------------------------


def save_surface_csv(path, surface: PreviewSurface):
    """Columns ``alpha_1..alpha_T, metric, iterations, converged``; floats
    written with shortest-round-trip precision."""
    t = surface.grid.num_tasks
    lines = [",".join([f"alpha_{i + 1}" for i in range(t)] + ["metric", "iterations", "converged"])]
    for i, w in enumerate(surface.grid.points):
        cells = [repr(float(a)) for a in w.alpha]
        cells.append(repr(float(surface.metrics[i])))
        cells.append(str(int(surface.iterations[i])))
        cells.append(str(int(surface.converged[i])))
        lines.append(",".join(cells))
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def _infer_grid_n(alphas: np.ndarray) -> int:
    positive = alphas[alphas > 1e-12]
    if positive.size == 0:
        raise GridMismatchError("surface has no positive weights")
    n = round(1.0 / float(positive.min()))
    return max(n, 1)


def load_surface_csv(path, method: str = "loaded") -> PreviewSurface:
    """Rebuild a surface from CSV.  Rows may be in any order; they must form
    exactly one full simplex lattice (the spacing is inferred from the
    smallest positive weight and validated against the row count)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    t = sum(1 for name in header if name.startswith("alpha_"))
    if t < 1 or header[:t] != [f"alpha_{i + 1}" for i in range(t)] or header[t:] != [
        "metric",
        "iterations",
        "converged",
    ]:
        raise StoreError(f"{path}: unexpected surface header {header}")
    alphas = np.array([[float(c) for c in r[:t]] for r in rows])
    metrics = np.array([float(r[t]) for r in rows])
    iters = np.array([int(r[t + 1]) for r in rows])
    conv = np.array([bool(int(r[t + 2])) for r in rows])
    n = _infer_grid_n(alphas)
    counts = np.rint(alphas * n).astype(int)
    if np.abs(alphas * n - counts).max() > 1e-6:
        raise GridMismatchError(f"{path}: weights are not multiples of 1/{n}")
    if np.any(counts.sum(axis=1) != n):
        raise GridMismatchError(f"{path}: row weights do not sum to 1")
    expected = math.comb(n + t - 1, t - 1)
    if len(rows) != expected:
        raise GridMismatchError(
            f"{path}: {len(rows)} rows, a full T={t} grid at spacing 1/{n} "
            f"has {expected}"
        )
    grid = simplex_grid(t, 1.0 / n)
    order = {}
    for row_idx, c in enumerate(map(tuple, counts)):
        if c in order:
            raise GridMismatchError(f"{path}: duplicate grid point {c}")
        order[c] = row_idx
    perm = [order[c] for c in grid.counts]
    return PreviewSurface(
        grid=grid,
        method=method,
        thetas=tuple(None for _ in perm),
        metrics=metrics[perm],
        iterations=iters[perm],
        converged=conv[perm],
    )


# ---------------------------------------------------------------------------
# dataset JSON
# ---------------------------------------------------------------------------

_DATASET_SCHEMA = "mergeview.dataset/1"


def save_dataset_json(path, data: ClassSplitDataset):
    payload = {
        "schema": _DATASET_SCHEMA,
        "num_classes": data.num_classes,
        "split": [list(part) for part in data.split],
        "features": data.features.tolist(),
        "labels": data.labels.tolist(),
    }
    if data.eval_features is not None:
        payload["eval_features"] = data.eval_features.tolist()
        payload["eval_labels"] = data.eval_labels.tolist()
    save_json(path, payload)


def load_dataset_json(path) -> ClassSplitDataset:
    d = load_json(path)
    if d.get("schema") != _DATASET_SCHEMA:
        raise StoreError(f"{path}: unknown dataset schema {d.get('schema')!r}")
    return ClassSplitDataset(
        features=np.array(d["features"], dtype=np.float64),
        labels=np.array(d["labels"], dtype=np.int64),
        split=tuple(tuple(part) for part in d["split"]),
        num_classes=d["num_classes"],
        eval_features=(
            np.array(d["eval_features"], dtype=np.float64)
            if "eval_features" in d
            else None
        ),
        eval_labels=(
            np.array(d["eval_labels"], dtype=np.int64)
            if "eval_labels" in d
            else None
        ),
    )
