"""JSON model artifacts.

Floats are written by ``json`` with ``repr`` precision, so every parameter
survives a round trip bit for bit.  A SHA-256 over the canonical payload
turns silent corruption into a load error.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nnmodels import Model, ModelSpec, assign_params, init_params

FORMAT_VERSION = 1


class ArtifactError(ValueError):
    pass


class ArtifactVersionError(ArtifactError):
    pass


class TruncatedArtifactError(ArtifactError):
    pass


class CorruptArtifactError(ArtifactError):
    pass


class ArtifactShapeError(ArtifactError):
    pass


class MissingArtifactError(ArtifactError, FileNotFoundError):
    pass


@dataclass
class ModelArtifact:
    model: Model
    provenance: dict = field(default_factory=dict)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _payload(model: Model, provenance: dict) -> dict:
    params = {
        name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
        for name, t in model.named_tensors().items()
    }
    pre = None
    if model.spec.kind == "transfer" and model.params.pretrained is not None:
        pre = to_dict(ModelArtifact(model.params.pretrained))
    return {
        "format_version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "frozen": model.frozen,
        "params": params,
        "provenance": provenance,
        "pretrained": pre,
    }


def to_dict(artifact: ModelArtifact) -> dict:
    body = _payload(artifact.model, artifact.provenance)
    body["checksum"] = hashlib.sha256(_canonical(body).encode()).hexdigest()
    return body


def dumps(artifact: ModelArtifact) -> str:
    return json.dumps(to_dict(artifact), sort_keys=True, indent=1, allow_nan=False) + "\n"


def save_model(artifact: ModelArtifact, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(artifact))
    return path


def from_dict(body: dict) -> ModelArtifact:
    if not isinstance(body, dict):
        raise CorruptArtifactError("artifact root is not an object")
    version = body.get("format_version")
    if version != FORMAT_VERSION:
        raise ArtifactVersionError(f"artifact format version {version!r}, this build reads {FORMAT_VERSION}")
    stored = body.get("checksum")
    rest = {k: v for k, v in body.items() if k != "checksum"}
    if stored != hashlib.sha256(_canonical(rest).encode()).hexdigest():
        raise CorruptArtifactError("artifact checksum mismatch; the file was modified or damaged")
    try:
        spec = ModelSpec.from_dict(body["spec"])
        params = body["params"]
        provenance = body.get("provenance") or {}
    except (KeyError, TypeError) as exc:
        raise CorruptArtifactError(f"artifact is missing a field: {exc}") from exc
    pretrained = None
    if spec.kind == "transfer":
        if body.get("pretrained") is None:
            raise CorruptArtifactError("transfer artifact carries no pretrained block")
        pretrained = from_dict(body["pretrained"]).model
    model = init_params(spec, spec.seed, pretrained)
    values = {}
    for name, t in model.named_tensors().items():
        if name not in params:
            raise ArtifactShapeError(f"parameter {name} missing from artifact")
        entry = params[name]
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if shape != t.shape or data.size != int(np.prod(shape)):
            raise ArtifactShapeError(
                f"parameter {name}: artifact shape {shape} ({data.size} values) inconsistent with spec shape {t.shape}"
            )
        values[name] = data.reshape(shape)
    extra = set(params) - set(values)
    if extra:
        raise ArtifactShapeError(f"artifact has parameters the ModelSpec does not define: {sorted(extra)}")
    assign_params(model, values)
    if spec.kind == "transfer":
        model.set_frozen(bool(body.get("frozen", True)))
    return ModelArtifact(model, provenance)


def load_model(path: str | Path) -> ModelArtifact:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"model file not found: {path}")
    text = path.read_text()
    try:
        body = json.loads(text)
    except json.JSONDecodeError as exc:
        if not text.rstrip().endswith("}") or exc.pos >= len(text.rstrip()) - 1:
            raise TruncatedArtifactError(f"{path}: artifact ends early ({exc.msg})") from exc
        raise CorruptArtifactError(f"{path}: malformed artifact ({exc.msg} at char {exc.pos})") from exc
    return from_dict(body)


def check_nodes(model: Model, n_nodes: int) -> None:
    if model.spec.n_nodes != n_nodes:
        raise ArtifactShapeError(f"model expects N={model.spec.n_nodes} nodes, dataset has N={n_nodes}")


def fingerprint(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]
