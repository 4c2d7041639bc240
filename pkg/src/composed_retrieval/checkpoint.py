"""Model checkpoints: a JSON manifest plus a float64 little-endian blob.

``<dir>/checkpoint.json`` lists the format version, the run configuration
and, for every parameter, its name, learning-rate group, shape and offset
(in values) into ``<dir>/checkpoint.bin``. Optimizer moments follow the
parameters in the same blob when present.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .composition import CategoryTable, ProjectionParams, TirgParams
from .errors import ConfigurationError, ValidationError
from .model import CompositionConfig, RetrievalModel
from .numerics import AdamState
from .text_encoder import EncoderConfig, EncoderParams

FORMAT_VERSION = 1
MANIFEST_NAME = "checkpoint.json"
BLOB_NAME = "checkpoint.bin"


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.suffix != ".json" else path


def save_checkpoint(
    path: str | Path,
    model: RetrievalModel,
    config: dict | None = None,
    adam: AdamState | None = None,
) -> Path:
    """Write a checkpoint directory (created if needed); returns the manifest path."""
    manifest_file = manifest_path(path)
    manifest_file.parent.mkdir(parents=True, exist_ok=True)
    chunks: list[np.ndarray] = []
    offset = 0

    def put(arr: np.ndarray) -> int:
        nonlocal offset
        start = offset
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").reshape(-1))
        offset += arr.size
        return start

    params = []
    for p in model.parameters():
        params.append(
            {"name": p.name, "group": p.group.value, "shape": list(p.shape), "offset": put(p.data)}
        )
    manifest = {
        "version": FORMAT_VERSION,
        "model": model.describe(),
        "config": config or {},
        "parameters": params,
    }
    if adam is not None:
        moments = []
        for name in sorted(adam.first_moment):
            moments.append(
                {
                    "name": name,
                    "first": put(adam.first_moment[name]),
                    "second": put(adam.second_moment[name]),
                }
            )
        manifest["adam"] = {
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
            "step_count": adam.step_count,
            "moments": moments,
        }
    blob = np.concatenate(chunks) if chunks else np.zeros(0)
    manifest_file.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (manifest_file.parent / BLOB_NAME).write_bytes(blob.astype("<f8").tobytes())
    return manifest_file


def read_manifest(path: str | Path) -> dict:
    manifest_file = manifest_path(path)
    try:
        manifest = json.loads(manifest_file.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read checkpoint manifest {manifest_file}: {exc}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise ValidationError(f"{manifest_file}: unsupported checkpoint version {manifest.get('version')}")
    return manifest


def load_checkpoint(path: str | Path) -> tuple[RetrievalModel, dict, AdamState | None]:
    """Rebuild the model, the stored run config and the optimizer state (if saved)."""
    manifest_file = manifest_path(path)
    manifest = read_manifest(manifest_file)
    blob = np.fromfile(manifest_file.parent / BLOB_NAME, dtype="<f8")
    desc = manifest["model"]
    enc_cfg = EncoderConfig(**desc["encoder"])
    comp_cfg = CompositionConfig(**desc["composition"])
    rng = np.random.default_rng(0)
    model = RetrievalModel(
        EncoderParams.init(enc_cfg, desc["vocab_size"], desc["num_corpus_categories"], rng),
        ProjectionParams.init(desc["feature_dim"], enc_cfg.hidden_dim, comp_cfg.embed_dim, rng),
        CategoryTable.init(comp_cfg.category_dim, rng),
        TirgParams.init(comp_cfg.embed_dim, comp_cfg.category_dim, comp_cfg.hidden_dim, rng,
                        use_bias=comp_cfg.use_bias),
        comp_cfg,
    )
    named = model.named_parameters()
    if set(named) != {rec["name"] for rec in manifest["parameters"]}:
        raise ValidationError(f"{manifest_file}: parameter set does not match the model layout")

    def get(offset: int, shape) -> np.ndarray:
        size = int(np.prod(shape))
        if offset + size > blob.size:
            raise ValidationError(f"{manifest_file}: blob is truncated")
        return blob[offset:offset + size].reshape(shape).copy()

    for rec in manifest["parameters"]:
        p = named[rec["name"]]
        if list(p.shape) != rec["shape"]:
            raise ValidationError(f"{rec['name']}: shape {rec['shape']} vs model {list(p.shape)}")
        p.data = get(rec["offset"], p.shape)

    adam = None
    if "adam" in manifest:
        a = manifest["adam"]
        adam = AdamState(a["beta1"], a["beta2"], a["eps"], a["step_count"])
        for rec in a["moments"]:
            shape = named[rec["name"]].shape
            adam.first_moment[rec["name"]] = get(rec["first"], shape)
            adam.second_moment[rec["name"]] = get(rec["second"], shape)
    return model, manifest["config"], adam


def copy_encoder(source: RetrievalModel, dest: RetrievalModel) -> None:
    """Copy text-encoder weights, e.g. from a pretraining checkpoint.

    The pretraining heads are copied only when their shapes agree, since the
    pretraining corpus may use a different set of categories.
    """
    src = {p.name: p for p in source.encoder.parameters()}
    for p in dest.encoder.body_parameters():
        if p.name not in src:
            raise ConfigurationError(f"pretrained checkpoint lacks {p.name}")
        if src[p.name].shape != p.shape:
            raise ConfigurationError(
                f"{p.name}: pretrained shape {list(src[p.name].shape)} vs {list(p.shape)}"
            )
        p.data = src[p.name].data.copy()
    for p in dest.encoder.head_parameters():
        if p.name in src and src[p.name].shape == p.shape:
            p.data = src[p.name].data.copy()
