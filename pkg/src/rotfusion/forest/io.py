"""Self-describing model files.

A model file is a zip archive holding ``header.json`` (format name, version,
forest config and any caller metadata) and one ``.npy`` member per array.
Member order and timestamps are fixed, so saving the same model twice gives
identical bytes.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from ._ensemble import TreeEnsemble
from .causal import CausalForestModel
from .config import ForestConfig
from .regression import RegressionForest

FORMAT = "rotfusion-causal-forest"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _npy(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def _regression_arrays(prefix: str, forest: RegressionForest) -> dict[str, np.ndarray]:
    out = {f"{prefix}/ensemble/{k}": v for k, v in forest.ensemble.arrays().items()}
    out[f"{prefix}/leaf_value"] = forest.leaf_value
    out[f"{prefix}/oob_prediction"] = forest.oob_prediction
    return out


def save_model(path: str | Path, model: CausalForestModel, metadata: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    arrays.update({f"effect/ensemble/{k}": v for k, v in model.ensemble.arrays().items()})
    arrays.update(_regression_arrays("outcome", model.outcome_model))
    arrays.update(_regression_arrays("propensity", model.propensity_model))
    for name in ("X", "y", "w", "y_hat", "w_hat", "leaf_wy", "leaf_ww"):
        arrays[f"effect/{name}"] = getattr(model, name)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "config": model.config.to_dict(),
        "centering_config": model.outcome_model.config.to_dict(),
        "n_features": model.n_features,
        "n_train": int(len(model.y)),
        "arrays": sorted(arrays),
        "metadata": metadata or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _member(zf, "header.json", json.dumps(header, indent=2, sort_keys=True).encode())
        for name in sorted(arrays):
            _member(zf, name + ".npy", _npy(arrays[name]))


def _regression(zf_arrays: dict, prefix: str, config: ForestConfig, n_features: int):
    ens = TreeEnsemble.from_arrays({k: zf_arrays[f"{prefix}/ensemble/{k}"]
                                    for k in TreeEnsemble.__dataclass_fields__})
    return RegressionForest(config, ens, zf_arrays[f"{prefix}/leaf_value"],
                            zf_arrays[f"{prefix}/oob_prediction"], n_features)


def load_model(path: str | Path) -> tuple[CausalForestModel, dict]:
    """Returns (model, header)."""
    with zipfile.ZipFile(path) as zf:
        try:
            header = json.loads(zf.read("header.json"))
        except KeyError:
            raise ValueError(f"{path} is not a model file (no header)") from None
        if header.get("format") != FORMAT:
            raise ValueError(f"{path}: unexpected format {header.get('format')!r}")
        if header.get("version") != VERSION:
            raise ValueError(f"{path}: unsupported model version {header.get('version')!r}")
        arrays = {name: np.load(io.BytesIO(zf.read(name + ".npy")), allow_pickle=False)
                  for name in header["arrays"]}
    config = ForestConfig.from_dict(header["config"])
    centering = ForestConfig.from_dict(header["centering_config"])
    p = int(header["n_features"])
    ens = TreeEnsemble.from_arrays({k: arrays[f"effect/ensemble/{k}"]
                                    for k in TreeEnsemble.__dataclass_fields__})
    model = CausalForestModel(
        config=config,
        outcome_model=_regression(arrays, "outcome", centering, p),
        propensity_model=_regression(arrays, "propensity", centering, p),
        ensemble=ens,
        **{name: arrays[f"effect/{name}"] for name in ("X", "y", "w", "y_hat", "w_hat",
                                                        "leaf_wy", "leaf_ww")},
    )
    return model, header
