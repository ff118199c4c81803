"""Checkpoint files: every parameter and buffer plus the configuration that produced them."""
from __future__ import annotations

import io
import json
import os
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .model import ModelSpec, SPPModel

FORMAT = "sppscl-checkpoint/1"


def save_checkpoint(path, model: SPPModel, config: TrainConfig, extra: dict | None = None) -> Path:
    """Write to a sibling temp file, then rename, so no partial file is left behind."""
    path = Path(path)
    meta = {"format": FORMAT, "model": model.spec.as_dict(), "config": config.as_dict(),
            **(extra or {})}
    arrays = {f"state/{k}": v for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(buf.getvalue())
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return path


def load_checkpoint(path) -> tuple[SPPModel, TrainConfig, dict]:
    with np.load(Path(path), allow_pickle=False) as npz:
        meta = json.loads(npz["__meta__"].tobytes().decode())
        state = {k[len("state/"):]: npz[k] for k in npz.files if k.startswith("state/")}
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path}: unrecognised checkpoint format {meta.get('format')!r}")
    config = TrainConfig.from_dict(meta["config"])
    model = SPPModel(ModelSpec(**meta["model"]), seed=config.seed)
    model.load_state_dict(state)
    return model, config, meta
