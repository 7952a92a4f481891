"""Checkpoint archive: named little-endian float64 tensors plus a shape header.

The archive is a NumPy ``.npz`` file.  Each parameter is stored under its
canonical name as a ``<f8`` array; the entry ``__header__`` holds the UTF-8
JSON encoding of ``{"format": 1, "shape": ModelShape fields}``.  Loading
restores every value bit-for-bit.
"""

from __future__ import annotations

import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError
from .transformer import ModelShape, TransformerModel

FORMAT_VERSION = 1
HEADER_KEY = "__header__"


def save_checkpoint(model: TransformerModel, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"format": FORMAT_VERSION, "shape": model.shape.to_dict()}, sort_keys=True)
    arrays = {name: t.data.astype("<f8") for name, t in sorted(model.params.items())}
    arrays[HEADER_KEY] = np.frombuffer(header.encode("utf-8"), dtype=np.uint8)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | os.PathLike) -> TransformerModel:
    try:
        with np.load(path, allow_pickle=False) as archive:
            if HEADER_KEY not in archive.files:
                raise ConfigError(f"{path}: not a checkpoint (no header)")
            header = json.loads(archive[HEADER_KEY].tobytes().decode("utf-8"))
            if header.get("format") != FORMAT_VERSION:
                raise ConfigError(f"{path}: unsupported checkpoint format {header.get('format')}")
            shape = ModelShape.from_dict(header["shape"])
            params = {
                name: Tensor(archive[name].astype(np.float64))
                for name in archive.files
                if name != HEADER_KEY
            }
    except ConfigError:
        raise
    except (zipfile.BadZipFile, ValueError, KeyError, OSError) as exc:
        raise ConfigError(f"{path}: corrupt checkpoint ({exc})") from None
    return TransformerModel(shape, params)
