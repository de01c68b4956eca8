"""Writing of the JSON artifacts every command emits."""
import json
import logging
import math
import os
import tempfile
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


def tool_version() -> str:
    try:
        return version("odskd")
    except PackageNotFoundError:  # pragma: no cover
        return "0.0.0+unknown"


def to_jsonable(obj: Any) -> Any:
    """Converts numpy values, paths and infinite floats into plain JSON types.
    Infinite sentinels are written as the strings "inf" / "-inf"."""
    if isinstance(obj, dict):
        return {str(key): to_jsonable(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(value) for value in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return to_jsonable(obj.item())
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, os.PathLike):
        return str(obj)
    return obj


def atomic_write_text(path: PathLike, text: str):
    """Writes to a temporary file in the target directory and renames it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        logger.debug("Overwriting %s", path)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as tmp:
            tmp.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def dump_json(content: Any) -> str:
    return json.dumps(
        to_jsonable(content),
        sort_keys=True,
        indent=4,
        separators=(",", ": "),
    )


def write_json(path: PathLike, content: Any):
    atomic_write_text(path, dump_json(content) + "\n")


def read_json(path: PathLike) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_csv(frame: pd.DataFrame, path: PathLike):
    """CSV without index, floats with 17 significant digits so values read back exactly."""
    atomic_write_text(path, frame.to_csv(index=False, float_format="%.17g"))


def read_csv(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")
