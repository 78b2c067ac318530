import hashlib
import json
import logging
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from app.models.operators import BlockOperator

logger = logging.getLogger(__name__)


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_json(model: BaseModel, path: Union[str, Path]) -> Path:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model.model_dump(mode="json"), sort_keys=True, indent=2) + "\n")
    return path


def write_table(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.12e")
    return path


def export_blocks(operator: BlockOperator, path: Union[str, Path]) -> Path:
    """Dense blocks with their leaf-mode pairs and the transverse mode table, as a compressed .npz archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"transverse_modes": operator.lattice.modes, "output_modes": operator.output_lattice.modes,
              "rank": np.array(operator.rank)}
    for index, ((a, b), _) in enumerate(sorted(operator.blocks.items())):
        arrays[f"block_{index}"] = operator.dense_block(a, b)
        arrays[f"pair_{index}"] = np.array([a, b])
    arrays["metadata"] = np.array(json.dumps(operator.metadata, sort_keys=True, default=str))
    np.savez_compressed(path, **arrays)
    logger.debug(f"Exported {len(operator.blocks)} blocks to {path}")
    return path
