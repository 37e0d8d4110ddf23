from dataclasses import asdict, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple
import hashlib
import json
import logging

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from app.exceptions import ConfigError, DatasetError
from app.models import ExperimentConfig
from app.utils.retry import create_retry_decorator

logger = logging.getLogger(__name__)


def parse_override(raw: str) -> Tuple[List[str], Any]:
    """KEY=VALUE with a dotted key; VALUE is read as JSON when it parses, else kept as text."""
    if "=" not in raw:
        raise ConfigError(f"override must look like KEY=VALUE, got {raw!r}")
    key, value = raw.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigError(f"empty override key in {raw!r}")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return path, parsed


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for raw in overrides:
        path, value = parse_override(raw)
        node = data
        for part in path[:-1]:
            if isinstance(node, list):
                try:
                    node = node[int(part)]
                except (ValueError, IndexError) as e:
                    raise ConfigError(f"override {raw!r}: no list element {part!r}") from e
                continue
            node = node.setdefault(part, {})
        last = path[-1]
        if isinstance(node, list):
            try:
                node[int(last)] = value
            except (ValueError, IndexError) as e:
                raise ConfigError(f"override {raw!r}: no list element {last!r}") from e
        else:
            node[last] = value
        logger.debug(f"Override {'.'.join(path)} = {value!r}")
    return data


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> ExperimentConfig:
    """
    Read the JSON experiment file, apply --override values and validate it.
    A missing path gives the default configuration plus overrides.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    data = apply_overrides(data, overrides)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        logger.error(f"Config validation failed: {e}")
        raise ConfigError(str(e)) from e


def canonical_json(config: BaseModel) -> str:
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(config: BaseModel) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def to_jsonable(value: Any) -> Any:
    """numpy, complex, dataclass, enum and pydantic values to plain JSON types."""
    if isinstance(value, BaseModel):
        return to_jsonable(value.model_dump(mode="python"))
    if is_dataclass(value) and not isinstance(value, type):
        return to_jsonable(asdict(value))
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {
            (",".join(map(str, key)) if isinstance(key, tuple) else str(key)): to_jsonable(item)
            for key, item in value.items()
        }
    if isinstance(value, (list, tuple)):
        return [to_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (complex, np.complexfloating)):
        return [float(value.real), float(value.imag)]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


@create_retry_decorator(max_attempts=5)
def write_json(path: Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(payload), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote {path}")
    return path


@create_retry_decorator(max_attempts=5)
def write_csv(path: Path, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, encoding="utf-8")
    logger.info(f"Wrote {path} ({len(frame)} rows)")
    return path


def read_json(path: str) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e


def read_dataset(path: str, label_column: Optional[str] = "label") -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    CSV with a header row, one sample per row; an integer label column is split off
    when present. Line numbers in errors count the header as line 1.
    """
    try:
        frame = pd.read_csv(path, encoding="utf-8")
    except FileNotFoundError as e:
        raise DatasetError(f"dataset not found: {path}") from e
    except pd.errors.EmptyDataError as e:
        raise DatasetError(f"{path} is empty") from e
    except pd.errors.ParserError as e:
        raise DatasetError(f"{path}: {e}") from e

    labels = None
    if label_column is not None and label_column in frame.columns:
        column = frame.pop(label_column)
        raw = pd.to_numeric(column, errors="coerce")
        bad = np.flatnonzero(raw.isna().to_numpy() | (raw % 1 != 0).to_numpy())
        if bad.size:
            raise DatasetError(f"label {column.iloc[bad[0]]!r} is not an integer", line=int(bad[0]) + 2)
        labels = raw.to_numpy(dtype=int)

    if frame.shape[1] == 0:
        raise DatasetError(f"{path} has no feature columns")
    values = frame.apply(pd.to_numeric, errors="coerce")
    bad_rows = np.flatnonzero(values.isna().any(axis=1).to_numpy())
    if bad_rows.size:
        row = int(bad_rows[0])
        column = values.columns[values.iloc[row].isna().to_numpy()][0]
        raise DatasetError(f"non-numeric value in column {column!r}", line=row + 2)
    logger.info(f"Read {values.shape[0]} samples with {values.shape[1]} features from {path}")
    return values.to_numpy(dtype=float), labels


def write_dataset(path: Path, X: np.ndarray, labels: Optional[np.ndarray] = None) -> Path:
    """Rows = samples; the inverse of read_dataset for a p x n sample matrix."""
    frame = pd.DataFrame(np.asarray(X).T, columns=[f"x{j}" for j in range(X.shape[0])])
    if labels is not None:
        frame["label"] = np.asarray(labels, dtype=int)
    return write_csv(path, frame)
