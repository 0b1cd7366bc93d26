# utils.py
import os
import csv
import json
import logging
from typing import Any, Dict, Iterable, Optional, Sequence

import numpy as np
import yaml

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "DYNREACH_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


class DynreachError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(DynreachError, ValueError):
    """A scenario file is missing, malformed, or references unknown names."""


class ParameterError(DynreachError, ValueError):
    """A numeric argument violates its contract (dimension, PSD-ness, range)."""


class OracleSizeError(ParameterError):
    """A reference oracle was called on an instance larger than its size guard."""


def load_config(config_path: str) -> Dict[str, Any]:
    """Loads a YAML scenario file into a plain dictionary.

    Args:
        config_path: Path to the scenario file.

    Returns:
        The parsed mapping.

    Raises:
        ConfigError: If the file does not exist, is not valid YAML, or is not a mapping.
    """
    if not os.path.exists(config_path):
        raise ConfigError(f"Scenario file not found: {config_path}")
    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"Could not parse {config_path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{config_path}: top level must be a mapping, got {type(data).__name__}")
    return data


def get_config_value(config: Dict[str, Any], key: str, default: Any) -> Any:
    """Safely gets a value from a nested config mapping using a dotted key, or returns default."""
    node: Any = config
    for part in key.split('.'):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def get_output_root(override: Optional[str] = None) -> str:
    """Resolves the output root: explicit flag, then environment, then the default."""
    if override:
        return override
    return os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)


def format_value(value: Any) -> str:
    """Formats a scalar for CSV output so that reruns are byte-identical."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
    """Writes rows with a fixed header. Returns the number of data rows written."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    count = 0
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])
            count += 1
    logger.debug("Wrote %d rows to %s", count, path)
    return count


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        f = float(value)
        # JSON has no NaN/inf literals
        return f if np.isfinite(f) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_json(path: str, payload: Dict[str, Any]) -> None:
    """Writes a JSON document with sorted keys; NaN and infinities become null."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(_jsonable(payload), f, indent=2, sort_keys=True)
        f.write("\n")


def as_vector(values: Any, size: int, name: str) -> np.ndarray:
    """Converts values to a float vector of a given length, raising ParameterError otherwise."""
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.shape[0] != size:
        raise ParameterError(f"{name} must have {size} entries, got {arr.shape[0]}")
    return arr


def symmetrize_psd(matrix: np.ndarray, floor: float) -> np.ndarray:
    """Symmetrizes a square matrix (or a stack) and lifts its eigenvalues to at least floor."""
    sym = 0.5 * (matrix + np.swapaxes(matrix, -1, -2))
    eigvals, eigvecs = np.linalg.eigh(sym)
    eigvals = np.maximum(eigvals, floor)
    return (eigvecs * eigvals[..., None, :]) @ np.swapaxes(eigvecs, -1, -2)


def psd_sqrt(matrix: np.ndarray, name: str = "covariance", tol: float = 1e-10) -> np.ndarray:
    """Returns L with L @ L.T == matrix for a symmetric PSD matrix.

    Raises:
        ParameterError: If the matrix is not symmetric or has a negative eigenvalue beyond tol.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ParameterError(f"{name} must be square, got shape {matrix.shape}")
    scale = max(1.0, float(np.max(np.abs(matrix))) if matrix.size else 1.0)
    if not np.allclose(matrix, matrix.T, atol=tol * scale):
        raise ParameterError(f"{name} is not symmetric")
    eigvals, eigvecs = np.linalg.eigh(0.5 * (matrix + matrix.T))
    if eigvals.size and eigvals.min() < -tol * scale:
        raise ParameterError(f"{name} is not positive semidefinite (min eigenvalue {eigvals.min():.3e})")
    return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
