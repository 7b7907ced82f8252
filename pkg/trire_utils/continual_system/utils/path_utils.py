# utils/path_utils.py

"""
Utility module for paths.
Handles path normalization, output-root resolution and file fingerprints used
as cache keys.
"""

import os
import re
from typing import Optional, Tuple
import logging

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "TRIRE_OUTPUT_ROOT"

def normalize_path(path: str) -> str:
    """
    Normalize a file path for consistent comparison.

    Args:
        path: Path to normalize
    Returns:
        Absolute, forward-slash path without a trailing slash ("" for empty input)
    """
    if not path:
        return ""
    p = path if os.path.isabs(path) else os.path.abspath(path)
    normalized = os.path.normpath(p).replace("\\", "/")
    # Lowercase drive letter on Windows for consistency
    if os.name == 'nt' and re.match(r"^[a-zA-Z]:", normalized):
        normalized = normalized[0].lower() + normalized[1:]
    if len(normalized) > 1 and normalized.endswith('/'):
        normalized = normalized.rstrip('/')
    return normalized

def join_paths(base_path: str, *paths: str) -> str:
    return normalize_path(os.path.join(base_path, *paths))

def resolve_output_root(out: Optional[str]) -> str:
    """
    Resolve the run output directory.

    Absolute `out` wins. A relative or missing `out` is placed under
    $TRIRE_OUTPUT_ROOT when set, otherwise under the working directory.
    """
    env_root = os.environ.get(OUTPUT_ROOT_ENV)
    if out and os.path.isabs(out):
        return normalize_path(out)
    base = env_root if env_root else os.getcwd()
    return normalize_path(os.path.join(base, out or "trire_runs"))

def ensure_directory(path: str) -> str:
    norm = normalize_path(path)
    os.makedirs(norm, exist_ok=True)
    return norm

def file_fingerprint(path: str) -> Tuple[str, float, int]:
    """(normalized path, mtime, size) for cache keys; raises OSError when missing."""
    norm = normalize_path(path)
    st = os.stat(norm)
    return norm, st.st_mtime, st.st_size
