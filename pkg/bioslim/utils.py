import hashlib
import json
import time
from functools import wraps
from pathlib import Path
from typing import Any, Optional, Union

from bioslim.config import logger

PathLike = Union[str, Path]


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_bytes(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def reduction_pct(baseline: Optional[float], value: Optional[float]) -> Optional[float]:
    if baseline is None or value is None or baseline == 0:
        return None
    return (baseline - value) / baseline * 100


def format_reduction(pct: Optional[float]) -> str:
    if pct is None:
        return ""
    if pct > 0:
        return f"({pct:.1f}% ↓)"
    elif pct < 0:
        return f"({abs(pct):.1f}% ↑)"
    else:
        return "(0.0%)"


def format_bytes(size: Optional[int]) -> str:
    if size is None:
        return "N/A"
    if size >= 1 << 20:
        return f"{size / (1 << 20):.2f}MiB"
    elif size >= 1 << 10:
        return f"{size / (1 << 10):.2f}KiB"
    else:
        return f"{size}B"


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return path


def read_json(path: PathLike) -> Any:
    return json.loads(Path(path).read_text())


def timed(func):
    @wraps(func)
    def wrapper(*args, **kwargs):
        start_time = time.perf_counter()
        try:
            result = func(*args, **kwargs)
            execution_time = (time.perf_counter() - start_time) * 1000
            logger.debug("stage finished", stage=func.__name__, ms=round(execution_time, 2))
            return result
        except Exception as e:
            execution_time = (time.perf_counter() - start_time) * 1000
            logger.error("stage failed", stage=func.__name__, ms=round(execution_time, 2), error=str(e))
            raise

    return wrapper
