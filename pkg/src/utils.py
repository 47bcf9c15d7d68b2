import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, TypeVar

import numpy as np
import pandas as pd
import yaml

from src.errors import ConfigError

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

T = TypeVar("T")
R = TypeVar("R")


def setup_logger(name: str, log_file: Optional[str] = None, level: int = logging.INFO) -> logging.Logger:
    logger = logging.getLogger(name)
    logger.setLevel(level)
    if not logger.handlers:
        formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
        # stdout carries results; logs go to stderr
        sh = logging.StreamHandler(sys.stderr)
        sh.setFormatter(formatter)
        logger.addHandler(sh)
        log_file = log_file or os.getenv("HDQKD_LOG_FILE")
        if log_file:
            fh = RotatingFileHandler(log_file, maxBytes=10*1024*1024, backupCount=5)
            fh.setFormatter(formatter)
            logger.addHandler(fh)
        logger.propagate = False
    return logger


def load_structured(filepath: Path) -> Dict[str, Any]:
    """Reads a YAML or JSON document, picking the parser from the file extension."""
    filepath = Path(filepath)
    if not filepath.exists():
        raise ConfigError(f"{filepath}: file not found")
    suffix = filepath.suffix.lower()
    with open(filepath, 'r') as f:
        try:
            if suffix in (".yaml", ".yml"):
                data = yaml.safe_load(f)
            elif suffix == ".json":
                data = json.load(f)
            else:
                raise ConfigError(f"{filepath}: unsupported extension '{suffix}' (use .yaml, .yml or .json)")
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            where = f" line {mark.line + 1}, column {mark.column + 1}" if mark else ""
            raise ConfigError(f"{filepath}:{where} {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{filepath}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{filepath}: top level must be a mapping")
    return data


def render_table(df: pd.DataFrame, fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        df.to_csv(buf, index=False, lineterminator="\n")
        return buf.getvalue()
    if fmt == "json":
        return json.dumps(df.to_dict(orient="records"), indent=2) + "\n"
    if fmt == "text":
        return df.to_string(index=False) + "\n"
    raise ValueError(f"unknown format {fmt}")


def render_record(record: Dict[str, Any], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(record, indent=2) + "\n"
    flat = {k: (";".join(map(str, v)) if isinstance(v, list) and all(not isinstance(x, list) for x in v)
                else (json.dumps(v) if isinstance(v, (list, dict)) else v))
            for k, v in record.items()}
    return render_table(pd.DataFrame([flat]), fmt)


def write_output(text: str, out: Optional[Path] = None):
    if out is None:
        sys.stdout.write(text)
        return
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, 'w', newline='') as f:
        f.write(text)


def spawn_generators(seed: int, count: int) -> List[np.random.Generator]:
    """Independent streams derived from one master seed; stream i is fixed by (seed, i)."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.default_rng(child) for child in children]


def chunk_sizes(total: int, chunk: int) -> List[int]:
    full, rest = divmod(total, chunk)
    return [chunk] * full + ([rest] if rest else [])


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """Maps fn over items, returning results in input order whatever the completion order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def format_labels(labels: Iterable) -> str:
    return " ".join(f"({a},{b})" for a, b in sorted(labels))
