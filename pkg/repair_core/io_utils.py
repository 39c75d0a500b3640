import json
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator

from .errors import InvalidFlag, IoFailure


@contextmanager
def atomic_output(path: str | os.PathLike, mode: str = "wb", **open_kwargs: Any) -> Iterator[Any]:
    """Write to a sibling temp file and rename on success; nothing is left behind on failure."""
    dest = Path(path)
    dest.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{dest.name}.", dir=dest.parent)
    try:
        with os.fdopen(fd, mode, **open_kwargs) as fh:
            yield fh
        os.replace(tmp, dest)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def write_json(path: str | os.PathLike, payload: Any) -> None:
    try:
        with atomic_output(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=False, ensure_ascii=False)
            fh.write("\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}")


def require_file(path: str | os.PathLike, what: str = "input") -> Path:
    p = Path(path)
    if not p.is_file():
        raise InvalidFlag(f"{what} file not found: {p}")
    return p


def require_writable_dir(path: str | os.PathLike) -> Path:
    p = Path(path)
    parent = p if p.is_dir() else p.parent
    ancestor = parent
    while not ancestor.exists():
        ancestor = ancestor.parent
    if not os.access(ancestor, os.W_OK):
        raise InvalidFlag(f"output location is not writable: {p}")
    return p
