# misc functions

import contextlib
import os
import tempfile
from pathlib import Path
from typing import Iterator, List, Union

import numpy as np

from openlandmark.core import validation

#: name of the lock file guarding an output directory
LOCK_NAME = ".openlandmark.lock"


@contextlib.contextmanager
def atomic_path(path: Union[str, Path]) -> Iterator[Path]:
    """Yields a temporary path next to ``path`` and renames it onto ``path`` on success.

    The temporary file is removed if the body raises.
    """
    with _temporary(Path(path)) as tmp:
        yield tmp
        os.replace(tmp, path)


@contextlib.contextmanager
def atomic_paths(*paths: Union[str, Path]) -> Iterator[List[Path]]:
    """Like :func:`atomic_path` for several files, renamed together once the body succeeds.

    None of the final paths is touched if the body raises.
    """
    with contextlib.ExitStack() as stack:
        tmps = [stack.enter_context(_temporary(Path(p))) for p in paths]
        yield tmps
        for tmp, path in zip(tmps, paths):
            os.replace(tmp, path)


@contextlib.contextmanager
def _temporary(path: Path) -> Iterator[Path]:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    tmp = Path(tmp)
    try:
        yield tmp
    finally:
        if tmp.exists():
            tmp.unlink()


@contextlib.contextmanager
def output_lock(directory: Union[str, Path]) -> Iterator[Path]:
    """Exclusive lock on an output directory, a lock file created with O_EXCL."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as err:
        raise validation.UserInputError(
            f"{directory} is locked by another run (remove {lock} if it is stale)"
        ) from err
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield lock
    finally:
        lock.unlink(missing_ok=True)


def subsample(items: list, cap, seed: int) -> list:
    """Deterministic random subset of at most ``cap`` items, original order kept."""
    if cap is None or len(items) <= cap:
        return list(items)
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(items), size=cap, replace=False))
    return [items[i] for i in keep]


def min_pairwise_distance(points: np.ndarray) -> float:
    """Smallest distance between two distinct points of an (M, d) array."""
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    dist[np.diag_indices_from(dist)] = np.inf
    return float(dist.min())
