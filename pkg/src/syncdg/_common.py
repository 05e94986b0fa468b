"""Shared plumbing: error types, deterministic seed derivation, file helpers."""

import hashlib
import os
import tempfile
from pathlib import Path


class ValidationError(ValueError):
    """Raised when an argument or data structure violates a documented contract."""


class SequencingError(RuntimeError):
    """Raised when a recurrent state is used out of domain order."""


class NonFiniteLossError(RuntimeError):
    """Raised when a loss term becomes NaN or infinite during training."""

    def __init__(self, term: str, value: float):
        self.term = term
        self.value = value
        super().__init__(f"loss term '{term}' is non-finite ({value!r})")


def derive_seed(*parts) -> int:
    """Derive a stable 63-bit seed from a tuple of labels and integers.

    The same parts always map to the same seed, across processes and
    platforms, so every stochastic component can own an isolated stream.
    """
    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def float_repr(value) -> str:
    """Shortest decimal string that round-trips the float64 value exactly."""
    return repr(float(value))


def write_text_atomic(path, text: str) -> None:
    """Write text to path via a same-directory temp file plus rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def source_hash() -> str:
    """Hash of this package's source files, recorded in run manifests."""
    root = Path(__file__).resolve().parent
    digest = hashlib.sha256()
    for file in sorted(root.glob("*.py")):
        digest.update(file.name.encode("utf-8"))
        digest.update(file.read_bytes())
    return digest.hexdigest()
