"""Evolving domain sequences: synthetic generators, drift variants, splits, batching, I/O.

A sequence is an ordered list of time-indexed domains. Each domain holds a
fixed-dimension feature matrix and integer class labels. The two built-in
generators produce 2-D binary-classification streams whose label boundary
moves from one domain to the next:

* circle: Gaussian blobs whose centers walk along a half circle while a
  linear boundary through the origin rotates with them.
* sine: uniform points in a box labeled against a sine curve whose phase
  advances each domain.

Drift variants rewrite the circle boundary-angle schedule (gradual, abrupt,
noise) without touching feature vectors.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import torch

from ._common import ValidationError, derive_seed, float_repr, write_text_atomic

_FILE_TAG = "syncdg-dataset"
_FILE_VERSION = 1
DRIFT_KINDS = ("gradual", "abrupt", "noise")


@dataclass(frozen=True)
class Sample:
    """One labeled observation taken from a specific domain."""

    features: torch.Tensor
    label: int
    domain_index: int


@dataclass
class Domain:
    """All samples observed at a single timestamp t."""

    t: int
    features: torch.Tensor  # [n, d] float64
    labels: torch.Tensor  # [n] int64

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValidationError(f"domain {self.t}: features must be 2-D [n, d]")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ValidationError(f"domain {self.t}: labels must align with features")
        if self.features.shape[0] == 0:
            raise ValidationError(f"domain {self.t}: must hold at least one sample")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    def samples(self) -> list[Sample]:
        return [
            Sample(features=self.features[i], label=int(self.labels[i]), domain_index=self.t)
            for i in range(self.n_samples)
        ]


@dataclass
class DomainSequence:
    """Ordered domains sharing one feature dimension and class count.

    Timestamps are strictly increasing consecutive integers. Freshly
    generated or loaded sequences start at t = 1; blocks produced by
    split_domains keep their original timestamps and may start later.
    """

    name: str
    feature_dim: int
    num_classes: int
    domains: list[Domain]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self, require_start_at_one: bool = False) -> None:
        if not self.domains:
            raise ValidationError("sequence must contain at least one domain")
        ts = [d.t for d in self.domains]
        for prev, cur in zip(ts, ts[1:]):
            if cur != prev + 1:
                raise ValidationError(f"domain timestamps must be consecutive, got {prev} then {cur}")
        if ts[0] < 1:
            raise ValidationError(f"domain timestamps must start at 1 or later, got {ts[0]}")
        if require_start_at_one and ts[0] != 1:
            raise ValidationError(f"sequence must start at t=1, got {ts[0]}")
        for d in self.domains:
            if d.features.shape[1] != self.feature_dim:
                raise ValidationError(f"domain {d.t}: feature dim {d.features.shape[1]} != {self.feature_dim}")
            if d.labels.numel() and int(d.labels.max()) >= self.num_classes:
                raise ValidationError(f"domain {d.t}: label {int(d.labels.max())} outside 0..{self.num_classes - 1}")
            if d.labels.numel() and int(d.labels.min()) < 0:
                raise ValidationError(f"domain {d.t}: negative label")

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    def timestamps(self) -> list[int]:
        return [d.t for d in self.domains]

    def boundary_angles(self) -> list[float]:
        """Per-domain boundary angle schedule recorded by the generators."""
        raw = self.metadata.get("boundary_angles")
        if raw is None:
            raise ValidationError("sequence carries no boundary_angles metadata")
        return [float(v) for v in raw.split(",")]

    def total_samples(self) -> int:
        return sum(d.n_samples for d in self.domains)

    def subsequence(self, domains: Sequence[Domain]) -> "DomainSequence":
        """New sequence over a contiguous run of this sequence's domains."""
        return DomainSequence(
            name=self.name,
            feature_dim=self.feature_dim,
            num_classes=self.num_classes,
            domains=list(domains),
            metadata=dict(self.metadata),
        )


@dataclass
class SplitSpec:
    """Contiguous source/intermediate/target fractions; defaults 1/2 : 1/6 : 1/3."""

    source_fraction: float = 1 / 2
    intermediate_fraction: float = 1 / 6
    target_fraction: float = 1 / 3

    def validate(self) -> None:
        total = self.source_fraction + self.intermediate_fraction + self.target_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"split fractions must sum to 1, got {total!r}")
        if min(self.source_fraction, self.intermediate_fraction, self.target_fraction) <= 0:
            raise ValidationError("split fractions must be positive")


def circle_boundary_label(points: torch.Tensor, angle: float) -> torch.Tensor:
    """Label 2-D points against the rotating diameter boundary at the given angle.

    The boundary is the line through the origin in direction (cos a, sin a);
    its unit normal is (-sin a, cos a). Points on the boundary get label 1.
    """
    margin = points[..., 0] * (-math.sin(angle)) + points[..., 1] * math.cos(angle)
    return (margin >= 0).to(torch.int64)


def sine_boundary_label(points: torch.Tensor, phase: float, amplitude: float = 1.0) -> torch.Tensor:
    """Label 1 iff the point lies on or above amplitude * sin(x1 - phase)."""
    margin = points[..., 1] - amplitude * torch.sin(points[..., 0] - phase)
    return (margin >= 0).to(torch.int64)


def _check_generator_args(n_domains: int, samples_per_domain: int) -> None:
    if n_domains < 2:
        raise ValidationError(f"n_domains must be >= 2, got {n_domains}")
    if samples_per_domain < 2:
        raise ValidationError(f"samples_per_domain must be >= 2, got {samples_per_domain}")


def _is_balanced(labels: torch.Tensor, num_classes: int, min_fraction: float) -> bool:
    counts = torch.bincount(labels, minlength=num_classes)
    return bool((counts >= max(1, math.floor(min_fraction * labels.numel()))).all())


def _angles_metadata(angles: list[float]) -> str:
    return ",".join(float_repr(a) for a in angles)


def generate_circle(
    n_domains: int,
    samples_per_domain: int,
    seed: int,
    *,
    radius: float = 1.0,
    std: float = 0.15,
    min_class_fraction: float = 0.2,
    max_resample: int = 100,
) -> DomainSequence:
    """Gaussian blobs on a half-circle arc with a boundary that rotates in step.

    Domain t draws from N(center_t, std^2 I) with center_t on the arc at
    angle pi * (t - 1) / (n_domains - 1). Labels come from
    circle_boundary_label at the same angle, so the boundary always passes
    through the blob center and both classes stay represented. Domains whose
    class balance falls below min_class_fraction are redrawn.
    """
    _check_generator_args(n_domains, samples_per_domain)
    domains = []
    angles = []
    for t in range(1, n_domains + 1):
        angle = math.pi * (t - 1) / (n_domains - 1)
        center = torch.tensor(
            [radius * math.cos(angle), radius * math.sin(angle)], dtype=torch.float64
        )
        gen = torch.Generator().manual_seed(derive_seed(seed, "circle", t))
        for _ in range(max_resample):
            feats = center + std * torch.randn((samples_per_domain, 2), generator=gen, dtype=torch.float64)
            labels = circle_boundary_label(feats, angle)
            if _is_balanced(labels, 2, min_class_fraction):
                break
        else:
            raise ValidationError(f"domain {t}: could not draw a class-balanced sample")
        domains.append(Domain(t=t, features=feats, labels=labels))
        angles.append(angle)
    metadata = {
        "generator": "circle",
        "boundary_angles": _angles_metadata(angles),
        "radius": float_repr(radius),
        "std": float_repr(std),
    }
    return DomainSequence("circle", 2, 2, domains, metadata)


def generate_sine(
    n_domains: int,
    samples_per_domain: int,
    seed: int,
    *,
    amplitude: float = 1.0,
    y_half_width: float = 1.5,
    min_class_fraction: float = 0.2,
    max_resample: int = 100,
) -> DomainSequence:
    """Uniform box points labeled against a sine boundary with advancing phase.

    x1 is uniform on [0, 2*pi), x2 uniform on [-y_half_width, y_half_width].
    Domain t uses phase 2*pi*(t - 1)/n_domains; labels follow
    sine_boundary_label (points exactly on the curve get label 1).
    """
    _check_generator_args(n_domains, samples_per_domain)
    domains = []
    angles = []
    for t in range(1, n_domains + 1):
        phase = 2.0 * math.pi * (t - 1) / n_domains
        gen = torch.Generator().manual_seed(derive_seed(seed, "sine", t))
        for _ in range(max_resample):
            u = torch.rand((samples_per_domain, 2), generator=gen, dtype=torch.float64)
            feats = torch.stack(
                [u[:, 0] * (2.0 * math.pi), (u[:, 1] * 2.0 - 1.0) * y_half_width], dim=1
            )
            labels = sine_boundary_label(feats, phase, amplitude)
            if _is_balanced(labels, 2, min_class_fraction):
                break
        else:
            raise ValidationError(f"domain {t}: could not draw a class-balanced sample")
        domains.append(Domain(t=t, features=feats, labels=labels))
        angles.append(phase)
    metadata = {
        "generator": "sine",
        "boundary_angles": _angles_metadata(angles),
        "amplitude": float_repr(amplitude),
        "y_half_width": float_repr(y_half_width),
    }
    return DomainSequence("sine", 2, 2, domains, metadata)


def apply_drift_variant(
    seq: DomainSequence,
    kind: str,
    seed: int,
    *,
    noise_scale: float = 0.15,
) -> DomainSequence:
    """Relabel a circle sequence under a modified boundary-angle schedule.

    gradual: the angle advances at half speed initially and accelerates
    smoothly, reaching the same endpoint. abrupt: the angle jumps by pi/2
    for every domain from the midpoint (second half) onward. noise: each
    domain's angle is perturbed by N(0, noise_scale^2), fixed by seed.
    Features are never modified, only labels and the recorded schedule.
    """
    if kind not in DRIFT_KINDS:
        raise ValidationError(f"unknown drift kind {kind!r}, expected one of {DRIFT_KINDS}")
    if seq.metadata.get("generator") != "circle":
        raise ValidationError("drift variants apply to circle sequences only")
    base = seq.boundary_angles()
    count = seq.num_domains
    if kind == "gradual":
        if count < 2:
            raise ValidationError("gradual drift needs at least 2 domains")
        angles = []
        for i in range(count):
            u = i / (count - 1)
            angles.append(math.pi * (u + u * u) / 2.0)
    elif kind == "abrupt":
        midpoint = count // 2 + 1
        angles = [a + (math.pi / 2.0 if d.t >= midpoint else 0.0) for a, d in zip(base, seq.domains)]
    else:
        if noise_scale < 0:
            raise ValidationError("noise_scale must be non-negative")
        if noise_scale == 0:
            angles = list(base)
        else:
            gen = torch.Generator().manual_seed(derive_seed(seed, "drift-noise"))
            eps = torch.randn(count, generator=gen, dtype=torch.float64)
            angles = [a + noise_scale * float(e) for a, e in zip(base, eps)]
    domains = [
        Domain(t=d.t, features=d.features.clone(), labels=circle_boundary_label(d.features, angle))
        for d, angle in zip(seq.domains, angles)
    ]
    metadata = dict(seq.metadata)
    metadata["boundary_angles"] = _angles_metadata(angles)
    metadata["variant"] = kind
    if kind == "noise":
        metadata["noise_scale"] = float_repr(noise_scale)
    return DomainSequence(f"{seq.name}-{kind}", seq.feature_dim, seq.num_classes, domains, metadata)


def split_domains(
    seq: DomainSequence, spec: SplitSpec | None = None
) -> tuple[DomainSequence, DomainSequence, DomainSequence]:
    """Partition a sequence into contiguous source/intermediate/target blocks.

    Source and intermediate counts are round-half-up of fraction * T; the
    target block absorbs the remainder. Blocks keep original timestamps.
    """
    spec = spec or SplitSpec()
    spec.validate()
    total = seq.num_domains
    n_source = math.floor(spec.source_fraction * total + 0.5)
    n_intermediate = math.floor(spec.intermediate_fraction * total + 0.5)
    n_target = total - n_source - n_intermediate
    if min(n_source, n_intermediate, n_target) < 1:
        raise ValidationError(
            f"split of {total} domains yields empty block "
            f"({n_source}/{n_intermediate}/{n_target})"
        )

    def block(domains):
        return DomainSequence(seq.name, seq.feature_dim, seq.num_classes, list(domains), dict(seq.metadata))

    return (
        block(seq.domains[:n_source]),
        block(seq.domains[n_source : n_source + n_intermediate]),
        block(seq.domains[n_source + n_intermediate :]),
    )


def sequence_batches(
    seq: DomainSequence,
    batch_size: int,
    seed: int,
    *,
    epoch: int = 0,
    replacement: bool = False,
) -> Iterator[list[tuple[torch.Tensor, torch.Tensor]]]:
    """Yield index-aligned mini-batches, one (x, y) pair per domain per item.

    Every yielded item holds exactly batch_size rows for every domain. The
    number of items per epoch is ceil(min domain size / batch_size); larger
    domains contribute a fresh shuffled subset, and batches past a domain's
    end wrap around its permutation so shapes stay uniform. Domains smaller
    than batch_size are rejected unless replacement sampling is enabled.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    sizes = [d.n_samples for d in seq.domains]
    if not replacement and min(sizes) < batch_size:
        raise ValidationError(
            f"domain {seq.domains[sizes.index(min(sizes))].t} has {min(sizes)} samples, "
            f"fewer than batch_size {batch_size}; enable replacement sampling"
        )
    iterations = max(1, math.ceil(min(sizes) / batch_size))
    needed = iterations * batch_size
    order = []
    for d in seq.domains:
        gen = torch.Generator().manual_seed(derive_seed(seed, "batch", epoch, d.t))
        if d.n_samples >= batch_size:
            perm = torch.randperm(d.n_samples, generator=gen)
            reps = math.ceil(needed / d.n_samples)
            idx = perm.repeat(reps)[:needed]
        else:
            idx = torch.randint(d.n_samples, (needed,), generator=gen)
        order.append(idx)
    for i in range(iterations):
        lo, hi = i * batch_size, (i + 1) * batch_size
        yield [
            (d.features[idx[lo:hi]], d.labels[idx[lo:hi]])
            for d, idx in zip(seq.domains, order)
        ]


def save_sequence(seq: DomainSequence, path) -> None:
    """Persist a sequence as self-describing columnar text; round-trip exact."""
    lines = [f"{_FILE_TAG} v{_FILE_VERSION}"]
    lines.append(f"name {seq.name}")
    lines.append(f"feature_dim {seq.feature_dim}")
    lines.append(f"num_classes {seq.num_classes}")
    lines.append(f"num_domains {seq.num_domains}")
    for key in sorted(seq.metadata):
        lines.append(f"meta {key} {seq.metadata[key]}")
    columns = " ".join(["t", "label"] + [f"x{i}" for i in range(seq.feature_dim)])
    lines.append(f"columns {columns}")
    lines.append("data")
    for d in seq.domains:
        for i in range(d.n_samples):
            values = " ".join(float_repr(v) for v in d.features[i].tolist())
            lines.append(f"{d.t} {int(d.labels[i])} {values}")
    write_text_atomic(path, "\n".join(lines) + "\n")


def _parse_error(path, lineno: int, message: str) -> ValidationError:
    return ValidationError(f"{path}:{lineno}: {message}")


def load_sequence(path) -> DomainSequence:
    """Load a sequence file written by save_sequence or an external author.

    Validates the header, requires consecutive timestamps starting at 1,
    and reports the offending line on malformed records.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].startswith(_FILE_TAG):
        raise _parse_error(path, 1, f"missing '{_FILE_TAG}' header")
    header: dict[str, str] = {}
    metadata: dict[str, str] = {}
    data_start = None
    for lineno, line in enumerate(lines[1:], start=2):
        if line == "data":
            data_start = lineno + 1
            break
        parts = line.split(" ", 1)
        if len(parts) != 2:
            raise _parse_error(path, lineno, f"malformed header line {line!r}")
        key, value = parts
        if key == "meta":
            meta_parts = value.split(" ", 1)
            if len(meta_parts) != 2:
                raise _parse_error(path, lineno, f"malformed meta line {line!r}")
            metadata[meta_parts[0]] = meta_parts[1]
        else:
            header[key] = value
    if data_start is None:
        raise _parse_error(path, len(lines), "missing 'data' section")
    for required in ("name", "feature_dim", "num_classes", "num_domains"):
        if required not in header:
            raise _parse_error(path, 1, f"header missing '{required}'")
    try:
        feature_dim = int(header["feature_dim"])
        num_classes = int(header["num_classes"])
        num_domains = int(header["num_domains"])
    except ValueError as exc:
        raise _parse_error(path, 1, f"non-integer header field: {exc}") from None

    rows: dict[int, list[tuple[int, list[float]]]] = {}
    for lineno, line in enumerate(lines[data_start - 1 :], start=data_start):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 + feature_dim:
            raise _parse_error(path, lineno, f"expected {2 + feature_dim} columns, got {len(parts)}")
        try:
            t = int(parts[0])
            label = int(parts[1])
            values = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise _parse_error(path, lineno, f"malformed record: {exc}") from None
        if label < 0 or label >= num_classes:
            raise _parse_error(path, lineno, f"label {label} outside 0..{num_classes - 1}")
        rows.setdefault(t, []).append((label, values))

    if not rows:
        raise _parse_error(path, data_start, "file contains no samples")
    ts = sorted(rows)
    if ts[0] != 1 or ts != list(range(1, len(ts) + 1)):
        raise ValidationError(f"{path}: domain timestamps must be consecutive starting at 1, got {ts}")
    if len(ts) != num_domains:
        raise ValidationError(f"{path}: header declares {num_domains} domains, file has {len(ts)}")
    domains = []
    for t in ts:
        labels = torch.tensor([r[0] for r in rows[t]], dtype=torch.int64)
        feats = torch.tensor([r[1] for r in rows[t]], dtype=torch.float64)
        domains.append(Domain(t=t, features=feats, labels=labels))
    return DomainSequence(header["name"], feature_dim, num_classes, domains, metadata)


def sequences_equal(a: DomainSequence, b: DomainSequence) -> bool:
    """Exact content equality: shapes, timestamps, labels, feature bits."""
    if (a.feature_dim, a.num_classes, a.num_domains) != (b.feature_dim, b.num_classes, b.num_domains):
        return False
    for da, db in zip(a.domains, b.domains):
        if da.t != db.t or da.n_samples != db.n_samples:
            return False
        if not torch.equal(da.labels, db.labels) or not torch.equal(da.features, db.features):
            return False
    return True
