"""Synthetic multi-domain data with controlled label shift, plus CSV I/O.

Samples are drawn in a latent space where every domain shares the same
class-conditional Gaussians; each domain then applies its own affine
nuisance map ``x = R z + b`` to the latent draws.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .errors import LoadError, UsageError
from .proportions import check_simplex


@dataclass
class DomainTransform:
    matrix: np.ndarray
    offset: np.ndarray

    def apply(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.matrix.T + self.offset

    def invert(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64) - self.offset
        return np.linalg.solve(self.matrix, x.T).T

    @classmethod
    def identity(cls, dim: int) -> "DomainTransform":
        return cls(np.eye(dim), np.zeros(dim))


@dataclass
class SyntheticSpec:
    n_classes: int = 2
    n_sources: int = 1
    dim: int = 8
    sigma: float = 0.5
    source_proportions: list | None = None  # one simplex vector per source
    target_proportions: list | None = None
    n_per_domain: int | list = 2000  # int, or one entry per source then target
    class_means: list | None = None  # (L, dim); default +-unit vectors
    rotation_scale: float = 0.25
    offset_scale: float = 0.5
    transforms: list | None = None  # explicit DomainTransform per domain
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2 or self.n_sources < 1:
            raise UsageError("need at least 2 classes and 1 source domain")
        if self.sigma < 0:
            raise UsageError("sigma must be non-negative")
        if self.class_means is None and self.dim < math.ceil(self.n_classes / 2):
            raise UsageError("dim too small for the default class means")

    @property
    def n_domains(self) -> int:
        return self.n_sources + 1

    def proportions(self) -> list[np.ndarray]:
        uniform = np.full(self.n_classes, 1.0 / self.n_classes)
        src = self.source_proportions or [uniform] * self.n_sources
        if len(src) != self.n_sources:
            raise UsageError("one proportion vector per source domain required")
        tgt = uniform if self.target_proportions is None else self.target_proportions
        props = [check_simplex(p) for p in list(src) + [tgt]]
        if any(p.size != self.n_classes for p in props):
            raise UsageError("proportion vectors must have n_classes entries")
        return props

    def sizes(self) -> list[int]:
        if isinstance(self.n_per_domain, int):
            return [self.n_per_domain] * self.n_domains
        if len(self.n_per_domain) != self.n_domains:
            raise UsageError("n_per_domain list needs one entry per domain")
        return [int(n) for n in self.n_per_domain]

    def latent_means(self) -> np.ndarray:
        if self.class_means is not None:
            m = np.asarray(self.class_means, dtype=np.float64)
            if m.shape != (self.n_classes, self.dim):
                raise UsageError(f"class_means must have shape {(self.n_classes, self.dim)}")
            return m
        m = np.zeros((self.n_classes, self.dim))
        for l in range(self.n_classes):
            m[l, l // 2] = 1.0 if l % 2 == 0 else -1.0
        return m

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "transforms"}
        return json.loads(json.dumps(d, default=lambda o: np.asarray(o).tolist()))


@dataclass
class DomainDataset:
    x: np.ndarray
    y: np.ndarray | None
    domain: int
    is_target: bool = False
    proportions: np.ndarray | None = None  # declared; evaluation only
    labels_hidden: bool = False
    flags: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def training_labels(self) -> np.ndarray | None:
        return None if self.labels_hidden else self.y


def allocate_counts(n: int, proportions) -> np.ndarray:
    """Largest-remainder rounding of ``n * proportions`` to integers summing to ``n``."""
    p = np.asarray(proportions, dtype=np.float64)
    raw = n * p
    counts = np.floor(raw + 1e-9).astype(np.int64)
    short = n - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _random_transform(dim, rotation_scale, offset_scale, rng) -> DomainTransform:
    a = rng.standard_normal((dim, dim))
    skew = (a - a.T) / np.sqrt(2.0 * dim)
    rot = expm(rotation_scale * skew)
    offset = offset_scale * rng.standard_normal(dim) / np.sqrt(dim)
    return DomainTransform(rot, offset)


def domain_transforms(spec: SyntheticSpec) -> list[DomainTransform]:
    if spec.transforms is not None:
        if len(spec.transforms) != spec.n_domains:
            raise UsageError("one transform per domain required")
        return list(spec.transforms)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xA11]))
    return [_random_transform(spec.dim, spec.rotation_scale, spec.offset_scale, rng)
            for _ in range(spec.n_domains)]


def sample_latent(spec: SyntheticSpec, domain: int, proportions, n: int):
    """Latent draws and labels of one domain; the stream depends only on (seed, domain)."""
    means = spec.latent_means()
    counts = allocate_counts(n, proportions)
    # per-class sub-streams so a class's draws do not depend on other classes' counts
    subs = np.random.SeedSequence([spec.seed, domain]).spawn(spec.n_classes + 1)
    z, y = [], []
    for l, c in enumerate(counts):
        crng = np.random.default_rng(subs[l])
        z.append(means[l] + spec.sigma * crng.standard_normal((c, spec.dim)))
        y.append(np.full(c, l, dtype=np.intp))
    z, y = np.vstack(z), np.concatenate(y)
    perm = np.random.default_rng(subs[-1]).permutation(n)
    return z[perm], y[perm]


def generate(spec: SyntheticSpec) -> list[DomainDataset]:
    """Sources first (domains 0..S-1), target last (domain S)."""
    props = spec.proportions()
    sizes = spec.sizes()
    transforms = domain_transforms(spec)
    out = []
    for s in range(spec.n_domains):
        z, y = sample_latent(spec, s, props[s], sizes[s])
        is_target = s == spec.n_sources
        flags = []
        missing = np.flatnonzero(np.bincount(y, minlength=spec.n_classes) == 0)
        if missing.size and not is_target:
            flags.append(f"missing_classes:{','.join(map(str, missing))}")
            warnings.warn(f"source domain {s} has no samples of class {missing[0]}")
        out.append(DomainDataset(transforms[s].apply(z), y, s, is_target, props[s],
                                 labels_hidden=is_target, flags=flags))
    return out


def proportion_sweep(spec: SyntheticSpec, sweep: Sequence[float]) -> list[tuple[float, list[DomainDataset]]]:
    """One instance per target class-0 proportion; source data is shared across points."""
    if spec.n_classes != 2:
        raise UsageError("the proportion sweep is defined for two classes")
    out = []
    for p in sweep:
        if not 0.0 < p < 1.0:
            raise UsageError(f"sweep value {p} outside (0, 1)")
        out.append((float(p), generate(replace(spec, target_proportions=[p, 1.0 - p]))))
    return out


@dataclass
class TabularSchema:
    n_features: int | None = None  # None: every column except label/domain
    label_column: str = "label"
    domain_column: str = "domain"
    target_domain: int | None = None
    domains: Sequence[int] | None = None  # allowed ids; None accepts any


def write_tabular(path, datasets: Sequence[DomainDataset], include_target_labels=False,
                  metadata: dict | None = None) -> Path:
    """Write datasets to CSV; true proportions go to a ``.meta.json`` sidecar."""
    path = Path(path)
    dim = datasets[0].x.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(dim)] + ["label", "domain"])
        for ds in datasets:
            hide = ds.is_target and not include_target_labels
            for i in range(len(ds)):
                label = "" if hide or ds.y is None else int(ds.y[i])
                w.writerow([repr(float(v)) for v in ds.x[i]] + [label, ds.domain])
    meta = {
        "format_version": 1,
        "target_domain": next((d.domain for d in datasets if d.is_target), None),
        "proportions": {str(d.domain): None if d.proportions is None else list(map(float, d.proportions))
                        for d in datasets},
    }
    meta.update(metadata or {})
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def read_sidecar(path) -> dict | None:
    p = sidecar_path(path)
    return json.loads(p.read_text()) if p.exists() else None


def load_tabular(path, schema: TabularSchema | None = None) -> list[DomainDataset]:
    """Parse a CSV into per-domain datasets sorted by domain id."""
    schema = schema or TabularSchema()
    path = Path(path)
    if not path.exists():
        raise LoadError(f"{path}: no such file")
    meta = read_sidecar(path)
    target = schema.target_domain
    if target is None and meta is not None:
        target = meta.get("target_domain")
    rows: dict[int, tuple[list, list]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError(f"{path}: empty file") from None
        try:
            li = header.index(schema.label_column)
            di = header.index(schema.domain_column)
        except ValueError as exc:
            raise LoadError(f"{path}:1: {exc}") from None
        fcols = [i for i in range(len(header)) if i not in (li, di)]
        if schema.n_features is not None:
            if len(fcols) < schema.n_features:
                raise LoadError(f"{path}:1: expected {schema.n_features} feature columns")
            fcols = fcols[: schema.n_features]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise LoadError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                dom = int(row[di])
                feats = [float(row[i]) for i in fcols]
            except ValueError as exc:
                raise LoadError(f"{path}:{lineno}: {exc}") from None
            if schema.domains is not None and dom not in schema.domains:
                raise LoadError(f"{path}:{lineno}: unknown domain id {dom}")
            cell = row[li].strip()
            if cell == "":
                if dom != target:
                    raise LoadError(f"{path}:{lineno}: missing label for source domain {dom}")
                label = -1
            else:
                try:
                    label = int(cell)
                except ValueError:
                    raise LoadError(f"{path}:{lineno}: bad label {cell!r}") from None
            xs, ys = rows.setdefault(dom, ([], []))
            xs.append(feats)
            ys.append(label)
    props = (meta or {}).get("proportions", {})
    out = []
    for dom in sorted(rows):
        xs, ys = rows[dom]
        y = np.asarray(ys, dtype=np.intp)
        known = (y >= 0).all()
        p = props.get(str(dom))
        out.append(DomainDataset(
            np.asarray(xs, dtype=np.float64).reshape(len(xs), len(fcols)),
            y if known else None,
            dom,
            is_target=dom == target,
            proportions=None if p is None else np.asarray(p),
            labels_hidden=dom == target,
        ))
    return out
