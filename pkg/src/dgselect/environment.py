"""Multi-domain data model, synthetic shift generator and dataset ingestion.

A :class:`Domain` holds one dataset drawn from a single distribution; an
:class:`Environment` is the collection of source domains a learner sees.
Samples are stored as dense arrays; :class:`Sample` is only a view type.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Raised for malformed or inconsistent datasets."""


class CsvFormatError(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class IdxFormatError(DataError):
    pass


class Sample(NamedTuple):
    features: np.ndarray
    label: int


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Domain:
    """One source of labelled samples.

    ``ids`` are integer sample identifiers, unique within an environment, so
    that train/validation disjointness can be checked after any resampling.
    """

    id: str
    X: np.ndarray
    y: np.ndarray
    ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y)
        if X.ndim != 2:
            raise DataError(f"domain {self.id!r}: features must be 2-D, got shape {X.shape}")
        if X.shape[0] == 0:
            raise DataError(f"domain {self.id!r} is empty")
        if y.shape != (X.shape[0],):
            raise DataError(f"domain {self.id!r}: {len(y)} labels for {X.shape[0]} samples")
        if not np.all(np.isfinite(X)):
            raise DataError(f"domain {self.id!r}: non-finite feature values")
        if y.dtype.kind not in "iu":
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise DataError(f"domain {self.id!r}: labels must be integers")
        y = y.astype(np.int64)
        if np.any(y < 0):
            raise DataError(f"domain {self.id!r}: negative label")
        ids = np.arange(X.shape[0]) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != y.shape:
            raise DataError(f"domain {self.id!r}: ids do not match samples")
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "ids", _frozen(ids))

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def samples(self) -> list[Sample]:
        return [Sample(x, int(c)) for x, c in zip(self.X, self.y)]

    def take(self, index) -> "Domain":
        index = np.asarray(index)
        return Domain(self.id, self.X[index], self.y[index], self.ids[index])

    def __len__(self) -> int:
        return self.m

    def __eq__(self, other) -> bool:
        if not isinstance(other, Domain):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.ids, other.ids)
        )


@dataclass(frozen=True, eq=False)
class Environment:
    domains: tuple[Domain, ...]
    num_classes: int
    feature_dim: int

    def __post_init__(self):
        domains = tuple(self.domains)
        if not domains:
            raise DataError("an environment needs at least one domain")
        seen = set()
        for dom in domains:
            if dom.d != self.feature_dim:
                raise DataError(f"domain {dom.id!r} has d={dom.d}, expected {self.feature_dim}")
            if int(dom.y.max()) >= self.num_classes:
                raise DataError(f"domain {dom.id!r} has label >= K={self.num_classes}")
            if dom.id in seen:
                raise DataError(f"duplicate domain id {dom.id!r}")
            seen.add(dom.id)
        object.__setattr__(self, "domains", domains)

    @classmethod
    def from_domains(cls, domains, num_classes: int | None = None) -> "Environment":
        domains = tuple(domains)
        if not domains:
            raise DataError("an environment needs at least one domain")
        if num_classes is None:
            num_classes = int(max(dom.y.max() for dom in domains)) + 1
        return cls(domains, num_classes, domains[0].d)

    @property
    def n(self) -> int:
        return len(self.domains)

    @property
    def ids(self) -> list[str]:
        return [dom.id for dom in self.domains]

    def __iter__(self) -> Iterator[Domain]:
        return iter(self.domains)

    def __getitem__(self, key: int | str) -> Domain:
        if isinstance(key, str):
            for dom in self.domains:
                if dom.id == key:
                    return dom
            raise KeyError(key)
        return self.domains[key]

    def without(self, domain_id: str) -> "Environment":
        rest = tuple(dom for dom in self.domains if dom.id != domain_id)
        if len(rest) == len(self.domains):
            raise KeyError(domain_id)
        return Environment(rest, self.num_classes, self.feature_dim)

    def subset(self, domain_ids) -> "Environment":
        return Environment(tuple(self[i] for i in domain_ids), self.num_classes, self.feature_dim)

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        X = np.concatenate([dom.X for dom in self.domains])
        y = np.concatenate([dom.y for dom in self.domains])
        return X, y

    def __eq__(self, other) -> bool:
        if not isinstance(other, Environment):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.feature_dim == other.feature_dim
            and self.domains == other.domains
        )


# ---------------------------------------------------------------------------
# synthetic environments


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the Gaussian multi-domain generator.

    Each class has an anchor mean shared by all domains. Every domain adds
    one offset of norm ``covariate_shift_scale`` in a uniformly random
    direction to all of its class means. ``class_sep`` is the expected norm
    of an anchor.
    """

    n_domains: int = 4
    m_per_domain: int = 500
    d: int = 20
    K: int = 2
    covariate_shift_scale: float = 3.0
    label_noise: float = 0.0
    seed: int = 0
    class_sep: float = 3.0
    noise_std: float = 1.0

    def validate(self) -> None:
        if self.n_domains < 1:
            raise DataError("n_domains must be >= 1")
        if self.K < 2:
            raise DataError("K must be >= 2")
        if self.d < 1:
            raise DataError("d must be >= 1")
        if self.m_per_domain < 2 * self.K:
            raise DataError(f"m_per_domain must be >= 2K = {2 * self.K}")
        if not self.covariate_shift_scale >= 0:
            raise DataError("covariate_shift_scale must be >= 0")
        if not 0 <= self.label_noise < 0.5:
            raise DataError("label_noise must lie in [0, 0.5)")
        if not self.class_sep >= 0 or not self.noise_std > 0:
            raise DataError("class_sep must be >= 0 and noise_std > 0")


def _unit_vectors(rng: np.random.Generator, count: int, d: int) -> np.ndarray:
    v = rng.standard_normal((count, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def synth_anchors(spec: SynthSpec) -> np.ndarray:
    """Class anchor means shared by every domain, shape (K, d)."""
    rng = np.random.default_rng([spec.seed, 0])
    return rng.standard_normal((spec.K, spec.d)) * (spec.class_sep / np.sqrt(spec.d))


def synth_offsets(spec: SynthSpec, n_domains: int, rng: np.random.Generator) -> np.ndarray:
    """Per-domain mean offsets of norm ``covariate_shift_scale``, repeated for every class: (n, K, d)."""
    offsets = _unit_vectors(rng, n_domains, spec.d)[:, None, :]
    return np.repeat(offsets, spec.K, axis=1) * spec.covariate_shift_scale


def synth_class_means(spec: SynthSpec) -> np.ndarray:
    """Per-(domain, class) Gaussian means of the source domains, shape (n, K, d)."""
    offsets = synth_offsets(spec, spec.n_domains, np.random.default_rng([spec.seed, 1]))
    return synth_anchors(spec)[None, :, :] + offsets


def synth_domain(spec: SynthSpec, means: np.ndarray, m: int, rng: np.random.Generator,
                 domain_id: str, id_offset: int = 0) -> Domain:
    """Draw ``m`` samples from one domain with class means ``means`` (K x d)."""
    K = spec.K
    y_clean = np.arange(m) % K
    rng.shuffle(y_clean)
    X = means[y_clean] + spec.noise_std * rng.standard_normal((m, spec.d))
    y = y_clean.copy()
    if spec.label_noise > 0:
        flip = rng.random(m) < spec.label_noise
        shift = rng.integers(1, K, size=m)
        y[flip] = (y_clean[flip] + shift[flip]) % K
    return Domain(domain_id, X, y, np.arange(id_offset, id_offset + m))


def synth_environment(spec: SynthSpec) -> Environment:
    spec.validate()
    means = synth_class_means(spec)
    domains = []
    for j in range(spec.n_domains):
        rng = np.random.default_rng([spec.seed, 2, j])
        domains.append(synth_domain(spec, means[j], spec.m_per_domain, rng, f"d{j}", j * spec.m_per_domain))
    return Environment(tuple(domains), spec.K, spec.d)


def sample_fresh_domains(spec: SynthSpec, n_domains: int, m: int, seed: int) -> Environment:
    """Draw unseen domains from the environment that produced ``synth_environment(spec)``.

    Anchors are shared with the source domains; offsets are new draws.
    """
    spec.validate()
    offsets = synth_offsets(spec, n_domains, np.random.default_rng([spec.seed, 3, seed]))
    means = synth_anchors(spec)[None] + offsets
    domains = [
        synth_domain(spec, means[j], m, np.random.default_rng([spec.seed, 4, seed, j]), f"fresh{j}", j * m)
        for j in range(n_domains)
    ]
    return Environment(tuple(domains), spec.K, spec.d)


# ---------------------------------------------------------------------------
# splits


def _class_quotas(sizes: np.ndarray, train_frac: float) -> np.ndarray:
    """Train counts per class summing to round(train_frac * m), by largest remainder.

    Each class keeps at least one sample on both sides.
    """
    exact = train_frac * sizes
    quota = np.clip(np.floor(exact).astype(np.int64), 1, sizes - 1)
    target = int(np.floor(train_frac * sizes.sum() + 0.5))
    target = min(max(target, len(sizes)), int(sizes.sum()) - len(sizes))
    order = np.argsort(-(exact - np.floor(exact)), kind="stable")
    while quota.sum() < target:
        quota[next(c for c in order if quota[c] < sizes[c] - 1)] += 1
    while quota.sum() > target:
        quota[next(c for c in order[::-1] if quota[c] > 1)] -= 1
    return quota


def _stratified_split(dom: Domain, train_frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    classes, sizes = np.unique(dom.y, return_counts=True)
    if sizes.min() < 2:
        c = classes[np.argmin(sizes)]
        raise DataError(f"domain {dom.id!r}: class {c} has fewer than 2 samples, cannot split")
    quota = _class_quotas(sizes, train_frac)
    train, test = [], []
    for c, k in zip(classes, quota):
        idx = rng.permutation(np.flatnonzero(dom.y == c))
        train.append(idx[:k])
        test.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def split_environment(env: Environment, train_frac: float, seed: int) -> tuple[Environment, Environment]:
    """Per-domain, per-class shuffle split into train and test environments.

    Every class present in a domain lands in both halves. Sample order
    inside each half follows the original order.
    """
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must lie in (0, 1)")
    train, test = [], []
    for j, dom in enumerate(env):
        tr, te = _stratified_split(dom, train_frac, np.random.default_rng([seed, j]))
        train.append(dom.take(tr))
        test.append(dom.take(te))
    return (
        Environment(tuple(train), env.num_classes, env.feature_dim),
        Environment(tuple(test), env.num_classes, env.feature_dim),
    )


def equalize_m(env: Environment, seed: int) -> Environment:
    """Subsample every domain, without replacement, to the smallest domain size."""
    m = min(dom.m for dom in env)
    out = []
    for j, dom in enumerate(env):
        if dom.m == m:
            out.append(dom)
            continue
        keep = np.random.default_rng([seed, j]).choice(dom.m, size=m, replace=False)
        out.append(dom.take(np.sort(keep)))
    return Environment(tuple(out), env.num_classes, env.feature_dim)


# ---------------------------------------------------------------------------
# feature CSV


def feature_header(d: int) -> list[str]:
    return ["domain", "label"] + [f"f{i}" for i in range(d)]


def environment_records(env: Environment) -> list[dict]:
    """Rows of the feature CSV, in domain order then sample order."""
    names = feature_header(env.feature_dim)[2:]
    records = []
    for dom in env:
        for x, c in zip(dom.X, dom.y):
            row = {"domain": dom.id, "label": int(c)}
            row.update(zip(names, (float(v) for v in x)))
            records.append(row)
    return records


def load_feature_csv(path) -> Environment:
    """Read ``domain,label,f0..f{d-1}`` rows; one domain per distinct id, file order kept."""
    path = Path(path)
    groups: dict[str, tuple[list, list]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(1, "empty file") from None
        d = len(header) - 2
        if d < 1 or header != feature_header(d):
            raise CsvFormatError(1, "header must be domain,label,f0,...,f{d-1}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != d + 2:
                raise CsvFormatError(line, f"expected {d + 2} fields, got {len(row)}")
            try:
                label = int(row[1])
            except ValueError:
                raise CsvFormatError(line, f"label {row[1]!r} is not an integer") from None
            if label < 0:
                raise CsvFormatError(line, "negative label")
            try:
                feats = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise CsvFormatError(line, f"non-numeric feature ({exc})") from None
            if not all(np.isfinite(feats)):
                raise CsvFormatError(line, "non-finite feature")
            xs, ys = groups.setdefault(row[0], ([], []))
            xs.append(feats)
            ys.append(label)
    if not groups:
        raise CsvFormatError(1, "no data rows")
    domains, offset = [], 0
    for dom_id, (xs, ys) in groups.items():
        domains.append(Domain(dom_id, np.array(xs), np.array(ys), np.arange(offset, offset + len(ys))))
        offset += len(ys)
    return Environment.from_domains(domains)


# ---------------------------------------------------------------------------
# IDX (MNIST) files


def _read_maybe_gzip(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_idx_images(path) -> np.ndarray:
    data = _read_maybe_gzip(path)
    if len(data) < 16:
        raise IdxFormatError(f"{path}: truncated header")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{path}: wrong magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    need = count * rows * cols
    if len(data) - 16 < need:
        raise IdxFormatError(f"{path}: truncated, {len(data) - 16} of {need} pixel bytes")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=16).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    data = _read_maybe_gzip(path)
    if len(data) < 8:
        raise IdxFormatError(f"{path}: truncated header")
    magic, count = struct.unpack(">II", data[:8])
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{path}: wrong magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(data) - 8 < count:
        raise IdxFormatError(f"{path}: truncated, {len(data) - 8} of {count} labels")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=8)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_idx(images_path, labels_path, domain_id: str = "mnist") -> Domain:
    """One sample per image, pixels scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(f"count mismatch: {len(images)} images, {len(labels)} labels")
    X = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Domain(domain_id, X, labels.astype(np.int64))


# ---------------------------------------------------------------------------
# rotation


def rotate_images(images: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate square images (N x s x s) counter-clockwise about the centre.

    Bilinear interpolation by inverse mapping; source positions outside the
    image read as 0.
    """
    images = np.asarray(images, dtype=np.float64)
    _, rows, cols = images.shape
    theta = np.deg2rad(angle_deg)
    cr, cc = (rows - 1) / 2.0, (cols - 1) / 2.0
    r, c = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")
    # rows grow downwards, so a visual CCW turn maps output (r, c) back through
    # the (row, col) rotation by +theta; 90 degrees agrees with np.rot90
    dr, dc = r - cr, c - cc
    cos, sin = np.cos(theta), np.sin(theta)
    src_r = cos * dr + sin * dc + cr
    src_c = -sin * dr + cos * dc + cc
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr, fc = src_r - r0, src_c - c0
    padded = np.zeros((images.shape[0], rows + 2, cols + 2))
    padded[:, 1:-1, 1:-1] = images
    # clip to the zero border; anything further out reads zero as well
    def at(rr, cc_):
        inside = (rr >= -1) & (rr <= rows) & (cc_ >= -1) & (cc_ <= cols)
        vals = padded[:, np.clip(rr, -1, rows) + 1, np.clip(cc_, -1, cols) + 1]
        return vals * inside
    out = (
        at(r0, c0) * ((1 - fr) * (1 - fc))
        + at(r0, c0 + 1) * ((1 - fr) * fc)
        + at(r0 + 1, c0) * (fr * (1 - fc))
        + at(r0 + 1, c0 + 1) * (fr * fc)
    )
    return out


def rotate_domain(domain: Domain, angle_deg: float, domain_id: str | None = None) -> Domain:
    side = int(round(np.sqrt(domain.d)))
    if side * side != domain.d:
        raise DataError(f"cannot reshape {domain.d} features into a square image")
    if angle_deg == 0:
        X = domain.X
    else:
        X = rotate_images(domain.X.reshape(-1, side, side), angle_deg).reshape(domain.m, -1)
    return Domain(domain_id or domain.id, X, domain.y, domain.ids)


def rotated_mnist(base: Domain, angles, per_domain: int | None = None, seed: int = 0) -> Environment:
    """Split ``base`` into disjoint shuffled chunks, one per angle, and rotate each."""
    angles = list(angles)
    perm = np.random.default_rng(seed).permutation(base.m)
    size = base.m // len(angles) if per_domain is None else per_domain
    if size * len(angles) > base.m:
        raise DataError(f"need {size * len(angles)} images, have {base.m}")
    domains = []
    for j, angle in enumerate(angles):
        chunk = base.take(np.sort(perm[j * size:(j + 1) * size]))
        domains.append(rotate_domain(chunk, angle, domain_id=f"{angle:g}"))
    return Environment.from_domains(domains, num_classes=int(base.y.max()) + 1)
