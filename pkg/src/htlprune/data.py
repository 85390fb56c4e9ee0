"""Synthetic lesion corpora with planted subgroups, plus PNM-based corpus I/O.

A lesion is a star-convex blob: the pixels with the smallest normalized
radius rho / r(theta), where r(theta) is a seeded low-order Fourier
perturbation of the unit circle. Taking exactly round(size_fraction * H * W)
such pixels fixes the lesion area, and irregularity scales the perturbation.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

AGE_GROUPS = ("<=30", "30-40", "40-60", ">60")


class GenerationError(ValueError):
    pass


class ParseError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray  # C,H,W float64 in [0, 1]
    mask: np.ndarray | None = None  # H,W uint8 in {0, 1}
    class_label: int | None = None
    sex: str = "unknown"
    age_group: str = "unknown"
    subgroup: str | None = None
    difficulty: dict = field(default_factory=dict)  # contrast, size_fraction, irregularity

    def metadata(self) -> dict:
        rec = {"id": self.id}
        if self.class_label is not None:
            rec["class_label"] = int(self.class_label)
        rec["sex"] = self.sex
        rec["age_group"] = self.age_group
        if self.subgroup is not None:
            rec["subgroup"] = self.subgroup
        if self.difficulty:
            rec["difficulty_factors"] = {k: float(v) for k, v in self.difficulty.items()}
        return rec


@dataclass
class SubgroupSpec:
    name: str
    share: float
    contrast_range: tuple[float, float] = (0.4, 0.8)
    size_range: tuple[float, float] = (0.05, 0.15)
    irregularity_range: tuple[float, float] = (0.0, 0.3)
    sex_distribution: dict = field(default_factory=lambda: {"male": 0.5, "female": 0.5})
    age_distribution: dict = field(default_factory=lambda: {g: 0.25 for g in AGE_GROUPS})
    class_label: int | None = None
    polarity: int = 1  # +1 lesion brighter than background, -1 darker


@dataclass
class GenSpec:
    n_samples: int
    image_size: int = 32
    subgroups: list[SubgroupSpec] = field(default_factory=list)
    seed: int = 0
    channels: int = 1
    background: float = 0.3
    noise_std: float = 0.1
    # "subgroup": class label from the subgroup spec; "size": 1 if size_fraction >= size_split
    class_rule: str = "subgroup"
    size_split: float = 0.1

    def validate(self) -> list[str]:
        errors = []
        if self.n_samples < 0:
            errors.append("dataset.n_samples must be >= 0")
        if self.image_size < 4:
            errors.append("dataset.image_size must be >= 4")
        if not self.subgroups:
            errors.append("dataset.subgroups must not be empty")
        total = sum(g.share for g in self.subgroups)
        if self.subgroups and abs(total - 1.0) > 1e-9:
            errors.append(f"subgroup shares sum to {total}, expected 1.0")
        for g in self.subgroups:
            lo, hi = g.contrast_range
            if not (0 < lo <= hi <= 1):
                errors.append(f"subgroup {g.name}: contrast_range must lie in (0, 1]")
            lo, hi = g.size_range
            if not (0 < lo <= hi <= 0.5):
                errors.append(f"subgroup {g.name}: size_range must lie in (0, 0.5]")
            lo, hi = g.irregularity_range
            if not (0 <= lo <= hi < 1):
                errors.append(f"subgroup {g.name}: irregularity_range must lie in [0, 1)")
            if g.polarity not in (1, -1):
                errors.append(f"subgroup {g.name}: polarity must be 1 or -1")
            for label, dist in (("sex", g.sex_distribution), ("age", g.age_distribution)):
                if abs(sum(dist.values()) - 1.0) > 1e-9:
                    errors.append(f"subgroup {g.name}: {label} distribution must sum to 1")
        if self.class_rule not in ("subgroup", "size"):
            errors.append("dataset.class_rule must be 'subgroup' or 'size'")
        return errors


def desk_spec(n_samples: int = 400, seed: int = 0, subtle_share: float = 0.2) -> GenSpec:
    """Default benchmark: a typical majority and a planted low-contrast minority.

    The minority skews young and female so a demographic audit has a
    recoverable signal.
    """
    typical = SubgroupSpec(
        "typical", 1.0 - subtle_share,
        contrast_range=(0.45, 0.8), size_range=(0.06, 0.15), irregularity_range=(0.0, 0.3),
        sex_distribution={"male": 0.55, "female": 0.45},
        age_distribution={"<=30": 0.15, "30-40": 0.3, "40-60": 0.3, ">60": 0.25},
        class_label=0)
    subtle = SubgroupSpec(
        "subtle", subtle_share,
        contrast_range=(0.1, 0.2), size_range=(0.03, 0.08), irregularity_range=(0.2, 0.5),
        sex_distribution={"male": 0.3, "female": 0.7},
        age_distribution={"<=30": 0.7, "30-40": 0.1, "40-60": 0.1, ">60": 0.1},
        class_label=1)
    return GenSpec(n_samples=n_samples, subgroups=[typical, subtle], seed=seed)


def _allocate(n: int, shares: list[float]) -> list[int]:
    """Largest-remainder apportionment of n items by share."""
    raw = np.asarray(shares) * n
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts.tolist()


def _choice(rng: np.random.Generator, dist: dict) -> str:
    keys = list(dist)
    return keys[int(rng.choice(len(keys), p=np.asarray([dist[k] for k in keys], dtype=float)))]


def star_blob(size: int, area: int, center: tuple[float, float], irregularity: float,
              rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    dy, dx = yy - center[0], xx - center[1]
    rho = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    r = np.ones_like(theta)
    if irregularity > 0:
        amps = rng.uniform(0.3, 1.0, size=3) / np.arange(2, 5)
        amps *= irregularity / amps.sum()
        phases = rng.uniform(0, 2 * np.pi, size=3)
        for k, a, ph in zip(range(2, 5), amps, phases):
            r = r + a * np.cos(k * theta + ph)
    key = (rho / r).reshape(-1)
    order = np.argsort(key, kind="stable")
    mask = np.zeros(size * size, dtype=np.uint8)
    mask[order[:area]] = 1
    return mask.reshape(size, size)


def generate(spec: GenSpec) -> list[Sample]:
    errors = spec.validate()
    if errors:
        raise GenerationError("; ".join(errors))
    if spec.n_samples == 0:
        return []
    rng = np.random.Generator(np.random.Philox(spec.seed))
    size = spec.image_size
    counts = _allocate(spec.n_samples, [g.share for g in spec.subgroups])
    assignment = np.concatenate([np.full(c, i) for i, c in enumerate(counts)])
    assignment = assignment[rng.permutation(spec.n_samples)]

    samples = []
    for idx, gi in enumerate(assignment):
        g = spec.subgroups[int(gi)]
        contrast = rng.uniform(*g.contrast_range)
        size_fraction = rng.uniform(*g.size_range)
        irregularity = rng.uniform(*g.irregularity_range)
        area = max(1, int(round(size_fraction * size * size)))
        radius = np.sqrt(area / np.pi) * (1 + irregularity)
        margin = radius + 1
        if 2 * margin > size:
            raise GenerationError(f"lesion of size_fraction {size_fraction:.3f} does not fit a {size}px image")
        center = (rng.uniform(margin - 0.5, size - margin - 0.5), rng.uniform(margin - 0.5, size - margin - 0.5))
        mask = star_blob(size, area, center, irregularity, rng)
        noise = rng.normal(0.0, spec.noise_std, size=(spec.channels, size, size))
        image = np.clip(spec.background + g.polarity * contrast * mask[None] + noise, 0.0, 1.0)
        image = np.round(image * 65535) / 65535  # exact under 16-bit round trip
        if spec.class_rule == "size":
            label = int(size_fraction >= spec.size_split)
        else:
            label = g.class_label
        samples.append(Sample(
            id=f"s{idx:05d}", image=image, mask=mask, class_label=label,
            sex=_choice(rng, g.sex_distribution), age_group=_choice(rng, g.age_distribution),
            subgroup=g.name,
            difficulty={"contrast": float(contrast), "size_fraction": float(mask.mean()),
                        "irregularity": float(irregularity)}))
    return samples


def split(samples: list[Sample], fractions=(0.7, 0.1, 0.2), seed: int = 0):
    """Seeded (train, val, test) partition, stratified by subgroup.

    Each stratum is shuffled and cut at rounded cumulative fractions; whatever
    the fractions leave over is dropped.
    """
    fractions = tuple(fractions)
    if len(fractions) != 3 or min(fractions) < 0 or sum(fractions) > 1 + 1e-9:
        raise ValueError("fractions must be three nonnegative numbers summing to <= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    strata: dict = {}
    for i, s in enumerate(samples):
        strata.setdefault(s.subgroup, []).append(i)
    parts: list[list[int]] = [[], [], []]
    for key in sorted(strata, key=lambda k: (k is None, str(k))):
        idx = np.asarray(strata[key])[rng.permutation(len(strata[key]))]
        cuts = np.round(np.cumsum(fractions) * len(idx)).astype(int)
        lo = 0
        for p, hi in enumerate(cuts):
            parts[p].extend(idx[lo:hi].tolist())
            lo = hi
    return tuple([samples[i] for i in sorted(part)] for part in parts)


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray | None]:
    images = np.stack([s.image for s in samples])
    masks = None if any(s.mask is None for s in samples) else np.stack([s.mask for s in samples])
    return images, masks


# ------------------------------------------------------------------ PNM I/O


def write_pnm(path, array: np.ndarray, maxval: int) -> None:
    """Binary PGM (H,W) or PPM (H,W,3); maxval > 255 writes big-endian 16-bit."""
    arr = np.asarray(array)
    magic = b"P5" if arr.ndim == 2 else b"P6"
    if arr.ndim == 3 and arr.shape[2] != 3:
        raise ValueError("PPM needs exactly 3 channels")
    h, w = arr.shape[:2]
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(b"%s\n%d %d\n%d\n" % (magic, w, h, maxval))
        fh.write(arr.astype(dtype).tobytes())


def read_pnm(path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"{path}: unsupported PNM type {magic!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    chans = 1 if magic == b"P5" else 3
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(data, dtype=dtype, count=w * h * chans, offset=pos)
    return (arr.reshape(h, w) if chans == 1 else arr.reshape(h, w, 3)), maxval


def save_directory(samples: list[Sample], path) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    with open(root / "metadata.jsonl", "w") as meta:
        for s in samples:
            q = np.round(np.clip(s.image, 0, 1) * 65535).astype(np.uint16)
            if q.shape[0] == 1:
                write_pnm(root / "images" / f"{s.id}.pgm", q[0], 65535)
            elif q.shape[0] == 3:
                write_pnm(root / "images" / f"{s.id}.ppm", q.transpose(1, 2, 0), 65535)
            else:
                raise ValueError("only 1- or 3-channel images can be saved")
            if s.mask is not None:
                write_pnm(root / "masks" / f"{s.id}.pgm", s.mask.astype(np.uint8) * 255, 255)
            meta.write(json.dumps(s.metadata(), sort_keys=True) + "\n")


def load_directory(path) -> list[Sample]:
    root = Path(path)
    meta_path = root / "metadata.jsonl"
    records = {}
    if meta_path.exists():
        for lineno, line in enumerate(meta_path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                records[str(rec["id"])] = rec
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"{meta_path}:{lineno}: malformed metadata record ({exc})") from None
    image_dir = root / "images"
    files = sorted(image_dir.iterdir()) if image_dir.is_dir() else []
    samples = []
    for f in files:
        if f.suffix not in (".pgm", ".ppm"):
            continue
        arr, maxval = read_pnm(f)
        image = arr.astype(np.float64) / maxval
        image = image[None] if image.ndim == 2 else image.transpose(2, 0, 1)
        mask = None
        mask_path = root / "masks" / f"{f.stem}.pgm"
        if mask_path.exists():
            m, _ = read_pnm(mask_path)
            if m.shape != image.shape[1:]:
                raise ParseError(f"{mask_path}: mask size {m.shape} does not match image {image.shape[1:]}")
            mask = (m > 0).astype(np.uint8)
        rec = records.get(f.stem, {})
        samples.append(Sample(
            id=f.stem, image=image, mask=mask, class_label=rec.get("class_label"),
            sex=rec.get("sex", "unknown"), age_group=rec.get("age_group", "unknown"),
            subgroup=rec.get("subgroup"), difficulty=rec.get("difficulty_factors", {}) or {}))
    return samples


def spec_to_dict(spec: GenSpec) -> dict:
    return asdict(spec)


def spec_from_dict(d: dict) -> GenSpec:
    d = dict(d)
    groups = []
    for g in d.pop("subgroups", []):
        g = dict(g)
        for key in ("contrast_range", "size_range", "irregularity_range"):
            if key in g:
                g[key] = tuple(g[key])
        groups.append(SubgroupSpec(**g))
    return GenSpec(subgroups=groups, **d)

