"""Procedural cross-domain attribute dataset.

A latent "garment" is a tuple of attribute values. The source domain renders
it as a clean centered patch on a plain background; the target domain renders
the same latent with clutter, jitter, brightness changes, noise and partial
occlusion. Paired samples share a pair id across domains. All randomness
derives from named seed substreams, so regeneration is exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .losses import LabelBatch
from .model import AttributeSchema

IMG_HW = 32

DEFAULT_SCHEMA = AttributeSchema((
    ("color", 4),
    ("pattern", 3),
    ("shape", 3),
    ("collar", 2),
))

_COLOR_PALETTE = np.array([
    [0.85, 0.15, 0.15],   # red
    [0.15, 0.80, 0.20],   # green
    [0.15, 0.25, 0.85],   # blue
    [0.85, 0.80, 0.10],   # yellow
])

# aspect ratios: (height, width) of the garment patch per shape value
_SHAPE_BOXES = [(22, 12), (16, 16), (12, 22)]


@dataclass(frozen=True)
class NoiseProfile:
    """Target-domain corruption levels plus label sparsity."""

    clutter_count: int = 14
    clutter_max: int = 10
    jitter: int = 4
    brightness_lo: float = 0.5
    brightness_hi: float = 1.15
    noise_sigma: float = 0.10
    occlusion_prob: float = 0.6
    occlusion_frac: float = 0.45
    background_tint: float = 0.35
    label_mask_frac: float = 0.10


@dataclass(frozen=True)
class LatentGarment:
    values: tuple[int, ...]
    pair_id: int


@dataclass
class Sample:
    sample_id: int
    domain: str  # "SOURCE" | "TARGET"
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    values: tuple[int, ...]  # full latent attribute values
    labels: np.ndarray  # values with -1 where masked as missing
    mask: np.ndarray  # bool, True iff annotated
    pair_id: int | None  # present iff cross-domain paired


class Dataset:
    def __init__(self, schema: AttributeSchema, samples: list[Sample],
                 seed: int, noise: NoiseProfile):
        self.schema = schema
        self.samples = samples
        self.seed = seed
        self.noise = noise
        self.access_counts = {"SOURCE": 0, "TARGET": 0}

    def by_domain(self, domain: str) -> list[Sample]:
        return [s for s in self.samples if s.domain == domain]

    def pairs(self) -> list[tuple[Sample, Sample]]:
        """(target, source) couples sharing a pair id."""
        src = {s.pair_id: s for s in self.samples
               if s.domain == "SOURCE" and s.pair_id is not None}
        return [(t, src[t.pair_id]) for t in self.samples
                if t.domain == "TARGET" and t.pair_id in src]

    def batch(self, samples: list[Sample]) -> tuple[np.ndarray, LabelBatch]:
        """Stack images/labels of the given samples, counting domain accesses."""
        for s in samples:
            self.access_counts[s.domain] += 1
        images = np.stack([s.image for s in samples])
        labels = np.stack([s.labels for s in samples])
        mask = np.stack([s.mask for s in samples])
        return images, LabelBatch(labels, mask)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def garment_box(schema: AttributeSchema, values: tuple[int, ...],
                offset: tuple[int, int] = (0, 0)) -> tuple[int, int, int, int]:
    """(top, left, height, width) of the garment patch on the canvas."""
    shape_idx = schema.names.index("shape") if "shape" in schema.names else 1
    bh, bw = _SHAPE_BOXES[values[shape_idx] % len(_SHAPE_BOXES)]
    top = (IMG_HW - bh) // 2 + offset[0]
    left = (IMG_HW - bw) // 2 + offset[1]
    top = min(max(top, 0), IMG_HW - bh)
    left = min(max(left, 0), IMG_HW - bw)
    return top, left, bh, bw


def _paint_garment(img: np.ndarray, schema: AttributeSchema, values: tuple[int, ...],
                   offset: tuple[int, int]) -> None:
    names = schema.names
    color = values[names.index("color")] if "color" in names else values[0]
    pattern = values[names.index("pattern")] if "pattern" in names else 0
    collar = values[names.index("collar")] if "collar" in names else 0
    top, left, bh, bw = garment_box(schema, values, offset)

    patch = np.tile(_COLOR_PALETTE[color % len(_COLOR_PALETTE)][:, None, None], (1, bh, bw))
    yy, xx = np.mgrid[0:bh, 0:bw]
    if pattern % 3 == 1:    # horizontal stripes
        patch *= np.where((yy // 2) % 2 == 0, 1.0, 0.45)
    elif pattern % 3 == 2:  # checks
        patch *= np.where(((yy // 3) + (xx // 3)) % 2 == 0, 1.0, 0.45)
    if collar % 2 == 1:     # dark marker in the top region of the patch
        ch, cw = 3, max(bw // 3, 2)
        c0 = (bw - cw) // 2
        patch[:, 0:ch, c0:c0 + cw] = 0.05
    img[:, top:top + bh, left:left + bw] = patch


def render_sample(schema: AttributeSchema, latent: LatentGarment, domain: str,
                  rng: np.random.Generator, noise: NoiseProfile = NoiseProfile()) -> np.ndarray:
    """Render one latent garment as a (3, 32, 32) image in [0, 1]."""
    img = np.full((3, IMG_HW, IMG_HW), 0.92)
    if domain == "SOURCE":
        _paint_garment(img, schema, latent.values, (0, 0))
        return img
    if domain != "TARGET":
        raise ContractError(f"unknown domain '{domain}'")

    img[:] = noise.background_tint + rng.uniform(0.0, 0.5)
    for _ in range(noise.clutter_count):
        ch = rng.integers(2, noise.clutter_max + 1)
        cw = rng.integers(2, noise.clutter_max + 1)
        top = rng.integers(0, IMG_HW - ch + 1)
        left = rng.integers(0, IMG_HW - cw + 1)
        img[:, top:top + ch, left:left + cw] = rng.uniform(0.0, 1.0, size=(3, 1, 1))

    offset = (int(rng.integers(-noise.jitter, noise.jitter + 1)),
              int(rng.integers(-noise.jitter, noise.jitter + 1)))
    _paint_garment(img, schema, latent.values, offset)

    if rng.uniform() < noise.occlusion_prob:
        top, left, bh, bw = garment_box(schema, latent.values, offset)
        oh = max(int(bh * noise.occlusion_frac * rng.uniform(0.5, 1.0)), 1)
        ow = max(int(bw * noise.occlusion_frac * rng.uniform(0.5, 1.0)), 1)
        ot = top + rng.integers(0, bh - oh + 1)
        ol = left + rng.integers(0, bw - ow + 1)
        img[:, ot:ot + oh, ol:ol + ow] = rng.uniform(0.0, 1.0, size=(3, 1, 1))

    img *= rng.uniform(noise.brightness_lo, noise.brightness_hi)
    img += rng.normal(0.0, noise.noise_sigma, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    return img


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def _make_labels(values: tuple[int, ...], rng: np.random.Generator,
                 mask_frac: float) -> tuple[np.ndarray, np.ndarray]:
    n = len(values)
    mask = rng.uniform(size=n) >= mask_frac
    if not mask.any():
        mask[int(rng.integers(0, n))] = True  # every image keeps >= 1 label
    labels = np.where(mask, values, -1).astype(np.int64)
    return labels, mask


def generate_dataset(schema: AttributeSchema, n_source: int, n_target: int,
                     n_pairs: int, noise: NoiseProfile = NoiseProfile(),
                     seed: int = 0) -> Dataset:
    """Exactly n_source clean and n_target cluttered samples, n_pairs paired."""
    if n_pairs > min(n_source, n_target):
        raise ContractError(
            f"n_pairs={n_pairs} exceeds min(n_source={n_source}, n_target={n_target})")
    latent_rng = np.random.default_rng((seed, 0))
    cards = schema.cardinalities

    def draw_latent(pair_id):
        return LatentGarment(tuple(int(latent_rng.integers(0, c)) for c in cards), pair_id)

    n_garments = n_source + n_target - n_pairs
    garments = [draw_latent(g) for g in range(n_garments)]
    # garments [0, n_pairs) appear in both domains; then source-only, then target-only
    plan: list[tuple[str, LatentGarment, int | None]] = []
    for g in range(n_pairs):
        plan.append(("SOURCE", garments[g], g))
    for g in range(n_pairs, n_source):
        plan.append(("SOURCE", garments[g], None))
    for g in range(n_pairs):
        plan.append(("TARGET", garments[g], g))
    for g in range(n_source, n_garments):
        plan.append(("TARGET", garments[g], None))

    samples = []
    for sid, (domain, latent, pair_id) in enumerate(plan):
        img = render_sample(schema, latent, domain,
                            np.random.default_rng((seed, 1, sid)), noise)
        labels, mask = _make_labels(latent.values, np.random.default_rng((seed, 2, sid)),
                                    noise.label_mask_frac)
        samples.append(Sample(sid, domain, img, latent.values, labels, mask, pair_id))
    return Dataset(schema, samples, seed, noise)


# ---------------------------------------------------------------------------
# triplet sampling
# ---------------------------------------------------------------------------

@dataclass
class TripletBatch:
    """Aligned (target, positive source, negative source) arrays."""

    t_images: np.ndarray
    ps_images: np.ndarray
    ns_images: np.ndarray
    t_labels: LabelBatch
    t_ids: list[int] = field(default_factory=list)
    ps_ids: list[int] = field(default_factory=list)
    ns_ids: list[int] = field(default_factory=list)


def sample_triplets(dataset: Dataset, batch_size: int, rng: np.random.Generator,
                    hard_negatives: bool = False
                    ) -> tuple[TripletBatch, tuple[np.ndarray, LabelBatch]]:
    """Draw triplets with replacement plus an equal-size non-paired source batch.

    Negatives are uniform over source samples whose latent differs from the
    target's in at least one attribute; ``hard_negatives`` restricts to
    sources differing in exactly one attribute when any exist.
    """
    pairs = dataset.pairs()
    if not pairs:
        raise ContractError("dataset has no cross-domain pairs")
    source = dataset.by_domain("SOURCE")
    if len({s.values for s in source} | {t.values for t, _ in pairs}) < 2:
        raise ContractError("all latents identical: no valid negative exists")

    t_s, ps_s, ns_s = [], [], []
    for _ in range(batch_size):
        t, ps = pairs[int(rng.integers(0, len(pairs)))]
        eligible = [s for s in source if s.values != t.values]
        if not eligible:
            raise ContractError("no eligible negative for a sampled target")
        if hard_negatives:
            close = [s for s in eligible
                     if sum(a != b for a, b in zip(s.values, t.values)) == 1]
            if close:
                eligible = close
        ns = eligible[int(rng.integers(0, len(eligible)))]
        t_s.append(t), ps_s.append(ps), ns_s.append(ns)

    t_images, t_labels = dataset.batch(t_s)
    ps_images, _ = dataset.batch(ps_s)
    ns_images, _ = dataset.batch(ns_s)
    triplets = TripletBatch(t_images, ps_images, ns_images, t_labels,
                            [s.sample_id for s in t_s], [s.sample_id for s in ps_s],
                            [s.sample_id for s in ns_s])

    nonpaired = [s for s in source if s.pair_id is None] or source
    picks = [nonpaired[int(rng.integers(0, len(nonpaired)))] for _ in range(batch_size)]
    src_images, src_labels = dataset.batch(picks)
    return triplets, (src_images, src_labels)


# ---------------------------------------------------------------------------
# serialization: plain-text index + raw little-endian float64 image blob
# ---------------------------------------------------------------------------

INDEX_FILE = "index.txt"
BLOB_FILE = "images.f64"


def save_dataset(dataset: Dataset, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    lines = ["# id domain pair_id labels values",
             "# schema " + ",".join(f"{n}:{c}" for n, c in dataset.schema.attributes),
             f"# seed {dataset.seed}"]
    for s in dataset.samples:
        pid = -1 if s.pair_id is None else s.pair_id
        lines.append(f"{s.sample_id} {s.domain} {pid} "
                     f"{','.join(map(str, s.labels))} {','.join(map(str, s.values))}")
    with open(os.path.join(out_dir, INDEX_FILE), "w") as f:
        f.write("\n".join(lines) + "\n")
    blob = np.stack([s.image for s in dataset.samples]).astype("<f8")
    with open(os.path.join(out_dir, BLOB_FILE), "wb") as f:
        f.write(blob.tobytes())


def load_dataset(in_dir: str) -> Dataset:
    path = os.path.join(in_dir, INDEX_FILE)
    with open(path) as f:
        lines = f.read().splitlines()
    schema_line = next(l for l in lines if l.startswith("# schema "))
    attrs = tuple((kv.split(":")[0], int(kv.split(":")[1]))
                  for kv in schema_line[len("# schema "):].split(","))
    schema = AttributeSchema(attrs)
    seed = int(next(l for l in lines if l.startswith("# seed ")).split()[-1])
    rows = [l.split() for l in lines if l and not l.startswith("#")]
    blob = np.fromfile(os.path.join(in_dir, BLOB_FILE), dtype="<f8")
    images = blob.reshape(len(rows), 3, IMG_HW, IMG_HW)
    samples = []
    for row, img in zip(rows, images):
        sid, domain, pid = int(row[0]), row[1], int(row[2])
        labels = np.array([int(v) for v in row[3].split(",")], dtype=np.int64)
        values = tuple(int(v) for v in row[4].split(","))
        samples.append(Sample(sid, domain, img.astype(np.float64), values,
                              labels, labels >= 0, None if pid < 0 else pid))
    return Dataset(schema, samples, seed, NoiseProfile())
