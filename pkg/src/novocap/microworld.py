"""Synthetic benchmark generator: a held-out category world at desk scale.

Category prototypes are seeded random unit vectors drawn inside a shared
low-dimensional latent subspace of the feature space, so that novel
categories are linear combinations of directions the converter saw in
training (visual kinship is the premise that makes estimated embeddings
useful at all; fully orthogonal prototypes would carry no transferable
signal). Instances are prototypes plus isotropic noise in the full feature
space.

Every image shows two distinct categories: a subject and a companion. With
probability ``plural_rate`` the subject appears twice (its tag gets the
plural flag and captions say "two ..."), otherwise both appear once. The
image feature is the mean of the instance features, so subject plurality is
encoded in the mixture weights. Training and validation images use known
categories only (the held-out construction); the test split mixes known-only
and novel-subject images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .errors import DataError
from .features import (
    STATUS_KNOWN,
    STATUS_NOVEL,
    CategoryRecord,
    ImageRecord,
    compute_prototype,
    write_category_file,
    write_dataset_file,
    write_feature_file,
)
from .numerics import SeededRng

DEFAULT_CATEGORIES: Tuple[Tuple[str, str, str], ...] = (
    ("zebra", "zebra", "zebras"),
    ("desk", "desk", "desks"),
    ("chair", "chair", "chairs"),
    ("lamp", "lamp", "lamps"),
    ("coffee mug", "coffee mug", "coffee mugs"),
    ("fern", "fern", "ferns"),
    ("kettle", "kettle", "kettles"),
    ("anvil", "anvil", "anvils"),
    ("antelope", "antelope", "antelopes"),
    ("drone", "drone", "drones"),
    ("hot dog", "hot dog", "hot dogs"),
    ("umbrella", "umbrella", "umbrellas"),
)

PLURAL_TEMPLATES: Tuple[str, ...] = (
    "two {p} and a {s} in the {loc}",
    "there are two {p} beside a {s}",
    "a {s} next to two {p} in the {loc}",
    "two {p} near a {s}",
)

SINGULAR_TEMPLATES: Tuple[str, ...] = (
    "a {first} and a {second} in the {loc}",
    "there is a {first} beside a {second}",
    "a {first} next to a {second} in the {loc}",
    "a {second} near a {first}",
)

# Zipf-ish location tail: the rare words keep the corpus log-prior floor low,
# which is what gives the novel-bias offset its suppression headroom.
LOCATIONS: Tuple[str, ...] = (
    "kitchen", "garden", "office", "corner", "window", "yard",
    "hallway", "meadow", "attic", "courtyard", "balcony", "vestibule",
)

_VOWELS = "aeiou"


def _fix_articles_text(words: List[str]) -> List[str]:
    out = list(words)
    for i in range(len(out) - 1):
        if out[i] == "a" and out[i + 1][:1] in _VOWELS:
            out[i] = "an"
    return out


@dataclass
class WorldConfig:
    d_v: int = 32
    latent_dim: int = 5
    num_categories: int = 12
    num_known: int = 8
    noise: float = 0.1
    train_images: int = 2000
    val_images: int = 200
    test_images: int = 400
    refs_per_image: int = 2
    plural_rate: float = 0.5
    known_samples: int = 100
    novel_pool: int = 200
    k_sweep: Tuple[int, ...] = (1, 5, 10, 50)
    seed: int = 0
    categories: Tuple[Tuple[str, str, str], ...] = DEFAULT_CATEGORIES
    plural_templates: Tuple[str, ...] = PLURAL_TEMPLATES
    singular_templates: Tuple[str, ...] = SINGULAR_TEMPLATES
    locations: Tuple[str, ...] = LOCATIONS

    def validate(self) -> None:
        if not (0 < self.num_known < self.num_categories):
            raise DataError("need 0 < num_known < num_categories")
        if self.num_categories > len(self.categories):
            raise DataError(
                f"only {len(self.categories)} category names available"
            )
        if self.noise < 0:
            raise DataError("noise must be >= 0")
        if self.latent_dim < 1 or self.latent_dim > self.d_v:
            raise DataError("need 1 <= latent_dim <= d_v")
        if max(self.k_sweep, default=1) > self.novel_pool:
            raise DataError("k_sweep exceeds the novel sample pool")
        if self.refs_per_image < 1:
            raise DataError("refs_per_image must be >= 1")
        for template in self.plural_templates:
            try:
                template.format(p="x", s="y", loc="z")
            except (KeyError, IndexError) as exc:
                raise DataError(f"template {template!r} references missing slot: {exc}")
        for template in self.singular_templates:
            try:
                template.format(first="x", second="y", loc="z")
            except (KeyError, IndexError) as exc:
                raise DataError(f"template {template!r} references missing slot: {exc}")


@dataclass
class GeneratedWorld:
    config: WorldConfig
    categories: List[CategoryRecord]  # ground-truth prototypes
    train: List[ImageRecord]
    val: List[ImageRecord]
    test: List[ImageRecord]
    known_samples: Dict[str, np.ndarray]
    novel_pools: Dict[str, np.ndarray]

    @property
    def known(self) -> List[CategoryRecord]:
        return [c for c in self.categories if c.status == STATUS_KNOWN]

    @property
    def novel(self) -> List[CategoryRecord]:
        return [c for c in self.categories if c.status == STATUS_NOVEL]


def _caption_for(
    template: str,
    subject: CategoryRecord,
    companion: CategoryRecord,
    plural: bool,
    loc: str,
) -> str:
    if plural:
        text = template.format(p=subject.plural, s=companion.singular, loc=loc)
    else:
        text = template.format(first=subject.singular, second=companion.singular, loc=loc)
    return " ".join(_fix_articles_text(text.split()))


def _zipf_pick(rng: SeededRng, n: int) -> int:
    weights = np.array([1.0 / (i + 1) ** 2 for i in range(n)])
    cdf = np.cumsum(weights / weights.sum())
    return int(np.searchsorted(cdf, rng.random()))


def _make_image(
    cfg: WorldConfig,
    rng: SeededRng,
    image_id: str,
    subject: CategoryRecord,
    companion: CategoryRecord,
) -> ImageRecord:
    """Every scene pairs a subject with a companion; plural scenes show the
    subject twice. Features are means of the instance features, so subject
    plurality reads as the subject prototype's mixture weight (2/3 vs 1/2)."""
    plural = rng.random() < cfg.plural_rate
    n_subject = 2 if plural else 1
    instances = [subject.prototype + cfg.noise * rng.normal(cfg.d_v) for _ in range(n_subject)]
    instances.append(companion.prototype + cfg.noise * rng.normal(cfg.d_v))
    feature = np.mean(np.stack(instances), axis=0)
    tags = ((subject.name, plural), (companion.name, False))

    templates = cfg.plural_templates if plural else cfg.singular_templates
    loc = cfg.locations[_zipf_pick(rng, len(cfg.locations))]
    n_refs = min(cfg.refs_per_image, len(templates))
    picks = rng.choice(len(templates), size=n_refs, replace=False)
    captions = tuple(
        _caption_for(templates[int(t)], subject, companion, plural, loc)
        for t in sorted(int(t) for t in picks)
    )
    return ImageRecord(image_id=image_id, feature=feature, tags=tags, captions=captions)


def generate(cfg: WorldConfig) -> GeneratedWorld:
    """Build categories, splits, and feature-sample pools, all from the seed."""
    cfg.validate()
    rng = SeededRng(cfg.seed)

    proto_rng = rng.child(1)
    basis, _ = np.linalg.qr(proto_rng.normal((cfg.d_v, cfg.latent_dim)))
    categories: List[CategoryRecord] = []
    for i in range(cfg.num_categories):
        name, singular, plural = cfg.categories[i]
        raw = basis @ proto_rng.normal(cfg.latent_dim)
        proto = raw / float(np.linalg.norm(raw))
        categories.append(
            CategoryRecord(
                name=name,
                singular=singular,
                plural=plural,
                prototype=proto,
                sample_count=1,
                status=STATUS_KNOWN if i < cfg.num_known else STATUS_NOVEL,
            )
        )
    known = [c for c in categories if c.status == STATUS_KNOWN]
    novel = [c for c in categories if c.status == STATUS_NOVEL]

    def split(name: str, key: int, count: int, novel_subjects: int) -> List[ImageRecord]:
        split_rng = rng.child(10 + key)
        images = []
        for i in range(count):
            if i < novel_subjects:
                subject = novel[int(split_rng.integers(0, len(novel)))]
                others = [c for c in categories if c.name != subject.name]
                companion = others[int(split_rng.integers(0, len(others)))]
            else:
                a, b = split_rng.choice(len(known), size=2, replace=False)
                subject, companion = known[int(a)], known[int(b)]
            images.append(
                _make_image(cfg, split_rng, f"{name}-{i:05d}", subject, companion)
            )
        return images

    train = split("train", 0, cfg.train_images, 0)
    val = split("val", 1, cfg.val_images, 0)
    test = split("test", 2, cfg.test_images, cfg.test_images // 2)

    sample_rng = rng.child(2)
    known_samples = {
        c.name: c.prototype + cfg.noise * sample_rng.normal((cfg.known_samples, cfg.d_v))
        for c in known
    }
    pool_rng = rng.child(3)
    novel_pools = {
        c.name: c.prototype + cfg.noise * pool_rng.normal((cfg.novel_pool, cfg.d_v))
        for c in novel
    }
    return GeneratedWorld(
        config=cfg,
        categories=categories,
        train=train,
        val=val,
        test=test,
        known_samples=known_samples,
        novel_pools=novel_pools,
    )


def draw_novel_samples(world: GeneratedWorld, k: int, pattern: int = 0) -> Dict[str, np.ndarray]:
    """k feature samples per novel category, drawn without replacement from
    the held-back pool; ``pattern`` selects one of the resample draws."""
    if k < 1:
        raise DataError("k must be >= 1")
    out = {}
    for idx, cat in enumerate(world.novel):
        pool = world.novel_pools[cat.name]
        if k > pool.shape[0]:
            raise DataError(
                f"k={k} exceeds the {pool.shape[0]} held-back samples for {cat.name!r}"
            )
        rng = SeededRng(world.config.seed).child(4, pattern, idx)
        picks = np.sort(rng.choice(pool.shape[0], size=k, replace=False))
        out[cat.name] = pool[picks]
    return out


def sample_novel_records(world: GeneratedWorld, k: int, pattern: int = 0) -> List[CategoryRecord]:
    """Novel CategoryRecords with prototypes estimated from k drawn samples."""
    samples = draw_novel_samples(world, k, pattern)
    return [
        replace(
            cat,
            prototype=compute_prototype(list(samples[cat.name])),
            sample_count=k,
            status=STATUS_NOVEL,
        )
        for cat in world.novel
    ]


def full_pool_records(world: GeneratedWorld) -> List[CategoryRecord]:
    """Novel records whose prototypes use every held-back sample."""
    return [
        replace(
            cat,
            prototype=compute_prototype(list(world.novel_pools[cat.name])),
            sample_count=world.novel_pools[cat.name].shape[0],
            status=STATUS_NOVEL,
        )
        for cat in world.novel
    ]


def emit_sample_files(world: GeneratedWorld, k: int, path, pattern: int = 0) -> None:
    """Write a novel-category feature file with k samples per category."""
    samples = draw_novel_samples(world, k, pattern)
    write_feature_file(path, world.novel, samples)


def write_world(world: GeneratedWorld, outdir) -> None:
    """Emit every artifact of the world in the shared file formats."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_dataset_file(outdir / "train.jsonl", world.train)
    write_dataset_file(outdir / "val.jsonl", world.val)
    write_dataset_file(outdir / "test.jsonl", world.test)
    write_feature_file(
        outdir / "known_features.jsonl",
        world.known,
        {name: list(samples) for name, samples in world.known_samples.items()},
    )
    for k in world.config.k_sweep:
        emit_sample_files(world, k, outdir / f"novel_features_k{k}.jsonl", pattern=0)
    write_feature_file(
        outdir / "novel_features_all.jsonl",
        world.novel,
        {name: list(pool) for name, pool in world.novel_pools.items()},
    )
    write_category_file(outdir / "categories.jsonl", world.categories)
    meta = {
        "seed": world.config.seed,
        "d_v": world.config.d_v,
        "latent_dim": world.config.latent_dim,
        "noise": world.config.noise,
        "known": [c.name for c in world.known],
        "novel": [c.name for c in world.novel],
        "splits": {
            "train": len(world.train),
            "val": len(world.val),
            "test": len(world.test),
        },
    }
    with open(outdir / "world.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
