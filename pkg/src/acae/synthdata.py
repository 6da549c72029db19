"""Synthetic co-traveler scenarios.

Stands in for backbone-extracted appearance features: identities are unit
vectors, some arranged in "confusable" pairs separated by a small exact
angle, and identities are partitioned into co-traveler groups that tend to
appear together in images. Observations are unit-normalised noisy copies of
the identity vector; background (unlabeled) persons are one-off random
directions.

Image composition places one group after another: each placement flips a
coin with the co-travel probability and inserts either the whole group or a
single member. An image keeps placing groups until it reaches its target
labeled count, so a full group is never truncated; this requires
``persons_max >= persons_min + group_max - 1`` and makes the fraction of
full-group appearances converge to the configured probability. Members of a
confusable pair are always assigned to different groups, so context is the
signal that can tell them apart.

Datasets serialise to line-delimited JSON (one record per line: a header,
one record per identity, one per image) and round-trip losslessly.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .head import UNLABELED, FeatureSet

FILE_VERSION = 1


class ScenarioError(ValueError):
    """The scenario configuration is infeasible."""


class DatasetFormatError(ValueError):
    """A dataset file failed to parse; the message carries the line number."""


@dataclass(frozen=True)
class ScenarioConfig:
    n_identities: int = 40
    dim: int = 64
    n_images: int = 400
    persons_min: int = 3
    persons_max: int = 6
    group_min: int = 2
    group_max: int = 3
    co_travel_prob: float = 0.8
    noise_sigma: float = 0.1
    ambiguity_delta: float = 0.05
    confusable_fraction: float = 0.3
    unlabeled_rate: float = 0.1
    seed: int = 7

    def validate(self) -> None:
        if self.dim < 2:
            raise ScenarioError("need at least 2 feature dimensions")
        if self.n_identities < 2 or self.n_images < 2:
            raise ScenarioError("need at least 2 identities and 2 images")
        for name in ("co_travel_prob", "confusable_fraction", "unlabeled_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ScenarioError(f"{name} must lie in [0, 1], got {v}")
        if self.ambiguity_delta < 0:
            raise ScenarioError("ambiguity angle must be nonnegative")
        if self.noise_sigma < 0:
            raise ScenarioError("noise scale must be nonnegative")
        if not 1 <= self.group_min <= self.group_max:
            raise ScenarioError("need 1 <= group_min <= group_max")
        if self.group_max > self.n_identities:
            raise ScenarioError("group size exceeds the identity count")
        if self.persons_min < 1 or self.persons_max < self.persons_min:
            raise ScenarioError("need 1 <= persons_min <= persons_max")
        if self.persons_max < self.persons_min + self.group_max - 1:
            raise ScenarioError(
                "persons-per-image range too tight for the group sizes: need "
                f"persons_max >= persons_min + group_max - 1 "
                f"({self.persons_min + self.group_max - 1})"
            )


@dataclass
class SyntheticDataset:
    images: list
    identity_vectors: np.ndarray
    groups: list
    confusable: list
    config: ScenarioConfig

    @property
    def dim(self) -> int:
        return self.identity_vectors.shape[1]

    @property
    def n_identities(self) -> int:
        return self.identity_vectors.shape[0]

    def labeled_ids_by_image(self) -> dict:
        return {
            img.image_id: [int(t) for t in img.labels if t != UNLABELED]
            for img in self.images
        }

    def images_containing(self, identity: int) -> list:
        return [img.image_id for img in self.images if identity in img.labels]

    def group_of(self, identity: int) -> int:
        for gi, members in enumerate(self.groups):
            if identity in members:
                return gi
        raise KeyError(identity)

    def confusable_ids(self) -> set:
        return {i for pair in self.confusable for i in pair}

    def equals(self, other: "SyntheticDataset") -> bool:
        if self.config != other.config or self.groups != other.groups:
            return False
        if self.confusable != other.confusable:
            return False
        if not np.array_equal(self.identity_vectors, other.identity_vectors):
            return False
        if len(self.images) != len(other.images):
            return False
        for mine, theirs in zip(self.images, other.images):
            if mine.image_id != theirs.image_id:
                return False
            if not np.array_equal(mine.features, theirs.features):
                return False
            if not np.array_equal(mine.labels, theirs.labels):
                return False
        return True


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _make_identity_vectors(cfg: ScenarioConfig, rng) -> tuple:
    """Base vectors plus the list of confusable (a, b) pairs."""
    vectors = rng.standard_normal((cfg.n_identities, cfg.dim))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)

    n_pairs = int(round(cfg.confusable_fraction * cfg.n_identities)) // 2
    order = rng.permutation(cfg.n_identities)
    pairs = [(int(order[2 * i]), int(order[2 * i + 1])) for i in range(n_pairs)]
    for a, b in pairs:
        u = vectors[a]
        w = rng.standard_normal(cfg.dim)
        w = _unit(w - (w @ u) * u)
        vectors[b] = np.cos(cfg.ambiguity_delta) * u + np.sin(cfg.ambiguity_delta) * w
    return vectors, pairs


def _make_groups(cfg: ScenarioConfig, pairs, rng) -> list:
    """Partition identities into groups, confusable twins kept apart."""
    sizes = []
    while sum(sizes) < cfg.n_identities:
        sizes.append(int(rng.integers(cfg.group_min, cfg.group_max + 1)))
    sizes[-1] -= sum(sizes) - cfg.n_identities
    if sizes[-1] == 0:
        sizes.pop()

    groups = [[] for _ in sizes]
    free = list(sizes)

    paired_ids = {i for pair in pairs for i in pair}
    for a, b in pairs:
        open_groups = sorted(range(len(groups)), key=lambda gi: (-free[gi], gi))
        open_groups = [gi for gi in open_groups if free[gi] > 0]
        if len(open_groups) < 2:
            raise ScenarioError("not enough groups to separate confusable pairs")
        for ident, gi in ((a, open_groups[0]), (b, open_groups[1])):
            groups[gi].append(ident)
            free[gi] -= 1

    rest = [int(i) for i in rng.permutation(cfg.n_identities) if int(i) not in paired_ids]
    it = iter(rest)
    for gi in range(len(groups)):
        while free[gi] > 0:
            groups[gi].append(int(next(it)))
            free[gi] -= 1
    return [sorted(g) for g in groups]


def _compose_image(cfg: ScenarioConfig, groups, rng) -> list:
    """Labeled identity ids placed in one image (group placement order)."""
    target = int(rng.integers(cfg.persons_min,
                              cfg.persons_max - cfg.group_max + 2))
    placed = []
    available = list(range(len(groups)))
    while len(placed) < target and available:
        pick = int(rng.integers(len(available)))
        gi = available.pop(pick)
        members = groups[gi]
        if rng.random() < cfg.co_travel_prob:
            placed.extend(members)
        else:
            placed.append(members[int(rng.integers(len(members)))])
    return placed


def generate(cfg: ScenarioConfig) -> SyntheticDataset:
    """Build a full scenario. Same config (incl. seed) -> identical dataset."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0x5D47A])

    vectors, pairs = _make_identity_vectors(cfg, rng)
    groups = _make_groups(cfg, pairs, rng)

    per_image_ids = [_compose_image(cfg, groups, rng) for _ in range(cfg.n_images)]

    # Every labeled identity must be retrievable: appear in >= 2 images.
    counts = np.zeros(cfg.n_identities, dtype=np.int64)
    for ids in per_image_ids:
        for t in ids:
            counts[t] += 1
    for t in np.where(counts < 2)[0]:
        hosts = [i for i, ids in enumerate(per_image_ids) if t not in ids]
        need = 2 - int(counts[t])
        chosen = rng.choice(len(hosts), size=need, replace=False)
        for c in chosen:
            per_image_ids[hosts[int(c)]].append(int(t))

    images = []
    for img_id, ids in enumerate(per_image_ids):
        feats = []
        labels = []
        for t in ids:
            obs = vectors[t] + cfg.noise_sigma * rng.standard_normal(cfg.dim)
            feats.append(_unit(obs))
            labels.append(t)
        n_extra = int(rng.binomial(len(ids), cfg.unlabeled_rate)) if ids else 0
        for _ in range(n_extra):
            feats.append(_unit(rng.standard_normal(cfg.dim)))
            labels.append(UNLABELED)
        images.append(FeatureSet(image_id=img_id,
                                 features=np.array(feats),
                                 labels=np.array(labels, dtype=np.int64)))
    return SyntheticDataset(images=images, identity_vectors=vectors,
                            groups=groups,
                            confusable=sorted(tuple(sorted(p)) for p in pairs),
                            config=cfg)


def export_dataset(ds: SyntheticDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "record": "header",
            "version": FILE_VERSION,
            "dim": ds.dim,
            "n_identities": ds.n_identities,
            "n_images": len(ds.images),
            "confusable": [list(p) for p in ds.confusable],
            "config": dataclasses.asdict(ds.config),
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for t in range(ds.n_identities):
            rec = {
                "record": "identity",
                "id": t,
                "group": ds.group_of(t),
                "base": list(ds.identity_vectors[t]),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        for img in ds.images:
            persons = []
            for row in range(img.n):
                label = int(img.labels[row])
                persons.append({
                    "identity": None if label == UNLABELED else label,
                    "feature": list(img.features[row]),
                })
            rec = {"record": "image", "id": img.image_id, "persons": persons}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def import_dataset(path) -> SyntheticDataset:
    def fail(line_no, why):
        raise DatasetFormatError(f"{path}: line {line_no}: {why}")

    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: line 1: empty file")

    records = []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append((i, json.loads(line)))
        except json.JSONDecodeError as exc:
            fail(i, f"bad record: {exc.msg}")

    line_no, header = records[0]
    if header.get("record") != "header":
        fail(line_no, "first record must be the header")
    if header.get("version") != FILE_VERSION:
        fail(line_no, f"unsupported file version {header.get('version')}")
    try:
        cfg = ScenarioConfig(**header["config"])
    except (KeyError, TypeError) as exc:
        fail(line_no, f"bad config block: {exc}")
    dim = int(header["dim"])
    n_identities = int(header["n_identities"])
    n_images = int(header["n_images"])

    vectors = np.zeros((n_identities, dim))
    group_of = {}
    images = []
    seen_ids = set()
    for line_no, rec in records[1:]:
        kind = rec.get("record")
        if kind == "identity":
            t = int(rec["id"])
            if not 0 <= t < n_identities:
                fail(line_no, f"identity id {t} out of range")
            base = np.asarray(rec["base"], dtype=np.float64)
            if base.shape != (dim,):
                fail(line_no, f"identity vector has length {base.shape}, expected {dim}")
            vectors[t] = base
            group_of[t] = int(rec["group"])
            seen_ids.add(t)
        elif kind == "image":
            persons = rec.get("persons", [])
            feats = np.zeros((len(persons), dim))
            labels = np.zeros(len(persons), dtype=np.int64)
            for row, person in enumerate(persons):
                feat = np.asarray(person["feature"], dtype=np.float64)
                if feat.shape != (dim,):
                    fail(line_no, f"feature row has length {feat.shape}, expected {dim}")
                feats[row] = feat
                ident = person["identity"]
                labels[row] = UNLABELED if ident is None else int(ident)
            images.append(FeatureSet(image_id=int(rec["id"]),
                                     features=feats, labels=labels))
        else:
            fail(line_no, f"unknown record kind {kind!r}")

    if len(seen_ids) != n_identities:
        raise DatasetFormatError(
            f"{path}: line {len(lines)}: header promises {n_identities} "
            f"identities, found {len(seen_ids)} (file truncated?)"
        )
    if len(images) != n_images:
        raise DatasetFormatError(
            f"{path}: line {len(lines)}: header promises {n_images} images, "
            f"found {len(images)} (file truncated?)"
        )

    n_groups = max(group_of.values()) + 1 if group_of else 0
    groups = [[] for _ in range(n_groups)]
    for t in sorted(group_of):
        groups[group_of[t]].append(t)
    confusable = sorted(tuple(int(x) for x in p) for p in header.get("confusable", []))
    return SyntheticDataset(images=images, identity_vectors=vectors,
                            groups=[sorted(g) for g in groups],
                            confusable=confusable, config=cfg)
