"""Training-side memory structures.

Two pieces live here:

* the instance-matching loss: labeled embeddings are classified against a
  non-parametric lookup table of one unit vector per identity plus a FIFO
  queue of recent unlabeled embeddings acting as extra negatives;
* the per-image feature bank that supplies each training image with the
  stored features of its appointed pair image, so pair context never needs
  a second extraction pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .head import UNLABELED, FeatureSet
from .linalg import as_matrix, check_finite

_PAIR_SALT = 0x9A12


@dataclass
class OimState:
    """Lookup table (one unit row per identity) plus the unlabeled queue.

    ``tau`` is the softmax temperature (logits are divided by it) and
    ``gamma`` the momentum kept on the old table row during an update.
    The state is owned by a single training loop; concurrent readers
    should work on copies.
    """

    lut: np.ndarray
    capacity: int
    tau: float = 1.0 / 30.0
    gamma: float = 0.5
    queue: list = field(default_factory=list)

    def __post_init__(self):
        self.lut = as_matrix(self.lut)
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.capacity < 0:
            raise ValueError("queue capacity must be nonnegative")

    @property
    def num_identities(self) -> int:
        return self.lut.shape[0]

    @property
    def dim(self) -> int:
        return self.lut.shape[1]

    def queue_matrix(self) -> np.ndarray:
        if not self.queue:
            return np.zeros((0, self.dim))
        return np.stack(self.queue)


def init_oim_state(num_identities: int, dim: int, tau: float = 1.0 / 30.0,
                   gamma: float = 0.5, capacity: int | None = None,
                   seed: int = 0) -> OimState:
    """Fresh state with random unit table rows and an empty queue.

    Default queue capacity is five slots per identity.
    """
    if capacity is None:
        capacity = 5 * num_identities
    rng = np.random.default_rng([seed, 0x01B])
    lut = rng.standard_normal((num_identities, dim))
    lut /= np.linalg.norm(lut, axis=1, keepdims=True)
    return OimState(lut=lut, capacity=capacity, tau=tau, gamma=gamma)


def oim_loss(features: np.ndarray, labels, state: OimState,
             update_state: bool = True):
    """Instance-matching loss over unit-norm feature rows.

    Labeled rows are scored against every table row and every queued
    unlabeled feature; the loss is the mean negative log-probability of the
    true identity. Unlabeled rows contribute no loss.

    Returns (loss, gradient w.r.t. ``features``). The gradient is computed
    against the state as it was on entry; only afterwards (and only when
    ``update_state`` is set) are table rows folded toward the new features
    and unlabeled rows pushed onto the queue, evicting oldest-first.
    """
    features = as_matrix(features)
    check_finite(features, "oim features")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (features.shape[0],):
        raise ValueError("labels must align with feature rows")
    labeled = labels != UNLABELED
    if np.any((labels[labeled] < 0) | (labels[labeled] >= state.num_identities)):
        bad = labels[labeled]
        bad = bad[(bad < 0) | (bad >= state.num_identities)]
        raise ValueError(f"identity id {bad[0]} outside table range "
                         f"[0, {state.num_identities})")

    dfeat = np.zeros_like(features)
    n_lab = int(labeled.sum())
    if n_lab == 0:
        loss = 0.0
    else:
        memory = np.vstack([state.lut, state.queue_matrix()])
        x = features[labeled]
        targets = labels[labeled]
        logits = (x @ memory.T) / state.tau
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        logp = shifted - lse[:, None]
        loss = float(-logp[np.arange(n_lab), targets].mean())

        probs = np.exp(logp)
        probs[np.arange(n_lab), targets] -= 1.0
        dfeat[labeled] = (probs @ memory) / (state.tau * n_lab)

    if update_state:
        for x, t in zip(features[labeled], labels[labeled]):
            v = state.gamma * state.lut[t] + (1.0 - state.gamma) * x
            state.lut[t] = v / np.linalg.norm(v)
        for x in features[~labeled]:
            state.queue.append(np.array(x))
            if len(state.queue) > state.capacity:
                del state.queue[0]
    return loss, dfeat


def appoint_pairs(labeled_ids, seed: int = 0) -> dict:
    """Assign to every image the image sharing the most labeled identities.

    ``labeled_ids`` maps image id -> iterable of labeled identity ids. Ties
    break toward the smallest partner id; an image overlapping with nobody
    gets a seeded uniform random partner.
    """
    ids = sorted(labeled_ids)
    if len(ids) < 2:
        raise ValueError("pair appointment needs at least two images")
    id_sets = {i: set(labeled_ids[i]) for i in ids}
    rng = np.random.default_rng([seed, _PAIR_SALT])
    pair_map = {}
    for i in ids:
        best_j, best_overlap = None, 0
        for j in ids:
            if j == i:
                continue
            overlap = len(id_sets[i] & id_sets[j])
            if overlap > best_overlap:
                best_j, best_overlap = j, overlap
        if best_overlap == 0:
            others = [j for j in ids if j != i]
            best_j = others[int(rng.integers(len(others)))]
        pair_map[i] = best_j
    return pair_map


class ImageMemoryBank:
    """Per-image store of the most recent labeled/unlabeled feature rows.

    Labeled rows are aligned with the image's ground-truth labeled person
    list and replace the stored rows wholesale on every visit (no momentum
    by default); unlabeled rows are likewise replaced as a set. A single
    training loop mutates the bank between steps; ``snapshot`` hands out
    copies for inspection.
    """

    def __init__(self, labeled_ids, pair_map, momentum: float = 0.0):
        self._gt_ids = {i: list(ids) for i, ids in labeled_ids.items()}
        self._pair_map = dict(pair_map)
        if not 0.0 <= momentum < 1.0:
            raise ValueError("bank momentum must lie in [0, 1)")
        self._momentum = momentum
        self._labeled: dict = {}
        self._unlabeled: dict = {}

    @classmethod
    def from_images(cls, images, seed: int = 0, momentum: float = 0.0) -> "ImageMemoryBank":
        """Build an empty bank for a list of FeatureSets and appoint pairs."""
        labeled_ids = {
            img.image_id: [int(t) for t in img.labels if t != UNLABELED]
            for img in images
        }
        return cls(labeled_ids, appoint_pairs(labeled_ids, seed=seed), momentum=momentum)

    @property
    def pair_map(self) -> dict:
        return dict(self._pair_map)

    def images(self):
        return sorted(self._gt_ids)

    def expected_labeled(self, image_id: int) -> int:
        return len(self._gt_ids[image_id])

    def labeled_identity_list(self, image_id: int) -> list:
        return list(self._gt_ids[image_id])

    def visited(self, image_id: int) -> bool:
        return image_id in self._labeled

    def update(self, image_id: int, labeled_feats, unlabeled_feats) -> None:
        """Replace the stored features of one image with fresh ones."""
        labeled_feats = as_matrix(labeled_feats)
        unlabeled_feats = as_matrix(unlabeled_feats)
        k_l = self.expected_labeled(image_id)
        if labeled_feats.shape[0] != k_l:
            raise ValueError(
                f"image {image_id} has {k_l} labeled persons, "
                f"got {labeled_feats.shape[0]} feature rows"
            )
        check_finite(labeled_feats, "bank labeled features")
        check_finite(unlabeled_feats, "bank unlabeled features")
        if self._momentum > 0.0 and image_id in self._labeled and k_l:
            old = self._labeled[image_id]
            self._labeled[image_id] = self._momentum * old + (1 - self._momentum) * labeled_feats
        else:
            self._labeled[image_id] = labeled_feats.copy()
        self._unlabeled[image_id] = unlabeled_feats.copy()

    def fetch(self, image_id: int) -> FeatureSet | None:
        """Stored features of one image, or None if never visited."""
        if image_id not in self._labeled:
            return None
        lab = self._labeled[image_id]
        unlab = self._unlabeled[image_id]
        feats = np.vstack([lab, unlab]) if unlab.shape[0] else lab.copy()
        labels = np.concatenate([
            np.asarray(self._gt_ids[image_id], dtype=np.int64),
            np.full(unlab.shape[0], UNLABELED, dtype=np.int64),
        ])
        return FeatureSet(image_id=image_id, features=feats, labels=labels)

    def fetch_pair(self, image_id: int) -> FeatureSet | None:
        """Stored features of the appointed pair image; None while the pair
        image has not been visited yet (the cold-start case the training
        loop skips)."""
        return self.fetch(self._pair_map[image_id])

    def snapshot(self) -> dict:
        """Read-only copy of the stored contents, keyed by image id."""
        return {
            i: (self._labeled[i].copy(), self._unlabeled[i].copy())
            for i in self._labeled
        }
