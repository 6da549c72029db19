"""End-to-end training of the attention head.

Each step visits one image: the stored features of its appointed pair image
come out of the memory bank, the head runs on the (image, pair) couple, the
matching loss supervises the final embeddings, and the bank is refreshed
with the image's raw appearance features. During the first epoch the loss
can be frozen (computed but not applied) so the bank fills with stable
features before the head starts moving.

A checkpoint is the model parameter file plus ``imb.*``/``oim.*`` blocks in
the same container.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blockio import read_blocks, write_blocks
from .grad import SupervisionConfig, pair_loss, pair_loss_backward, sgd_step
from .head import FORMAT_VERSION, UNLABELED, AcaeParams, FeatureSet
from .oim import ImageMemoryBank, OimState

_ORDER_SALT = 0x07DE


class TrainingDiverged(ArithmeticError):
    """The loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 15
    lr: float = 0.3
    lr_steps: tuple = ()
    lr_decay: float = 0.1
    acae_loss_weight: float = 0.1
    freeze_first_epoch: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("need at least one epoch")
        if self.lr < 0 or self.acae_loss_weight < 0:
            raise ValueError("learning rate and loss weight must be nonnegative")

    def lr_at(self, epoch: int) -> float:
        rate = self.lr
        for step in self.lr_steps:
            if epoch >= step:
                rate *= self.lr_decay
        return rate


@dataclass
class StepResult:
    loss: float
    skipped: bool
    frozen: bool


def training_step(params: AcaeParams, image: FeatureSet, bank: ImageMemoryBank,
                  state: OimState, schedule: TrainSchedule,
                  sup: SupervisionConfig, lr: float,
                  frozen: bool = False) -> StepResult:
    """One visit of one image. The bank is refreshed even when the pair is
    cold or the loss is frozen."""
    pair = bank.fetch_pair(image.image_id)
    if pair is not None and not sup.include_unlabeled_context:
        pair = pair.labeled_only()

    loss = 0.0
    skipped = pair is None or pair.n == 0
    if not skipped:
        if frozen:
            # Loss observed for logging only; no state or parameter change.
            loss = pair_loss(image, pair, params, state, sup, update_state=False)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss diverged on image {image.image_id}")
        else:
            loss, grads, _, _ = pair_loss_backward(
                image, pair, params, state, sup, update_state=True)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss diverged on image {image.image_id}")
            w = schedule.acae_loss_weight
            if lr > 0 and w > 0:
                for name in grads:
                    grads[name] *= w
                sgd_step(params, grads, lr)

    labeled = image.labeled_mask()
    bank.update(image.image_id, image.features[labeled], image.features[~labeled])
    return StepResult(loss=loss, skipped=skipped, frozen=frozen)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    steps: int
    skipped: int
    lr: float
    frozen: bool


def train(dataset, params: AcaeParams, bank: ImageMemoryBank, state: OimState,
          schedule: TrainSchedule, sup: SupervisionConfig | None = None,
          seed: int = 0, progress=None) -> list:
    """Run the full schedule over a dataset; returns per-epoch statistics."""
    sup = sup or SupervisionConfig()
    history = []
    for epoch in range(schedule.epochs):
        frozen = epoch == 0 and schedule.freeze_first_epoch
        lr = schedule.lr_at(epoch)
        rng = np.random.default_rng([seed, _ORDER_SALT, epoch])
        order = rng.permutation(len(dataset.images))
        losses = []
        skipped = 0
        for idx in order:
            image = dataset.images[int(idx)]
            result = training_step(params, image, bank, state, schedule,
                                   sup, lr, frozen=frozen)
            if result.skipped:
                skipped += 1
            else:
                losses.append(result.loss)
        stats = EpochStats(
            epoch=epoch,
            mean_loss=float(np.mean(losses)) if losses else 0.0,
            steps=len(order),
            skipped=skipped,
            lr=lr,
            frozen=frozen,
        )
        history.append(stats)
        if progress is not None:
            progress(stats)
    return history


def save_checkpoint(path, params: AcaeParams, bank: ImageMemoryBank,
                    state: OimState) -> None:
    blocks = {}
    for name, arr in params.named_arrays().items():
        blocks[name] = arr if arr.ndim == 2 else arr[None, :]
    blocks["opts.scaled_logits"] = np.array([[1.0 if params.scaled_logits else 0.0]])
    blocks["opts.share_qkv"] = np.array([[1.0 if params.share_qkv else 0.0]])
    blocks["opts.ln_eps"] = np.array([[params.ln1.eps]])

    snapshot = bank.snapshot()
    pair_map = bank.pair_map
    blocks["imb.pair_map"] = np.array(
        [[float(i), float(pair_map[i])] for i in sorted(pair_map)]
    ).reshape(len(pair_map), 2)
    for image_id, (lab, unlab) in snapshot.items():
        blocks[f"imb.{image_id}.labeled"] = lab
        blocks[f"imb.{image_id}.unlabeled"] = unlab

    blocks["oim.lut"] = state.lut
    blocks["oim.queue"] = state.queue_matrix()
    blocks["oim.tau"] = np.array([[state.tau]])
    blocks["oim.gamma"] = np.array([[state.gamma]])
    blocks["oim.capacity"] = np.array([[float(state.capacity)]])
    write_blocks(path, FORMAT_VERSION,
                 (params.dim, params.heads, params.ffn_dim), blocks)


def load_checkpoint(path, dataset):
    """Rebuild (params, bank, oim state) from a checkpoint plus the dataset
    that supplies ground-truth labeled person lists."""
    version, (dim, heads, ffn), blocks = read_blocks(path)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    params = AcaeParams._from_blocks(dim, heads, ffn, blocks)

    pair_rows = blocks["imb.pair_map"]
    pair_map = {int(row[0]): int(row[1]) for row in pair_rows}
    labeled_ids = {
        img.image_id: [int(t) for t in img.labels if t != UNLABELED]
        for img in dataset.images
    }
    bank = ImageMemoryBank(labeled_ids, pair_map)
    for name in blocks:
        if name.startswith("imb.") and name.endswith(".labeled"):
            image_id = int(name.split(".")[1])
            bank.update(image_id, blocks[name], blocks[f"imb.{image_id}.unlabeled"])

    state = OimState(
        lut=blocks["oim.lut"],
        capacity=int(blocks["oim.capacity"][0, 0]),
        tau=float(blocks["oim.tau"][0, 0]),
        gamma=float(blocks["oim.gamma"][0, 0]),
        queue=[row.copy() for row in blocks["oim.queue"]],
    )
    return params, bank, state
