"""Flat key=value run configuration.

Files hold one ``section.key=value`` pair per line ('#' starts a comment);
command-line overrides win over file values. Unknown keys are rejected so
typos fail loudly, and every run writes the resolved snapshot next to its
outputs.
"""
from __future__ import annotations

from dataclasses import dataclass

from .evalharness import EvalProtocol
from .grad import SupervisionConfig
from .similarity import FusionConfig
from .synthdata import ScenarioConfig
from .train import TrainSchedule


class ConfigError(ValueError):
    pass


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


# key -> (parser, default)
KEYS = {
    "seed": (int, 7),
    "data.n_identities": (int, 40),
    "data.dim": (int, 64),
    "data.n_images": (int, 400),
    "data.persons_min": (int, 3),
    "data.persons_max": (int, 6),
    "data.group_min": (int, 2),
    "data.group_max": (int, 3),
    "data.co_travel_prob": (float, 0.8),
    "data.noise_sigma": (float, 0.1),
    "data.ambiguity_delta": (float, 0.05),
    "data.confusable_fraction": (float, 0.3),
    "data.unlabeled_rate": (float, 0.1),
    "acae.heads": (int, 4),
    "acae.ffn_dim": (int, 0),  # 0 selects 2 * dim
    "acae.scaled_logits": (_parse_bool, False),
    "acae.share_qkv": (_parse_bool, False),
    "acae.ln_eps": (float, 1e-5),
    "fusion.lambda": (float, 0.4),
    "fusion.use_intra": (_parse_bool, True),
    "fusion.use_inter": (_parse_bool, True),
    "fusion.use_final": (_parse_bool, True),
    "fusion.rescale": (_parse_bool, True),
    "fusion.normalize": (_parse_bool, True),
    "oim.tau": (float, 1.0 / 30.0),
    "oim.momentum": (float, 0.5),
    "oim.queue_factor": (int, 5),
    "train.epochs": (int, 20),
    "train.lr": (float, 0.3),
    "train.lr_steps": (str, ""),
    "train.lr_decay": (float, 0.1),
    "train.acae_loss_weight": (float, 0.1),
    "train.freeze_first_epoch": (_parse_bool, True),
    "train.supervise_pair": (_parse_bool, True),
    "train.supervise_intra": (_parse_bool, True),
    "train.supervise_inter": (_parse_bool, True),
    "train.include_unlabeled_context": (_parse_bool, True),
    "train.imb_momentum": (float, 0.0),
    "eval.gallery_size": (int, 50),
    "eval.max_queries": (int, 200),
    "eval.lambdas": (str, "0.1,0.2,0.3,0.4,0.5,0.6"),
    "bench.repeats": (int, 50),
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key):
        return self.values[key]

    def snapshot_text(self) -> str:
        lines = [f"{key}={_render(self.values[key])}" for key in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def scenario(self) -> ScenarioConfig:
        v = self.values
        return ScenarioConfig(
            n_identities=v["data.n_identities"],
            dim=v["data.dim"],
            n_images=v["data.n_images"],
            persons_min=v["data.persons_min"],
            persons_max=v["data.persons_max"],
            group_min=v["data.group_min"],
            group_max=v["data.group_max"],
            co_travel_prob=v["data.co_travel_prob"],
            noise_sigma=v["data.noise_sigma"],
            ambiguity_delta=v["data.ambiguity_delta"],
            confusable_fraction=v["data.confusable_fraction"],
            unlabeled_rate=v["data.unlabeled_rate"],
            seed=v["seed"],
        )

    def fusion(self) -> FusionConfig:
        v = self.values
        return FusionConfig(
            lam=v["fusion.lambda"],
            use_intra=v["fusion.use_intra"],
            use_inter=v["fusion.use_inter"],
            use_final=v["fusion.use_final"],
            rescale=v["fusion.rescale"],
            normalize=v["fusion.normalize"],
        )

    def schedule(self) -> TrainSchedule:
        v = self.values
        steps = tuple(int(s) for s in v["train.lr_steps"].split(",") if s.strip())
        return TrainSchedule(
            epochs=v["train.epochs"],
            lr=v["train.lr"],
            lr_steps=steps,
            lr_decay=v["train.lr_decay"],
            acae_loss_weight=v["train.acae_loss_weight"],
            freeze_first_epoch=v["train.freeze_first_epoch"],
        )

    def supervision(self) -> SupervisionConfig:
        v = self.values
        return SupervisionConfig(
            supervise_pair=v["train.supervise_pair"],
            supervise_intra=v["train.supervise_intra"],
            supervise_inter=v["train.supervise_inter"],
            include_unlabeled_context=v["train.include_unlabeled_context"],
        )

    def protocol(self) -> EvalProtocol:
        v = self.values
        return EvalProtocol(
            gallery_size=v["eval.gallery_size"],
            seed=v["seed"],
            max_queries=v["eval.max_queries"],
        )

    def lambdas(self) -> list:
        return [float(s) for s in self.values["eval.lambdas"].split(",") if s.strip()]


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse_assignment(raw: str, where: str) -> tuple:
    if "=" not in raw:
        raise ConfigError(f"{where}: expected key=value, got {raw!r}")
    key, value = raw.split("=", 1)
    key = key.strip()
    if key not in KEYS:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    parser, _ = KEYS[key]
    try:
        return key, parser(value.strip())
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: bad value for key {key!r}: {exc}") from exc


def load_config(path=None, overrides=(), seed=None) -> RunConfig:
    values = {key: default for key, (_, default) in KEYS.items()}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                key, value = _parse_assignment(stripped, f"{path}:{line_no}")
                values[key] = value
    for raw in overrides:
        key, value = _parse_assignment(raw, "--set")
        values[key] = value
    if seed is not None:
        values["seed"] = int(seed)
    return RunConfig(values=values)
