"""Experiment configuration: a flat dotted key-value text format.

One `section.key = value` assignment per line; `#` starts a full-line
comment. Every key must be known, duplicates are rejected, and all values
are validated before any computation or file output happens. Defaults follow
the training recipe the simulator targets (eps 8/255, PGD-10 training /
20-step evaluation, step size 2/255, lr 0.01 with momentum 0.9, 5 clients,
Dirichlet beta 0.1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackSpec
from .data import Dataset, gen_synthetic, load_dataset
from .federation import _TRAINER_OBJECTIVE, AGGREGATORS, TRAINERS, FederationConfig
from .theory import ToyDistribution

EVAL_ATTACKS = ("fgsm", "bim", "pgd")


class ConfigError(ValueError):
    """Invalid configuration; message names the offending key."""


def _parse_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_bool_or_auto(raw: str):
    if raw.lower() == "auto":
        return "auto"
    return _parse_bool(raw)


def _parse_int_list(raw: str) -> list[int]:
    return [int(v.strip()) for v in raw.split(",") if v.strip()]


def _parse_float_list(raw: str) -> list[float]:
    return [float(v.strip()) for v in raw.split(",") if v.strip()]


def _parse_str_list(raw: str) -> list[str]:
    return [v.strip() for v in raw.split(",") if v.strip()]


def _parse_clip(raw: str):
    if raw.lower() == "none":
        return None
    parts = _parse_float_list(raw)
    if len(parts) != 2 or parts[0] >= parts[1]:
        raise ValueError(f"clip must be 'none' or 'lo,hi' with lo < hi: {raw!r}")
    return (parts[0], parts[1])


def _parse_priors(raw: str) -> list[list[float]]:
    rows = [r.strip() for r in raw.split(";") if r.strip()]
    return [_parse_float_list(r) for r in rows]


# key -> (parser, default-as-text). Types are enforced at parse time;
# cross-field constraints in ExperimentConfig.validate().
_SCHEMA: dict[str, tuple] = {
    "data.source": (str, "synthetic"),
    "data.path": (str, ""),
    "data.eval_path": (str, ""),
    "data.classes": (int, "10"),
    "data.dim": (int, "32"),
    "data.train_per_class": (int, "1000"),
    "data.eval_per_class": (int, "200"),
    "data.sigma": (float, "0.1"),
    "data.mean_scale": (float, "0.037"),
    "data.seed": (int, "7"),
    "partition.clients": (int, "5"),
    "partition.beta": (float, "0.1"),
    "model.hidden": (_parse_int_list, "128,128"),
    "federation.trainer": (str, "calfat"),
    "federation.aggregator": (str, "fedavg"),
    "federation.mu": (float, "0.01"),
    "federation.rounds": (int, "50"),
    "federation.local_epochs": (int, "1"),
    "federation.batch_size": (int, "64"),
    "federation.lr": (float, "0.01"),
    "federation.momentum": (float, "0.9"),
    "federation.delta": (float, "0.01"),
    "federation.adv_ratio": (float, "1.0"),
    "federation.trades_lambda": (float, "6.0"),
    "attack.train.epsilon": (float, repr(8 / 255)),
    "attack.train.alpha": (float, repr(2 / 255)),
    "attack.train.steps": (int, "10"),
    "attack.train.objective": (str, "auto"),
    "attack.train.random_start": (_parse_bool_or_auto, "auto"),
    "attack.train.clip": (_parse_clip, "none"),
    "attack.eval.names": (_parse_str_list, "pgd"),
    "attack.eval.epsilon": (float, repr(8 / 255)),
    "attack.eval.alpha": (float, repr(2 / 255)),
    "attack.eval.steps": (int, "20"),
    "attack.eval.random_start": (_parse_bool, "false"),
    "attack.eval.clip": (_parse_clip, "none"),
    "attack.eval.every": (int, "1"),
    "seeds": (_parse_int_list, "0,1,2"),
    "output.dir": (str, "runs/out"),
    "theory.means": (_parse_float_list, "-1,1"),
    "theory.sigma": (float, "1.0"),
    "theory.priors": (_parse_priors, "0.9,0.1;0.5,0.5;0.1,0.9"),
    "theory.sizes": (_parse_int_list, "200,2000,20000"),
    "theory.seeds": (_parse_int_list, "0,1,2,3,4"),
    "theory.delta": (float, "0.01"),
}


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Parse and type-check a config document against the schema."""
    values: dict = {}
    seen: dict[str, int] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        raw_value = raw_value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(
                f"{origin}:{lineno}: duplicate key {key!r} (first set on line {seen[key]})"
            )
        seen[key] = lineno
        parser = _SCHEMA[key][0]
        try:
            values[key] = parser(raw_value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key}: {exc}") from exc
    for key, (parser, default) in _SCHEMA.items():
        if key not in values:
            values[key] = parser(default)
    return values


@dataclass
class ExperimentConfig:
    """Validated view of one parsed config document."""

    values: dict = field(repr=False)

    def __getitem__(self, key: str):
        return self.values[key]

    def validate(self) -> None:
        v = self.values
        if v["data.source"] not in ("synthetic", "csv", "binary"):
            raise ConfigError(f"data.source must be synthetic|csv|binary, got {v['data.source']!r}")
        if v["data.source"] != "synthetic":
            if not v["data.path"]:
                raise ConfigError("data.path is required for file-backed datasets")
            if not v["data.eval_path"]:
                raise ConfigError("data.eval_path is required for file-backed datasets")
        if v["data.classes"] < 2:
            raise ConfigError(f"data.classes must be >= 2, got {v['data.classes']}")
        if v["data.dim"] < 1:
            raise ConfigError(f"data.dim must be >= 1, got {v['data.dim']}")
        if v["data.train_per_class"] < 1 or v["data.eval_per_class"] < 1:
            raise ConfigError("data.train_per_class and data.eval_per_class must be >= 1")
        if v["data.sigma"] <= 0:
            raise ConfigError(f"data.sigma must be > 0, got {v['data.sigma']}")
        if v["partition.clients"] < 1:
            raise ConfigError(f"partition.clients must be >= 1, got {v['partition.clients']}")
        if v["partition.beta"] <= 0:
            raise ConfigError(f"partition.beta must be > 0, got {v['partition.beta']}")
        if not v["model.hidden"] or any(h < 1 for h in v["model.hidden"]):
            raise ConfigError(f"model.hidden must be positive sizes, got {v['model.hidden']}")
        if v["federation.trainer"] not in TRAINERS:
            raise ConfigError(
                f"federation.trainer must be one of {'|'.join(TRAINERS)}, got {v['federation.trainer']!r}"
            )
        if v["federation.aggregator"] not in AGGREGATORS:
            raise ConfigError(
                f"federation.aggregator must be one of {'|'.join(AGGREGATORS)}, "
                f"got {v['federation.aggregator']!r}"
            )
        if v["attack.train.objective"] not in ("auto", "ce", "ckl"):
            raise ConfigError(
                f"attack.train.objective must be auto|ce|ckl, got {v['attack.train.objective']!r}"
            )
        for name in v["attack.eval.names"]:
            if name not in EVAL_ATTACKS:
                raise ConfigError(
                    f"attack.eval.names: unknown attack {name!r} (known: {', '.join(EVAL_ATTACKS)})"
                )
        if v["attack.eval.every"] < 1:
            raise ConfigError(f"attack.eval.every must be >= 1, got {v['attack.eval.every']}")
        if not v["seeds"]:
            raise ConfigError("seeds must name at least one seed")
        if not v["output.dir"]:
            raise ConfigError("output.dir must not be empty")
        priors = v["theory.priors"]
        if len(priors) < 2:
            raise ConfigError("theory.priors needs at least two clients")
        width = len(v["theory.means"])
        for row in priors:
            if len(row) != width:
                raise ConfigError("each theory.priors row needs one entry per class mean")
            if any(p < 0 for p in row) or abs(sum(row) - 1.0) > 1e-9:
                raise ConfigError(f"theory.priors row {row} is not a probability vector")
        if len(v["theory.sizes"]) < 1 or any(
            b <= a for a, b in zip(v["theory.sizes"], v["theory.sizes"][1:])
        ):
            raise ConfigError("theory.sizes must be strictly increasing")
        if not v["theory.seeds"]:
            raise ConfigError("theory.seeds must name at least one seed")
        if v["theory.delta"] <= 0:
            raise ConfigError(f"theory.delta must be > 0, got {v['theory.delta']}")
        # Field-level numeric constraints shared with the runtime config.
        try:
            self.federation_config(seed=v["seeds"][0])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def load_data(self) -> tuple[Dataset, Dataset]:
        """Materialize (train, eval) datasets from the configured source."""
        v = self.values
        if v["data.source"] == "synthetic":
            rng = np.random.default_rng(np.random.SeedSequence((v["data.seed"], 0)))
            means = rng.normal(0.0, v["data.mean_scale"], size=(v["data.classes"], v["data.dim"]))
            train = gen_synthetic(
                v["data.classes"], v["data.dim"], v["data.train_per_class"],
                means, v["data.sigma"], seed=v["data.seed"] + 1,
            )
            evalset = gen_synthetic(
                v["data.classes"], v["data.dim"], v["data.eval_per_class"],
                means, v["data.sigma"], seed=v["data.seed"] + 2,
            )
            return train, evalset
        fmt = v["data.source"]
        classes = v["data.classes"] if fmt == "csv" else None
        train = load_dataset(v["data.path"], fmt, classes)
        evalset = load_dataset(v["data.eval_path"], fmt, classes)
        if train.dim != evalset.dim or train.num_classes != evalset.num_classes:
            raise ConfigError("train and eval datasets disagree in shape or class count")
        return train, evalset

    def eval_attacks(self) -> list[tuple[str, AttackSpec]]:
        v = self.values
        eps = v["attack.eval.epsilon"]
        alpha = v["attack.eval.alpha"]
        clip = v["attack.eval.clip"]
        specs = []
        for name in v["attack.eval.names"]:
            if name == "fgsm":
                spec = AttackSpec(eps, alpha=eps if eps > 0 else alpha, steps=1, domain_clip=clip)
            elif name == "bim":
                spec = AttackSpec(eps, alpha=alpha, steps=v["attack.eval.steps"], domain_clip=clip)
            else:  # pgd
                spec = AttackSpec(
                    eps, alpha=alpha, steps=v["attack.eval.steps"],
                    random_start=v["attack.eval.random_start"], domain_clip=clip,
                )
            specs.append((name, spec))
        return specs

    def train_attack(self) -> AttackSpec:
        v = self.values
        objective = v["attack.train.objective"]
        if objective == "auto":
            objective = _TRAINER_OBJECTIVE[v["federation.trainer"]]
        random_start = v["attack.train.random_start"]
        if random_start == "auto":
            # divergence climbs have a zero gradient at the clean input
            random_start = objective == "ckl" and v["attack.train.epsilon"] > 0
        return AttackSpec(
            epsilon=v["attack.train.epsilon"],
            alpha=v["attack.train.alpha"],
            steps=v["attack.train.steps"],
            objective=objective,
            random_start=random_start,
            domain_clip=v["attack.train.clip"],
        )

    def federation_config(self, seed: int) -> FederationConfig:
        v = self.values
        return FederationConfig(
            trainer=v["federation.trainer"],
            rounds=v["federation.rounds"],
            local_epochs=v["federation.local_epochs"],
            lr=v["federation.lr"],
            momentum=v["federation.momentum"],
            batch_size=v["federation.batch_size"],
            hidden=tuple(v["model.hidden"]),
            delta=v["federation.delta"],
            adv_ratio=v["federation.adv_ratio"],
            trades_lambda=v["federation.trades_lambda"],
            aggregator=v["federation.aggregator"],
            mu=v["federation.mu"],
            train_attack=self.train_attack(),
            eval_attacks=self.eval_attacks(),
            eval_attack_every=v["attack.eval.every"],
            seed=seed,
        )

    def toy_distribution(self) -> ToyDistribution:
        v = self.values
        return ToyDistribution(
            class_means=np.asarray(v["theory.means"], dtype=np.float64),
            sigma=v["theory.sigma"],
            priors=np.asarray(v["theory.priors"], dtype=np.float64),
        )

    def resolved_text(self) -> str:
        """Deterministic echo of every key (defaults included)."""
        lines = []
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, bool):
                text = "true" if val else "false"
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], list):
                text = ";".join(",".join(repr(float(x)) for x in row) for row in val)
            elif isinstance(val, (list, tuple)):
                text = ",".join(str(x) for x in val)
            elif val is None:
                text = "none"
            elif isinstance(val, float):
                text = repr(val)
            else:
                text = str(val)
            lines.append(f"{key} = {text}")
        # Record resolved choices that are otherwise implicit.
        spec = self.train_attack()
        lines.append(f"# resolved: attack.train.objective = {spec.objective}")
        lines.append(f"# resolved: attack.train.random_start = {'true' if spec.random_start else 'false'}")
        if self.values["federation.trainer"] == "fedtrades":
            lines.append("# resolved: fedtrades adversary climbs the KL term")
        return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    """Read, parse, and fully validate a config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = ExperimentConfig(parse_config_text(text, origin=str(path)))
    cfg.validate()
    return cfg
