"""JSON experiment configuration.

Top-level keys: ``dataset``, ``model``, ``privacy``, ``controller``,
``trainer``, ``output``.  Every key is optional; missing values take the desk
defaults.  :func:`serialize` emits the canonical, fully-resolved form, and
``serialize(parse(x))`` is a fixed point of ``serialize . parse``.

Example::

    {
      "dataset": {"source": "synthetic_blobs", "n_train": 8000, "n_test": 2000,
                  "n_classes": 10, "feature_dim": 20, "separation": 3.0},
      "model": {"hidden": [128, 64], "activation": "relu"},
      "privacy": {"batch_size": 256, "sigma": 1.1, "epochs": 8, "delta": 1e-5},
      "controller": {"enabled": true, "c0": 1.0, "probe_period": 50, "beta": 0.98,
                     "kappa": 0.1, "zeta_star": 4.0, "r": 2.0,
                     "c_min": 0.3, "c_max": 5.0, "clamp_enabled": true,
                     "probe_layers": ["fc1"],
                     "tail_rule": {"mode": "top_k", "k": null, "min_tail_size": 8}},
      "trainer": {"lr": 0.5, "schedule": {"kind": "constant"},
                  "seeds": {"init": 0, "subsample": 1, "noise": 2, "data": 3}},
      "output": {"dir": "runs", "name": "run"}
    }

``privacy`` accepts either ``q``/``steps`` or the conveniences
``batch_size`` (q = batch_size / n_train) and ``epochs``
(steps = ceil(epochs / q)); the canonical form always stores ``q`` and
``steps``.  ``delta`` defaults to 1e-5; the string ``"1/n"`` selects
``1 / n_train`` instead.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Optional

from ..controller import ControllerConfig
from ..dp import PrivacyParams
from ..model import MlpConfig
from ..spectral import ProbeSpec, TailFitRule
from ..trainer import ConfigError, LrSchedule, Seeds, TrainConfig
from .data import DatasetSpec, SkewSpec

SECTIONS = ("dataset", "model", "privacy", "controller", "trainer", "output")

DESK_N_TRAIN = 8000
DESK_MNIST_SUBSET = 5000
DESK_BATCH = 256
DESK_EPOCHS = 8
DESK_SIGMA = 1.1
DESK_DELTA = 1e-5


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = DatasetSpec()
    hidden: tuple[int, ...] = (128, 64)
    activation: str = "relu"
    privacy: PrivacyParams = PrivacyParams(DESK_BATCH / DESK_N_TRAIN, DESK_SIGMA, 250, DESK_DELTA)
    controller: ControllerConfig = ControllerConfig()
    controller_enabled: bool = True
    c0: float = 1.0
    probe: ProbeSpec = ProbeSpec()
    tail_rule: TailFitRule = TailFitRule()
    lr_schedule: LrSchedule = LrSchedule(0.5)
    seeds: Seeds = Seeds()
    eval_every: Optional[int] = None
    output_dir: str = "runs"
    name: str = "run"

    @property
    def input_dim(self) -> int:
        return 784 if self.dataset.source == "mnist_idx" else self.dataset.feature_dim

    @property
    def n_classes(self) -> int:
        return 10 if self.dataset.source == "mnist_idx" else self.dataset.n_classes

    def model_config(self) -> MlpConfig:
        return MlpConfig((self.input_dim, *self.hidden, self.n_classes), self.activation)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            privacy=self.privacy,
            model=self.model_config(),
            controller=self.controller,
            c0=self.c0,
            lr_schedule=self.lr_schedule,
            probe=self.probe,
            tail_rule=self.tail_rule,
            seeds=self.seeds,
            controller_enabled=self.controller_enabled,
            eval_every=self.eval_every,
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seeds=Seeds(seed, seed + 1, seed + 2, seed + 3))


def _take(section: dict, name: str, allowed: set[str]) -> dict:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return section


def _parse_dataset(d: dict) -> DatasetSpec:
    d = _take(d, "dataset", {
        "source", "path", "n_train", "n_test", "n_classes", "feature_dim",
        "separation", "normalization", "skew",
    })
    source = d.get("source", "synthetic_blobs")
    default_train = DESK_MNIST_SUBSET if source == "mnist_idx" else DESK_N_TRAIN
    skew = d.get("skew")
    if skew is not None:
        skew = _take(skew, "dataset.skew", {"alpha", "seed"})
        skew = SkewSpec(float(skew["alpha"]), int(skew.get("seed", 0)))
    return DatasetSpec(
        source=source,
        path=d.get("path"),
        n_train=int(d.get("n_train", default_train)),
        n_test=int(d.get("n_test", 2000)),
        n_classes=int(d.get("n_classes", 10)),
        feature_dim=int(d.get("feature_dim", 784 if source == "mnist_idx" else 20)),
        separation=float(d.get("separation", 3.0)),
        normalization=d.get("normalization", "none"),
        skew=skew,
    )


def _parse_privacy(d: dict, n_train: int) -> PrivacyParams:
    d = _take(d, "privacy", {"q", "batch_size", "sigma", "steps", "epochs", "delta"})
    if "q" in d and "batch_size" in d:
        raise ConfigError("give either privacy.q or privacy.batch_size, not both")
    if "steps" in d and "epochs" in d:
        raise ConfigError("give either privacy.steps or privacy.epochs, not both")
    q = float(d["q"]) if "q" in d else float(d.get("batch_size", DESK_BATCH)) / n_train
    steps = int(d["steps"]) if "steps" in d else math.ceil(float(d.get("epochs", DESK_EPOCHS)) / q - 1e-9)
    delta = d.get("delta", DESK_DELTA)
    delta = 1.0 / n_train if delta == "1/n" else float(delta)
    return PrivacyParams(q, float(d.get("sigma", DESK_SIGMA)), steps, delta)


def _parse_tail_rule(d: dict) -> TailFitRule:
    d = _take(d, "controller.tail_rule", {"mode", "k", "lambda_min", "min_tail_size"})
    k = d.get("k")
    lam = d.get("lambda_min")
    return TailFitRule(
        mode=d.get("mode", "top_k"),
        k=None if k is None else int(k),
        lambda_min=None if lam is None else float(lam),
        min_tail_size=int(d.get("min_tail_size", 8)),
    )


def parse(raw: dict[str, Any]) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a decoded JSON object."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    try:
        dataset = _parse_dataset(raw.get("dataset"))
        m = _take(raw.get("model"), "model", {"hidden", "activation"})
        privacy = _parse_privacy(raw.get("privacy"), dataset.n_train)
        c = _take(raw.get("controller"), "controller", {
            "enabled", "c0", "zeta_star", "r", "kappa", "beta", "probe_period",
            "c_min", "c_max", "clamp_enabled", "probe_layers", "tail_rule",
        })
        defaults = ControllerConfig()
        controller = ControllerConfig(
            zeta_star=float(c.get("zeta_star", defaults.zeta_star)),
            r=float(c.get("r", defaults.r)),
            kappa=float(c.get("kappa", defaults.kappa)),
            beta=float(c.get("beta", defaults.beta)),
            probe_period=int(c.get("probe_period", defaults.probe_period)),
            c_min=float(c.get("c_min", defaults.c_min)),
            c_max=float(c.get("c_max", defaults.c_max)),
            clamp_enabled=bool(c.get("clamp_enabled", defaults.clamp_enabled)),
        )
        t = _take(raw.get("trainer"), "trainer", {"lr", "schedule", "seeds", "eval_every"})
        sched = _take(t.get("schedule"), "trainer.schedule", {"kind", "step_size", "gamma"})
        seeds = _take(t.get("seeds"), "trainer.seeds", {"init", "subsample", "noise", "data"})
        o = _take(raw.get("output"), "output", {"dir", "name"})
        eval_every = t.get("eval_every")
        cfg = ExperimentConfig(
            dataset=dataset,
            hidden=tuple(int(h) for h in m.get("hidden", (128, 64))),
            activation=m.get("activation", "relu"),
            privacy=privacy,
            controller=controller,
            controller_enabled=bool(c.get("enabled", True)),
            c0=float(c.get("c0", 1.0)),
            probe=ProbeSpec(tuple(c.get("probe_layers", ("fc1",)))),
            tail_rule=_parse_tail_rule(c.get("tail_rule")),
            lr_schedule=LrSchedule(
                lr=float(t.get("lr", 0.5)),
                kind=sched.get("kind", "constant"),
                step_size=int(sched.get("step_size", 0)),
                gamma=float(sched.get("gamma", 1.0)),
            ),
            seeds=Seeds(**{k: int(v) for k, v in seeds.items()}),
            eval_every=None if eval_every is None else int(eval_every),
            output_dir=str(o.get("dir", "runs")),
            name=str(o.get("name", "run")),
        )
        cfg.train_config()  # validates model sizes and c0
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def serialize(cfg: ExperimentConfig) -> dict[str, Any]:
    """Canonical JSON-ready form of ``cfg``."""
    ds = cfg.dataset
    return {
        "dataset": {
            "source": ds.source,
            "path": ds.path,
            "n_train": ds.n_train,
            "n_test": ds.n_test,
            "n_classes": ds.n_classes,
            "feature_dim": ds.feature_dim,
            "separation": ds.separation,
            "normalization": ds.normalization,
            "skew": None if ds.skew is None else {"alpha": ds.skew.alpha, "seed": ds.skew.seed},
        },
        "model": {"hidden": list(cfg.hidden), "activation": cfg.activation},
        "privacy": {
            "q": cfg.privacy.q,
            "sigma": cfg.privacy.sigma,
            "steps": cfg.privacy.steps,
            "delta": cfg.privacy.delta,
        },
        "controller": {
            "enabled": cfg.controller_enabled,
            "c0": cfg.c0,
            "zeta_star": cfg.controller.zeta_star,
            "r": cfg.controller.r,
            "kappa": cfg.controller.kappa,
            "beta": cfg.controller.beta,
            "probe_period": cfg.controller.probe_period,
            "c_min": cfg.controller.c_min,
            "c_max": cfg.controller.c_max,
            "clamp_enabled": cfg.controller.clamp_enabled,
            "probe_layers": list(cfg.probe.layer_refs),
            "tail_rule": {
                "mode": cfg.tail_rule.mode,
                "k": cfg.tail_rule.k,
                "lambda_min": cfg.tail_rule.lambda_min,
                "min_tail_size": cfg.tail_rule.min_tail_size,
            },
        },
        "trainer": {
            "lr": cfg.lr_schedule.lr,
            "schedule": {
                "kind": cfg.lr_schedule.kind,
                "step_size": cfg.lr_schedule.step_size,
                "gamma": cfg.lr_schedule.gamma,
            },
            "seeds": {
                "init": cfg.seeds.init,
                "subsample": cfg.seeds.subsample,
                "noise": cfg.seeds.noise,
                "data": cfg.seeds.data,
            },
            "eval_every": cfg.eval_every,
        },
        "output": {"dir": cfg.output_dir, "name": cfg.name},
    }


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse(raw)


def dumps(cfg: ExperimentConfig) -> str:
    return json.dumps(serialize(cfg), indent=2, sort_keys=True)
