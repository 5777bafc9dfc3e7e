"""Experiment configuration: a nested YAML (or flat ``dotted.key: value``) file.

Every key has a default, so a config only needs to name what it changes.
Validation collects all problems and reports them together before any work
starts.
"""

import copy
import hashlib
import json
import os
from dataclasses import dataclass

import yaml

from ..attacks import AttackSpec
from ..data import NoiseSpec, dataset_files
from ..errors import ConfigError
from ..losses import LossSpec
from ..models import CIFAR_VGG_SMALL, MNIST_MLP, ModelConfig
from ..training import TrainConfig

DEFAULT_EPSILONS = {"MNIST": [0.05, 0.1, 0.2, 0.3], "CIFAR10": [2 / 255, 4 / 255, 8 / 255]}

DEFAULTS = {
    "data": {"name": "MNIST", "dir": "data/mnist", "subset_size": 10000, "test_subset_size": 2000,
             "attack_subset_size": None},
    "model": {"architecture": None, "widths": None, "channels": None, "convs_per_block": None},
    "loss": {"kind": ["ce", "drsl"], "q": 0.7, "tau": [0.1, 0.5, 1.0], "metric": "euclidean",
             "restrict_to_non_true": False},
    "train": {"epochs": 5, "batch_size": 128, "lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "attack": {"kind": "pgd", "epsilon": None, "step_size": None, "step_fraction": 0.1, "alpha": None,
               "steps": 40, "random_start": False, "loss": "ce", "seed": 0, "dump": False},
    "noise": {"rate": 0.0, "seed": 0},
    "analysis": {"metric": "euclidean", "bins": 20, "pca_points": 500, "pca_epsilon": None},
    "seeds": [0, 1, 2, 3, 4],
    "output": {"dir": "runs/default"},
    "runtime": {"workers": 1},
}

# keys that do not influence any computed number
NON_SEMANTIC = {("output", "dir"), ("runtime", "workers")}


def _as_list(v):
    if v is None:
        return []
    return list(v) if isinstance(v, (list, tuple)) else [v]


def unflatten(flat):
    """``{"a.b": 1}`` -> ``{"a": {"b": 1}}``; nested input passes through."""
    out = {}
    for key, value in flat.items():
        if isinstance(value, dict):
            value = unflatten(value)
        parts = str(key).split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        if isinstance(value, dict) and isinstance(node.get(parts[-1]), dict):
            node[parts[-1]].update(value)
        else:
            node[parts[-1]] = value
    return out


def _merge(base, override, path, errors):
    for key, value in override.items():
        if key not in base:
            errors.append(f"unknown config key {'.'.join(path + [key])!r}")
            continue
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                errors.append(f"{'.'.join(path + [key])!r} must be a mapping")
                continue
            _merge(base[key], value, path + [key], errors)
        else:
            base[key] = value


@dataclass
class ExperimentConfig:
    raw: dict

    # -- construction ------------------------------------------------------
    @classmethod
    def from_dict(cls, d, validate=True, check_files=True):
        errors = []
        merged = copy.deepcopy(DEFAULTS)
        _merge(merged, unflatten(d or {}), [], errors)
        cfg = cls(merged)
        if validate:
            errors += cfg.problems(check_files=check_files)
        if errors:
            raise ConfigError("invalid experiment config:\n  - " + "\n  - ".join(errors))
        return cfg

    @classmethod
    def load(cls, path, overrides=None, check_files=True):
        try:
            with open(path) as fh:
                d = yaml.safe_load(fh) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        d = unflatten(d)
        base = os.path.dirname(os.path.abspath(path))
        data_dir = d.get("data", {}).get("dir")
        if data_dir and not os.path.isabs(data_dir) and not os.path.exists(data_dir):
            candidate = os.path.join(base, data_dir)
            if os.path.exists(candidate):
                d["data"]["dir"] = candidate
        if overrides:
            d = unflatten({**_flatten(d), **overrides})
        return cls.from_dict(d, check_files=check_files)

    # -- accessors ---------------------------------------------------------
    def __getitem__(self, dotted):
        node = self.raw
        for p in dotted.split("."):
            node = node[p]
        return node

    @property
    def dataset(self):
        return str(self.raw["data"]["name"]).upper().replace("-", "")

    @property
    def seeds(self):
        return [int(s) for s in _as_list(self.raw["seeds"])]

    @property
    def output_dir(self):
        return self.raw["output"]["dir"]

    @property
    def epsilons(self):
        eps = self.raw["attack"]["epsilon"]
        if eps is None:
            return list(DEFAULT_EPSILONS.get(self.dataset, [0.1]))
        return [float(e) for e in _as_list(eps)]

    def model_config(self, seed=0):
        m = self.raw["model"]
        base = CIFAR_VGG_SMALL if self.dataset == "CIFAR10" else MNIST_MLP
        arch = m["architecture"] or base.architecture
        if arch != base.architecture:
            base = CIFAR_VGG_SMALL if arch == "vgg-small" else MNIST_MLP
        input_shape = (3, 32, 32) if self.dataset == "CIFAR10" else (1, 28, 28)
        return ModelConfig(
            architecture=arch,
            input_shape=input_shape,
            num_classes=10,
            widths=tuple(m["widths"]) if m["widths"] is not None else base.widths,
            channels=tuple(m["channels"]) if m["channels"] is not None else base.channels,
            convs_per_block=m["convs_per_block"] or base.convs_per_block,
            init_seed=seed,
        )

    def loss_specs(self):
        """Loss arms in a fixed order: CE, then GCE per q, then DRSL per (metric, tau)."""
        loss = self.raw["loss"]
        kinds = [str(k).lower() for k in _as_list(loss["kind"])]
        arms = []
        for kind in ("ce", "gce", "drsl"):
            if kind not in kinds:
                continue
            if kind == "ce":
                arms.append(LossSpec("ce"))
            elif kind == "gce":
                arms += [LossSpec("gce", q=float(q)) for q in _as_list(loss["q"])]
            else:
                for metric in _as_list(loss["metric"]):
                    for tau in _as_list(loss["tau"]):
                        arms.append(LossSpec("drsl", tau=float(tau), metric=metric,
                                             restrict_to_non_true=bool(loss["restrict_to_non_true"])))
        return arms

    def train_config(self):
        t = self.raw["train"]
        return TrainConfig(int(t["epochs"]), int(t["batch_size"]), float(t["lr"]), float(t["beta1"]),
                           float(t["beta2"]), float(t["eps"]))

    def attack_spec(self, epsilon):
        a = self.raw["attack"]
        frac = float(a["step_fraction"])
        step = float(a["step_size"]) if a["step_size"] is not None else frac * epsilon
        alpha = float(a["alpha"]) if a["alpha"] is not None else frac * epsilon
        # a zero budget still needs positive step sizes to be a valid spec
        return AttackSpec(a["kind"], float(epsilon), alpha=alpha or 1.0, steps=int(a["steps"]),
                          step_size=step or 1.0, random_start=bool(a["random_start"]), loss=a["loss"],
                          seed=int(a["seed"]))

    def noise_spec(self):
        return NoiseSpec(float(self.raw["noise"]["rate"]), int(self.raw["noise"]["seed"]))

    @property
    def pca_epsilon(self):
        e = self.raw["analysis"]["pca_epsilon"]
        if e is not None:
            return float(e)
        eps = self.epsilons
        return eps[len(eps) // 2]

    # -- identity ----------------------------------------------------------
    def semantic_dict(self):
        d = copy.deepcopy(self.raw)
        for section, key in NON_SEMANTIC:
            d[section].pop(key, None)
        d["data"].pop("dir", None)
        return d

    @property
    def config_hash(self):
        blob = json.dumps(self.semantic_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def to_dict(self):
        return copy.deepcopy(self.raw)

    # -- validation --------------------------------------------------------
    def problems(self, check_files=True):
        errs = []

        def attempt(label, fn):
            try:
                return fn()
            except (ConfigError, ValueError, TypeError) as exc:
                errs.append(f"{label}: {exc}")
                return None

        if self.dataset not in ("MNIST", "CIFAR10"):
            errs.append(f"data.name must be MNIST or CIFAR10, got {self.raw['data']['name']!r}")
        for key in ("subset_size", "test_subset_size", "attack_subset_size"):
            v = self.raw["data"][key]
            if v is not None and (not isinstance(v, int) or v < 1):
                errs.append(f"data.{key} must be a positive integer or null")
        if not self.seeds:
            errs.append("seeds must be a non-empty list")
        if len(set(self.seeds)) != len(self.seeds):
            errs.append("seeds must be distinct")
        attempt("model", lambda: self.model_config())
        if not _as_list(self.raw["loss"]["kind"]):
            errs.append("loss.kind must name at least one loss")
        attempt("loss", self.loss_specs)
        tc = attempt("train", self.train_config)
        if tc is not None:
            if tc.epochs < 0 or tc.batch_size < 1:
                errs.append("train.epochs must be >= 0 and train.batch_size >= 1")
            from ..optim import AdamState

            attempt("train", lambda: AdamState(tc.lr, tc.beta1, tc.beta2, tc.eps))
        eps = attempt("attack.epsilon", lambda: self.epsilons)
        if eps is not None:
            if eps != sorted(eps):
                errs.append("attack.epsilon grid must be sorted ascending")
            if not eps:
                errs.append("attack.epsilon grid must not be empty")
            for e in eps:
                attempt("attack", lambda e=e: self.attack_spec(e))
        attempt("noise", self.noise_spec)
        if self.raw["analysis"]["metric"] not in ("euclidean", "cosine"):
            errs.append("analysis.metric must be euclidean or cosine")
        if not self.raw["output"]["dir"]:
            errs.append("output.dir must be set")
        if check_files and self.dataset in ("MNIST", "CIFAR10"):
            for split in ("train", "test"):
                try:
                    dataset_files(self.dataset, self.raw["data"]["dir"], split)
                except FileNotFoundError as exc:
                    errs.append(f"data.dir: {exc}")
        return errs


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out
