"""Flat ``key = value`` configuration files and their mapping onto ExperimentConfig.

A file holds one ``key = value`` per line. ``#`` starts a comment and a
``[section]`` line prefixes the following keys, so ``[dbscan]`` then
``min_pts = 8`` sets ``dbscan.min_pts``. Unknown or repeated keys are
rejected. Top-level keys (``seed``, ``jobs``) must precede the first
section. Command-line overrides are applied after the file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

from . import dataset as ds
from .encoder import PretrainConfig
from .errors import ConfigError
from .finetune import FineTuneConfig
from .harness import DEFAULT_THRESHOLDS, ExperimentConfig, SynthSpec
from .session import SessionConfig


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _list(item: Callable) -> Callable:
    def parse(text: str) -> tuple:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(item(p) for p in parts)
    return parse


def _mapping(text: str) -> dict:
    """``a:b, c:d`` -> {"a": "b", "c": "d"}; labels may contain spaces."""
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        if ":" not in part:
            raise ValueError(f"expected raw:mapped pairs, got {part.strip()!r}")
        k, v = (s.strip() for s in part.split(":", 1))
        if not k or not v:
            raise ValueError(f"empty side in {part.strip()!r}")
        out[k] = v
    return out


def _eps(text: str):
    if text.strip().lower() in ("auto", "none", ""):
        return None
    return float(text)


def _acc_th(text: str):
    """A window count (``100``) or a fraction of the stream (``0.75``)."""
    v = float(text)
    if v.is_integer() and v >= 1 and "." not in text:
        return int(v)
    if 0 < v < 1:
        return v
    raise ValueError(f"expected a count >= 1 or a fraction in (0, 1), got {text!r}")


def _fmt_list(values) -> str:
    return ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in values)


@dataclass(frozen=True)
class Key:
    name: str
    default: str
    parse: Callable
    help: str


_D, _S, _P, _F, _Y = ds.DatasetSpec(), SessionConfig(), PretrainConfig(), FineTuneConfig(), SynthSpec()

KEYS = (
    Key("data.source", "synth", str, "synth or csv"),
    Key("data.paths", "", _list(str), "comma-separated CSV files (data.source=csv)"),
    Key("data.window_len", str(_D.window_len), int, "samples per window"),
    Key("data.overlap", f"{_D.overlap:g}", float, "window overlap fraction in [0, 1)"),
    Key("data.label_merge", "", _mapping, "raw:merged label pairs, comma-separated"),
    Key("data.user_groups", "", _mapping, "user:pseudo_user pairs, comma-separated"),
    Key("synth.users", str(_Y.users), int, "synthetic users"),
    Key("synth.activities", str(_Y.activities), int,
        "how many built-in patterns to use: " + ",".join(a.name for a in ds.DEFAULT_ACTIVITIES)),
    Key("synth.names", "", _list(str), "built-in patterns by name; overrides synth.activities"),
    Key("synth.windows_per_activity", str(_Y.windows_per_activity), int, "windows of data per activity and user"),
    Key("synth.noise_std", f"{_Y.noise_std:g}", float, "white sensor noise, m/s^2"),
    Key("synth.sample_rate", f"{_Y.sample_rate:g}", float, "Hz"),
    Key("synth.rounds", str(_Y.rounds), int, "bouts per activity"),
    Key("synth.wobble_std", f"{_Y.wobble_std:g}", float, "slow orientation drift, m/s^2"),
    Key("synth.posture_std", f"{_Y.posture_std:g}", float, "per-bout posture shift, m/s^2"),
    Key("session.backend", _S.backend, str, "statistical or conv"),
    Key("session.acc_th", str(_S.acc_th), _acc_th, "accumulation threshold for `run`: count or stream fraction"),
    Key("reducer.out_dim", str(_S.out_dim), int, "PCA output dimensions"),
    Key("dbscan.eps", "auto", _eps, "neighbourhood radius; auto = median eps_k-NN distance"),
    Key("dbscan.eps_k", str(_S.eps_k), int, "neighbour rank used by eps=auto"),
    Key("dbscan.min_pts", str(_S.min_pts), int, "core point size, point itself included"),
    Key("encoder.filters", _fmt_list(_P.filters), _list(int), "conv filters per stage"),
    Key("encoder.kernels", _fmt_list(_P.kernels), _list(int), "conv kernel sizes per stage"),
    Key("encoder.dropout", f"{_P.dropout:g}", float, "dropout between conv stages"),
    Key("pretrain.epochs", str(_P.epochs), int, ""),
    Key("pretrain.batch_size", str(_P.batch_size), int, ""),
    Key("pretrain.lr", f"{_P.base_lr:g}", float, "SGD base rate, cosine-decayed per step"),
    Key("pretrain.momentum", f"{_P.momentum:g}", float, ""),
    Key("pretrain.temperature", f"{_P.temperature:g}", float, "NT-Xent temperature"),
    Key("finetune.epochs", str(_F.epochs), int, ""),
    Key("finetune.batch_size", str(_F.batch_size), int, ""),
    Key("finetune.lr", f"{_F.lr:g}", float, "Adam learning rate"),
    Key("finetune.beta1", f"{_F.beta1:g}", float, ""),
    Key("finetune.beta2", f"{_F.beta2:g}", float, ""),
    Key("finetune.patience", str(_F.patience), int, "epochs without validation improvement"),
    Key("finetune.val_fraction", f"{_F.validation_fraction:g}", float, "held-out share; 0 disables early stopping"),
    Key("finetune.unfreeze_encoder", str(_F.unfreeze_encoder).lower(), _bool, "train the conv encoder too"),
    Key("finetune.hidden", str(_F.hidden), int, "hidden units of the head"),
    Key("eval.thresholds", _fmt_list(DEFAULT_THRESHOLDS), _list(float), "accumulation thresholds swept by `eval`"),
    Key("seed", "0", int, "root seed"),
    Key("jobs", "1", int, "parallel folds for `eval`"),
)
KEY_INDEX = {k.name: k for k in KEYS}


def parse_text(text: str, source: str = "<config>") -> dict:
    """Raw ``{key: value string}`` from config text."""
    out: dict[str, str] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if section:
            key = f"{section}.{key}"
        if key not in KEY_INDEX:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: key {key!r} given twice")
        out[key] = value
    return out


def read_file(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror or exc}") from None
    return parse_text(text, str(p))


def parse_overrides(pairs: Iterable[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = (s.strip() for s in pair.split("=", 1))
        if key not in KEY_INDEX:
            raise ConfigError(f"unknown key {key!r}")
        out[key] = value
    return out


def resolve(file_values: Mapping[str, str] = None, overrides: Mapping[str, str] = None) -> dict:
    """Typed values for every key: defaults, then file values, then overrides."""
    raw = {k.name: k.default for k in KEYS}
    for layer in (file_values or {}, overrides or {}):
        for key, value in layer.items():
            if key not in KEY_INDEX:
                raise ConfigError(f"unknown key {key!r}")
            raw[key] = value
    out = {}
    for k in KEYS:
        try:
            out[k.name] = k.parse(raw[k.name])
        except ValueError as exc:
            raise ConfigError(f"bad value for {k.name}: {exc}") from None
    return out


def build_experiment(values: Mapping) -> ExperimentConfig:
    """ExperimentConfig from resolved values; a fractional session.acc_th keeps the default count."""
    v = values
    if v["jobs"] < 1:
        raise ConfigError("jobs must be >= 1")
    acc_th = v["session.acc_th"] if isinstance(v["session.acc_th"], int) else SessionConfig.acc_th
    data = ds.DatasetSpec(v["data.window_len"], v["data.overlap"], v["data.label_merge"], v["data.user_groups"])
    session = SessionConfig(acc_th=acc_th, out_dim=v["reducer.out_dim"], eps=v["dbscan.eps"],
                            eps_k=v["dbscan.eps_k"], min_pts=v["dbscan.min_pts"], backend=v["session.backend"],
                            window_len=data.window_len, overlap=data.overlap)
    pre = PretrainConfig(v["pretrain.epochs"], v["pretrain.batch_size"], v["pretrain.lr"], v["pretrain.momentum"],
                         v["pretrain.temperature"], v["seed"], v["encoder.filters"], v["encoder.kernels"],
                         v["encoder.dropout"])
    fine = FineTuneConfig(epochs=v["finetune.epochs"], batch_size=v["finetune.batch_size"], lr=v["finetune.lr"],
                          beta1=v["finetune.beta1"], beta2=v["finetune.beta2"], patience=v["finetune.patience"],
                          validation_fraction=v["finetune.val_fraction"],
                          unfreeze_encoder=v["finetune.unfreeze_encoder"], hidden=v["finetune.hidden"],
                          seed=v["seed"])
    synth = SynthSpec(v["synth.users"], v["synth.activities"], v["synth.windows_per_activity"],
                      v["synth.noise_std"], v["synth.sample_rate"], v["synth.rounds"], v["synth.wobble_std"],
                      v["synth.posture_std"], tuple(v["synth.names"]))
    return ExperimentConfig(data, session, pre, fine, tuple(v["eval.thresholds"]), v["seed"], v["data.source"],
                            tuple(v["data.paths"]), synth)


def resolve_acc_th(value, n_windows: int) -> int:
    """A count stays as is; a fraction becomes floor(fraction * n_windows)."""
    if isinstance(value, int):
        return value
    return int(math.floor(value * n_windows))


def render_defaults() -> str:
    width = max(len(k.name) for k in KEYS)
    lines = []
    for k in KEYS:
        note = f"  {k.help}" if k.help else ""
        lines.append(f"  {k.name:<{width}} = {k.default or '(empty)'}{note}")
    return "\n".join(lines)
