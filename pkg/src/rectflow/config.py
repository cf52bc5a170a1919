"""``key=value`` run configuration with ``[section]`` headers.

Recognised sections and keys (defaults in ``DEFAULTS``)::

    [run]            task, seed, couplings_count
    [model]          hidden (comma list), embed_dim, activation
    [optim]          lr, beta1, beta2, weight_decay
    [stage.<name>]   iterations, batch_size, time_sampler, mu, sigma, a,
                     immiscible, cond_drop, init, couplings
                     (<name> is fm, rf1, rf2 or distill)
    [couplings]      count, steps, anchored, shard_size
    [anchored]       omega, inner_iters, eps, lr_embed, method
    [eval]           steps_list, omega_list, samples, repetitions, seed
"""
from __future__ import annotations

import configparser
import copy

STAGE_NAMES = ("fm", "rf1", "rf2", "distill")

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"task": "gauss8", "seed": "7"},
    "model": {"hidden": "128,128,128", "embed_dim": "16", "activation": "silu"},
    "optim": {"lr": "1e-3", "beta1": "0.9", "beta2": "0.999", "weight_decay": "1e-4"},
    "stage.fm": {"iterations": "20000", "batch_size": "256", "time_sampler": "uniform",
                 "immiscible": "false", "cond_drop": "0.1"},
    "stage.rf1": {"iterations": "20000", "batch_size": "256", "time_sampler": "logit_normal",
                  "mu": "0.0", "sigma": "1.0", "immiscible": "true", "cond_drop": "0.1",
                  "init": "fm"},
    "stage.rf2": {"iterations": "10000", "batch_size": "256", "time_sampler": "mix_exp", "a": "4.0",
                  "immiscible": "false", "cond_drop": "0.1", "init": "rf1"},
    "stage.distill": {"iterations": "10000", "batch_size": "256", "cond_drop": "0.0",
                      "immiscible": "false", "init": "rf2"},
    "couplings": {"count": "8192", "steps": "100", "anchored": "true", "shard_size": "2048"},
    "anchored": {"omega": "2.0", "inner_iters": "10", "eps": "", "lr_embed": "1e-2",
                 "method": "line_search"},
    "eval": {"steps_list": "1,2,4,8,16", "omega_list": "1,1.5,2,3", "samples": "512",
             "repetitions": "10", "seed": "1000"},
}


class ConfigError(ValueError):
    pass


def parse_bool(value) -> bool:
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def parse_list(value, kind=float) -> list:
    return [kind(x) for x in str(value).replace(" ", "").split(",") if x]


def defaults() -> dict[str, dict[str, str]]:
    return copy.deepcopy(DEFAULTS)


def load_config(path=None, overrides=(), text: str | None = None) -> dict[str, dict[str, str]]:
    """Merge defaults, a config file and ``section.key=value`` overrides."""
    cfg = defaults()
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        if text is not None:
            parser.read_string(text)
    except (configparser.Error, UnicodeDecodeError) as err:
        raise ConfigError(f"cannot parse config: {err}") from err
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    for section in parser.sections():
        cfg.setdefault(section, {}).update(parser[section])
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.rpartition(".")
        if not sep or not dot or not section:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        cfg.setdefault(section, {})[name] = value
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    from .timesamplers import ParameterError, from_config
    from .toydata import TASKS

    if cfg["run"]["task"] not in TASKS:
        raise ConfigError(f"unknown task {cfg['run']['task']!r}")
    try:
        int(cfg["run"]["seed"])
        for name in STAGE_NAMES:
            sec = cfg[f"stage.{name}"]
            if int(sec["iterations"]) < 1:
                raise ConfigError(f"stage.{name}: iterations must be >= 1")
            if int(sec["batch_size"]) < 1:
                raise ConfigError(f"stage.{name}: batch_size must be >= 1")
            p = float(sec.get("cond_drop", 0))
            if not 0 <= p < 1:
                raise ConfigError(f"stage.{name}: cond_drop must be in [0, 1)")
            parse_bool(sec.get("immiscible", "false"))
            if name != "distill":
                from_config(sec)
        if float(cfg["optim"]["lr"]) < 0:
            raise ConfigError("optim.lr must be >= 0")
        if int(cfg["couplings"]["steps"]) < 1 or int(cfg["couplings"]["count"]) < 1:
            raise ConfigError("couplings.steps and couplings.count must be >= 1")
        if float(cfg["anchored"]["omega"]) < 0:
            raise ConfigError("anchored.omega must be >= 0")
        parse_list(cfg["model"]["hidden"], int)
    except (KeyError, ValueError, ParameterError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {err}") from err


def dumps(cfg: dict) -> str:
    lines = []
    for section in sorted(cfg):
        lines.append(f"[{section}]")
        lines.extend(f"{k}={v}" for k, v in sorted(cfg[section].items()))
        lines.append("")
    return "\n".join(lines)
