"""Stage orchestration and the per-run manifest.

A run directory holds one file per artifact, named by stage::

    fm.rflow  rf1.rflow  rf2.rflow  distill.rflow
    couplings_rf1.rfcpl  couplings_rf2.rfcpl
    metrics_<stage>.csv  pairing_rf1.csv  manifest.json

``manifest.json`` only ever gains entries. The latest entry of each stage
is the live one; its digest covers checkpoints, coupling files, config and
seed but not timings or the metrics logs (their ``seconds`` column is
wall-clock).
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import dumps, parse_bool
from .coupling import CouplingSet, generate_couplings
from .toydata import make_task
from .training import TrainConfig, train_stage, write_metrics
from .velocityfield import VelocityField, file_digest

log = logging.getLogger("rectflow")

STAGES = ("fm", "rf1", "couplings_rf1", "rf2", "couplings_rf2", "distill")
CHECKPOINTS = {"fm": "fm.rflow", "rf1": "rf1.rflow", "rf2": "rf2.rflow", "distill": "distill.rflow"}
COUPLINGS = {"couplings_rf1": "couplings_rf1.rfcpl", "couplings_rf2": "couplings_rf2.rfcpl"}
COUPLING_SOURCE = {"couplings_rf1": "rf1", "couplings_rf2": "rf2"}
COUPLING_INPUT = {"rf2": "couplings_rf1", "distill": "couplings_rf2"}
MANIFEST = "manifest.json"


class InputError(ValueError):
    """A stage input (checkpoint or coupling file) is missing or unusable."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} failed: {cause}")


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def variant_tag(cfg: dict) -> str:
    """'reference' unless an ablation switch departs from the default recipe."""
    parts = []
    if not parse_bool(cfg["stage.rf1"].get("immiscible", "true")):
        parts.append("no-immiscible")
    if cfg["stage.rf1"].get("init", "fm") in ("", "none"):
        parts.append("no-init")
    if parse_bool(cfg["stage.rf2"].get("immiscible", "false")):
        parts.append("rf2-immiscible")
    if not parse_bool(cfg["couplings"].get("anchored", "true")):
        parts.append("plain-cfg")
    return "+".join(parts) or "reference"


@dataclass
class Manifest:
    run_id: str
    master_seed: int
    variant: str
    version: str
    configs: dict = field(default_factory=dict)     # config sha -> snapshot text
    entries: list = field(default_factory=list)

    @classmethod
    def create(cls, cfg: dict) -> "Manifest":
        from . import __version__

        text = dumps(cfg)
        seed = int(cfg["run"]["seed"])
        run_id = f"{cfg['run']['task']}-s{seed}-{_sha(text)[:10]}"
        return cls(run_id, seed, variant_tag(cfg), __version__, {_sha(text): text})

    @classmethod
    def load(cls, path) -> "Manifest":
        with open(path) as fh:
            return cls(**json.load(fh))

    def save(self, path) -> None:
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
        os.replace(tmp, path)

    def append(self, entry: dict, cfg_text: str) -> None:
        self.configs.setdefault(_sha(cfg_text), cfg_text)
        self.entries.append(entry)

    def latest(self, stage: str) -> dict | None:
        for entry in reversed(self.entries):
            if entry["stage"] == stage:
                return entry
        return None

    def artifact_hashes(self) -> dict:
        """``{file name: sha256}`` of every deterministic live artifact."""
        out = {}
        for stage in STAGES:
            entry = self.latest(stage)
            if entry is None:
                continue
            for name, info in entry["artifacts"].items():
                if info["deterministic"]:
                    out[name] = info["sha256"]
        return out

    def digest(self) -> str:
        live = [(s, self.latest(s)["config_sha256"]) for s in STAGES if self.latest(s) is not None]
        payload = {"run_id": self.run_id, "seed": self.master_seed, "variant": self.variant,
                   "version": self.version, "stages": live, "artifacts": self.artifact_hashes()}
        return _sha(json.dumps(payload, sort_keys=True))

    def verify(self, run_dir) -> list[str]:
        """Names of live artifacts that are missing or whose hash differs."""
        bad = []
        for stage in STAGES:
            entry = self.latest(stage)
            if entry is None:
                continue
            for name, info in entry["artifacts"].items():
                path = Path(run_dir) / name
                if not path.exists() or file_digest(path) != info["sha256"]:
                    bad.append(name)
        return bad


def open_manifest(run_dir, cfg: dict) -> Manifest:
    path = Path(run_dir) / MANIFEST
    if path.exists():
        man = Manifest.load(path)
        if man.master_seed != int(cfg["run"]["seed"]):
            raise InputError(f"{path} belongs to seed {man.master_seed}, not {cfg['run']['seed']}")
        return man
    return Manifest.create(cfg)


def _coupling_seed(master: int, stage: str) -> int:
    code = STAGES.index(stage)
    return int(np.random.SeedSequence([master, 7919, code]).generate_state(1)[0])


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise InputError(f"missing {what}: {path}")
    return path


def _write_pairing(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "pair_cost", "random_cost"])
        for r in reports:
            w.writerow([r.iteration, repr(r.pair_cost), repr(r.random_cost)])


def run_stage(stage: str, cfg: dict, run_dir, manifest: Manifest | None = None, resume: bool = False) -> dict:
    """Run one stage inside ``run_dir`` and append its manifest entry."""
    if stage not in STAGES:
        raise InputError(f"unknown stage {stage!r}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = manifest or open_manifest(run_dir, cfg)
    cfg_text = dumps(cfg)
    cfg_sha = _sha(cfg_text)
    if resume:
        entry = manifest.latest(stage)
        if entry is not None and entry["config_sha256"] == cfg_sha and not _stale(entry, run_dir):
            log.info("%s: up to date, skipped", stage)
            return entry
    task = make_task(cfg["run"]["task"])
    seed = int(cfg["run"]["seed"])
    artifacts: dict = {}
    inputs: dict = {}
    start = time.perf_counter()
    if stage in COUPLINGS:
        source = COUPLING_SOURCE[stage]
        src_path = _need(run_dir / CHECKPOINTS[source], f"{source} checkpoint")
        model = VelocityField.load(src_path)
        inputs[CHECKPOINTS[source]] = file_digest(src_path)
        c, a = cfg["couplings"], cfg["anchored"]
        eps = a.get("eps", "")
        try:
            cs = generate_couplings(model, int(c["count"]), steps=int(c["steps"]), omega=float(a["omega"]),
                                    anchored=parse_bool(c["anchored"]), seed=_coupling_seed(seed, stage),
                                    shard_size=int(c["shard_size"]), inner=int(a["inner_iters"]),
                                    eps=float(eps) if eps else None, lr_embed=float(a["lr_embed"]),
                                    method=a.get("method", "line_search"), model_id=inputs[CHECKPOINTS[source]])
        except (RuntimeError, FloatingPointError) as err:
            raise StageError(stage, err) from err
        cs.meta["variant"] = manifest.variant
        out = run_dir / COUPLINGS[stage]
        cs.save(out)
        artifacts[out.name] = {"sha256": file_digest(out), "deterministic": True}
    else:
        tc = TrainConfig.from_sections(cfg, stage)
        init_name = cfg[f"stage.{stage}"].get("init", "")
        init = None
        if init_name not in ("", "none"):
            if init_name not in CHECKPOINTS:
                raise InputError(f"stage.{stage}.init must name a stage checkpoint, got {init_name!r}")
            init_path = _need(run_dir / CHECKPOINTS[init_name], f"{init_name} checkpoint for init")
            init = VelocityField.load(init_path)
            inputs[init_path.name] = file_digest(init_path)
        couplings = None
        if stage in COUPLING_INPUT:
            key = cfg[f"stage.{stage}"].get("couplings", "")
            cpl_path = Path(key) if key else run_dir / COUPLINGS[COUPLING_INPUT[stage]]
            couplings = CouplingSet.load(_need(cpl_path, f"coupling file for {stage}"))
            inputs[cpl_path.name] = file_digest(cpl_path)
        every = max(1, tc.iterations // 20)

        def progress(report):
            if report.iteration % every == 0 or report.iteration == tc.iterations:
                log.info("%s: iter %d loss %.5f ema %.5f", stage, report.iteration, report.loss, report.ema_loss)

        try:
            trained, reports = train_stage(tc, task, init=init, couplings=couplings, callback=progress)
        except (RuntimeError, FloatingPointError) as err:
            raise StageError(stage, err) from err
        trained.meta = {"variant": manifest.variant, "seed": seed, "iterations": tc.iterations,
                        "run_id": manifest.run_id, "task": task.name,
                        **{f"input.{k}": v for k, v in sorted(inputs.items())}}
        out = run_dir / CHECKPOINTS[stage]
        artifacts[out.name] = {"sha256": trained.save(out), "deterministic": True}
        metrics = run_dir / f"metrics_{stage}.csv"
        write_metrics(reports, metrics)
        artifacts[metrics.name] = {"sha256": file_digest(metrics), "deterministic": False}
        if tc.immiscible:
            pairing = run_dir / f"pairing_{stage}.csv"
            _write_pairing(reports, pairing)
            artifacts[pairing.name] = {"sha256": file_digest(pairing), "deterministic": True}
    entry = {"stage": stage, "config_sha256": cfg_sha, "inputs": inputs, "artifacts": artifacts,
             "seconds": round(time.perf_counter() - start, 3)}
    manifest.append(entry, cfg_text)
    manifest.save(run_dir / MANIFEST)
    log.info("%s: done in %.1f s", stage, entry["seconds"])
    return entry


def _stale(entry: dict, run_dir: Path) -> bool:
    for name, info in entry["artifacts"].items():
        path = run_dir / name
        if not path.exists() or file_digest(path) != info["sha256"]:
            return True
    for name, sha in entry.get("inputs", {}).items():
        path = run_dir / name
        if path.exists() and file_digest(path) != sha:
            return True
    return False


def run_pipeline(cfg: dict, run_dir, resume: bool = False, stages=STAGES) -> Manifest:
    """fm -> rf1 -> couplings -> rf2 -> couplings -> distill in ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = open_manifest(run_dir, cfg)
    for stage in stages:
        run_stage(stage, cfg, run_dir, manifest, resume=resume)
    return manifest


def pairing_win_rate(path) -> float:
    """Fraction of logged batches whose assigned cost beat the drawn pairing."""
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    wins = [float(r["pair_cost"]) < float(r["random_cost"]) for r in rows
            if not math.isnan(float(r["pair_cost"]))]
    if not wins:
        raise ValueError(f"{path}: no assigned batches logged")
    return sum(wins) / len(wins)
