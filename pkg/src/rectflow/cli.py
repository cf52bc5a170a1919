"""``rflow`` command line.

Exit codes: 0 success, 1 runtime failure (stage named on stderr),
2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config, parse_list
from .coupling import COUPLING_MAGIC, CouplingSet
from .evalharness import EvalReport, cfg_sweep, few_step_sweep, straightness_eval
from .pipeline import CHECKPOINTS, MANIFEST, InputError, Manifest, StageError, run_pipeline, run_stage
from .solver import DivergenceError, euler_simulate, straightness_report, write_trajectory_csv
from .tensornet import CHECKPOINT_MAGIC, FormatError, configure_threads
from .toydata import make_task, sample_noise
from .velocityfield import GuidanceSpec, VelocityField, file_digest

USAGE, RUNTIME = 2, 1


class UsageError(Exception):
    pass


def _config(args, stage: str | None = None):
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "iters", None) is not None:
        targets = [stage] if stage in CHECKPOINTS else list(CHECKPOINTS)
        overrides += [f"stage.{s}.iterations={args.iters}" for s in targets]
    return load_config(args.config, overrides)


def _run_dir(args, cfg) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    return Path("runs") / f"{cfg['run']['task']}-s{cfg['run']['seed']}"


def cmd_train(args) -> int:
    stage = args.stage
    cfg = _config(args, stage)
    run_dir = _run_dir(args, cfg)
    if stage == "pipeline":
        man = run_pipeline(cfg, run_dir, resume=args.resume)
    else:
        if stage == "couplings":
            stage = f"couplings_{args.source}"
        run_stage(stage, cfg, run_dir, resume=args.resume)
        man = Manifest.load(run_dir / MANIFEST)
    print(f"run_dir={run_dir}")
    print(f"manifest={man.digest()}")
    return 0


def _load_checkpoint(path) -> VelocityField:
    try:
        return VelocityField.load(path)
    except OSError as err:
        raise UsageError(f"cannot read checkpoint {path}: {err}") from err


def cmd_sample(args) -> int:
    field = _load_checkpoint(args.checkpoint)
    steps = args.steps
    if field.stage == "distilled":
        if steps != 1:
            print(f"warning: distilled checkpoint samples in one step; ignoring --steps {steps}", file=sys.stderr)
            steps = 1
        if args.omega != 1.0:
            raise UsageError("distilled checkpoints carry guidance in their weights; use --omega 1")
    if args.n < 0 or steps < 1:
        raise UsageError("--n must be >= 0 and --steps >= 1")
    rng = np.random.default_rng(args.seed)
    labels = rng.integers(0, field.num_conditions, args.n) if args.label is None else np.full(args.n, args.label)
    if args.label is not None and not 0 <= args.label < field.num_conditions:
        raise UsageError(f"--label must lie in [0, {field.num_conditions})")
    z0 = sample_noise(rng, args.n, field.dim)
    if args.n == 0:
        z1 = z0
    elif args.anchored and args.omega > 1.0:
        from .anchored import anchored_generate

        z1 = anchored_generate(field, z0, labels, steps, args.omega).z1
    else:
        guidance = GuidanceSpec(args.omega) if args.omega != 1.0 else None
        z1 = euler_simulate(field, z0, labels, steps, guidance=guidance, record=False)
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"z{i}" for i in range(field.dim)])
        for lab, z in zip(labels, z1):
            w.writerow([int(lab)] + [repr(float(v)) for v in z])
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    field = _load_checkpoint(args.checkpoint)
    task = make_task(field.meta.get("task", cfg["run"]["task"]))
    ev = cfg["eval"]
    n, reps, seed = int(ev["samples"]), int(ev["repetitions"]), int(ev["seed"])
    digest = file_digest(args.checkpoint)
    report = EvalReport(model_id=digest, stage=field.stage, seed=seed, samples=n, repetitions=reps)
    kinds = ("few_step", "cfg") if args.kind == "all" else (args.kind,)
    if "few_step" in kinds:
        steps_list = [1] if field.stage == "distilled" else parse_list(ev["steps_list"], int)
        few_step_sweep(field, task, steps_list, n, reps, seed, report=report)
    if "cfg" in kinds:
        a = cfg["anchored"]
        eps = a.get("eps", "")
        kwargs = {"inner": int(a["inner_iters"]), "eps": float(eps) if eps else None,
                  "lr_embed": float(a["lr_embed"]), "method": a.get("method", "line_search")}
        cfg_sweep(field, task, parse_list(ev["omega_list"]), int(cfg["couplings"]["steps"]), n, reps, seed,
                  report=report, anchor_kwargs=kwargs)
    report.straightness = straightness_eval(field, task, n=n, steps=int(cfg["couplings"]["steps"]), seed=seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = out_dir / f"eval_{field.stage}_{digest[:12]}"
    report.to_json(stem.with_suffix(".json"))
    report.to_csv(stem.with_suffix(".csv"))
    for kind in kinds:
        for (T, omega, anchored), s in report.summary(kind).items():
            print(f"{kind} T={T} omega={omega} anchored={int(anchored)} w2={s['mean']:.5f} +- {s['stderr']:.5f}")
    print(f"wrote {stem}.json and {stem}.csv")
    return 0


def cmd_straightness(args) -> int:
    field = _load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    labels = rng.integers(0, field.num_conditions, args.n)
    traj = euler_simulate(field, sample_noise(rng, args.n, field.dim), labels, args.steps)
    rep = straightness_report(traj)
    if args.trajectories:
        pattern = args.trajectories
        if "{i}" not in pattern:
            stem, dot, ext = pattern.rpartition(".")
            pattern = f"{stem}_{{i}}.{ext}" if dot else pattern + "_{i}"
        for i in range(min(args.n, args.keep)):
            write_trajectory_csv(traj, pattern.format(i=i), index=i)
    print(json.dumps(rep.as_dict(), sort_keys=True))
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise UsageError(f"no such file: {path}")
    if path.name == MANIFEST or path.suffix == ".json":
        man = Manifest.load(path)
        print(f"run_id={man.run_id}\nseed={man.master_seed}\nvariant={man.variant}\nversion={man.version}")
        for name, sha in man.artifact_hashes().items():
            print(f"artifact {name} {sha}")
        bad = man.verify(path.parent)
        print(f"digest={man.digest()}\nverified={'yes' if not bad else 'no: ' + ','.join(bad)}")
        return 0
    with open(path, "rb") as fh:
        magic = fh.read(5)
    if magic == CHECKPOINT_MAGIC:
        field = VelocityField.load(path)
        print(f"kind=checkpoint\nstage={field.stage}\nwidths={','.join(map(str, field.net.widths))}")
        print(f"activation={field.net.activation}\nparameters={sum(p.data.size for p in field.parameters())}")
        for k, v in sorted(field.meta.items()):
            print(f"meta.{k}={v}")
    elif magic == COUPLING_MAGIC:
        cs = CouplingSet.load(path)
        print(f"kind=couplings\ncount={len(cs)}\ndim={cs.dim}\nconditions={cs.num_conditions}")
        for k, v in sorted(cs.meta.items()):
            print(f"meta.{k}={v}")
    else:
        raise UsageError(f"{path}: unrecognised file type")
    print(f"sha256={file_digest(path)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rflow", description="Rectified-flow toolkit on 2-D toy data.")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="key=value config file with [section] headers")
        sp.add_argument("--seed", type=int, help="master seed (run.seed)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")

    t = sub.add_parser("train", help="run one stage or the whole pipeline")
    t.add_argument("stage", choices=["fm", "rf1", "couplings", "rf2", "distill", "pipeline"])
    config_args(t)
    t.add_argument("--iters", type=int, help="iterations for the stage (every stage for pipeline)")
    t.add_argument("--run-dir", help="artifact directory (default runs/<task>-s<seed>)")
    t.add_argument("--source", choices=["rf1", "rf2"], default="rf1", help="model for 'couplings'")
    t.add_argument("--resume", action="store_true", help="skip stages whose artifacts are current")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="write samples as CSV")
    s.add_argument("checkpoint")
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--omega", type=float, default=1.0)
    s.add_argument("--anchored", action="store_true")
    s.add_argument("--n", type=int, default=512)
    s.add_argument("--label", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="few-step and guidance sweeps")
    e.add_argument("checkpoint")
    config_args(e)
    e.add_argument("--kind", choices=["few_step", "cfg", "all"], default="few_step")
    e.add_argument("--out-dir", default=".")
    e.set_defaults(func=cmd_eval)

    st = sub.add_parser("straightness", help="mean straightness of simulated trajectories")
    st.add_argument("checkpoint")
    st.add_argument("--n", type=int, default=512)
    st.add_argument("--steps", type=int, default=100)
    st.add_argument("--seed", type=int, default=1000)
    st.add_argument("--trajectories", metavar="PATTERN",
                    help="also write one CSV per trajectory; '{i}' in the pattern is the index")
    st.add_argument("--keep", type=int, default=16, help="number of trajectories written")
    st.set_defaults(func=cmd_straightness)

    i = sub.add_parser("inspect", help="print checkpoint, coupling or manifest metadata")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logger = logging.getLogger("rectflow")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger.handlers[:] = [handler]
    logger.setLevel(logging.INFO if args.verbose else logging.WARNING)
    logger.propagate = False
    try:
        limits = configure_threads()
    except ValueError:
        print("rflow: RFLOW_THREADS must be an integer", file=sys.stderr)
        return USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError, InputError, FormatError) as err:
        print(f"rflow: {err}", file=sys.stderr)
        return USAGE
    except StageError as err:
        print(f"rflow: stage {err.stage} failed: {err.cause}", file=sys.stderr)
        return RUNTIME
    except (DivergenceError, RuntimeError, FloatingPointError) as err:
        print(f"rflow: {args.command} failed: {err}", file=sys.stderr)
        return RUNTIME
    finally:
        if limits is not None:
            limits.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
