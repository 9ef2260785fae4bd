"""Command line driver.

Subcommands: ``verify`` (exact finite-MDP property suite), ``gen-dataset``
(scripted point-mass data collection), ``train`` (full training run),
``eval`` (checkpoint evaluation), ``ablate`` (variant comparison sweep),
``miw-dump`` (per-transition importance weights as CSV).

Exit codes: 0 on success, 1 when a check fails, 2 on usage errors (unknown
flags, bad values, missing inputs).  Every file-producing run writes a
manifest (flags + config + seed + build hash + output digests) beside its
outputs, sufficient to reproduce the artifacts exactly.

Heavy imports happen inside the command handlers so that the AMPL_THREADS
cap is exported before numpy first loads its threading backend.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

EXIT_PASS = 0
EXIT_CHECK_FAILURE = 1
EXIT_USAGE = 2

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


class UsageError(Exception):
    """Bad invocation (missing files, malformed values): exit code 2."""


def _cap_threads() -> None:
    """Export AMPL_THREADS to the BLAS/OpenMP level before numpy loads."""
    raw = os.environ.get("AMPL_THREADS", "").strip()
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"AMPL_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"AMPL_THREADS must be >= 1, got {n}")
    for var in _THREAD_ENV_VARS:
        os.environ.setdefault(var, str(n))


def build_parser() -> argparse.ArgumentParser:
    from .orchestrator import VARIANTS
    from .pointmass import QUALITIES

    parser = argparse.ArgumentParser(
        prog="ampl",
        description="Offline model-based RL with marginal importance weighting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the exact finite-MDP property suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-mdps", type=int, default=None,
                   help="override the per-check instance counts")
    p.add_argument("--tolerance-overrides", default="",
                   help="comma-separated check=tolerance pairs")

    p = sub.add_parser("gen-dataset", help="collect an offline point-mass dataset")
    p.add_argument("--quality", required=True, choices=QUALITIES)
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output path prefix")

    p = sub.add_parser("train", help="run a full training configuration")
    p.add_argument("--config", default=None, help="config JSON (defaults otherwise)")
    p.add_argument("--dataset", required=True, help="dataset path prefix")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variant", default=None, choices=VARIANTS)
    p.add_argument("--desk-scale", action="store_true",
                   help="use the small CPU profile as the config base")

    p = sub.add_parser("eval", help="evaluate an agent checkpoint")
    p.add_argument("--checkpoint", required=True, help="agent checkpoint directory")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional output directory")

    p = sub.add_parser("ablate", help="train several variants and compare finals")
    p.add_argument("--dataset", required=True, help="dataset path prefix")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variants", default="main,nw",
                   help="comma-separated variant names")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--config", default=None, help="config JSON shared by all runs")
    p.add_argument("--desk-scale", action="store_true")

    p = sub.add_parser("miw-dump", help="dump per-transition importance weights")
    p.add_argument("--checkpoint", required=True, help="weight-net checkpoint directory")
    p.add_argument("--dataset", required=True, help="dataset path prefix")
    p.add_argument("--out", required=True, help="output CSV path")

    return parser


# ---------------------------------------------------------------------------
# shared plumbing


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(path: Path, command: str, flags: dict, config: dict, seed,
              outputs: list, extra: dict | None = None) -> None:
    from . import util

    digests = {p.name: _sha256(p) for p in map(Path, outputs) if p.is_file()}
    payload = {"command": command, "flags": flags, "outputs": digests}
    if extra:
        payload.update(extra)
    util.write_manifest(path, config=config, seed=seed, extra=payload)


def _load_dataset(prefix: str):
    from .dataset import OfflineDataset

    if not Path(prefix).with_suffix(".jsonl").is_file():
        raise UsageError(f"missing dataset: {Path(prefix).with_suffix('.jsonl')}")
    return OfflineDataset.load(prefix)


def _build_config(config_path, desk_scale: bool, variant):
    import dataclasses

    from .orchestrator import RunConfig

    if config_path is not None and not Path(config_path).is_file():
        raise UsageError(f"missing config: {config_path}")
    try:
        if desk_scale:
            raw = {}
            if config_path is not None:
                with open(config_path) as fh:
                    raw = json.load(fh)
                known = {f.name for f in dataclasses.fields(RunConfig)}
                unknown = sorted(set(raw) - known)
                if unknown:
                    raise ValueError("invalid config:\n  "
                                     + "\n  ".join(f"{u}: unknown field" for u in unknown))
            cfg = RunConfig.desk(**raw)
        elif config_path is not None:
            cfg = RunConfig.from_json(config_path)
        else:
            cfg = RunConfig()
    except (ValueError, json.JSONDecodeError) as exc:
        raise UsageError(str(exc)) from None
    if variant is not None:
        cfg = dataclasses.replace(cfg, variant=variant)
    return cfg


def _train_one(cfg, data, out_dir: Path):
    """Run one configuration and write checkpoint + metrics; returns the result."""
    from . import agent as agent_mod
    from . import miw as miw_mod
    from . import orchestrator, pointmass

    is_pointmass = data.meta.get("quality") in pointmass.QUALITIES
    evaluate = pointmass.evaluate_policy if is_pointmass else None
    termination = pointmass.termination_fn if is_pointmass else None
    result = orchestrator.run_ampl(cfg, data, evaluate=evaluate,
                                   termination_fn=termination)
    out_dir.mkdir(parents=True, exist_ok=True)
    agent_mod.save_agent(out_dir / "agent", result.agent)
    result.model.save(out_dir / "model")
    if result.miw_estimator is not None:
        miw_mod.save_estimator(out_dir / "miw", result.miw_estimator)
    orchestrator.metrics_to_csv(result.metrics, str(out_dir / "metrics.csv"))
    cfg.to_json(str(out_dir / "config.json"))
    return result


# ---------------------------------------------------------------------------
# subcommands


def cmd_verify(args) -> int:
    from . import verify as verify_mod

    overrides = {}
    for piece in filter(None, (s.strip() for s in args.tolerance_overrides.split(","))):
        name, eq, value = piece.partition("=")
        try:
            if not eq:
                raise ValueError
            overrides[name.strip()] = float(value)
        except ValueError:
            raise UsageError(
                f"bad --tolerance-overrides entry {piece!r}; expected check=float") from None
    try:
        results = verify_mod.run_suite(seed=args.seed, num_mdps=args.num_mdps,
                                       tolerance_overrides=overrides)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    print(verify_mod.format_report(results))
    failing = [r for r in results if not r.passed]
    if not failing:
        return EXIT_PASS
    out = Path("verify-violation.json")
    out.write_text(json.dumps({r.name: r.witness for r in failing}, indent=2) + "\n")
    flags = {"seed": args.seed, "num_mdps": args.num_mdps,
             "tolerance_overrides": args.tolerance_overrides}
    _manifest(out.with_name("verify-violation.manifest.json"), "verify", flags,
              config=flags, seed=args.seed, outputs=[out])
    print(f"{len(failing)} check(s) failed; violating instances written to {out}",
          file=sys.stderr)
    return EXIT_CHECK_FAILURE


def cmd_gen_dataset(args) -> int:
    from . import pointmass

    if args.episodes < 1:
        raise UsageError(f"--episodes must be >= 1, got {args.episodes}")
    prefix = Path(args.out)
    dataset = pointmass.collect_dataset(args.quality, args.episodes, args.seed)
    try:
        prefix.parent.mkdir(parents=True, exist_ok=True)
        dataset.save(prefix)
    except OSError as exc:
        raise UsageError(f"cannot write dataset at {prefix}: {exc}") from None
    outputs = [prefix.with_suffix(s) for s in (".jsonl", ".meta.json", ".init.json")]
    flags = {"quality": args.quality, "episodes": args.episodes,
             "seed": args.seed, "out": args.out}
    _manifest(prefix.with_suffix(".manifest.json"), "gen-dataset", flags,
              config=flags, seed=args.seed, outputs=outputs)
    mean = sum(dataset.meta["episode_returns"]) / len(dataset.meta["episode_returns"])
    print(f"wrote {dataset.size} transitions ({args.episodes} episodes, "
          f"mean return {mean:.3f}) to {prefix}.jsonl")
    return EXIT_PASS


def cmd_train(args) -> int:
    cfg = _build_config(args.config, args.desk_scale, args.variant)
    data = _load_dataset(args.dataset)
    out_dir = Path(args.out)
    result = _train_one(cfg, data, out_dir)
    import dataclasses

    flags = {"config": args.config, "dataset": args.dataset, "out": args.out,
             "variant": args.variant, "desk_scale": args.desk_scale}
    outputs = [out_dir / "metrics.csv", out_dir / "config.json"]
    _manifest(out_dir / "manifest.json", "train", flags,
              config=dataclasses.asdict(cfg), seed=cfg.seed, outputs=outputs,
              extra={"variant": cfg.variant, "schedule_audit": result.audit,
                     "dataset_mean_return": result.dataset_mean_return})
    final = result.metrics[-1]
    print(f"variant {cfg.variant}: final mean return {final['mean_return']:.3f} "
          f"(dataset mean {result.dataset_mean_return:.3f}); outputs in {out_dir}")
    return EXIT_PASS


def cmd_eval(args) -> int:
    from . import agent as agent_mod
    from . import pointmass

    if not (Path(args.checkpoint) / "agent.json").is_file():
        raise UsageError(f"missing agent checkpoint: {args.checkpoint}")
    if args.episodes < 1:
        raise UsageError(f"--episodes must be >= 1, got {args.episodes}")
    agent = agent_mod.load_agent(args.checkpoint)
    if agent.state_dim != pointmass.STATE_DIM or agent.action_dim != pointmass.ACTION_DIM:
        raise UsageError(
            f"checkpoint dims ({agent.state_dim}, {agent.action_dim}) do not match "
            f"the point-mass environment ({pointmass.STATE_DIM}, {pointmass.ACTION_DIM})")
    mean, std = pointmass.evaluate_policy(agent_mod.make_policy(agent),
                                          args.episodes, args.seed)
    print(f"mean return {mean:.4f} +- {std:.4f} over {args.episodes} episodes (seed {args.seed})")
    if args.out is not None:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        report = out_dir / "eval.json"
        report.write_text(json.dumps({"mean_return": mean, "std_return": std,
                                      "episodes": args.episodes, "seed": args.seed},
                                     indent=2) + "\n")
        flags = {"checkpoint": args.checkpoint, "episodes": args.episodes,
                 "seed": args.seed, "out": args.out}
        _manifest(out_dir / "manifest.json", "eval", flags, config=flags,
                  seed=args.seed, outputs=[report])
    return EXIT_PASS


def cmd_ablate(args) -> int:
    import csv
    import dataclasses

    from .orchestrator import VARIANTS

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise UsageError("--variants is empty")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants: {', '.join(unknown)}")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")

    data = _load_dataset(args.dataset)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in variants:
        for seed in seeds:
            cfg = _build_config(args.config, args.desk_scale, variant)
            cfg = dataclasses.replace(cfg, seed=seed)
            result = _train_one(cfg, data, out_dir / f"{variant}-seed{seed}")
            final = result.metrics[-1]["mean_return"]
            rows.append({"variant": variant, "seed": seed,
                         "final_mean_return": final,
                         "dataset_mean_return": result.dataset_mean_return})
            print(f"{variant} seed {seed}: final mean return {final:.3f}")

    summary = out_dir / "summary.csv"
    with open(summary, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    flags = {"dataset": args.dataset, "out": args.out, "variants": args.variants,
             "seeds": args.seeds, "config": args.config, "desk_scale": args.desk_scale}
    _manifest(out_dir / "manifest.json", "ablate", flags, config=flags,
              seed=seeds, outputs=[summary])
    for variant in variants:
        finals = [r["final_mean_return"] for r in rows if r["variant"] == variant]
        print(f"{variant}: mean final return {sum(finals) / len(finals):.3f} "
              f"over {len(finals)} seed(s)")
    return EXIT_PASS


def cmd_miw_dump(args) -> int:
    import csv

    import numpy as np

    from . import miw as miw_mod

    if not (Path(args.checkpoint) / "miw.json").is_file():
        raise UsageError(f"missing weight-net checkpoint: {args.checkpoint}")
    estimator = miw_mod.load_estimator(args.checkpoint)
    data = _load_dataset(args.dataset)
    if (estimator.state_dim, estimator.action_dim) != (data.state_dim, data.action_dim):
        raise UsageError(
            f"checkpoint dims ({estimator.state_dim}, {estimator.action_dim}) do not "
            f"match dataset dims ({data.state_dim}, {data.action_dim})")

    raw = miw_mod.raw_weights(estimator, data).astype(np.float64)
    normalized = raw / raw.mean()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["transition", "raw_omega", "normalized_omega",
                         "log_normalized_omega"])
        for i in range(len(raw)):
            writer.writerow([i, repr(float(raw[i])), repr(float(normalized[i])),
                             repr(float(np.log(normalized[i])))])
    flags = {"checkpoint": args.checkpoint, "dataset": args.dataset, "out": args.out}
    _manifest(out.with_suffix(".manifest.json"), "miw-dump", flags, config=flags,
              seed=None, outputs=[out])
    print(f"wrote {len(raw)} weight rows to {out} "
          f"(normalized mean {normalized.mean():.12f})")
    return EXIT_PASS


_HANDLERS = {
    "verify": cmd_verify,
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "miw-dump": cmd_miw_dump,
}


def main(argv=None) -> int:
    try:
        _cap_threads()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
