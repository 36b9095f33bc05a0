"""Command-line entry points.

Subcommands: ``run`` (train a sequence from a JSON config), ``eval-fgsm``
(adversarial accuracy sweep from a checkpoint), ``flatness`` (worst-case
value or random landscape slices), ``export-features`` (2-D hypersphere
feature table), and ``gpm-inspect`` (memory summary). Human-readable
messages go to stderr; machine output goes only to files. Exit codes:
0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import evalsuite as E
from . import gpm as G
from . import harness as H
from . import trainer as TR
from .errors import ConfigError, RobustCLError


def _log(*parts) -> None:
    print(*parts, file=sys.stderr)


def _apply_overrides(cfg: H.ExperimentConfig, args) -> H.ExperimentConfig:
    train = cfg.train
    if args.seed is not None:
        train = dataclasses.replace(train, seed=args.seed)
    if args.method is not None:
        train = dataclasses.replace(train, method=args.method)
    if args.ablate is not None:
        flags = {"ua": "disable_ua", "phi": "disable_phi",
                 "ua-grad-only": "ua_in_gradient_only"}
        ablations = dataclasses.replace(TR.Ablations(), **{flags[args.ablate]: True})
        train = dataclasses.replace(train, ablations=ablations)
    cfg = dataclasses.replace(cfg, train=train)
    if args.out_dir is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out_dir)
    return cfg


def _single_run(cfg: H.ExperimentConfig) -> str:
    record, net, memory = H.run_experiment(cfg)
    out_dir = cfg.out_dir or os.path.join("runs", f"{cfg.train.method}-seed{cfg.train.seed}")
    H.persist_run(record, out_dir, net=net,
                  memory=memory if cfg.train.method in ("gpm", "rcl") else None)
    _log(f"run finished: method={record.method} seed={record.seed} "
         f"ACC={record.acc:.2f} BWT={record.bwt if record.bwt is None else round(record.bwt, 2)} "
         f"-> {out_dir}")
    return out_dir


def _seed_worker(payload: str) -> str:
    cfg = H.ExperimentConfig.from_dict(json.loads(payload))
    return _single_run(cfg)


def cmd_run(args) -> int:
    cfg = _apply_overrides(H.load_config(args.config), args)
    if args.seeds is not None:
        try:
            first, last = (int(v) for v in args.seeds.split(".."))
        except ValueError as exc:
            raise ConfigError(f"--seeds expects a..b, got {args.seeds!r}") from exc
        payloads = []
        for seed in range(first, last + 1):
            sub = dataclasses.replace(
                cfg, train=dataclasses.replace(cfg.train, seed=seed),
                out_dir=os.path.join(cfg.out_dir or "runs", f"seed{seed}"))
            sub.validate()
            payloads.append(json.dumps(sub.to_dict()))
        with ProcessPoolExecutor(max_workers=min(4, len(payloads))) as pool:
            for out_dir in pool.map(_seed_worker, payloads):
                _log(f"seed fan-out wrote {out_dir}")
        return 0
    _single_run(cfg)
    return 0


def cmd_eval_fgsm(args) -> int:
    net, cfg, doc = H.load_checkpoint(args.checkpoint)
    mus = [float(v) for v in args.mu_list.split(",")]
    if any(mu < 0 for mu in mus):
        raise ConfigError(f"mu values must be nonnegative: {args.mu_list}")
    stream = H.gen_stream(cfg, cfg.train.seed)
    rows = E.fgsm_sweep(net, stream, mus, method=doc.get("method", cfg.train.method))
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "adv_eval.csv")
    E.write_adv_eval(path, rows)
    _log(f"wrote {path} ({len(rows)} rows)")
    return 0


def cmd_flatness(args) -> int:
    net, cfg, _ = H.load_checkpoint(args.checkpoint)
    stream = H.gen_stream(cfg, cfg.train.seed)
    if args.task >= len(stream):
        raise ConfigError(f"--task {args.task} out of range for {len(stream)} tasks")
    task = stream[args.task]
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    if args.mode == "worst":
        result = E.worst_case_flatness(net, task, xi=args.xi)
        path = os.path.join(out_dir, "flatness.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"xi": args.xi, "task": args.task, "value": result.value,
                       "degenerate": result.degenerate,
                       "skipped_layers": result.skipped_layers}, fh, sort_keys=True)
            fh.write("\n")
    else:
        probe = E.FlatnessProbe(xi=args.xi, mode="random_slice",
                                directions=args.directions)
        rows = E.landscape_slice(net, task, probe, seed=args.probe_seed)
        path = os.path.join(out_dir, "landscape.csv")
        E.write_landscape(path, rows)
    _log(f"wrote {path}")
    return 0


def cmd_export_features(args) -> int:
    net, cfg, _ = H.load_checkpoint(args.checkpoint)
    stream = H.gen_stream(cfg, cfg.train.seed)
    all_rows = []
    meta = None
    rng = np.random.default_rng(args.sample_seed)
    for task in stream:
        x, y = task.test
        take = min(args.per_task, x.shape[0])
        chosen = rng.permutation(x.shape[0])[:take]
        rows, meta = E.export_features(net, x[chosen], y[chosen], task.task_id,
                                       mode=args.mode, seed=args.projection_seed)
        all_rows.extend(rows)
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "features.csv")
    E.write_features(path, all_rows)
    meta_path = os.path.join(out_dir, "features_meta.json")
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")
    _log(f"wrote {path} ({len(all_rows)} rows) and {meta_path}")
    return 0


def cmd_gpm_inspect(args) -> int:
    try:
        memory = G.load_memory(args.memory)
    except FileNotFoundError as exc:
        raise ConfigError(f"memory file not found: {args.memory}") from exc
    _log(f"eps_th: {memory.eps_th}")
    _log(f"layers: {len(memory.bases)}")
    for name in sorted(memory.bases):
        basis = memory.bases[name]
        gram = basis.T @ basis
        defect = float(np.abs(gram - np.eye(gram.shape[0])).max()) if basis.size else 0.0
        _log(f"  {name}: dim {basis.shape[0]} width {basis.shape[1]} "
             f"orthonormality defect {defect:.2e}")
    for entry in memory.history:
        _log(f"  task {entry['task']}: ranks {entry['ranks']}")
    if args.out is not None:
        doc = {"eps_th": memory.eps_th,
               "layers": {name: {"dim": b.shape[0], "width": b.shape[1]}
                          for name, b in sorted(memory.bases.items())},
               "history": memory.history}
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True)
            fh.write("\n")
        _log(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustcl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train a task sequence from a JSON config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--method", choices=list(TR.METHODS))
    p_run.add_argument("--out-dir")
    p_run.add_argument("--ablate", choices=["ua", "phi", "ua-grad-only"])
    p_run.add_argument("--seeds", help="fan out over an inclusive seed range a..b")
    p_run.set_defaults(fn=cmd_run)

    p_fgsm = sub.add_parser("eval-fgsm", help="adversarial accuracy sweep")
    p_fgsm.add_argument("--checkpoint", required=True)
    p_fgsm.add_argument("--mu-list", default="0,1e-4,1e-3,1e-2")
    p_fgsm.add_argument("--out-dir")
    p_fgsm.set_defaults(fn=cmd_eval_fgsm)

    p_flat = sub.add_parser("flatness", help="worst-case flatness or landscape slices")
    p_flat.add_argument("--checkpoint", required=True)
    p_flat.add_argument("--xi", type=float, default=0.05)
    p_flat.add_argument("--mode", choices=["worst", "slice"], default="worst")
    p_flat.add_argument("--task", type=int, default=0)
    p_flat.add_argument("--directions", type=int, default=10)
    p_flat.add_argument("--probe-seed", type=int, default=0)
    p_flat.add_argument("--out-dir")
    p_flat.set_defaults(fn=cmd_flatness)

    p_feat = sub.add_parser("export-features", help="unit-circle feature table")
    p_feat.add_argument("--checkpoint", required=True)
    p_feat.add_argument("--per-task", type=int, default=200)
    p_feat.add_argument("--mode", choices=["random", "probe"], default="random")
    p_feat.add_argument("--projection-seed", type=int, default=0)
    p_feat.add_argument("--sample-seed", type=int, default=0)
    p_feat.add_argument("--out-dir")
    p_feat.set_defaults(fn=cmd_export_features)

    p_gpm = sub.add_parser("gpm-inspect", help="summarize a memory export")
    p_gpm.add_argument("--memory", required=True)
    p_gpm.add_argument("--out")
    p_gpm.set_defaults(fn=cmd_gpm_inspect)
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors; fold the latter
        # into the configuration-error code
        return 0 if exc.code == 0 else 1
    try:
        return args.fn(args)
    except ConfigError as exc:
        _log(f"configuration error: {exc}")
        return 1
    except RobustCLError as exc:
        _log(f"runtime error: {exc}")
        return 2
    except OSError as exc:
        _log(f"runtime error: {exc}")
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
