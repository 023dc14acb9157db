"""``dtcseg`` command line: data generation, training, evaluation, ablation, label sweeps, self-test.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 self-test failure.
Outputs go under ``--out`` or, when that is omitted, under ``$DTCSEG_OUTPUT_DIR``
(default ``./runs``).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import metrics as M
from . import selftest
from .nn import CheckpointError, DualTaskNet, NetConfig
from .trainer import TrainConfig, TrainingError, train

ENV_OUTPUT = "DTCSEG_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3
ABLATION_MODES = ("seg", "lsf", "seg+lsf", "seg+lsf+dtc")
MODE_LABELS = {"seg": "Seg", "lsf": "LSF", "seg+lsf": "Seg+LSF", "seg+lsf+dtc": "Seg+LSF+DTC"}
SWEEP_METHODS = ("seg", "seg+lsf+dtc")
SWEEP_HEADER = "fraction,method,dice_mean,dice_std"


class UsageError(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    # "auto" picks the level-set head for runs trained in mode lsf
    source: str = "auto"

    def __post_init__(self):
        if self.source not in ("auto", "seg", "lsf"):
            raise ValueError(f"eval.source must be auto, seg or lsf, got {self.source!r}")


SECTIONS = {"gen": D.GenConfig, "net": NetConfig, "train": TrainConfig, "eval": EvalConfig}


# config plumbing --------------------------------------------------------------


def parse_overrides(items: list[str], sections: tuple[str, ...]) -> dict[str, dict]:
    """``["train.lr0=0.02", ...]`` -> ``{"train": {"lr0": 0.02}}``; unknown keys raise UsageError."""
    out: dict[str, dict] = {s: {} for s in sections}
    for item in items:
        key, sep, raw = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        if section not in sections:
            raise UsageError(f"unknown config section {section!r} (allowed here: {', '.join(sections)})")
        defaults = {f.name: f.default for f in dataclasses.fields(SECTIONS[section])}
        if name not in defaults:
            raise UsageError(f"unknown config key {section}.{name}; known: {', '.join(sorted(defaults))}")
        out[section][name] = _coerce(f"{section}.{name}", raw.strip(), defaults[name])
    return out


def _coerce(key: str, raw: str, default):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise UsageError(f"{key} expects true/false, got {raw!r}")
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if default is None and (value is None or isinstance(value, int)):
        return value
    if type(value) is not type(default):
        raise UsageError(f"{key} expects {type(default).__name__}, got {raw!r}")
    return value


def _build(cls, base: dict, overrides: dict):
    try:
        return cls(**{**base, **overrides})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def output_root() -> Path:
    return Path(os.environ.get(ENV_OUTPUT, "runs"))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--seeds expects comma-separated integers, got {text!r}") from exc
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


def _parse_fractions(text: str) -> list[float]:
    try:
        fracs = [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--fractions expects comma-separated numbers, got {text!r}") from exc
    if not fracs or any(not 0 < f <= 1 for f in fracs):
        raise UsageError("--fractions must be non-empty values in (0, 1]")
    return fracs


# single training run ----------------------------------------------------------


def run_manifest(data_path, data_sha, fraction, seed, net_cfg: NetConfig, train_cfg: TrainConfig) -> dict:
    return {
        "command": "train",
        "version": __version__,
        "data": str(data_path),
        "data_sha256": data_sha,
        "labeled_fraction": fraction,
        "split_seed": seed,
        "net": dataclasses.asdict(net_cfg),
        "train": dataclasses.asdict(train_cfg),
    }


def execute_run(manifest: dict, out_dir: Path, base: D.Dataset | None = None, echo=print) -> dict:
    """Run one training job described by ``manifest`` and write its artifacts to ``out_dir``."""
    if base is None:
        if _sha256(manifest["data"]) != manifest["data_sha256"]:
            raise UsageError(f"dataset {manifest['data']} does not match the manifest checksum")
        base = D.load(manifest["data"])
    net_cfg = NetConfig(**manifest["net"])
    train_cfg = TrainConfig(**manifest["train"])
    ds = D.split(base, manifest["labeled_fraction"], manifest["split_seed"])
    if train_cfg.mode != "seg":
        D.precompute_lsf(ds)
    counts = {"labeled": len(ds.labeled_ids), "unlabeled": len(ds.unlabeled_ids), "test": len(ds.test_ids)}
    uses_unlabeled = train_cfg.uses_dtc and train_cfg.use_unlabeled
    echo(
        f"# mode={train_cfg.mode} labeled={counts['labeled']} unlabeled={counts['unlabeled']}"
        f" ({'used' if uses_unlabeled else 'ignored'}) test={counts['test']} iterations={train_cfg.t_max + 1}"
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "manifest.json", manifest)
    start = time.perf_counter()
    net, history, _ = train(ds, net_cfg, train_cfg, out_dir=out_dir)
    seconds = time.perf_counter() - start
    return {
        "net": net,
        "dataset": ds,
        "seconds": seconds,
        "counts": counts,
        "unlabeled_used": counts["unlabeled"] if uses_unlabeled else 0,
        "last": history[-1],
    }


def _source_for(mode: str, eval_cfg: EvalConfig) -> str:
    if eval_cfg.source != "auto":
        return eval_cfg.source
    return "lsf" if mode == "lsf" else "seg"


# subcommands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    over = parse_overrides(args.set, ("gen",))["gen"]
    base = {"image_size": args.size, "train_count": args.train, "test_count": args.test, "noise_std": args.noise}
    cfg = _build(D.GenConfig, base, over)
    out = Path(args.out) if args.out else output_root() / "data.dtcd"
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    ds = D.generate(cfg, args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.save(ds, out)
    fg = np.array([ds[i].mask.mean() for i in ds.train_ids + ds.test_ids])
    print(f"wrote {out}")
    print(f"train={len(ds.train_ids)} test={len(ds.test_ids)} size={cfg.image_size}x{cfg.image_size} seed={args.seed}")
    print(f"foreground fraction mean={fg.mean():.4f} min={fg.min():.4f} max={fg.max():.4f}")
    print(f"sha256={_sha256(out)}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text())
        if manifest.get("command") != "train":
            raise UsageError(f"{args.manifest} is not a train manifest")
        out = Path(args.out) if args.out else Path(args.manifest).parent
    else:
        if not args.data:
            raise UsageError("train needs --data (or --manifest)")
        over = parse_overrides(args.set, ("net", "train"))
        net_cfg = _build(NetConfig, {"seed": args.seed}, over["net"])
        tr_base = {"mode": args.mode, "seed": args.seed}
        if args.iters is not None:
            tr_base["t_max"] = args.iters
        train_cfg = _build(TrainConfig, tr_base, over["train"])
        if not 0 < args.labeled_fraction <= 1:
            raise UsageError("--labeled-fraction must be in (0, 1]")
        manifest = run_manifest(args.data, _sha256(args.data), args.labeled_fraction, args.seed, net_cfg, train_cfg)
        tag = f"{train_cfg.mode.replace('+', '-')}_f{args.labeled_fraction:g}_s{args.seed}"
        out = Path(args.out) if args.out else output_root() / "train" / tag
    result = execute_run(manifest, out)
    last = result["last"]
    print(f"done in {result['seconds']:.1f}s; final loss_total={last.loss_total:.6f}")
    print(f"checkpoint: {out / 'checkpoint.dtcn'}")
    return EXIT_OK


def _load_eval_inputs(checkpoint, data_path) -> tuple[DualTaskNet, D.Dataset, dict | None]:
    net = DualTaskNet.load(checkpoint)
    ds = D.load(data_path)
    if not ds.test_ids:
        raise UsageError(f"{data_path} has no test samples")
    h, w = ds[ds.test_ids[0]].image.shape
    unit = 2**net.config.depth
    if net.config.in_channels != 1 or h % unit or w % unit:
        raise CheckpointError(
            f"checkpoint net config (in_channels={net.config.in_channels}, depth={net.config.depth})"
            f" does not fit {h}x{w} single-channel test images"
        )
    manifest_path = Path(checkpoint).parent / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else None
    return net, ds, manifest


def cmd_eval(args) -> int:
    eval_cfg = _build(EvalConfig, {}, parse_overrides(args.set, ("eval",))["eval"])
    net, ds, manifest = _load_eval_inputs(args.checkpoint, args.data)
    mode = manifest["train"]["mode"] if manifest else "seg"
    k = manifest["train"]["k"] if manifest else TrainConfig().k
    report = M.evaluate(net, [ds[i] for i in ds.test_ids], eval_cfg.threshold, _source_for(mode, eval_cfg), k)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    print("| Method | Dice (%) | Jaccard (%) | ASD | 95HD | Degenerate |")
    print("|---|---|---|---|---|---|")
    print(report.markdown_row(MODE_LABELS.get(mode, mode)))
    print(f"metrics: {out / 'metrics.csv'}")
    return EXIT_OK


def _experiment_runs(args, data_path, modes_for, fractions, seeds, out: Path, label: str, train_base=None) -> list[dict]:
    """Train and evaluate every (fraction, mode, seed) combination in a fixed order."""
    over = parse_overrides(args.set, ("net", "train", "eval"))
    eval_cfg = _build(EvalConfig, {}, over["eval"])
    data_sha = _sha256(data_path)
    base = D.load(data_path)
    runs = []
    for fraction in fractions:
        for mode in modes_for:
            for seed in seeds:
                net_cfg = _build(NetConfig, {"seed": seed}, over["net"])
                train_cfg = _build(TrainConfig, {"mode": mode, "seed": seed, **(train_base or {})}, over["train"])
                manifest = run_manifest(data_path, data_sha, fraction, seed, net_cfg, train_cfg)
                run_dir = out / "runs" / f"f{fraction:g}_{mode.replace('+', '-')}_s{seed}"
                result = execute_run(manifest, run_dir, base)
                test = [result["dataset"][i] for i in result["dataset"].test_ids]
                report = M.evaluate(result["net"], test, eval_cfg.threshold, _source_for(mode, eval_cfg), train_cfg.k)
                (run_dir / "metrics.csv").write_text(report.to_csv())
                print(f"{label} fraction={fraction:g} mode={mode} seed={seed} dice={report.mean()['dice']:.2f}", flush=True)
                runs.append(
                    {
                        "fraction": fraction,
                        "mode": mode,
                        "seed": seed,
                        "dir": str(run_dir.relative_to(out)),
                        "report": report,
                        "seconds": result["seconds"],
                        "labeled": result["counts"]["labeled"],
                        "unlabeled": result["unlabeled_used"],
                        "params": result["net"].num_parameters(),
                    }
                )
    return runs


def _aggregate(runs: list[dict]) -> dict[str, tuple[float, float]]:
    means = {k: np.array([r["report"].mean()[k] for r in runs]) for k in ("dice", "jaccard", "asd", "hd95")}
    return {k: (float(v.mean()), float(v.std())) for k, v in means.items()}


def ablation_table(runs: list[dict]) -> tuple[str, str]:
    """(markdown, csv) with one row per mode, metrics as mean ± std over seeds of per-run test means."""
    md = [
        "| Method | Labeled | Unlabeled | Dice (%) | Jaccard (%) | ASD | 95HD | Degenerate | Params (M) | Time (s) |",
        "|---|---|---|---|---|---|---|---|---|---|",
    ]
    csv = ["method,labeled,unlabeled,dice_mean,dice_std,jaccard_mean,jaccard_std,asd_mean,asd_std,hd95_mean,hd95_std,degenerate,params_m"]
    for mode in ABLATION_MODES:
        group = [r for r in runs if r["mode"] == mode]
        if not group:
            continue
        agg = _aggregate(group)
        first = group[0]
        degenerate = sum(r["report"].degenerate_count for r in group)
        params = first["params"] / 1e6
        seconds = np.mean([r["seconds"] for r in group])
        cells = " | ".join(f"{agg[k][0]:.2f} ± {agg[k][1]:.2f}" for k in ("dice", "jaccard", "asd", "hd95"))
        md.append(
            f"| {MODE_LABELS[mode]} | {first['labeled']} | {first['unlabeled']} | {cells} | {degenerate} | {params:.4f} | {seconds:.1f} |"
        )
        nums = ",".join(f"{agg[k][0]:.6f},{agg[k][1]:.6f}" for k in ("dice", "jaccard", "asd", "hd95"))
        csv.append(f"{MODE_LABELS[mode]},{first['labeled']},{first['unlabeled']},{nums},{degenerate},{params:.6f}")
    return "\n".join(md) + "\n", "\n".join(csv) + "\n"


def sweep_rows(runs: list[dict]) -> list[tuple[float, str, float, float]]:
    rows = []
    for fraction in dict.fromkeys(r["fraction"] for r in runs):
        for mode in SWEEP_METHODS:
            dice = [r["report"].mean()["dice"] for r in runs if r["fraction"] == fraction and r["mode"] == mode]
            if dice:
                rows.append((fraction, mode, float(np.mean(dice)), float(np.std(dice))))
    return rows


def _experiment_manifest(command: str, args, runs: list[dict], extra: dict) -> dict:
    return {
        "command": command,
        "version": __version__,
        "data": str(args.data),
        "data_sha256": _sha256(args.data),
        "overrides": list(args.set),
        **extra,
        "runs": [{k: r[k] for k in ("fraction", "mode", "seed", "dir")} for r in runs],
    }


def cmd_ablate(args) -> int:
    seeds = _parse_seeds(args.seeds)
    if not 0 < args.labeled_fraction <= 1:
        raise UsageError("--labeled-fraction must be in (0, 1]")
    out = Path(args.out) if args.out else output_root() / "ablate"
    # labeled images only unless asked otherwise, so the four rows differ only in the loss
    base = {"use_unlabeled": args.with_unlabeled}
    runs = _experiment_runs(args, args.data, ABLATION_MODES, [args.labeled_fraction], seeds, out, "ablate", base)
    md, csv = ablation_table(runs)
    (out / "ablation.md").write_text(md)
    (out / "ablation.csv").write_text(csv)
    extra = {"labeled_fraction": args.labeled_fraction, "seeds": seeds, "with_unlabeled": args.with_unlabeled}
    _write_json(out / "manifest.json", _experiment_manifest("ablate", args, runs, extra))
    print(md, end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    seeds = _parse_seeds(args.seeds)
    fractions = _parse_fractions(args.fractions)
    out = Path(args.out) if args.out else output_root() / "sweep"
    runs = _experiment_runs(args, args.data, SWEEP_METHODS, fractions, seeds, out, "sweep")
    rows = sweep_rows(runs)
    text = SWEEP_HEADER + "\n" + "".join(f"{f:g},{m},{mu:.6f},{sd:.6f}\n" for f, m, mu, sd in rows)
    (out / "sweep.csv").write_text(text)
    _write_json(out / "manifest.json", _experiment_manifest("sweep", args, runs, {"fractions": fractions, "seeds": seeds}))
    print(text, end="")
    by = {(f, m): mu for f, m, mu, _ in rows}
    for f in fractions:
        print(f"gap fraction={f:g}: {by[(f, 'seg+lsf+dtc')] - by[(f, 'seg')]:+.2f} Dice")
    return EXIT_OK


def cmd_selftest(args) -> int:
    checks = selftest.run_all(args.seed)
    for c in checks:
        print(c.line())
    failed = [c.name for c in checks if not c.passed]
    if failed:
        print(f"selftest FAILED: {', '.join(failed)}")
        return EXIT_SELFTEST
    print(f"selftest passed: {len(checks)} properties")
    return EXIT_OK


# parser -----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dtcseg", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"dtcseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_set(p):
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override, repeatable")
        return p

    p = with_set(sub.add_parser("gen-data", help="generate a synthetic dataset file"))
    p.add_argument("--out", help="output file (default $%s/data.dtcd)" % ENV_OUTPUT)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=D.GenConfig.image_size)
    p.add_argument("--train", type=int, default=D.GenConfig.train_count)
    p.add_argument("--test", type=int, default=D.GenConfig.test_count)
    p.add_argument("--noise", type=float, default=D.GenConfig.noise_std)
    p.add_argument("--force", action="store_true", help="overwrite an existing file")
    p.set_defaults(func=cmd_gen_data)

    p = with_set(sub.add_parser("train", help="train one model"))
    p.add_argument("--data")
    p.add_argument("--mode", choices=ABLATION_MODES, default="seg+lsf+dtc")
    p.add_argument("--labeled-fraction", type=float, default=0.2)
    p.add_argument("--iters", type=int, help="t_max; iterations run 0..t_max")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--manifest", help="re-run exactly from a saved manifest.json")
    p.set_defaults(func=cmd_train)

    p = with_set(sub.add_parser("eval", help="score a checkpoint on the test split"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = with_set(sub.add_parser("ablate", help="all four loss modes over several seeds"))
    p.add_argument("--data", required=True)
    p.add_argument("--labeled-fraction", type=float, default=0.1)
    p.add_argument("--with-unlabeled", action="store_true", help="let the full mode also train on the unlabeled pool")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = with_set(sub.add_parser("sweep", help="supervised vs full method across labeled fractions"))
    p.add_argument("--data", required=True)
    p.add_argument("--fractions", default="0.05,0.1,0.2,0.5,1.0")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("selftest", help="oracle checks for gradients, distances and metrics")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dtcseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, CheckpointError, D.DatasetFormatError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"dtcseg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
