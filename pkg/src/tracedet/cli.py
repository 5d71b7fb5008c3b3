"""Command-line front end: simulate, train, eval, score, gradcheck, grid, report.

Exit codes: 0 success, 2 usage or validation error, 3 numerical abort,
4 artifact mismatch, 5 gradcheck failure. Every command writes a
``manifest.json`` (``<file>.manifest.json`` for simulate) describing the run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import net
from .errors import ArtifactMismatch, GradcheckFailure, TraceDetError, ValidationError
from .evaluation import METHOD_NAMES, RocResult, ave_entropy_auroc, ave_entropy_score, compare_report, \
    evaluate_model, predict_scores
from .objectives import LossConfig, total_loss
from .sim import PATTERNS, SimConfig, synthesize_dataset
from .traces import read_traces, stack_batch, write_traces
from .trainer import TrainConfig, apply_point, default_grid, grid_points, grid_search, stream, train

log = logging.getLogger("tracedet")

MANIFEST_FORMAT = "tracedet-manifest-v1"
LEADERBOARD_FORMAT = "tracedet-leaderboard-v1"
GRADCHECK_TOL = 1e-4
GRADCHECK_SIZES = {
    "tiny": dict(T=8, n=6, B=4, d_model=16, n_heads=2, d_ff=16, d_pe=8),
    "small": dict(T=12, n=8, B=6, d_model=24, n_heads=2, d_ff=24, d_pe=8),
}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


@dataclass
class RunManifest:
    command: str
    seed: Optional[int] = None
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    hashes: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    exit_code: int = 0

    def add_output(self, name: str, path) -> None:
        self.outputs[name] = str(path)

    def finalize(self, path, started: float, exit_code: int) -> None:
        self.wall_clock = time.perf_counter() - started
        self.exit_code = exit_code
        for p in list(self.inputs.values()) + list(self.outputs.values()):
            if p and os.path.isfile(p):
                self.hashes[p] = sha256_file(p)
        _write_json(path, {"format": MANIFEST_FORMAT, **asdict(self)})


# ------------------------------------------------------------------ config


def resolve_seed(flag: Optional[int], file_cfg: dict) -> int:
    """--seed flag, then the config file, then TRACEDET_SEED, then 0."""
    if flag is not None:
        return int(flag)
    if file_cfg.get("seed") is not None:
        return int(file_cfg["seed"])
    env = os.environ.get("TRACEDET_SEED")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ValidationError("TRACEDET_SEED", f"not an integer: {env!r}") from exc
    return 0


def load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError("config", f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(cfg, dict):
        raise ValidationError("config", f"{path}: expected a JSON object")
    return cfg


def parse_counts(text: str) -> dict:
    counts = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, sep, value = part.partition("=")
        if not sep or name not in PATTERNS:
            raise ValidationError("count-per-pattern", f"bad entry {part!r}; expected pattern=count with pattern in {PATTERNS}")
        try:
            counts[name] = int(value)
        except ValueError as exc:
            raise ValidationError("count-per-pattern", f"bad count in {part!r}") from exc
    return counts


def _pick(flag, file_cfg: dict, key: str, default):
    if flag is not None:
        return flag
    return file_cfg.get(key, default)


# ---------------------------------------------------------------- commands


def cmd_simulate(args, manifest: RunManifest) -> int:
    fc = load_config_file(args.config)
    seed = resolve_seed(args.seed, fc)
    counts = parse_counts(args.count_per_pattern) if args.count_per_pattern else fc.get(
        "count_per_pattern", {p: 100 for p in PATTERNS})
    sim = SimConfig(
        T=int(_pick(args.T, fc, "T", 64)),
        n=int(_pick(args.n, fc, "n", 32)),
        V=int(_pick(args.V, fc, "V", 16)),
        step_length=_pick(args.step_length, fc, "step_length", None),
        seed=seed,
        remask=_pick(args.remask, fc, "remask", "low_confidence"),
        frozen_decoded_entropy=bool(_pick(args.frozen_decoded_entropy, fc, "frozen_decoded_entropy", True)),
    )
    intensity = float(_pick(args.intensity, fc, "intensity", 0.7))
    train_fraction = float(_pick(args.train_fraction, fc, "train_fraction", 0.0))
    ds = synthesize_dataset(sim, counts, seed=seed, intensity=intensity, train_fraction=train_fraction)
    write_traces(ds, args.out)
    manifest.seed = seed
    sim_dict = asdict(sim)
    sim_dict["remask"] = sim.remask.tag
    manifest.config = {"sim": sim_dict, "count_per_pattern": counts, "intensity": intensity,
                       "train_fraction": train_fraction}
    manifest.add_output("traces", args.out)
    labels = [it.label for it in ds.items]
    print(f"wrote {len(ds)} traces to {args.out} (T={sim.T}, n={sim.n}, V={sim.V})")
    for p in PATTERNS:
        if counts.get(p):
            print(f"  {p}: {counts[p]}")
    print(f"  labels: {labels.count(0)} faithful / {labels.count(1)} hallucinated")
    print(f"  splits: {ds.split_sizes()}")
    return 0


def build_train_config(args, fc: dict, seed: int) -> TrainConfig:
    base = TrainConfig.from_dict({k: v for k, v in fc.items() if k in TrainConfig.__dataclass_fields__ and k != "seed"})
    point = {k: v for k, v in fc.items() if k in {"beta", "tau", "n_layers", "dropout_rate", "d_model", "n_heads",
                                                 "d_ff", "d_pe", "gumbel_temp"}}
    flags = {
        "lr": args.lr, "batch_size": args.batch_size, "epochs": args.epochs, "beta": args.beta, "tau": args.tau,
        "n_layers": args.n_layers, "dropout_rate": args.dropout,
    }
    point.update({k: v for k, v in flags.items() if v is not None})
    cfg = apply_point(replace(base, seed=seed), point)
    mode = args.mask_mode or fc.get("mask_mode")
    if mode:
        cfg = replace(cfg, model=cfg.model.with_mode(mode))
    return cfg


def cmd_train(args, manifest: RunManifest) -> int:
    fc = load_config_file(args.config)
    seed = resolve_seed(args.seed, fc)
    cfg = build_train_config(args, fc, seed)
    manifest.seed, manifest.config = seed, cfg.to_dict()
    manifest.inputs["data"] = args.data
    ds = read_traces(args.data)
    params, hist = train(ds, cfg)
    ckpt = os.path.join(args.out, "checkpoint.json")
    hist_path = os.path.join(args.out, "history.json")
    net.save_checkpoint(ckpt, params, cfg.model, extra={"train_config": cfg.to_dict(), "D": ds.shape[1]})
    _write_json(hist_path, hist.to_dict())
    manifest.add_output("checkpoint", ckpt)
    manifest.add_output("history", hist_path)
    b = hist.best_epoch
    print(f"best epoch {b}: val_auroc={hist.val_auroc[b]:.4f} total={hist.total[b]:.5f} "
          f"({hist.wall_clock:.1f}s)")
    return 0


def _load_for_eval(args, manifest):
    manifest.inputs.update({"data": args.data, "checkpoint": args.ckpt})
    params, mcfg, extra = net.load_checkpoint(args.ckpt)
    ds = read_traces(args.data)
    D = ds.shape[1]
    if "xv.w" in params and params["xv.w"].shape[0] != D:
        raise ArtifactMismatch(f"checkpoint expects n={params['xv.w'].shape[0]} positions, data has n={D}")
    normalize = extra.get("train_config", {}).get("normalize_inputs", True)
    return params, mcfg, ds, normalize


def cmd_eval(args, manifest: RunManifest) -> int:
    seed = resolve_seed(args.seed, {})
    params, mcfg, ds, normalize = _load_for_eval(args, manifest)
    mode = args.mask_mode or mcfg.mask_mode
    items = ds.subset(args.split)
    if not items:
        raise ValidationError("split", f"split {args.split!r} is empty")
    manifest.seed = seed
    manifest.config = {"mask_mode": mode, "split": args.split, "model": asdict(mcfg)}
    roc, diag = evaluate_model(params, mcfg, items, mask_mode=mode, normalize=normalize, seed=seed)
    results = {METHOD_NAMES[mode]: roc, "ave_entropy": ave_entropy_auroc(items)}
    compare_report(results, args.out, variant=args.variant)
    diag_path = os.path.join(args.out, "diagnostics.json")
    _write_json(diag_path, {"summary": diag.summary(), "plot": diag.to_plot_json()})
    for name in ("report.json", "report.txt"):
        manifest.add_output(name, os.path.join(args.out, name))
    manifest.add_output("diagnostics", diag_path)
    with open(os.path.join(args.out, "report.txt"), encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return 0


def cmd_score(args, manifest: RunManifest) -> int:
    seed = resolve_seed(args.seed, {})
    params, mcfg, ds, normalize = _load_for_eval(args, manifest)
    items = ds.subset(args.split) if args.split != "all" else list(ds.items)
    if not items:
        raise ValidationError("split", f"split {args.split!r} is empty")
    mode = args.mask_mode or mcfg.mask_mode
    scores, _, _ = predict_scores(params, mcfg, items, normalize=normalize, mask_mode=mode, seed=seed)
    rows = [{"id": it.example_id, "label": it.label, "split": ds.split[it.example_id], "score": float(s),
             "ave_entropy": ave_entropy_score(it.trace)} for it, s in zip(items, scores)]
    manifest.seed = seed
    manifest.config = {"mask_mode": mode, "split": args.split}
    path = os.path.join(args.out, "scores.json")
    _write_json(path, {"mask_mode": mode, "rows": rows})
    manifest.add_output("scores", path)
    print(f"scored {len(rows)} traces -> {path}")
    return 0


def gradcheck_model(size: str = "tiny", eps: float = 1e-5, seed: int = 0):
    """Finite-difference check of total_loss on a seeded toy model.

    Returns (max relative error, worst parameter coordinate).
    """
    if size not in GRADCHECK_SIZES:
        raise ValidationError("size", f"expected one of {tuple(GRADCHECK_SIZES)}")
    dims = dict(GRADCHECK_SIZES[size])
    T, n, B = dims.pop("T"), dims.pop("n"), dims.pop("B")
    mcfg = net.ModelConfig(n_layers=2, dropout_rate=0.0, mask_mode="deterministic", **dims)
    rng = stream(seed, "init")
    params = net.init_params(mcfg, n, rng)
    # zero-initialized biases put ReLU inputs exactly on the kink; jitter them off it
    for p in params.values():
        p.data += rng.normal(0.0, 0.05, size=p.shape)
    data = rng.uniform(0.0, 1.0, size=(T, B, n))
    labels = np.arange(B) % 2
    # the thresholded mask is piecewise constant: spread the head logits and put
    # the threshold in their widest gap so no entry flips under perturbation
    params["head.w"].data *= 5.0
    _, probs, _ = net.forward(data, params, mcfg, train=False)
    z = np.sort(np.log(probs.data) - np.log1p(-probs.data), axis=None)
    inner = z[len(z) // 4: 3 * len(z) // 4 + 1]
    k = int(np.argmax(np.diff(inner)))
    params["head.b"].data -= 0.5 * (inner[k] + inner[k + 1])
    loss_cfg = LossConfig(beta=1.0, tau=0.25)

    def objective():
        y_hat, probs, _ = net.forward(data, params, mcfg, train=False)
        return total_loss(y_hat, labels, probs, loss_cfg).total

    return ad.finite_diff_check(objective, params, eps=eps, return_worst=True)


def cmd_gradcheck(args, manifest: RunManifest) -> int:
    seed = resolve_seed(args.seed, {})
    manifest.seed = seed
    manifest.config = {"size": args.size, "eps": args.eps, "corrupt_adjoint": args.corrupt_adjoint,
                       "tolerance": GRADCHECK_TOL}
    if args.corrupt_adjoint:
        ad.corrupt_adjoint(args.corrupt_adjoint)
    try:
        err, worst = gradcheck_model(args.size, args.eps, seed)
    finally:
        ad.corrupt_adjoint(None)
    tol = GRADCHECK_TOL if args.tol is None else args.tol
    manifest.config["max_rel_error"] = err
    manifest.config["worst"] = worst
    print(f"gradcheck size={args.size} eps={args.eps:g}: max relative error {err:.3e} at {worst}")
    if not err < tol:
        raise GradcheckFailure(f"max relative error {err:.3e} >= {tol:g} (worst parameter {worst})")
    return 0


def cmd_grid(args, manifest: RunManifest) -> int:
    fc = load_config_file(args.config)
    seed = resolve_seed(args.seed, fc)
    grid = load_config_file(args.grid_file) if args.grid_file else default_grid()
    for k, v in grid.items():
        if not isinstance(v, list) or not v:
            raise ValidationError("grid", f"{k}: expected a non-empty list")
    base = build_train_config(args, fc, seed)
    manifest.seed, manifest.config = seed, {"base": base.to_dict(), "grid": grid, "budget": args.budget}
    manifest.inputs["data"] = args.data
    if args.grid_file:
        manifest.inputs["grid"] = args.grid_file
    ds = read_traces(args.data)
    best, rows = grid_search(ds, grid, budget=args.budget, seed=seed, base=base, jobs=args.jobs)
    path = os.path.join(args.out, "leaderboard.json")
    _write_json(path, {"format": LEADERBOARD_FORMAT, "grid_size": len(grid_points(grid)), "budget": args.budget,
                       "rows": rows})
    best_path = os.path.join(args.out, "best_config.json")
    _write_json(best_path, best.to_dict())
    manifest.add_output("leaderboard", path)
    manifest.add_output("best_config", best_path)
    print(f"{len(rows)} configurations; best val_auroc={rows[0]['val_auroc']:.4f} point={rows[0]['point']}")
    return 0


def cmd_report(args, manifest: RunManifest) -> int:
    names = args.variants or [os.path.basename(os.path.normpath(r)) for r in args.runs]
    if len(names) != len(args.runs):
        raise ValidationError("variants", "need one variant name per run directory")
    results = {}
    for name, run in zip(names, args.runs):
        path = os.path.join(run, "report.json")
        manifest.inputs[f"{name}"] = path
        try:
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ArtifactMismatch(f"{path}: invalid JSON ({exc.msg})") from exc
        if payload.get("format") != "tracedet-report-v1":
            raise ArtifactMismatch(f"{path}: not a tracedet report")
        group = results.setdefault(name, {})
        for row in payload["rows"]:
            group[row["method"]] = RocResult(row["auroc"], row["n_pos"], row["n_neg"], row["tie_count"])
    compare_report(results, args.out)
    for name in ("report.json", "report.txt"):
        manifest.add_output(name, os.path.join(args.out, name))
    with open(os.path.join(args.out, "report.txt"), encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return 0


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _add_train_flags(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--mask-mode", choices=net.MASK_MODES)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tracedet", description="Hallucination detection from denoising entropy traces.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a labeled synthetic trace dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="trace file to write")
    p.add_argument("--seed", type=int)
    p.add_argument("--count-per-pattern", help="e.g. faithful=100,persistent_error=100")
    p.add_argument("--remask", choices=["low_confidence", "entropy", "random", "topk_margin"])
    p.add_argument("--T", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--V", type=int)
    p.add_argument("--step-length", type=int)
    p.add_argument("--intensity", type=float)
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--frozen-decoded-entropy", dest="frozen_decoded_entropy", action="store_true", default=None)
    p.add_argument("--zero-decoded-entropy", dest="frozen_decoded_entropy", action="store_false")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a checkpoint against the average-entropy baseline"),
                              ("score", cmd_score, "write per-trace hallucination scores")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data", required=True)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--mask-mode", choices=net.MASK_MODES)
        p.add_argument("--split", default="test" if name == "eval" else "all")
        p.add_argument("--seed", type=int, help="seed of the eval mask stream")
        if name == "eval":
            p.add_argument("--variant", default="default")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    p.add_argument("--size", choices=sorted(GRADCHECK_SIZES), default="tiny")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, help=f"pass threshold (default {GRADCHECK_TOL:g})")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="gradcheck-run", help="directory for the run manifest")
    p.add_argument("--corrupt-adjoint", metavar="OP", help="debug: scale the adjoint of OP (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("grid", help="hyperparameter grid search")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-file", help="JSON mapping parameter -> list of values (default: the full grid)")
    p.add_argument("--budget", type=int, default=8)
    p.add_argument("--jobs", type=int, default=1)
    _add_train_flags(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="merge eval reports into one comparison table")
    p.add_argument("--runs", nargs="+", required=True, help="eval output directories")
    p.add_argument("--variants", nargs="+", help="variant names (default: directory names)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def _manifest_path(args) -> str:
    if args.command == "simulate":
        return f"{args.out}.manifest.json"
    return os.path.join(args.out, "manifest.json")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    manifest = RunManifest(command=args.command)
    code = 1
    try:
        out_dir = os.path.dirname(os.path.abspath(args.out)) if args.command == "simulate" else args.out
        os.makedirs(out_dir, exist_ok=True)
        code = args.func(args, manifest)
    except TraceDetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = exc.exit_code
    except FloatingPointError as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        code = 3
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 2
    finally:
        try:
            manifest.finalize(_manifest_path(args), started, code)
        except OSError as exc:
            print(f"warning: could not write manifest: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
