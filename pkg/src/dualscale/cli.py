"""Command-line entry point: ``dualscale {gen-data,motivation,train,eval}``.

Every command reads strict JSON configs (unknown keys are rejected) and
writes a resolved copy, with all defaults expanded, next to its outputs.

Exit codes: 0 ok, 1 ``--check`` violated, 2 invalid config, 3 solver blowup,
4 training diverged, 5 evaluation degraded (truncated rollouts).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .dataset import DatasetConfig, default_config, generate_dataset, read_trajectory_set, write_trajectory_set
from .diagnostics import SsimParams
from .errors import (
    ConfigurationError, FormatError, NumericalBlowup, ParameterError, RolloutTruncated, TrainingDiverged,
)
from .initial_conditions import SceneConstants
from .model import (
    DsoConfig, ablated, build_model, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
)
from .motivation import MotivationConfig, run_motivation
from .training import (
    OracleModel, PersistenceModel, SplitSpec, TrainConfig, evaluate, make_one_step_pairs, split_dataset, train,
)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER, EXIT_TRAINING, EXIT_DEGRADED = 0, 1, 2, 3, 4, 5
HEADER_KEYS = ("seed", "output_dir", "tag")
RESOLVED_NAME = "resolved_config.json"


class CliConfigError(Exception):
    pass


def load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise CliConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise CliConfigError(f"{path}: top level must be a JSON object")
    return doc


def split_header(doc: dict, allowed, where: str) -> tuple[dict, dict]:
    """Separate the shared header from the body and reject unknown keys."""
    unknown = sorted(set(doc) - set(HEADER_KEYS) - set(allowed))
    if unknown:
        raise CliConfigError(f"{where}: unknown key(s): {', '.join(unknown)}")
    header = {k: doc.get(k) for k in HEADER_KEYS}
    return header, {k: v for k, v in doc.items() if k not in HEADER_KEYS}


def field_names(cls) -> set:
    return {f.name for f in fields(cls)}


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def default_workers() -> int:
    try:
        return int(os.environ.get("DSO_NUM_WORKERS", "1"))
    except ValueError:
        raise CliConfigError("DSO_NUM_WORKERS must be an integer") from None


def _build(factory, body, where):
    try:
        return factory(body)
    except TypeError as exc:
        raise CliConfigError(f"{where}: {exc}") from None
    except (ConfigurationError, ParameterError) as exc:
        raise CliConfigError(f"{where}: {exc}") from None


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    doc = load_json(args.config)
    header, body = split_header(doc, field_names(DatasetConfig), str(args.config))
    if header["seed"] is not None:
        if "base_seed" in body:
            raise CliConfigError(f"{args.config}: give either 'seed' or 'base_seed', not both")
        body["base_seed"] = header["seed"]
    cfg = _build(lambda b: default_config(args.kind, **b), body, str(args.config))
    workers = args.workers if args.workers is not None else default_workers()
    if workers < 1:
        raise CliConfigError(f"worker count must be >= 1, got {workers}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        ts = generate_dataset(args.kind, cfg, workers=workers)
    except NumericalBlowup as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    write_trajectory_set(ts, out)
    write_json(str(out) + ".resolved.json", {**header, "dataset": cfg.to_dict(), "kind": args.kind})
    print(f"wrote {out} with shape {ts.data.shape}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# motivation
# ---------------------------------------------------------------------------

def motivation_config(doc: dict, where: str) -> tuple[dict, MotivationConfig]:
    header, body = split_header(doc, field_names(MotivationConfig), where)
    scene = body.pop("scene", {})
    if not isinstance(scene, dict):
        raise CliConfigError(f"{where}: 'scene' must be an object")
    unknown = sorted(set(scene) - field_names(SceneConstants))
    if unknown:
        raise CliConfigError(f"{where}: unknown key(s) in scene: {', '.join(unknown)}")
    if "dipole_center" in scene:
        scene["dipole_center"] = tuple(scene["dipole_center"])
    cfg = _build(lambda b: MotivationConfig(**b, scene=SceneConstants(**scene)), body, where)
    return header, cfg


def cmd_motivation(args) -> int:
    doc = load_json(args.config) if args.config else {}
    header, cfg = motivation_config(doc, str(args.config or "defaults"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        report = run_motivation(cfg)
    except NumericalBlowup as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    (out / "motivation_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "motivation_report.csv").write_text(report.to_csv(), encoding="utf-8")
    write_json(out / RESOLVED_NAME, {**header, "motivation": asdict(cfg)})
    summary = report.summary()
    for name, s in summary.items():
        print(f"{name}: d={s['distance']} delta_max_grad={s['delta_max_grad_pct']:+.2f}% "
              f"displacement={s['displacement']:.4f}")
    if args.check:
        close, far = summary["close"]["delta_max_grad_pct"], summary["far"]["delta_max_grad_pct"]
        if not close > far:
            print(f"check failed: close {close:+.2f}% is not above far {far:+.2f}%", file=sys.stderr)
            return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_EXTRA_KEYS = {"train_frac", "val_frac", "test_frac", "model_seed"}


def cmd_train(args) -> int:
    ts = read_trajectory_set(args.data)
    mdoc = load_json(args.model_config)
    tdoc = load_json(args.train_config)
    mheader, mbody = split_header(mdoc, field_names(DsoConfig), str(args.model_config))
    theader, tbody = split_header(tdoc, field_names(TrainConfig) | TRAIN_EXTRA_KEYS, str(args.train_config))
    mbody.setdefault("input_hw", [ts.h, ts.w])
    mbody.setdefault("in_channels", ts.c)
    mbody.setdefault("out_channels", ts.c)
    model_cfg = _build(lambda b: ablated(DsoConfig.from_dict(b), args.ablate), mbody, str(args.model_config))
    split_spec = _build(lambda b: SplitSpec(**{k: b.pop(k) for k in ("train_frac", "val_frac", "test_frac")
                                               if k in b}), tbody, str(args.train_config))
    model_seed = tbody.pop("model_seed", None)
    if theader["seed"] is not None:
        tbody["seed"] = theader["seed"]
    train_cfg = _build(TrainConfig.from_dict, tbody, str(args.train_config))
    model_seed = train_cfg.seed if model_seed is None else model_seed
    try:
        tr, va, te_ = split_dataset(ts, split_spec, seed=train_cfg.seed)
    except ParameterError as exc:
        raise CliConfigError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split = {"seed": train_cfg.seed, **asdict(split_spec), "train": tr, "val": va, "test": te_}
    resolved = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "model_seed": model_seed,
                "ablate": args.ablate, "data": str(args.data), "split": split,
                "header": {"model": mheader, "train": theader}}
    write_json(out / RESOLVED_NAME, resolved)
    model = build_model(model_cfg, model_seed)
    extra = {"split": split, "train": train_cfg.to_dict(), "data_meta": {"length": ts.length, "kind":
                                                                        ts.meta.get("kind")}}
    try:
        final, hist = train(model, make_one_step_pairs(ts.data[tr]), make_one_step_pairs(ts.data[va]), train_cfg,
                            on_epoch=lambda r: print(f"epoch {r['epoch']}: train {r['train_loss']:.6g} "
                                                     f"val {r['val_loss']:.6g}", flush=True))
    except TrainingDiverged as exc:
        last = model.with_parameters(exc.last_params)
        save_checkpoint(last, out / "checkpoint_last_finite.dsoc", {**extra, "diverged_at_step": exc.step})
        print(f"error: {exc} (step {exc.step}, epoch {exc.epoch})", file=sys.stderr)
        return EXIT_TRAINING
    (out / "loss_history.csv").write_text(hist.to_csv(), encoding="utf-8")
    save_checkpoint(final, out / "checkpoint_final.dsoc", {**extra, "epoch": len(hist), "selection": "last"})
    best = hist.best_model or final
    save_checkpoint(best, out / "checkpoint_best.dsoc",
                    {**extra, "epoch": hist.best_epoch or 0, "selection": "best_val"})
    print(f"wrote checkpoints to {out} (best val epoch {hist.best_epoch})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def write_oracle_checkpoint(path, kind: str = "oracle", split: dict | None = None) -> None:
    """Parameter-free checkpoint for the ``oracle`` or ``persistence`` predictor."""
    if kind not in ("oracle", "persistence"):
        raise ValueError(f"unknown reference predictor {kind!r}")
    write_checkpoint(path, {"kind": kind}, {}, {"split": split} if split else None)


def load_predictor(path, test_data):
    header, _ = read_checkpoint(path)
    kind = header.get("kind")
    if kind == "dso":
        model, header = load_checkpoint(path)
        return model, header
    if kind == "oracle":
        return OracleModel(test_data), header
    if kind == "persistence":
        return PersistenceModel(), header
    raise FormatError(f"unknown checkpoint kind {kind!r}", offset=0)


def test_indices(ts, header) -> list[int]:
    split = (header.get("extra") or {}).get("split")
    if split is None:
        return list(range(ts.n))
    if "test" in split:
        return list(split["test"])
    spec = SplitSpec(split["train_frac"], split["val_frac"], split["test_frac"])
    return split_dataset(ts, spec, seed=split["seed"])[2]


def cmd_eval(args) -> int:
    ts = read_trajectory_set(args.data)
    header, _ = read_checkpoint(args.checkpoint)
    idx = test_indices(ts, header)
    if max(idx, default=-1) >= ts.n:
        raise CliConfigError(f"checkpoint's test split references trajectory {max(idx)} but data holds {ts.n}")
    test = ts.data[idx].astype("float64")
    model, header = load_predictor(args.checkpoint, test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = args.workers if args.workers is not None else default_workers()
    write_json(out / RESOLVED_NAME, {"data": str(args.data), "checkpoint": str(args.checkpoint),
                                      "checkpoint_kind": header.get("kind"), "test_indices": idx,
                                      "ssim": asdict(SsimParams()), "workers": workers})
    try:
        report = evaluate(model, test, SsimParams(), length=ts.length, workers=max(1, workers))
    except RolloutTruncated as exc:
        write_json(out / "metrics.json", {"error": str(exc), "n_samples": len(idx), "n_excluded": len(idx)})
        print(f"error: every rollout truncated ({exc})", file=sys.stderr)
        return EXIT_DEGRADED
    report.excluded = [{"index": idx[e["index"]], "step": e["step"]} for e in report.excluded]
    (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    agg = report.aggregates
    print(f"all_step_mse={agg['all_step_mse']:.6g} one_step_mse={agg['one_step_mse']:.6g} "
          f"final_step_mse={agg['final_step_mse']:.6g} mean_ssim={agg['mean_ssim']:.4f} "
          f"samples={report.n_samples} excluded={report.n_excluded}")
    if report.n_excluded:
        print(f"warning: {report.n_excluded} rollout(s) truncated", file=sys.stderr)
        return EXIT_DEGRADED
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualscale", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a trajectory dataset (DSOT file)")
    g.add_argument("--kind", choices=("forced", "decaying"), required=True)
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--workers", type=int, default=None, help="default: $DSO_NUM_WORKERS or 1")
    g.set_defaults(func=cmd_gen_data)

    m = sub.add_parser("motivation", help="close vs far perturbation experiment")
    m.add_argument("--config", default=None)
    m.add_argument("--out", required=True)
    m.add_argument("--check", action="store_true", help="exit 1 unless close delta exceeds far delta")
    m.set_defaults(func=cmd_motivation)

    t = sub.add_parser("train", help="train a dual-scale model on one-step pairs")
    t.add_argument("--data", required=True)
    t.add_argument("--model-config", required=True)
    t.add_argument("--train-config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--ablate", choices=("local", "global"), default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="rollout evaluation over the test split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--workers", type=int, default=None)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigurationError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
