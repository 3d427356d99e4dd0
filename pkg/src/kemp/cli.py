"""``kemp`` command line: gen-data, train, predict, evaluate, ablate, plot, replay.

Every command writes a run manifest (resolved arguments, paths, seed,
version, start time) before doing any work; ``kemp replay MANIFEST`` re-runs
it.  Outputs are written to a temporary file and renamed into place.
Failures print one diagnostic line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .evaluation import MetricConfig, MetricReport, ensemble_merge, evaluate, horizon_label
from .model import KempModel, ModelConfig
from .objective import LossWeights
from .plotting import write_svg
from .predictor import VARIANTS, keyframe_positions
from .scene import (
    HorizonSpec,
    Scenario,
    keyframe_indices,
    parse_prediction_file,
    parse_scenario_file,
    write_jsonl,
    write_prediction_file,
    write_scenario_file,
)
from .synth import GeneratorConfig, generate
from .training import TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train, train_ensemble

MANIFEST_SCHEMA = "kemp_manifest_v1"
ABLATION_COLUMNS = ("k", "seed", "minADE", "minFDE", "MR", "mAP")


class UsageError(ValueError):
    """Bad flag values; reported with exit status 2."""


# ----------------------------------------------------------------------
# flag parsing helpers


def parse_duration(text: str, hz: float) -> int:
    """``'8s'`` -> steps at ``hz``; a bare integer is a step count."""
    text = text.strip()
    try:
        if text.endswith("s"):
            seconds = float(text[:-1])
            steps = seconds * hz
            if seconds <= 0 or abs(steps - round(steps)) > 1e-9:
                raise UsageError(f"--horizon {text} is not a positive whole number of steps at {hz:g} Hz")
            return int(round(steps))
        steps = int(text)
    except ValueError as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(f"cannot parse duration {text!r} (use e.g. 8s or 80)") from None
    if steps < 1:
        raise UsageError(f"--horizon must be positive, got {text}")
    return steps


def parse_int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from None
    if not values:
        raise UsageError(f"{flag} is empty")
    return values


def _positive(v: int, flag: str) -> int:
    if v < 1:
        raise UsageError(f"{flag} must be >= 1, got {v}")
    return v


# ----------------------------------------------------------------------
# manifests


def _argv_from_namespace(command: str, values: dict) -> list[str]:
    argv = [command]
    for key, value in values.items():
        flag = "--" + key.replace("_", "-")
        if value is None:
            continue
        if isinstance(value, list):
            for item in value:
                argv += [flag, str(item)]
        else:
            argv += [flag, str(value)]
    return argv


def write_manifest(path: Path, command: str, values: dict, inputs: Sequence, outputs: Sequence, seed) -> None:
    doc = {
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "argv": _argv_from_namespace(command, values),
        "config": values,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "version": __version__,
        "started_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(path, [json.dumps(doc, indent=2)])


def _values(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("command", "func", "manifest")}


def _manifest_path(args, default: Path) -> Path:
    return Path(args.manifest) if getattr(args, "manifest", None) else default


def _load_scenarios(path) -> list[Scenario]:
    scenarios = parse_scenario_file(path)
    if not scenarios:
        raise ValueError(f"{path}: no scenarios")
    return scenarios


# ----------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    _positive(args.count, "--count")
    if args.hz <= 0:
        raise UsageError("--hz must be positive")
    future = parse_duration(args.horizon, args.hz)
    past = parse_duration(args.past, args.hz)
    base = GeneratorConfig.from_file(args.config) if args.config else GeneratorConfig()
    try:
        horizon = HorizonSpec(past, future, 1.0 / args.hz, args.keyframes)
        config = replace(base, seed=args.seed, scenario_count=args.count, horizon=horizon)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    write_manifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")), "gen-data",
                   _values(args), [args.config] if args.config else [], [out], args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    scenarios = generate(config)
    write_scenario_file(out, scenarios)
    print(f"wrote {len(scenarios)} scenarios to {out}")
    return 0


def _model_config(args, horizon: HorizonSpec) -> ModelConfig:
    k = args.keyframes
    if k is None:
        k = 0 if args.variant.startswith("baseline") else 4
    try:
        h = horizon.with_keyframes(k)
    except ValueError as exc:
        raise UsageError(f"--keyframes {k}: {exc}") from None
    try:
        return ModelConfig(horizon=h, variant=args.variant, mode_count=args.modes, hidden=args.hidden)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _train_config(args, seed: int | None = None) -> TrainConfig:
    try:
        return TrainConfig(
            seed=args.seed if seed is None else seed,
            batch_size=args.batch_size,
            steps=args.steps,
            base_lr=args.lr,
            decay_every_steps=args.decay_every,
            grad_clip_norm=args.clip if args.clip > 0 else None,
            ensemble_size=getattr(args, "ensemble", 1),
            weights=LossWeights(alpha=args.alpha, beta=args.beta),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    scenarios = _load_scenarios(args.data)
    mcfg = _model_config(args, scenarios[0].horizon)
    tcfg = _train_config(args)
    if args.resume and tcfg.ensemble_size > 1:
        raise UsageError("--resume works on a single model; train ensemble members separately")
    out = Path(args.out)
    n = tcfg.ensemble_size
    finals = [out / "model.ckpt"] if n == 1 else [out / f"model.member{i}.ckpt" for i in range(n)]
    write_manifest(_manifest_path(args, out / "manifest.json"), "train", _values(args), [args.data], finals, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    periodic = out / "checkpoints" if args.checkpoint_every else None
    kwargs = dict(checkpoint_every=args.checkpoint_every, stop_after=args.stop_after)
    if args.resume:
        kwargs["resume"] = load_checkpoint(args.resume)
    results = train_ensemble(scenarios, mcfg, tcfg, log_path=out / "train_log.csv", checkpoint_dir=periodic, **kwargs)
    for path, res in zip(finals, results):
        save_checkpoint(path, res.checkpoint)
        last = res.log[-1] if res.log else None
        tail = f", final loss {last.total:.4f}" if last else ""
        print(f"wrote {path} (step {res.checkpoint.step}{tail})")
    return 0


def _check_horizon(ckpt_h: HorizonSpec, data_h: HorizonSpec, path) -> None:
    if (ckpt_h.past_steps, ckpt_h.future_steps) != (data_h.past_steps, data_h.future_steps) or abs(
        ckpt_h.step_period - data_h.step_period
    ) > 1e-12:
        raise ValueError(
            f"{path}: checkpoint horizon (P={ckpt_h.past_steps}, T={ckpt_h.future_steps}, dt={ckpt_h.step_period}) "
            f"does not match data (P={data_h.past_steps}, T={data_h.future_steps}, dt={data_h.step_period})"
        )


def predict_with_checkpoints(scenarios: Sequence[Scenario], ckpt_paths: Sequence, config: MetricConfig):
    per_model = []
    for path in ckpt_paths:
        ckpt = load_checkpoint(path)
        _check_horizon(ckpt.model_config.horizon, scenarios[0].horizon, path)
        per_model.append(ckpt.model().predict(scenarios))
    return [ensemble_merge([preds[i] for preds in per_model], config) for i in range(len(scenarios))]


def _metric_config(args) -> MetricConfig:
    try:
        return MetricConfig(miss_threshold_m=args.miss_threshold, nms_radius_m=args.nms_radius, top_k=args.top_k)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_predict(args) -> int:
    if not args.ckpt:
        raise UsageError("at least one --ckpt is required")
    mcfg = _metric_config(args)
    out = Path(args.out)
    write_manifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")), "predict", _values(args),
                   [args.data, *args.ckpt], [out], None)
    scenarios = _load_scenarios(args.data)
    preds = predict_with_checkpoints(scenarios, args.ckpt, mcfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_prediction_file(out, preds)
    print(f"wrote {len(preds)} prediction sets ({args.top_k} modes) to {out}")
    return 0


def cmd_evaluate(args) -> int:
    mcfg = _metric_config(args)
    if args.out:
        out = Path(args.out)
        write_manifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")), "evaluate", _values(args),
                       [args.data, args.pred], [out], None)
    scenarios = _load_scenarios(args.data)
    report = evaluate(scenarios, parse_prediction_file(args.pred), mcfg)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_jsonl(args.out, [report.to_json()])
    print(report.to_table(args.name))
    return 0


@dataclass
class AblationRow:
    k: int
    seed: int
    report: MetricReport | None
    warning: str = ""
    keyframes_ok: bool | None = None


def check_keyframe_invariant(model: KempModel, scenarios: Sequence[Scenario]) -> bool:
    """Keyframe indices are ``j*t`` ending at T, and interpolation outputs contain keyframes bit-exactly."""
    h = model.config.horizon
    t = h.segment_length
    if keyframe_indices(h) != [j * t for j in range(1, h.keyframe_count + 1)] or keyframe_indices(h)[-1] != h.future_steps:
        return False
    if model.config.variant not in ("kemp-i-mlp", "kemp-i-lstm"):
        return True
    pos = keyframe_positions(h)
    for p in model.predict(list(scenarios)):
        for m in p.modes:
            if not np.array_equal(m.mu[pos], m.keyframe_mu):
                return False
    return True


def run_ablation(
    train_set: Sequence[Scenario],
    eval_set: Sequence[Scenario],
    keyframe_list: Sequence[int],
    seeds: Sequence[int],
    make_model_config,
    make_train_config,
    metric_config: MetricConfig,
    log=None,
) -> list[AblationRow]:
    """Train and evaluate one model per (k, seed); indivisible k becomes a warning row."""
    rows = []
    T = train_set[0].horizon.future_steps
    for k in keyframe_list:
        for seed in seeds:
            if k < 0 or (k > 0 and T % k != 0):
                msg = f"skipped: T={T} is not divisible by k={k}" if k > 0 else f"skipped: invalid k={k}"
                if log:
                    log(f"warning: {msg}")
                rows.append(AblationRow(k, seed, None, msg))
                continue
            mcfg = make_model_config(k)
            res = train(train_set, mcfg, make_train_config(seed))
            model = res.model()
            preds = [ensemble_merge([p], metric_config) for p in model.predict(eval_set)]
            report = evaluate(eval_set, preds, metric_config)
            ok = check_keyframe_invariant(model, eval_set[:4]) if k > 0 else None
            rows.append(AblationRow(k, seed, report, "", ok))
            if log:
                log(f"k={k} seed={seed} minADE={report.minADE:.4f} mAP={report.mAP:.4f}")
    return rows


def ablation_csv(rows: Sequence[AblationRow], horizon: HorizonSpec, metric_config: MetricConfig) -> str:
    labels = [horizon_label(c, horizon.step_period) for c in metric_config.resolved_horizons(horizon)]
    header = list(ABLATION_COLUMNS) + [f"mAP_{lb}" for lb in labels] + ["note"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        if r.report is None:
            w.writerow([r.k, r.seed] + [""] * (len(header) - 3) + [r.warning])
            continue
        rep = r.report
        vals = [rep.minADE, rep.minFDE, rep.MR, rep.mAP] + [rep.mAP_per_horizon[lb] for lb in labels]
        w.writerow([r.k, r.seed] + [repr(float(v)) for v in vals] + [""])
    return buf.getvalue()


def cmd_ablate(args) -> int:
    ks = parse_int_list(args.keyframes_list, "--keyframes-list")
    seeds = parse_int_list(args.seeds_list, "--seeds-list")
    mcfg = _metric_config(args)
    out = Path(args.out)
    inputs = [args.data] + ([args.eval_data] if args.eval_data else [])
    write_manifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")), "ablate", _values(args),
                   inputs, [out, out.with_suffix(".json")], seeds)
    train_set = _load_scenarios(args.data)
    eval_set = _load_scenarios(args.eval_data) if args.eval_data else train_set
    horizon = train_set[0].horizon

    def make_model_config(k: int) -> ModelConfig:
        variant = args.variant if k > 0 else args.baseline_variant
        return ModelConfig(horizon=horizon.with_keyframes(k), variant=variant, mode_count=args.modes,
                           hidden=args.hidden if k > 0 else (args.baseline_hidden or args.hidden))

    rows = run_ablation(train_set, eval_set, ks, seeds, make_model_config,
                        lambda seed: _train_config(args, seed), mcfg,
                        log=lambda msg: print(msg, file=sys.stderr))
    bad = [r for r in rows if r.keyframes_ok is False]
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, [ablation_csv(rows, horizon, mcfg).rstrip("\n")])
    doc = [{"k": r.k, "seed": r.seed, "warning": r.warning, "keyframes_ok": r.keyframes_ok,
            "metrics": None if r.report is None else r.report.to_dict()} for r in rows]
    write_jsonl(out.with_suffix(".json"), [json.dumps(doc, indent=2)])
    print(f"wrote {len(rows)} rows to {out}")
    if bad:
        raise RuntimeError(f"keyframe-index invariant violated for k={sorted({r.k for r in bad})}")
    return 0


def cmd_plot(args) -> int:
    out = Path(args.out)
    inputs = [args.data] + ([args.pred] if args.pred else [])
    write_manifest(_manifest_path(args, out / "manifest.json"), "plot", _values(args), inputs, [out], None)
    scenarios = {s.scenario_id: s for s in _load_scenarios(args.data)}
    preds = {p.scenario_id: p for p in parse_prediction_file(args.pred)} if args.pred else {}
    ids = args.scenario or list(scenarios)
    unknown = [i for i in ids if i not in scenarios]
    if unknown:
        raise ValueError(f"unknown scenario id(s): {unknown}")
    out.mkdir(parents=True, exist_ok=True)
    for sid in ids:
        write_svg(out / f"{sid}.svg", scenarios[sid], preds.get(sid))
    print(f"wrote {len(ids)} SVG files to {out}")
    return 0


def cmd_replay(args) -> int:
    doc = json.loads(Path(args.manifest_file).read_text())
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"{args.manifest_file}: not a run manifest")
    return main(doc["argv"] + ["--manifest", str(args.manifest_file)])


# ----------------------------------------------------------------------
# parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=VARIANTS, default="kemp-i-lstm")
    p.add_argument("--modes", type=int, default=12, help="candidate trajectories per model")
    p.add_argument("--hidden", type=int, default=64)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--decay-every", type=int, default=2000)
    p.add_argument("--clip", type=float, default=10.0, help="global gradient-norm cap (0 disables)")
    p.add_argument("--alpha", type=float, default=10.0, help="consistency loss weight")
    p.add_argument("--beta", type=float, default=1.0, help="keyframe loss weight")


def _add_metric_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--top-k", type=int, default=6)
    p.add_argument("--nms-radius", type=float, default=2.0)
    p.add_argument("--miss-threshold", type=float, default=2.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kemp", description="Keyframe-based trajectory prediction toolkit.")
    parser.add_argument("--version", action="version", version=f"kemp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic scenarios")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--horizon", default="8s", help="future length, e.g. 8s or 80 (steps)")
    p.add_argument("--past", default="11", help="observed history, e.g. 1.1s or 11 (steps)")
    p.add_argument("--hz", type=float, default=10.0)
    p.add_argument("--keyframes", type=int, default=4)
    p.add_argument("--config", help="key=value generator config file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model or an ensemble")
    p.add_argument("--data", required=True)
    p.add_argument("--keyframes", type=int, default=None, help="default 4, or 0 for baselines")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--ensemble", type=int, default=1)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--stop-after", type=int, default=None, help="halt after this many steps")
    p.add_argument("--resume", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict with one or more checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", action="append", default=[])
    _add_metric_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    _add_metric_flags(p)
    p.add_argument("--name", default="model")
    p.add_argument("--out", default=None, help="metrics JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="keyframe-count sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", default=None)
    p.add_argument("--keyframes-list", default="0,1,2,4,8")
    p.add_argument("--seeds-list", default="0")
    _add_model_flags(p)
    p.add_argument("--baseline-variant", choices=[v for v in VARIANTS if v.startswith("baseline")],
                   default="baseline-mlp")
    p.add_argument("--baseline-hidden", type=int, default=None)
    _add_train_flags(p)
    _add_metric_flags(p)
    p.add_argument("--out", required=True, help="CSV path; a JSON twin is written next to it")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render SVG overlays")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", default=None)
    p.add_argument("--scenario", action="append", default=[])
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest_file")
    p.set_defaults(func=cmd_replay)

    for name, sp in sub.choices.items():
        if name != "replay":
            sp.add_argument("--manifest", default=None, help="manifest path (default next to the output)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"kemp {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"kemp {args.command}: error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"kemp {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
