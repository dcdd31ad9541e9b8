"""Command-line entry point.

Exit codes: 0 success, 1 a checked property failed (or training diverged),
2 invalid input, 3 filesystem error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import losses
from .errors import DivergenceError, FuzzyCurriculumError, InvalidInput, InvalidParameter, IoError, ParseError
from .fuzzy_label import fuzzify
from .gradcheck import FAMILIES, run_gradcheck
from .synth import SynthSpec, generate
from .trainer import (
    TrainConfig,
    TrainingTrajectory,
    final_dice,
    pareto_csv,
    stability_metrics,
    train,
)
from .volume import LabelVolume, ScalarField, read_volume, write_volume

EXIT_OK, EXIT_PROPERTY, EXIT_INVALID, EXIT_IO = 0, 1, 2, 3
RUN_KEYS = {"synth", "train", "fuzzy", "train_on", "data"}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def _read_text(path):
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _write_text(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _load_json(path):
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path} is not valid JSON: {exc}") from exc


def _dump_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _out_dir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {path}: {exc}") from exc
    return Path(path)


def _with_hash_comment(text, digest):
    return f"# config_hash={digest}\n{text}"


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    raw = _load_json(args.spec)
    if not isinstance(raw, dict):
        raise ParseError("synth spec must be a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = SynthSpec.from_dict(raw)
    clean, corrupted, intensity = generate(spec)
    out = _out_dir(args.out)
    for name, vol in (("clean", clean), ("corrupted", corrupted), ("intensity", intensity)):
        write_volume(vol, out / f"{name}.fvol")
    resolved = spec.to_dict()
    _write_text(out / "synth.json", _dump_json({"config_hash": config_hash(resolved), "spec": resolved}))
    return EXIT_OK


def cmd_fuzzify(args):
    labels = read_volume(args.labels)
    if not isinstance(labels, LabelVolume):
        raise InvalidParameter(f"{args.labels} holds a {type(labels).__name__}, expected labels")
    write_volume(fuzzify(labels, args.radius, args.rho2, workers=args.threads), args.out)
    return EXIT_OK


def resolve_run_config(raw, seed=None):
    """Fill defaults so that equivalent configs serialize identically."""
    if not isinstance(raw, dict):
        raise ParseError("run config must be a JSON object")
    unknown = set(raw) - RUN_KEYS
    if unknown:
        raise InvalidParameter(f"unknown run config keys: {sorted(unknown)}")
    train_raw = dict(raw.get("train", {}))
    synth_raw = dict(raw.get("synth", {}))
    if seed is not None:
        train_raw["seed"] = seed
        synth_raw["seed"] = seed
    cfg = TrainConfig.from_dict(train_raw)
    fuzzy = {"radius": 1, "rho2": 0.5, **raw.get("fuzzy", {})}
    if set(fuzzy) != {"radius", "rho2"}:
        raise InvalidParameter("fuzzy block takes only radius and rho2")
    resolved = {"train": cfg.to_dict(), "fuzzy": fuzzy}
    if "data" in raw:
        data = dict(raw["data"])
        if "labels" not in data:
            raise InvalidParameter("data block needs a labels path")
        resolved["data"] = data
    else:
        train_on = raw.get("train_on", "corrupted")
        if train_on not in ("clean", "corrupted"):
            raise InvalidParameter("train_on must be 'clean' or 'corrupted'")
        resolved["synth"] = SynthSpec.from_dict(synth_raw).to_dict()
        resolved["train_on"] = train_on
    return resolved, cfg


def _run_inputs(resolved):
    if "data" in resolved:
        data = resolved["data"]
        labels = read_volume(data["labels"])
        reference = read_volume(data["reference"]) if data.get("reference") else labels
        intensity = read_volume(data["intensity"]) if data.get("intensity") else None
        if not isinstance(labels, LabelVolume) or not isinstance(reference, LabelVolume):
            raise InvalidParameter("labels and reference must be label volumes")
        if intensity is not None and not isinstance(intensity, ScalarField):
            raise InvalidParameter("intensity must be a scalar volume")
        return labels, reference, intensity
    clean, corrupted, intensity = generate(SynthSpec.from_dict(resolved["synth"]))
    labels = clean if resolved["train_on"] == "clean" else corrupted
    return labels, clean, intensity


def run_training(resolved, cfg, threads=1):
    labels, reference, intensity = _run_inputs(resolved)
    fz = fuzzify(labels, resolved["fuzzy"]["radius"], resolved["fuzzy"]["rho2"], workers=threads)
    digest = config_hash(resolved)
    result = train(labels, fz, cfg, intensity=intensity, reference=reference, config_hash=digest)
    return result, reference, intensity, digest


def training_summary(result, reference, digest):
    traj = result.trajectory
    last = traj.rows[-1]
    summary = {
        "config_hash": digest,
        "steps": len(traj),
        "final_dice": final_dice(result, reference),
        "final_rho1": result.rho.rho1,
        "final_rho2": result.rho.rho2,
        "final_loss_total": last["loss_total"],
        "final_loss_dice": last["loss_dice"],
        "final_loss_fuzzy": last["loss_fuzzy"],
    }
    if len(traj) >= 20:
        summary.update(stability_metrics(traj))
    return summary


def cmd_train(args):
    resolved, cfg = resolve_run_config(_load_json(args.config), seed=args.seed)
    result, reference, intensity, digest = run_training(resolved, cfg, threads=args.threads)
    out = _out_dir(args.out)
    _write_text(out / "trajectory.csv", result.trajectory.to_csv())
    _write_text(out / "pareto.csv", pareto_csv(result.trajectory))
    write_volume(result.logit_field(intensity.data if intensity is not None else None), out / "model.fvol")
    summary = training_summary(result, reference, digest)
    summary["config"] = resolved
    _write_text(out / "summary.json", _dump_json(summary))
    return EXIT_OK


def _parse_perturb(items):
    out = {}
    for item in items or []:
        name, _, value = item.partition("=")
        if name not in FAMILIES:
            raise InvalidParameter(f"unknown derivative family {name!r}")
        try:
            out[name] = float(value)
        except ValueError as exc:
            raise InvalidParameter(f"bad perturbation {item!r}") from exc
    return out


def cmd_gradcheck(args):
    report = run_gradcheck(args.samples, args.seed, perturb=_parse_perturb(args.perturb))
    ok = True
    for name, fam in report.items():
        status = "ok" if fam.passed else "FAIL"
        ok &= fam.passed
        print(f"{name:14s} max_rel_error={fam.max_rel_error:.3e} tol={fam.tolerance:.0e} {status}")
    if args.out:
        doc = {name: {"max_rel_error": f.max_rel_error, "tolerance": f.tolerance, "passed": f.passed} for name, f in report.items()}
        doc["config_hash"] = config_hash({"samples": args.samples, "seed": args.seed})
        _write_text(args.out, _dump_json(doc))
    return EXIT_OK if ok else EXIT_PROPERTY


LANDSCAPE_COLUMNS = ["p", "fuzzy_loss", "fuzzy_grad", "fuzzy_curvature", "ce_loss", "ce_grad", "ce_curvature"]


def landscape_table(mu, rho1, rho2, n):
    """Per-class loss, gradient and curvature on the grid ``p_i = (i + 0.5) / n``.

    The cross-entropy columns use the crisp label ``mu >= 0.5``.
    """
    if n < 1:
        raise InvalidParameter("grid needs at least one point")
    if not 0.0 <= mu <= 1.0:
        raise InvalidParameter("mu must lie in [0, 1]")
    for name, v in (("rho1", rho1), ("rho2", rho2)):
        if not 0.0 < v <= 1.0:
            raise InvalidParameter(f"{name} must lie in (0, 1]")
    p = ((np.arange(n) + 0.5) / n)[:, None]
    m = np.full_like(p, mu)
    y = np.full_like(p, 1.0 if mu >= 0.5 else 0.0)
    cols = [
        p[:, 0],
        losses.fuzzy_terms(p, m, rho1, rho2)[:, 0],
        losses.fuzzy_loss_grad_p(p, m, rho1, rho2)[:, 0],
        losses.fuzzy_loss_curvature(p, m, rho1, rho2)[:, 0],
        losses.ce_loss(p, y)[1],
        losses.ce_grad(p, y)[:, 0],
        losses.ce_curvature(p, y)[:, 0],
    ]
    return np.column_stack(cols)


def cmd_landscape(args):
    table = landscape_table(args.mu, args.rho1, args.rho2, args.grid)
    digest = config_hash({"mu": args.mu, "rho1": args.rho1, "rho2": args.rho2, "grid": args.grid})
    lines = [",".join(LANDSCAPE_COLUMNS)]
    lines += [",".join(format(v, ".17g") for v in row) for row in table]
    text = _with_hash_comment("\n".join(lines) + "\n", digest)
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _load_trajectory(path):
    path = Path(path)
    if path.is_dir():
        path = path / "trajectory.csv"
    try:
        return TrainingTrajectory.from_csv(_read_text(path))
    except (StopIteration, KeyError, ValueError) as exc:
        raise ParseError(f"{path} is not a trajectory CSV") from exc


def _slope(values):
    if values.size < 2:
        return 0.0
    return float(np.polyfit(np.arange(values.size, dtype=np.float64), values, 1)[0])


def analyze_trajectory(traj, baseline=None):
    if len(traj) == 0:
        raise InvalidInput("trajectory has no rows")
    r1, r2 = traj.column("rho1"), traj.column("rho2")
    dice = traj.column("loss_dice")
    q = max(1, len(traj) // 4)
    out = {
        "config_hash": traj.config_hash,
        "rows": len(traj),
        "rho1_initial": float(r1[0]),
        "rho1_final": float(r1[-1]),
        "rho2_initial": float(r2[0]),
        "rho2_final": float(r2[-1]),
        "rho1_monotone": bool(np.all(np.diff(r1) >= 0.0)),
        "rho2_nonincreasing_net": bool(r2[-1] <= r2[0]),
        "rho2_tail_slope": _slope(r2[-q:]),
        "dice_tail_not_worse": bool(dice[-q:].mean() <= dice[:q].mean()),
    }
    if len(traj) >= 20:
        out.update(stability_metrics(traj))
    if baseline is not None:
        base = stability_metrics(baseline)["loss_variance_tail"]
        mine = stability_metrics(traj)["loss_variance_tail"]
        out["baseline_loss_variance_tail"] = base
        out["variance_ratio"] = mine / base if base > 0 else (0.0 if mine == 0 else float("inf"))
        out["smoother_than_baseline"] = bool(mine < base)
    return out


def cmd_analyze(args):
    traj = _load_trajectory(args.trajectory)
    baseline = _load_trajectory(args.baseline) if args.baseline else None
    report = analyze_trajectory(traj, baseline)
    text = _dump_json(report)
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    flags = [v for k, v in report.items() if isinstance(v, bool)]
    return EXIT_PROPERTY if args.strict and not all(flags) else EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidParameter(message)


def build_parser():
    parser = _Parser(prog="fuzzycurriculum", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1, help="worker threads for fuzzification (default 1)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic phantom with noisy labels")
    p.add_argument("spec", help="synth spec JSON")
    p.add_argument("out", help="output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fuzzify", help="turn a label volume into fuzzy labels")
    p.add_argument("labels")
    p.add_argument("out")
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--rho2", type=float, default=0.5)
    p.set_defaults(func=cmd_fuzzify)

    p = sub.add_parser("train", help="run a curriculum training job")
    p.add_argument("config", help="run config JSON")
    p.add_argument("--out", default="run", help="output directory (default ./run)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="compare analytic derivatives with finite differences")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    # negative control: add a constant to an analytic derivative, e.g. grad_p=1e-3
    p.add_argument("--perturb", action="append", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("landscape", help="tabulate fuzzy and cross-entropy losses over p")
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--rho1", type=float, default=1.0)
    p.add_argument("--rho2", type=float, default=1.0)
    p.add_argument("--grid", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("analyze", help="stability and rho summaries of a trajectory")
    p.add_argument("trajectory", help="trajectory CSV or run directory")
    p.add_argument("--baseline", help="baseline trajectory CSV or run directory")
    p.add_argument("--out")
    p.add_argument("--strict", action="store_true", help="exit 1 if any flag is false")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise InvalidParameter("--threads must be >= 1")
        return args.func(args)
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InvalidInput as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROPERTY
    except FuzzyCurriculumError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROPERTY


if __name__ == "__main__":
    sys.exit(main())
