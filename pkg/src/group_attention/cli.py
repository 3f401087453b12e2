"""Command line entry point: ``group-attention <command> [flags]``.

Values are resolved as built-in defaults, overridden by ``--config FILE`` (a
JSON object keyed by flag names), overridden by flags given on the command
line. Every command first prints the resolved configuration as a JSON record.

Exit codes: 0 success, 1 computation or validation failure, 2 usage or I/O
error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint, plotting
from .align import TEMPLATE, align_face, parse_landmarks
from .gradcheck import TOLERANCE, run_suite
from .model import GroupEmotionModel, ModelConfig, collate, ensemble_probs
from .pnm import read_pnm, save_pnm
from .pooling import Mechanism
from .synth import DatasetConfig, generate_dataset, read_dataset, read_splits, write_splits
from .training import TrainConfig, metrics_from_probs, train

log = logging.getLogger("group_attention")


class UsageError(Exception):
    pass


def emit(record: dict, stream=None) -> None:
    print(json.dumps(record, sort_keys=True), file=stream or sys.stdout, flush=True)


def _int_list(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    text = str(text).strip()
    return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()


# --- commands ----------------------------------------------------------------

GEN_DEFAULTS = {
    "out": None,
    "seed": 0,
    "n_train": 4000,
    "n_val": 1000,
    "n_eval": 1000,
    "faces_min": 1,
    "faces_max": 8,
    "signal": 3.0,
    "distractor": 1.5,
    "salience_gap": 4.5,
    "noise": 1.0,
    "global_strength": 1.5,
    "fingerprint": 1.0,
}


def cmd_gen_data(cfg: dict) -> int:
    keys = set(DatasetConfig.__dataclass_fields__)
    dcfg = DatasetConfig(**{k: v for k, v in cfg.items() if k in keys})
    data = generate_dataset(dcfg)
    try:
        paths = write_splits(data, cfg["out"], dcfg)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {cfg['out']}: {exc}") from None
    emit({"written": {k: str(v) for k, v in paths.items()}, "sizes": {k: len(v) for k, v in data.items()}})
    return 0


TRAIN_DEFAULTS = {
    "data": None,
    "mechanism": "c",
    "out": None,
    "seed": 0,
    "epochs": 27,
    "lr": 0.001,
    "decay_period": 9,
    "decay_factor": 10.0,
    "batch_size": 32,
    "momentum": 0.9,
    "dropout": 0.5,
    "merge_val": False,
    "global_dim": 256,
    "face_dim": None,
    "global_hidden": "",
    "face_hidden": "",
    "scaled_attention": False,
    "proj_relu": False,
    "global_input_dim": None,
    "face_input_dim": None,
    "figures": None,
}


def _dataset_dims(samples, where: str) -> tuple[int, int]:
    g = {len(s.global_context) for s in samples}
    f = {s.faces.shape[1] for s in samples}
    if len(g) != 1 or len(f) != 1:
        raise ValueError(f"{where}: samples disagree on dimensions (global {sorted(g)}, face {sorted(f)})")
    return g.pop(), f.pop()


def cmd_train(cfg: dict) -> int:
    try:
        splits = read_splits(cfg["data"])
    except OSError as exc:
        raise UsageError(f"cannot read dataset: {exc}") from None
    if "train" not in splits:
        raise UsageError(f"{cfg['data']} has no train.jsonl")
    train_set, val_set = splits["train"], splits.get("val")
    if cfg["merge_val"] and val_set:
        train_set, val_set = train_set + val_set, None
    if not train_set:
        raise ValueError("training partition is empty")
    g_dim, f_dim = _dataset_dims(train_set, "train")
    for flag, actual in (("global_input_dim", g_dim), ("face_input_dim", f_dim)):
        if cfg[flag] is not None and int(cfg[flag]) != actual:
            raise ValueError(f"--{flag.replace('_', '-')} {cfg[flag]} does not match the data ({actual})")
    mcfg = ModelConfig(
        mechanism=Mechanism.parse(cfg["mechanism"]),
        global_input_dim=g_dim,
        face_input_dim=f_dim,
        global_dim=int(cfg["global_dim"]),
        face_dim=None if cfg["face_dim"] is None else int(cfg["face_dim"]),
        global_hidden=_int_list(cfg["global_hidden"]),
        face_hidden=_int_list(cfg["face_hidden"]),
        dropout=float(cfg["dropout"]),
        scaled_attention=bool(cfg["scaled_attention"]),
        proj_relu=bool(cfg["proj_relu"]),
    )
    tcfg = TrainConfig(
        batch_size=int(cfg["batch_size"]),
        lr0=float(cfg["lr"]),
        decay_factor=float(cfg["decay_factor"]),
        decay_period=int(cfg["decay_period"]),
        epochs=int(cfg["epochs"]),
        momentum=float(cfg["momentum"]),
        seed=int(cfg["seed"]),
        merge_val=bool(cfg["merge_val"]),
    )
    model = GroupEmotionModel(mcfg, seed=tcfg.seed)
    model, history = train(
        model,
        train_set,
        tcfg,
        val=val_set,
        on_epoch=lambda e: emit(
            {"epoch": e.epoch, "lr": e.lr, "train_loss": e.train_loss, "val_accuracy": e.val_accuracy}
        ),
    )
    meta = {"epoch": tcfg.epochs, "train_config": tcfg.to_dict(), "data": str(cfg["data"])}
    try:
        checkpoint.save_checkpoint(model, cfg["out"], meta)
    except OSError as exc:
        raise UsageError(f"cannot write checkpoint: {exc}") from None
    if cfg["figures"] and history:
        plotting.plot_training_curve(history, Path(cfg["figures"]) / "training_curve.png")
    emit({"checkpoint": str(cfg["out"]), "mechanism": mcfg.mechanism.value, "epochs": tcfg.epochs})
    return 0


EVAL_DEFAULTS = {"model": None, "data": None, "dump_attention": None, "figures": None}
ENSEMBLE_DEFAULTS = {"models": None, "data": None, "dump_probs": None, "figures": None}


def _load_model(path) -> GroupEmotionModel:
    try:
        model, _ = checkpoint.load_checkpoint(path)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from None
    return model


def _load_samples(path):
    try:
        samples = read_dataset(path)
    except OSError as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from None
    if not samples:
        raise ValueError(f"{path} contains no samples")
    return samples


def _check_compatible(model: GroupEmotionModel, samples, name: str) -> None:
    g_dim, f_dim = _dataset_dims(samples, "data")
    c = model.config
    if (g_dim, f_dim) != (c.global_input_dim, c.face_input_dim):
        raise ValueError(
            f"{name} expects global/face widths {c.global_input_dim}/{c.face_input_dim}, data has {g_dim}/{f_dim}"
        )


def _report(metrics, figures: Optional[str], weights=None, dominant=None) -> None:
    print(metrics.table())
    emit({"metrics": metrics.to_record()})
    if figures:
        out = Path(figures)
        plotting.plot_confusion(metrics.confusion, out / "confusion.png")
        if weights is not None:
            plotting.plot_attention(weights, out / "attention.png", dominant)


def _open_sink(target):
    if target in (None, "-"):
        return sys.stdout, False
    try:
        return open(target, "w", encoding="utf-8"), True
    except OSError as exc:
        raise UsageError(f"cannot write {target}: {exc}") from None


def cmd_eval(cfg: dict) -> int:
    model = _load_model(cfg["model"])
    samples = _load_samples(cfg["data"])
    _check_compatible(model, samples, str(cfg["model"]))
    probs, weights = [], []
    for i in range(0, len(samples), 256):
        out = model.forward_batch(collate(samples[i : i + 256], model.dtype), training=False)
        probs.append(out.probs.data)
        weights.extend(out.weights_per_sample())
    metrics = metrics_from_probs([s.label for s in samples], np.concatenate(probs))
    _report(metrics, cfg["figures"], weights, [s.dominant_index for s in samples])
    if cfg["dump_attention"] is not None:
        sink, close = _open_sink(cfg["dump_attention"])
        try:
            for s, w in zip(samples, weights):
                emit({"id": s.id, "weights": [float(v) for v in w]}, sink)
        finally:
            if close:
                sink.close()
    return 0


def cmd_ensemble_eval(cfg: dict) -> int:
    paths = [p for p in str(cfg["models"]).split(",") if p.strip()]
    if not paths:
        raise UsageError("--models needs at least one checkpoint")
    models = [_load_model(p) for p in paths]
    samples = _load_samples(cfg["data"])
    for p, m in zip(paths, models):
        _check_compatible(m, samples, p)
    probs = ensemble_probs(models, samples)
    _report(metrics_from_probs([s.label for s in samples], probs), cfg["figures"])
    if cfg["dump_probs"] is not None:
        sink, close = _open_sink(cfg["dump_probs"])
        try:
            for s, p in zip(samples, probs):
                emit({"id": s.id, "probs": [float(v) for v in p]}, sink)
        finally:
            if close:
                sink.close()
    return 0


ALIGN_DEFAULTS = {"image": None, "landmarks": None, "out": None, "template": None, "eyes_only": False}


def cmd_align(cfg: dict) -> int:
    try:
        landmarks = parse_landmarks(cfg["landmarks"])
        template = TEMPLATE
        if cfg["template"]:
            template = parse_landmarks(Path(cfg["template"]).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise UsageError(f"malformed landmarks: {exc}") from None
    except OSError as exc:
        raise UsageError(f"cannot read template: {exc}") from None
    try:
        image = read_pnm(cfg["image"])
    except OSError as exc:
        raise UsageError(f"cannot read image: {exc}") from None
    aligned, t = align_face(image, landmarks, template, bool(cfg["eyes_only"]))
    try:
        save_pnm(cfg["out"], aligned)
    except OSError as exc:
        raise UsageError(f"cannot write {cfg['out']}: {exc}") from None
    emit(
        {
            "scale": t.scale,
            "theta": t.theta,
            "theta_degrees": float(np.degrees(t.theta)),
            "tx": t.tx,
            "ty": t.ty,
            "width": aligned.shape[1],
            "height": aligned.shape[0],
        }
    )
    return 0


GRADCHECK_DEFAULTS = {"seed": 0, "trials": 20}


def cmd_gradcheck(cfg: dict) -> int:
    trials = int(cfg["trials"])
    if trials < 1:
        raise UsageError("--trials must be at least 1")
    results = run_suite(int(cfg["seed"]), trials)
    for mech in Mechanism:
        mine = [r for r in results if r.mechanism == mech.value]
        worst = max(mine, key=lambda r: r.max_error)
        emit(
            {
                "mechanism": mech.value,
                "configurations": len(mine),
                "max_error": worst.max_error,
                "parameter": worst.worst_param,
                "trial": worst.trial,
            }
        )
    worst = max(results, key=lambda r: r.max_error)
    passed = worst.max_error < TOLERANCE
    emit(
        {
            "passed": passed,
            "max_error": worst.max_error,
            "mechanism": worst.mechanism,
            "parameter": worst.worst_param,
            "tolerance": TOLERANCE,
        }
    )
    if not passed:
        print(
            f"gradient check failed: {worst.mechanism}/{worst.worst_param} relative error {worst.max_error:.3g}",
            file=sys.stderr,
        )
    return 0 if passed else 1


# --- parser ------------------------------------------------------------------

S = argparse.SUPPRESS


def _gen_args(p):
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--seed", type=int, default=S)
    for flag in ("n-train", "n-val", "n-eval", "faces-min", "faces-max"):
        p.add_argument(f"--{flag}", type=int, default=S)
    for flag in ("signal", "distractor", "salience-gap", "noise", "global-strength", "fingerprint"):
        p.add_argument(f"--{flag}", type=float, default=S)


def _train_args(p):
    p.add_argument("--data", default=S, help="directory with train.jsonl and optionally val.jsonl")
    p.add_argument("--mechanism", choices=[m.value for m in Mechanism], default=S)
    p.add_argument("--out", default=S, help="checkpoint path (.gemr)")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--decay-period", type=int, default=S)
    p.add_argument("--decay-factor", type=float, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--momentum", type=float, default=S)
    p.add_argument("--dropout", type=float, default=S)
    p.add_argument("--merge-val", action="store_true", default=S, help="train on train + VAL")
    p.add_argument("--global-dim", type=int, default=S)
    p.add_argument("--face-dim", type=int, default=S)
    p.add_argument("--global-hidden", default=S, help="comma-separated hidden widths")
    p.add_argument("--face-hidden", default=S, help="comma-separated hidden widths")
    p.add_argument("--scaled-attention", action="store_true", default=S)
    p.add_argument("--proj-relu", action="store_true", default=S)
    p.add_argument("--global-input-dim", type=int, default=S)
    p.add_argument("--face-input-dim", type=int, default=S)
    p.add_argument("--figures", default=S, help="directory for report figures")


def _eval_args(p):
    p.add_argument("--model", default=S)
    p.add_argument("--data", default=S, help="dataset file (.jsonl)")
    p.add_argument("--dump-attention", nargs="?", const="-", default=S, help="per-sample face weights (default stdout)")
    p.add_argument("--figures", default=S)


def _ensemble_args(p):
    p.add_argument("--models", default=S, help="comma-separated checkpoints")
    p.add_argument("--data", default=S)
    p.add_argument("--dump-probs", nargs="?", const="-", default=S)
    p.add_argument("--figures", default=S)


def _align_args(p):
    p.add_argument("--image", default=S)
    p.add_argument("--landmarks", default=S, help='"x1,y1;x2,y2;x3,y3;x4,y4;x5,y5"')
    p.add_argument("--out", default=S)
    p.add_argument("--template", default=S, help="file holding a landmark string")
    p.add_argument("--eyes-only", action="store_true", default=S)


def _gradcheck_args(p):
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--trials", type=int, default=S)


COMMANDS = {
    "gen-data": (_gen_args, GEN_DEFAULTS, ("out",), cmd_gen_data),
    "train": (_train_args, TRAIN_DEFAULTS, ("data", "out"), cmd_train),
    "eval": (_eval_args, EVAL_DEFAULTS, ("model", "data"), cmd_eval),
    "ensemble-eval": (_ensemble_args, ENSEMBLE_DEFAULTS, ("models", "data"), cmd_ensemble_eval),
    "align": (_align_args, ALIGN_DEFAULTS, ("image", "landmarks", "out"), cmd_align),
    "gradcheck": (_gradcheck_args, GRADCHECK_DEFAULTS, (), cmd_gradcheck),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="group-attention", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (add_args, _, _, _) in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=S, help="JSON file of flag values")
        add_args(p)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    _, defaults, required, _ = COMMANDS[command]
    explicit = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
    from_file = {}
    if getattr(ns, "config", None):
        try:
            raw = json.loads(Path(ns.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {ns.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        from_file = {k.lstrip("-").replace("-", "_"): v for k, v in raw.items()}
        unknown = sorted(set(from_file) - set(defaults))
        if unknown:
            raise UsageError(f"unknown keys in config file: {unknown}")
    cfg = {**defaults, **from_file, **explicit}
    missing = [k for k in required if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(ns.command, ns)
        emit({"command": ns.command, "config": cfg})
        return COMMANDS[ns.command][3](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
