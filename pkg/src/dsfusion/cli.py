"""Command-line front end.

Subcommands: train, distill, eval, gradcheck, embed, params.  Every run
writes a ``run.cfg`` echo file of flat ``key = value`` lines that can be
replayed with ``--config run.cfg``.  Exit codes: 0 success, 2 for
configuration errors (the message names the offending key), 1 for runtime
failures.

Data specs: ``cifar10:<dir>`` | ``folder:<dir>`` |
``synth:<classes>x<per-class>x<hw>``, with optional suffixes
``@frac=0.1`` (per-class subsample) and ``@split=0.8`` (stratified split).
"""

from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import numpy as np

from .checks import run_battery
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    CIFAR10_MEAN,
    CIFAR10_STD,
    LabeledDataset,
    Preprocess,
    apply_preprocess,
    load_cifar10_binary,
    load_folder_dataset,
    stratified_split_indices,
    subsample_fraction,
    synth_dataset,
    write_split_manifest,
)
from .distill import DistillConfig
from .metrics import (
    TsneConfig,
    emit_scatter_svg,
    evaluate,
    extract_features,
    tsne,
    write_confusion_csv,
    write_embedding_csv,
    write_metrics_csv,
)
from .model import (
    FusionNet,
    FusionNetConfig,
    SingleStreamConfig,
    SingleStreamNet,
    count_params,
    preset_config,
    teacher_config,
)
from .optim import TrainConfig
from .train import fit, make_ce_loss_fn, make_distill_loss_fn, rows_to_csv


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# data spec resolution
# ---------------------------------------------------------------------------

def parse_data_spec(spec: str) -> dict:
    parts = spec.split("@")
    kind, sep, arg = parts[0].partition(":")
    if not sep or kind not in ("cifar10", "folder", "synth"):
        raise ConfigError(f"data: malformed spec {spec!r} (kinds: cifar10, folder, synth)")
    desc: dict = {"kind": kind, "arg": arg, "frac": None, "split": None}
    for opt in parts[1:]:
        key, sep2, value = opt.partition("=")
        if not sep2 or key not in ("frac", "split"):
            raise ConfigError(f"data: unknown suffix {opt!r} in {spec!r}")
        try:
            desc[key] = float(value)
        except ValueError:
            raise ConfigError(f"data: non-numeric {key} in {spec!r}") from None
    if kind == "synth":
        m = re.fullmatch(r"(\d+)x(\d+)x(\d+)", arg)
        if not m:
            raise ConfigError(f"data: synth spec must be classes x per-class x hw, got {arg!r}")
        desc["synth"] = tuple(int(g) for g in m.groups())
    return desc


def _load_base(desc: dict, seed: int):
    """Returns (dataset, official_test_or_None)."""
    kind = desc["kind"]
    if kind == "synth":
        classes, per, hw = desc["synth"]
        return synth_dataset(classes, per, hw, seed=seed), None
    root = Path(desc["arg"])
    if not root.exists():
        raise ConfigError(f"data: path {root} does not exist")
    if kind == "folder":
        return load_folder_dataset(root), None
    train_files = sorted(root.glob("data_batch*"))
    test_files = sorted(root.glob("test_batch*"))
    if not train_files and not test_files:
        raise ConfigError(f"data: no cifar10 batch files under {root}")
    train = load_cifar10_binary(train_files) if train_files else None
    test = load_cifar10_binary(test_files) if test_files else None
    if train is None:
        train, test = test, None
    return train, test


def resolve_pair(desc: dict, seed: int):
    """(train, test, manifest) for training commands.  The manifest is
    (n_total, train_indices) when a stratified split was performed."""
    base, official_test = _load_base(desc, seed)
    if desc["frac"] is not None:
        base = subsample_fraction(base, desc["frac"], seed=seed)
    if desc["split"] is None and official_test is not None:
        return base, official_test, None
    fraction = desc["split"] if desc["split"] is not None else 0.8
    train_idx, _test_idx = stratified_split_indices(base.labels, fraction, seed=seed)
    train = base.subset(train_idx, provenance=f"{base.provenance}|split=train")
    mask = np.ones(len(base), dtype=bool)
    mask[train_idx] = False
    test = base.subset(np.flatnonzero(mask), provenance=f"{base.provenance}|split=test")
    return train, test, (len(base), train_idx)


def resolve_single(desc: dict, seed: int) -> LabeledDataset:
    """One dataset for eval/embed: the held-out part when @split is given,
    the official test portion for cifar10, otherwise everything."""
    base, official_test = _load_base(desc, seed)
    if desc["frac"] is not None:
        base = subsample_fraction(base, desc["frac"], seed=seed)
    if desc["split"] is not None:
        _, test_idx = stratified_split_indices(base.labels, desc["split"], seed=seed)
        return base.subset(test_idx, provenance=f"{base.provenance}|split=test")
    if official_test is not None:
        return official_test
    return base


def preprocess_for(desc: dict, resize_hw: int) -> Preprocess | None:
    mean, std = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
    if desc["kind"] == "cifar10":
        mean, std = CIFAR10_MEAN, CIFAR10_STD
    resize = (resize_hw, resize_hw) if resize_hw else None
    if resize is None and desc["kind"] != "cifar10":
        return None
    return Preprocess(resize_hw=resize, mean=mean, std=std)


def _prepared(ds: LabeledDataset, pre: Preprocess | None) -> LabeledDataset:
    return apply_preprocess(ds, pre) if pre is not None else ds


# ---------------------------------------------------------------------------
# run.cfg echo files
# ---------------------------------------------------------------------------

def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_run_cfg(out_dir: Path, subcommand: str, args: argparse.Namespace) -> None:
    lines = [f"subcommand = {subcommand}"]
    for key in sorted(vars(args)):
        if key in ("func", "subcommand"):
            continue
        value = getattr(args, key)
        if value is None:
            continue
        lines.append(f"{key.replace('_', '-')} = {_fmt_value(value)}")
    (out_dir / "run.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_run_cfg(path: Path) -> tuple[str, dict[str, str]]:
    kv: dict[str, str] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise ConfigError(f"config: malformed line {line!r} in {path}")
        kv[key.strip()] = value.strip()
    sub = kv.pop("subcommand", None)
    if sub is None:
        raise ConfigError(f"config: {path} has no 'subcommand' key")
    return sub, kv


# ---------------------------------------------------------------------------
# model helpers
# ---------------------------------------------------------------------------

def _model_from_checkpoint(path) -> FusionNet | SingleStreamNet:
    if not Path(path).exists():
        raise ConfigError(f"ckpt: {path} does not exist")
    config, params = load_checkpoint(path)
    if isinstance(config, FusionNetConfig):
        return FusionNet(config, params)
    return SingleStreamNet(config, params)


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(
        initial_lr=args.lr,
        total_epochs=args.epochs,
        accumulation_steps=args.accum_steps,
        batch_size=args.batch_size,
        seed=args.seed,
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    desc = parse_data_spec(args.data)
    train_ds, test_ds, manifest = resolve_pair(desc, args.seed)
    pre = preprocess_for(desc, args.resize_hw)
    train_p, test_p = _prepared(train_ds, pre), _prepared(test_ds, pre)
    config = preset_config(args.preset, num_classes=train_ds.num_classes)
    model = FusionNet.initialise(config, args.seed)
    tcfg = _train_cfg(args)
    rows = fit(
        model, train_p, test_p, tcfg,
        make_ce_loss_fn(model, args.seed),
        epochs=args.epochs,
        log=lambda s: print(s),
    )
    (out_dir / "metrics.csv").write_text(rows_to_csv(rows), encoding="utf-8")
    save_checkpoint(out_dir / "ckpt.bin", config, model.params)
    if manifest is not None:
        write_split_manifest(out_dir / "split.tsv", manifest[0], manifest[1])
    write_run_cfg(out_dir, "train", args)
    print(f"final test accuracy: {rows[-1].test_accuracy:.4f}")
    return 0


def _load_or_train_teacher(path, stream, config, train_p, test_p, args) -> SingleStreamNet:
    path = Path(path)
    if path.exists():
        model = _model_from_checkpoint(path)
        if not isinstance(model, SingleStreamNet):
            raise ConfigError(f"teacher-{stream}: {path} is not a single-stream checkpoint")
        return model
    if not args.train_teachers:
        raise ConfigError(f"teacher-{stream}: {path} does not exist (pass --train-teachers to create it)")
    tc = teacher_config(config, stream)
    teacher = SingleStreamNet.initialise(tc, args.seed + (1 if stream == "a" else 2))
    tcfg = _train_cfg(args)
    rows = fit(teacher, train_p, test_p, tcfg, make_ce_loss_fn(teacher, tcfg.seed), epochs=args.epochs)
    save_checkpoint(path, tc, teacher.params)
    print(f"teacher-{stream} trained: test accuracy {rows[-1].test_accuracy:.4f}")
    return teacher


def cmd_distill(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    desc = parse_data_spec(args.data)
    train_ds, test_ds, manifest = resolve_pair(desc, args.seed)
    pre = preprocess_for(desc, args.resize_hw)
    train_p, test_p = _prepared(train_ds, pre), _prepared(test_ds, pre)
    config = preset_config(args.preset, num_classes=train_ds.num_classes)
    teacher_a = _load_or_train_teacher(args.teacher_a, "a", config, train_p, test_p, args)
    teacher_b = _load_or_train_teacher(args.teacher_b, "b", config, train_p, test_p, args)
    for name, teacher in (("teacher-a", teacher_a), ("teacher-b", teacher_b)):
        if teacher.num_classes != config.num_classes:
            raise ConfigError(
                f"{name}: has {teacher.num_classes} classes, student needs {config.num_classes}"
            )
        for t in teacher.params.values():
            t.requires_grad = False
    dcfg = DistillConfig(
        temperature=args.temperature,
        alpha=args.alpha,
        literal_t2_mode=args.literal_t2 == "true",
    )
    tcfg = _train_cfg(args)

    student = FusionNet.initialise(config, args.seed)
    rows_distill = fit(
        student, train_p, test_p, tcfg,
        make_distill_loss_fn(student, teacher_a, teacher_b, dcfg, args.seed),
        epochs=args.epochs, log=lambda s: print("distilled | " + s),
    )
    baseline = FusionNet.initialise(config, args.seed)
    rows_plain = fit(
        baseline, train_p, test_p, tcfg,
        make_ce_loss_fn(baseline, args.seed),
        epochs=args.epochs, log=lambda s: print("plain-ce  | " + s),
    )

    (out_dir / "metrics.csv").write_text(rows_to_csv(rows_distill), encoding="utf-8")
    (out_dir / "metrics_plain.csv").write_text(rows_to_csv(rows_plain), encoding="utf-8")
    save_checkpoint(out_dir / "student.bin", config, student.params)
    acc_d = rows_distill[-1].test_accuracy
    acc_p = rows_plain[-1].test_accuracy
    report_lines = [
        "metric,value",
        f"distilled_accuracy,{acc_d!r}",
        f"plain_accuracy,{acc_p!r}",
        f"difference,{acc_d - acc_p!r}",
    ]
    (out_dir / "report.csv").write_text("\n".join(report_lines) + "\n", encoding="utf-8")
    if manifest is not None:
        write_split_manifest(out_dir / "split.tsv", manifest[0], manifest[1])
    write_run_cfg(out_dir, "distill", args)
    print(f"distilled {acc_d:.4f} vs plain {acc_p:.4f} (diff {acc_d - acc_p:+.4f})")
    return 0


def cmd_eval(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = _model_from_checkpoint(args.ckpt)
    desc = parse_data_spec(args.data)
    ds = resolve_single(desc, args.seed)
    ds_p = _prepared(ds, preprocess_for(desc, args.resize_hw))
    if ds.num_classes != model.num_classes:
        raise ConfigError(
            f"data: dataset has {ds.num_classes} classes, checkpoint expects {model.num_classes}"
        )
    report = evaluate(model, ds_p)
    write_metrics_csv(out_dir / "metrics.csv", report)
    write_confusion_csv(out_dir / "confusion.csv", report, ds.class_names)
    write_run_cfg(out_dir, "eval", args)
    print(f"accuracy: {report.accuracy:.4f} on {report.n_samples} samples")
    return 0


def cmd_gradcheck(args) -> int:
    include_model = args.preset == "micro"
    report = run_battery(tol=args.tol, include_model=include_model)
    print(report.format())
    if not report.ok:
        print(f"FAILED: max relative error {report.max_rel_error:.3e} > {args.tol:.1e}")
        return 1
    print(f"all gradients within {args.tol:.1e} (worst {report.max_rel_error:.3e})")
    return 0


def cmd_embed(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = _model_from_checkpoint(args.ckpt)
    desc = parse_data_spec(args.data)
    ds = resolve_single(desc, args.seed)
    ds_p = _prepared(ds, preprocess_for(desc, args.resize_hw))
    features = extract_features(model, ds_p)
    cfg = TsneConfig(perplexity=args.perplexity, iterations=args.iters, seed=args.seed)
    result = tsne(features, cfg)
    write_embedding_csv(out_dir / "embedding.csv", result.embedding, ds.labels)
    emit_scatter_svg(result.embedding, ds.labels, out_dir / "embedding.svg")
    write_run_cfg(out_dir, "embed", args)
    print(
        f"embedded {len(ds)} points: KL {result.kl_trace[0]:.4f} -> {result.kl_trace[-1]:.4f}"
    )
    return 0


def cmd_params(args) -> int:
    config = preset_config(args.preset)
    counts = count_params(config)
    width = max(len(k) for k in counts)
    for key in ("head", "fusion", "backbone_a", "backbone_b", "total"):
        print(f"{key:<{width}s}  {counts[key]:>12,d}")
    return 0


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------

def _add_common_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="data spec (cifar10:DIR | folder:DIR | synth:CxNxHW)")
    p.add_argument("--preset", default="desk", choices=["paper", "desk", "micro"])
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--accum-steps", type=int, default=4)
    p.add_argument("--resize-hw", type=int, default=0, help="optional bicubic resize target (0 = keep)")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="dsfusion")
    subs = parser.add_subparsers(dest="subcommand", required=True)
    table: dict[str, argparse.ArgumentParser] = {}

    p = subs.add_parser("train", help="train a classifier with cross-entropy + L2")
    _add_common_train_flags(p)
    p.set_defaults(func=cmd_train)
    table["train"] = p

    p = subs.add_parser("distill", help="train a student against two frozen teachers")
    _add_common_train_flags(p)
    p.add_argument("--teacher-a", required=True, help="checkpoint of the stream-A teacher")
    p.add_argument("--teacher-b", required=True, help="checkpoint of the stream-B teacher")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--temperature", type=float, default=3.0)
    p.add_argument("--literal-t2", choices=["true", "false"], default="true")
    p.add_argument("--train-teachers", action="store_true", help="train and save missing teachers")
    p.set_defaults(func=cmd_distill)
    table["distill"] = p

    p = subs.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--resize-hw", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    table["eval"] = p

    p = subs.add_parser("gradcheck", help="finite-difference checks for every op")
    p.add_argument("--preset", default="micro", choices=["paper", "desk", "micro"])
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    table["gradcheck"] = p

    p = subs.add_parser("embed", help="t-SNE embedding of penultimate features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--resize-hw", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)
    table["embed"] = p

    p = subs.add_parser("params", help="analytic parameter counts for a preset")
    p.add_argument("--preset", default="desk", choices=["paper", "desk", "micro"])
    p.set_defaults(func=cmd_params)
    table["params"] = p

    return parser, table


def _apply_config_file(argv: list[str], table: dict[str, argparse.ArgumentParser]) -> list[str]:
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise ConfigError("config: --config needs a file path")
    path = Path(argv[i + 1])
    if not path.exists():
        raise ConfigError(f"config: {path} does not exist")
    argv = argv[:i] + argv[i + 2 :]
    sub, kv = _read_run_cfg(path)
    if argv and not argv[0].startswith("-"):
        if argv[0] != sub:
            raise ConfigError(f"config: file is for {sub!r}, command line says {argv[0]!r}")
    else:
        argv = [sub] + argv
    p = table[sub]
    defaults = {}
    for action in p._actions:
        flag = action.dest.replace("_", "-")
        if flag not in kv:
            continue
        raw = kv[flag]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[action.dest] = raw == "true"
        elif action.type is not None:
            defaults[action.dest] = action.type(raw)
        else:
            defaults[action.dest] = raw
        action.required = False  # satisfied by the config file
    p.set_defaults(**defaults)
    return argv


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, table = build_parser()
    try:
        argv = _apply_config_file(argv, table)
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
