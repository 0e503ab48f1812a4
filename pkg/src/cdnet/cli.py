"""Command-line entry point: ``cdnet <command> [options]``.

Configuration comes from three layers, later ones winning: built-in
defaults, an optional JSON file (``--config``), and ``--section.key`` flags.
Every command writes into its run directory a ``manifest.json`` (resolved
config, argv, seeds, source fingerprint, input and output hashes) and a
line-delimited ``log.jsonl``.

Exit codes: 0 success, 1 contract violation, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import io
from .data import DataConfig, SyntheticDataset, gen_dataset
from .errors import ConfigError, ContractViolation, SamplingError
from .evaluation import ablation_table, evaluate, format_series, j_sweep
from .model import ModelConfig, ModelParams, init_params
from .numerics import kernels
from .train import (
    VARIANT_TABLE,
    TrainConfig,
    TrainingDiverged,
    episode_grad_check,
    finetune,
    pretrain,
    variant_settings,
)

# model fields that are derived from the dataset or the training section
_DERIVED_MODEL = ("raw_dim", "n_expr", "n_domains", "J", "variant", "seed")

EVAL_DEFAULTS = {
    "tasks": 1000,
    "workers": 1,
    "shots": [1, 5],
    "variants": list(VARIANT_TABLE),
    "pretrained": [True],
    "J_values": [0, 1, 2, 3, 4, 5, 6],
}

# fields whose default is the published setting
PAPER = {
    "data.n_base": "seven basic expression categories",
    "data.n_domains": "five source domains",
    "train.pretrain_iters": "10000 iterations",
    "train.batch_size": "16",
    "train.finetune_episodes": "100 episodes",
    "train.tasks_per_episode": "100 tasks per episode",
    "train.n_way": "5",
    "train.k_shot": "1 or 5",
    "train.n_query": "16",
    "train.J": "3",
    "train.lambda_d_p": "1.0",
    "train.lambda_d_f": "0.01",
    "train.lambda_r_f": "1.0",
    "train.lr": "1e-4",
    "train.beta1": "0.5",
    "train.beta2": "0.999",
    "train.reg_mode": "partial",
    "train.variant": "cdnet",
    "eval.tasks": "1000",
    "eval.shots": "1 and 5",
}

NULLABLE = {"train.grad_clip"}


def _fields(cls, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        out[f.name] = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    return out


def default_config() -> dict:
    data = _fields(DataConfig)
    data["missing"] = [list(m) for m in data["missing"]]
    train = _fields(TrainConfig, skip=("seed",))
    train["variant"] = "cdnet"
    return {
        "seed": 0,
        "out_dir": "runs/cdnet",
        "data": data,
        "model": _fields(ModelConfig, skip=_DERIVED_MODEL),
        "train": train,
        "eval": {k: (list(v) if isinstance(v, list) else v) for k, v in EVAL_DEFAULTS.items()},
    }


# ------------------------------------------------------------- config layers


def merge(base: dict, override: dict, where: str = "") -> dict:
    """Overlay ``override`` onto ``base``; unknown keys are rejected."""
    out = dict(base)
    for k, v in override.items():
        name = f"{where}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {name!r} must be an object")
            out[k] = merge(base[k], v, name + ".")
        else:
            out[k] = v
    return out


def _check_present(cfg: dict, where: str = "") -> None:
    for k, v in cfg.items():
        name = f"{where}{k}"
        if isinstance(v, dict):
            _check_present(v, name + ".")
        elif v is None and name not in NULLABLE:
            raise ConfigError(f"config field {name!r} is missing a value")


def resolve(file_cfg: dict | None, flags: dict) -> dict:
    cfg = default_config()
    if file_cfg is not None:
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = merge(cfg, file_cfg)
    for dotted, value in flags.items():
        head, _, key = dotted.rpartition(".")
        cfg = merge(cfg, {head: {key: value}} if head else {key: value})
    _check_present(cfg)
    return cfg


def build(cfg: dict) -> tuple[DataConfig, dict, TrainConfig, dict]:
    """Typed configs from a resolved dict."""
    try:
        d = dict(cfg["data"])
        d["missing"] = tuple(tuple(m) for m in d["missing"])
        dcfg = DataConfig(**d)
        t = dict(cfg["train"])
        variant = t.pop("variant")
        if variant not in VARIANT_TABLE:
            raise ConfigError(f"train.variant must be one of {list(VARIANT_TABLE)}, got {variant!r}")
        tcfg = TrainConfig(**t, seed=int(cfg["seed"]))
        model_kw = dict(cfg["model"], raw_dim=dcfg.raw_dim, n_expr=dcfg.n_base, n_domains=dcfg.n_domains)
        ModelConfig(**model_kw)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from None
    return dcfg, model_kw, tcfg, dict(cfg["eval"], variant=variant)


# ------------------------------------------------------------------ run dir


def source_fingerprint() -> str:
    """sha256 over the package sources, so a manifest pins the code it ran."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.suffix in (".py", ".pyx") and "__pycache__" not in p.parts:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Owns one run directory: log stream, outputs and the manifest."""

    def __init__(self, command: str, cfg: dict, argv: list[str]):
        self.command = command
        self.cfg = cfg
        self.argv = argv
        self.dir = Path(cfg["out_dir"])
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create run directory {self.dir}: {exc}") from None
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self._log = open(self.dir / "log.jsonl", "w")

    def log(self, record: dict) -> None:
        self._log.write(json.dumps(record, sort_keys=True) + "\n")

    def input(self, path) -> None:
        self.inputs[str(path)] = file_sha256(path)

    def output(self, name: str, write) -> Path:
        path = self.dir / name
        write(path)
        self.outputs[name] = file_sha256(path)
        return path

    def close(self, status: str = "ok") -> None:
        self._log.close()
        self.outputs["log.jsonl"] = file_sha256(self.dir / "log.jsonl")
        seed = int(self.cfg["seed"])
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "config": self.cfg,
            "seeds": {"master": seed, "dataset": seed, "model_init": seed, "train": seed, "eval": seed},
            "source_sha256": source_fingerprint(),
            "backend": kernels.BACKEND,
            "versions": {"python": platform.python_version(), "numpy": np.__version__},
            "inputs": self.inputs,
            "outputs": self.outputs,
            "status": status,
        }
        with open(self.dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)
            fh.write("\n")


def _write_text(text: str):
    def write(path):
        Path(path).write_text(text)
    return write


def _require(args, name: str) -> str:
    value = getattr(args, name, None)
    if value is None:
        raise ConfigError(f"--{name.replace('_', '-')} is required for this command")
    if not os.path.exists(value):
        raise FileNotFoundError(f"{name.replace('_', ' ')} not found: {value}")
    return value


def _dataset(args, run: Run, dcfg: DataConfig) -> SyntheticDataset:
    path = _require(args, "dataset")
    run.input(path)
    ds = SyntheticDataset.load(path)
    if ds.config != dcfg:
        raise ConfigError(f"dataset {path} was generated with a different data config")
    return ds


def _checkpoint(run: Run, path: str) -> ModelParams:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    run.input(path)
    return ModelParams.load(path)


# ----------------------------------------------------------------- commands


def cmd_gen(args, run, dcfg, model_kw, tcfg, ecfg) -> str:
    ds = gen_dataset(dcfg, int(run.cfg["seed"]))
    out = args.out or str(run.dir / "dataset.cdn")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    run.outputs[os.path.relpath(out, run.dir)] = file_sha256(out)
    n_base = len(ds.classes_in(0, 0))
    run.log({"event": "gen", "rows": int(ds.raw.shape[0]), "source_domains": dcfg.n_domains})
    return (f"dataset {out}: {ds.raw.shape[0]} rows, {dcfg.n_base} base classes x {dcfg.n_domains} source domains "
            f"({n_base} present in domain 0), {dcfg.n_novel} compound classes in target domain {ds.target_domain}")


def cmd_pretrain(args, run, dcfg, model_kw, tcfg, ecfg) -> str:
    ds = _dataset(args, run, dcfg)
    mcfg, vcfg = variant_settings(ecfg["variant"], tcfg, model_kw)
    params, _ = pretrain(init_params(mcfg), ds, vcfg, on_record=run.log)
    run.output("pretrained.ckpt", params.save)
    return f"pre-trained {ecfg['variant']} for {vcfg.pretrain_iters} iterations -> {run.dir / 'pretrained.ckpt'}"


def cmd_finetune(args, run, dcfg, model_kw, tcfg, ecfg) -> str:
    ds = _dataset(args, run, dcfg)
    mcfg, vcfg = variant_settings(ecfg["variant"], tcfg, model_kw)
    start = _checkpoint(run, args.init) if args.init else init_params(mcfg)
    teacher_path = args.teacher or args.init
    teacher = _checkpoint(run, teacher_path) if teacher_path and vcfg.reg_mode != "none" else None
    if start.config != mcfg:
        raise ConfigError(f"checkpoint config {start.config} does not match the requested model {mcfg}")
    params, _ = finetune(start, teacher, ds, vcfg, on_record=run.log)
    run.output("finetuned.ckpt", params.save)
    return f"fine-tuned {ecfg['variant']} ({vcfg.reg_mode} penalty) -> {run.dir / 'finetuned.ckpt'}"


def cmd_eval(args, run, dcfg, model_kw, tcfg, ecfg) -> str:
    ds = _dataset(args, run, dcfg)
    params = _checkpoint(run, _require(args, "checkpoint"))
    rep = evaluate(params, ds, tcfg.n_way, tcfg.k_shot, tcfg.n_query, int(ecfg["tasks"]), int(run.cfg["seed"]),
                   tcfg.metric, workers=int(ecfg["workers"]))
    run.output("report.json", _write_text(rep.to_json() + "\n"))
    run.log({"event": "eval", "mean": rep.mean, "ci95": rep.ci95})
    return f"{tcfg.n_way}-way {tcfg.k_shot}-shot accuracy: {rep}"


def cmd_ablate(args, run, dcfg, model_kw, tcfg, ecfg) -> str:
    ds = _dataset(args, run, dcfg)

    def on_run(vr, rep):
        run.log({"event": "variant", "variant": vr.name, "pretrained_init": vr.pretrained_init,
                 "mean": rep.mean, "ci95": rep.ci95})

    table = ablation_table(ds, tcfg, variants=tuple(ecfg["variants"]), shots=tuple(ecfg["shots"]),
                           pretrained=tuple(bool(p) for p in ecfg["pretrained"]), tasks=int(ecfg["tasks"]),
                           eval_seed=int(run.cfg["seed"]), model_kw=model_kw, on_run=on_run)
    run.output("table.json", _write_text(json.dumps(table.to_dict(), sort_keys=True, indent=1) + "\n"))
    text = table.render()
    run.output("table.txt", _write_text(text + "\n"))
    return text


def cmd_sweep_j(args, run, dcfg, model_kw, tcfg, ecfg) -> str:
    ds = _dataset(args, run, dcfg)

    def on_run(J, vr, rep):
        run.log({"event": "sweep", "J": J, "mean": rep.mean, "ci95": rep.ci95})

    series = j_sweep(ds, tcfg, J_values=tuple(ecfg["J_values"]), tasks=int(ecfg["tasks"]),
                     eval_seed=int(run.cfg["seed"]), model_kw=model_kw, on_run=on_run)
    text = format_series(series)
    run.output("sweep.txt", _write_text(text))
    run.output("sweep.json", _write_text(json.dumps(
        [{"J": J, "mean": r.mean, "ci95": r.ci95} for J, r in series], indent=1) + "\n"))
    return text.rstrip("\n")


def cmd_gradcheck(args, run, dcfg, model_kw, tcfg, ecfg) -> str:
    variant = ecfg["variant"]
    mcfg, vcfg = variant_settings(variant, tcfg, dict(model_kw, d=args.d, raw_dim=args.raw_dim))
    rep = episode_grad_check(mcfg, args.n_way, args.k_shot, args.n_query, vcfg.reg_mode, vcfg.weights,
                             seed=int(run.cfg["seed"]), eps=args.eps, tol=args.tol)
    run.output("gradcheck.json", _write_text(json.dumps(
        {"max_rel_error": rep.max_rel_error, "worst": rep.worst, "ok": rep.ok, "eps": rep.eps, "tol": rep.tol,
         "failures": len(rep.failures)}, sort_keys=True, indent=1) + "\n"))
    run.log({"event": "gradcheck", "worst": rep.worst, "ok": rep.ok})
    if not rep.ok:
        raise ContractViolation(f"gradient check failed: max relative error {rep.worst:.3e} > {rep.tol:g}")
    return rep.summary()


COMMANDS = {
    "gen": (cmd_gen, "generate the synthetic multi-domain dataset"),
    "pretrain": (cmd_pretrain, "batch pre-training on base classes"),
    "finetune": (cmd_finetune, "episodic fine-tuning from a checkpoint"),
    "eval": (cmd_eval, "N-way K-shot accuracy on the target domain's novel classes"),
    "ablate": (cmd_ablate, "train and evaluate the ablation variants"),
    "sweep-j": (cmd_sweep_j, "accuracy against the number of cascade steps"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the fine-tuning gradient"),
}


# -------------------------------------------------------------------- parser


def _parse_value(kind, text: str):
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")
    if kind in (list, tuple):
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            raise argparse.ArgumentTypeError(f"expected a JSON list, got {text!r}") from None
    if kind is type(None):
        return None if text.lower() in ("none", "null") else float(text)
    return kind(text)


def _flag_help(name: str, default) -> str:
    shown = json.dumps(default)
    paper = PAPER.get(name)
    note = f"published setting: {paper}" if paper else "no published setting"
    return f"default {shown} ({note})"


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    defaults = default_config()
    p.add_argument("--config", help="JSON run config; flags override it (default: none)")
    p.add_argument("--seed", dest="cfg.seed", type=int, default=argparse.SUPPRESS,
                   help="master seed for data, init, training and evaluation (default 0)")
    p.add_argument("--out-dir", dest="cfg.out_dir", default=argparse.SUPPRESS,
                   help=f"run directory (default {defaults['out_dir']!r})")
    for section in ("data", "model", "train", "eval"):
        g = p.add_argument_group(f"{section} settings")
        for key, default in defaults[section].items():
            name = f"{section}.{key}"
            kind = type(default)
            g.add_argument(f"--{name}", dest=f"cfg.{name}", default=argparse.SUPPRESS,
                           type=lambda s, k=kind: _parse_value(k, s),
                           metavar=key.upper(), help=_flag_help(name, default))


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdnet", description="Cascaded decomposition network for cross-domain few-shot learning.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, desc) in COMMANDS.items():
        p = sub.add_parser(name, help=desc, description=desc)
        if name == "gen":
            p.add_argument("--out", help="dataset path (default <out-dir>/dataset.cdn)")
        if name not in ("gen", "gradcheck"):
            p.add_argument("--dataset", help="dataset file written by 'cdnet gen' (required)")
        if name == "finetune":
            p.add_argument("--init", help="checkpoint to start from (default: fresh weights)")
            p.add_argument("--teacher", help="frozen teacher for the penalty (default: the --init checkpoint)")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint to evaluate (required)")
        if name == "gradcheck":
            p.add_argument("--d", type=int, default=8, help="feature width of the check model (default 8)")
            p.add_argument("--raw-dim", type=int, default=6, help="raw input width of the check model (default 6)")
            p.add_argument("--n-way", type=int, default=2, help="classes in the check episode (default 2)")
            p.add_argument("--k-shot", type=int, default=2, help="support samples per class (default 2)")
            p.add_argument("--n-query", type=int, default=2, help="query samples per class (default 2)")
            p.add_argument("--eps", type=float, default=1e-6, help="finite-difference step (default 1e-6)")
            p.add_argument("--tol", type=float, default=1e-5, help="relative error tolerance (default 1e-5)")
        _add_config_flags(p)
    return parser


def _load_config_file(path: str | None):
    if path is None:
        return None
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = make_parser().parse_args(argv)
    flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg.")}
    run = None
    try:
        cfg = resolve(_load_config_file(args.config), flags)
        typed = build(cfg)
        run = Run(args.command, cfg, argv)
        summary = COMMANDS[args.command][0](args, run, *typed)
        run.close()
        print(summary)
        return 0
    except (ConfigError, SamplingError, io.FormatError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        status, code = f"configuration error: {exc}", 2
    except (ContractViolation, TrainingDiverged, FloatingPointError) as exc:
        status, code = f"contract violation: {exc}", 1
    if run is not None:
        run.close(status)
    print(f"cdnet {args.command}: {status}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
