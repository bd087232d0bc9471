"""Command-line front end: ``biasunlearn {train,eval,transfer,synth,convert}``.

Runs are described by one INI file with ``[model]``, ``[data]``, ``[train]``
and ``[eval]`` sections. Any key can be overridden from the environment as
``BIASUNLEARN_<SECTION>_<KEY>``, e.g. ``BIASUNLEARN_TRAIN_MAX_STEPS=0``.
Relative paths are resolved against the config file's directory.

Exit codes: 0 success, 2 configuration/data errors, 3 adapter incompatibility.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .bias_eval import PreferenceRule, crows_pairs_eval, crows_pairs_overall, stereoset_eval
from .corpus import STEREOSET_TYPES, ConfigurationError, CorpusError, load_crows_pairs, load_stereoset
from .objectives import LossWeights
from .scoring import AdapterError, HFCausalLM, export_adapter, import_adapter, load_adapter, load_model, save_adapter
from .trainer import TrainingConfig, train

logger = logging.getLogger("biasunlearn")

ENV_PREFIX = "BIASUNLEARN_"
EXIT_OK, EXIT_CONFIG, EXIT_ADAPTER = 0, 2, 3

_WEIGHT_KEYS = {f.name for f in dataclasses.fields(LossWeights)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainingConfig)} - {"weights"}
_KNOWN = {
    "model": {"path", "hf", "base_id"},
    "data": {"train", "dev", "test", "crowspairs", "bias_types"},
    "train": _TRAIN_KEYS | _WEIGHT_KEYS | {"output_dir"},
    "eval": {"split", "tie_credit", "batch_size", "output_dir", "strict_base"},
}


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    source: Path
    model: dict
    data: dict
    train: TrainingConfig
    output_dir: Path
    eval: dict


def _parse_value(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if kind == "int?":
            return None if raw.strip().lower() in ("", "none") else int(raw)
        if kind == "float?":
            return None if raw.strip().lower() in ("", "none") else float(raw)
        if kind == "tuple?":
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(items) or None
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: invalid value {raw!r}") from None


_TRAIN_TYPES = {
    "forget_batch": int,
    "retain_batch": int,
    "unrelated_batch": "int?",
    "learning_rate": float,
    "schedule": str,
    "optimizer": str,
    "weight_decay": float,
    "max_grad_norm": "float?",
    "probe_every": int,
    "early_stop_band": float,
    "adversarial_fraction": float,
    "max_steps": int,
    "seed": int,
    "checkpoint_every": int,
    "lora_rank": int,
    "lora_alpha": float,
    "lora_targets": "tuple?",
    "tie_credit": float,
    "checkpoint_dir": str,
}


def read_config(path: str | Path, environ=None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    environ = os.environ if environ is None else environ
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX) :].lower()
        section, _, key = rest.partition("_")
        if section in _KNOWN and key:
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, key, value)
    for section in parser.sections():
        if section not in _KNOWN:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in _KNOWN[section]:
                raise ConfigError(f"[{section}] {key}: unknown field")

    base = path.parent

    def resolve(p: str) -> Path:
        q = Path(p).expanduser()
        return q if q.is_absolute() else base / q

    model = dict(parser["model"]) if parser.has_section("model") else {}
    if "path" in model:
        model["path"] = resolve(model["path"])
    if not ({"path", "hf"} & model.keys()):
        raise ConfigError("[model] path: required (or [model] hf)")

    data = {}
    if parser.has_section("data"):
        for k, v in parser["data"].items():
            data[k] = v if k == "bias_types" else resolve(v)
    if "bias_types" in data:
        data["bias_types"] = tuple(x.strip() for x in data["bias_types"].split(",") if x.strip())

    tsec = parser["train"] if parser.has_section("train") else {}
    weights = {}
    for k in _WEIGHT_KEYS & set(tsec):
        weights[k] = _parse_value("train", k, tsec[k], float)
    kwargs = {k: _parse_value("train", k, tsec[k], _TRAIN_TYPES[k]) for k in _TRAIN_KEYS & set(tsec)}
    output_dir = resolve(tsec.get("output_dir", "run"))
    if kwargs.get("checkpoint_dir"):
        kwargs["checkpoint_dir"] = str(resolve(kwargs["checkpoint_dir"]))
    else:
        kwargs["checkpoint_dir"] = str(output_dir / "checkpoints")
    try:
        tcfg = TrainingConfig(weights=LossWeights(**weights), **kwargs)
    except ValueError as exc:  # ConfigurationError included
        raise ConfigError(f"[train] {exc}") from exc

    esec = parser["eval"] if parser.has_section("eval") else {}
    ev = {
        "split": esec.get("split", "test"),
        "tie_credit": _parse_value("eval", "tie_credit", esec.get("tie_credit", "0.5"), float),
        "batch_size": _parse_value("eval", "batch_size", esec.get("batch_size", "64"), int),
        "output_dir": resolve(esec["output_dir"]) if "output_dir" in esec else output_dir,
        "strict_base": _parse_value("eval", "strict_base", esec.get("strict_base", "true"), bool),
    }
    if ev["split"] not in ("train", "dev", "test"):
        raise ConfigError(f"[eval] split: expected train, dev or test, got {ev['split']!r}")
    return RunConfig(path, model, data, tcfg, output_dir, ev)


def _load_model(cfg: RunConfig):
    if "path" in cfg.model:
        return load_model(cfg.model["path"])
    return HFCausalLM.from_pretrained(cfg.model["hf"], cfg.model.get("base_id"))


def _dataset(cfg: RunConfig, split: str) -> list:
    if split not in cfg.data:
        raise ConfigError(f"[data] {split}: required")
    types = cfg.data.get("bias_types")
    return load_stereoset(cfg.data[split], split, frozenset(types) if types else STEREOSET_TYPES)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    train_set = _dataset(cfg, "train")
    dev_set = _dataset(cfg, "dev")
    model = _load_model(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    log_path = cfg.output_dir / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    _write_json(cfg.output_dir / "config.json", cfg.train.to_json())
    model, state, _ = train(model, train_set, dev_set, cfg.train, log_path=log_path, resume_from=args.resume)
    rule = PreferenceRule(cfg.train.tie_credit)
    dev_report = stereoset_eval(model, dev_set, rule, state.step)
    _write_json(cfg.output_dir / "dev_report.json", dev_report.to_json())
    summary = {"step": state.step, "stop_reason": state.stop_reason, "swaps": len(state.partition_state.swap_log)}
    if "test" in cfg.data:
        test_report = stereoset_eval(model, _dataset(cfg, "test"), rule, state.step)
        _write_json(cfg.output_dir / "test_report.json", test_report.to_json())
    _write_json(cfg.output_dir / "summary.json", summary)
    print(f"stopped at step {state.step} ({state.stop_reason}), {summary['swaps']} swap events")
    print(dev_report.table())
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = read_config(args.config)
    model = _load_model(cfg)
    if args.adapter:
        strict = cfg.eval["strict_base"] if args.strict_base is None else args.strict_base
        import_adapter(model, load_adapter(args.adapter), strict_base=strict)
    rule = PreferenceRule(cfg.eval["tie_credit"])
    out_dir = Path(args.out) if args.out else cfg.eval["output_dir"]
    if args.benchmark == "stereoset":
        split = args.split or cfg.eval["split"]
        report = stereoset_eval(model, _dataset(cfg, split), rule, batch_size=cfg.eval["batch_size"])
        _write_json(out_dir / f"eval_stereoset_{split}.json", report.to_json())
        print(report.table())
    else:
        if "crowspairs" not in cfg.data:
            raise ConfigError("[data] crowspairs: required for --benchmark crowspairs")
        pairs = load_crows_pairs(cfg.data["crowspairs"])
        per_type = crows_pairs_eval(model, pairs, rule, cfg.eval["batch_size"])
        overall = crows_pairs_overall(pairs, per_type)
        _write_json(out_dir / "eval_crowspairs.json", {"per_type": per_type, "overall": overall})
        width = max(10, *(len(t) + 2 for t in per_type))
        print("metric".ljust(8) + "".join(t.rjust(width) for t in [*per_type, "overall"]))
        print("SS".ljust(8) + "".join(f"{v:.2f}".rjust(width) for v in [*per_type.values(), overall]))
    return EXIT_OK


def cmd_transfer(args) -> int:
    ckpt = load_adapter(args.adapter)
    target = load_model(args.target)
    import_adapter(target, ckpt, strict_base=args.strict_base)
    meta = dict(ckpt.metadata)
    lineage = list(meta.get("lineage") or [ckpt.base_id])
    meta["lineage"] = lineage + [target.base_id]
    meta["transferred_from"] = ckpt.base_id
    save_adapter(export_adapter(target, meta), args.out)
    print(f"adapter {ckpt.base_id} -> {target.base_id}, written to {args.out}")
    return EXIT_OK


SYNTH_CONFIG = """\
[model]
path = model

[data]
train = data/train.jsonl
dev = data/dev.jsonl
test = data/test.jsonl
crowspairs = data/crows.jsonl

[train]
beta = 0.5
learning_rate = 2e-3
probe_every = 5
max_steps = 1000
output_dir = run

[eval]
split = test
"""


def cmd_synth(args) -> int:
    from .synthetic import SyntheticSpec, make_synthetic, pretrain_tiny_lm, write_synthetic

    out = Path(args.out)
    data = make_synthetic(SyntheticSpec(seed=args.seed))
    model = pretrain_tiny_lm(data, steps=args.steps, seed=args.seed)
    write_synthetic(out, data, model)
    (out / "synth.ini").write_text(SYNTH_CONFIG, encoding="utf-8")
    print(f"synthetic corpus and model written to {out}; config at {out / 'synth.ini'}")
    return EXIT_OK


def cmd_convert(args) -> int:
    from .convert import convert_crows_pairs, convert_stereoset

    n = (convert_stereoset if args.format == "stereoset" else convert_crows_pairs)(args.src, args.dst)
    print(f"wrote {n} records to {args.dst}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="biasunlearn", description="Debias causal LMs by unlearning stereotypes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run unlearning from a config file")
    p.add_argument("config")
    p.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a model on StereoSet or CrowS-Pairs")
    p.add_argument("config")
    p.add_argument("--benchmark", choices=["stereoset", "crowspairs"], default="stereoset")
    p.add_argument("--adapter", default=None, help="adapter directory to import before scoring")
    p.add_argument("--split", choices=["train", "dev", "test"], default=None)
    p.add_argument("--strict-base", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="import an adapter into another base model and re-export it")
    p.add_argument("--adapter", required=True)
    p.add_argument("--target", required=True, help="saved model directory")
    p.add_argument("--strict-base", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("synth", help="write a synthetic corpus, a pretrained tiny LM and a config")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="convert raw benchmark files to the JSONL schema")
    p.add_argument("format", choices=["stereoset", "crowspairs"])
    p.add_argument("src")
    p.add_argument("dst")
    p.set_defaults(func=cmd_convert)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AdapterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ADAPTER
    except (ConfigError, ConfigurationError, CorpusError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
