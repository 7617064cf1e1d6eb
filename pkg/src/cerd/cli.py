"""Command-line front end: ``cerd {synth,train,eval,attribute,ablate,gradcheck}``.

Settings come from an optional JSON config file and ``--set key=value``
overrides, in that order.  The config document has four optional keys::

    {"preset": "desk", "train": {...}, "synth": {...}, "manifest": "data/manifest.json"}

``preset`` picks the training defaults ("desk": D=16, P=4; "paper": D=128,
P=16) that the ``train`` section then overrides.  Every output directory gets
a ``config.json`` holding the effective settings.  When ``--out`` is omitted,
output goes to ``$CERD_OUTPUT_ROOT/<command>`` (default root ``cerd-output``).

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal-consistency failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import tensor as T
from .cer import plan_masking
from .data_io import load, write
from .errors import CERDError, ConfigurationError, ConsistencyError
from .evidence import importance_summary
from .model import CERDModel, TrainConfig, desk_config
from .synth import SyntheticSpec, generate, planted_importance
from .tokenize import ModalityCatalog, SubjectBatch
from .train import VARIANTS, Checkpoint, attribute, evaluate, run_training, total_loss

log = logging.getLogger("cerd")

OUTPUT_ROOT_ENV = "CERD_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "cerd-output"
PRESETS = {"desk": desk_config, "paper": TrainConfig}
CONFIG_KEYS = ("preset", "train", "synth", "manifest")
GRADCHECK_TOL = 1e-4
METRICS = ("acc", "f1", "auc")


class UsageError(CERDError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- config


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=(), section: str = "train") -> dict:
    """Merge a config file with ``key=value`` overrides.

    Bare keys go to ``section``; ``train.lr`` or ``synth.seed`` address a
    section explicitly.  Unknown keys raise :class:`ConfigurationError`.
    """
    doc = {"preset": "desk", "train": {}, "synth": {}, "manifest": None}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigurationError("config file must hold a JSON object")
        unknown = sorted(set(raw) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        for key in ("train", "synth"):
            doc[key].update(raw.get(key) or {})
        doc["preset"] = raw.get("preset", doc["preset"])
        doc["manifest"] = raw.get("manifest")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not of the form key=value")
        if key in ("preset", "manifest"):
            doc[key] = value
            continue
        target, _, name = key.rpartition(".")
        target = target or section
        if target not in ("train", "synth"):
            raise ConfigurationError(f"unknown config section {target!r} in override {item!r}")
        doc[target][name] = _parse_value(value)
    if doc["preset"] not in PRESETS:
        raise ConfigurationError(f"preset must be one of {sorted(PRESETS)}, got {doc['preset']!r}")
    return doc


def train_config(doc: dict) -> TrainConfig:
    return PRESETS[doc["preset"]]().replace(**doc["train"])


def synth_spec(doc: dict) -> SyntheticSpec:
    return SyntheticSpec.from_dict(doc["synth"]).validate()


def _effective(doc: dict, train: TrainConfig | None = None, spec: SyntheticSpec | None = None, **extra) -> dict:
    out = {"preset": doc["preset"]}
    if train is not None:
        out["train"] = train.to_dict()
    if spec is not None:
        out["synth"] = spec.to_dict()
    out.update(extra)
    return out


# ---------------------------------------------------------------- output helpers


def output_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)) / args.command


def _prepare(out: Path, effective: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", effective)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _metrics_csv(rows: dict[str, dict[str, float]]) -> str:
    return _csv_text(["split", *METRICS], [[name, *(repr(m[k]) for k in METRICS)] for name, m in rows.items()])


def _manifest(args, doc: dict) -> Path:
    path = args.data or doc["manifest"]
    if not path:
        raise UsageError("no data: pass --data or set 'manifest' in the config file")
    return Path(path)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    doc = load_config(args.config, args.set, section="synth")
    if args.spec:
        try:
            doc["synth"].update(json.loads(Path(args.spec).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise ConfigurationError(f"spec file {args.spec} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"spec file {args.spec} is not valid JSON: {exc}") from None
    spec = synth_spec(doc)
    dataset = generate(spec)
    out = _prepare(output_dir(args), _effective(doc, spec=spec))
    manifest = write(dataset, out, write_mask=args.write_mask)
    _write_json(out / "importance.json", planted_importance(spec))
    print(manifest)
    return 0


def cmd_train(args) -> int:
    doc = load_config(args.config, args.set)
    cfg = train_config(doc)
    manifest = _manifest(args, doc)
    dataset = load(manifest, column_fill=args.column_fill)
    out = _prepare(output_dir(args), _effective(doc, train=cfg, manifest=str(manifest)))
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:

        def on_epoch(record):
            fh.write(json.dumps(record.to_dict()) + "\n")
            fh.flush()

        result = run_training(cfg, dataset, on_epoch)
    result.checkpoint.save(out / "checkpoint.json")
    rows = {s: evaluate(result.checkpoint, dataset, s) for s in ("val", "test")}
    (out / "final_metrics.csv").write_text(_metrics_csv(rows), encoding="utf-8")
    print(f"best_epoch={result.checkpoint.best_epoch} " + " ".join(f"test_{k}={rows['test'][k]:.4f}" for k in METRICS))
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    dataset = load(args.data, column_fill=args.column_fill)
    metrics = evaluate(ckpt, dataset, args.split)
    out = _prepare(output_dir(args), {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split})
    (out / f"eval_{args.split}.csv").write_text(_metrics_csv({args.split: metrics}), encoding="utf-8")
    print(" ".join(f"{k}={metrics[k]:.4f}" for k in METRICS))
    return 0


def cmd_attribute(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    dataset = load(args.data, column_fill=args.column_fill)
    reports = attribute(ckpt, dataset, args.split)
    summary = importance_summary(reports, list(dataset.classes))
    weight_total = float(summary.mean_weight.sum())
    if abs(weight_total - 1.0) > 1e-9:
        raise ConsistencyError(f"mean modality weights sum to {weight_total!r}")
    out = _prepare(output_dir(args), {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split})
    with open(out / "reports.jsonl", "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
    (out / "importance_summary.csv").write_text(summary.to_csv(), encoding="utf-8")
    _write_json(out / "importance_summary.json", summary.to_dict())
    print(f"{len(reports)} reports; top modality by mean |contribution|: {summary.top_modality()}")
    return 0


def _ablation_run(cfg_dict: dict, manifest: str, column_fill: bool, run_dir: str):
    cfg = TrainConfig.from_dict(cfg_dict)
    dataset = load(manifest, column_fill=column_fill)
    result = run_training(cfg, dataset)
    n_params = int(sum(v.size for v in result.checkpoint.state.values()))
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    (Path(run_dir) / "final_metrics.csv").write_text(_metrics_csv({"test": result.test}), encoding="utf-8")
    return n_params, result.test


def ablation_csv(variants, seeds, n_params: dict, runs: dict) -> str:
    header = ["variant", "n_params"]
    header += [f"seed{s}_{k}" for s in seeds for k in METRICS]
    header += [f"median_{k}" for k in METRICS]
    rows = []
    for v in variants:
        row = [v, n_params[v]]
        row += [repr(runs[v, s][k]) for s in seeds for k in METRICS]
        row += [repr(float(np.median([runs[v, s][k] for s in seeds]))) for k in METRICS]
        rows.append(row)
    return _csv_text(header, rows)


def cmd_ablate(args) -> int:
    doc = load_config(args.config, args.set)
    base = train_config(doc)
    manifest = _manifest(args, doc)
    load(manifest, column_fill=args.column_fill)  # fail fast on bad data
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigurationError(f"unknown ablation variants {unknown}; choose from {list(VARIANTS)}")
    seeds = list(range(args.seeds))
    out = _prepare(output_dir(args), _effective(doc, train=base, manifest=str(manifest), seeds=seeds, variants=variants))
    jobs = [(v, s) for v in variants for s in seeds]
    payload = [
        (base.replace(seed=s, **VARIANTS[v]).to_dict(), str(manifest), args.column_fill, str(out / "runs" / v / f"seed{s}"))
        for v, s in jobs
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_ablation_run, *zip(*payload)))
    else:
        results = [_ablation_run(*p) for p in payload]
    n_params, runs = {}, {}
    for (v, s), (count, test) in zip(jobs, results):
        n_params[v] = count
        runs[v, s] = test
        log.info("%s seed %d: %s", v, s, test)
    (out / "ablation.csv").write_text(ablation_csv(variants, seeds, n_params, runs), encoding="utf-8")
    for v in variants:
        print(v, " ".join(f"{k}={np.median([runs[v, s][k] for s in seeds]):.4f}" for k in METRICS))
    return 0


# ---------------------------------------------------------------- gradient check


def _module_name(param_name: str) -> str:
    parts = [p for p in param_name.split(".") if not p.isdigit()]
    return ".".join(parts[:2])


def tiny_gradcheck(seed: int = 0, step: float = 1e-5) -> dict[str, float]:
    """Max relative gradient error per module on the tiny full pipeline.

    Two subjects over three modalities, one of them missing a modality, so
    completion, routing, fusion, attribution and the reconstruction loss all
    contribute.  Dropout is off so the loss is a deterministic function of
    the parameters, and the reconstruction target is not detached so the
    analytic gradient covers the same function finite differences probe.
    """
    cfg = TrainConfig(hidden=8, tokens=2, experts=4, top_k=2, heads=2, batch_size=2, detach_target=False, seed=seed)
    dims = (3, 4, 2)
    model = CERDModel(ModalityCatalog(("A", "B", "C"), dims, cfg.tokens, cfg.hidden), 3, cfg).eval()
    rng = np.random.default_rng(seed)
    features = [rng.normal(size=(2, d)) for d in dims]
    features[1][1] = np.nan
    batch = SubjectBatch(features, [[True, True, True], [True, False, True]], [0, 2], ["g0", "g1"])
    plan = plan_masking([0], len(dims), rng, exhaustive=True)

    def loss():
        out = model(batch)
        rec = model.reconstruction_loss(out.tokens, rng, plan)
        return total_loss(out.logits, batch.labels, rec, cfg.rec_weight)

    names = [n for n, _ in model.named_parameters()]
    reports = T.check_parameter_gradients(loss, model.parameters(), step=step, tol=GRADCHECK_TOL)
    worst: dict[str, float] = {}
    for name, report in zip(names, reports):
        key = _module_name(name)
        worst[key] = max(worst.get(key, 0.0), report.max_rel_error)
    return worst


def cmd_gradcheck(args) -> int:
    if args.scale != "tiny":
        raise UsageError(f"unsupported gradcheck scale {args.scale!r}")
    worst = tiny_gradcheck(args.seed)
    failed = [k for k, v in worst.items() if not v < GRADCHECK_TOL]
    for name, err in worst.items():
        print(f"{name:28s} {err:.3e} {'FAIL' if name in failed else 'ok'}")
    print(f"max relative error {max(worst.values()):.3e} (tolerance {GRADCHECK_TOL:g})")
    if args.out:
        out = _prepare(output_dir(args), {"scale": args.scale, "seed": args.seed})
        _write_json(out / "gradcheck.json", worst)
    return 3 if failed else 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cerd", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True, config=True):
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV} or {DEFAULT_OUTPUT_ROOT})")
        if config:
            p.add_argument("--config", help="JSON config file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")
        if data:
            p.add_argument("--column-fill", action="store_true", help="median-fill isolated NaNs in observed rows")

    p = sub.add_parser("synth", help="write a synthetic bundle with planted signal")
    common(p, data=False)
    p.add_argument("--spec", help="JSON file with synthetic spec fields")
    p.add_argument("--write-mask", action="store_true", help="also write an explicit mask.csv")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--data", help="bundle manifest")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "score a checkpoint"),
                                 ("attribute", cmd_attribute, "write per-subject evidence reports")):
        p = sub.add_parser(name, help=helptext)
        common(p, config=False)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help="bundle manifest")
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="train every ablation variant over several seeds")
    common(p)
    p.add_argument("--data", help="bundle manifest")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, 0..k-1 (default 5)")
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANTS)}")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    p.add_argument("--scale", default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional directory for gradcheck.json")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _report(exc: BaseException, code: int) -> int:
    message = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print("cerd: " + json.dumps(message), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        return args.func(args)
    except CERDError as exc:
        return _report(exc, exc.exit_code)
    except (OSError, ValueError, KeyError) as exc:
        # unreadable or malformed input files
        return _report(exc, 2)


if __name__ == "__main__":
    sys.exit(main())
