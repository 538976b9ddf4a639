"""``flowood`` command line: synth, train, score, eval, compare, ablate, export-hist, inspect.

Every option can also come from a JSON ``--config`` file (keys are the long
option names with ``-`` or ``_``; an optional per-command section overrides
top-level keys). Precedence: flags > config file > built-in defaults. Each run
writes ``resolved_config.json`` next to its outputs. Failures print a single
JSON line on stderr and exit 2 (arguments), 3 (I/O or format) or 4 (numerics).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .errors import ArgumentError, FlowOODError, FormatError, NumericalError
from .evaluator import (
    REPORT_SCHEMA_VERSION,
    ScoredDataset,
    auroc_bar_csv,
    compare_record,
    evaluate_suite,
    histogram_export,
    write_report,
)
from .features import (
    FVEC_MAGIC,
    FVEC_VERSION,
    MANIFEST_SCHEMA_VERSION,
    FeatureSet,
    atomic_write_text,
    parse_fvec_header,
    parse_stage_subset,
    preprocess,
    read_manifest,
)
from .metrics import FPR_CONVENTIONS, METRIC_NAMES, ood_metrics
from .scorers import Bundle, available_scorers, get_scorer
from .synth import default_benchmark_specs, generate_benchmark
from .trainer import CKPT_MAGIC, CKPT_VERSION, TrainConfig, load_checkpoint, parse_checkpoint_header, save_checkpoint, train

log = logging.getLogger("flowood")

OUTPUT_ENV = "FLOWOOD_OUTPUT_DIR"
DEFAULT_OUTPUT = "flowood_out"
COMMANDS = ("synth", "train", "score", "eval", "compare", "ablate", "export-hist", "inspect")


# --------------------------------------------------------------------------- #
# value parsers (accept flag strings and JSON values alike)
# --------------------------------------------------------------------------- #


def _int_list(v) -> list[int]:
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    try:
        return [int(x) for x in str(v).split(",") if x.strip()]
    except ValueError:
        raise ArgumentError(f"expected comma-separated integers, got {v!r}") from None


def _float_list(v) -> list[float]:
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    try:
        return [float(x) for x in str(v).split(",") if x.strip()]
    except ValueError:
        raise ArgumentError(f"expected comma-separated numbers, got {v!r}") from None


def _str_list(v) -> list[str]:
    if isinstance(v, (list, tuple)):
        return [str(x) for x in v]
    return [x.strip() for x in str(v).split(";") if x.strip()]


def _choice(*options) -> Callable[[Any], str]:
    def parse(v):
        if v not in options:
            raise ArgumentError(f"expected one of {list(options)}, got {v!r}")
        return v

    return parse


def _opt_int(v):
    return None if v is None else int(v)


def _opt_float(v):
    return None if v is None else float(v)


@dataclass(frozen=True)
class Opt:
    name: str
    parse: Callable[[Any], Any]
    default: Any
    help: str = ""

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


_DATA = [
    Opt("manifest", str, None, "dataset manifest (default: <out>/manifest.json)"),
]
_FLOW = [
    Opt("checkpoint", str, None, "flow checkpoint (default: <out>/flow.nfck)"),
]
_SCORER = [
    Opt("scorer", str, "flow", "scorer name (" + ", ".join(available_scorers()) + ")"),
    Opt("temperature", _opt_float, None, "temperature for msp/msp_temp/energy"),
    Opt("percentile", _opt_float, None, "ReAct clipping percentile"),
    Opt("principal-dim", _opt_int, None, "ViM principal subspace dimension"),
    Opt("alpha", _opt_float, None, "ViM residual scale (default: fitted)"),
]
_EVAL = [
    Opt("n-boot", int, 1000, "bootstrap replicates (0 disables CIs)"),
    Opt("tpr", float, 0.95, "target OOD recall for FPR"),
    Opt("fpr-convention", _choice(*FPR_CONVENTIONS), "ood-positive", "FPR convention"),
]
_TRAIN = [
    Opt("stages", str, "all", "stage subset: all, last-k or comma-separated indices"),
    Opt("l2", _choice("concat", "per-stage", "none"), "concat", "L2 normalization mode"),
    Opt("epsilon", float, 1e-12, "L2 normalization floor"),
    Opt("epochs", int, 100, "training epochs"),
    Opt("batch-size", int, 256, "minibatch size"),
    Opt("lr", float, 1e-4, "Adam learning rate"),
    Opt("fraction", float, 1.0, "fraction of id_train used"),
    Opt("hidden", _int_list, [512, 1024, 512], "hidden widths of each coupling MLP"),
    Opt("n-blocks", int, 4, "number of flow blocks"),
    Opt("clamp", float, 2.0, "soft clamp on coupling log-scales"),
    Opt("eval-every", int, 1, "epochs between validation passes"),
]
_SEED = [Opt("seed", int, 0, "random seed")]

OPTIONS: dict[str, list[Opt]] = {
    "synth": _SEED + [
        Opt("stage-dims", _int_list, [4, 4, 8], "stage widths; the last stage feeds the classifier head"),
        Opt("n-classes", int, 4, "ID classes"),
        Opt("separation", float, 3.0, "norm of each class mean per stage"),
        Opt("near-shift", float, 1.5, "near-OOD mean shift in standard deviations"),
        Opt("far-shift", float, 6.0, "far-OOD mean shift in standard deviations"),
        Opt("n-train", int, 4000, "ID training samples"),
        Opt("n-val", int, 500, "validation samples per role"),
        Opt("n-test", int, 2000, "test samples per dataset"),
    ],
    "train": _SEED + _DATA + _FLOW + _TRAIN,
    "score": _SEED + _DATA + _FLOW + _SCORER,
    "eval": _SEED + _DATA + _FLOW + _SCORER + _EVAL + [Opt("scores", str, None, "score CSV instead of a scorer")],
    "compare": _SEED + _DATA + _EVAL + [
        Opt("scorer-a", str, "flow", "first method"),
        Opt("scorer-b", str, "energy", "second method"),
        Opt("checkpoint-a", str, None, "flow checkpoint for method a (default: <out>/flow.nfck)"),
        Opt("checkpoint-b", str, None, "flow checkpoint for method b (default: <out>/flow.nfck)"),
        Opt("scores-a", str, None, "score CSV for method a"),
        Opt("scores-b", str, None, "score CSV for method b"),
    ] + _SCORER[1:],
    "ablate": _SEED + _DATA + _TRAIN[1:] + _EVAL[1:] + [
        Opt("stage-subsets", _str_list, ["all"], "';'-separated stage subsets, e.g. 'last-1;last-2;all'"),
        Opt("epochs-list", _int_list, None, "comma-separated epoch budgets (default: --epochs)"),
        Opt("fractions", _float_list, None, "comma-separated data fractions (default: --fraction)"),
    ],
    "export-hist": _SEED + _DATA + _FLOW + _SCORER + [
        Opt("scores", str, None, "score CSV instead of a scorer"),
        Opt("bins", int, 50, "histogram bins"),
    ],
    "inspect": [],
}


# --------------------------------------------------------------------------- #
# resolved configuration
# --------------------------------------------------------------------------- #


@dataclass
class RunConfig:
    command: str
    values: dict
    out_dir: Path

    @property
    def seed(self) -> int:
        return int(self.values.get("seed", 0))

    def __getitem__(self, key: str):
        return self.values[key.replace("-", "_")]

    def to_json(self) -> str:
        doc = {"command": self.command, "flowood_version": __version__, "out": str(self.out_dir), **self.values}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self) -> None:
        atomic_write_text(self.out_dir / "resolved_config.json", self.to_json())


def _load_config_file(path: str | None, command: str) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"config {path} must be a JSON object")
    flat = {k.replace("-", "_"): v for k, v in doc.items() if not isinstance(v, dict) or k not in COMMANDS}
    section = doc.get(command, {})
    if not isinstance(section, dict):
        raise FormatError(f"config section {command!r} must be an object")
    flat.update({k.replace("-", "_"): v for k, v in section.items()})
    return flat


def resolve_config(command: str, flags: dict, config_path: str | None = None,
                   env: dict | None = None) -> RunConfig:
    """Merge built-in defaults, the config file and explicit flags (later wins)."""
    env = os.environ if env is None else env
    file_values = _load_config_file(config_path, command)
    known = {o.dest for o in OPTIONS[command]} | {"out"}
    for key in sorted(set(file_values) - known):
        log.debug("config key %r does not apply to %s; ignored", key, command)
    values = {}
    for opt in OPTIONS[command]:
        raw = flags.get(opt.dest)
        if raw is None:
            raw = file_values.get(opt.dest, opt.default)
        try:
            values[opt.dest] = None if raw is None else opt.parse(raw)
        except (TypeError, ValueError) as exc:
            raise ArgumentError(f"--{opt.name}: {exc}") from None
    out = Path(flags.get("out") or file_values.get("out") or env.get(OUTPUT_ENV) or DEFAULT_OUTPUT)
    defaults = {"manifest": "manifest.json", "checkpoint": "flow.nfck", "checkpoint_a": "flow.nfck",
                "checkpoint_b": "flow.nfck"}
    for key, fname in defaults.items():
        if key in values and values[key] is None:
            values[key] = str(out / fname)
    return RunConfig(command, values, out)


# --------------------------------------------------------------------------- #
# shared helpers
# --------------------------------------------------------------------------- #


def _manifest(cfg: RunConfig):
    return read_manifest(cfg["manifest"])


def _train_config(cfg: RunConfig, **override) -> TrainConfig:
    v = cfg.values
    kw = dict(learning_rate=v["lr"], epochs=v["epochs"], batch_size=v["batch_size"], seed=v["seed"],
              clamp=v["clamp"], data_fraction=v["fraction"], eval_every=v["eval_every"], n_blocks=v["n_blocks"],
              hidden=tuple(v["hidden"]))
    return TrainConfig(**{**kw, **override})


def _concat(sets: Sequence[FeatureSet], name: str) -> FeatureSet:
    if len(sets) == 1:
        return sets[0]
    dims = {fs.stage_dims for fs in sets}
    if len(dims) != 1:
        raise ArgumentError(f"cannot pool {name}: stage layouts differ {sorted(dims)}")
    return FeatureSet(np.concatenate([fs.data for fs in sets]), sets[0].stage_dims, name=name)


def _fit_train(manifest, cfg: RunConfig, stages_spec: str, config: TrainConfig, snapshot_epochs=()):
    train_fs = manifest.load_role("id_train")[0]
    id_val, ood_val = manifest.load_role("id_val"), manifest.load_role("ood_val")
    if not id_val or not ood_val:
        raise ArgumentError("training needs id_val and ood_val entries in the manifest for model selection")
    stages = parse_stage_subset(stages_spec, len(train_fs.stage_dims))
    prep = {"stages": stages, "l2": cfg["l2"], "epsilon": cfg["epsilon"]}

    def p(fs):
        return preprocess(fs, stages, prep["l2"], prep["epsilon"])

    ck = train(p(train_fs), p(_concat(id_val, "id_val")), p(_concat(ood_val, "ood_val")), config,
               snapshot_epochs=snapshot_epochs)
    for c in (ck, *ck.snapshots.values()):
        c.meta["preprocess"] = prep
    return ck


def _scorer_params(cfg: RunConfig) -> dict:
    return {k: cfg.values.get(k) for k in ("temperature", "percentile", "principal_dim", "alpha")}


def _build_scorer(name: str, cfg: RunConfig, manifest, checkpoint: str | None):
    """Fitted scorer plus a callable mapping a FeatureSet to scores."""
    head = manifest.load_head()
    pen = manifest.penultimate_stage
    if name == "flow":
        ck = load_checkpoint(checkpoint)
        prep = ck.meta.get("preprocess", {})
        scorer = get_scorer("flow", model=ck.model, stages=prep.get("stages"), l2=prep.get("l2"),
                            epsilon=prep.get("epsilon"))
        params = {"preprocess": prep, "best_epoch": ck.best_epoch}
    else:
        scorer = get_scorer(name, **_scorer_params(cfg))
        if scorer.needs_fit:
            scorer.fit(Bundle(manifest.load_role("id_train")[0], head, pen))
        params = scorer.params()
    return (lambda fs: scorer.score(Bundle(fs, head, pen))), params


def _score_test_sets(manifest, score_fn) -> list[tuple[str, str, str, np.ndarray]]:
    """(dataset, role, category, scores) for every id_test and ood_test entry, in manifest order."""
    rows = []
    for e in manifest.entries:
        if e.role in ("id_test", "ood_test"):
            s = np.asarray(score_fn(manifest.load(e)), dtype=np.float64)
            if not np.isfinite(s).all():
                raise NumericalError(f"non-finite scores on dataset {e.label!r}")
            rows.append((e.label, e.role, e.category, s))
    return rows


def scores_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "role", "category", "index", "score"])
    for name, role, cat, s in rows:
        for i, v in enumerate(s):
            w.writerow([name, role, cat, i, repr(float(v))])
    return buf.getvalue()


def read_scores_csv(path: str | os.PathLike) -> list[tuple[str, str, str, np.ndarray]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read scores {path}: {exc.strerror or exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != ["dataset", "role", "category", "index", "score"]:
        raise FormatError(f"{path}: unexpected score CSV header {reader.fieldnames}")
    groups: dict[tuple[str, str, str], list[float]] = {}
    try:
        for r in reader:
            groups.setdefault((r["dataset"], r["role"], r["category"]), []).append(float(r["score"]))
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed score row: {exc}") from exc
    return [(k[0], k[1], k[2], np.array(v)) for k, v in groups.items()]


def _scored(rows) -> tuple[ScoredDataset, list[ScoredDataset]]:
    ids = [r for r in rows if r[1] == "id_test"]
    oods = [r for r in rows if r[1] == "ood_test"]
    if not ids or not oods:
        raise ArgumentError("scores need at least one id_test and one ood_test dataset")
    name = ids[0][0] if len(ids) == 1 else "+".join(r[0] for r in ids)
    id_set = ScoredDataset(np.concatenate([r[3] for r in ids]), "id", name, "id")
    return id_set, [ScoredDataset(r[3], "ood", r[0], r[2]) for r in oods]


def _rows_for(cfg: RunConfig, scores_key: str, scorer_key: str, ckpt_key: str | None):
    if cfg.values.get(scores_key):
        return read_scores_csv(cfg[scores_key]), {"source": "scores"}, "scores"
    manifest = _manifest(cfg)
    name = cfg[scorer_key]
    fn, params = _build_scorer(name, cfg, manifest, cfg.values.get(ckpt_key) if ckpt_key else None)
    return _score_test_sets(manifest, fn), params, name


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #


def cmd_synth(cfg: RunConfig) -> None:
    v = cfg.values
    id_spec, ood_specs = default_benchmark_specs(
        v["stage_dims"], v["n_classes"], v["near_shift"], v["far_shift"], v["n_train"], v["n_val"], v["n_test"],
        cfg.seed, v["separation"],
    )
    generate_benchmark(id_spec, ood_specs, cfg.out_dir, v["stage_dims"])
    print(cfg.out_dir / "manifest.json")


def cmd_train(cfg: RunConfig) -> None:
    manifest = _manifest(cfg)
    ck = _fit_train(manifest, cfg, cfg["stages"], _train_config(cfg))
    path = Path(cfg["checkpoint"])
    save_checkpoint(path, ck.model, ck.meta)
    print(json.dumps({"checkpoint": str(path), "best_epoch": ck.best_epoch, "best_val_auroc": ck.best_val_auroc}))


def cmd_score(cfg: RunConfig) -> None:
    manifest = _manifest(cfg)
    fn, _ = _build_scorer(cfg["scorer"], cfg, manifest, cfg["checkpoint"])
    path = cfg.out_dir / f"scores_{cfg['scorer']}.csv"
    atomic_write_text(path, scores_csv(_score_test_sets(manifest, fn)))
    print(path)


def _eval_settings(cfg: RunConfig, label: str, params: dict) -> dict:
    return {"scorer": label, "scorer_params": params}


def cmd_eval(cfg: RunConfig) -> None:
    rows, params, label = _rows_for(cfg, "scores", "scorer", "checkpoint")
    id_set, ood_sets = _scored(rows)
    report = evaluate_suite(id_set, ood_sets, cfg["n_boot"], cfg.seed, cfg["tpr"], cfg["fpr_convention"])
    report.settings.update(_eval_settings(cfg, label, params))
    js, txt = write_report(cfg.out_dir, report, "report")
    atomic_write_text(cfg.out_dir / "auroc.csv", auroc_bar_csv(report))
    sys.stdout.write(report.render())


def cmd_compare(cfg: RunConfig) -> None:
    rows_a, params_a, label_a = _rows_for(cfg, "scores_a", "scorer_a", "checkpoint_a")
    rows_b, params_b, label_b = _rows_for(cfg, "scores_b", "scorer_b", "checkpoint_b")
    if [r[:3] for r in rows_a] != [r[:3] for r in rows_b] or any(
        ra[3].size != rb[3].size for ra, rb in zip(rows_a, rows_b)
    ):
        raise ArgumentError("the two methods were not scored on the same datasets")
    id_a, ood_a = _scored(rows_a)
    id_b, ood_b = _scored(rows_b)
    report = evaluate_suite(id_a, ood_a, cfg["n_boot"], cfg.seed, cfg["tpr"], cfg["fpr_convention"])
    report.settings.update({"method_a": label_a, "method_b": label_b, "params_a": params_a, "params_b": params_b})
    n_boot = max(cfg["n_boot"], 1)

    def rec(scope, oa, ob):
        roles = np.r_[np.ones(id_a.scores.size, bool), np.zeros(oa.size, bool)]
        return compare_record(label_a if label_a != label_b else f"{label_a}:a",
                              label_b if label_a != label_b else f"{label_b}:b", scope,
                              np.r_[id_a.scores, oa], np.r_[id_b.scores, ob], roles, n_boot, cfg.seed)

    report.comparisons = [rec(a.name, a.scores, b.scores) for a, b in zip(ood_a, ood_b)]
    report.comparisons.append(rec("micro", np.concatenate([a.scores for a in ood_a]),
                                  np.concatenate([b.scores for b in ood_b])))
    write_report(cfg.out_dir, report, "compare")
    sys.stdout.write(report.render())


ABLATION_COLUMNS = ["stages", "epochs", "fraction", "best_epoch", "best_val_auroc", *METRIC_NAMES]


def cmd_ablate(cfg: RunConfig) -> None:
    manifest = _manifest(cfg)
    epochs_list = sorted(set(cfg["epochs_list"] or [cfg["epochs"]]))
    fractions = cfg["fractions"] or [cfg["fraction"]]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for subset in cfg["stage_subsets"]:
        for frac in fractions:
            config = _train_config(cfg, epochs=max(epochs_list), data_fraction=frac)
            ck = _fit_train(manifest, cfg, subset, config, snapshot_epochs=epochs_list)
            for ep in epochs_list:
                snap = ck.snapshots[ep]
                prep = snap.meta["preprocess"]
                scorer = get_scorer("flow", model=snap.model, stages=prep["stages"], l2=prep["l2"],
                                    epsilon=prep["epsilon"])
                id_set, ood_sets = _scored(_score_test_sets(manifest, lambda fs: scorer.score(Bundle(fs))))
                m = ood_metrics(id_set.scores, np.concatenate([o.scores for o in ood_sets]), cfg["tpr"],
                                cfg["fpr_convention"])
                w.writerow([subset, ep, repr(frac), snap.best_epoch, repr(snap.best_val_auroc),
                            *(repr(m[k]) for k in METRIC_NAMES)])
                log.info("ablate %s epochs=%d fraction=%g auroc=%.4f", subset, ep, frac, m["auroc"])
    path = cfg.out_dir / "ablation.csv"
    atomic_write_text(path, buf.getvalue())
    sys.stdout.write(buf.getvalue())


def cmd_export_hist(cfg: RunConfig) -> None:
    rows, _, label = _rows_for(cfg, "scores", "scorer", "checkpoint")
    groups = {name: s for name, _, _, s in rows}
    csv_path, svg_path = histogram_export(groups, cfg["bins"], cfg.out_dir / f"hist_{label}",
                                          title=f"{label} scores")
    print(csv_path)
    print(svg_path)


def inspect_file(path: str | os.PathLike) -> dict:
    """Header fields of an FVEC, NFCK checkpoint or manifest file."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if buf[:4] == FVEC_MAGIC:
        return {"format": "FVEC", **parse_fvec_header(buf)}
    if buf[:4] == CKPT_MAGIC:
        head = parse_checkpoint_header(buf)
        head["masks"] = head["masks"].astype(int).tolist()
        return {"format": "NFCK", "size_bytes": len(buf), **head}
    if buf.lstrip()[:1] == b"{":
        m = read_manifest(path)
        return {"format": "manifest", "schema_version": MANIFEST_SCHEMA_VERSION,
                "penultimate_stage": m.penultimate_stage, "head_path": m.head_path,
                "entries": [{"path": e.path, "role": e.role, "category": e.category, "name": e.label}
                            for e in m.entries]}
    raise FormatError(f"{path}: unrecognized file format")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
    "export-hist": cmd_export_hist,
}


# --------------------------------------------------------------------------- #
# argument parsing and entry point
# --------------------------------------------------------------------------- #


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def version_string() -> str:
    return (f"flowood {__version__} (fvec v{FVEC_VERSION}, nfck v{CKPT_VERSION}, "
            f"manifest v{MANIFEST_SCHEMA_VERSION}, report v{REPORT_SCHEMA_VERSION})")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowood", description="Normalizing-flow OOD detection on feature dumps.")
    p.add_argument("--version", action="version", version=version_string())
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name == "inspect":
            sp.add_argument("paths", nargs="+", help="FVEC, checkpoint or manifest files")
            continue
        sp.add_argument("--config", help="JSON config file with option defaults")
        sp.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
        for opt in OPTIONS[name]:
            default = opt.default if not isinstance(opt.default, list) else ",".join(map(str, opt.default))
            sp.add_argument(f"--{opt.name}", dest=opt.dest, default=None,
                            help=f"{opt.help} [default: {default}]")
    return p


def _fail(exc: BaseException, code: int) -> int:
    line = {"error": type(exc).__name__, "exit_code": code, "message": str(exc)}
    sys.stderr.write(json.dumps(line) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "inspect":
            for path in args.paths:
                print(json.dumps({"path": path, **inspect_file(path)}, default=_jsonable, sort_keys=True))
            return 0
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
        cfg = resolve_config(args.command, flags, args.config)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg)
        cfg.write()
        return 0
    except FlowOODError as exc:
        return _fail(exc, exc.exit_code)
    except OSError as exc:
        return _fail(exc, 3)
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail(exc, 4)


def run(command: str, args: Sequence[str] = ()) -> int:
    return main([command, *args])


if __name__ == "__main__":
    sys.exit(main())
