"""Configuration-driven orchestration: prepare, tune, train, evaluate, report.

One INI file describes one experiment: where the raw interactions and
feature files live, how to preprocess them, which model to run with
which trainer and grid, and where artifacts go. Every command is a
function here; the CLI in cli.py is a thin argument layer over them.

Determinism contract: with a fixed config, fixed seeds and threads=1,
manifest, checkpoint, metrics and report bytes are identical across
runs. Wall-clock numbers are quarantined in timings.json and trace.tsv
so the deterministic artifacts stay byte-comparable.
"""

import configparser
import io
import json
import os
import string
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__
from . import dataset as ds
from . import evaluation as ev
from . import training as tr
from .modality import MISSING_POLICIES, MultimodalStore, load_features
from .models import (
    ModelConfig,
    ModelData,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .schema import train_loop

DEFAULT_CUTOFFS = (10, 20)
METRIC_LABELS = {"recall": "Recall", "ndcg": "nDCG", "efd": "EFD",
                 "gini": "Gini", "aplt": "APLT", "icov": "iCov"}


class ConfigError(ValueError):
    """Experiment configuration is malformed or references missing files."""


@dataclass
class ExperimentConfig:
    interactions: str
    features: dict               # modality -> path, ${VARS} unresolved
    model: ModelConfig
    trainer: tr.TrainerConfig = field(default_factory=tr.TrainerConfig)
    missing_policy: str = "error"
    kcore: int = 5
    train_ratio: float = 0.8
    split_seed: int = 0
    grid_lrs: tuple = tr.DEFAULT_GRID_LRS
    grid_regs: tuple = tr.DEFAULT_GRID_REGS
    cutoffs: tuple = DEFAULT_CUTOFFS
    out_dir: str = "runs/experiment"

    def __post_init__(self):
        if not self.features:
            raise ConfigError("at least one modality feature file required")
        if self.missing_policy not in MISSING_POLICIES:
            raise ConfigError(
                f"missing policy {self.missing_policy!r} not in {MISSING_POLICIES}"
            )
        if self.kcore < 1:
            raise ConfigError(f"kcore must be >= 1, got {self.kcore}")
        if not 0.0 < self.train_ratio < 1.0:
            raise ConfigError(f"train_ratio must be in (0, 1), got {self.train_ratio}")
        self.cutoffs = tuple(int(k) for k in self.cutoffs)
        if not self.cutoffs or any(k < 1 for k in self.cutoffs):
            raise ConfigError(f"cutoffs must be positive, got {self.cutoffs}")
        self.grid_lrs = tuple(float(x) for x in self.grid_lrs)
        self.grid_regs = tuple(float(x) for x in self.grid_regs)
        self.features = dict(self.features)
        if "$" in self.out_dir:
            raise ConfigError(
                "environment substitution applies to data paths only; "
                f"output dir {self.out_dir!r} must be literal (or use --out)"
            )


def resolve_path(raw: str) -> str:
    """Expand ${VAR} references from the environment."""
    try:
        return string.Template(raw).substitute(os.environ)
    except KeyError as exc:
        raise ConfigError(
            f"path {raw!r} references unset environment variable {exc}"
        ) from None


def validate_paths(config: ExperimentConfig):
    """Every referenced input file must exist before any work starts."""
    paths = {"interactions": resolve_path(config.interactions)}
    for m, p in sorted(config.features.items()):
        paths[f"features[{m}]"] = resolve_path(p)
    for label, path in paths.items():
        if not os.path.isfile(path):
            raise ConfigError(f"{label}: no such file {path!r}")


# ------------------------------------------------------------ serialization

def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def _parse_typed(text, ftype):
    text = text.strip()
    if ftype is bool:
        if text.lower() not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if ftype is int:
        return int(text)
    if ftype is float:
        return float(text)
    return text


_SCALARS = {"int": int, "float": float, "bool": bool, "str": str}


def _field_type(f):
    """Scalar type of a dataclass field, tolerant of string annotations."""
    if isinstance(f.type, str):
        return _SCALARS.get(f.type)
    return f.type if f.type in (int, float, bool, str) else None


def serialize_config(config: ExperimentConfig) -> str:
    """Render to INI text; parse_config inverts this exactly."""
    cp = configparser.ConfigParser()
    cp["data"] = {"interactions": config.interactions,
                  "missing": config.missing_policy}
    for m in sorted(config.features):
        cp["data"][f"feature.{m}"] = config.features[m]
    cp["prepare"] = {
        "kcore": str(config.kcore),
        "train_ratio": repr(config.train_ratio),
        "seed": str(config.split_seed),
    }
    cp["model"] = {
        f.name: _format_value(getattr(config.model, f.name))
        for f in fields(ModelConfig)
    }
    cp["trainer"] = {
        f.name: _format_value(getattr(config.trainer, f.name))
        for f in fields(tr.TrainerConfig)
    }
    cp["grid"] = {"lrs": _format_value(config.grid_lrs),
                  "regs": _format_value(config.grid_regs)}
    cp["evaluation"] = {"cutoffs": _format_value(config.cutoffs)}
    cp["output"] = {"dir": config.out_dir}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad config syntax: {exc}") from None
    for section in ("data", "model"):
        if section not in cp:
            raise ConfigError(f"config is missing the [{section}] section")
    data = cp["data"]
    if "interactions" not in data:
        raise ConfigError("[data] needs an interactions path")
    features = {key.split(".", 1)[1]: value
                for key, value in data.items() if key.startswith("feature.")}

    def typed_section(section, cls, **extra):
        kwargs = dict(extra)
        known = {f.name: f for f in fields(cls)}
        for key, value in cp[section].items():
            if key not in known:
                raise ConfigError(f"[{section}] has unknown key {key!r}")
            f = known[key]
            ftype = _field_type(f)
            if f.name == "modality_weights":
                kwargs[key] = None if value.strip().lower() == "none" else \
                    tuple(float(x) for x in value.split(","))
            elif ftype is not None:
                kwargs[key] = _parse_typed(value, ftype)
            else:
                kwargs[key] = value
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from None

    model = typed_section("model", ModelConfig)
    trainer = typed_section("trainer", tr.TrainerConfig) if "trainer" in cp \
        else tr.TrainerConfig()

    def float_tuple(section, key, default):
        if section in cp and key in cp[section]:
            return tuple(float(x) for x in cp[section][key].split(","))
        return default

    prepare = cp["prepare"] if "prepare" in cp else {}
    cutoffs = DEFAULT_CUTOFFS
    if "evaluation" in cp and "cutoffs" in cp["evaluation"]:
        cutoffs = tuple(int(x) for x in cp["evaluation"]["cutoffs"].split(","))
    try:
        return ExperimentConfig(
            interactions=data["interactions"],
            features=features,
            model=model,
            trainer=trainer,
            missing_policy=data.get("missing", "error"),
            kcore=int(prepare.get("kcore", 5)),
            train_ratio=float(prepare.get("train_ratio", 0.8)),
            split_seed=int(prepare.get("seed", 0)),
            grid_lrs=float_tuple("grid", "lrs", tr.DEFAULT_GRID_LRS),
            grid_regs=float_tuple("grid", "regs", tr.DEFAULT_GRID_REGS),
            cutoffs=cutoffs,
            out_dir=cp["output"]["dir"] if "output" in cp else "runs/experiment",
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(config: ExperimentConfig, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_config(config))


def config_to_dict(config: ExperimentConfig) -> dict:
    return {
        "data": {"interactions": config.interactions,
                 "features": dict(sorted(config.features.items())),
                 "missing": config.missing_policy},
        "prepare": {"kcore": config.kcore, "train_ratio": config.train_ratio,
                    "seed": config.split_seed},
        "model": asdict(config.model),
        "trainer": asdict(config.trainer),
        "grid": {"lrs": list(config.grid_lrs), "regs": list(config.grid_regs)},
        "evaluation": {"cutoffs": list(config.cutoffs)},
        "output": {"dir": config.out_dir},
    }


# ----------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    """Everything needed to audit a run, minus anything non-deterministic.

    Written before the training loop starts and treated as immutable after;
    wall-clock numbers go to timings.json next to it instead so manifest
    bytes stay reproducible.
    """

    config: dict
    seed: int
    version: str
    stats: dict
    chosen: dict
    timings: dict = field(default_factory=dict)

    def write(self, run_dir):
        os.makedirs(run_dir, exist_ok=True)
        body = {"config": self.config, "seed": self.seed,
                "version": self.version, "stats": self.stats,
                "chosen": self.chosen}
        with open(os.path.join(run_dir, "manifest.json"), "w",
                  encoding="utf-8", newline="\n") as fh:
            json.dump(body, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_timings(self, run_dir):
        with open(os.path.join(run_dir, "timings.json"), "w",
                  encoding="utf-8", newline="\n") as fh:
            json.dump(self.timings, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def read(run_dir) -> dict:
        with open(os.path.join(run_dir, "manifest.json"),
                  encoding="utf-8") as fh:
            return json.load(fh)


# ------------------------------------------------------------ pipeline steps

def prepare_split(config: ExperimentConfig) -> ds.Split:
    log = ds.parse_interactions(resolve_path(config.interactions))
    try:
        dataset = ds.k_core_filter(ds.index_log(log), config.kcore)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ds.holdout_split(dataset, seed=config.split_seed,
                            train_ratio=config.train_ratio)


def load_store(config: ExperimentConfig, split: ds.Split) -> MultimodalStore:
    bound = []
    for m, raw in sorted(config.features.items()):
        path = resolve_path(raw)
        feats = load_features(path, text=path.endswith(".tsv"), modality=m)
        if feats.modality != m:
            raise ConfigError(
                f"feature file {path!r} declares modality "
                f"{feats.modality!r}, config says {m!r}"
            )
        bound.append(feats)
    return MultimodalStore(split.dataset.item_ids, bound,
                           missing=config.missing_policy)


def cmd_prepare(config: ExperimentConfig):
    """Filter, split, bind features; write split TSVs and stats JSON."""
    validate_paths(config)
    split = prepare_split(config)
    store = load_store(config, split)
    prepared = os.path.join(config.out_dir, "prepared")
    ds.write_split(split, prepared)
    st = ds.stats(split.dataset)
    with open(os.path.join(prepared, "stats.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump(asdict(st), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return split, store


def cmd_tune(config: ExperimentConfig, split: ds.Split,
             store: MultimodalStore, threads=1, run_dir=None) -> tr.GridResult:
    """Grid-search lr x reg, selecting by validation Recall@20."""
    mdata = ModelData.from_split(split, store)
    tdata = tr.TrainData.from_split(split)
    grid = tr.GridSpec(lrs=config.grid_lrs, regs=config.grid_regs)
    eval_fn = ev.recall_eval_fn(split, "validation", k=20, threads=threads)

    def factory(seed):
        return build_model(config.model, mdata, seed=seed)

    result = tr.grid_search(factory, grid, tdata, config.trainer, eval_fn)
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        body = {
            "best": {"lr": result.lr, "reg": result.reg,
                     "config_index": result.config_index,
                     "best_epoch": result.best_epoch,
                     "best_value": result.best_value},
            "table": [
                {"config_index": i, "lr": lr, "reg": reg,
                 "epoch": epoch, "value": value}
                for i, lr, reg, epoch, value in result.table
            ],
        }
        with open(os.path.join(run_dir, "tune.json"), "w", encoding="utf-8",
                  newline="\n") as fh:
            json.dump(body, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return result


def cmd_train(config: ExperimentConfig, split: ds.Split,
              store: MultimodalStore, run_dir, chosen: tr.GridResult = None,
              threads=1):
    """Train one model, writing manifest, trace, and checkpoint."""
    trainer = config.trainer
    chosen_dict = {}
    if chosen is not None:
        trainer = replace(trainer, lr=chosen.lr, reg=chosen.reg)
        chosen_dict = {"lr": chosen.lr, "reg": chosen.reg,
                       "config_index": chosen.config_index,
                       "best_epoch": chosen.best_epoch,
                       "best_value": chosen.best_value}
    mdata = ModelData.from_split(split, store)
    tdata = tr.TrainData.from_split(split)
    model = build_model(config.model, mdata, seed=trainer.seed)
    manifest = RunManifest(
        config=config_to_dict(config),
        seed=trainer.seed,
        version=__version__,
        stats=asdict(ds.stats(split.dataset)),
        chosen=chosen_dict,
    )
    manifest.write(run_dir)
    eval_fn = ev.recall_eval_fn(split, "validation", k=20, threads=threads)
    t0 = time.perf_counter()
    result = train_loop(model.spec, model, tdata, trainer, eval_fn=eval_fn)
    manifest.timings = {
        "train_seconds": time.perf_counter() - t0,
        "epochs": len(result.trace),
    }
    manifest.write_timings(run_dir)
    with open(os.path.join(run_dir, "trace.tsv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("epoch\tloss\tval_recall20\tseconds\n")
        for row in result.trace:
            val = "" if row.val_metric is None else f"{row.val_metric:.6f}"
            fh.write(f"{row.epoch}\t{row.loss:.6f}\t{val}\t{row.seconds:.6f}\n")
    save_checkpoint(model, os.path.join(run_dir, "checkpoint"))
    return model, result


def cmd_evaluate(config: ExperimentConfig, split: ds.Split,
                 store: MultimodalStore, run_dir, model=None, threads=1):
    """Score the test part and write metrics, recommendations, and a report."""
    if model is None:
        mdata = ModelData.from_split(split, store)
        model = build_model(config.model, mdata, seed=config.trainer.seed)
        load_checkpoint(model, os.path.join(run_dir, "checkpoint"))
    report, recs = ev.evaluate_model(model, split, part="test",
                                     cutoffs=config.cutoffs, threads=threads)
    os.makedirs(run_dir, exist_ok=True)
    values = {f"{metric}@{k}": report.get(metric, k)
              for k in config.cutoffs for metric in ev.METRIC_ORDER}
    body = {"tag": config.model.tag, "cutoffs": list(config.cutoffs),
            "values": values}
    with open(os.path.join(run_dir, "metrics.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(run_dir, "metrics.tsv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("metric\tk\tvalue\n")
        for k in config.cutoffs:
            for metric in ev.METRIC_ORDER:
                fh.write(f"{metric}\t{k}\t{report.get(metric, k)!r}\n")
    ev.write_recommendations_tsv(
        recs, os.path.join(run_dir, "recommendations.tsv"),
        score_fn=model.score_users)
    md, _ = render_report([(config.model.tag, report)], config.cutoffs)
    with open(os.path.join(run_dir, "report.md"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(md)
    return report


def run_single(config: ExperimentConfig, threads=1, tune=True):
    """prepare -> tune -> train best -> evaluate, one model."""
    split, store = cmd_prepare(config)
    run_dir = os.path.join(config.out_dir, config.model.tag)
    chosen = cmd_tune(config, split, store, threads=threads,
                      run_dir=run_dir) if tune else None
    model, _ = cmd_train(config, split, store, run_dir, chosen=chosen,
                         threads=threads)
    report = cmd_evaluate(config, split, store, run_dir, model=model,
                          threads=threads)
    return report


def cmd_benchmark(config: ExperimentConfig, models=None, threads=1):
    """Run the roster over one prepared split and emit the combined report."""
    from .models import MODEL_TAGS

    roster = tuple(models) if models else MODEL_TAGS
    for tag in roster:
        if tag not in MODEL_TAGS:
            raise ConfigError(f"unknown model tag {tag!r} in roster")
    split, store = cmd_prepare(config)
    rows = []
    for tag in roster:
        run_cfg = replace(config, model=replace(config.model, tag=tag))
        run_dir = os.path.join(config.out_dir, tag)
        chosen = cmd_tune(run_cfg, split, store, threads=threads,
                          run_dir=run_dir)
        model, _ = cmd_train(run_cfg, split, store, run_dir, chosen=chosen,
                             threads=threads)
        report = cmd_evaluate(run_cfg, split, store, run_dir, model=model,
                              threads=threads)
        rows.append((tag, report))
    md, tsv = render_report(rows, config.cutoffs)
    with open(os.path.join(config.out_dir, "report.md"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(md)
    with open(os.path.join(config.out_dir, "report.tsv"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(tsv)
    return rows


def cmd_report(run_dirs, out_path=None) -> str:
    """Merge per-run metrics.json files into one comparison table."""
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    rows, cutoffs = [], None
    for d in run_dirs:
        path = os.path.join(d, "metrics.json")
        if not os.path.isfile(path):
            raise ConfigError(f"{d!r} has no metrics.json")
        with open(path, encoding="utf-8") as fh:
            body = json.load(fh)
        these = tuple(body["cutoffs"])
        if cutoffs is None:
            cutoffs = these
        elif these != cutoffs:
            raise ConfigError(
                f"conflicting cutoff sets: {cutoffs} vs {these} in {d!r}"
            )
        report = ev.MetricReport()
        for key, value in body["values"].items():
            metric, k = key.rsplit("@", 1)
            report.set(metric, int(k), value)
        rows.append((body["tag"], report))
    md, _ = render_report(rows, cutoffs)
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(md)
    return md


# ------------------------------------------------------------------ reports

def _format_metric(metric, value):
    return f"{value:.2f}" if metric == "icov" else f"{value:.4f}"


def render_report(rows, cutoffs):
    """Markdown and TSV tables, metrics grouped per cutoff.

    Columns follow accuracy-then-beyond-accuracy order. With two or more
    rows the best value per column is boldfaced and the second best
    underlined (ties share the marker).
    """
    cutoffs = tuple(cutoffs)
    columns = [(metric, k) for k in cutoffs for metric in ev.METRIC_ORDER]
    header = "| Model | " + " | ".join(
        f"{METRIC_LABELS[m]}@{k}" for m, k in columns) + " |"
    rule = "|---" * (len(columns) + 1) + "|"
    mark = {}
    if len(rows) > 1:
        for col in columns:
            vals = sorted({report.get(*col) for _, report in rows},
                          reverse=True)
            mark[col] = (vals[0], vals[1] if len(vals) > 1 else None)
    lines = [header, rule]
    tsv_lines = ["model\tmetric\tk\tvalue"]
    for label, report in rows:
        cells = []
        for metric, k in columns:
            v = report.get(metric, k)
            s = _format_metric(metric, v)
            if mark:
                best, second = mark[(metric, k)]
                if v == best:
                    s = f"**{s}**"
                elif second is not None and v == second:
                    s = f"<u>{s}</u>"
            cells.append(s)
            tsv_lines.append(f"{label}\t{metric}\t{k}\t{v!r}")
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n", "\n".join(tsv_lines) + "\n"


def audit_run_dir(run_dir) -> list:
    """Names of required artifacts missing from a completed run directory."""
    required = (
        "manifest.json",
        "trace.tsv",
        os.path.join("checkpoint", "checkpoint.json"),
        "metrics.json",
        "recommendations.tsv",
        "report.md",
    )
    return [name for name in required
            if not os.path.isfile(os.path.join(run_dir, name))]
