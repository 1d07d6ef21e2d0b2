"""Pre-training, incremental stages, multi-stage sequences, sweeps and analysis.

Every stage is described by a :class:`StageConfig`.  Incremental methods
(finetune, rbkd, rbkd_ewc, ebkd_rbkd) start the student from the teacher
checkpoint and only ever read the current stage's training set; joint
training re-initialises and trains on the union of all listed training sets.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tn
from .data import Dataset, read_dataset
from .errors import ConfigError, NumericalAbort
from .losses import (LossWeights, aggregate_loss, ctc_loss, ebkd_loss, ewc_penalty,
                     fisher_estimate, importance_map, rbkd_loss)
from .metrics import (EvalReport, SampleResult, UndefinedCorrelation, edit_distance,
                      greedy_decode, pearson_correlation)
from .model import (Checkpoint, EwcState, ModelConfig, collate, forward, init_model,
                    load_checkpoint, save_checkpoint)
from .optim import Adam, OptimizerSettings

log = logging.getLogger(__name__)

METHODS = ("pretrain", "finetune", "joint", "rbkd", "rbkd_ewc", "ebkd_rbkd")
INCREMENTAL = ("finetune", "rbkd", "rbkd_ewc", "ebkd_rbkd")
DEFAULT_LAMBDA_EWC = 1.0

# weights each method may use; anything else must be zero
_ALLOWED = {
    "pretrain": set(), "joint": set(), "finetune": set(),
    "rbkd": {"beta"}, "rbkd_ewc": {"beta", "lambda_ewc"},
    "ebkd_rbkd": {"beta", "gamma"},
}

SWEEP_GRIDS = {
    "T": (1.0, 2.0, 3.0, 4.0, 5.0),
    "beta": (0.01, 0.02, 0.03, 0.04, 0.05),
    "gamma": (100.0, 200.0, 500.0, 1000.0, 2000.0),
}

Reader = Callable[[str], Dataset]


def method_weights(method: str, overrides: dict | None = None) -> LossWeights:
    """Method defaults filled in under explicit overrides; forbidden non-zero weights are rejected."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    overrides = dict(overrides or {})
    unknown = set(overrides) - {"T", "beta", "gamma", "lambda_ewc"}
    if unknown:
        raise ConfigError(f"unknown loss weight keys {sorted(unknown)}")
    allowed = _ALLOWED[method]
    for k, v in overrides.items():
        if k != "T" and k not in allowed and float(v) != 0.0:
            raise ConfigError(f"method {method} does not use {k}; got {k}={v} (must be 0 or omitted)")
    base = LossWeights()
    vals = {"T": base.T,
            "beta": base.beta if "beta" in allowed else 0.0,
            "gamma": base.gamma if "gamma" in allowed else 0.0,
            "lambda_ewc": DEFAULT_LAMBDA_EWC if "lambda_ewc" in allowed else 0.0}
    vals.update({k: float(v) for k, v in overrides.items()})
    w = LossWeights(**vals)
    if method == "rbkd_ewc" and w.lambda_ewc <= 0:
        raise ConfigError("method rbkd_ewc needs lambda_ewc > 0")
    return w


@dataclass
class StageConfig:
    stage: int
    method: str
    train_data: list[str]
    test_data: dict[str, str]
    output_checkpoint: str
    input_checkpoint: str | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    new_task: str | None = None
    report_dir: str | None = None
    fisher_samples: int = 256
    eval_every: int = 0

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        w = self.weights
        for k in ("beta", "gamma", "lambda_ewc"):
            if k not in _ALLOWED[self.method] and getattr(w, k) != 0:
                raise ConfigError(f"method {self.method} requires {k}=0, got {getattr(w, k)}")
        if self.method == "rbkd_ewc" and w.lambda_ewc <= 0:
            raise ConfigError("method rbkd_ewc needs lambda_ewc > 0")
        if not self.train_data:
            raise ConfigError("no training dataset given")
        if self.method != "joint" and len(self.train_data) != 1:
            raise ConfigError(f"method {self.method} may read exactly one training set "
                              f"(no access to earlier tasks), got {len(self.train_data)}")
        if self.method in INCREMENTAL and not self.input_checkpoint:
            raise ConfigError(f"method {self.method} needs an input (teacher) checkpoint")
        if self.method == "pretrain" and self.input_checkpoint:
            raise ConfigError("pretrain starts from scratch and forbids an input checkpoint")
        if self.new_task is not None and self.new_task not in self.test_data:
            raise ConfigError(f"new_task {self.new_task!r} is not among the test sets")
        self.optimizer.validate()
        self.model.validate()

    @property
    def new_task_name(self) -> str | None:
        if self.new_task is not None:
            return self.new_task
        return next(reversed(self.test_data)) if self.test_data else None

    def to_dict(self) -> dict:
        return {
            "stage": self.stage, "method": self.method, "train_data": list(self.train_data),
            "test_data": dict(self.test_data), "output_checkpoint": self.output_checkpoint,
            "input_checkpoint": self.input_checkpoint,
            "weights": vars(self.weights).copy(), "optimizer": vars(self.optimizer).copy(),
            "model": self.model.to_dict(), "seed": self.seed, "new_task": self.new_task,
            "report_dir": self.report_dir, "fisher_samples": self.fisher_samples,
            "eval_every": self.eval_every,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "StageConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown stage config keys {sorted(unknown)}")
        for key in ("stage", "method", "train_data", "test_data", "output_checkpoint"):
            if key not in d:
                raise ConfigError(f"stage config is missing {key!r}")

        def resolve(p):
            if p is None or base_dir is None or Path(p).is_absolute():
                return p
            return str(base_dir / p)

        method = d["method"]
        try:
            cfg = cls(
                stage=int(d["stage"]), method=method,
                train_data=[resolve(p) for p in _as_list(d["train_data"])],
                test_data={k: resolve(v) for k, v in d["test_data"].items()},
                output_checkpoint=resolve(d["output_checkpoint"]),
                input_checkpoint=resolve(d.get("input_checkpoint")),
                weights=method_weights(method, d.get("weights")),
                optimizer=OptimizerSettings(**d.get("optimizer", {})),
                model=ModelConfig.from_dict(d.get("model", {})),
                seed=int(d.get("seed", 0)), new_task=d.get("new_task"),
                report_dir=resolve(d.get("report_dir")),
                fisher_samples=int(d.get("fisher_samples", 256)),
                eval_every=int(d.get("eval_every", 0)),
            )
        except TypeError as e:
            raise ConfigError(f"malformed stage config: {e}") from None
        cfg.validate()
        return cfg


def _as_list(v):
    return [v] if isinstance(v, str) else list(v)


@dataclass
class StageResult:
    checkpoint: Checkpoint
    reports: dict[str, EvalReport]
    history: list[dict]

    def cer(self, task: str) -> float:
        return self.reports[task].corpus_cer


# -- evaluation ------------------------------------------------------------

def evaluate(ckpt: Checkpoint, dataset: Dataset, batch_size: int = 100, meta: dict | None = None,
             teacher: Checkpoint | None = None) -> EvalReport:
    """Greedy-decode every sample; with a teacher, also record per-sample EBKD loss."""
    results = []
    samples = dataset.samples
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x, lengths = collate([s.x for s in chunk])
        out = forward(ckpt, x, lengths, tap_feature_map=teacher is not None)
        hyps = greedy_decode(out.posteriors, ckpt.config.blank_id)
        losses = [None] * len(chunk)
        if teacher is not None:
            t_out = forward(teacher, x, lengths, tap_feature_map=True)
            q1 = importance_map(t_out).Q
            q2 = importance_map(out).Q
            losses = ebkd_loss(q1, q2, out.frame_mask, reduction="none").data.tolist()
        for i, (s, hyp) in enumerate(zip(chunk, hyps)):
            results.append(SampleResult(start + i, len(s.y), edit_distance(list(s.y), hyp), losses[i]))
    return EvalReport(results, dict(meta or {}))


# -- training --------------------------------------------------------------

def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches; reshuffles when fewer than a full batch remain."""
    bs = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            yield order[start:start + bs]


def train_student(student: Checkpoint, teacher: Checkpoint | None, samples: list, method: str,
                  weights: LossWeights, settings: OptimizerSettings, seed: int,
                  ewc_state: EwcState | None = None,
                  on_step: Callable[[int, Checkpoint], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Run ``settings.steps`` optimiser steps of the method's objective; returns a new checkpoint."""
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in student.params.items()}
    names = list(params)
    opt = Adam(params, settings)
    batches = _batches(len(samples), settings.batch_size, rng)
    use_rbkd = weights.beta > 0
    use_ebkd = weights.gamma > 0
    use_ewc = weights.lambda_ewc > 0
    if (use_rbkd or use_ebkd) and teacher is None:
        raise ConfigError(f"method {method} needs a teacher model")
    if use_ewc and ewc_state is None:
        raise ConfigError(f"method {method} needs EWC state in the input checkpoint")
    history = []
    current = student
    for step in range(1, settings.steps + 1):
        idx = next(batches)
        chunk = [samples[i] for i in idx]
        x, lengths = collate([s.x for s in chunk])
        ys = [list(s.y) for s in chunk]
        pt = {k: tn.Tensor(v, requires_grad=True) for k, v in params.items()}
        out = forward(student, x, lengths, params=pt, tap_feature_map=False)
        ctc = ctc_loss(out.posteriors, ys)
        rbkd = ebkd = ewc = None
        if use_rbkd or use_ebkd:
            t_out = forward(teacher, x, lengths, tap_feature_map=use_ebkd)
            if use_rbkd:
                rbkd = rbkd_loss(t_out.posteriors, out.posteriors, weights.T)
            if use_ebkd:
                q1 = importance_map(t_out).Q
                q2 = importance_map(out, student=True).Q
                ebkd = ebkd_loss(q1, q2, out.frame_mask)
        if use_ewc:
            ewc = ewc_penalty(pt, ewc_state.reference, ewc_state.fisher)
        total = aggregate_loss(ctc, rbkd, ebkd, weights, ewc)
        parts = {"step": step, "loss": total.item(), "ctc": ctc.item(),
                 "rbkd": None if rbkd is None else rbkd.item(),
                 "ebkd": None if ebkd is None else ebkd.item(),
                 "ewc": None if ewc is None else ewc.item()}
        if not all(v is None or math.isfinite(v) for v in parts.values()):
            raise NumericalAbort(f"non-finite loss at step {step}: {parts}")
        grads = tn.grad(total, [pt[k] for k in names], retain_graph=False)
        params = opt.step(params, dict(zip(names, grads)))
        if step % 50 == 0 or step == settings.steps:
            history.append(parts)
        if on_step is not None:
            current = Checkpoint(params, student.config, dict(student.meta), student.ewc)
            on_step(step, current)
    return Checkpoint(params, student.config, dict(student.meta), student.ewc), history


def train_stage(config: StageConfig, reader: Reader = read_dataset) -> StageResult:
    """Run one stage end to end: train, evaluate on every test set, persist.

    The teacher checkpoint file is only read.  EWC state for the next stage
    (reference parameters and diagonal Fisher on this stage's training data,
    summed with any inherited Fisher) is stored in the output checkpoint.
    """
    config.validate()
    teacher = None
    if config.input_checkpoint:
        teacher = load_checkpoint(config.input_checkpoint)
    if config.method in ("pretrain", "joint"):
        model_cfg = teacher.config if teacher is not None else config.model
        student = init_model(model_cfg, config.seed)
    else:
        student = teacher.copy()

    samples = []
    for path in config.train_data:
        samples.extend(reader(path).samples)
    if not samples:
        raise ConfigError("training data is empty")

    meta = {"stage": config.stage, "method": config.method, "seed": config.seed}
    periodic: list[dict] = []
    on_step = None
    if config.eval_every > 0:
        def on_step(step, ckpt):
            if step % config.eval_every == 0:
                periodic.append({"step": step, **{name: evaluate(ckpt, reader(path)).corpus_cer
                                                  for name, path in config.test_data.items()}})

    trained, history = train_student(
        student, teacher, samples, config.method, config.weights, config.optimizer,
        config.seed, ewc_state=teacher.ewc if teacher is not None else None, on_step=on_step)
    trained.meta = dict(meta)

    fisher = fisher_estimate(trained, samples, config.fisher_samples, seed=config.seed)
    if teacher is not None and teacher.ewc is not None and config.method in INCREMENTAL:
        fisher = {k: fisher[k] + teacher.ewc.fisher[k] for k in fisher}
    trained.ewc = EwcState({k: v.copy() for k, v in trained.params.items()}, fisher)

    reports = {name: evaluate(trained, reader(path), meta=dict(meta, task=name))
               for name, path in config.test_data.items()}
    save_checkpoint(trained, config.output_checkpoint)
    if config.report_dir:
        _write_stage_reports(config, reports, history + periodic)
    return StageResult(trained, reports, history + periodic)


def _write_stage_reports(config: StageConfig, reports: dict[str, EvalReport], history) -> None:
    out = Path(config.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"stage{config.stage}_{config.method}"
    for name, rep in reports.items():
        (out / f"{tag}_{name}.csv").write_text(rep.to_csv())
        (out / f"{tag}_{name}.summary.json").write_text(rep.summary_text())
    (out / f"{tag}_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / f"{tag}_history.json").write_text(json.dumps(history, indent=1) + "\n")


# -- multi-stage sequences ---------------------------------------------------

@dataclass
class TaskFiles:
    name: str
    train: str
    test: str


@dataclass
class RunManifest:
    tasks: list[TaskFiles]
    out_dir: str
    methods: tuple[str, ...] = ("finetune", "rbkd", "rbkd_ewc", "ebkd_rbkd", "joint")
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: dict[str, dict] = field(default_factory=dict)
    pretrain: OptimizerSettings = field(default_factory=lambda: OptimizerSettings(steps=3000))
    incremental: OptimizerSettings = field(default_factory=lambda: OptimizerSettings(steps=1000))
    joint: OptimizerSettings | None = None
    fisher_samples: int = 256

    def validate(self) -> None:
        if len(self.tasks) < 1:
            raise ConfigError("manifest needs at least one task")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate task names {names}")
        bad = [m for m in self.methods if m not in INCREMENTAL + ("joint",)]
        if bad:
            raise ConfigError(f"manifest methods must be incremental or joint, got {bad}")
        for m, w in self.weights.items():
            method_weights(m, w)

    def to_dict(self) -> dict:
        return {
            "tasks": [vars(t).copy() for t in self.tasks], "out_dir": self.out_dir,
            "methods": list(self.methods), "seed": self.seed, "model": self.model.to_dict(),
            "weights": self.weights, "pretrain": vars(self.pretrain).copy(),
            "incremental": vars(self.incremental).copy(),
            "joint": None if self.joint is None else vars(self.joint).copy(),
            "fisher_samples": self.fisher_samples,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "RunManifest":
        def resolve(p):
            return p if base_dir is None or Path(p).is_absolute() else str(base_dir / p)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown manifest keys {sorted(unknown)}")
        try:
            m = cls(
                tasks=[TaskFiles(t["name"], resolve(t["train"]), resolve(t["test"])) for t in d["tasks"]],
                out_dir=resolve(d["out_dir"]),
                methods=tuple(d.get("methods", cls.methods)),
                seed=int(d.get("seed", 0)),
                model=ModelConfig.from_dict(d.get("model", {})),
                weights=dict(d.get("weights", {})),
                pretrain=OptimizerSettings(**{"steps": 3000, **d.get("pretrain", {})}),
                incremental=OptimizerSettings(**{"steps": 1000, **d.get("incremental", {})}),
                joint=None if d.get("joint") is None else OptimizerSettings(**d["joint"]),
                fisher_samples=int(d.get("fisher_samples", 256)),
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed manifest: {e}") from None
        m.validate()
        return m

    def stage_configs(self) -> dict[str, list[StageConfig]]:
        """Expand into one chained list of stages per method; stage 1 (pretrain) is shared."""
        out = Path(self.out_dir)
        reports = str(out / "reports")
        pre = StageConfig(
            stage=1, method="pretrain", train_data=[self.tasks[0].train],
            test_data={self.tasks[0].name: self.tasks[0].test},
            output_checkpoint=str(out / "stage1_pretrain.ilck"),
            weights=method_weights("pretrain"), optimizer=self.pretrain, model=self.model,
            seed=self.seed, report_dir=reports, fisher_samples=self.fisher_samples)
        chains = {"pretrain": [pre]}
        for method in self.methods:
            prev = pre.output_checkpoint
            chain = []
            for s in range(2, len(self.tasks) + 1):
                visited = self.tasks[:s]
                joint = method == "joint"
                cfg = StageConfig(
                    stage=s, method=method,
                    train_data=[t.train for t in visited] if joint else [visited[-1].train],
                    test_data={t.name: t.test for t in visited},
                    output_checkpoint=str(out / f"stage{s}_{method}.ilck"),
                    input_checkpoint=None if joint else prev,
                    weights=method_weights(method, self.weights.get(method)),
                    optimizer=(self.joint or self.pretrain) if joint else self.incremental,
                    model=self.model, seed=self.seed + s, new_task=visited[-1].name,
                    report_dir=reports, fisher_samples=self.fisher_samples)
                chain.append(cfg)
                prev = cfg.output_checkpoint
            chains[method] = chain
        return chains


@dataclass
class SequenceResult:
    task_names: list[str]
    cer: dict[str, dict[int, dict[str, float]]]   # method -> stage -> task -> CER (ratio)
    config_hash: str

    def original_task_cer(self, method: str, stage: int) -> float:
        row = self.cer[method][stage]
        ot = self.task_names[:stage - 1]
        return float(np.mean([row[t] for t in ot]))

    def new_task_cer(self, method: str, stage: int) -> float:
        return self.cer[method][stage][self.task_names[stage - 1]]

    def table3_csv(self) -> str:
        cols = [(s, t) for s in range(1, len(self.task_names) + 1) for t in self.task_names[:s]]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method"] + [f"stage{s}:{t}" for s, t in cols])
        for method in [m for m in self.cer if m != "pretrain"]:
            row = [method]
            for s, t in cols:
                src = self.cer["pretrain"] if s == 1 else self.cer[method]
                row.append(f"{100 * src[s][t]:.2f}")
            w.writerow(row)
        return buf.getvalue()

    def method_matrix_csv(self, method: str) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage"] + self.task_names)
        stages = {1: self.cer["pretrain"][1], **self.cer[method]}
        for s in sorted(stages):
            w.writerow([s] + [f"{100 * stages[s][t]:.2f}" if t in stages[s] else ""
                              for t in self.task_names])
        return buf.getvalue()

    def fig3_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "stage", "avg_original_cer", "new_task_cer"])
        for method in [m for m in self.cer if m != "pretrain"]:
            for s in sorted(self.cer[method]):
                w.writerow([method, s, f"{100 * self.original_task_cer(method, s):.2f}",
                            f"{100 * self.new_task_cer(method, s):.2f}"])
        return buf.getvalue()


def run_sequence(manifest: RunManifest, reader: Reader = read_dataset) -> SequenceResult:
    """Pretrain on the first task, then walk the remaining tasks with every method."""
    manifest.validate()
    out = Path(manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = dict(manifest.to_dict(), config_hash=manifest.config_hash())
    (out / "resolved_manifest.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    chains = manifest.stage_configs()
    cer: dict[str, dict[int, dict[str, float]]] = {}
    for method, chain in chains.items():
        cer[method] = {}
        for cfg in chain:
            log.info("stage %d / %s", cfg.stage, method)
            try:
                res = train_stage(cfg, reader)
            except Exception as e:
                raise type(e)(f"stage {cfg.stage} ({method}) failed: {e}") from e
            cer[method][cfg.stage] = {t: r.corpus_cer for t, r in res.reports.items()}
    result = SequenceResult([t.name for t in manifest.tasks], cer, manifest.config_hash())
    (out / "table3.csv").write_text(result.table3_csv())
    (out / "fig3_summary.csv").write_text(result.fig3_csv())
    for method in manifest.methods:
        (out / f"cer_matrix_{method}.csv").write_text(result.method_matrix_csv(method))
    return result


# -- hyperparameter sweep ----------------------------------------------------

@dataclass
class SweepPoint:
    value: float
    original_cer: float
    new_cer: float
    original_increment: float
    new_increment: float


def sweep(base: StageConfig, axis: str, values=None, reader: Reader = read_dataset,
          out_dir: str | None = None) -> list[SweepPoint]:
    """Vary one of T, beta, gamma with the others fixed; CER increments are vs the teacher."""
    if axis not in SWEEP_GRIDS:
        raise ConfigError(f"invalid sweep axis {axis!r}; expected one of {sorted(SWEEP_GRIDS)}")
    values = SWEEP_GRIDS[axis] if values is None else tuple(float(v) for v in values)
    if any(not v > 0 for v in values):
        raise ConfigError("sweep values must be positive")
    if base.method != "ebkd_rbkd":
        raise ConfigError(f"sweeps vary ebkd_rbkd weights, got method {base.method}")
    base.validate()
    teacher = load_checkpoint(base.input_checkpoint)
    new = base.new_task_name
    ot = [t for t in base.test_data if t != new]
    tests = {name: reader(path) for name, path in base.test_data.items()}
    t_cer = {name: evaluate(teacher, ds).corpus_cer for name, ds in tests.items()}
    out = Path(out_dir) if out_dir else Path(base.output_checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    points = []
    for v in values:
        cfg = replace(base, weights=replace(base.weights, **{axis: v}),
                      output_checkpoint=str(out / f"sweep_{axis}_{v:g}.ilck"), report_dir=None)
        res = train_stage(cfg, reader)
        o = float(np.mean([res.cer(t) for t in ot])) if ot else float("nan")
        o_ref = float(np.mean([t_cer[t] for t in ot])) if ot else float("nan")
        points.append(SweepPoint(v, o, res.cer(new), o - o_ref, res.cer(new) - t_cer[new]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([axis, "original_cer", "new_cer", "original_increment", "new_increment"])
    for p in points:
        w.writerow([f"{p.value:g}", f"{100 * p.original_cer:.2f}", f"{100 * p.new_cer:.2f}",
                    f"{100 * p.original_increment:.2f}", f"{100 * p.new_increment:.2f}"])
    (out / f"sweep_{axis}.csv").write_text(buf.getvalue())
    series = {"axis": axis, "values": [p.value for p in points],
              "original_increment": [100 * p.original_increment for p in points],
              "new_increment": [100 * p.new_increment for p in points]}
    (out / f"sweep_{axis}.json").write_text(json.dumps(series, indent=2) + "\n")
    return points


# -- correlation analysis ----------------------------------------------------

@dataclass
class CorrelationReport:
    report: EvalReport
    r_errors: float | None
    r_all: float | None
    n_errors: int
    notes: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        return {"n_samples": len(self.report.samples), "n_with_errors": self.n_errors,
                "pearson_r_cer_gt_0": self.r_errors, "pearson_r_all": self.r_all,
                "notes": self.notes}


def analyze_correlation(student: Checkpoint, teacher: Checkpoint, dataset: Dataset,
                        n_samples: int = 400, seed: int = 0) -> CorrelationReport:
    """Per-sample CER vs per-sample EBKD loss on a uniform random subset of the data."""
    if student.config != teacher.config:
        raise ConfigError("student and teacher checkpoints have different model configs")
    if n_samples > len(dataset):
        raise ConfigError(f"requested {n_samples} samples but the set has only {len(dataset)}")
    pick = np.sort(np.random.default_rng(seed).choice(len(dataset), size=n_samples, replace=False))
    subset = Dataset(dataset.feature_dim, dataset.num_classes, [dataset[i] for i in pick],
                     dataset.task_id)
    rep = evaluate(student, subset, teacher=teacher, meta={"seed": seed})
    for s, i in zip(rep.samples, pick):
        s.sample_id = int(i)
    cers = np.array([s.cer for s in rep.samples])
    losses = np.array([s.ebkd_loss for s in rep.samples])
    notes = []

    def corr(mask, label):
        try:
            return pearson_correlation(cers[mask], losses[mask])
        except UndefinedCorrelation as e:
            notes.append(f"{label}: {e}")
            return None

    err = cers > 0
    return CorrelationReport(rep, corr(err, "CER>0 subset"), corr(np.ones_like(err), "all samples"),
                             int(err.sum()), notes)
