"""Experiment orchestration: configs, runs, sweeps, persistence, export.

A run directory is self-describing: ``config.json`` (canonical form of the
experiment), ``train/`` (metrics + checkpoints), ``records.csv`` (append-only
metric rows), and a ``DONE`` marker carrying the config hash.  Re-running a
completed run is a no-op; re-running an interrupted one resumes training and
fills in missing evaluation rows.  A results root holds many run directories
plus ``index.json`` and sweep manifests.

Record rows are deterministic for a fixed config and master seed; the
timestamp column can be pinned through the ``ICL_LINREG_TIMESTAMP``
environment variable so stores can be compared byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from . import evaluation as ev
from . import model as model_mod
from .errors import ConfigError, MissingSeriesError, NumericalError
from .evaluation import (
    DmmsePredictor,
    PTPredictor,
    RidgePredictor,
    SmmsePredictor,
    ZeroPredictor,
)
from .model import ModelConfig
from .oracles import default_epsilon_grid, optimal_epsilon_search
from .rng import RngHandle
from .tasks import TaskDistribution, sample_pretrain_set
from .train import TrainConfig, probe_stability, train

__all__ = [
    "EvalSettings",
    "ExperimentConfig",
    "RunRecord",
    "RECORD_HEADER",
    "snr_matched_sigma2",
    "base_config",
    "desk_config",
    "dimsweep_config",
    "run_experiment",
    "oracle_eval",
    "interpolation_eval",
    "sweep",
    "run_sweep",
    "export_plot_data",
]

RECORD_HEADER = [
    "run_id", "estimator", "distribution", "M", "D", "sigma2", "B", "N",
    "weight_decay", "d_embed", "metric", "k_or_alpha", "value", "stderr",
    "step", "timestamp",
]

INFINITE = "infinite"


def _timestamp() -> str:
    pinned = os.environ.get("ICL_LINREG_TIMESTAMP")
    if pinned:
        return pinned
    return datetime.now(timezone.utc).isoformat()


def snr_matched_sigma2(D: int) -> float:
    """Noise variance keeping the dimension sweep at the D=8 reference SNR.

    The published anchor points are sigma2 = 0.5, 0.707, 0.866, 1.0 at
    D = 8, 16, 24, 32; the monotone rule reproducing all four is
    sigma2 = sqrt(D / 32).
    """
    if D < 1:
        raise ConfigError("D must be >= 1")
    return float(np.sqrt(D / 32.0))


@dataclass(frozen=True)
class EvalSettings:
    n_sequences: int = 4096
    alpha_points: int = 21
    n_pairs: int = 64
    n_sequences_per_point: int = 256
    epsilon_search_n: int = 1024

    def __post_init__(self):
        if self.n_sequences < 2:
            raise ConfigError("eval.n_sequences must be >= 2")
        if self.alpha_points < 1 or self.n_pairs < 1 or self.n_sequences_per_point < 1:
            raise ConfigError("eval settings must be positive")

    def alpha_grid(self) -> np.ndarray:
        if self.alpha_points == 1:
            return np.array([0.5])
        return np.linspace(0.0, 1.0, self.alpha_points)


@dataclass(frozen=True)
class ExperimentConfig:
    D: int
    K: int
    sigma2: float
    M: int | str  # task-set size, or "infinite" for unlimited diversity
    model: ModelConfig
    train: TrainConfig
    eval: EvalSettings
    master_seed: int
    out_dir: str
    lr_candidates: tuple[float, ...] = (1e-3,)
    smmse_eps2: float | str | None = None  # float, "search", or None
    run_id: str | None = None

    def __post_init__(self):
        if self.D < 1 or self.K < 1:
            raise ConfigError("D and K must be >= 1")
        if self.sigma2 < 0:
            raise ConfigError("sigma2 must be >= 0")
        if isinstance(self.M, str):
            if self.M != INFINITE:
                raise ConfigError(f"M must be a positive integer or {INFINITE!r}")
        elif self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.model.d_task != self.D:
            raise ConfigError(f"model.d_task={self.model.d_task} != D={self.D}")
        if self.model.max_pairs != self.K:
            raise ConfigError(f"model.max_pairs={self.model.max_pairs} != K={self.K}")
        if not self.lr_candidates:
            raise ConfigError("lr_candidates must be nonempty")
        if self.smmse_eps2 is not None and isinstance(self.smmse_eps2, str):
            if self.smmse_eps2 != "search":
                raise ConfigError("smmse_eps2 must be a float, 'search', or null")
        object.__setattr__(self, "lr_candidates", tuple(float(c) for c in self.lr_candidates))

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        model = asdict(self.model)
        model.pop("d_task")
        model.pop("max_pairs")
        return {
            "D": self.D,
            "K": self.K,
            "sigma2": self.sigma2,
            "M": self.M,
            "master_seed": self.master_seed,
            "out_dir": self.out_dir,
            "lr_candidates": list(self.lr_candidates),
            "smmse_eps2": self.smmse_eps2,
            "run_id": self.run_id,
            "model": model,
            "train": asdict(self.train),
            "eval": asdict(self.eval),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        sections = {}
        for name, builder in (("model", None), ("train", TrainConfig), ("eval", EvalSettings)):
            section = doc.pop(name, None)
            if section is None:
                raise ConfigError(f"config missing section {name!r}")
            sections[name] = (section, builder)
        known = {
            "D", "K", "sigma2", "M", "master_seed", "out_dir",
            "lr_candidates", "smmse_eps2", "run_id",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            model_doc = dict(sections["model"][0])
            bad = set(model_doc) - {"n_layers", "d_embed", "n_heads", "precision"}
            if bad:
                raise ConfigError(f"unknown model keys: {sorted(bad)}")
            model = ModelConfig(d_task=doc["D"], max_pairs=doc["K"], **model_doc)
            train_cfg = _build_section(TrainConfig, sections["train"][0], "train")
            eval_cfg = _build_section(EvalSettings, sections["eval"][0], "eval")
            return cls(model=model, train=train_cfg, eval=eval_cfg, **{
                k: doc[k] for k in known if k in doc
            })
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("out_dir")  # relocating a store must not change identity
        return hashlib.sha256(
            json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        ).hexdigest()

    def resolved_run_id(self) -> str:
        return self.run_id or f"run-{self.config_hash()[:12]}"

    # -- derived objects ---------------------------------------------------

    def pretraining_distribution(self, rng: RngHandle) -> TaskDistribution:
        """Build the task set on the 'task-set' stream (or the Gaussian)."""
        if self.M == INFINITE:
            return TaskDistribution.gaussian(self.D)
        return sample_pretrain_set(rng.child("task-set"), self.M, self.D)


def _build_section(builder, payload: dict, name: str):
    valid = set(builder.__dataclass_fields__)
    bad = set(payload) - valid
    if bad:
        raise ConfigError(f"unknown {name} keys: {sorted(bad)}")
    return builder(**payload)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


def base_config(M: int | str, out_dir: str, master_seed: int = 0, **overrides) -> ExperimentConfig:
    """Full-scale reference setting: D=8, K=16, sigma2=0.25, 8x128x2 model,
    batch 256 for 500K steps.  Hours of compute per run; see desk_config for
    the workstation-sized variant."""
    D, K = 8, 16
    cfg = ExperimentConfig(
        D=D, K=K, sigma2=0.25, M=M,
        model=ModelConfig(n_layers=8, d_embed=128, n_heads=2, d_task=D, max_pairs=K),
        train=TrainConfig(batch_size=256, n_steps=500_000),
        eval=EvalSettings(),
        master_seed=master_seed,
        out_dir=out_dir,
        lr_candidates=(1e-3, 3e-4, 1e-4),
    )
    return replace(cfg, **overrides) if overrides else cfg


def desk_config(M: int | str, out_dir: str, master_seed: int = 0, **overrides) -> ExperimentConfig:
    """Workstation preset: 4 layers, 64-wide embeddings, batch 64, 50K steps."""
    D, K = 8, 16
    cfg = ExperimentConfig(
        D=D, K=K, sigma2=0.25, M=M,
        model=ModelConfig(n_layers=4, d_embed=64, n_heads=2, d_task=D, max_pairs=K),
        train=TrainConfig(batch_size=64, n_steps=50_000, checkpoint_every=12_500),
        eval=EvalSettings(),
        master_seed=master_seed,
        out_dir=out_dir,
        lr_candidates=(1e-3,),
    )
    return replace(cfg, **overrides) if overrides else cfg


def dimsweep_config(D: int, M: int | str, out_dir: str, master_seed: int = 0, **overrides) -> ExperimentConfig:
    """Dimension-sweep preset: K = 2D, SNR-matched noise, 12x256x4 model.

    Note the D=8 cell here uses sigma2 = 0.5 (the sweep's own convention),
    not the 0.25 of the base setting; both values are preserved on purpose.
    """
    K = 2 * D
    cfg = ExperimentConfig(
        D=D, K=K, sigma2=snr_matched_sigma2(D), M=M,
        model=ModelConfig(n_layers=12, d_embed=256, n_heads=4, d_task=D, max_pairs=K),
        train=TrainConfig(batch_size=256, n_steps=500_000),
        eval=EvalSettings(),
        master_seed=master_seed,
        out_dir=out_dir,
        lr_candidates=(1e-4,),
    )
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# Records and the results store
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    config_hash: str
    estimator: str
    distribution: str
    M: int | str
    D: int
    sigma2: float
    B: int
    N: int
    weight_decay: float
    d_embed: int
    metric: str
    k_or_alpha: str
    value: float
    stderr: float
    step: int
    timestamp: str

    def csv_row(self) -> list[str]:
        return [
            self.run_id, self.estimator, self.distribution, str(self.M),
            str(self.D), repr(float(self.sigma2)), str(self.B), str(self.N),
            repr(float(self.weight_decay)), str(self.d_embed), self.metric,
            self.k_or_alpha, repr(float(self.value)), repr(float(self.stderr)),
            str(self.step), self.timestamp,
        ]

    def key(self) -> tuple:
        return (self.run_id, self.estimator, self.distribution, self.metric,
                self.k_or_alpha, self.step)


def _records_path(run_dir: str) -> str:
    return os.path.join(run_dir, "records.csv")


def _existing_record_keys(run_dir: str) -> set[tuple]:
    path = _records_path(run_dir)
    keys: set[tuple] = set()
    if os.path.exists(path):
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                keys.add((row["run_id"], row["estimator"], row["distribution"],
                          row["metric"], row["k_or_alpha"], int(row["step"])))
    return keys


def append_records(run_dir: str, records: list[RunRecord]) -> int:
    """Append new rows, skipping keys already present.  Returns rows added."""
    for r in records:
        if not np.isfinite(r.value) or not np.isfinite(r.stderr) or r.stderr < 0:
            raise NumericalError(f"non-finite or negative record value: {r}")
    path = _records_path(run_dir)
    existing = _existing_record_keys(run_dir)
    fresh = [r for r in records if r.key() not in existing]
    write_header = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if write_header:
            writer.writerow(RECORD_HEADER)
        for r in fresh:
            writer.writerow(r.csv_row())
    return len(fresh)


def load_records(store_root: str) -> list[dict]:
    """All record rows under a results root, as dicts with parsed numerics."""
    rows: list[dict] = []
    if not os.path.isdir(store_root):
        return rows
    for entry in sorted(os.listdir(store_root)):
        path = os.path.join(store_root, entry, "records.csv")
        if not os.path.exists(path):
            continue
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                for col in ("D", "B", "N", "d_embed", "step"):
                    row[col] = int(row[col])
                for col in ("sigma2", "weight_decay", "value", "stderr"):
                    row[col] = float(row[col])
                rows.append(row)
    return rows


def _index_path(root: str) -> str:
    return os.path.join(root, "index.json")


def _update_index(root: str, run_id: str, config_hash: str, status: str) -> None:
    path = _index_path(root)
    index = {"runs": {}}
    if os.path.exists(path):
        with open(path) as fh:
            index = json.load(fh)
    index["runs"][run_id] = {"config_hash": config_hash, "status": status}
    with open(path, "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)


def _prepare_run(cfg: ExperimentConfig) -> tuple[str, str, bool]:
    """Create/validate the run directory.  Returns (run_dir, hash, done)."""
    run_id = cfg.resolved_run_id()
    run_dir = os.path.join(cfg.out_dir, run_id)
    chash = cfg.config_hash()
    cfg_path = os.path.join(run_dir, "config.json")
    if os.path.exists(cfg_path):
        with open(cfg_path) as fh:
            prior = ExperimentConfig.from_json(fh.read())
        if prior.config_hash() != chash:
            raise ConfigError(
                f"run_id {run_id!r} already exists with a different config"
            )
    os.makedirs(run_dir, exist_ok=True)
    if not os.path.exists(cfg_path):
        with open(cfg_path, "w") as fh:
            fh.write(cfg.to_json())
    done = os.path.exists(os.path.join(run_dir, "DONE"))
    _update_index(cfg.out_dir, run_id, chash, "done" if done else "partial")
    return run_dir, chash, done


def _mark_done(run_dir: str, cfg: ExperimentConfig) -> None:
    with open(os.path.join(run_dir, "DONE"), "w") as fh:
        fh.write(cfg.config_hash() + "\n")
    _update_index(cfg.out_dir, cfg.resolved_run_id(), cfg.config_hash(), "done")


# ---------------------------------------------------------------------------
# Run execution
# ---------------------------------------------------------------------------


def _record_factory(cfg: ExperimentConfig):
    base = dict(
        run_id=cfg.resolved_run_id(),
        config_hash=cfg.config_hash(),
        M=cfg.M,
        D=cfg.D,
        sigma2=cfg.sigma2,
        B=cfg.train.batch_size,
        N=cfg.train.n_steps,
        weight_decay=cfg.train.weight_decay,
        d_embed=cfg.model.d_embed,
        timestamp=_timestamp(),
    )

    def make(estimator, distribution, metric, k_or_alpha, value, stderr, step):
        return RunRecord(
            estimator=estimator, distribution=distribution, metric=metric,
            k_or_alpha=str(k_or_alpha), value=float(value), stderr=float(stderr),
            step=int(step), **base,
        )

    return make


def _loss_records(make, report: ev.EvalReport, estimator: str, step: int) -> list[RunRecord]:
    recs = [
        make(estimator, report.distribution, "loss", "agg",
             report.aggregate, report.aggregate_stderr, step)
    ]
    for k in range(report.per_k_mse.shape[0]):
        recs.append(
            make(estimator, report.distribution, "loss", str(k + 1),
                 report.per_k_mse[k], report.per_k_stderr[k], step)
        )
    return recs


def _select_peak_lr(cfg: ExperimentConfig, dist: TaskDistribution, rng: RngHandle,
                    run_dir: str | None = None) -> float:
    """Largest candidate whose compressed one-cycle probe stays stable."""
    candidates = sorted(cfg.lr_candidates, reverse=True)
    if len(candidates) == 1:
        return candidates[0]
    outcomes = []
    chosen = None
    n_probe = min(5000, cfg.train.n_steps)
    for cand in candidates:
        probe_cfg = replace(cfg.train, peak_lr=cand)
        ok, reason = probe_stability(
            cfg.model, probe_cfg, dist, cfg.sigma2,
            rng.child(f"lr-probe/{cand:g}"), n_probe_steps=n_probe,
        )
        outcomes.append({"peak_lr": cand, "stable": ok, "reason": reason})
        if ok and chosen is None:
            chosen = cand
    if run_dir is not None:
        with open(os.path.join(run_dir, "lr_probe.json"), "w") as fh:
            json.dump(outcomes, fh, indent=1)
    if chosen is None:
        raise NumericalError(
            f"no stable learning rate among candidates {candidates}"
        )
    return chosen


def _oracle_predictors(cfg: ExperimentConfig, dist: TaskDistribution,
                       rng: RngHandle, run_dir: str | None):
    """Instantiate the requested closed-form baselines (plus eps2 search)."""
    preds: dict[str, ev.Predictor] = {"ridge": RidgePredictor(sigma2=cfg.sigma2)}
    eps_curve = None
    if dist.is_finite:
        preds["dmmse"] = DmmsePredictor(tasks=dist, sigma2=cfg.sigma2)
        if cfg.smmse_eps2 is not None:
            if cfg.smmse_eps2 == "search":
                eps2, eps_curve = optimal_epsilon_search(
                    dist, cfg.D, cfg.K, cfg.sigma2,
                    list(default_epsilon_grid()), cfg.eval.epsilon_search_n,
                    rng.child("eps-search"),
                )
            else:
                eps2 = float(cfg.smmse_eps2)
            preds["smmse"] = SmmsePredictor(tasks=dist, sigma2=cfg.sigma2, epsilon2=eps2)
            if run_dir is not None:
                with open(os.path.join(run_dir, "smmse_eps2.json"), "w") as fh:
                    json.dump({"eps2": eps2, "searched": cfg.smmse_eps2 == "search"}, fh)
    return preds, eps_curve


def _eval_sets(cfg: ExperimentConfig, dist: TaskDistribution, rng: RngHandle):
    true_dist = TaskDistribution.gaussian(cfg.D)
    set_pre = ev.draw_eval_set(
        dist, cfg.eval.n_sequences, cfg.K, cfg.sigma2,
        rng.child("eval/pretrain"), tag="pretrain",
    )
    set_true = ev.draw_eval_set(
        true_dist, cfg.eval.n_sequences, cfg.K, cfg.sigma2,
        rng.child("eval/true"), tag="true",
    )
    return set_pre, set_true


def _evaluate_checkpointed_run(cfg, dist, rng, run_dir, make) -> None:
    """Oracle + PT evaluation rows for every checkpoint of a trained run."""
    set_pre, set_true = _eval_sets(cfg, dist, rng)
    oracle_preds, eps_curve = _oracle_predictors(cfg, dist, rng, run_dir)
    final_step = cfg.train.n_steps
    records: list[RunRecord] = []

    oracle_predictions = {}
    for name, pred in oracle_preds.items():
        for eval_set in (set_pre, set_true):
            rep = ev.eval_loss_on_set(pred, eval_set)
            records.extend(_loss_records(make, rep, name, final_step))
            oracle_predictions[(name, eval_set.tag)] = np.asarray(
                pred.predict(eval_set.xs, eval_set.ys), dtype=np.float64
            )
    if "dmmse" in oracle_preds:
        for eval_set in (set_pre, set_true):
            d, se = ev.delta_of_predictions(
                oracle_predictions[("dmmse", eval_set.tag)],
                oracle_predictions[("ridge", eval_set.tag)],
                cfg.D,
            )
            records.append(make("dmmse-ridge", eval_set.tag, "delta", "agg", d, se, final_step))
    if eps_curve is not None:
        for eps2, loss, se in eps_curve:
            records.append(make("smmse", "true", "smmse_eps_loss", f"{eps2:.6g}", loss, se, final_step))

    train_dir = os.path.join(run_dir, "train")
    for step, ckpt in model_mod.iter_checkpoints(train_dir):
        pt = PTPredictor.from_checkpoint(ckpt)
        for eval_set in (set_pre, set_true):
            rep = ev.eval_loss_on_set(pt, eval_set)
            records.extend(_loss_records(make, rep, "pt", step))
            pt_preds = np.asarray(pt.predict(eval_set.xs, eval_set.ys), dtype=np.float64)
            for name in ("dmmse", "ridge", "smmse"):
                if name in oracle_preds:
                    d, se = ev.delta_of_predictions(
                        pt_preds, oracle_predictions[(name, eval_set.tag)], cfg.D
                    )
                    records.append(
                        make(f"pt-{name}", eval_set.tag, "delta", "agg", d, se, step)
                    )
    append_records(run_dir, records)


def run_experiment(cfg: ExperimentConfig) -> str:
    """Task set -> LR probe -> training -> per-checkpoint evaluation rows.

    Returns the run directory.  Idempotent: a completed run is untouched; an
    interrupted one resumes from its newest checkpoint.
    """
    run_dir, _, done = _prepare_run(cfg)
    if done:
        return run_dir
    rng = RngHandle(cfg.master_seed)
    dist = cfg.pretraining_distribution(rng)
    peak = _select_peak_lr(cfg, dist, rng, run_dir)
    train_cfg = replace(cfg.train, peak_lr=peak)
    train(
        cfg.model, train_cfg, dist, cfg.sigma2, rng,
        out_dir=os.path.join(run_dir, "train"), resume=True,
    )
    make = _record_factory(cfg)
    _evaluate_checkpointed_run(cfg, dist, rng, run_dir, make)
    _mark_done(run_dir, cfg)
    return run_dir


def evaluate_run(cfg: ExperimentConfig) -> str:
    """Evaluation rows for an already-trained run (all existing checkpoints)."""
    run_dir, _, _ = _prepare_run(cfg)
    if not list(model_mod.iter_checkpoints(os.path.join(run_dir, "train"))):
        raise ConfigError(f"no checkpoints under {run_dir}/train; train first")
    rng = RngHandle(cfg.master_seed)
    dist = cfg.pretraining_distribution(rng)
    make = _record_factory(cfg)
    _evaluate_checkpointed_run(cfg, dist, rng, run_dir, make)
    return run_dir


def oracle_eval(cfg: ExperimentConfig) -> str:
    """Closed-form estimators only: no model, no training, same record schema.

    Writes loss rows for dMMSE/Ridge/Zero (and sMMSE when requested) plus the
    dMMSE-Ridge divergence, with step 0.
    """
    run_dir, _, done = _prepare_run(cfg)
    if done:
        return run_dir
    rng = RngHandle(cfg.master_seed)
    dist = cfg.pretraining_distribution(rng)
    make = _record_factory(cfg)
    set_pre, set_true = _eval_sets(cfg, dist, rng)
    oracle_preds, eps_curve = _oracle_predictors(cfg, dist, rng, run_dir)
    oracle_preds["zero"] = ZeroPredictor()
    records: list[RunRecord] = []
    predictions = {}
    for name, pred in oracle_preds.items():
        for eval_set in (set_pre, set_true):
            rep = ev.eval_loss_on_set(pred, eval_set)
            records.extend(_loss_records(make, rep, name, 0))
            predictions[(name, eval_set.tag)] = np.asarray(
                pred.predict(eval_set.xs, eval_set.ys), dtype=np.float64
            )
    if "dmmse" in oracle_preds:
        for eval_set in (set_pre, set_true):
            d, se = ev.delta_of_predictions(
                predictions[("dmmse", eval_set.tag)],
                predictions[("ridge", eval_set.tag)],
                cfg.D,
            )
            records.append(make("dmmse-ridge", eval_set.tag, "delta", "agg", d, se, 0))
    if eps_curve is not None:
        for eps2, loss, se in eps_curve:
            records.append(make("smmse", "true", "smmse_eps_loss", f"{eps2:.6g}", loss, se, 0))
    append_records(run_dir, records)
    _mark_done(run_dir, cfg)
    return run_dir


def interpolation_eval(cfg: ExperimentConfig, include_pt: bool = True) -> str:
    """Loss curves along task-pair interpolation paths.

    Requires a finite task set with at least two tasks.  Includes the PT when
    the run has a checkpoint (latest one), always dMMSE and Ridge.
    """
    if cfg.M == INFINITE or (isinstance(cfg.M, int) and cfg.M < 2):
        raise ConfigError("interpolation requires a finite task set with M >= 2")
    run_dir, _, _ = _prepare_run(cfg)
    rng = RngHandle(cfg.master_seed)
    dist = cfg.pretraining_distribution(rng)
    preds: list[ev.Predictor] = [
        DmmsePredictor(tasks=dist, sigma2=cfg.sigma2),
        RidgePredictor(sigma2=cfg.sigma2),
    ]
    step = 0
    if include_pt:
        ckpts = list(model_mod.iter_checkpoints(os.path.join(run_dir, "train")))
        if ckpts:
            step, path = ckpts[-1]
            preds.append(PTPredictor.from_checkpoint(path))
    curve = ev.eval_interpolation(
        preds, dist, cfg.eval.n_pairs, cfg.eval.alpha_grid(),
        cfg.eval.n_sequences_per_point, cfg.K, cfg.sigma2,
        rng.child("interp"),
    )
    make = _record_factory(cfg)
    records = [
        make(row["predictor"], "interp", "interp_loss", f"{row['alpha']:.6g}",
             row["loss"], row["stderr"], step)
        for row in curve.rows()
    ]
    append_records(run_dir, records)
    return run_dir


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

_SWEEP_AXES = ("M", "batch_size", "n_steps", "weight_decay", "d_embed", "D", "constant_data")


def _derive_config(base: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "M":
        v = value if value == INFINITE else int(value)
        return replace(base, M=v)
    if axis == "batch_size":
        return replace(base, train=replace(base.train, batch_size=int(value)))
    if axis == "n_steps":
        return replace(base, train=replace(base.train, n_steps=int(value)))
    if axis == "weight_decay":
        return replace(base, train=replace(base.train, weight_decay=float(value)))
    if axis == "d_embed":
        d = int(value)
        scale = d / base.model.d_embed
        heads = max(1, int(round(base.model.n_heads * scale)))
        return replace(base, model=replace(base.model, d_embed=d, n_heads=heads))
    if axis == "D":
        D = int(value)
        K = 2 * D
        return replace(
            base, D=D, K=K, sigma2=snr_matched_sigma2(D),
            model=replace(base.model, d_task=D, max_pairs=K),
        )
    if axis == "constant_data":
        # Appendix-style co-variation: change batch size, hold B*N fixed.
        B = int(value)
        total = base.train.batch_size * base.train.n_steps
        if total % B != 0:
            raise ConfigError(f"B*N={total} not divisible by batch size {B}")
        return replace(base, train=replace(base.train, batch_size=B, n_steps=total // B))
    raise ConfigError(f"unknown sweep axis {axis!r}; valid: {_SWEEP_AXES}")


def sweep(base: ExperimentConfig, axis: str, values: list, name: str,
          oracle_only: bool = False) -> str:
    """Enqueue one run per value (all else held fixed); returns manifest path.

    Writes derived config files plus a manifest under ``<out_dir>/sweeps/``.
    An existing manifest of the same name is rejected.
    """
    if not values:
        raise ConfigError("sweep values must be nonempty")
    if axis not in _SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; valid: {_SWEEP_AXES}")
    sweep_dir = os.path.join(base.out_dir, "sweeps", name)
    manifest_path = os.path.join(base.out_dir, "sweeps", f"{name}.json")
    if os.path.exists(manifest_path):
        raise ConfigError(f"sweep manifest already exists: {manifest_path}")
    os.makedirs(sweep_dir, exist_ok=True)
    runs = []
    for value in values:
        derived = _derive_config(base, axis, value)
        derived = replace(derived, run_id=f"{name}-{axis}-{value}")
        cfg_path = os.path.join(sweep_dir, f"{derived.run_id}.json")
        with open(cfg_path, "w") as fh:
            fh.write(derived.to_json())
        runs.append({
            "run_id": derived.run_id,
            "value": value,
            "config": cfg_path,
            "config_hash": derived.config_hash(),
        })
    manifest = {
        "name": name, "axis": axis, "values": list(values),
        "oracle_only": oracle_only, "runs": runs, "created": _timestamp(),
    }
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest_path


def run_sweep(manifest_path: str) -> list[str]:
    """Execute every run referenced by a sweep manifest, sequentially."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    out = []
    for entry in manifest["runs"]:
        with open(entry["config"]) as fh:
            cfg = ExperimentConfig.from_json(fh.read())
        runner = oracle_eval if manifest["oracle_only"] else run_experiment
        out.append(runner(cfg))
    return out


# ---------------------------------------------------------------------------
# Plot-data export and curve collection
# ---------------------------------------------------------------------------

_FIG_PRESETS = ("fig2", "fig3", "fig4", "fig5", "fig6", "fig7")


def collect_delta_curves(
    store_root: str,
    pair: str = "pt-ridge",
    distribution: str = "true",
    group_col: str = "B",
    groups: list | None = None,
) -> dict[str, list[tuple[float, float, float]]]:
    """Divergence-vs-M curves grouped by a record column (e.g. batch size).

    Returns ``{"B=256": [(M, delta, stderr), ...], ...}`` using each run's
    final checkpoint for transformer pairs.  Infinite-M runs have no place on
    a task-diversity axis and are skipped.
    """
    rows = load_records(store_root)
    final_pt = _final_pt_steps(rows)
    by_group: dict = {}
    for r in rows:
        if r["metric"] != "delta" or r["estimator"] != pair:
            continue
        if r["distribution"] != distribution or r["k_or_alpha"] != "agg":
            continue
        if pair.startswith("pt") and r["step"] != final_pt.get(r["run_id"], -1):
            continue
        try:
            m = int(r["M"])
        except ValueError:
            continue
        by_group.setdefault(r[group_col], {})[m] = (r["value"], r["stderr"])
    if groups is not None:
        wanted = {str(g) for g in groups}
        by_group = {g: v for g, v in by_group.items() if str(g) in wanted}
    return {
        f"{group_col}={g}": [(m, *v) for m, v in sorted(by_m.items())]
        for g, by_m in sorted(by_group.items(), key=lambda kv: str(kv[0]))
    }


def _write_tidy_csv(path: str, comment: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _final_pt_steps(rows: list[dict]) -> dict[str, int]:
    """Latest checkpoint step with PT rows, per run."""
    out: dict[str, int] = {}
    for r in rows:
        if r["estimator"] == "pt":
            out[r["run_id"]] = max(out.get(r["run_id"], 0), r["step"])
    return out


def export_plot_data(store_root: str, preset: str, out_dir: str) -> tuple[list[str], list[str]]:
    """Emit tidy per-figure CSVs from a results store.

    Returns (written paths, gap report lines).  Missing series are reported
    explicitly in ``<preset>_gaps.txt`` and on the gap list, never dropped
    silently.  Raises on an unknown preset.
    """
    if preset not in _FIG_PRESETS:
        raise ConfigError(f"unknown figure preset {preset!r}; valid: {_FIG_PRESETS}")
    rows = load_records(store_root)
    os.makedirs(out_dir, exist_ok=True)
    gaps: list[str] = []
    paths: list[str] = []
    final_pt = _final_pt_steps(rows)

    def loss_rows(estimators, dists):
        out = []
        run_ids = sorted({r["run_id"] for r in rows})
        for run_id in run_ids:
            for est in estimators:
                for dist in dists:
                    found = [
                        r for r in rows
                        if r["run_id"] == run_id and r["estimator"] == est
                        and r["distribution"] == dist and r["metric"] == "loss"
                        and r["k_or_alpha"] == "agg"
                        and (est != "pt" or r["step"] == final_pt.get(run_id, -1))
                    ]
                    if not found:
                        gaps.append(f"{run_id}: missing loss series estimator={est} distribution={dist}")
                        continue
                    r = found[-1]
                    out.append([r["run_id"], r["M"], r["B"], r["N"], est, dist,
                                repr(r["value"]), repr(r["stderr"])])
        return out

    def delta_rows(pairs, dists):
        out = []
        run_ids = sorted({r["run_id"] for r in rows})
        for run_id in run_ids:
            for pair in pairs:
                for dist in dists:
                    found = [
                        r for r in rows
                        if r["run_id"] == run_id and r["estimator"] == pair
                        and r["distribution"] == dist and r["metric"] == "delta"
                        and (not pair.startswith("pt") or r["step"] == final_pt.get(run_id, -1))
                    ]
                    if not found:
                        gaps.append(f"{run_id}: missing delta series pair={pair} distribution={dist}")
                        continue
                    r = found[-1]
                    out.append([r["run_id"], r["M"], r["D"], r["B"], r["N"],
                                repr(r["weight_decay"]), r["d_embed"], pair, dist,
                                repr(r["value"]), repr(r["stderr"])])
        return out

    loss_header = ["run_id", "M", "B", "N", "estimator", "distribution", "loss", "stderr"]
    delta_header = ["run_id", "M", "D", "B", "N", "weight_decay", "d_embed",
                    "pair", "distribution", "delta", "stderr"]

    if preset == "fig2":
        p = os.path.join(out_dir, "fig2_loss.csv")
        _write_tidy_csv(p, "normalized aggregate loss vs task diversity",
                        loss_header, loss_rows(("pt", "dmmse", "ridge"), ("pretrain", "true")))
        paths.append(p)
        p = os.path.join(out_dir, "fig2_delta.csv")
        _write_tidy_csv(p, "prediction divergence vs task diversity, grouped by batch size",
                        delta_header, delta_rows(("pt-dmmse", "pt-ridge"), ("pretrain", "true")))
        paths.append(p)
    elif preset == "fig3":
        p = os.path.join(out_dir, "fig3_delta.csv")
        _write_tidy_csv(p, "prediction divergence vs task diversity, grouped by training steps",
                        delta_header, delta_rows(("pt-dmmse", "pt-ridge"), ("pretrain", "true")))
        paths.append(p)
    elif preset == "fig4":
        out = []
        for r in rows:
            if r["metric"] != "interp_loss":
                continue
            out.append([r["k_or_alpha"], r["estimator"], r["M"],
                        repr(r["value"]), repr(r["stderr"])])
        if not out:
            gaps.append("missing interpolation series (run `icl-linreg interpolate` first)")
        p = os.path.join(out_dir, "fig4_interpolation.csv")
        _write_tidy_csv(p, "loss along task interpolation paths",
                        ["alpha", "predictor", "M", "loss", "stderr"], out)
        paths.append(p)
    elif preset == "fig5":
        p = os.path.join(out_dir, "fig5_delta_vs_dim.csv")
        _write_tidy_csv(p, "divergence from ridge vs task dimension",
                        delta_header, delta_rows(("pt-ridge", "dmmse-ridge"), ("true",)))
        paths.append(p)
    elif preset == "fig6":
        p = os.path.join(out_dir, "fig6_delta_weight_decay.csv")
        _write_tidy_csv(p, "divergence vs task diversity under weight decay",
                        delta_header, delta_rows(("pt-ridge",), ("true",)))
        paths.append(p)
    elif preset == "fig7":
        out = []
        run_ids = sorted({r["run_id"] for r in rows})
        for run_id in run_ids:
            for est in ("pt", "dmmse", "smmse"):
                found = [
                    r for r in rows
                    if r["run_id"] == run_id and r["estimator"] == est
                    and r["distribution"] == "true" and r["metric"] == "loss"
                    and r["k_or_alpha"] == "agg"
                    and (est != "pt" or r["step"] == final_pt.get(run_id, -1))
                ]
                if not found:
                    gaps.append(f"{run_id}: missing loss series estimator={est} distribution=true")
                    continue
                r = found[-1]
                out.append([r["run_id"], r["M"], est, repr(r["value"]), repr(r["stderr"])])
        p = os.path.join(out_dir, "fig7_smoothed.csv")
        _write_tidy_csv(p, "loss on new tasks: pt vs dmmse vs optimally smoothed dmmse",
                        ["run_id", "M", "estimator", "loss", "stderr"], out)
        paths.append(p)

    gap_path = os.path.join(out_dir, f"{preset}_gaps.txt")
    with open(gap_path, "w") as fh:
        if gaps:
            fh.write("\n".join(gaps) + "\n")
        else:
            fh.write("no missing series\n")
    return paths, gaps
