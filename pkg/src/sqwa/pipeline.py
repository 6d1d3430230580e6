"""End-to-end run orchestration: pretrain, quantize, retrain with cyclical
rates, average, re-quantize + fine-tune, report.

Every stage writes its artifact as a checkpoint directory under the run's
output directory, and every stage reads its inputs back from disk. That
makes runs resumable: rerunning with the same config skips stages whose
artifacts already exist and yields byte-identical results, because fresh
and resumed runs consume the same persisted bytes. A frozen copy of the
resolved config is written at the start of the run and must match on
resume. Failed stages leave their partial artifacts in place.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .averaging import AveragedModel, average_models, requantize_averaged
from .data import Dataset, load_idx, shuffle_batches, synthetic_blobs
from .nn import (LayerSpec, Network, OptimizerState, evaluate, forward,
                 init_weights, loss_and_backward, sgd_momentum_step)
from .qat import ShadowModel, finetune, retrain
from .quantizer import QuantizedModel, direct_quantize_model
from .schedule import CyclicalSchedule, StepDecaySchedule, derive_cycle_bounds, lr_at

__all__ = [
    "PipelineError",
    "DatasetConfig",
    "PretrainConfig",
    "CyclicalConfig",
    "FinetuneConfig",
    "RunConfig",
    "default_config",
    "build_datasets",
    "as_network",
    "run_stages",
    "run_sqwa",
    "STAGES",
    "CONFIG_SCHEMA_VERSION",
]

log = logging.getLogger("sqwa")

CONFIG_SCHEMA_VERSION = 1

STAGES = ["pretrain", "quantize", "retrain-cyclical", "average", "finetune", "report"]


class PipelineError(RuntimeError):
    pass


def _from_dict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ValueError(f"{where}: expected a mapping, got {type(d).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**d)


@dataclass
class DatasetConfig:
    kind: str = "blobs"
    # blobs
    num_classes: int = 10
    samples_per_class: int = 500
    test_samples_per_class: int = 500
    dims: int = 8
    spread: float = 0.45
    train_seed: int | None = None  # filled from the run seed at resolve time
    test_seed: int | None = None
    # idx file pairs
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    layout: str = "flat"
    normalize: bool = True


@dataclass
class PretrainConfig:
    epochs: int = 40
    initial_lr: float = 0.1
    decay_factor: float = 0.1
    milestones: list[int] = field(default_factory=lambda: [20, 30])
    momentum: float = 0.9
    l2_scale: float = 5e-4
    batch_size: int = 32


@dataclass
class CyclicalConfig:
    period: int = 6
    mid_steps: int = 1
    epochs: int = 84
    max_lr: float | None = None  # default: max pretraining rate / 10
    min_lr: float | None = None  # default: min pretraining rate / 10


@dataclass
class FinetuneConfig:
    epochs: int = 4
    decay: float = 0.1
    initial_lr: float | None = None  # default: 0.1 * cyclical max_lr


@dataclass
class RunConfig:
    seed: int
    output_dir: str
    bits: int = 2
    average_last_n: int = 7
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    network: dict | None = None  # {"input_shape": [...], "layers": [...]}
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    cyclical: CyclicalConfig = field(default_factory=CyclicalConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema version {version!r}")
        for key, cls in (("dataset", DatasetConfig), ("pretrain", PretrainConfig),
                         ("cyclical", CyclicalConfig), ("finetune", FinetuneConfig)):
            if key in d:
                d[key] = _from_dict(cls, d[key], key)
        return _from_dict(RunConfig, d, "config")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema_version"] = CONFIG_SCHEMA_VERSION
        return d

    def resolve(self) -> "RunConfig":
        """Fill every derived default and validate. Returns a new config in
        which nothing is left implicit."""
        cfg = dataclasses.replace(self)
        cfg.dataset = dataclasses.replace(self.dataset)
        cfg.pretrain = dataclasses.replace(self.pretrain)
        cfg.cyclical = dataclasses.replace(self.cyclical)
        cfg.finetune = dataclasses.replace(self.finetune)
        if cfg.seed < 0:
            raise ValueError("seed must be non-negative")
        if cfg.dataset.kind == "blobs":
            if cfg.dataset.train_seed is None:
                cfg.dataset.train_seed = cfg.seed
            if cfg.dataset.test_seed is None:
                cfg.dataset.test_seed = cfg.seed + 104729
        elif cfg.dataset.kind != "idx":
            raise ValueError(f"unknown dataset kind {cfg.dataset.kind!r}")
        if cfg.network is None:
            if cfg.dataset.kind != "blobs":
                raise ValueError("a network spec is required for idx datasets")
            cfg.network = {
                "input_shape": [cfg.dataset.dims],
                "layers": [
                    {"kind": "dense", "fan_in": cfg.dataset.dims, "fan_out": 24},
                    {"kind": "relu"},
                    {"kind": "dense", "fan_in": 24, "fan_out": cfg.dataset.num_classes},
                ],
            }
        pre_sched = _pretrain_schedule(cfg)
        if cfg.cyclical.max_lr is None or cfg.cyclical.min_lr is None:
            hi, lo = derive_cycle_bounds(pre_sched.lr_values())
            if cfg.cyclical.max_lr is None:
                cfg.cyclical.max_lr = hi
            if cfg.cyclical.min_lr is None:
                cfg.cyclical.min_lr = lo
        _cyclical_schedule(cfg)  # validate
        if cfg.finetune.initial_lr is None:
            cfg.finetune.initial_lr = 0.1 * cfg.cyclical.max_lr
        captures = cfg.cyclical.epochs // cfg.cyclical.period
        if not (1 <= cfg.average_last_n <= captures):
            raise ValueError(f"average_last_n {cfg.average_last_n} exceeds the "
                             f"{captures} captures the cyclical stage will produce")
        return cfg


def default_config(output_dir: str, seed: int = 0) -> RunConfig:
    """The desk-scale default recipe, fully resolved."""
    return RunConfig(seed=seed, output_dir=str(output_dir)).resolve()


def _pretrain_schedule(cfg: RunConfig) -> StepDecaySchedule:
    p = cfg.pretrain
    return StepDecaySchedule(p.initial_lr, p.decay_factor, tuple(p.milestones), p.epochs)


def _cyclical_schedule(cfg: RunConfig) -> CyclicalSchedule:
    c = cfg.cyclical
    return CyclicalSchedule(c.max_lr, c.min_lr, c.period, c.mid_steps, c.epochs)


def _network_template(cfg: RunConfig) -> tuple[list[LayerSpec], tuple[int, ...]]:
    specs = [LayerSpec.from_dict(d) for d in cfg.network["layers"]]
    return specs, tuple(cfg.network["input_shape"])


def build_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.kind == "blobs":
        train = synthetic_blobs(d.num_classes, d.samples_per_class, d.dims, d.spread,
                                d.train_seed)
        test = synthetic_blobs(d.num_classes, d.test_samples_per_class, d.dims, d.spread,
                               d.test_seed)
        return train, test
    train = load_idx(d.train_images, d.train_labels, normalize=d.normalize, layout=d.layout)
    test = load_idx(d.test_images, d.test_labels, normalize=d.normalize, layout=d.layout)
    return train, test


def dataset_id(cfg: RunConfig, split: str) -> str:
    return json.dumps({"dataset": dataclasses.asdict(cfg.dataset), "split": split},
                      sort_keys=True)


def as_network(obj) -> Network:
    """The evaluable network behind any checkpointable model object."""
    if isinstance(obj, Network):
        return obj
    if isinstance(obj, QuantizedModel):
        return obj.net
    if isinstance(obj, AveragedModel):
        return obj.net
    if isinstance(obj, ShadowModel):
        return obj.applied
    raise TypeError(f"no evaluable network in {type(obj).__name__}")


# --- stages ---------------------------------------------------------------

def _paths(cfg: RunConfig) -> dict[str, Path]:
    out = Path(cfg.output_dir)
    return {
        "config": out / "config.json",
        "pretrained": out / "pretrained",
        "direct_quantized": out / "direct_quantized",
        "capture_bank": out / "capture_bank",
        "retrained_shadow": out / "retrained_shadow",
        "averaged": out / "averaged",
        "requantized": out / "requantized",
        "final": out / "final",
        "final_quantized": out / "final_quantized",
        "metrics": out / "metrics.csv",
        "summary": out / "summary.txt",
    }


def _done(path: Path) -> bool:
    return (path / "manifest.json").is_file()


def _freeze_config(cfg: RunConfig, paths: dict) -> None:
    resolved = cfg.to_dict()
    path = paths["config"]
    if path.is_file():
        existing = json.loads(path.read_text())
        if existing != json.loads(json.dumps(resolved)):
            raise ValueError(f"{path} was written by a run with a different config; "
                             "refusing to mix artifacts")
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True))


def _stage_pretrain(cfg: RunConfig, paths: dict, train: Dataset, test: Dataset) -> None:
    if _done(paths["pretrained"]):
        log.info("pretrain: artifact exists, skipping")
        return
    specs, input_shape = _network_template(cfg)
    sched = _pretrain_schedule(cfg)
    p = cfg.pretrain
    net = init_weights(specs, input_shape, cfg.seed)
    opt = OptimizerState.for_network(net, p.momentum, p.l2_scale)
    for epoch in range(p.epochs):
        lr = lr_at(sched, epoch)
        for xb, yb in shuffle_batches(train, p.batch_size, cfg.seed, epoch):
            logits, cache = forward(net, xb)
            _, grads = loss_and_backward(net, cache, logits, yb)
            sgd_momentum_step(net, grads, opt, lr)
    loss, acc = evaluate(net, test)
    log.info("pretrain: %d epochs, test loss %.4f, test accuracy %.4f",
             p.epochs, loss, acc)
    ckpt.save(net, paths["pretrained"],
              provenance={"stage": "pretrain", "seed": cfg.seed, "epochs": p.epochs})


def _stage_quantize(cfg: RunConfig, paths: dict, train: Dataset, test: Dataset) -> None:
    if _done(paths["direct_quantized"]):
        log.info("quantize: artifact exists, skipping")
        return
    net = ckpt.load(paths["pretrained"])
    qm, steps = direct_quantize_model(net, cfg.bits)
    loss, acc = evaluate(qm.net, test)
    log.info("quantize: %d-bit direct, steps %s, test accuracy %.4f",
             cfg.bits, [f"{s:.4g}" for s in steps], acc)
    ckpt.save(qm, paths["direct_quantized"], provenance={"stage": "quantize"})


def _stage_retrain(cfg: RunConfig, paths: dict, train: Dataset, test: Dataset) -> None:
    if _done(paths["capture_bank"]) and _done(paths["retrained_shadow"]):
        log.info("retrain-cyclical: artifacts exist, skipping")
        return
    net = ckpt.load(paths["pretrained"])
    qm = ckpt.load(paths["direct_quantized"])
    model = ShadowModel.from_network(net, cfg.bits, qm.steps)
    sched = _cyclical_schedule(cfg)

    def _log_epoch(epoch, lr, m):
        if (epoch + 1) % sched.period == 0:
            loss, acc = evaluate(m.applied, test)
            log.info("retrain-cyclical: epoch %d, lr %.2g, test accuracy %.4f",
                     epoch, lr, acc)

    model, bank = retrain(model, train, sched, cfg.cyclical.epochs, cfg.seed + 1,
                          batch_size=cfg.pretrain.batch_size,
                          momentum=cfg.pretrain.momentum, eval_dataset=test,
                          on_epoch_end=_log_epoch)
    ckpt.save(bank, paths["capture_bank"], provenance={"stage": "retrain-cyclical"})
    ckpt.save(model, paths["retrained_shadow"], provenance={"stage": "retrain-cyclical"})
    log.info("retrain-cyclical: %d captures banked", len(bank))


def _stage_average(cfg: RunConfig, paths: dict, train: Dataset, test: Dataset) -> None:
    if _done(paths["averaged"]):
        log.info("average: artifact exists, skipping")
        return
    bank = ckpt.load(paths["capture_bank"])
    avg = average_models(bank, cfg.average_last_n)
    loss, acc = evaluate(avg.net, test)
    log.info("average: %d models, effective %d-bit, test accuracy %.4f",
             avg.count, avg.effective_bits, acc)
    ckpt.save(avg, paths["averaged"], provenance={"stage": "average"})


def _stage_finetune(cfg: RunConfig, paths: dict, train: Dataset, test: Dataset) -> None:
    if _done(paths["requantized"]) and _done(paths["final"]) \
            and _done(paths["final_quantized"]):
        log.info("finetune: artifacts exist, skipping")
        return
    avg = ckpt.load(paths["averaged"])
    qm, steps = requantize_averaged(avg, cfg.bits)
    ckpt.save(qm, paths["requantized"], provenance={"stage": "finetune"})
    model = ShadowModel.from_network(avg.net, cfg.bits, steps)
    f = cfg.finetune
    model = finetune(model, train, f.initial_lr, f.epochs, f.decay, cfg.seed + 2,
                     batch_size=cfg.pretrain.batch_size, momentum=cfg.pretrain.momentum)
    loss, acc = evaluate(model.applied, test)
    log.info("finetune: %d epochs from lr %.2g, test accuracy %.4f",
             f.epochs, f.initial_lr, acc)
    ckpt.save(model, paths["final"], provenance={"stage": "finetune"})
    ckpt.save(model.as_quantized(), paths["final_quantized"],
              provenance={"stage": "finetune"})


def _metric_row(label: str, epoch, bits, net: Network, train: Dataset,
                test: Dataset) -> dict:
    train_loss, train_acc = evaluate(net, train)
    test_loss, test_acc = evaluate(net, test)
    return {"label": label, "epoch": epoch, "bits": bits,
            "train_loss": train_loss, "train_accuracy": train_acc,
            "test_loss": test_loss, "test_accuracy": test_acc}


def _stage_report(cfg: RunConfig, paths: dict, train: Dataset, test: Dataset) -> list[dict]:
    bank = ckpt.load(paths["capture_bank"])
    avg = ckpt.load(paths["averaged"])
    requant = ckpt.load(paths["requantized"])
    final = ckpt.load(paths["final_quantized"])
    rows = []
    for entry in bank.entries[-cfg.average_last_n:]:
        rows.append(_metric_row("capture", entry.epoch, bank.bits, entry.model.net,
                                train, test))
    rows.append(_metric_row("average", None, avg.effective_bits, avg.net, train, test))
    rows.append(_metric_row("direct", None, requant.bits, requant.net, train, test))
    rows.append(_metric_row("finetune", None, final.bits, final.net, train, test))

    header = ["label", "epoch", "bits", "train_loss", "train_accuracy",
              "test_loss", "test_accuracy"]
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join("" if r[k] is None else
                              (repr(r[k]) if isinstance(r[k], float) else str(r[k]))
                              for k in header))
    paths["metrics"].write_text("\n".join(lines) + "\n")

    pre = ckpt.load(paths["pretrained"])
    direct0 = ckpt.load(paths["direct_quantized"])
    fp_loss, fp_acc = evaluate(pre, test)
    d_loss, d_acc = evaluate(direct0.net, test)
    summary = [
        f"full-precision test accuracy:            {fp_acc:.4f}",
        f"direct {cfg.bits}-bit quantization (pretrained): {d_acc:.4f}",
        "",
        f"{'row':<10}{'epoch':>6}{'bits':>5}{'train acc':>11}{'test acc':>10}",
    ]
    for r in rows:
        epoch = "" if r["epoch"] is None else r["epoch"]
        summary.append(f"{r['label']:<10}{epoch:>6}{r['bits']:>5}"
                       f"{r['train_accuracy']:>11.4f}{r['test_accuracy']:>10.4f}")
    paths["summary"].write_text("\n".join(summary) + "\n")
    for line in summary:
        log.info("report: %s", line)
    return rows


_STAGE_FNS = {
    "pretrain": _stage_pretrain,
    "quantize": _stage_quantize,
    "retrain-cyclical": _stage_retrain,
    "average": _stage_average,
    "finetune": _stage_finetune,
    "report": _stage_report,
}


def run_stages(cfg: RunConfig, last_stage: str) -> dict:
    """Run every stage up to and including `last_stage`, skipping stages
    whose artifacts already exist. Returns paths and, when the report stage
    runs, its rows."""
    if last_stage not in STAGES:
        raise ValueError(f"unknown stage {last_stage!r}")
    cfg = cfg.resolve()
    paths = _paths(cfg)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    _freeze_config(cfg, paths)
    train, test = build_datasets(cfg)
    result = {"paths": paths, "config": cfg}
    for name in STAGES[:STAGES.index(last_stage) + 1]:
        try:
            out = _STAGE_FNS[name](cfg, paths, train, test)
        except Exception as exc:
            raise PipelineError(f"stage '{name}': {exc}") from exc
        if name == "report":
            result["report"] = out
    return result


def run_sqwa(cfg: RunConfig) -> dict:
    """The full pipeline: pretrain through report."""
    return run_stages(cfg, "report")
