"""Optimization recipe: uniform initialization, Adagrad, inverted dropout,
epoch shuffling, validation-selected checkpointing, and early stopping.

Everything is deterministic in the seed. Three independent random streams
are derived from it: parameter init, dropout masks, and the per-epoch batch
shuffle (the shuffle stream lives in corpus.make_batches).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import EncodedInstance, make_batches
from .evaluation import evaluate_model
from .network import (ConfigError, ModelConfig, ModelParams, Network,
                      load_params, save_params)

log = logging.getLogger(__name__)

_INIT_TAG = 101
_DROPOUT_TAG = 202


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered; carries where and which term."""

    def __init__(self, epoch: int, batch_index: int, term: str):
        super().__init__(f"non-finite {term} in epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index
        self.term = term


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 25
    dropout: float = 0.7
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    init_range: float = 0.01
    adagrad_eps: float = 1e-8
    target_train_acc: float | None = None

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience",
                     "init_range", "adagrad_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.patience > self.max_epochs:
            raise ConfigError("patience cannot exceed max_epochs")


def init_params(config: ModelConfig, seed: int, init_range: float = 0.01,
                word_embeddings: np.ndarray | None = None) -> ModelParams:
    """Uniform(-init_range, init_range) everywhere, then the two exceptions:
    pretrained word embeddings when given, and forget-gate bias 1.0."""
    params = ModelParams(config)
    rng = np.random.default_rng([seed, _INIT_TAG])
    for p in params.all_params():
        p.data = rng.uniform(-init_range, init_range, p.data.shape)
    if word_embeddings is not None:
        table = np.asarray(word_embeddings, dtype=np.float64)
        if table.shape != params.word_emb.data.shape:
            raise ConfigError(f"embedding table shape {table.shape} != "
                              f"expected {params.word_emb.data.shape}")
        params.word_emb.data = table.copy()
    params.lstm["f"][2].data = np.ones(config.d)
    return params


class Adagrad:
    """Per-entry accumulated squared gradients with a fixed learning rate."""

    def __init__(self, params: Sequence[ad.Parameter], learning_rate: float,
                 eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.eps = eps
        self.accumulators = {p.name: np.zeros_like(p.data) for p in params}

    def step(self, params: Sequence[ad.Parameter]):
        for p in params:
            if p.grad is None:
                continue
            acc = self.accumulators[p.name]
            acc += p.grad * p.grad
            p.data -= self.learning_rate * p.grad / (np.sqrt(acc) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    la: float
    lb: float
    r_total: float
    r_s: float
    r_o: float
    val_acc: float
    val_f1: float


HISTORY_FIELDS = ("epoch", "train_loss", "L_a", "L_b", "R_total",
                  "R_s_component", "R_o_component", "val_acc", "val_f1")


def write_history(records: Sequence[EpochRecord]) -> str:
    lines = ["\t".join(HISTORY_FIELDS)]
    for r in records:
        values = (r.train_loss, r.la, r.lb, r.r_total, r.r_s, r.r_o,
                  r.val_acc, r.val_f1)
        lines.append("\t".join([str(r.epoch)] + ["%.10g" % v for v in values]))
    return "\n".join(lines) + "\n"


def read_history(text: str) -> list[EpochRecord]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or tuple(lines[0].split("\t")) != HISTORY_FIELDS:
        raise ConfigError("not a history file (bad header)")
    records = []
    for ln in lines[1:]:
        cells = ln.split("\t")
        if len(cells) != len(HISTORY_FIELDS):
            raise ConfigError(f"history row has {len(cells)} fields")
        records.append(EpochRecord(int(cells[0]), *[float(c) for c in cells[1:]]))
    return records


@dataclass
class Checkpoint:
    """Best-so-far snapshot; parameters are frozen as their serialized text."""

    epoch: int
    metrics: dict[str, float]
    model_config: ModelConfig
    train_config: TrainConfig
    params_text: str

    def restore(self) -> Network:
        config, params = load_params(self.params_text)
        return Network(config, params)


_CKPT_HEADER = "canet-checkpoint v1"


def save_checkpoint(ckpt: Checkpoint) -> str:
    tc = ckpt.train_config
    target = "none" if tc.target_train_acc is None else repr(tc.target_train_acc)
    lines = [
        _CKPT_HEADER,
        f"epoch {ckpt.epoch}",
        "metrics " + " ".join(f"{k}={v!r}" for k, v in sorted(ckpt.metrics.items())),
        ("train_config "
         f"learning_rate={tc.learning_rate!r} batch_size={tc.batch_size} "
         f"dropout={tc.dropout!r} max_epochs={tc.max_epochs} "
         f"patience={tc.patience} seed={tc.seed} init_range={tc.init_range!r} "
         f"adagrad_eps={tc.adagrad_eps!r} target_train_acc={target}"),
        f"rng seed={tc.seed} best_epoch={ckpt.epoch}",
    ]
    return "\n".join(lines) + "\n\n" + ckpt.params_text


def load_checkpoint(text: str) -> Checkpoint:
    lines = text.splitlines()
    if not lines or lines[0] != _CKPT_HEADER:
        raise ConfigError("not a checkpoint file (bad header)")
    fields: dict[str, str] = {}
    body_start = None
    for i, ln in enumerate(lines[1:], 1):
        if not ln.strip():
            body_start = i + 1
            break
        key, _, rest = ln.partition(" ")
        fields[key] = rest
    if body_start is None or "epoch" not in fields or "train_config" not in fields:
        raise ConfigError("checkpoint missing required header lines")

    metrics = {}
    for tok in fields.get("metrics", "").split():
        k, v = tok.split("=", 1)
        metrics[k] = float(v)
    tc_fields = dict(tok.split("=", 1) for tok in fields["train_config"].split())
    target = tc_fields["target_train_acc"]
    train_config = TrainConfig(
        learning_rate=float(tc_fields["learning_rate"]),
        batch_size=int(tc_fields["batch_size"]),
        dropout=float(tc_fields["dropout"]),
        max_epochs=int(tc_fields["max_epochs"]),
        patience=int(tc_fields["patience"]),
        seed=int(tc_fields["seed"]),
        init_range=float(tc_fields["init_range"]),
        adagrad_eps=float(tc_fields["adagrad_eps"]),
        target_train_acc=None if target == "none" else float(target))

    params_text = "\n".join(lines[body_start:])
    if params_text and not params_text.endswith("\n"):
        params_text += "\n"
    model_config, _ = load_params(params_text)
    return Checkpoint(epoch=int(fields["epoch"]), metrics=metrics,
                      model_config=model_config, train_config=train_config,
                      params_text=params_text)


def _mode_for(config: ModelConfig) -> str:
    return "3way" if config.n_classes == 3 else "binary"


def _validation_metrics(net: Network, val_set, mode: str) -> dict[str, float]:
    report, acd = evaluate_model(net, val_set, mode)
    metrics = {"val_acc": report.accuracy, "val_f1": report.macro_f1}
    if acd is not None:
        metrics["acd_f1"] = acd.f1
    return metrics


def _selection_key(metrics: dict[str, float]) -> tuple[float, float, float]:
    return (metrics["val_acc"], metrics["val_f1"], metrics.get("acd_f1", 0.0))


def train(train_set: list[EncodedInstance], val_set: list[EncodedInstance],
          model_config: ModelConfig, train_config: TrainConfig,
          word_embeddings: np.ndarray | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None,
          ) -> tuple[Checkpoint, list[EpochRecord]]:
    """Run the full loop; returns the best validation checkpoint and the
    per-epoch history.

    The untrained model is evaluated first as the improvement baseline, so
    `patience` epochs with no gain over initialization stop the run.
    """
    if not train_set or not val_set:
        raise ConfigError("train and validation sets must be nonempty")
    tc = train_config
    mode = _mode_for(model_config)
    params = init_params(model_config, tc.seed, tc.init_range, word_embeddings)
    net = Network(model_config, params)
    all_params = params.all_params()
    optimizer = Adagrad(all_params, tc.learning_rate, tc.adagrad_eps)
    dropout_rng = np.random.default_rng([tc.seed, _DROPOUT_TAG])

    best_metrics = _validation_metrics(net, val_set, mode)
    best = Checkpoint(epoch=0, metrics=best_metrics, model_config=model_config,
                      train_config=tc, params_text=save_params(params))
    stale_epochs = 0
    history: list[EpochRecord] = []

    for epoch in range(1, tc.max_epochs + 1):
        sums = {"total": 0.0, "la": 0.0, "lb": 0.0, "reg": 0.0,
                "reg_s": 0.0, "reg_o": 0.0}
        n_instances = 0
        for batch_index, batch in enumerate(
                make_batches(train_set, tc.batch_size, tc.seed, epoch)):
            ad.zero_grads(all_params)
            batch_loss = None
            for i, inst in enumerate(batch.instances):
                loss, parts = net.instance_loss(
                    inst, batch.token_matrix[i], batch.mask[i],
                    dropout_p=tc.dropout, training=True, rng=dropout_rng)
                if not np.isfinite(parts.total):
                    term = next((name for name, v in
                                 (("L_a", parts.la), ("L_b", parts.lb),
                                  ("R", parts.reg)) if not np.isfinite(v)),
                                "loss")
                    raise TrainingDiverged(epoch, batch_index, term)
                batch_loss = loss if batch_loss is None else ad.add(batch_loss, loss)
                for key, v in (("total", parts.total), ("la", parts.la),
                               ("lb", parts.lb), ("reg", parts.reg),
                               ("reg_s", parts.reg_s), ("reg_o", parts.reg_o)):
                    sums[key] += v
                n_instances += 1
            ad.backward(ad.scale(batch_loss, 1.0 / len(batch)))
            optimizer.step(all_params)

        val_metrics = _validation_metrics(net, val_set, mode)
        record = EpochRecord(
            epoch=epoch,
            train_loss=sums["total"] / n_instances,
            la=sums["la"] / n_instances, lb=sums["lb"] / n_instances,
            r_total=sums["reg"] / n_instances,
            r_s=sums["reg_s"] / n_instances, r_o=sums["reg_o"] / n_instances,
            val_acc=val_metrics["val_acc"], val_f1=val_metrics["val_f1"])
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)

        if _selection_key(val_metrics) > _selection_key(best.metrics):
            best = Checkpoint(epoch=epoch, metrics=val_metrics,
                              model_config=model_config, train_config=tc,
                              params_text=save_params(params))
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= tc.patience:
                log.info("early stop at epoch %d (no improvement in %d epochs)",
                         epoch, tc.patience)
                break

        if tc.target_train_acc is not None:
            train_report, _ = evaluate_model(net, train_set, mode)
            if train_report.accuracy >= tc.target_train_acc:
                log.info("target train accuracy %.4f reached at epoch %d",
                         train_report.accuracy, epoch)
                break

    return best, history
