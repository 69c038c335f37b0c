"""Training loop, evaluation, checkpoints and the ablation harness."""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DomainError, TrainingError
from .layers import Context
from .model import ModelConfig, build_model, check_bundle, precompute, predict
from .store import read_store, write_store

LOG_FIELDS = ("epoch", "split", "loss", "accuracy")


@dataclass
class TrainResult:
    model: object
    history: list
    best_epoch: int
    best_accuracy: float
    best_state: dict = field(repr=False, default_factory=dict)


def _labels_for(cfg, y):
    y = np.asarray(y, dtype=np.int64)
    return y[:1] if cfg.task == "classification" else y


def _diagnostics(model):
    lines = []
    for name, t in model.named_parameters().items():
        g = "none" if t.grad is None else f"{np.linalg.norm(t.grad):.3e}"
        lines.append(f"  {name}: |w|={np.linalg.norm(t.value):.3e} |g|={g}")
    return "\n".join(lines)


def train(cfg, dataset, bundles=None, log_path=None, checkpoint_dir=None, val_split="test"):
    """Fit a fresh model, one gradient step per mesh, for ``cfg.epochs`` epochs.

    Each epoch logs the mean training loss and accuracy (dropout active) and
    the eval-mode loss and accuracy on ``val_split``. The parameters with the
    best validation accuracy are kept in ``best_state`` (and written to
    ``checkpoint_dir``); the returned model holds the final parameters.
    """
    train_idx = dataset.indices("train")
    val_idx = dataset.indices(val_split)
    if not train_idx:
        raise DomainError("the training split is empty")
    if set(train_idx) & set(val_idx):
        raise DomainError("train and validation splits overlap")
    if bundles is None:
        bundles = [precompute(m, cfg) for m in dataset.meshes]
    for i in train_idx + val_idx:
        check_bundle(bundles[i], len(dataset.labels[i]) if cfg.task == "segmentation" else bundles[i].n_vertices)

    model = build_model(cfg)
    params = model.named_parameters()
    opt = ad.Adam(params, lr=cfg.lr, decay_every=cfg.lr_decay_every, decay_factor=cfg.lr_decay,
                  weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    best_acc, best_epoch, best_state = -1.0, -1, {}
    for epoch in range(cfg.epochs):
        opt.set_epoch(epoch)
        losses, correct, count = [], 0, 0
        for i in rng.permutation(train_idx):
            y = _labels_for(cfg, dataset.labels[i])
            logits = model.forward(bundles[i], Context(training=True, rng=rng))
            loss = ad.cross_entropy(logits, y)
            if not math.isfinite(float(loss.value)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, mesh {i}\n{_diagnostics(model)}")
            opt.zero_grad()
            loss.backward()
            try:
                opt.step()
            except TrainingError as exc:
                raise TrainingError(f"{exc} at epoch {epoch}, mesh {i}\n{_diagnostics(model)}") from None
            losses.append(float(loss.value))
            correct += int((logits.value.argmax(axis=1) == y).sum())
            count += len(y)
        history.append({"epoch": epoch, "split": "train", "loss": float(np.mean(losses)),
                        "accuracy": correct / count})
        if val_idx:
            rep = evaluate(model, dataset, bundles, val_split)
            history.append({"epoch": epoch, "split": val_split, "loss": rep["loss"], "accuracy": rep["accuracy"]})
            if rep["accuracy"] > best_acc:
                best_acc, best_epoch = rep["accuracy"], epoch
                best_state = {k: t.value.copy() for k, t in params.items()}
    if log_path is not None:
        write_log(log_path, history)
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, model, state=best_state or None,
                        extra={"best_epoch": best_epoch, "best_accuracy": best_acc})
    return TrainResult(model, history, best_epoch, best_acc, best_state)


def evaluate(model, dataset, bundles, split="test"):
    """Overall and per-class accuracy, mean loss and confusion matrix on ``split``.

    Classes absent from the split get a per-class accuracy of ``None``.
    """
    idx = dataset.indices(split)
    if not idx:
        raise DomainError(f"split {split!r} is empty")
    cfg = model.cfg
    c = cfg.n_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    losses = []
    for i in idx:
        y = _labels_for(cfg, dataset.labels[i])
        with ad.no_grad():
            logits = model.forward(bundles[i])
        losses.append(float(ad.cross_entropy(logits, y).value))
        np.add.at(confusion, (y, logits.value.argmax(axis=1)), 1)
    return accuracy_report(confusion, float(np.mean(losses)))


def accuracy_report(confusion, loss=None):
    confusion = np.asarray(confusion, dtype=np.int64)
    total = confusion.sum()
    if total == 0:
        raise DomainError("cannot report accuracy on zero samples")
    support = confusion.sum(axis=1)
    per_class = [None if s == 0 else float(confusion[k, k] / s) for k, s in enumerate(support)]
    return {"accuracy": float(np.trace(confusion) / total), "per_class": per_class,
            "confusion": confusion.tolist(), "n_samples": int(total), "loss": loss}


def predictions_accuracy(pred, labels, n_classes):
    """Accuracy report for plain label arrays."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    if pred.shape != labels.shape:
        raise DomainError(f"{pred.shape} predictions for {labels.shape} labels")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    return accuracy_report(confusion)


def write_log(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in LOG_FIELDS})


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, model, state=None, extra=None):
    """Parameters as float64 blobs plus a manifest with names, shapes and the config."""
    params = model.named_parameters()
    arrays = {k: (state[k] if state else t.value) for k, t in params.items()}
    meta = {"kind": "checkpoint", "config": model.cfg.to_dict(), "seed": model.cfg.seed,
            "parameters": {k: list(v.shape) for k, v in arrays.items()}}
    meta.update(extra or {})
    return write_store(directory, arrays, meta)


def load_checkpoint(directory):
    arrays, manifest = read_store(directory)
    cfg = ModelConfig.from_dict(manifest["config"])
    model = build_model(cfg)
    params = model.named_parameters()
    if set(params) != set(arrays):
        raise DomainError(f"checkpoint parameters do not match the model built from its config: {directory}")
    for k, t in params.items():
        if arrays[k].shape != t.shape:
            raise DomainError(f"checkpoint shape mismatch for {k}: {arrays[k].shape} vs {t.shape}")
        t.value[...] = arrays[k]
    return model, manifest


# --------------------------------------------------------------------------
# ablations


ABLATION_FIELDS = ("method", "mask", "partitioner", "partitions", "hks", "task", "train_accuracy", "accuracy")


def ablation_rows(base):
    """One config per toggle of the ablation table: backbone, mask, partitioner, multi-resolution, HKS embedding."""
    masked = base.mask_radius if math.isfinite(base.mask_radius) else 1.0
    return [
        base.replace(backbone="diffusion", mask_radius=masked),
        base.replace(backbone="vanilla", mask_radius=masked),
        base.replace(backbone="diffusion", mask_radius=math.inf),
        base.replace(backbone="vanilla", mask_radius=math.inf),
        base.replace(backbone="diffusion", mask_radius=math.inf, multi_res=(128, 512)),
        base.replace(backbone="vanilla", mask_radius=math.inf, partitioner="baseline"),
        base.replace(backbone="vanilla", mask_radius=math.inf, use_se=False),
    ]


def run_ablation(base, dataset, out_csv, rows=None, task_name=None):
    """Train and evaluate every row config on ``dataset``; write a CSV shaped like the ablation table."""
    rows = rows if rows is not None else ablation_rows(base)
    records = []
    cache = {}
    for cfg in rows:
        key = (cfg.partitioner, cfg.resolutions, cfg.k_eig, cfg.seed, cfg.clamp_mode)
        if key not in cache:
            cache[key] = [precompute(m, cfg) for m in dataset.meshes]
        result = train(cfg, dataset, bundles=cache[key])
        train_rep = evaluate(result.model, dataset, cache[key], "train")
        test_rep = evaluate(result.model, dataset, cache[key], "test")
        records.append({
            "method": "Diff" if cfg.layer.backbone == "diffusion" else "Vanilla",
            "mask": "yes" if math.isfinite(cfg.mask_radius) else "no",
            "partitioner": "RNS" if cfg.partitioner == "rns" else "BASE",
            "partitions": "-".join(str(p) for p in cfg.resolutions),
            "hks": "yes" if cfg.use_se else "no",
            "task": task_name or dataset.kind,
            "train_accuracy": f"{train_rep['accuracy']:.4f}",
            "accuracy": f"{test_rep['accuracy']:.4f}",
        })
    Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(records)
    return records


def history_json(history):
    return json.dumps(history, sort_keys=True)


__all__ = ["TrainResult", "train", "evaluate", "accuracy_report", "predictions_accuracy", "write_log",
           "save_checkpoint", "load_checkpoint", "ablation_rows", "run_ablation", "predict"]
