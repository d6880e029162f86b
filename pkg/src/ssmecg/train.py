"""Pretext pretraining, downstream fine-tuning and the AdamW update."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .augment import N_LABELS, AugmentConfig, compose, window_seed
from .checkpoint import Checkpoint
from .metrics import EvalReport, ccc, f1_macro, f1_macro_multilabel, task_metrics
from .network import LinearHead, MLPHead, NetworkConfig, S4Backbone

logger = logging.getLogger(__name__)

LEARNING_RATE_GRID = (1e-4, 5e-4, 1e-3)
FINETUNE_MODES = ("full_model", "projector")


class TrainingError(RuntimeError):
    pass


# -- loss and optimiser ----------------------------------------------------------


def bce_multilabel_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy with logits, ``max(x,0) - x t + log1p(exp(-|x|))``."""
    if not torch.isfinite(logits).all():
        raise TrainingError("non-finite logits")
    loss = logits.clamp(min=0) - logits * target + torch.log1p(torch.exp(-logits.abs()))
    return loss.mean()


@dataclass
class AdamMoments:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamMoments":
        return cls(0, {k: p * 0 for k, p in params.items()}, {k: p * 0 for k, p in params.items()})


def adamw_step(params: dict, grads: dict, moments: AdamMoments, lr: float,
               weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8,
               no_decay: frozenset = frozenset()):
    """One AdamW update with bias correction and decoupled weight decay.

    Works on numpy arrays or torch tensors. Returns new ``(params, moments)``;
    the inputs are not modified.
    """
    b1, b2 = betas
    step = moments.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        finite = torch.isfinite(g).all() if isinstance(g, torch.Tensor) else np.isfinite(g).all()
        if not finite:
            raise TrainingError(f"non-finite gradient for {k}")
        m = b1 * moments.m[k] + (1 - b1) * g
        v = b2 * moments.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        decay = 0.0 if k in no_decay else weight_decay
        new_p[k] = p * (1 - lr * decay) - lr * m_hat / (v_hat ** 0.5 + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamMoments(step, new_m, new_v)


def _no_decay_names(names) -> frozenset:
    """Biases, norm parameters and the SSM parameters are not decayed."""
    skip = (".bias", "norm.weight", ".A", ".B", ".C", ".log_delta")
    return frozenset(n for n in names if n.endswith(skip))


class _Optimizer:
    """Applies :func:`adamw_step` to named module parameters in place."""

    def __init__(self, modules: dict, lr: float, weight_decay: float, frozen=()):
        self.params = {
            f"{prefix}.{name}": p
            for prefix, mod in modules.items()
            for name, p in mod.named_parameters()
            if not any(f"{prefix}.{name}".startswith(f) for f in frozen)
        }
        self.lr, self.weight_decay = lr, weight_decay
        self.no_decay = _no_decay_names(self.params)
        with torch.no_grad():
            self.moments = AdamMoments.zeros_like({k: p.detach() for k, p in self.params.items()})

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self):
        values = {k: p.detach() for k, p in self.params.items()}
        grads = {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in self.params.items()}
        new, self.moments = adamw_step(values, grads, self.moments, self.lr, self.weight_decay,
                                       no_decay=self.no_decay)
        for k, p in self.params.items():
            p.copy_(new[k])

    def add_to(self, ckpt: Checkpoint):
        for k in self.params:
            ckpt.arrays[f"opt.m.{k}"] = self.moments.m[k].double().numpy().copy()
            ckpt.arrays[f"opt.v.{k}"] = self.moments.v[k].double().numpy().copy()
        ckpt.meta["opt_step"] = self.moments.step

    def load_from(self, ckpt: Checkpoint):
        m, v = ckpt.section("opt.m"), ckpt.section("opt.v")
        if not m:
            return
        self.moments = AdamMoments(
            int(ckpt.meta.get("opt_step", 0)),
            {k: torch.from_numpy(m[k]).float() for k in self.params},
            {k: torch.from_numpy(v[k]).float() for k in self.params},
        )


# -- pretraining ---------------------------------------------------------------


@dataclass
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        return d


def pretext_batch(sources, indices, window_len: int, augment: AugmentConfig, seed: int, epoch: int):
    """Random window extraction plus augmentation for each source index.

    Returns float32 arrays ``(len(indices), window_len)`` and ``(len(indices), 9)``.
    """
    X = np.empty((len(indices), window_len), dtype=np.float32)
    Y = np.empty((len(indices), N_LABELS), dtype=np.float32)
    for row, i in enumerate(indices):
        src = np.asarray(sources[i])
        if len(src) < window_len:
            raise TrainingError(f"source {i} has {len(src)} samples < window {window_len}")
        rng = np.random.default_rng(window_seed(seed, epoch, i, 0))
        r = int(rng.integers(0, len(src) - window_len + 1))
        out = compose(src[r:r + window_len], augment, seed=window_seed(seed, epoch, i, 1))
        X[row], Y[row] = out.values, out.target
    return X, Y


@dataclass
class PretrainResult:
    backbone: S4Backbone
    head: LinearHead
    checkpoint: Checkpoint
    history: list


def pretrain(sources, config: PretrainConfig | None = None,
             network_config: NetworkConfig | None = None,
             metrics_log: Callable[[dict], None] | None = None) -> PretrainResult:
    """Train backbone + linear head to predict which transforms were applied.

    ``sources`` is a sequence of 1-D preprocessed signals, each at least one
    window long; every epoch takes a fresh random window from each and a fresh
    augmentation. The last epoch's parameters are kept.
    """
    config = config or PretrainConfig()
    network_config = network_config or NetworkConfig()
    n = len(sources)
    if n == 0:
        raise TrainingError("empty pretraining set")
    L = network_config.window_len or len(sources[0])
    torch.manual_seed(config.seed)
    backbone = S4Backbone(network_config, seed=config.seed)
    head = LinearHead(network_config.embedding_dim, N_LABELS, seed=config.seed + 1)
    opt = _Optimizer({"network": backbone, "head": head}, config.learning_rate, config.weight_decay)
    history = []
    backbone.train()
    for epoch in range(config.epochs):
        t0 = time.time()
        order = np.random.default_rng(window_seed(config.seed, epoch)).permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            X, Y = pretext_batch(sources, idx, L, config.augment, config.seed, epoch)
            opt.zero_grad()
            loss = bce_multilabel_loss(head(backbone(torch.from_numpy(X))), torch.from_numpy(Y))
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch starting {start}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        record = {"epoch": epoch + 1, "split": "train", "loss": total / count}
        history.append(record)
        if metrics_log:
            metrics_log(record)
        logger.info("pretrain epoch %d/%d loss %.4f (%.1fs)", epoch + 1, config.epochs,
                    record["loss"], time.time() - t0)

    ckpt = Checkpoint()
    ckpt.add_module("network", backbone)
    ckpt.add_module("head", head)
    opt.add_to(ckpt)
    ckpt.meta.update({
        "kind": "pretrain",
        "epoch": config.epochs,
        "seed": config.seed,
        "network_config": network_config.to_dict(),
        "pretrain_config": config.to_dict(),
        "history": history,
    })
    return PretrainResult(backbone, head, ckpt, history)


@torch.no_grad()
def predict_transforms(backbone: S4Backbone, head, windows, batch_size: int = 256) -> np.ndarray:
    """Per-label probabilities for already-augmented windows (eval mode)."""
    backbone.eval()
    out = []
    for start in range(0, len(windows), batch_size):
        X = torch.as_tensor(np.asarray(windows[start:start + batch_size], dtype=np.float32))
        out.append(torch.sigmoid(head(backbone(X))).numpy())
    return np.concatenate(out)


def pretext_eval_set(sources, window_len: int, augment: AugmentConfig, seed: int):
    """One augmented window per source, with targets, for held-out scoring."""
    return pretext_batch(sources, range(len(sources)), window_len, augment, seed, epoch=2**31 - 1)


def pretext_f1(backbone, head, X, Y) -> float:
    probs = predict_transforms(backbone, head, X)
    return f1_macro_multilabel(Y, probs >= 0.5)


def load_backbone(ckpt: Checkpoint, network_config: NetworkConfig | None = None) -> S4Backbone:
    cfg = network_config or NetworkConfig(**ckpt.meta["network_config"])
    backbone = S4Backbone(cfg, seed=0)
    backbone.load_state_dict(ckpt.state_dict("network"))
    return backbone


# -- fine-tuning -----------------------------------------------------------------


@dataclass
class FinetuneConfig:
    task: str = "stress"
    kind: str = "classification"
    n_outputs: int = 2
    mode: str = "full_model"
    head_hidden_dim: int = 128
    max_epochs: int = 200
    patience: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 256
    weight_decay: float = 0.01
    seed: int = 0
    select_by: str = "val_loss"
    train_decoder: bool = True

    def __post_init__(self):
        if self.mode not in FINETUNE_MODES:
            raise ValueError(f"mode must be one of {FINETUNE_MODES}, got {self.mode!r}")
        if self.kind not in ("classification", "multilabel", "regression"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not any(np.isclose(self.learning_rate, lr) for lr in LEARNING_RATE_GRID):
            raise ValueError(f"learning_rate must be one of {LEARNING_RATE_GRID}")
        if self.select_by not in ("val_loss", "metric"):
            raise ValueError("select_by must be 'val_loss' or 'metric'")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _task_loss(kind: str, out: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if kind == "classification":
        return F.cross_entropy(out, y.long())
    if kind == "multilabel":
        return bce_multilabel_loss(out, y.float())
    return F.mse_loss(out.reshape(y.shape), y.float())


def _task_output(kind: str, out: torch.Tensor) -> np.ndarray:
    if kind == "classification":
        return torch.softmax(out, dim=1).numpy()
    if kind == "multilabel":
        return torch.sigmoid(out).numpy()
    return out.numpy()


def _selection_metric(kind: str, y, outputs) -> float:
    if kind == "classification":
        return f1_macro(y, outputs.argmax(1), outputs.shape[1])
    if kind == "multilabel":
        return f1_macro_multilabel(y, outputs >= 0.5)
    y2, o2 = np.asarray(y).reshape(len(y), -1), outputs.reshape(len(outputs), -1)
    return float(np.mean([ccc(y2[:, j], o2[:, j]) for j in range(y2.shape[1])]))


@dataclass
class FoldResult:
    test_index: np.ndarray
    outputs: np.ndarray
    best_epoch: int
    epochs_run: int
    history: list
    checkpoint: Checkpoint
    metrics: dict = field(default_factory=dict)
    backbone: S4Backbone | None = None
    head: MLPHead | None = None


def finetune(X, y, split, config: FinetuneConfig, network_config: NetworkConfig | None = None,
             init: Checkpoint | dict | None = None,
             metrics_log: Callable[[dict], None] | None = None) -> FoldResult:
    """Fine-tune one fold with early stopping on validation loss.

    Args:
        X: (n, L) preprocessed windows.
        y: targets; class indices, (n, k) binary labels or (n,) / (n, d) values.
        split: ``(train_index, val_index, test_index)`` row-index arrays.
        init: pretrained checkpoint or backbone state dict; ``None`` means a
            randomly initialised backbone.

    In ``projector`` mode the encoder and S4 blocks are frozen and run in
    eval mode, so their pooled features are computed once and only the
    decoder and head are trained.
    """
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y)
    train_idx, val_idx, test_idx = (np.asarray(s, dtype=int) for s in split)
    if len(train_idx) == 0:
        raise TrainingError("empty training split")
    if config.kind == "classification":
        present = set(np.unique(y).tolist())
        missing = present - set(np.unique(y[train_idx]).tolist())
        if missing:
            raise TrainingError(f"training split has no examples of classes {sorted(missing)}")

    if network_config is None:
        network_config = (NetworkConfig(**init.meta["network_config"])
                          if isinstance(init, Checkpoint) else NetworkConfig())
    torch.manual_seed(config.seed)
    backbone = S4Backbone(network_config, seed=config.seed)
    if isinstance(init, Checkpoint):
        backbone.load_state_dict(init.state_dict("network"))
    elif init is not None:
        backbone.load_state_dict(init)
    head = MLPHead(network_config.embedding_dim, config.head_hidden_dim, config.n_outputs,
                   seed=config.seed + 1)

    projector = config.mode == "projector"
    if projector:
        backbone.eval()
        for p in backbone.backbone_parameters():
            p.requires_grad_(False)
        with torch.no_grad():
            feats = torch.cat([backbone.features(torch.from_numpy(X[s:s + 256]))
                               for s in range(0, len(X), 256)])
        frozen = ("network.encoder", "network.blocks")
        if not config.train_decoder:
            frozen += ("network.decoder",)

        def forward(rows, train):
            return head(backbone.decoder(feats[rows]))
    else:
        frozen = ()

        def forward(rows, train):
            backbone.train(train)
            return head(backbone(torch.from_numpy(X[rows])))

    opt = _Optimizer({"network": backbone, "head": head}, config.learning_rate,
                     config.weight_decay, frozen=frozen)
    target = torch.from_numpy(y.astype(np.float32) if config.kind != "classification" else y.astype(np.int64))

    @torch.no_grad()
    def evaluate(rows):
        if len(rows) == 0:
            return np.nan, None
        outs = [forward(rows[s:s + config.batch_size], False) for s in range(0, len(rows), config.batch_size)]
        out = torch.cat(outs)
        return _task_loss(config.kind, out, target[rows]).item(), _task_output(config.kind, out)

    def snapshot():
        return copy.deepcopy(backbone.state_dict()), copy.deepcopy(head.state_dict())

    rng = np.random.default_rng(window_seed(config.seed, 7))
    history = []
    best_score, best_epoch, best_state = np.inf, 0, snapshot()
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        total = 0.0
        for s in range(0, len(order), config.batch_size):
            rows = order[s:s + config.batch_size]
            opt.zero_grad()
            loss = _task_loss(config.kind, forward(rows, True), target[rows])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(rows)
        val_loss, val_out = evaluate(val_idx)
        if np.isnan(val_loss):
            val_loss = total / len(train_idx)
        record = {"epoch": epoch, "split": "train", "loss": total / len(train_idx)}
        vrecord = {"epoch": epoch, "split": "validation", "loss": val_loss}
        if val_out is not None:
            vrecord["metric"] = _selection_metric(config.kind, y[val_idx], val_out)
        history += [record, vrecord]
        if metrics_log:
            metrics_log(record)
            metrics_log(vrecord)
        score = -vrecord["metric"] if (config.select_by == "metric" and "metric" in vrecord) else val_loss
        if score < best_score:
            best_score, best_epoch, best_state = score, epoch, snapshot()
        elif epoch - best_epoch >= config.patience:
            break

    backbone.load_state_dict(best_state[0])
    head.load_state_dict(best_state[1])
    _, test_out = evaluate(test_idx)
    if test_out is None:
        test_out = np.zeros((0, config.n_outputs))

    ckpt = Checkpoint()
    ckpt.add_module("network", backbone)
    ckpt.add_module("head", head)
    opt.add_to(ckpt)
    ckpt.meta.update({
        "kind": "finetune",
        "epoch": best_epoch,
        "epochs_run": epoch,
        "seed": config.seed,
        "network_config": network_config.to_dict(),
        "finetune_config": config.to_dict(),
        "history": history,
    })
    metrics = task_metrics(config.kind, y[test_idx], test_out, config.n_outputs) if len(test_idx) else {}
    return FoldResult(test_idx, test_out, best_epoch, epoch, history, ckpt, metrics, backbone, head)


def subsample_training(train_index, labels, fraction: float, seed: int = 0, kind: str = "classification"):
    """Stratified (classification) or uniform random subset of the training rows.

    Each class present keeps ``max(1, round(fraction * count))`` rows.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    train_index = np.asarray(train_index, dtype=int)
    if fraction == 1:
        return train_index.copy()
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    if kind != "classification":
        n = max(1, int(round(fraction * len(train_index))))
        return np.sort(rng.choice(train_index, size=n, replace=False))
    keep = []
    for c in np.unique(labels[train_index]):
        rows = train_index[labels[train_index] == c]
        n = int(round(fraction * len(rows)))
        if n < 1:
            logger.warning("fraction %.3f leaves class %s empty; keeping 1 example", fraction, c)
            n = 1
        keep.append(rng.choice(rows, size=n, replace=False))
    return np.sort(np.concatenate(keep))


def cross_validate(X, y, folds, config: FinetuneConfig, network_config: NetworkConfig | None = None,
                   init=None, fraction: float = 1.0, split_mode: str = "subject-agnostic",
                   metrics_log: Callable[[dict], None] | None = None):
    """Run :func:`finetune` over row-index folds and collect an :class:`EvalReport`."""
    results = []
    for f, (tr, va, te) in enumerate(folds):
        tr = subsample_training(tr, y, fraction, seed=config.seed + f, kind=config.kind)
        log = (lambda r, f=f: metrics_log({**r, "fold": f})) if metrics_log else None
        results.append(finetune(X, y, (tr, va, te), config, network_config, init, metrics_log=log))
    report = EvalReport(config.task, split_mode, [r.metrics for r in results],
                        {"finetune": config.to_dict(), "fraction": fraction})
    return results, report
