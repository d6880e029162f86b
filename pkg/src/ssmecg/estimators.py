"""scikit-learn style wrappers around preprocessing, pretraining and fine-tuning."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .augment import AugmentConfig
from .checkpoint import Checkpoint
from .metrics import ccc
from .network import LinearHead, NetworkConfig
from .preprocess import DegenerateSignalError, PreprocessConfig, clean, segment
from .train import (FinetuneConfig, FoldResult, PretrainConfig, finetune, load_backbone,
                    pretext_eval_set, pretext_f1, pretrain, predict_transforms)


class ECGPreprocessor(TransformerMixin, BaseEstimator):
    """Clean, per-subject z-score and cut raw recordings into fixed windows.

    ``X`` is a list of 1-D raw signals sampled at ``rate_hz``. ``fit`` learns
    each subject's mean and std from the cleaned signals. ``transform``
    returns a ``(n_windows, window_len)`` array; the subject of every row is
    left in ``window_groups_``. Subjects not seen during ``fit`` are
    normalised with their own statistics.
    """

    def __init__(self, rate_hz=100.0, target_rate_hz=100, window_seconds=10,
                 smoothing_kernel_len=5, highpass_cutoff_hz=0.5, highpass_order=5):
        self.rate_hz = rate_hz
        self.target_rate_hz = target_rate_hz
        self.window_seconds = window_seconds
        self.smoothing_kernel_len = smoothing_kernel_len
        self.highpass_cutoff_hz = highpass_cutoff_hz
        self.highpass_order = highpass_order

    def _config(self):
        return PreprocessConfig(target_rate_hz=self.target_rate_hz,
                                smoothing_kernel_len=self.smoothing_kernel_len,
                                highpass_cutoff_hz=self.highpass_cutoff_hz,
                                highpass_order=self.highpass_order,
                                window_seconds=self.window_seconds)

    def _clean_all(self, X, groups):
        signals = [np.asarray(x, dtype=np.float64).ravel() for x in X]
        groups = list(range(len(signals))) if groups is None else list(groups)
        if len(groups) != len(signals):
            raise ValueError("groups must have one entry per signal")
        cfg = self._config()
        return [clean(s, self.rate_hz, cfg) for s in signals], groups

    @staticmethod
    def _stats(signals):
        pooled = np.concatenate(signals)
        std = pooled.std()
        if std <= 1e-8:
            raise DegenerateSignalError("near-zero signal variance")
        return float(pooled.mean()), float(std)

    def fit(self, X, y=None, groups=None):
        cleaned, groups = self._clean_all(X, groups)
        by_group = {}
        for g, s in zip(groups, cleaned):
            by_group.setdefault(g, []).append(s)
        self.subject_stats_ = {g: self._stats(v) for g, v in by_group.items()}
        self.window_len_ = self._config().window_len
        return self

    def transform(self, X, groups=None):
        check_is_fitted(self, "subject_stats_")
        cleaned, groups = self._clean_all(X, groups)
        unseen = {}
        for g, s in zip(groups, cleaned):
            if g not in self.subject_stats_:
                unseen.setdefault(g, []).append(s)
        stats = {**self.subject_stats_, **{g: self._stats(v) for g, v in unseen.items()}}
        rows, owners = [], []
        for g, s in zip(groups, cleaned):
            mean, std = stats[g]
            if len(s) < self.window_len_:
                continue
            for w in segment((s - mean) / std, self.window_len_):
                rows.append(w.values)
                owners.append(g)
        self.window_groups_ = np.asarray(owners)
        if not rows:
            return np.zeros((0, self.window_len_), dtype=np.float32)
        return np.stack(rows).astype(np.float32)

    def fit_transform(self, X, y=None, groups=None):
        return self.fit(X, groups=groups).transform(X, groups=groups)


def _network_config(est, window_len):
    return NetworkConfig(d_model=est.d_model, d_state=est.d_state, n_blocks=est.n_blocks,
                         dropout=est.dropout, embedding_dim=est.embedding_dim,
                         window_len=window_len)


class TransformPretrainer(TransformerMixin, BaseEstimator):
    """Self-supervised backbone trained to recognise applied signal transforms.

    ``fit`` takes preprocessed source signals (rows of a 2-D array or a list
    of 1-D arrays, each at least ``window_len`` samples). ``transform`` maps
    windows to embeddings of size ``embedding_dim``.
    """

    def __init__(self, d_model=256, d_state=64, n_blocks=6, dropout=0.2, embedding_dim=256,
                 window_len=1000, epochs=100, batch_size=256, learning_rate=1e-3,
                 weight_decay=0.01, augment=None, random_state=0):
        self.d_model = d_model
        self.d_state = d_state
        self.n_blocks = n_blocks
        self.dropout = dropout
        self.embedding_dim = embedding_dim
        self.window_len = window_len
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.augment = augment
        self.random_state = random_state

    def _augment_config(self):
        if isinstance(self.augment, AugmentConfig):
            return self.augment
        return AugmentConfig(**(self.augment or {}))

    def fit(self, X, y=None):
        sources = [np.asarray(x, dtype=np.float32).ravel() for x in X]
        config = PretrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                                learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                                seed=int(self.random_state), augment=self._augment_config())
        result = pretrain(sources, config, _network_config(self, self.window_len))
        self._set_fitted(result.checkpoint)
        self.history_ = result.history
        return self

    def _set_fitted(self, ckpt: Checkpoint):
        self.checkpoint_ = ckpt
        self.backbone_ = load_backbone(ckpt).eval()
        self.head_ = _linear_head_from(ckpt)

    def transform(self, X):
        check_is_fitted(self, "backbone_")
        X = check_array(X, dtype=np.float32)
        with torch.no_grad():
            return np.concatenate([self.backbone_(torch.from_numpy(X[s:s + 256])).numpy()
                                   for s in range(0, len(X), 256)] or [np.zeros((0, 0))])

    def predict_proba(self, X):
        """Per-transform probabilities (8 transforms, then "original")."""
        check_is_fitted(self, "backbone_")
        return predict_transforms(self.backbone_, self.head_, check_array(X, dtype=np.float32))

    def score(self, X, y=None):
        """Transform-prediction macro-F1 on freshly augmented windows of ``X``."""
        check_is_fitted(self, "backbone_")
        sources = [np.asarray(x, dtype=np.float32).ravel() for x in X]
        Xa, Ya = pretext_eval_set(sources, self.backbone_.config.window_len or len(sources[0]),
                                  self._augment_config(), seed=int(self.random_state) + 1)
        return pretext_f1(self.backbone_, self.head_, Xa, Ya)

    def save(self, path):
        check_is_fitted(self, "checkpoint_")
        return self.checkpoint_.save(path)

    @classmethod
    def from_checkpoint(cls, path_or_ckpt):
        ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else Checkpoint.load(path_or_ckpt)
        nc = ckpt.meta["network_config"]
        pc = ckpt.meta.get("pretrain_config", {})
        est = cls(**{k: nc[k] for k in ("d_model", "d_state", "n_blocks", "dropout",
                                         "embedding_dim", "window_len")},
                  **{k: pc[k] for k in ("epochs", "batch_size", "learning_rate", "weight_decay")
                     if k in pc},
                  random_state=ckpt.meta.get("seed", 0))
        est._set_fitted(ckpt)
        return est


def _linear_head_from(ckpt: Checkpoint):
    state = ckpt.state_dict("head")
    d_out, d_in = state["fc.weight"].shape
    head = LinearHead(d_in, d_out)
    head.load_state_dict(state)
    return head


def _resolve_init(init):
    if init is None or isinstance(init, Checkpoint):
        return init
    if isinstance(init, (str, Path)):
        return Checkpoint.load(init)
    if isinstance(init, TransformPretrainer):
        check_is_fitted(init, "checkpoint_")
        return init.checkpoint_
    raise TypeError(f"init must be a Checkpoint, a path, a fitted TransformPretrainer or None, "
                    f"got {type(init).__name__}")


class _FinetunedModel(BaseEstimator):
    _kind = "classification"

    def __init__(self, init=None, mode="projector", head_hidden_dim=128, max_epochs=200,
                 patience=10, learning_rate=1e-3, batch_size=256, weight_decay=0.01,
                 validation_fraction=0.2, d_model=256, d_state=64, n_blocks=6, dropout=0.2,
                 embedding_dim=256, random_state=0):
        self.init = init
        self.mode = mode
        self.head_hidden_dim = head_hidden_dim
        self.max_epochs = max_epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.validation_fraction = validation_fraction
        self.d_model = d_model
        self.d_state = d_state
        self.n_blocks = n_blocks
        self.dropout = dropout
        self.embedding_dim = embedding_dim
        self.random_state = random_state

    def _fit(self, X, target, n_outputs, stratify):
        ckpt = _resolve_init(self.init)
        rows = np.arange(len(X))
        if self.validation_fraction:
            train, val = train_test_split(rows, test_size=self.validation_fraction,
                                          random_state=self.random_state, stratify=stratify)
        else:
            train, val = rows, rows[:0]
        network_config = None if ckpt is not None else _network_config(self, X.shape[1])
        config = FinetuneConfig(kind=self._kind, n_outputs=n_outputs, mode=self.mode,
                                head_hidden_dim=self.head_hidden_dim, max_epochs=self.max_epochs,
                                patience=self.patience, learning_rate=self.learning_rate,
                                batch_size=self.batch_size, weight_decay=self.weight_decay,
                                seed=int(self.random_state))
        result: FoldResult = finetune(X, target, (np.sort(train), np.sort(val), rows[:0]),
                                      config, network_config, ckpt)
        self.backbone_ = result.backbone.eval()
        self.head_ = result.head.eval()
        self.checkpoint_ = result.checkpoint
        self.best_epoch_ = result.best_epoch
        self.history_ = result.history
        self.n_features_in_ = X.shape[1]
        return self

    def _raw_output(self, X):
        check_is_fitted(self, "backbone_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected windows of length {self.n_features_in_}, got {X.shape[1]}")
        with torch.no_grad():
            return torch.cat([self.head_(self.backbone_(torch.from_numpy(X[s:s + 256])))
                              for s in range(0, len(X), 256)])


class ECGClassifier(ClassifierMixin, _FinetunedModel):
    """Window classifier fine-tuned from a pretrained (or random) backbone.

    ``init`` may be a :class:`~ssmecg.checkpoint.Checkpoint`, a checkpoint
    path, a fitted :class:`TransformPretrainer` or ``None``. A stratified
    ``validation_fraction`` of the training rows drives early stopping.
    """

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float32)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        return self._fit(X, self._encoder.transform(y), len(self.classes_), stratify=y)

    def predict_proba(self, X):
        return torch.softmax(self._raw_output(X), dim=1).numpy()

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class ECGRegressor(RegressorMixin, _FinetunedModel):
    """Window regressor; ``score`` is the concordance correlation coefficient."""

    _kind = "regression"

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float32, y_numeric=True)
        return self._fit(X, y.astype(np.float32), 1, stratify=None)

    def predict(self, X):
        return self._raw_output(X).numpy().reshape(-1)

    def score(self, X, y, sample_weight=None):
        return ccc(y, self.predict(X))
