"""scikit-learn style estimators over the teacher/student training code.

All estimators standardise features with statistics fitted on the training
rows (and, for regression, the target too; predictions come back in the
original units). The student reuses its teacher's scalers so that both see
identical inputs.

    >>> est = IncompleteMultimodalModel(epochs_m=5, epochs_u=5)
    >>> est.fit(X_mri, y, X_gen=X_gen)       # doctest: +SKIP
    >>> est.predict(X_mri_new)                # MRI only   # doctest: +SKIP
"""
from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import fields

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import MultimodalDataset
from .training import (MModel, TrainConfig, UModel, UnimodalModel, pretrain_m,
                       score_predictions, train_u, train_unimodal)



def _scaler_state(s: StandardScaler):
    return s.mean_, s.scale_


def _scaler_from(mean, scale) -> StandardScaler:
    s = StandardScaler()
    s.mean_, s.scale_ = np.asarray(mean, dtype=np.float64), np.asarray(scale, dtype=np.float64)
    s.var_ = s.scale_ ** 2
    s.n_features_in_ = s.mean_.shape[0]
    s.n_samples_seen_ = 0
    return s


class _TabularEstimator(BaseEstimator):
    def __init__(self, task="regression", n_classes=0, backbone="transformer", d1=32, d2=32,
                 n_layers=2, n_heads=4, dropout=0.1, d_sphere=8, eta=1.0, alpha=0.1,
                 beta=1.0, gamma=0.999, temperature=2.0, lr=1e-3, weight_decay=1e-5,
                 batch_size=32, epochs_m=100, epochs_u=100, seed=0, task_weight=1.0):
        self.task = task
        self.n_classes = n_classes
        self.backbone = backbone
        self.d1 = d1
        self.d2 = d2
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.dropout = dropout
        self.d_sphere = d_sphere
        self.eta = eta
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.temperature = temperature
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs_m = epochs_m
        self.epochs_u = epochs_u
        self.seed = seed
        self.task_weight = task_weight

    kind = ""

    # -- helpers -----------------------------------------------------------
    def _config(self, n_classes: int) -> TrainConfig:
        params = {f.name: getattr(self, f.name) for f in fields(TrainConfig)}
        params["n_classes"] = n_classes
        return TrainConfig(**params)

    def _check_target(self, y):
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if self.task == "classification":
            if not np.all(y == np.round(y)) or y.min() < 0:
                raise ValueError("classification labels must be non-negative integers")
            n_classes = max(int(self.n_classes), int(y.max()) + 1, 2)
        elif self.task == "regression":
            n_classes = 0
        else:
            raise ValueError(f"unknown task {self.task!r}")
        return y, n_classes

    def _fit_scalers(self, X, X_gen, y):
        self.mri_scaler_ = StandardScaler().fit(X)
        self.gen_scaler_ = None if X_gen is None else StandardScaler().fit(X_gen)
        if self.task == "regression":
            sd = float(y.std())
            self.y_mean_, self.y_scale_ = float(y.mean()), sd if sd > 0 else 1.0
        else:
            self.y_mean_, self.y_scale_ = 0.0, 1.0

    def _dataset(self, X, X_gen, y) -> MultimodalDataset:
        xm = self.mri_scaler_.transform(X)
        xg = None if X_gen is None else self.gen_scaler_.transform(X_gen)
        ys = (y - self.y_mean_) / self.y_scale_ if self.task == "regression" else y
        return MultimodalDataset(xm, xg, ys, [str(i) for i in range(len(y))],
                                 self.task, self.n_classes_)

    def _decode(self, raw: np.ndarray):
        if self.task == "regression":
            return raw.reshape(-1) * self.y_scale_ + self.y_mean_
        return np.argmax(raw, axis=-1)

    def _validate_gen(self, X, X_gen):
        if X_gen is None:
            raise ValueError(f"{type(self).__name__} needs the genetic modality (X_gen)")
        X_gen = check_array(X_gen, dtype=np.float64)
        if X_gen.shape[0] != X.shape[0]:
            raise ValueError("X and X_gen have different numbers of rows")
        return X_gen

    def _raw_predict(self, X, X_gen=None) -> np.ndarray:
        raise NotImplementedError

    # -- public API --------------------------------------------------------
    def predict(self, X, X_gen=None):
        return self._decode(self._raw_predict(X, X_gen))

    def decision_function(self, X, X_gen=None):
        """Raw model outputs: scaled regression values or class logits."""
        return self._raw_predict(X, X_gen)

    def predict_proba(self, X, X_gen=None):
        if self.task != "classification":
            raise AttributeError("predict_proba is only available for classification")
        return torch.softmax(torch.from_numpy(self._raw_predict(X, X_gen)), dim=-1).numpy()

    def score_metrics(self, X, y, X_gen=None):
        """Task metrics: {rmse, r2} or macro {accuracy, precision, recall, f1}."""
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        raw = self._raw_predict(X, X_gen)
        if self.task == "regression":
            return score_predictions(self._decode(raw), y, "regression")
        return score_predictions(raw, y, "classification", self.n_classes_)

    def score(self, X, y, X_gen=None):
        m = self.score_metrics(X, y, X_gen)
        return m["r2"] if self.task == "regression" else m["accuracy"]

    # -- persistence ---------------------------------------------------
    def _modules(self) -> "OrderedDict[str, torch.nn.Module]":
        raise NotImplementedError

    def save(self, path) -> None:
        check_is_fitted(self, "mri_scaler_")
        tensors = OrderedDict()
        tensors["prep.mri_mean"], tensors["prep.mri_scale"] = _scaler_state(self.mri_scaler_)
        if self.gen_scaler_ is not None:
            tensors["prep.gen_mean"], tensors["prep.gen_scale"] = _scaler_state(self.gen_scaler_)
        for prefix, module in self._modules().items():
            for name, t in module.state_dict().items():
                tensors[f"{prefix}.{name}"] = t.detach().numpy()
        header = {
            "kind": self.kind, "task": self.task, "estimator": type(self).__name__,
            "params": self.get_params(),
            "dims": {"m1": int(self.mri_scaler_.n_features_in_),
                     "m2": None if self.gen_scaler_ is None else int(self.gen_scaler_.n_features_in_),
                     "n_classes": int(self.n_classes_)},
            "target": {"mean": self.y_mean_, "scale": self.y_scale_},
        }
        save_checkpoint(path, header, tensors)

    def _restore(self, header, tensors):
        self.n_classes_ = header["dims"]["n_classes"]
        self.mri_scaler_ = _scaler_from(tensors["prep.mri_mean"], tensors["prep.mri_scale"])
        self.gen_scaler_ = (_scaler_from(tensors["prep.gen_mean"], tensors["prep.gen_scale"])
                            if "prep.gen_mean" in tensors else None)
        self.y_mean_ = header["target"]["mean"]
        self.y_scale_ = header["target"]["scale"]
        self._build(header["dims"])
        for prefix, module in self._modules().items():
            state = OrderedDict((k[len(prefix) + 1:], torch.from_numpy(v.copy()))
                                for k, v in tensors.items() if k.startswith(prefix + "."))
            module.load_state_dict(state)
            module.eval()
        return self

    def _build(self, dims):
        raise NotImplementedError


class MultimodalTeacher(_TabularEstimator):
    """Two-backbone model trained on MRI and genetic features together."""

    kind = "m"

    def fit(self, X, y, X_gen=None):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        X_gen = self._validate_gen(X, X_gen)
        y, self.n_classes_ = self._check_target(y)
        self._fit_scalers(X, X_gen, y)
        self.model_, self.report_ = pretrain_m(self._dataset(X, X_gen, y),
                                               self._config(self.n_classes_))
        return self

    def _raw_predict(self, X, X_gen=None):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        X_gen = self._validate_gen(X, X_gen)
        with torch.no_grad():
            self.model_.eval()
            out = self.model_(torch.from_numpy(self.mri_scaler_.transform(X)),
                              torch.from_numpy(self.gen_scaler_.transform(X_gen)))
        return out.numpy()

    def _modules(self):
        return OrderedDict(teacher=self.model_)

    def _build(self, dims):
        self.model_ = MModel(self._config(self.n_classes_), dims["m1"], dims["m2"])


class IncompleteMultimodalModel(_TabularEstimator):
    """MRI-only student guided by a multimodal teacher.

    ``fit`` needs ``X_gen`` for the training rows. If ``teacher`` is omitted a
    :class:`MultimodalTeacher` with the same hyperparameters is trained first;
    a supplied teacher is copied, never modified. ``predict`` uses MRI alone.
    """

    kind = "u"

    def fit(self, X, y, X_gen=None, teacher=None):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        X_gen = self._validate_gen(X, X_gen)
        y, self.n_classes_ = self._check_target(y)
        if teacher is None:
            teacher = MultimodalTeacher(**{k: v for k, v in self.get_params().items()})
            teacher.fit(X, y, X_gen=X_gen)
        else:
            check_is_fitted(teacher, "model_")
            if teacher.task != self.task:
                raise ValueError("teacher and student tasks differ")
            self.n_classes_ = max(self.n_classes_, teacher.n_classes_)
        self.teacher_ = copy.deepcopy(teacher)
        self.mri_scaler_, self.gen_scaler_ = teacher.mri_scaler_, teacher.gen_scaler_
        self.y_mean_, self.y_scale_ = teacher.y_mean_, teacher.y_scale_
        ds = self._dataset(X, X_gen, y)
        self.model_, self.report_ = train_u(ds, self.teacher_.model_, self._config(self.n_classes_))
        return self

    def _raw_predict(self, X, X_gen=None):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.mri_scaler_.n_features_in_:
            raise ValueError(f"expected {self.mri_scaler_.n_features_in_} MRI features, got {X.shape[1]}")
        with torch.no_grad():
            self.model_.eval()
            out = self.model_(torch.from_numpy(self.mri_scaler_.transform(X)))
        return out.numpy()

    def _modules(self):
        return OrderedDict(student=self.model_)

    def _build(self, dims):
        self.model_ = UModel(self._config(self.n_classes_), dims["m1"])


class UnimodalTransformer(_TabularEstimator):
    """MRI-only backbone trained from scratch on the supervised loss."""

    kind = "vanilla-transformer"

    def fit(self, X, y, X_gen=None):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        y, self.n_classes_ = self._check_target(y)
        self._fit_scalers(X, None, y)
        self.model_, self.report_ = train_unimodal(self._dataset(X, None, y),
                                                   self._config(self.n_classes_))
        return self

    _raw_predict = IncompleteMultimodalModel._raw_predict

    def _modules(self):
        return OrderedDict(unimodal=self.model_)

    def _build(self, dims):
        self.model_ = UnimodalModel(self._config(self.n_classes_), dims["m1"])


ESTIMATORS = {cls.__name__: cls for cls in
              (MultimodalTeacher, IncompleteMultimodalModel, UnimodalTransformer)}


def load_estimator(path):
    """Rebuild a fitted estimator from a checkpoint written by ``save``."""
    header, tensors = load_checkpoint(path)
    try:
        cls = ESTIMATORS[header["estimator"]]
    except KeyError:
        raise CheckpointError(f"{path}: unknown estimator {header.get('estimator')!r}") from None
    est = cls(**header["params"])
    return est._restore(header, tensors)
