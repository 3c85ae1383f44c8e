"""scikit-learn wrappers: a federated SSL feature extractor and a linear probe."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, partition_dirichlet, partition_uniform, sample_auxiliary
from .evaluation import ProbeConfig, extract_features, train_linear_head
from .fed import FedConfig, OptimConfig, run_federation
from .model import DTYPES, ModelSpec
from .resource import ResourceLedger
from .ssl import AugmentPolicy, SslConfig


class FederatedSSLEncoder(TransformerMixin, BaseEstimator):
    """Train an encoder by simulated federated SSL, then map rows to features.

    ``fit`` splits ``X`` over ``n_clients`` simulated clients and runs the
    chosen strategy. Labels are only used for a Dirichlet split. When the
    strategy calibrates on the server and no ``X_aux`` is given, a
    class-stratified ``aux_ratio`` sample of ``X`` stands in for it.
    """

    def __init__(
        self,
        strategy="lw_fedssl",
        n_clients=4,
        rounds=15,
        num_layers=3,
        block_hidden_dim=64,
        block_out_dim=32,
        proj_hidden=128,
        proj_out=32,
        pred_hidden=128,
        allocation="uniform",
        weight_transfer=True,
        calibration_epochs=3,
        temperature=0.2,
        momentum=0.99,
        align_weight=0.01,
        local_epochs=3,
        batch_size=32,
        base_lr=3e-2,
        weight_decay=1e-5,
        lr_schedule="cosine",
        jitter_sigma=1.0,
        partition="uniform",
        beta=0.5,
        aux_ratio=0.1,
        precision="f32",
        n_jobs=1,
        random_state=0,
    ):
        self.strategy = strategy
        self.n_clients = n_clients
        self.rounds = rounds
        self.num_layers = num_layers
        self.block_hidden_dim = block_hidden_dim
        self.block_out_dim = block_out_dim
        self.proj_hidden = proj_hidden
        self.proj_out = proj_out
        self.pred_hidden = pred_hidden
        self.allocation = allocation
        self.weight_transfer = weight_transfer
        self.calibration_epochs = calibration_epochs
        self.temperature = temperature
        self.momentum = momentum
        self.align_weight = align_weight
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.lr_schedule = lr_schedule
        self.jitter_sigma = jitter_sigma
        self.partition = partition
        self.beta = beta
        self.aux_ratio = aux_ratio
        self.precision = precision
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _spec(self, dim: int) -> ModelSpec:
        return ModelSpec(
            input_dim=dim,
            num_layers=self.num_layers,
            block_hidden_dim=self.block_hidden_dim,
            block_out_dim=self.block_out_dim,
            proj_hidden=self.proj_hidden,
            proj_out=self.proj_out,
            pred_hidden=self.pred_hidden,
        )

    def fit(self, X, y=None, X_aux=None):
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")
        dtype = DTYPES[self.precision]
        X = check_array(X, dtype=[np.float64, np.float32])
        seed = int(self.random_state)
        # partitioning only needs class ids, whatever the label type
        labels = None if y is None else np.unique(np.asarray(y), return_inverse=True)[1].ravel()
        ds = Dataset(X, labels)
        if self.partition == "dirichlet":
            if y is None:
                raise ValueError("a Dirichlet partition needs y")
            part = partition_dirichlet(ds, self.n_clients, self.beta, seed)
        elif self.partition == "uniform":
            part = partition_uniform(ds, self.n_clients, seed)
        else:
            raise ValueError(f"partition must be 'uniform' or 'dirichlet', got {self.partition!r}")

        fed = FedConfig(
            strategy=self.strategy,
            clients=self.n_clients,
            rounds=self.rounds,
            allocation=self.allocation,
            weight_transfer=self.weight_transfer,
            calibration_epochs=self.calibration_epochs,
        )
        aux = None
        if self.strategy == "lw_fedssl" and self.calibration_epochs > 0:
            aux = check_array(X_aux, dtype=[np.float64, np.float32]) if X_aux is not None else (
                sample_auxiliary(ds, self.aux_ratio, seed).features
            )
        ssl = SslConfig(
            temperature=self.temperature,
            momentum=self.momentum,
            align_weight=self.align_weight,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
        )
        optim = OptimConfig(base_lr=self.base_lr, weight_decay=self.weight_decay, schedule=self.lr_schedule)
        policy = AugmentPolicy(crop_pad=0, flip_prob=0.0, jitter_sigma=self.jitter_sigma)
        self.model_, self.records_ = run_federation(
            self._spec(X.shape[1]),
            fed,
            ssl,
            optim,
            policy,
            [X[idx] for idx in part.clients],
            aux,
            seed,
            dtype,
            self.n_jobs,
        )
        self.partition_ = part
        self.ledger_ = ResourceLedger(e for r in self.records_ for e in r.resources)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=[np.float64, np.float32])
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return extract_features(self.model_, X)


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Softmax regression trained with AdamW and cosine decay (the probe protocol)."""

    def __init__(self, epochs=20, batch_size=256, base_lr=3e-2, weight_decay=1e-5, random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=[np.float64, np.float32])
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        cfg = ProbeConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            weight_decay=self.weight_decay,
            seed=int(self.random_state),
        )
        self.head_ = train_linear_head(X, encoded, len(self.classes_), cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "head_")
        X = check_array(X, dtype=[np.float64, np.float32])
        return X @ self.head_.weight + self.head_.bias

    def predict(self, X):
        # argmax keeps the lowest index on ties
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
