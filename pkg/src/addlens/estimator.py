"""scikit-learn style wrapper around training and decoding."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import datagen as dg
from .model import ModelConfig, TransformerModel
from .training import TrainConfig, answer_slice, greedy_decode, train


def check_operands(X, n_digits: int) -> np.ndarray:
    """Validate an ``[n_samples, 2]`` array of non-negative operands below ``10**n_digits``."""
    X = check_array(X, dtype=np.int64)
    if X.shape[1] != 2:
        raise ValueError(f"expected 2 columns (the two operands), got {X.shape[1]}")
    if X.min() < 0 or X.max() >= 10 ** n_digits:
        raise ValueError(f"operands must lie in [0, {10 ** n_digits})")
    return X


def operands_to_arrays(X: np.ndarray, n_digits: int) -> tuple[np.ndarray, np.ndarray]:
    powers = 10 ** np.arange(n_digits, dtype=np.int64)
    return (X[:, :1] // powers) % 10, (X[:, 1:] // powers) % 10


class AdditionTransformer(BaseEstimator):
    """One-layer transformer trained on freshly sampled n-digit additions.

    ``fit`` ignores ``X``: every optimizer step draws a new batch. ``predict``
    takes an ``[n_samples, 2]`` operand array and greedily decodes the sums.

    >>> est = AdditionTransformer(n_digits=2, steps=0).fit()
    >>> est.predict([[12, 34]]).shape
    (1,)
    """

    def __init__(self, n_digits=5, n_heads=3, d_model=192, d_mlp=768, layer_norm=True,
                 plus_prefix=False, steps=5000, batch_size=64, lr=3e-4, weight_decay=0.1,
                 schedule="cosine", warmup_steps=100, enrichment_prob=dg.GeneratorConfig.enrichment_prob, log_every=10, random_state=0):
        self.n_digits = n_digits
        self.n_heads = n_heads
        self.d_model = d_model
        self.d_mlp = d_mlp
        self.layer_norm = layer_norm
        self.plus_prefix = plus_prefix
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.warmup_steps = warmup_steps
        self.enrichment_prob = enrichment_prob
        self.log_every = log_every
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        seed = 0 if self.random_state is None else int(self.random_state)
        return TrainConfig(
            model=ModelConfig(n_digits=self.n_digits, n_heads=self.n_heads, d_model=self.d_model,
                              d_mlp=self.d_mlp, plus_prefix=self.plus_prefix,
                              layer_norm=self.layer_norm, seed=seed),
            data=dg.GeneratorConfig(self.n_digits, seed, self.enrichment_prob, self.plus_prefix),
            steps=self.steps, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, schedule=self.schedule,
            warmup_steps=self.warmup_steps, log_every=self.log_every)

    def fit(self, X=None, y=None):
        if X is not None:
            check_operands(X, self.n_digits)
        self.model_, self.loss_history_ = train(self._train_config())
        return self

    @classmethod
    def from_model(cls, model: TransformerModel) -> "AdditionTransformer":
        c = model.cfg
        est = cls(n_digits=c.n_digits, n_heads=c.n_heads, d_model=c.d_model, d_mlp=c.d_mlp,
                  layer_norm=c.layer_norm, plus_prefix=c.plus_prefix, random_state=c.seed,
                  steps=model.step)
        est.model_ = model
        est.loss_history_ = []
        return est

    def _tokens(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_operands(X, self.n_digits)
        return dg.tokens_from_arrays(*operands_to_arrays(X, self.n_digits), self.plus_prefix)

    def predict_digits(self, X) -> np.ndarray:
        """Decoded answer digits ``A_n .. A_0`` per row (prefix token dropped)."""
        tokens = self._tokens(X)
        pred = greedy_decode(self.model_, tokens)
        return pred[:, 1:] if self.plus_prefix else pred

    def predict(self, X) -> np.ndarray:
        digits = self.predict_digits(X)
        # argmax can land on a non-digit token; count those as 0 so the sum stays an int
        digits = np.where(digits < 10, digits, 0)
        powers = 10 ** np.arange(digits.shape[1] - 1, -1, -1, dtype=np.int64)
        return (digits * powers).sum(axis=1)

    def predict_log_proba(self, X) -> np.ndarray:
        """Teacher-forced log-probabilities ``[n_samples, answer tokens, vocab]``."""
        from .numerics import log_softmax

        tokens = self._tokens(X)
        lo, hi = answer_slice(self.n_digits, self.plus_prefix)
        return log_softmax(self.model_.forward(tokens)[:, lo - 1:hi - 1])

    def score(self, X, y=None) -> float:
        """Exact-match accuracy against ``y`` (defaults to the true sums)."""
        X = check_operands(X, self.n_digits)
        target = X.sum(axis=1) if y is None else np.asarray(y, dtype=np.int64)
        return float((self.predict(X) == target).mean())
