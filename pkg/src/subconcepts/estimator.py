"""scikit-learn style wrapper around the training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ValidationError
from .fieldset import FieldSet
from .guidance import TAU_COSINE, Query, QuerySet
from .projector import project
from .prototypes import assign
from .trainer import RunConfig, run


class SubconceptSegmenter(ClusterMixin, TransformerMixin, BaseEstimator):
    """Prototype clustering of feature samples, optionally guided by queries.

    ``X`` holds segmentation features, one row per sample. Guidance needs
    query-space features passed to :meth:`fit` as ``query_features`` and a
    list of query embeddings in ``queries``; each query owns its own block of
    ``n_rel // len(queries)`` relevant prototypes unless ``query_blocks``
    says otherwise.

    Fitted attributes: ``params_``, ``bank_``, ``telemetry_``, ``labels_``,
    ``n_features_in_``.
    """

    def __init__(self, n_rel=10, n_irr=3, epochs=200, batch_size=4096, queries=None,
                 query_blocks=None, tau=TAU_COSINE, alpha=0.998, beta_start=0.5,
                 beta_end=0.1, w_proj=20.0, w_irr=1.0, w_proto=0.5, b=0.5,
                 lr_start=1e-2, lr_end=1e-4, dropout=0.2, init="kmeans++", proj_scope="relevant",
                 random_state=0):
        self.n_rel = n_rel
        self.n_irr = n_irr
        self.epochs = epochs
        self.batch_size = batch_size
        self.queries = queries
        self.query_blocks = query_blocks
        self.tau = tau
        self.alpha = alpha
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.w_proj = w_proj
        self.w_irr = w_irr
        self.w_proto = w_proto
        self.b = b
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.dropout = dropout
        self.init = init
        self.proj_scope = proj_scope
        self.random_state = random_state

    def _run_config(self) -> RunConfig:
        seed = self.random_state
        if seed is None or isinstance(seed, np.random.Generator):
            seed = int(np.random.default_rng(seed).integers(2**31))
        cfg = RunConfig(epochs=self.epochs, batch_size=self.batch_size, n_rel=self.n_rel,
                        n_irr=self.n_irr, alpha=self.alpha, beta_start=self.beta_start,
                        beta_end=self.beta_end, w_proj=self.w_proj, w_irr=self.w_irr,
                        w_proto=self.w_proto, b=self.b, lr_start=self.lr_start,
                        lr_end=self.lr_end, dropout=self.dropout, init=self.init,
                        proj_scope=self.proj_scope, seed=int(seed))
        cfg.validate()
        return cfg

    def _queryset(self, d_q) -> QuerySet:
        if not self.queries:
            return QuerySet()
        n_q = len(self.queries)
        blocks = self.query_blocks
        if blocks is None:
            size = self.n_rel // n_q
            if size < 1:
                raise ValidationError("n_rel is smaller than the number of queries")
            blocks = [range(i * size, (i + 1) * size) for i in range(n_q)]
        if len(blocks) != n_q:
            raise ValidationError("query_blocks needs one entry per query")
        out = []
        for i, (q, block) in enumerate(zip(self.queries, blocks)):
            if isinstance(q, Query):
                out.append(q)
                continue
            emb = check_array(np.atleast_2d(q), dtype=np.float64).ravel()
            if emb.size != d_q:
                raise ValidationError(f"query {i} has dim {emb.size}, expected {d_q}")
            out.append(Query(emb, list(block), self.tau, name=f"q{i}"))
        qs = QuerySet(out)
        qs.validate(self.n_rel, d_q)
        return qs

    def fit(self, X, y=None, query_features=None, sample_weight=None):
        """Train on features ``X``. ``y`` is ignored."""
        X = check_array(X, dtype=np.float64)
        if X.shape[0] < 2:
            raise ValidationError("need at least two samples")
        if query_features is None:
            if self.queries:
                raise ValidationError("queries need query_features")
            Q = np.zeros((X.shape[0], 1))
        else:
            Q = check_array(query_features, dtype=np.float64)
            if Q.shape[0] != X.shape[0]:
                raise ValidationError("query_features must have one row per sample")
        if sample_weight is not None:
            sample_weight = np.asarray(sample_weight, dtype=np.float64)
            if sample_weight.shape != (X.shape[0],):
                raise ValidationError("sample_weight must have one entry per sample")
            if np.any(sample_weight < 0) or np.any(sample_weight > 1):
                raise ValidationError("sample_weight must lie in [0, 1]")
        fs = FieldSet.from_arrays(X, Q, weights=sample_weight)
        result = run(fs, self._queryset(fs.d_q), self._run_config())
        self.params_ = result.params
        self.bank_ = result.bank
        self.telemetry_ = result.telemetry
        self.queryset_ = result.queryset
        self.n_features_in_ = X.shape[1]
        self.labels_ = self.predict(X)
        return self

    def _check(self, X):
        check_is_fitted(self, "bank_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def transform(self, X):
        """Projected features."""
        X = self._check(X)
        return project(self.params_, X)

    def predict_proba(self, X):
        """Soft prototype assignment ``D`` (rows sum to 1)."""
        f = self.transform(X)
        return assign(self.bank_, f).D

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def relevant(self, X):
        """True where the sample falls on a relevant prototype."""
        return self.predict(X) < self.bank_.n_rel
