"""Estimator-style wrappers so the pipeline composes with the ML ecosystem.

``ManifoldEmbedding`` is a transformer (fit on attributes, transform to
posterior means); ``MisalignmentDetector`` runs both training phases against
an adjacency matrix and exposes node distortion scores as anomaly scores.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import alignment, graphs, scoring, vae

__all__ = ["ManifoldEmbedding", "MisalignmentDetector"]


def _anneal_from(kind, start, end, steps, epochs):
    return vae.AnnealSchedule(kind, start, end, epochs if steps is None else steps)


class ManifoldEmbedding(BaseEstimator, TransformerMixin):
    """Learn the attribute manifold; transform() yields posterior means.

    Parameters mirror the first training phase: a named architecture preset
    (or explicit hidden sizes), full-batch epochs, Adam learning rate, the
    two variance-penalty weights, and the KL annealing ramp.
    """

    def __init__(
        self,
        latent_dim=2,
        architecture="synthetic-table2",
        encoder_hidden=None,
        decoder_hidden=None,
        activation=None,
        epochs=1500,
        learning_rate=5e-3,
        lambda_var=1.0,
        lambda_resid=1.0,
        anneal_kind="sigmoid",
        anneal_start=0.0,
        anneal_end=2.0,
        anneal_steps=None,
        dropout=0.2,
        random_state=0,
    ):
        self.latent_dim = latent_dim
        self.architecture = architecture
        self.encoder_hidden = encoder_hidden
        self.decoder_hidden = decoder_hidden
        self.activation = activation
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.lambda_var = lambda_var
        self.lambda_resid = lambda_resid
        self.anneal_kind = anneal_kind
        self.anneal_start = anneal_start
        self.anneal_end = anneal_end
        self.anneal_steps = anneal_steps
        self.dropout = dropout
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        rng = np.random.default_rng(self.random_state)
        self.model_ = vae.build_model(
            X.shape[1],
            self.latent_dim,
            preset=self.architecture,
            encoder_hidden=self.encoder_hidden,
            decoder_hidden=self.decoder_hidden,
            activation=self.activation,
            rng=rng,
        )
        cfg = vae.Phase1Config(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            lambda_var=self.lambda_var,
            lambda_resid=self.lambda_resid,
            anneal=_anneal_from(
                self.anneal_kind, self.anneal_start, self.anneal_end,
                self.anneal_steps, self.epochs,
            ),
            dropout=self.dropout,
            seed=self.random_state,
        )
        _, self.latent_state_, self.loss_trace_ = vae.train_phase1(self.model_, X, cfg)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        mu, _ = vae.encode(self.model_, X)
        return mu

    def score_samples(self, X):
        """Negative reconstruction error (higher = better reconstructed)."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return -scoring.recon_error_scores(self.model_, X)


class MisalignmentDetector(BaseEstimator):
    """Score nodes by the metric distortion needed to align the attribute
    manifold with the graph's heat-kernel geometry.

    ``fit(X, adjacency)`` runs manifold learning, then the frozen-encoder
    alignment phase, and distills the pairwise distance shift into per-node
    anomaly scores (``node_scores_``, also ``score_samples()``).
    """

    def __init__(
        self,
        latent_dim=2,
        architecture="synthetic-table2",
        phase1_epochs=1500,
        learning_rate=5e-3,
        lambda_var=1.0,
        lambda_resid=1.0,
        anneal_kind="sigmoid",
        anneal_start=0.0,
        anneal_end=2.0,
        anneal_steps=None,
        dropout=0.2,
        estimator="grid",
        phase2_epochs=400,
        phase2_learning_rate=1e-3,
        pairs_per_step=256,
        grid_resolution=64,
        connectivity="axis+diagonal",
        linear_steps=32,
        heat_times_count=15,
        kernel_scale="learned",
        score_eps=1e-12,
        score_pair_set="all",
        random_state=0,
    ):
        self.latent_dim = latent_dim
        self.architecture = architecture
        self.phase1_epochs = phase1_epochs
        self.learning_rate = learning_rate
        self.lambda_var = lambda_var
        self.lambda_resid = lambda_resid
        self.anneal_kind = anneal_kind
        self.anneal_start = anneal_start
        self.anneal_end = anneal_end
        self.anneal_steps = anneal_steps
        self.dropout = dropout
        self.estimator = estimator
        self.phase2_epochs = phase2_epochs
        self.phase2_learning_rate = phase2_learning_rate
        self.pairs_per_step = pairs_per_step
        self.grid_resolution = grid_resolution
        self.connectivity = connectivity
        self.linear_steps = linear_steps
        self.heat_times_count = heat_times_count
        self.kernel_scale = kernel_scale
        self.score_eps = score_eps
        self.score_pair_set = score_pair_set
        self.random_state = random_state

    def fit(self, X, adjacency, labels=None):
        X = check_array(X, dtype=np.float64)
        graph = graphs.AttributedGraph(adjacency, X, labels=labels)
        self.n_features_in_ = X.shape[1]

        embedding = ManifoldEmbedding(
            latent_dim=self.latent_dim,
            architecture=self.architecture,
            epochs=self.phase1_epochs,
            learning_rate=self.learning_rate,
            lambda_var=self.lambda_var,
            lambda_resid=self.lambda_resid,
            anneal_kind=self.anneal_kind,
            anneal_start=self.anneal_start,
            anneal_end=self.anneal_end,
            anneal_steps=self.anneal_steps,
            dropout=self.dropout,
            random_state=self.random_state,
        ).fit(X)
        self.embedding_ = embedding
        self.model_ = embedding.model_
        self.latent_state_ = embedding.latent_state_

        lam2, lam_max = graphs.spectral_bounds(graphs.laplacian(graph))
        schedule = graphs.heat_times(lam2, lam_max, self.heat_times_count)
        cfg = alignment.AlignmentConfig(
            heat_schedule=schedule,
            estimator=self.estimator,
            pairs_per_step=self.pairs_per_step,
            epochs=self.phase2_epochs,
            learning_rate=self.phase2_learning_rate,
            kernel_scale_mode=self.kernel_scale,
            grid_resolution=self.grid_resolution,
            connectivity=self.connectivity,
            linear_steps=self.linear_steps,
            seed=self.random_state,
        )
        self.alignment_result_ = alignment.train_phase2(
            self.model_, self.latent_state_, graph, cfg
        )
        report = scoring.build_report(
            self.alignment_result_.distances_before,
            self.alignment_result_.distances_after,
            labels=graph.labels,
            eps=self.score_eps,
            pair_set=self.score_pair_set,
            adjacency=graph.adjacency,
        )
        self.report_ = report
        self.z_scores_ = report.z_scores
        self.node_scores_ = report.scores
        self.threshold_ = report.threshold
        self.metrics_ = report.metrics
        return self

    def score_samples(self, X=None):
        """Node distortion scores of the fitted graph (higher = anomalous)."""
        check_is_fitted(self, "node_scores_")
        return self.node_scores_

    def decision_function(self, X=None):
        return self.score_samples(X)

    def predict(self, X=None):
        check_is_fitted(self, "report_")
        return self.report_.predictions

    def fit_predict(self, X, adjacency, labels=None):
        return self.fit(X, adjacency, labels=labels).predict()
