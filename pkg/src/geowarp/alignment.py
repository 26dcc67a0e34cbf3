"""Heat-kernel evaluation on the learned manifold and the alignment phase.

The second training phase freezes the encoder, keeps the latent coordinates
fixed, and descends only the decoder so that a multiscale heat kernel over
latent geodesic distances matches the graph adjacency.  The kernel value for
a pair at distance r is  sum_t (4 pi t)^(-d/2) exp(-r^2 / (4 t))  over the
diffusion-time schedule, optionally scaled by a learnable positive alpha.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import nn, riemann
from .autodiff import Tensor
from .graphs import AttributedGraph, HeatTimeSchedule
from .vae import LatentState, TrainingDivergedError, VaeModel

__all__ = [
    "AlignmentConfig",
    "KernelEvaluation",
    "Phase2Result",
    "EncoderDriftError",
    "heat_kernel_value",
    "heat_kernel_tape",
    "evaluate_kernel",
    "phase2_loss",
    "sample_pairs",
    "train_phase2",
]


class EncoderDriftError(RuntimeError):
    """Raised when frozen encoder parameters change during alignment."""


@dataclass
class AlignmentConfig:
    heat_schedule: HeatTimeSchedule
    estimator: str = "grid"
    pairs_per_step: int = 256
    epochs: int = 400
    learning_rate: float = 1e-3
    kernel_scale_mode: str = "learned"
    grid_resolution: int = 64
    connectivity: str = "axis+diagonal"
    linear_steps: int = 32
    bounds_margin: float = 0.1
    calibrate_scale: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.estimator not in ("grid", "linear"):
            raise ValueError(f"estimator must be 'grid' or 'linear', got {self.estimator!r}")
        if self.kernel_scale_mode not in ("learned", "fixed"):
            raise ValueError(
                f"kernel_scale_mode must be 'learned' or 'fixed', got {self.kernel_scale_mode!r}"
            )
        if self.pairs_per_step < 1:
            raise ValueError("pairs_per_step must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


def _kernel_coefficients(latent_dim: int, schedule: HeatTimeSchedule):
    t = np.asarray(schedule.times, dtype=np.float64)
    return (4.0 * np.pi * t) ** (-latent_dim / 2.0), -1.0 / (4.0 * t)


def heat_kernel_value(dist, latent_dim: int, schedule: HeatTimeSchedule):
    """Multiscale heat-kernel value(s) at geodesic distance(s) >= 0."""
    dist = np.asarray(dist, dtype=np.float64)
    if np.any(dist < 0):
        raise ValueError("distances must be nonnegative")
    coef, rate = _kernel_coefficients(latent_dim, schedule)
    vals = np.exp(dist[..., None] ** 2 * rate) @ coef
    return float(vals) if vals.ndim == 0 else vals


def heat_kernel_tape(dist: Tensor, latent_dim: int, schedule: HeatTimeSchedule) -> Tensor:
    """Taped kernel over a 1-d distance tensor."""
    coef, rate = _kernel_coefficients(latent_dim, schedule)
    d2 = ad.reshape(dist * dist, (dist.shape[0], 1))
    terms = ad.exp(d2 * ad.constant(rate[None, :]))
    return ad.tsum(terms * ad.constant(coef[None, :]), axis=1)


@dataclass
class KernelEvaluation:
    """Kernel values for a sampled pair set (taped when produced in training)."""

    pairs: np.ndarray  # (n, 2) node indices
    distances: np.ndarray
    kernel: np.ndarray  # unscaled values
    alpha: float
    distances_node: Tensor | None = None
    kernel_node: Tensor | None = None
    alpha_node: Tensor | None = None

    def scaled_kernel(self) -> np.ndarray:
        return self.alpha * self.kernel


def evaluate_kernel(
    decoder_mu,
    decoder_sigma,
    z_fixed: np.ndarray,
    pairs: np.ndarray,
    latent_dim: int,
    schedule: HeatTimeSchedule,
    estimator: str = "linear",
    field: riemann.MetricField | None = None,
    node_ids: np.ndarray | None = None,
    steps: int = 32,
    alpha=1.0,
    taped: bool = False,
) -> KernelEvaluation:
    """Distances and kernel values for the given node pairs."""
    pairs = np.asarray(pairs, dtype=np.int64)
    if taped:
        if estimator == "grid":
            if field is None or not field.differentiable:
                raise ValueError("taped grid evaluation needs a field built with gradients")
            ids = node_ids if node_ids is not None else field.snap_many(z_fixed)
            d_node, _ = riemann.grid_pair_distances_tape(
                field, ids[pairs[:, 0]], ids[pairs[:, 1]]
            )
        else:
            d_node = riemann.linear_distances_tape(
                decoder_mu, decoder_sigma, z_fixed[pairs[:, 0]], z_fixed[pairs[:, 1]], steps
            )
        k_node = heat_kernel_tape(d_node, latent_dim, schedule)
        alpha_node = alpha if isinstance(alpha, Tensor) else ad.constant(np.asarray(float(alpha)))
        return KernelEvaluation(
            pairs=pairs,
            distances=d_node.data.copy(),
            kernel=k_node.data.copy(),
            alpha=float(alpha_node.data),
            distances_node=d_node,
            kernel_node=k_node,
            alpha_node=alpha_node,
        )
    if estimator == "grid":
        if field is None:
            raise ValueError("grid evaluation needs a metric field")
        ids = node_ids if node_ids is not None else field.snap_many(z_fixed)
        dists = riemann.grid_pair_distances(field, ids[pairs[:, 0]], ids[pairs[:, 1]])
    else:
        dists = riemann.linear_distances(
            decoder_mu, decoder_sigma, z_fixed[pairs[:, 0]], z_fixed[pairs[:, 1]], steps
        )
    kern = heat_kernel_value(dists, latent_dim, schedule)
    return KernelEvaluation(
        pairs=pairs, distances=dists, kernel=kern, alpha=float(alpha)
    )


def phase2_loss(
    graph: AttributedGraph,
    kernel_eval: KernelEvaluation,
    params: dict[str, Tensor] | None = None,
) -> tuple[float, dict[str, np.ndarray] | None]:
    """Sum of squared residuals (A_ij - alpha H_ij)^2 over the sampled pairs.

    With ``params`` given (a taped evaluation), also returns their gradients;
    anything not on the kernel's tape (the encoder) receives exact zeros.
    """
    pairs = kernel_eval.pairs
    a_vals = np.asarray(graph.adjacency[pairs[:, 0], pairs[:, 1]]).ravel()
    if kernel_eval.kernel_node is None:
        resid = a_vals - kernel_eval.alpha * kernel_eval.kernel
        return float(resid @ resid), None
    loss = _phase2_graph(a_vals, kernel_eval)
    if params is None:
        return float(loss.data), None
    ad.zero_grad(params.values())
    ad.backward(loss)
    grads = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in params.items()
    }
    ad.zero_grad(params.values())
    return float(loss.data), grads


def _phase2_graph(a_vals: np.ndarray, kernel_eval: KernelEvaluation) -> Tensor:
    scaled = kernel_eval.alpha_node * kernel_eval.kernel_node
    resid = ad.constant(a_vals) - scaled
    return ad.tsum(resid * resid)


def _calibrate_conformal_scale(
    a_vals: np.ndarray,
    distances: np.ndarray,
    latent_dim: int,
    schedule: HeatTimeSchedule,
) -> tuple[float, float]:
    """Joint least-squares scan of a global distance scale and kernel amplitude.

    The diffusion times come from the graph spectrum while the latent
    geodesics carry the attribute scale; when the two are mismatched the
    kernel saturates (flat ~0 over most pairs) and alignment gradients starve.
    A single conformal factor applied to the decoder outputs (which scales
    every distance by exactly that factor) puts the observed distances inside
    the kernel's sensitive range before training starts.
    """
    candidates = np.concatenate([np.exp(np.linspace(np.log(1e-3), np.log(10.0), 120)), [1.0]])
    best = (np.inf, 1.0, 1.0)
    for c in candidates:
        kern = heat_kernel_value(c * distances, latent_dim, schedule)
        denom = kern @ kern
        if denom <= 0.0:
            continue
        alpha = a_vals @ kern / denom
        if alpha <= 0.0:
            continue
        resid = a_vals - alpha * kern
        loss = resid @ resid
        if loss < best[0]:
            best = (loss, float(c), float(alpha))
    return best[1], best[2]


def sample_pairs(
    rng: np.random.Generator, graph: AttributedGraph, count: int
) -> np.ndarray:
    """Off-diagonal pair sample: half uniformly from edges, half from
    non-edges, so a sparse adjacency stays informative in every batch."""
    n = graph.n
    ei, ej, _ = graph.edge_list()
    n_edges = len(ei)
    total_pairs = n * (n - 1) // 2
    want_edge = min(count // 2, n_edges) if n_edges else 0
    want_non = count - want_edge
    if n_edges >= total_pairs:  # complete graph: no non-edges to sample
        want_edge, want_non = count, 0
    out = np.empty((count, 2), dtype=np.int64)
    if want_edge:
        pick = rng.integers(0, n_edges, size=want_edge)
        out[:want_edge, 0] = ei[pick]
        out[:want_edge, 1] = ej[pick]
    k = want_edge
    adj = graph.adjacency
    while k < want_edge + want_non:
        i = int(rng.integers(0, n))
        j = int(rng.integers(0, n))
        if i == j or adj[i, j] != 0:
            continue
        out[k] = (i, j)
        k += 1
    return out


@dataclass
class Phase2Result:
    loss_trace: np.ndarray
    alpha_trace: np.ndarray
    distances_before: np.ndarray
    distances_after: np.ndarray
    encoder_digest_before: str
    encoder_digest_after: str
    encoder_grads_zero: bool
    config: AlignmentConfig
    bounds: np.ndarray
    conformal_scale: float = 1.0


def _snapshot(model: VaeModel, Z: np.ndarray, config: AlignmentConfig, bounds) -> np.ndarray:
    if config.estimator == "grid":
        field = riemann.build_metric_field(
            model.decoder_mu,
            model.decoder_sigma,
            bounds,
            config.grid_resolution,
            config.connectivity,
        )
        return riemann.pairwise_distances(Z, "grid", field=field)
    return riemann.pairwise_distances(
        Z,
        "linear",
        decoder_mu=model.decoder_mu,
        decoder_sigma=model.decoder_sigma,
        steps=config.linear_steps,
    )


def train_phase2(
    model: VaeModel,
    latent: LatentState,
    graph: AttributedGraph,
    config: AlignmentConfig,
) -> Phase2Result:
    """Warp the decoder metric to align the latent heat kernel with the graph.

    Every step rebuilds the metric field from the current decoder (grid mode),
    samples pairs, and applies one Adam update to the decoder parameters only.
    Emits full pairwise-distance snapshots before and after, computed with the
    same estimator so downstream shift statistics are estimator-consistent.
    """
    if latent.z_fixed is None or latent.z_fixed.shape[0] != graph.n:
        raise ValueError("latent state does not match the graph")
    Z = latent.z_fixed
    rng = np.random.default_rng(config.seed)
    digest_before = model.encoder_digest()
    enc_params = model.encoder_parameters()
    dec_params = model.decoder_parameters()

    bounds = riemann.bounds_from_points(Z, config.bounds_margin)
    node_ids = None
    plain_field = None
    if config.estimator == "grid":
        plain_field = riemann.build_metric_field(
            model.decoder_mu, model.decoder_sigma, bounds,
            config.grid_resolution, config.connectivity,
        )
        node_ids = plain_field.snap_many(Z)

    # alpha reconciles the adjacency scale with the kernel magnitude
    init_pairs = sample_pairs(rng, graph, min(2048, config.pairs_per_step * 8))
    init_eval = evaluate_kernel(
        model.decoder_mu, model.decoder_sigma, Z, init_pairs,
        model.latent_dim, config.heat_schedule,
        estimator=config.estimator, field=plain_field, node_ids=node_ids,
        steps=config.linear_steps,
    )
    a_init = np.asarray(graph.adjacency[init_pairs[:, 0], init_pairs[:, 1]]).ravel()
    conformal_scale = 1.0
    if config.calibrate_scale:
        conformal_scale, alpha0 = _calibrate_conformal_scale(
            a_init, init_eval.distances, model.latent_dim, config.heat_schedule
        )
        if conformal_scale != 1.0:
            # output scaling multiplies every pullback distance by the factor
            for net in (model.decoder_mu, model.decoder_sigma):
                net.layers[-1].weight.data *= conformal_scale
                net.layers[-1].bias.data *= conformal_scale
    else:
        h_norm = np.linalg.norm(init_eval.kernel)
        alpha0 = float(np.linalg.norm(a_init) / h_norm) if h_norm > 0 else 1.0
    log_alpha = ad.parameter(np.asarray(np.log(max(alpha0, 1e-300))), name="log_alpha")

    opt_params = dict(dec_params)
    if config.kernel_scale_mode == "learned":
        opt_params["log_alpha"] = log_alpha
    state = nn.AdamState.init(opt_params, learning_rate=config.learning_rate)

    distances_before = _snapshot(model, Z, config, bounds)

    loss_trace = np.zeros(config.epochs)
    alpha_trace = np.zeros(config.epochs)
    grads_zero = True
    for step in range(config.epochs):
        pairs = sample_pairs(rng, graph, config.pairs_per_step)
        field = None
        if config.estimator == "grid":
            field = riemann.build_metric_field(
                model.decoder_mu, model.decoder_sigma, bounds,
                config.grid_resolution, config.connectivity, with_gradients=True,
            )
        kernel_eval = evaluate_kernel(
            model.decoder_mu, model.decoder_sigma, Z, pairs,
            model.latent_dim, config.heat_schedule,
            estimator=config.estimator, field=field, node_ids=node_ids,
            steps=config.linear_steps, alpha=ad.exp(log_alpha), taped=True,
        )
        a_vals = np.asarray(graph.adjacency[pairs[:, 0], pairs[:, 1]]).ravel()
        loss = _phase2_graph(a_vals, kernel_eval)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDivergedError(step, value)
        ad.zero_grad(opt_params.values())
        ad.zero_grad(enc_params.values())
        ad.zero_grad([log_alpha])
        ad.backward(loss)
        if any(t.grad is not None and t.grad.any() for t in enc_params.values()):
            grads_zero = False
            raise EncoderDriftError(f"encoder received gradient at step {step}")
        grads = {
            name: (np.zeros_like(t.data) if t.grad is None else t.grad)
            for name, t in opt_params.items()
        }
        nn.adam_step(opt_params, grads, state)
        loss_trace[step] = value
        alpha_trace[step] = float(np.exp(log_alpha.data))
        ad.zero_grad(opt_params.values())

    digest_after = model.encoder_digest()
    if digest_after != digest_before:
        raise EncoderDriftError("encoder parameters changed during alignment")
    distances_after = _snapshot(model, Z, config, bounds)

    return Phase2Result(
        loss_trace=loss_trace,
        alpha_trace=alpha_trace,
        distances_before=distances_before,
        distances_after=distances_after,
        encoder_digest_before=digest_before,
        encoder_digest_after=digest_after,
        encoder_grads_zero=grads_zero,
        config=config,
        bounds=bounds,
        conformal_scale=conformal_scale,
    )
