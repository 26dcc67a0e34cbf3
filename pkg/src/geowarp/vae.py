"""Gaussian-posterior VAE with a two-headed Gaussian decoder.

Implements manifold learning (the first training phase): a reconstruction
likelihood plus two variance-matching penalties, with an annealed KL weight.
The posterior means produced at the end become the fixed latent coordinates
used by the geometric-alignment phase.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

__all__ = [
    "ArchitectureSpec",
    "ARCH_PRESETS",
    "VaeModel",
    "LatentState",
    "AnnealSchedule",
    "Phase1Config",
    "TrainingDivergedError",
    "build_model",
    "encode",
    "reparameterize",
    "gaussian_nll",
    "kl_divergence",
    "anneal_weight",
    "phase1_loss",
    "train_phase1",
]


@dataclass(frozen=True)
class ArchitectureSpec:
    encoder_hidden: tuple[int, ...]
    decoder_hidden: tuple[int, ...]
    activation: str


ARCH_PRESETS: dict[str, ArchitectureSpec] = {
    # small ELU nets for the 500-node synthetic benchmark
    "synthetic-table2": ArchitectureSpec((16, 16), (16,), "ELU"),
    # wider ReLU nets for the ~1300-node empirical preset
    "empirical-table3": ArchitectureSpec((96, 64), (128,), "ReLU"),
}

INITIAL_POSTERIOR_LOGVAR = -4.0


@dataclass
class VaeModel:
    """Encoder trunk with two linear heads, and two decoder networks.

    The sigma decoder emits per-dimension log-variance; it is exponentiated
    wherever a variance is needed, so sigma^2 > 0 by construction.
    """

    encoder_trunk: nn.MlpNetwork
    encoder_mu: nn.MlpNetwork
    encoder_logvar: nn.MlpNetwork
    decoder_mu: nn.MlpNetwork
    decoder_sigma: nn.MlpNetwork
    latent_dim: int
    data_dim: int

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.encoder_trunk.parameters("encoder_trunk."))
        out.update(self.encoder_mu.parameters("encoder_mu."))
        out.update(self.encoder_logvar.parameters("encoder_logvar."))
        out.update(self.decoder_mu.parameters("decoder_mu."))
        out.update(self.decoder_sigma.parameters("decoder_sigma."))
        return out

    def encoder_parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.encoder_trunk.parameters("encoder_trunk."))
        out.update(self.encoder_mu.parameters("encoder_mu."))
        out.update(self.encoder_logvar.parameters("encoder_logvar."))
        return out

    def decoder_parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.decoder_mu.parameters("decoder_mu."))
        out.update(self.decoder_sigma.parameters("decoder_sigma."))
        return out

    def networks(self) -> dict[str, nn.MlpNetwork]:
        return {
            "encoder_trunk": self.encoder_trunk,
            "encoder_mu": self.encoder_mu,
            "encoder_logvar": self.encoder_logvar,
            "decoder_mu": self.decoder_mu,
            "decoder_sigma": self.decoder_sigma,
        }

    def encoder_digest(self) -> str:
        return nn.parameter_digest(self.encoder_parameters())


def build_model(
    data_dim: int,
    latent_dim: int = 2,
    preset: str | None = "synthetic-table2",
    encoder_hidden=None,
    decoder_hidden=None,
    activation: str | None = None,
    rng: np.random.Generator | None = None,
) -> VaeModel:
    """Construct a VaeModel from a named preset or an explicit layer list."""
    if rng is None:
        rng = np.random.default_rng(0)
    if preset is not None:
        if preset not in ARCH_PRESETS:
            raise ValueError(
                f"unknown architecture preset {preset!r}; "
                f"choose from {sorted(ARCH_PRESETS)} or give explicit layers"
            )
        spec = ARCH_PRESETS[preset]
        encoder_hidden = spec.encoder_hidden if encoder_hidden is None else tuple(encoder_hidden)
        decoder_hidden = spec.decoder_hidden if decoder_hidden is None else tuple(decoder_hidden)
        activation = spec.activation if activation is None else activation
    if not encoder_hidden or not decoder_hidden or activation is None:
        raise ValueError("explicit architectures need encoder_hidden, decoder_hidden and activation")
    encoder_hidden = tuple(int(h) for h in encoder_hidden)
    decoder_hidden = tuple(int(h) for h in decoder_hidden)

    trunk_sizes = (data_dim,) + encoder_hidden
    trunk = nn.MlpNetwork.from_sizes(trunk_sizes, [activation] * len(encoder_hidden), rng)
    head_mu = nn.MlpNetwork.from_sizes((encoder_hidden[-1], latent_dim), ["Identity"], rng)
    head_lv = nn.MlpNetwork.from_sizes((encoder_hidden[-1], latent_dim), ["Identity"], rng)
    # start with a tight posterior so early reconstruction gradients are not
    # swamped by sampling noise; the annealed KL pulls the variance back up
    head_lv.layers[-1].bias.data[:] = INITIAL_POSTERIOR_LOGVAR
    dec_sizes = (latent_dim,) + decoder_hidden + (data_dim,)
    dec_acts = [activation] * len(decoder_hidden) + ["Identity"]
    dec_mu = nn.MlpNetwork.from_sizes(dec_sizes, dec_acts, rng)
    dec_sigma = nn.MlpNetwork.from_sizes(dec_sizes, dec_acts, rng)
    return VaeModel(trunk, head_mu, head_lv, dec_mu, dec_sigma, latent_dim, data_dim)


@dataclass
class LatentState:
    """Per-node posterior parameters and the frozen latent coordinates."""

    mu: np.ndarray
    logvar: np.ndarray
    z_fixed: np.ndarray

    @classmethod
    def freeze(cls, mu: np.ndarray, logvar: np.ndarray) -> "LatentState":
        return cls(mu=mu.copy(), logvar=logvar.copy(), z_fixed=mu.copy())


# Operations -----------------------------------------------------------------

def encode(model: VaeModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic posterior parameters (dropout off)."""
    h = model.encoder_trunk.value(x)
    return model.encoder_mu.value(h), model.encoder_logvar.value(h)


def reparameterize(mu, logvar, noise):
    """z = mu + exp(logvar/2) * noise, with caller-supplied standard normals."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    return mu + np.exp(0.5 * logvar) * noise


def gaussian_nll(x, mean, variance) -> float:
    """Negative log-likelihood of x under N(mean, diag(variance))."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    if np.any(variance <= 0):
        raise ValueError("variance must be positive elementwise")
    return float(
        np.sum(0.5 * np.log(2.0 * np.pi * variance) + (x - mean) ** 2 / (2.0 * variance))
    )


def kl_divergence(mu, logvar) -> float:
    """KL(N(mu, diag(exp(logvar))) || N(0, I))."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return float(0.5 * np.sum(np.exp(logvar) + mu**2 - 1.0 - logvar))


@dataclass(frozen=True)
class AnnealSchedule:
    """Monotone ramp for the KL weight; clamped past total_steps."""

    kind: str  # "linear" | "sigmoid"
    start_weight: float
    end_weight: float
    total_steps: int
    steepness: float = 12.0

    def __post_init__(self):
        if self.kind not in ("linear", "sigmoid"):
            raise ValueError(f"unknown anneal kind {self.kind!r}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    def weight(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be nonnegative")
        s = min(step / self.total_steps, 1.0)
        if self.kind == "linear":
            frac = s
        else:
            # logistic ramp, affinely normalized so the endpoints are exact
            def logistic(t):
                return 1.0 / (1.0 + np.exp(-self.steepness * (t - 0.5)))

            lo, hi = logistic(0.0), logistic(1.0)
            frac = (logistic(s) - lo) / (hi - lo)
        return self.start_weight + (self.end_weight - self.start_weight) * frac


def anneal_weight(schedule: AnnealSchedule, step: int) -> float:
    return schedule.weight(step)


SYNTHETIC_ANNEAL = AnnealSchedule("sigmoid", 0.0, 2.0, 1500)
EMPIRICAL_ANNEAL = AnnealSchedule("linear", 0.0, 1.0, 1200)


def _phase1_graph(
    model: VaeModel,
    x: np.ndarray,
    kl_weight: float,
    lambda_var: float,
    lambda_resid: float,
    noise: np.ndarray,
    dropout_rate: float = 0.0,
    dropout_rng=None,
) -> tuple[Tensor, dict[str, float]]:
    """Taped batch loss: NLL + variance penalties + weighted KL (summed)."""
    xt = ad.constant(x)
    h = model.encoder_trunk.apply(xt, dropout_rate=dropout_rate, dropout_rng=dropout_rng)
    mu = model.encoder_mu.apply(h)
    logvar = model.encoder_logvar.apply(h)
    z = mu + ad.exp(logvar * 0.5) * ad.constant(noise)

    dec_mean = model.decoder_mu.apply(z)
    dec_logvar = model.decoder_sigma.apply(z)

    # reconstruction likelihood
    sq = (xt - dec_mean) ** 2
    nll = ad.tsum(0.5 * (np.log(2.0 * np.pi) + dec_logvar) + sq * 0.5 * ad.exp(-dec_logvar))

    # per-sample variance across the attribute dimensions
    mu_centered = dec_mean - ad.tmean(dec_mean, axis=1, keepdims=True)
    var_mu = ad.tmean(mu_centered**2, axis=1)
    var_x = np.var(x, axis=1)
    var_term = ad.tsum((var_mu - ad.constant(var_x)) ** 2)

    # the sigma head must account for the variance the mean head leaves over
    mean_sig2 = ad.tmean(ad.exp(dec_logvar), axis=1)
    resid_target = ad.relu(ad.constant(var_x) - var_mu)
    resid_term = ad.tsum((mean_sig2 - resid_target) ** 2)

    kl = 0.5 * ad.tsum(ad.exp(logvar) + mu**2 - 1.0 - logvar)

    loss = nll + lambda_var * var_term + lambda_resid * resid_term + kl_weight * kl
    parts = {
        "nll": float(nll.data),
        "var_penalty": float(var_term.data),
        "resid_penalty": float(resid_term.data),
        "kl": float(kl.data),
    }
    return loss, parts


def phase1_loss(
    model: VaeModel,
    batch: np.ndarray,
    kl_weight: float,
    lambda_var: float,
    lambda_resid: float,
    noise: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Batch loss and gradients for every encoder and decoder parameter."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.size == 0:
        raise ValueError("batch must be nonempty")
    if lambda_var < 0 or lambda_resid < 0:
        raise ValueError("penalty weights must be nonnegative")
    params = model.parameters()
    ad.zero_grad(params.values())
    loss, _ = _phase1_graph(model, batch, kl_weight, lambda_var, lambda_resid, noise)
    ad.backward(loss)
    grads = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in params.items()
    }
    ad.zero_grad(params.values())
    return float(loss.data), grads


class TrainingDivergedError(ArithmeticError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss ({value}) at step {step}; training aborted")
        self.step = step


@dataclass
class Phase1Config:
    epochs: int = 1500
    learning_rate: float = 5e-3
    lambda_var: float = 1.0
    lambda_resid: float = 1.0
    anneal: AnnealSchedule = field(default_factory=lambda: SYNTHETIC_ANNEAL)
    dropout: float = 0.2
    seed: int = 0


def train_phase1(
    model: VaeModel, attributes: np.ndarray, config: Phase1Config
) -> tuple[VaeModel, LatentState, np.ndarray]:
    """Full-batch manifold learning; returns the model, the frozen latent
    state (z_fixed = posterior means) and the per-step loss trace."""
    X = np.asarray(attributes, dtype=np.float64)
    if X.ndim != 2 or not np.isfinite(X).all():
        raise ValueError("attributes must be a finite N x D matrix")
    if X.shape[1] != model.data_dim:
        raise ValueError(
            f"attribute dimension {X.shape[1]} does not match model data_dim {model.data_dim}"
        )
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = nn.AdamState.init(params, learning_rate=config.learning_rate)
    trace = np.zeros(config.epochs)
    for step in range(config.epochs):
        w = anneal_weight(config.anneal, step)
        noise = rng.standard_normal((X.shape[0], model.latent_dim))
        ad.zero_grad(params.values())
        loss, _ = _phase1_graph(
            model,
            X,
            w,
            config.lambda_var,
            config.lambda_resid,
            noise,
            dropout_rate=config.dropout,
            dropout_rng=rng,
        )
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDivergedError(step, value)
        ad.backward(loss)
        grads = {
            name: (np.zeros_like(t.data) if t.grad is None else t.grad)
            for name, t in params.items()
        }
        nn.adam_step(params, grads, state)
        trace[step] = value
    ad.zero_grad(params.values())
    mu, logvar = encode(model, X)
    return model, LatentState.freeze(mu, logvar), trace
