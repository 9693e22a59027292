"""Stochastic gates: reparameterized masks, their information cost, and
the redundancy-score thresholding that turns them into hard 0/1 masks.

A gate holds one (mu, log_sigma) pair per structural unit of the group it
controls. Sampled masks are mu + eps * sigma; a unit is dropped when
log(mu^2 / sigma^2) falls at or below the threshold tau.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import (
    Tensor,
    add,
    constant,
    mul,
    parameter,
    scale,
    sigmoid,
    square,
    texp,
    tlog,
    tsum,
)

# floor added to mu^2 before taking logs; keeps log-alpha finite at mu == 0
# without moving any decision boundary that float32 can represent
_ALPHA_FLOOR = 1e-38


class Site(str, Enum):
    EMBEDDING_WIDTH = "embedding_width"
    HEADS = "heads"
    FFN_INTERMEDIATE = "ffn_intermediate"
    FFN_OUTPUT = "ffn_output"
    LAYER_MHA = "layer_mha"
    LAYER_FFN = "layer_ffn"


@dataclass
class GateInit:
    mu_mean: float = 1.0
    mu_std: float = 0.01
    sigma_init: float = 0.1
    seed: int = 0

    def validate(self):
        if self.mu_std < 0:
            raise ContractError("GateInit: mu_std must be >= 0")
        if self.sigma_init <= 0:
            raise ContractError("GateInit: sigma_init must be > 0")


class VibGate:
    """One gated structural group (width dims, heads, FFN units, or a sub-layer)."""

    def __init__(self, unit_count: int, site: Site, beta: float,
                 mu: np.ndarray, log_sigma: np.ndarray):
        self.unit_count = unit_count
        self.site = Site(site)
        self.beta = float(beta)
        self.mu = parameter(mu)
        self.log_sigma = parameter(log_sigma)
        # set by pipeline.binarize: mu*hard constant and the hard 0/1 mask
        self.frozen: np.ndarray | None = None
        self.frozen_hard: np.ndarray | None = None

    @property
    def params(self):
        return [self.mu, self.log_sigma]

    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.data)


def new_gate(unit_count: int, site: Site, beta: float, init: GateInit) -> VibGate:
    if unit_count < 1:
        raise ContractError(f"new_gate: unit_count must be >= 1, got {unit_count}")
    if beta < 0:
        raise ContractError("new_gate: beta must be >= 0")
    init.validate()
    rng = np.random.default_rng(init.seed)
    mu = rng.normal(init.mu_mean, init.mu_std, size=unit_count).astype(np.float32)
    log_sigma = np.full(unit_count, np.log(init.sigma_init), dtype=np.float32)
    return VibGate(unit_count, site, beta, mu, log_sigma)


def sample_mask(gate: VibGate, epsilon, mode: str = "stochastic") -> Tensor:
    """Mask tensor of shape (batch, seq, unit_count), differentiable in mu/log_sigma.

    stochastic: mu + eps * sigma with eps supplied by the caller.
    mean: mu broadcast over batch and sequence (eps only fixes the shape).
    """
    eps = np.asarray(epsilon, dtype=np.float32)
    if eps.ndim != 3 or eps.shape[-1] != gate.unit_count:
        raise ShapeError(
            f"sample_mask: epsilon shape {eps.shape} does not match "
            f"(batch, seq, {gate.unit_count})"
        )
    if mode == "mean":
        ones = constant(np.ones_like(eps))
        return mul(ones, gate.mu)
    if mode != "stochastic":
        raise ContractError(f"sample_mask: unknown mode '{mode}'")
    noise = mul(constant(eps), texp(gate.log_sigma))
    return add(noise, gate.mu)


def kl_term(gate: VibGate) -> Tensor:
    """Information cost of the gate: sum over units of log(1 + mu^2/sigma^2)."""
    alpha_t = mul(square(gate.mu), texp(scale(gate.log_sigma, -2.0)))
    return tsum(tlog(add(alpha_t, constant(1.0))))


def alpha(gate: VibGate) -> np.ndarray:
    """Per-unit redundancy score mu^2 / sigma^2 (zero means the unit is noise)."""
    return (gate.mu.data.astype(np.float64) ** 2) / (gate.sigma().astype(np.float64) ** 2)


def log_alpha(gate: VibGate) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(alpha(gate))


def hard_mask(gate: VibGate, tau: float) -> np.ndarray:
    """Binary keep mask: 1 where log(alpha) > tau, else 0 (boundary drops)."""
    return (log_alpha(gate) > tau).astype(np.float32)


def soft_keep(gate: VibGate, tau: float, temperature: float) -> Tensor:
    """Differentiable keep probability: sigmoid((log alpha - tau) / temperature)."""
    if temperature <= 0:
        raise ContractError("soft_keep: temperature must be > 0")
    la = add(
        tlog(add(square(gate.mu), constant(_ALPHA_FLOOR))),
        scale(gate.log_sigma, -2.0),
    )
    return sigmoid(scale(add(la, constant(-float(tau))), 1.0 / temperature))


def effective_hard(gate: VibGate, tau: float) -> np.ndarray:
    """Hard keep mask, honoring a frozen one when the gate is binarized."""
    if gate.frozen_hard is not None:
        return gate.frozen_hard
    return hard_mask(gate, tau)


def eval_mask(gate: VibGate, tau: float) -> np.ndarray:
    """Constant evaluation-time mask: mu * hard_mask (frozen one if binarized)."""
    if gate.frozen is not None:
        return gate.frozen
    return (gate.mu.data * hard_mask(gate, tau)).astype(np.float32)
