"""Training objective: task loss, gate information cost, dynamically matched
distillation, and the Lagrangian-constrained expected-sparsity penalty.

The sparsity accounting exists in two mirrored forms that must agree:
a differentiable graph built from soft keep probabilities (used by the
optimizer) and a plain numeric polynomial over keep counts (used for the
dense-extraction oracle). Both count, per structural unit, the parameters
or forward FLOPs that survive only if every gate unit covering them
survives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateModelError, ShapeError
from .gates import effective_hard, kl_term, soft_keep
from .model import GatedTransformer, ModelConfig
from .tensor import (
    Tensor,
    add,
    constant,
    matmul,
    mean,
    mul,
    no_grad,
    scale,
    softmax_lastdim,
    square,
    tlog,
    tsum,
)

_LOG_FLOOR = 1e-30  # keeps log(prob) finite when a class underflows


# ---------------------------------------------------------------------------
# task + distillation losses


def cross_entropy(logits_t: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true class."""
    b = logits_t.shape[0]
    c = logits_t.shape[-1]
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} != ({b},)")
    onehot = np.zeros((b, 1, c), dtype=np.float32)
    onehot[np.arange(b), 0, labels] = 1.0
    probs = softmax_lastdim(logits_t)
    picked = matmul(mul(probs, constant(onehot)), constant(np.ones((c, 1), np.float32)))
    return scale(tsum(tlog(add(picked, constant(_LOG_FLOOR)))), -1.0 / b)


def pred_distill(student_logits: Tensor, teacher_logits: np.ndarray,
                 direction: str = "forward") -> Tensor:
    """Divergence between class distributions; gradients reach the student only.

    forward: KL(student || teacher) -- the default.
    reverse: KL(teacher || student).
    """
    t = np.asarray(teacher_logits, dtype=np.float32)
    if t.shape != student_logits.shape:
        raise ShapeError(
            f"pred_distill: teacher shape {t.shape} != student {student_logits.shape}"
        )
    b = student_logits.shape[0]
    p_s = softmax_lastdim(student_logits)
    log_s = tlog(add(p_s, constant(_LOG_FLOOR)))
    # identical primitive path as the student side, so equal logits give 0.0
    p_t = softmax_lastdim(constant(t)).data
    log_t = constant(np.log(p_t + np.float32(_LOG_FLOOR)))
    if direction == "forward":
        diff = add(log_s, scale(log_t, -1.0))
        return scale(tsum(mul(p_s, diff)), 1.0 / b)
    if direction == "reverse":
        const_part = float((p_t * np.log(p_t + _LOG_FLOOR)).sum() / b)
        cross = scale(tsum(mul(constant(p_t.astype(np.float32)), log_s)), -1.0 / b)
        return add(cross, constant(const_part))
    raise ContractError(f"pred_distill: unknown direction '{direction}'")


@dataclass
class DistillConfig:
    eta: float = 0.5
    width: int = 0
    teacher_layer_set: list | None = None   # None = every teacher layer
    w_layer: Tensor = None

    def __post_init__(self):
        if not (0.0 <= self.eta <= 1.0):
            raise ContractError("DistillConfig: eta must be in [0, 1]")
        if self.w_layer is None:
            if self.width < 1:
                raise ContractError("DistillConfig: width needed to build w_layer")
            from .tensor import parameter

            self.w_layer = parameter(np.eye(self.width, dtype=np.float32))


def layer_map(student_hiddens: list, teacher_hiddens: list, w_layer: Tensor,
              alive: list) -> list:
    """For each teacher layer, the alive student layer with the closest
    transformed hidden state (batch-mean squared error; ties -> smaller index).
    """
    alive_idx = [j for j, a in enumerate(alive) if a]
    if not alive_idx:
        raise DegenerateModelError("layer_map: no alive student layer")
    with no_grad():
        w = w_layer.data
        proj = {j: np.matmul(student_hiddens[j].data.astype(np.float64), w)
                for j in alive_idx}
        mapping = []
        for ht in teacher_hiddens:
            htd = ht if isinstance(ht, np.ndarray) else ht.data
            errs = [np.mean((proj[j] - htd) ** 2) for j in alive_idx]
            mapping.append(alive_idx[int(np.argmin(errs))])
    return mapping


def layer_distill(student_hiddens: list, teacher_hiddens: list, w_layer: Tensor,
                  mapping: list) -> Tensor:
    """Sum over teacher layers of MSE(w_layer applied to matched student hidden,
    teacher hidden). Differentiable in student hiddens and w_layer."""
    total = None
    projected = {}
    for i, j in enumerate(mapping):
        if j not in projected:
            projected[j] = matmul(student_hiddens[j], w_layer)
        ht = teacher_hiddens[i]
        htd = ht if isinstance(ht, np.ndarray) else ht.data
        diff = add(projected[j], constant(-np.asarray(htd, dtype=np.float32)))
        term = mean(square(diff))
        total = term if total is None else add(total, term)
    return total


def vib_loss(model: GatedTransformer) -> Tensor:
    """Sum over gates of beta * information cost."""
    if model.gates is None:
        raise ContractError("vib_loss: model has no gates")
    total = None
    for g in model.gates.all():
        term = scale(kl_term(g), g.beta)
        total = term if total is None else add(total, term)
    return total


# ---------------------------------------------------------------------------
# sparsity accounting


@dataclass
class SparsityController:
    metric: str = "parameters"          # or "flops"
    target: float = 0.5
    lambda1: float = 0.0
    lambda2: float = 0.0
    lambda_lr: float = 0.01
    warmup_steps: int = 0
    t_cur: float = field(default=None)

    def __post_init__(self):
        if not (0.0 < self.target < 1.0):
            raise ContractError("SparsityController: target must be in (0, 1)")
        if self.metric not in ("parameters", "flops"):
            raise ContractError(f"SparsityController: unknown metric '{self.metric}'")
        if self.t_cur is None:
            self.t_cur = 0.0 if self.warmup_steps > 0 else self.target

    def advance(self, step: int):
        """Linear ramp of the effective target over the warmup."""
        if self.warmup_steps <= 0:
            self.t_cur = self.target
        else:
            self.t_cur = self.target * min(1.0, (step + 1) / self.warmup_steps)


@dataclass
class CountModel:
    """Base counts for one model config under one metric."""

    config: ModelConfig
    metric: str
    seq_ref: int
    total_base: float

    @staticmethod
    def build(config: ModelConfig, metric: str, seq_ref: int = 32) -> "CountModel":
        if metric not in ("parameters", "flops"):
            raise ContractError(f"CountModel: unknown metric '{metric}'")
        ones = full_keep_sums(config)
        if metric == "parameters":
            base = params_from_sums(config, *ones)
        else:
            base = flops_from_sums(config, seq_ref, *ones)
        return CountModel(config, metric, seq_ref, float(base))


def full_keep_sums(config: ModelConfig):
    per_layer = [(1.0, 1.0, float(config.heads), float(config.ffn_dim),
                  float(config.width)) for _ in range(config.layers)]
    return float(config.width), per_layer


def params_from_sums(cfg: ModelConfig, s_m: float, per_layer: list) -> float:
    """Surviving parameter count from keep sums.

    per_layer entries: (lm, lf, s_heads, s_inter, s_out_and_width) where the
    last is sum over width dims of keep_out * keep_width.
    """
    dh = cfg.head_dim
    total = (cfg.vocab_size + cfg.max_seq) * s_m + cfg.num_classes * s_m
    for lm, lf, s_a, s_i, s_om in per_layer:
        mha = s_a * (4.0 * dh * s_m + 3.0 * dh) + 3.0 * s_m
        ffn = s_m * s_i + s_i + s_i * s_om + s_om + 2.0 * s_m
        total += lm * mha + lf * ffn
    return total


def flops_from_sums(cfg: ModelConfig, seq: int, s_m: float, per_layer: list) -> float:
    """Surviving forward FLOPs (one example, the reference sequence length).

    Convention: 2*m*n*k per matmul, one op per element for everything else;
    embedding lookup free; attention score and context products carry the
    kept-width fraction; the classifier bias add is excluded so full masking
    reaches sparsity exactly 1.
    """
    dh = cfg.head_dim
    d = cfg.width
    t = float(seq)
    total = t * s_m                      # token+position embedding add
    for lm, lf, s_a, s_i, s_om in per_layer:
        mha = (
            3.0 * t * s_m                                  # pre-norm + affine
            + s_a * (6.0 * t * dh * s_m + 3.0 * t * dh     # QKV matmuls + biases
                     + 4.0 * t * t * dh * s_m / d          # scores + context
                     + 2.0 * t * t)                        # scale + softmax
            + 2.0 * t * dh * s_a * s_m                     # output projection
            + 2.0 * t * s_m                                # its bias + residual
        )
        ffn = (
            3.0 * t * s_m                                  # pre-norm + affine
            + 2.0 * t * s_m * s_i + t * s_i                # up projection + bias
            + t * s_i                                      # activation
            + 2.0 * t * s_i * s_om + t * s_om              # down projection + bias
            + t * s_om                                     # residual add
        )
        total += lm * mha + lf * ffn
    total += t * s_m                                       # final norm
    total += 2.0 * s_m * cfg.num_classes                   # classifier matmul
    return total


def hard_keep_sums(model: GatedTransformer, tau: float):
    """Keep sums from the current hard masks (numeric twin of the graph)."""
    g = model.gates
    if g is None:
        return full_keep_sums(model.config)
    m = effective_hard(g.width, tau)
    per_layer = []
    for i in range(model.config.layers):
        lm = float(effective_hard(g.layer_mha[i], tau)[0])
        lf = float(effective_hard(g.layer_ffn[i], tau)[0])
        s_a = float(effective_hard(g.heads[i], tau).sum())
        s_i = float(effective_hard(g.inter[i], tau).sum())
        s_om = float((effective_hard(g.out[i], tau) * m).sum())
        per_layer.append((lm, lf, s_a, s_i, s_om))
    return float(m.sum()), per_layer


def expected_sparsity(model: GatedTransformer, counts: CountModel, tau: float,
                      temperature: float) -> Tensor:
    """Differentiable sparsity estimate 1 - expected_kept / total_base."""
    if model.gates is None:
        raise ContractError("expected_sparsity: model has no gates")
    cfg = model.config
    if (cfg.width, cfg.layers) != (counts.config.width, counts.config.layers):
        raise ContractError("expected_sparsity: counts built for another config")
    g = model.gates
    dh = cfg.head_dim
    d = cfg.width
    t = float(counts.seq_ref)

    k_m = soft_keep(g.width, tau, temperature)
    s_m = tsum(k_m)
    if counts.metric == "parameters":
        kept = scale(s_m, float(cfg.vocab_size + cfg.max_seq + cfg.num_classes))
    else:
        # embedding add + final norm + classifier matmul
        kept = scale(s_m, 2.0 * t + 2.0 * cfg.num_classes)

    for i in range(cfg.layers):
        lm = tsum(soft_keep(g.layer_mha[i], tau, temperature))
        lf = tsum(soft_keep(g.layer_ffn[i], tau, temperature))
        s_a = tsum(soft_keep(g.heads[i], tau, temperature))
        s_i = tsum(soft_keep(g.inter[i], tau, temperature))
        s_om = tsum(mul(soft_keep(g.out[i], tau, temperature), k_m))
        if counts.metric == "parameters":
            mha = add(mul(s_a, add(scale(s_m, 4.0 * dh), constant(3.0 * dh))),
                      scale(s_m, 3.0))
            ffn = add(add(mul(s_m, s_i), s_i),
                      add(add(mul(s_i, s_om), s_om), scale(s_m, 2.0)))
        else:
            mha = add(
                scale(s_m, 3.0 * t),
                add(
                    mul(s_a, add(add(scale(s_m, 6.0 * t * dh), constant(3.0 * t * dh)),
                                 add(scale(s_m, 4.0 * t * t * dh / d),
                                     constant(2.0 * t * t)))),
                    add(mul(s_a, scale(s_m, 2.0 * t * dh)), scale(s_m, 2.0 * t)),
                ),
            )
            ffn = add(
                scale(s_m, 3.0 * t),
                add(add(scale(mul(s_m, s_i), 2.0 * t), scale(s_i, 2.0 * t)),
                    add(scale(mul(s_i, s_om), 2.0 * t), scale(s_om, 2.0 * t))),
            )
        kept = add(kept, add(mul(lm, mha), mul(lf, ffn)))

    return add(constant(1.0), scale(kept, -1.0 / counts.total_base))


def sparsity_loss(controller: SparsityController, s_e: Tensor) -> Tensor:
    """Constraint violation penalty with the multipliers held fixed."""
    gap = add(s_e, constant(-controller.t_cur))
    return add(scale(gap, controller.lambda1), scale(square(gap), controller.lambda2))


def update_lagrangian(controller: SparsityController, s_e: float) -> SparsityController:
    """Ascent step on the multipliers (adversarial to constraint violation)."""
    gap = float(s_e) - controller.t_cur
    controller.lambda1 += controller.lambda_lr * gap
    controller.lambda2 = max(0.0, controller.lambda2 + controller.lambda_lr * gap * gap)
    return controller


def total_loss(task_ce: Tensor, vib: Tensor, pred_d: Tensor, layer_d: Tensor,
               sparsity: Tensor, eta: float) -> Tensor:
    """task + eta*prediction-distill + (1-eta)*layer-distill + gate cost + penalty."""
    if not (0.0 <= eta <= 1.0):
        raise ContractError("total_loss: eta must be in [0, 1]")
    out = task_ce
    if pred_d is not None and eta > 0.0:
        out = add(out, scale(pred_d, eta))
    if layer_d is not None and eta < 1.0:
        out = add(out, scale(layer_d, 1.0 - eta))
    if vib is not None:
        out = add(out, vib)
    if sparsity is not None:
        out = add(out, sparsity)
    return out
