"""Optimization loops: prompt tuning and mixture-weight fitting.

Prompt tuning runs mini-batch adaptive-moment descent on the shared
context vectors only, with gradients flowing through the renormalization
of the effective class embeddings. Weight fitting runs full-batch
momentum descent on the raw weight parameters (two_stage logits or
one_stage temperatures): the in-weight against the mixture's
cross-entropy on its own sub-domain, the out-weight against the
entropy-margin loss on a surrogate out-class set. Weight traces are
monotone non-increasing: descent stops at the first epoch that would
raise the objective, and an immediate ascent retries once at a tenth of
the learning rate.

All loops are deterministic for a fixed seed and configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from promix import backend
from promix.embedspace import EmbeddingSet
from promix.head import DEFAULT_TAU, PromptHead, similarity_matrix
from promix.losses import LossConfig, batch_loss_grad
from promix.mixture import MixtureModel, normalized_entropy, sigmoid


class DivergenceError(RuntimeError):
    """Raised when an optimization loop produces a non-finite or
    persistently non-monotone objective."""


@dataclass(frozen=True)
class OptimizerConfig:
    """Default optimizer settings for both stages.

    ``prompt_lr`` drives Adam on the context; ``weight_lr`` drives
    momentum SGD on the weight parameters. ``weight_epochs`` covers the
    non-incremental case; incremental harnesses override it per session.
    """

    prompt_lr: float = 0.002
    prompt_weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_lr: float = 0.002
    weight_momentum: float = 0.9
    weight_weight_decay: float = 5e-4
    epochs: int = 50
    batch_size: int = 32
    weight_epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.prompt_lr < 0 or self.weight_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0 <= self.weight_momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.weight_epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")


@dataclass(frozen=True)
class HyperParams:
    """Method hyperparameters: loss weight w, entropy-loss scale, hinge
    margin d, and context length M."""

    conf_weight: float = 5.0
    ent_weight: float = 8.0
    margin: float = 0.2
    context_len: int = 16

    def __post_init__(self):
        if min(self.conf_weight, self.ent_weight, self.margin) < 0:
            raise ValueError("hyperparameters must be non-negative")
        if self.margin > 1:
            raise ValueError("margin must lie in [0, 1]")
        if self.context_len < 0:
            raise ValueError("context_len must be non-negative")


def _batch_context_grad(
    ctx: np.ndarray,
    anchors: np.ndarray,
    xb: np.ndarray,
    yb: np.ndarray,
    loss: LossConfig,
    tau: float,
) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the context rows for one batch.

    Chains the similarity-space gradient through the batch similarities,
    the renormalization of the effective class embeddings, and the
    context mean (each row receives an equal share).
    """
    m_rows = ctx.shape[0]
    raw = anchors + ctx.mean(axis=0)
    norms = np.linalg.norm(raw, axis=1)
    eff = raw / norms[:, None]
    sims = xb @ eff.T
    loss_val, g = batch_loss_grad(sims, yb, tau, loss)
    d_eff = g.T @ xb
    radial = np.einsum("cd,cd->c", d_eff, eff)
    d_raw = (d_eff - radial[:, None] * eff) / norms[:, None]
    d_ctx_row = d_raw.sum(axis=0) / m_rows
    return loss_val, np.tile(d_ctx_row, (m_rows, 1))


def context_gradient(
    head: PromptHead, train_set: EmbeddingSet, loss: LossConfig, tau: float = DEFAULT_TAU
) -> np.ndarray:
    """Full-set analytic gradient of the mean loss w.r.t. the context."""
    if head.context_len == 0:
        raise ValueError("head has no context vectors")
    _, grad = _batch_context_grad(
        head.context, head.anchors, train_set.vectors, train_set.labels, loss, tau
    )
    return grad


def tune_prompt(
    init: PromptHead,
    train_set: EmbeddingSet,
    loss: LossConfig,
    opt: OptimizerConfig,
    tau: float = DEFAULT_TAU,
    epoch_hook: Callable[[int, PromptHead], None] | None = None,
) -> tuple[PromptHead, list[float]]:
    """Mini-batch descent on the context vectors; anchors stay frozen.

    Labels must index the head's class list directly. Returns the tuned
    head and the per-epoch mean training loss. ``epoch_hook`` receives
    the head after each epoch (used by the evaluation harnesses to record
    curves).
    """
    if init.frozen or init.context_len == 0:
        raise ValueError("cannot tune a frozen head (no context vectors)")
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if int(train_set.labels.max()) >= init.num_classes:
        raise ValueError("training label outside the head's class list")

    x_all = train_set.vectors
    y_all = train_set.labels
    n = len(train_set)
    ctx = init.context.copy()
    anchors = init.anchors
    rng = np.random.default_rng(opt.seed)

    adam_m = np.zeros_like(ctx)
    adam_v = np.zeros_like(ctx)
    step = 0
    trace: list[float] = []
    for epoch in range(opt.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, opt.batch_size):
            idx = order[start : start + opt.batch_size]
            loss_val, grad = _batch_context_grad(
                ctx, anchors, x_all[idx], y_all[idx], loss, tau
            )
            if not np.isfinite(loss_val):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch offset {start}"
                )
            epoch_loss += loss_val * len(idx)
            grad = grad + opt.prompt_weight_decay * ctx

            step += 1
            adam_m = opt.beta1 * adam_m + (1.0 - opt.beta1) * grad
            adam_v = opt.beta2 * adam_v + (1.0 - opt.beta2) * grad * grad
            m_hat = adam_m / (1.0 - opt.beta1**step)
            v_hat = adam_v / (1.0 - opt.beta2**step)
            ctx = ctx - opt.prompt_lr * m_hat / (np.sqrt(v_hat) + opt.eps)
        trace.append(epoch_loss / n)
        if epoch_hook is not None:
            epoch_hook(epoch, init.with_context(ctx))
    return init.with_context(ctx), trace


def context_loss_value(
    head: PromptHead, train_set: EmbeddingSet, loss: LossConfig, tau: float
) -> float:
    """Full-set mean loss of a head; the finite-difference oracle target
    for the context gradient."""
    sims = similarity_matrix(head, train_set.vectors)
    value, _ = batch_loss_grad(sims, train_set.labels, tau, loss)
    return value


def tune_prompt_one_stage(
    init: PromptHead,
    generalized: PromptHead,
    train_set: EmbeddingSet,
    loss: LossConfig,
    opt: OptimizerConfig,
    tau_0: float = DEFAULT_TAU,
) -> tuple[PromptHead, float, list[float]]:
    """Joint descent on the context and the specialized temperature.

    The single-temperature coupling ties the specialized head's mixing
    weight to its own temperature tau_1: training logits are
    s_0 / tau_0 + s_1 / tau_1, and one adaptive-moment loop updates the
    context together with log(tau_1). Only meaningful with exactly one
    specialized head. Returns (tuned head, tau_1, per-epoch loss trace).
    """
    if init.frozen or init.context_len == 0:
        raise ValueError("cannot tune a frozen head (no context vectors)")
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if generalized.num_classes != init.num_classes:
        raise ValueError("generalized head must share the class list")

    x_all = train_set.vectors
    y_all = train_set.labels
    n = len(train_set)
    m_rows = init.context_len
    ctx = init.context.copy()
    anchors = init.anchors
    s0_all = x_all @ generalized.effective_embeddings().T
    log_tau = float(np.log(tau_0))
    rng = np.random.default_rng(opt.seed)

    adam_m = np.zeros_like(ctx)
    adam_v = np.zeros_like(ctx)
    tau_m = 0.0
    tau_v = 0.0
    step = 0
    trace: list[float] = []
    for epoch in range(opt.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, opt.batch_size):
            idx = order[start : start + opt.batch_size]
            xb, yb, s0 = x_all[idx], y_all[idx], s0_all[idx]
            tau_1 = float(np.exp(log_tau))

            raw = anchors + ctx.mean(axis=0)
            norms = np.linalg.norm(raw, axis=1)
            eff = raw / norms[:, None]
            s1 = xb @ eff.T
            logits = s0 / tau_0 + s1 / tau_1
            loss_val, g_z = batch_loss_grad(logits, yb, 1.0, loss)
            if not np.isfinite(loss_val):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch offset {start}"
                )
            epoch_loss += loss_val * len(idx)

            d_eff = (g_z / tau_1).T @ xb
            radial = np.einsum("cd,cd->c", d_eff, eff)
            d_raw = (d_eff - radial[:, None] * eff) / norms[:, None]
            grad_ctx = np.tile(d_raw.sum(axis=0) / m_rows, (m_rows, 1))
            grad_ctx += opt.prompt_weight_decay * ctx
            grad_tau = float(np.einsum("nc,nc->", g_z, -s1 / tau_1))

            step += 1
            adam_m = opt.beta1 * adam_m + (1.0 - opt.beta1) * grad_ctx
            adam_v = opt.beta2 * adam_v + (1.0 - opt.beta2) * grad_ctx * grad_ctx
            ctx = ctx - opt.prompt_lr * (adam_m / (1.0 - opt.beta1**step)) / (
                np.sqrt(adam_v / (1.0 - opt.beta2**step)) + opt.eps
            )
            tau_m = opt.beta1 * tau_m + (1.0 - opt.beta1) * grad_tau
            tau_v = opt.beta2 * tau_v + (1.0 - opt.beta2) * grad_tau * grad_tau
            log_tau = log_tau - opt.prompt_lr * (tau_m / (1.0 - opt.beta1**step)) / (
                np.sqrt(tau_v / (1.0 - opt.beta2**step)) + opt.eps
            )
        trace.append(epoch_loss / n)
    return init.with_context(ctx), float(np.exp(log_tau)), trace


def _descend_scalar(
    theta0: float,
    objective_grad: Callable[[float], tuple[float, float]],
    opt: OptimizerConfig,
    epochs: int,
    n_samples: int,
) -> tuple[float, list[float]]:
    """Full-batch momentum descent on one raw parameter.

    ``objective_grad`` maps theta -> (objective, d objective / d theta).
    One epoch performs ceil(n_samples / batch_size) full-batch steps, so
    an epoch updates the parameter as many times as mini-batch descent
    would; the trace records the objective once per epoch. The raw
    parameter also receives weight decay.

    The returned trace is monotone non-increasing within 1e-9: momentum
    wobbles around the optimum once converged, so the loop stops at the
    first epoch that would raise the objective and returns the iterate
    before it. An ascent on the very first epoch means the step size is
    too large; that case retries once at a tenth of the learning rate.
    """
    steps_per_epoch = max(1, -(-n_samples // opt.batch_size))

    def run(lr: float) -> tuple[float, list[float]]:
        theta = theta0
        buf = 0.0
        value, grad = objective_grad(theta)
        trace = [value]
        for _ in range(epochs):
            previous_theta = theta
            for _ in range(steps_per_epoch):
                buf = opt.weight_momentum * buf + grad + opt.weight_weight_decay * theta
                theta = theta - lr * buf
                value, grad = objective_grad(theta)
                if not np.isfinite(value):
                    raise DivergenceError("non-finite weight objective")
            if value > trace[-1] + 1e-9:
                return previous_theta, trace
            trace.append(value)
        return theta, trace

    theta, trace = run(opt.weight_lr)
    if len(trace) == 1 and epochs > 0:
        theta, trace = run(opt.weight_lr * 0.1)
        if len(trace) == 1:
            raise DivergenceError(
                "weight objective rises immediately even after lr backoff"
            )
    return theta, trace


def _in_objective_factory(
    model: MixtureModel, train_set: EmbeddingSet, prompt: int, classes: np.ndarray | None
):
    """Precompute similarities and return theta -> (mean CE, gradient)."""
    sims = model.similarity_stack(train_set.vectors)
    weights = model.weights
    partition = model.partition
    tau = model.tau
    n = len(train_set)
    rows = np.arange(n)
    owners = partition.owner_of()

    if classes is None:
        classes = np.arange(partition.num_classes, dtype=np.int64)
    else:
        classes = np.asarray(classes, dtype=np.int64)
    label_pos = {int(c): j for j, c in enumerate(classes)}
    y_local = np.array([label_pos[int(lab)] for lab in train_set.labels], dtype=np.int64)
    sims_c = sims[:, :, classes]
    owners_c = owners[classes]
    owned_c = owners_c == prompt

    def evaluate(theta: float) -> tuple[float, float]:
        if weights.parameterization == "one_stage":
            # theta is the log-temperature; tau_1 = exp(theta) stays positive
            tau_in = float(np.exp(theta))
            w = weights.replace_raw(prompt, tau_in=tau_in)
            tau_spec = np.where(owned_c, tau_in, w.tau_out)
            logits = sims_c[0] / w.tau_0 + sims_c[1] / tau_spec[None, :]
            dz_dtheta = np.where(owned_c, -1.0 / tau_in, 0.0)[None, :] * sims_c[1]
        else:
            w = weights.replace_raw(prompt, alpha_in=theta)
            k = w.num_specialized
            raw = np.empty((k, len(classes)))
            for i in range(1, k + 1):
                raw[i - 1] = np.where(
                    owners_c == i, w.in_weights[i - 1], w.out_weights[i - 1]
                )
            spec_sum = raw.sum(axis=0)
            w0 = np.maximum(1.0 - spec_sum, 0.0)
            denom = np.maximum(spec_sum, 1.0)
            weighted = (w0[None, :] * sims_c[0] + np.einsum("kc,knc->nc", raw, sims_c[1:]))
            logits = weighted / denom[None, :] / tau
            pi = w.in_weights[prompt - 1]
            dpi = pi * (1.0 - pi)
            # below the simplex cap the head-0 residual absorbs the change;
            # above it the column is normalized by the specialized sum
            over = spec_sum > 1.0
            mean_sim = logits * tau
            dz_free = sims_c[prompt] - sims_c[0]
            dz_norm = (sims_c[prompt] - mean_sim) / denom[None, :]
            dz_dtheta = (
                np.where(owned_c, dpi, 0.0)[None, :]
                * np.where(over[None, :], dz_norm, dz_free)
                / tau
            )
        probs = backend.kernels.softmax_rows(logits)
        py = probs[rows, y_local]
        ce = float(np.mean(-np.log(np.maximum(py, 1e-300))))
        dce_dz = probs.copy()
        dce_dz[rows, y_local] -= 1.0
        grad = float(np.einsum("nc,nc->", dce_dz, dz_dtheta) / n)
        return ce, grad

    return evaluate


def optimize_in_weight(
    model: MixtureModel,
    train_set: EmbeddingSet,
    prompt: int = 1,
    opt: OptimizerConfig | None = None,
    classes: np.ndarray | None = None,
    epochs: int | None = None,
) -> tuple[MixtureModel, list[float]]:
    """Fit one head's in-domain weight by descending the mixture CE.

    ``train_set`` labels must lie in the head's own sub-domain;
    ``classes`` restricts the candidate class list (incremental sessions
    only rank classes seen so far). Returns the updated model and the
    per-epoch objective trace, which is monotone non-increasing.
    """
    opt = opt or OptimizerConfig()
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if not np.all(np.isin(train_set.labels, model.partition.subsets[prompt])):
        raise ValueError(f"training labels must lie in sub-domain {prompt}")
    weights = model.weights
    if weights.parameterization == "two_stage":
        theta0 = float(weights.alphas_in[prompt - 1])
    elif weights.parameterization == "one_stage":
        theta0 = float(np.log(weights.tau_in))
    else:
        raise ValueError("direct weights carry no raw parameter to optimize")
    objective = _in_objective_factory(model, train_set, prompt, classes)
    theta, trace = _descend_scalar(
        theta0, objective, opt, epochs or opt.weight_epochs, len(train_set)
    )
    if weights.parameterization == "two_stage":
        new_weights = weights.replace_raw(prompt, alpha_in=theta)
    else:
        new_weights = weights.replace_raw(prompt, tau_in=float(np.exp(theta)))
    return replace(model, weights=new_weights), trace


def _out_objective_factory(
    model: MixtureModel,
    train_vectors: np.ndarray,
    out_anchors: np.ndarray,
    prompt: int,
    margin: float,
    ent_weight: float,
):
    """Precompute out-class similarities; return theta -> (loss, grad).

    Both entropies run over the out-class set only: the generalized head
    at its native temperature, the specialized head with weight-scaled
    similarities so the weight is the only moving part.
    """
    weights = model.weights
    tau = model.tau
    n_out = out_anchors.shape[0]
    log_n = np.log(n_out)

    s0 = train_vectors @ model.heads[0].effective_embeddings(out_anchors).T
    si = train_vectors @ model.heads[prompt].effective_embeddings(out_anchors).T
    p0 = backend.kernels.softmax_rows(s0 / tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp0 = np.where(p0 > 0, p0 * np.log(np.maximum(p0, 1e-300)), 0.0)
    h0 = -plogp0.sum(axis=1) / log_n

    def evaluate(theta: float) -> tuple[float, float]:
        if weights.parameterization == "one_stage":
            # theta is the log-temperature of the specialized head
            tau_out = float(np.exp(theta))
            logits = si / tau_out
            dz = -si / tau_out
        else:
            pi = float(sigmoid(theta))
            logits = pi * si / tau
            dz = (pi * (1.0 - pi)) * si / tau
        pi_rows = backend.kernels.softmax_rows(logits)
        logp = np.log(np.maximum(pi_rows, 1e-300))
        plogp = pi_rows * logp
        hi = -plogp.sum(axis=1) / log_n
        active = (h0 - hi + margin) > 0
        loss = float(ent_weight * np.mean(np.maximum(0.0, h0 - hi + margin)))
        # dH_i/dtheta per sample, then the hinge gate
        mean_dz = np.einsum("nc,nc->n", pi_rows, dz)
        dh = -(np.einsum("nc,nc->n", plogp, dz) - plogp.sum(axis=1) * mean_dz) / log_n
        grad = float(ent_weight * np.mean(np.where(active, -dh, 0.0)))
        return loss, grad

    return evaluate


def optimize_out_weight(
    model: MixtureModel,
    train_set: EmbeddingSet,
    out_anchors: np.ndarray,
    prompt: int = 1,
    margin: float = 0.2,
    ent_weight: float = 8.0,
    opt: OptimizerConfig | None = None,
    epochs: int | None = None,
) -> tuple[MixtureModel, list[float]]:
    """Fit one head's out-domain weight by descending the entropy hinge.

    Skips (returning the model unchanged with an empty trace) when no
    out-class anchors are supplied; raises if fewer than two are given.
    """
    opt = opt or OptimizerConfig()
    out_anchors = np.asarray(out_anchors, dtype=np.float64)
    if out_anchors.shape[0] == 0:
        return model, []
    if out_anchors.shape[0] < 2:
        raise ValueError("out-class sets need at least 2 anchors")
    if len(train_set) == 0:
        raise ValueError("empty training set")
    weights = model.weights
    if weights.parameterization == "two_stage":
        theta0 = float(weights.alphas_out[prompt - 1])
    elif weights.parameterization == "one_stage":
        theta0 = float(np.log(weights.tau_out))
    else:
        raise ValueError("direct weights carry no raw parameter to optimize")
    objective = _out_objective_factory(
        model, train_set.vectors, out_anchors, prompt, margin, ent_weight
    )
    theta, trace = _descend_scalar(
        theta0, objective, opt, epochs or opt.weight_epochs, len(train_set)
    )
    if weights.parameterization == "two_stage":
        new_weights = weights.replace_raw(prompt, alpha_out=theta)
    else:
        new_weights = weights.replace_raw(prompt, tau_out=float(np.exp(theta)))
    return replace(model, weights=new_weights), trace


def outclass_entropies(
    model: MixtureModel, x: np.ndarray, out_anchors: np.ndarray, prompt: int
) -> tuple[float, float]:
    """(H_generalized, H_specialized) for one embedding on the out-class
    set, matching the optimization objective's reading."""
    x = np.asarray(x, dtype=np.float64)
    tau = model.tau
    s0 = model.heads[0].effective_embeddings(out_anchors) @ x
    si = model.heads[prompt].effective_embeddings(out_anchors) @ x
    w = model.weights
    if w.parameterization == "one_stage":
        logits_i = si / w.tau_out
    else:
        logits_i = w.out_weights[prompt - 1] * si / tau
    p0 = backend.kernels.softmax_rows(s0[None, :] / tau)[0]
    pi = backend.kernels.softmax_rows(logits_i[None, :])[0]
    return normalized_entropy(p0), normalized_entropy(pi)
