"""Desk-scale sparse mixture-of-experts classifier with manual backprop.

The model is deliberately small and bias-free: a linear router h = W_g x
feeding a softmax, hard top-k selection with gates renormalized over the
active set, and per-expert two-layer GELU networks whose outputs live
directly in class-logit space. Forward, backward, and AdamW are written
out by hand so every gradient path (task, load-balance term, and each
decorrelation regularizer) is explicit and testable against finite
differences.

Training is deterministic: every random draw comes from a stream keyed by
(seed, purpose, fold[, epoch]), so fold-level parallelism cannot change
results.
"""

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from .core import _frozen_array
from .errors import (
    DegenerateProbeError,
    InvalidConfigError,
    InvalidShapeError,
    NonFiniteError,
    NotPSDError,
)
from .infotheory import (
    RoutingBatch,
    aux_loss,
    entropy,
    mean_routing_probs,
    topk_conditional_entropy,
)
from .rng import check_seed, stream

log = logging.getLogger(__name__)

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
_NORM_FLOOR = 1e-8
_PROBE_SIZE = 256
_REG_KINDS = ("none", "ortho", "ncl", "dpp")


def gelu(u):
    """Tanh-form GELU, the exact formula the derivative below assumes."""
    u = np.asarray(u, dtype=float)
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + _GELU_A * u**3)))


def gelu_grad(u):
    u = np.asarray(u, dtype=float)
    z = _GELU_C * (u + _GELU_A * u**3)
    t = np.tanh(z)
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t**2) * _GELU_C * (1.0 + 3.0 * _GELU_A * u**2)


@dataclass(frozen=True)
class MoEConfig:
    """Hyperparameters for one training run.

    Defaults give a deliberately capacity-starved model: 16 experts of
    hidden width 32 with only 2 active per sample.
    """

    input_dim: int = 100
    experts: int = 16
    active_k: int = 2
    expert_hidden: int = 32
    classes: int = 10
    batch: int = 128
    lr: float = 1e-3
    epochs: int = 30
    aux_weight: float = 0.01
    reg_weight: float = 0.1
    reg_kind: str = "none"
    seed: int = 42
    dpp_epsilon: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        for name in ("input_dim", "experts", "active_k", "expert_hidden", "classes", "batch"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfigError(f"{name} must be positive")
        if self.classes < 2:
            raise InvalidConfigError("need at least 2 classes")
        if self.active_k > self.experts:
            raise InvalidConfigError("active_k cannot exceed experts")
        if self.epochs < 0:
            raise InvalidConfigError("epochs must be nonnegative")
        for name in ("lr", "dpp_epsilon", "adam_eps"):
            if not getattr(self, name) > 0:
                raise InvalidConfigError(f"{name} must be positive")
        for name in ("aux_weight", "reg_weight", "weight_decay"):
            if getattr(self, name) < 0:
                raise InvalidConfigError(f"{name} must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfigError("betas must lie in [0, 1)")
        if self.reg_kind not in _REG_KINDS:
            raise InvalidConfigError(f"reg_kind must be one of {_REG_KINDS}")
        check_seed(self.seed)


@dataclass
class MoEParams:
    """Model weights plus AdamW state. Mutable; one instance per fold."""

    w_g: np.ndarray      # (E, D) router
    w_in: np.ndarray     # (E, H, D)
    w_out: np.ndarray    # (E, C, H)
    m_w_g: np.ndarray = None
    v_w_g: np.ndarray = None
    m_w_in: np.ndarray = None
    v_w_in: np.ndarray = None
    m_w_out: np.ndarray = None
    v_w_out: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        for name in ("w_g", "w_in", "w_out"):
            w = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(w)):
                raise NonFiniteError(f"{name} contains non-finite entries")
            setattr(self, name, w)
        if self.w_in.shape[0] != self.w_g.shape[0] or self.w_out.shape[0] != self.w_g.shape[0]:
            raise InvalidShapeError("per-expert arrays disagree on expert count")
        if self.w_in.shape[2] != self.w_g.shape[1]:
            raise InvalidShapeError("w_in input dim does not match router")
        if self.w_out.shape[2] != self.w_in.shape[1]:
            raise InvalidShapeError("w_out hidden dim does not match w_in")
        for name in ("w_g", "w_in", "w_out"):
            shape = getattr(self, name).shape
            for prefix in ("m_", "v_"):
                slot = prefix + name
                cur = getattr(self, slot)
                if cur is None:
                    setattr(self, slot, np.zeros(shape))
                elif cur.shape != shape:
                    raise InvalidShapeError(f"{slot} shape mismatch")


def init_params(config, gen):
    """Draw fresh weights from `gen`: N(0, 2/fan_in), no biases."""
    d, e, h, c = config.input_dim, config.experts, config.expert_hidden, config.classes
    return MoEParams(
        w_g=gen.standard_normal((e, d)) * math.sqrt(2.0 / d),
        w_in=gen.standard_normal((e, h, d)) * math.sqrt(2.0 / d),
        w_out=gen.standard_normal((e, c, h)) * math.sqrt(2.0 / h),
    )


@dataclass(frozen=True)
class ForwardTrace:
    """Everything forward computed, kept for backward and for metrics.

    `expert_cache` holds, per expert, the rows of the batch it served,
    the slot each row used, and the pre/post activation matrices; None
    for experts nobody selected.
    """

    x: np.ndarray               # (B, D)
    dense_probs: np.ndarray     # (B, E) full router softmax
    selections: np.ndarray      # (B, k) ascending distinct expert ids
    gates: np.ndarray           # (B, k) renormalized over the active set
    expert_outputs: np.ndarray  # (B, k, C) selected experts' logit vectors
    logits: np.ndarray          # (B, C) gate-weighted combination
    class_probs: np.ndarray     # (B, C)
    expert_cache: tuple = field(repr=False, default=())

    def __post_init__(self):
        gates = np.asarray(self.gates, dtype=float)
        if np.max(np.abs(gates.sum(axis=1) - 1.0)) > 1e-9:
            raise InvalidShapeError("gate weights must sum to 1 per sample")
        sel = np.asarray(self.selections)
        if sel.shape[1] > 1 and np.any(np.diff(np.sort(sel, axis=1), axis=1) == 0):
            raise InvalidShapeError("selected indices must be distinct per sample")
        object.__setattr__(self, "selections", _frozen_array(self.selections, dtype=np.int64))
        for name in ("x", "dense_probs", "gates",
                     "expert_outputs", "logits", "class_probs"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))

    @property
    def batch_size(self):
        return self.x.shape[0]


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(params, config, x_batch):
    """One dense-router, sparse-compute pass over a batch."""
    x = np.asarray(x_batch, dtype=float)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise InvalidShapeError(f"expected (B, {config.input_dim}) inputs, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("input batch contains non-finite values")
    k = config.active_k
    h = x @ params.w_g.T
    p = _softmax_rows(h)
    # stable argsort on -p: ties go to the lowest expert index
    order = np.argsort(-p, axis=1, kind="stable")
    sel = np.sort(order[:, :k], axis=1)
    active = np.take_along_axis(p, sel, axis=1)
    gates = active / active.sum(axis=1, keepdims=True)

    b = x.shape[0]
    outputs = np.zeros((b, k, config.classes))
    cache = []
    for e in range(config.experts):
        rows, slots = np.nonzero(sel == e)
        if rows.size == 0:
            cache.append(None)
            continue
        u = x[rows] @ params.w_in[e].T
        a = gelu(u)
        outputs[rows, slots] = a @ params.w_out[e].T
        cache.append((rows, slots, u, a))

    logits = np.einsum("bk,bkc->bc", gates, outputs)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    class_probs = np.exp(shifted - log_z)
    for arr in (p, outputs, logits, class_probs):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("forward pass produced non-finite values")
    return ForwardTrace(x=x, dense_probs=p, selections=sel, gates=gates,
                        expert_outputs=outputs, logits=logits,
                        class_probs=class_probs, expert_cache=tuple(cache))


def routing_batch_from_trace(trace):
    return RoutingBatch(dense_probs=trace.dense_probs, selections=trace.selections)


def _normalized_outputs(trace):
    """Row-normalize selected expert outputs; near-zero vectors become 0."""
    y = trace.expert_outputs
    norms = np.linalg.norm(y, axis=2, keepdims=True)
    ok = norms >= _NORM_FLOOR
    if not np.all(ok):
        log.debug("zero-norm expert outputs excluded: %d", int((~ok).sum()))
    return np.where(ok, y / np.where(ok, norms, 1.0), 0.0), norms, ok


def ortho_loss(trace):
    """Mean over the batch of sum_{i != j} cos^2 between selected outputs."""
    n, _, _ = _normalized_outputs(trace)
    g = np.einsum("bic,bjc->bij", n, n)
    k = g.shape[1]
    g[:, np.arange(k), np.arange(k)] = 0.0
    return float(np.sum(g**2) / trace.batch_size)


def softdpp_loss(trace, epsilon):
    """-mean logdet of the Tikhonov-shifted Gram of normalized outputs."""
    if not epsilon > 0:
        raise InvalidConfigError("epsilon must be positive")
    n, _, _ = _normalized_outputs(trace)
    g = np.einsum("bic,bjc->bij", n, n)
    k = g.shape[1]
    g[:, np.arange(k), np.arange(k)] += epsilon
    total = 0.0
    for s in range(g.shape[0]):
        try:
            chol = np.linalg.cholesky(g[s])
        except np.linalg.LinAlgError:
            raise NotPSDError("shifted Gram lost positive definiteness") from None
        total += 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -total / trace.batch_size


def ncl_loss(trace):
    """Covariance of the selected experts' probability residuals.

    Each selected output is pushed through its own softmax; residuals are
    deviations from the per-sample mean. The off-diagonal covariance sum
    equals -sum_i ||residual_i||^2, so minimizing it rewards disagreement.
    """
    pi = _softmax_rows(trace.expert_outputs.reshape(-1, trace.expert_outputs.shape[2]))
    pi = pi.reshape(trace.expert_outputs.shape)
    d = pi - pi.mean(axis=1, keepdims=True)
    per_sample = np.einsum("bic,bjc->b", d, d) - np.einsum("bic,bic->b", d, d)
    return float(per_sample.mean())


@dataclass(frozen=True)
class LossComponents:
    task: float
    aux: float
    reg: float

    @property
    def total(self):
        return self.task + self.aux + self.reg


def total_loss(trace, labels, config, routing_batch=None):
    """(scalar, components): cross-entropy + weighted balance and reg terms."""
    labels = np.asarray(labels)
    if labels.shape != (trace.batch_size,):
        raise InvalidShapeError("labels must be one id per sample")
    shifted = trace.logits - trace.logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    task = -float(log_probs[np.arange(labels.size), labels].mean())
    if config.aux_weight == 0.0:
        aux = 0.0
    elif config.experts == 1:
        aux = config.aux_weight  # f = P = 1 identically
    else:
        if routing_batch is None:
            routing_batch = routing_batch_from_trace(trace)
        aux = config.aux_weight * aux_loss(routing_batch)
    if config.reg_kind == "ortho":
        raw = ortho_loss(trace)
    elif config.reg_kind == "ncl":
        raw = ncl_loss(trace)
    elif config.reg_kind == "dpp":
        raw = softdpp_loss(trace, config.dpp_epsilon)
    else:
        raw = 0.0
    reg = config.reg_weight * raw
    comps = LossComponents(task=task, aux=aux, reg=reg)
    return comps.total, comps


@dataclass
class MoEGradients:
    w_g: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray


def _reg_output_grad(trace, config):
    """d(reg_weight * regularizer)/d(expert_outputs), shape (B, k, C)."""
    b = trace.batch_size
    scale = config.reg_weight
    if config.reg_kind == "none" or scale == 0.0:
        return np.zeros_like(trace.expert_outputs)
    if config.reg_kind == "ncl":
        pi = _softmax_rows(trace.expert_outputs.reshape(-1, trace.expert_outputs.shape[2]))
        pi = pi.reshape(trace.expert_outputs.shape)
        d = pi - pi.mean(axis=1, keepdims=True)
        g = -2.0 * d
        dot = np.einsum("bkc,bkc->bk", g, pi)[..., None]
        return scale * (pi * (g - dot)) / b
    n, norms, ok = _normalized_outputs(trace)
    gram = np.einsum("bic,bjc->bij", n, n)
    k = gram.shape[1]
    if config.reg_kind == "ortho":
        off = gram.copy()
        off[:, np.arange(k), np.arange(k)] = 0.0
        dn = 4.0 * np.einsum("bij,bjc->bic", off, n)
    else:  # dpp
        shifted = gram.copy()
        shifted[:, np.arange(k), np.arange(k)] += config.dpp_epsilon
        dn = np.empty_like(n)
        for s in range(n.shape[0]):
            dn[s] = -2.0 * np.linalg.solve(shifted[s], n[s])
    # back through row normalization: (I - n n^T) dn / ||y||
    proj = dn - n * np.einsum("bkc,bkc->bk", dn, n)[..., None]
    return scale * np.where(ok, proj / np.where(ok, norms, 1.0), 0.0) / b


def backward(params, trace, labels, config):
    """Analytic gradients of total_loss for every parameter tensor.

    Top-k selection is a fixed index set; the load-balance term's
    selection frequencies are treated as constants, so its gradient flows
    only through the dense router probabilities.
    """
    labels = np.asarray(labels)
    b = trace.batch_size
    e_count, k = config.experts, config.active_k

    onehot = np.zeros((b, config.classes))
    onehot[np.arange(b), labels] = 1.0
    g_logits = (trace.class_probs - onehot) / b

    d_outputs = trace.gates[..., None] * g_logits[:, None, :]
    d_outputs = d_outputs + _reg_output_grad(trace, config)
    d_gates = np.einsum("bc,bkc->bk", g_logits, trace.expert_outputs)

    # renormalized gates w = p_sel / s: dL/dp_m = (dL/dw_m - sum_n dL/dw_n w_n) / s
    active = np.take_along_axis(trace.dense_probs, trace.selections, axis=1)
    mass = active.sum(axis=1, keepdims=True)
    d_active = (d_gates - (d_gates * trace.gates).sum(axis=1, keepdims=True)) / mass
    d_probs = np.zeros_like(trace.dense_probs)
    np.put_along_axis(d_probs, trace.selections, d_active, axis=1)

    if config.aux_weight > 0:
        freqs = np.zeros(e_count)
        np.add.at(freqs, trace.selections.ravel(), 1.0)
        freqs /= b
        d_probs = d_probs + config.aux_weight * e_count * freqs[None, :] / b

    # full softmax Jacobian: dh = p * (dp - <dp, p>)
    dot = np.einsum("be,be->b", d_probs, trace.dense_probs)[:, None]
    d_h = trace.dense_probs * (d_probs - dot)
    d_w_g = d_h.T @ trace.x

    d_w_in = np.zeros_like(params.w_in)
    d_w_out = np.zeros_like(params.w_out)
    for e in range(e_count):
        entry = trace.expert_cache[e]
        if entry is None:
            continue
        rows, slots, u, a = entry
        gy = d_outputs[rows, slots]
        d_w_out[e] = gy.T @ a
        du = gelu_grad(u) * (gy @ params.w_out[e])
        d_w_in[e] = du.T @ trace.x[rows]
    grads = MoEGradients(w_g=d_w_g, w_in=d_w_in, w_out=d_w_out)
    for arr in (grads.w_g, grads.w_in, grads.w_out):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("backward pass produced non-finite gradients")
    return grads


def adamw_step(params, grads, config):
    """Decoupled weight decay + bias-corrected adaptive moments, in place."""
    params.step += 1
    t = params.step
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for name in ("w_g", "w_in", "w_out"):
        w = getattr(params, name)
        g = getattr(grads, name)
        m = getattr(params, "m_" + name)
        v = getattr(params, "v_" + name)
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g**2
        w -= config.lr * config.weight_decay * w
        w -= config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
    return params


def dense_expert_outputs(params, probe):
    """(E, P*C) matrix: every expert's outputs on the probe, routing ignored."""
    probe = np.asarray(probe, dtype=float)
    e_count = params.w_g.shape[0]
    rows = np.empty((e_count, probe.shape[0] * params.w_out.shape[1]))
    for e in range(e_count):
        y = gelu(probe @ params.w_in[e].T) @ params.w_out[e].T
        rows[e] = y.ravel()
    return rows


def effective_rank(params, probe_batch):
    """exp(entropy of trace-normalized singular values); in [1, E].

    1 means the experts collapsed onto a single direction in function
    space, E means they occupy E orthogonal directions with equal energy.
    """
    m = dense_expert_outputs(params, probe_batch)
    if not np.any(m):
        raise DegenerateProbeError("all experts output exactly zero on the probe")
    sv = np.linalg.svd(m, compute_uv=False)
    sv = sv / sv.sum()
    sv = sv[sv > 0]
    return float(np.exp(-np.sum(sv * np.log(sv))))


def expert_coherence(params, probe_batch):
    """Largest |cosine| between two experts' probe responses."""
    m = dense_expert_outputs(params, probe_batch)
    norms = np.linalg.norm(m, axis=1)
    keep = norms >= 1e-12
    if keep.sum() < 2:
        return 1.0
    n = m[keep] / norms[keep, None]
    g = np.abs(n @ n.T)
    np.fill_diagonal(g, 0.0)
    return float(min(g.max(), 1.0))


def specialization_heatmap(params, config, features, labels):
    """(E, C) matrix: fraction of class-c samples that route to expert e.

    Every sample selects exactly k experts, so each column sums to k.
    """
    labels = np.asarray(labels)
    heat = np.zeros((config.experts, config.classes))
    counts = np.bincount(labels, minlength=config.classes).astype(float)
    for start in range(0, len(labels), 512):
        trace = forward(params, config, features[start:start + 512])
        batch_labels = labels[start:start + 512]
        for row in range(trace.batch_size):
            heat[trace.selections[row], batch_labels[row]] += 1.0
    nonzero = counts > 0
    heat[:, nonzero] /= counts[nonzero]
    return heat


def ambiguity_decomposition(expert_outputs, target):
    """Ensemble error = mean individual error - ambiguity, verified.

    `expert_outputs` is (k,) of scalars or (k, C); the ensemble is their
    unweighted mean. Returns (ensemble_err, mean_individual_err,
    ambiguity, gap) with gap the numerical defect of the identity.
    """
    y = np.asarray(expert_outputs, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    target = np.asarray(target, dtype=float).reshape(-1)
    if y.ndim != 2 or y.shape[0] < 1 or y.shape[1] != target.size:
        raise InvalidShapeError("need k outputs matching the target dimension")
    ens = y.mean(axis=0)
    ens_err = float(np.sum((ens - target) ** 2))
    mean_ind = float(np.mean(np.sum((y - target) ** 2, axis=1)))
    ambiguity = float(np.mean(np.sum((y - ens) ** 2, axis=1)))
    gap = abs(ens_err - (mean_ind - ambiguity))
    return ens_err, mean_ind, ambiguity, gap


@dataclass(frozen=True)
class TrainReport:
    """Per-epoch trajectory of one fold; row 0 is the untrained model."""

    fold: int
    config: MoEConfig
    epoch: np.ndarray
    loss_task: np.ndarray
    loss_aux: np.ndarray
    loss_reg: np.ndarray
    test_acc: np.ndarray
    eff_rank: np.ndarray
    coherence: np.ndarray
    marg_entropy: np.ndarray
    cond_entropy: np.ndarray
    collision_mass: np.ndarray
    heatmap: np.ndarray  # (E, C) on the test split, final params

    def __post_init__(self):
        n = len(self.epoch)
        for f in fields(self):
            if f.name in ("fold", "config"):
                continue
            dtype = np.int64 if f.name == "epoch" else np.float64
            arr = _frozen_array(getattr(self, f.name), dtype=dtype)
            object.__setattr__(self, f.name, arr)
            if f.name != "heatmap" and len(arr) != n:
                raise InvalidShapeError(f"{f.name} length disagrees with epoch axis")
        if np.any(self.test_acc < 0) or np.any(self.test_acc > 1):
            raise InvalidShapeError("accuracy must lie in [0, 1]")
        e = self.config.experts
        if np.any(self.eff_rank < 1 - 1e-9) or np.any(self.eff_rank > e + 1e-9):
            raise InvalidShapeError("effective rank must lie in [1, E]")
        if np.any(self.heatmap < 0):
            raise InvalidShapeError("heatmap entries must be nonnegative")

    @property
    def final_accuracy(self):
        return float(self.test_acc[-1])


def _eval_metrics(params, config, test_x, test_y):
    """Accuracy plus routing statistics over the test split, chunked."""
    correct = 0
    probs_chunks, sel_chunks = [], []
    audit_done = False
    for start in range(0, len(test_y), 512):
        trace = forward(params, config, test_x[start:start + 512])
        pred = np.argmax(trace.logits, axis=1)
        correct += int(np.sum(pred == test_y[start:start + 512]))
        probs_chunks.append(np.asarray(trace.dense_probs))
        sel_chunks.append(np.asarray(trace.selections))
        if not audit_done:
            for row in range(min(8, trace.batch_size)):
                target = np.zeros(config.classes)
                target[test_y[start + row]] = 1.0
                _, _, _, gap = ambiguity_decomposition(trace.expert_outputs[row], target)
                assert gap <= 1e-10, "ambiguity identity violated"
            audit_done = True
    batch = RoutingBatch(dense_probs=np.vstack(probs_chunks),
                         selections=np.vstack(sel_chunks))
    p_bar = mean_routing_probs(batch)
    collision = float(np.sum(p_bar.probs**2))
    assert collision >= 1.0 / config.experts - 1e-12, "collision mass fell below 1/E"
    cond = topk_conditional_entropy(batch)  # asserts <= log k internally
    return {
        "test_acc": correct / len(test_y),
        "marg_entropy": entropy(p_bar.probs),
        "cond_entropy": cond,
        "collision_mass": collision,
    }


def _eval_loss(params, config, x, y):
    """Sample-weighted mean loss components without parameter updates."""
    sums = np.zeros(3)
    for start in range(0, len(y), 512):
        trace = forward(params, config, x[start:start + 512])
        _, comps = total_loss(trace, y[start:start + 512], config)
        sums += trace.batch_size * np.array([comps.task, comps.aux, comps.reg])
    return sums / len(y)


def train_fold(config, train, test, fold=0):
    """Train on one fold and log metrics per epoch on the held-out split.

    `train` and `test` are (features, labels) pairs. Deterministic given
    (config.seed, fold): initialization and epoch shuffles come from
    streams keyed by them alone.
    """
    train_x, train_y = (np.asarray(a) for a in train)
    test_x, test_y = (np.asarray(a) for a in test)
    for x, y in ((train_x, train_y), (test_x, test_y)):
        if x.ndim != 2 or x.shape[1] != config.input_dim or len(y) != len(x):
            raise InvalidShapeError("split shapes do not match the config")
    all_y = np.concatenate([train_y, test_y])
    if all_y.min() < 0 or all_y.max() >= config.classes:
        raise InvalidShapeError("labels out of range for configured classes")

    params = init_params(config, stream(config.seed, "init", fold))
    probe = train_x[:min(_PROBE_SIZE, len(train_x))]

    rows = {name: [] for name in ("loss_task", "loss_aux", "loss_reg", "test_acc",
                                  "eff_rank", "coherence", "marg_entropy",
                                  "cond_entropy", "collision_mass")}

    def record(loss_triplet):
        metrics = _eval_metrics(params, config, test_x, test_y)
        rows["loss_task"].append(loss_triplet[0])
        rows["loss_aux"].append(loss_triplet[1])
        rows["loss_reg"].append(loss_triplet[2])
        rows["test_acc"].append(metrics["test_acc"])
        rows["eff_rank"].append(effective_rank(params, probe))
        rows["coherence"].append(expert_coherence(params, probe))
        rows["marg_entropy"].append(metrics["marg_entropy"])
        rows["cond_entropy"].append(metrics["cond_entropy"])
        rows["collision_mass"].append(metrics["collision_mass"])

    record(_eval_loss(params, config, train_x, train_y))
    n = len(train_y)
    for epoch in range(1, config.epochs + 1):
        perm = stream(config.seed, "shuffle", fold, epoch).permutation(n)
        sums = np.zeros(3)
        try:
            for start in range(0, n, config.batch):
                idx = perm[start:start + config.batch]
                trace = forward(params, config, train_x[idx])
                _, comps = total_loss(trace, train_y[idx], config)
                grads = backward(params, trace, train_y[idx], config)
                adamw_step(params, grads, config)
                sums += idx.size * np.array([comps.task, comps.aux, comps.reg])
        except NonFiniteError as exc:
            raise NonFiniteError(f"fold {fold} diverged at epoch {epoch}: {exc}") from None
        record(sums / n)

    return TrainReport(
        fold=fold, config=config,
        epoch=np.arange(config.epochs + 1),
        heatmap=specialization_heatmap(params, config, test_x, test_y),
        **{name: np.array(vals) for name, vals in rows.items()},
    )


def stratified_folds(labels, folds, seed):
    """Assign each sample a fold id, class-balanced within +-1."""
    labels = np.asarray(labels)
    if folds < 2:
        raise InvalidConfigError("need at least 2 folds")
    gen = stream(seed, "folds")
    assignment = np.empty(len(labels), dtype=int)
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        idx = idx[gen.permutation(idx.size)]
        assignment[idx] = np.arange(idx.size) % folds
    return assignment


@dataclass(frozen=True)
class AggregateReport:
    folds: int
    final_accuracies: tuple
    mean_accuracy: float
    std_accuracy: float
    mean_eff_rank: np.ndarray  # per-epoch mean across folds

    def __post_init__(self):
        object.__setattr__(self, "mean_eff_rank", _frozen_array(self.mean_eff_rank))


def _run_fold(config, features, labels, assignment, fold):
    mask = assignment == fold
    return train_fold(config,
                      (features[~mask], labels[~mask]),
                      (features[mask], labels[mask]),
                      fold=fold)


def cross_validate(config, dataset, folds=10, workers=1):
    """Stratified k-fold training; returns (reports, aggregate).

    Fold results are independent of `workers` because all randomness is
    keyed by (seed, fold).
    """
    features = np.asarray(dataset.features)
    labels = np.asarray(dataset.labels)
    assignment = stratified_folds(labels, folds, config.seed)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_fold, config, features, labels, assignment, f)
                       for f in range(folds)]
            reports = [fut.result() for fut in futures]
    else:
        reports = [_run_fold(config, features, labels, assignment, f)
                   for f in range(folds)]
    reports.sort(key=lambda r: r.fold)
    accs = tuple(r.final_accuracy for r in reports)
    aggregate = AggregateReport(
        folds=folds,
        final_accuracies=accs,
        mean_accuracy=float(np.mean(accs)),
        std_accuracy=float(np.std(accs)),
        mean_eff_rank=np.mean([r.eff_rank for r in reports], axis=0),
    )
    return reports, aggregate


def write_run_csv(path, reports):
    """One row per (fold, epoch); 6 significant digits throughout."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "epoch", "loss_task", "loss_aux", "loss_reg",
                         "test_acc", "eff_rank", "coherence", "marg_entropy"])
        for r in reports:
            for i in range(len(r.epoch)):
                writer.writerow([r.fold, int(r.epoch[i])] + [
                    f"{v:.6g}" for v in (r.loss_task[i], r.loss_aux[i], r.loss_reg[i],
                                         r.test_acc[i], r.eff_rank[i], r.coherence[i],
                                         r.marg_entropy[i])])


def write_heatmap_csv(path, heatmap):
    heatmap = np.asarray(heatmap)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["expert", "class", "freq"])
        for e in range(heatmap.shape[0]):
            for c in range(heatmap.shape[1]):
                writer.writerow([e, c, f"{heatmap[e, c]:.6g}"])
