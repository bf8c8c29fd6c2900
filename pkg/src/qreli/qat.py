"""Desk-scale quantization-aware training of a linear head over frozen embeddings.

The trainable artifact is a stack of linear layers. Each layer's base path is
fake-quantized (weights and input activations, symmetric grids) while a
parallel low-rank adapter runs at full precision on the same input:

    y = fq_a(x) @ fq_w(W).T + b + (alpha / r) * (x @ A.T) @ B.T

Backward uses the straight-through estimator for the rounding step and, when
learned step sizes are enabled, the LSQ scale gradient with the stabilizing
factor 1 / sqrt(N * Q_max), N being the element count of the quantized tensor.
The task loss is cross-entropy of cosine logits against frozen class-text
anchors; optional distillation pulls the head toward a frozen full-precision
copy of itself.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import make_rng
from .errors import DimensionMismatchError, NumericalDivergenceError
from .metrics import ece as ece_report
from .quantize import round_half_away
from .zeroshot import EmbeddingSet, LogitSet, accuracy

PARAM_KEYS = ("weight", "bias", "lora_a", "lora_b", "s_w", "s_a")
MATRIX_KEYS = ("weight", "lora_a", "lora_b")  # weight decay applies here only
SCALE_KEYS = ("s_w", "s_a")
SCALE_FLOOR = 1e-8
QUANT_OFF_BITS = 32  # bits >= 32 disables fake quantization


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass(frozen=True)
class DistillConfig:
    kind: str = "none"  # "none" | "mse_features" | "kl"
    alpha: float = 0.5  # loss mix weight, 0..1
    tau: float = 1.0  # softening temperature for the KL variant

    def __post_init__(self):
        if self.kind not in ("none", "mse_features", "kl"):
            raise ValueError(f"unknown distillation kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("distillation alpha must be in [0, 1]")
        if self.tau <= 0:
            raise ValueError("distillation tau must be positive")


@dataclass(frozen=True)
class QatConfig:
    layer_dims: tuple
    bits_w: int = 8
    bits_a: int = 8
    use_lsq: bool = True
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lr_base: float = 5e-5
    lr_lsq_scale: float = 1e-7
    optimizer: AdamWConfig = AdamWConfig()
    steps: int = 100
    batch: int = 100
    unique_samples: Optional[int] = None  # None = use every training sample
    distill: DistillConfig = DistillConfig()
    seed: int = 0
    init: str = "identity"  # "identity" | "random"

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 2:
            raise ValueError("layer_dims needs an input and an output dimension")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be >= 1")
        for bits in (self.bits_w, self.bits_a):
            if bits < 2:
                raise ValueError("bit-widths below 2 are not supported")
        if self.init not in ("identity", "random"):
            raise ValueError(f"unknown init {self.init!r}")

    @property
    def quant_w(self) -> bool:
        return self.bits_w < QUANT_OFF_BITS

    @property
    def quant_a(self) -> bool:
        return self.bits_a < QUANT_OFF_BITS

    @property
    def qmax_w(self) -> int:
        return 2 ** (self.bits_w - 1) - 1

    @property
    def qmax_a(self) -> int:
        return 2 ** (self.bits_a - 1) - 1


@dataclass
class LayerState:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    lora_a: np.ndarray  # [rank, in]
    lora_b: np.ndarray  # [out, rank]
    s_w: float
    s_a: float


@dataclass
class LayerGrads:
    weight: np.ndarray
    bias: np.ndarray
    lora_a: np.ndarray
    lora_b: np.ndarray
    s_w: float
    s_a: float


@dataclass
class QatState:
    layers: list
    opt_m: list  # per layer: dict key -> first moment
    opt_v: list  # per layer: dict key -> second moment
    step: int = 0

    def clone(self) -> "QatState":
        return copy.deepcopy(self)


@dataclass
class LayerTape:
    x_in: np.ndarray  # full-precision layer input (post-ReLU)
    relu_mask: Optional[np.ndarray]  # None for the first layer
    a_fq: np.ndarray
    a_q: Optional[np.ndarray]
    a_v: Optional[np.ndarray]
    a_mask: Optional[np.ndarray]
    w_fq: np.ndarray
    w_q: Optional[np.ndarray]
    w_v: Optional[np.ndarray]
    w_mask: Optional[np.ndarray]
    lora_h: np.ndarray
    lora_a: np.ndarray
    lora_b: np.ndarray


@dataclass
class ForwardTape:
    cfg: QatConfig
    layers: list
    output: np.ndarray


def _fq_with_tape(x: np.ndarray, s: float, qmax: int):
    """Symmetric fake quantization keeping the pieces backward needs."""
    v = x / s
    r = round_half_away(v)
    mask = np.abs(r) <= qmax
    q = np.clip(r, -qmax, qmax)
    return q * s, q, v, mask


def grad_scale_factor(n_elements: int, qmax: int) -> float:
    """LSQ gradient stabilizer 1 / sqrt(N * Q_max)."""
    return 1.0 / math.sqrt(n_elements * qmax)


def init_state(cfg: QatConfig, calib_x: Optional[np.ndarray] = None) -> QatState:
    """Build the head: identity-ish base weights, LoRA A ~ N(0, 0.02^2), B = 0.

    Weight scales start at max|W| / qmax so on-grid weights survive exactly.
    With learned step sizes, activation scales are calibrated on ``calib_x``
    propagated through the full-precision head using 2 * mean|x| / sqrt(qmax);
    without a calibration batch they default to 1.0.
    """
    rng = make_rng(cfg.seed)
    dims = cfg.layer_dims
    layers = []
    for i in range(len(dims) - 1):
        d_in, d_out = dims[i], dims[i + 1]
        if cfg.init == "identity":
            weight = np.eye(d_out, d_in)
        else:
            weight = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_out, d_in))
        lora_a = rng.normal(0.0, 0.02, size=(cfg.lora_rank, d_in))
        lora_b = np.zeros((d_out, cfg.lora_rank))
        amax = float(np.abs(weight).max())
        s_w = amax / cfg.qmax_w if (cfg.quant_w and amax > 0) else 1.0
        layers.append(
            LayerState(
                weight=weight,
                bias=np.zeros(d_out),
                lora_a=lora_a,
                lora_b=lora_b,
                s_w=s_w,
                s_a=1.0,
            )
        )
    if cfg.use_lsq and cfg.quant_a and calib_x is not None:
        h = np.asarray(calib_x, dtype=np.float64)
        for i, layer in enumerate(layers):
            if i > 0:
                h = np.maximum(h, 0.0)
            mean_abs = float(np.abs(h).mean())
            layer.s_a = (
                2.0 * mean_abs / math.sqrt(cfg.qmax_a) if mean_abs > 0 else 1.0
            )
            h = h @ layer.weight.T + layer.bias
    zeros_like = lambda layer: {k: np.zeros_like(getattr(layer, k)) if k not in SCALE_KEYS else 0.0 for k in PARAM_KEYS}
    return QatState(
        layers=layers,
        opt_m=[zeros_like(l) for l in layers],
        opt_v=[zeros_like(l) for l in layers],
    )


def forward(state: QatState, cfg: QatConfig, x: np.ndarray):
    """Run the quantized head; returns (output, tape) for the matching backward."""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != cfg.layer_dims[0]:
        raise DimensionMismatchError(
            f"input shape {h.shape} does not match head input dim {cfg.layer_dims[0]}"
        )
    if not np.all(np.isfinite(h)):
        raise NumericalDivergenceError("non-finite values in head input")
    tapes = []
    for i, layer in enumerate(state.layers):
        relu_mask = None
        if i > 0:
            relu_mask = h > 0.0
            h = np.where(relu_mask, h, 0.0)
        x_in = h
        if cfg.quant_a:
            if cfg.use_lsq:
                s_a = layer.s_a
            else:
                amax = float(np.abs(x_in).max())
                s_a = amax / cfg.qmax_a if amax > 0 else 1.0
            a_fq, a_q, a_v, a_mask = _fq_with_tape(x_in, s_a, cfg.qmax_a)
        else:
            a_fq, a_q, a_v, a_mask = x_in, None, None, None
        if cfg.quant_w:
            s_w = layer.s_w if cfg.use_lsq else (
                float(np.abs(layer.weight).max()) / cfg.qmax_w
                if np.abs(layer.weight).max() > 0
                else 1.0
            )
            w_fq, w_q, w_v, w_mask = _fq_with_tape(layer.weight, s_w, cfg.qmax_w)
        else:
            w_fq, w_q, w_v, w_mask = layer.weight, None, None, None
        lora_h = x_in @ layer.lora_a.T
        h = (
            a_fq @ w_fq.T
            + layer.bias
            + (cfg.lora_alpha / cfg.lora_rank) * (lora_h @ layer.lora_b.T)
        )
        if not np.all(np.isfinite(h)):
            raise NumericalDivergenceError(f"non-finite activations after layer {i}")
        tapes.append(
            LayerTape(
                x_in=x_in,
                relu_mask=relu_mask,
                a_fq=a_fq,
                a_q=a_q,
                a_v=a_v,
                a_mask=a_mask,
                w_fq=w_fq,
                w_q=w_q,
                w_v=w_v,
                w_mask=w_mask,
                lora_h=lora_h,
                lora_a=layer.lora_a,
                lora_b=layer.lora_b,
            )
        )
    return h, ForwardTape(cfg=cfg, layers=tapes, output=h)


def backward(tape: ForwardTape, grad_y: np.ndarray) -> list:
    """Backpropagate dL/dy through the tape; returns per-layer LayerGrads.

    Rounding is bypassed with the straight-through estimator (unit gradient
    inside the clamp range, zero outside). Scale gradients follow LSQ:
    (round(v) - v) in range, the saturated clamp bound outside, times
    1 / sqrt(N * Q_max).
    """
    cfg = tape.cfg
    g = np.asarray(grad_y, dtype=np.float64)
    if g.shape != tape.output.shape:
        raise DimensionMismatchError("grad_y shape does not match forward output")
    lora_gain = cfg.lora_alpha / cfg.lora_rank
    grads = [None] * len(tape.layers)
    for i in range(len(tape.layers) - 1, -1, -1):
        lt = tape.layers[i]
        d_bias = g.sum(axis=0)
        d_wfq = g.T @ lt.a_fq
        if lt.w_q is not None:
            d_weight = d_wfq * lt.w_mask
            ds_w = 0.0
            if cfg.use_lsq:
                local = lt.w_q - lt.w_v * lt.w_mask
                ds_w = grad_scale_factor(lt.w_v.size, cfg.qmax_w) * float(
                    np.sum(d_wfq * local)
                )
        else:
            d_weight = d_wfq
            ds_w = 0.0
        d_afq = g @ lt.w_fq
        d_lora_h = lora_gain * (g @ lt.lora_b)
        d_lora_b = lora_gain * (g.T @ lt.lora_h)
        d_lora_a = d_lora_h.T @ lt.x_in
        dx = d_lora_h @ lt.lora_a
        if lt.a_q is not None:
            dx = dx + d_afq * lt.a_mask
            ds_a = 0.0
            if cfg.use_lsq:
                local = lt.a_q - lt.a_v * lt.a_mask
                ds_a = grad_scale_factor(lt.a_v.size, cfg.qmax_a) * float(
                    np.sum(d_afq * local)
                )
        else:
            dx = dx + d_afq
            ds_a = 0.0
        if lt.relu_mask is not None:
            dx = dx * lt.relu_mask
        grads[i] = LayerGrads(
            weight=d_weight,
            bias=d_bias,
            lora_a=d_lora_a,
            lora_b=d_lora_b,
            s_w=ds_w,
            s_a=ds_a,
        )
        g = dx
    return grads


def _normalize_rows(y: np.ndarray):
    with np.errstate(over="ignore", invalid="ignore"):
        norms = np.linalg.norm(y, axis=1, keepdims=True)
    if not np.all(np.isfinite(norms)):
        raise NumericalDivergenceError("head output norm overflowed")
    norms = np.maximum(norms, 1e-30)
    return y / norms, norms


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(
    state: QatState,
    cfg: QatConfig,
    x: np.ndarray,
    labels: np.ndarray,
    class_text: np.ndarray,
    logit_scale: float,
    teacher_y: Optional[np.ndarray] = None,
):
    """Total training loss and parameter gradients for one batch.

    loss = (1 - alpha) * CE(cosine logits, labels) + alpha * distill, where the
    distillation target is the output of the frozen full-precision head.
    """
    y, tape = forward(state, cfg, x)
    text = np.asarray(class_text, dtype=np.float64)
    yn, norms = _normalize_rows(y)
    logits = logit_scale * (yn @ text.T)
    labels = np.asarray(labels, dtype=np.int64)
    labeled = labels >= 0
    n_labeled = int(labeled.sum())
    alpha = cfg.distill.alpha if cfg.distill.kind != "none" else 0.0

    g_yn = np.zeros_like(yn)
    task_loss = 0.0
    if n_labeled and alpha < 1.0:
        p = _softmax(logits[labeled])
        p_true = p[np.arange(n_labeled), labels[labeled]]
        task_loss = float(np.mean(-np.log(np.maximum(p_true, 1e-300))))
        g_logits = p.copy()
        g_logits[np.arange(n_labeled), labels[labeled]] -= 1.0
        g_logits /= n_labeled
        g_full = np.zeros_like(logits)
        g_full[labeled] = g_logits
        g_yn += (1.0 - alpha) * logit_scale * (g_full @ text)

    distill_loss = 0.0
    if alpha > 0.0:
        if teacher_y is None:
            raise ValueError("distillation requires teacher outputs")
        tn, _ = _normalize_rows(np.asarray(teacher_y, dtype=np.float64))
        if cfg.distill.kind == "mse_features":
            diff = yn - tn
            distill_loss = float(np.mean(diff**2))
            g_yn += alpha * 2.0 * diff / diff.size
        else:  # kl
            tau = cfg.distill.tau
            t_logits = logit_scale * (tn @ text.T)
            ps = _softmax(logits / tau)
            pt = _softmax(t_logits / tau)
            ratio = np.log(np.maximum(pt, 1e-300)) - np.log(np.maximum(ps, 1e-300))
            distill_loss = float(np.mean(np.sum(pt * ratio, axis=1)))
            g_logits_d = (ps - pt) / (tau * logits.shape[0])
            g_yn += alpha * logit_scale * (g_logits_d @ text)

    # gradient through row normalization: g_y = (g_yn - (g_yn . yn) yn) / ||y||
    inner = np.sum(g_yn * yn, axis=1, keepdims=True)
    g_y = (g_yn - inner * yn) / norms
    grads = backward(tape, g_y)
    loss = (1.0 - alpha) * task_loss + alpha * distill_loss
    return loss, grads, y


def adamw_step(state: QatState, grads: list, cfg: QatConfig) -> QatState:
    """One decoupled-weight-decay AdamW step; advances the step counter.

    Base parameters use lr_base, learned scales use lr_lsq_scale; weight decay
    touches only the weight and LoRA matrices. Scales are re-clamped above
    1e-8 afterwards.
    """
    opt = cfg.optimizer
    state.step += 1
    t = state.step
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    for layer, lgrads, ms, vs in zip(state.layers, grads, state.opt_m, state.opt_v):
        for key in PARAM_KEYS:
            g = getattr(lgrads, key)
            if not np.all(np.isfinite(np.asarray(g))):
                raise NumericalDivergenceError(f"non-finite gradient for {key}")
            lr = cfg.lr_lsq_scale if key in SCALE_KEYS else cfg.lr_base
            wd = opt.weight_decay if key in MATRIX_KEYS else 0.0
            m = opt.beta1 * ms[key] + (1.0 - opt.beta1) * g
            v = opt.beta2 * vs[key] + (1.0 - opt.beta2) * (np.asarray(g) ** 2)
            ms[key], vs[key] = m, v
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
            value = getattr(layer, key) - update
            if wd:
                value = value - lr * wd * getattr(layer, key)
            if key in SCALE_KEYS:
                value = float(max(value, SCALE_FLOOR))
            setattr(layer, key, value)
    return state


@dataclass
class TrainResult:
    state: QatState
    timeline: list  # dict rows: step plus per-set accuracy and ECE
    columns: list
    aborted: bool = False


def evaluate_head(state: QatState, cfg: QatConfig, eval_set: EmbeddingSet) -> dict:
    """Accuracy / ECE / NLL of the quantized head on one embedding set."""
    y, _ = forward(state, cfg, eval_set.image)
    yn, _ = _normalize_rows(y)
    logits = eval_set.logit_scale * (yn @ np.asarray(eval_set.class_text, np.float64).T)
    lset = LogitSet(logits=logits.astype(np.float32), labels=eval_set.labels)
    report = ece_report(lset)
    return {"accuracy": accuracy(lset), "ece": report.ece, "nll": report.nll}


def fp32_config(cfg: QatConfig) -> QatConfig:
    return replace(cfg, bits_w=QUANT_OFF_BITS, bits_a=QUANT_OFF_BITS)


def ptq_config(cfg: QatConfig) -> QatConfig:
    """Naive PTQ view of the same head: min-max ranges, nothing learned."""
    return replace(cfg, use_lsq=False)


def train(
    cfg: QatConfig,
    train_set: EmbeddingSet,
    eval_sets: list,
    checkpoints: list,
) -> TrainResult:
    """Run the QAT schedule; deterministic given the config seed.

    Batches cycle through the first ``unique_samples`` training examples in
    order. The timeline holds one row per checkpoint step (step 0 = before any
    update). On numerical divergence training stops and the state from the
    last completed checkpoint is returned.
    """
    n = train_set.image.shape[0]
    unique = n if cfg.unique_samples is None else int(cfg.unique_samples)
    if unique < 1 or unique > n:
        raise ValueError(f"unique_samples must be in [1, {n}], got {unique}")
    x_all = np.asarray(train_set.image, dtype=np.float64)[:unique]
    labels_all = train_set.labels[:unique]

    calib = x_all[: min(cfg.batch, unique)]
    state = init_state(cfg, calib_x=calib)
    teacher_state = state.clone()
    teacher_cfg = fp32_config(cfg)
    need_teacher = cfg.distill.kind != "none" and cfg.distill.alpha > 0.0

    names = []
    for i, es in enumerate(eval_sets):
        name = str(es.meta.get("dataset", "")) or f"eval{i}"
        names.append(name)
    columns = ["step"]
    for name in names:
        columns += [f"{name}_acc", f"{name}_ece"]

    def snapshot_row(step: int) -> dict:
        row = {"step": step}
        for name, es in zip(names, eval_sets):
            res = evaluate_head(state, cfg, es)
            row[f"{name}_acc"] = res["accuracy"]
            row[f"{name}_ece"] = res["ece"]
        return row

    checkpoints = sorted(set(int(c) for c in checkpoints))
    timeline = []
    last_good = state.clone()
    if 0 in checkpoints:
        timeline.append(snapshot_row(0))
    aborted = False
    for step in range(1, cfg.steps + 1):
        start = ((step - 1) * cfg.batch) % unique
        idx = (start + np.arange(cfg.batch)) % unique
        bx = x_all[idx]
        by = labels_all[idx]
        try:
            teacher_y = None
            if need_teacher:
                teacher_y, _ = forward(teacher_state, teacher_cfg, bx)
            _, grads, _ = loss_and_grads(
                state,
                cfg,
                bx,
                by,
                train_set.class_text,
                train_set.logit_scale,
                teacher_y=teacher_y,
            )
            adamw_step(state, grads, cfg)
            if step in checkpoints:
                timeline.append(snapshot_row(step))
                last_good = state.clone()
        except NumericalDivergenceError:
            state = last_good
            aborted = True
            break
    return TrainResult(state=state, timeline=timeline, columns=columns, aborted=aborted)
