"""Self-distillation losses, AdamW, the training loop and evaluation metrics."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .mome import EEG, EMG, MIX
from .models import infer, save_checkpoint
from .signal_prep import STAGE_NAMES, UNLABELED, PatchedDataset
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

N_CLASSES = 3


@dataclass
class DistillConfig:
    tau_eeg: float = 1.0
    tau_emg: float = 3.0
    alpha: float = 0.33
    detach_teacher: bool = True
    scale_by_tau_sq: bool = False
    teacher_first: bool = False  # reversed KL argument order, for ablation
    sd_eeg_on: bool = True
    sd_emg_on: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.tau_eeg <= 0 or self.tau_emg <= 0:
            raise ValueError("temperatures must be positive")


@dataclass
class LossBreakdown:
    ce: float
    sd_eeg: float
    sd_emg: float
    total: float
    n_labeled: int


# -------------------------------------------------------------------- losses

def softmax_tau(z, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s = np.asarray(z, dtype=np.float64) / tau
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _flatten(z: Tensor) -> Tensor:
    return T.reshape(z, (-1, z.shape[-1]))


def _mask_weights(mask, n_rows: int, n_labeled: int | None) -> tuple[np.ndarray, int]:
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape[0] != n_rows:
        raise ValueError(f"mask has {mask.shape[0]} entries for {n_rows} predictions")
    count = int(mask.sum())
    denom = count if n_labeled is None else n_labeled
    w = mask / denom if denom else np.zeros(n_rows)
    return w, count


def sd_loss(
    z_student,
    z_teacher,
    tau: float,
    mask,
    *,
    detach_teacher: bool = True,
    scale_by_tau_sq: bool = False,
    teacher_first: bool = False,
    n_labeled: int | None = None,
) -> Tensor:
    """Mean over labeled rows of ``KL(p_tau(student) || p_tau(teacher))``.

    ``n_labeled`` overrides the averaging denominator, which lets a large batch
    be split into micro-batches whose losses sum to the full-batch mean.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    zs, zt = T.as_tensor(z_student), T.as_tensor(z_teacher)
    if zs.shape != zt.shape:
        raise ValueError(f"student {zs.shape} and teacher {zt.shape} logits differ in shape")
    if detach_teacher:
        zt = Tensor(zt.data)
    zs, zt = _flatten(zs), _flatten(zt)
    w, count = _mask_weights(mask, zs.shape[0], n_labeled)
    if count == 0:
        if n_labeled is None:
            log.warning("sd_loss: every sample is masked; returning 0")
        return Tensor(0.0)
    log_s = T.log_softmax(zs * (1.0 / tau), axis=-1)
    log_t = T.log_softmax(zt * (1.0 / tau), axis=-1)
    if teacher_first:
        log_s, log_t = log_t, log_s
    kl = T.sum_(T.exp(log_s) * (log_s - log_t), axis=-1)
    loss = T.sum_(kl * w)
    return loss * (tau * tau) if scale_by_tau_sq else loss


def ce_loss(z_mix, labels, mask=None, *, n_labeled: int | None = None) -> Tensor:
    """Mean negative log-likelihood of ``labels`` over labeled rows at temperature 1."""
    z = _flatten(T.as_tensor(z_mix))
    labels = np.asarray(labels).reshape(-1)
    if mask is None:
        mask = labels != UNLABELED
    w, count = _mask_weights(mask, z.shape[0], n_labeled)
    if count == 0:
        if not n_labeled:
            raise ValueError("ce_loss: no labeled samples")
        return Tensor(0.0)
    onehot = np.zeros(z.shape)
    rows = np.flatnonzero(w)
    onehot[rows, labels[rows]] = w[rows]
    return -T.sum_(T.log_softmax(z, axis=-1) * onehot)


def combine_losses(ce: float, sd_eeg: float, sd_emg: float, alpha: float) -> float:
    return (1.0 - alpha) * ce + (alpha / 2.0) * (sd_eeg + sd_emg)


def total_loss(ce, sd_eeg, sd_emg, cfg: DistillConfig, n_labeled: int = 0):
    """``(1 - alpha) * ce + alpha / 2 * (sd_eeg + sd_emg)``.

    Accepts floats or tensors; returns ``(total, LossBreakdown)`` where
    ``total`` keeps the input type.
    """
    a = cfg.alpha
    if any(isinstance(v, Tensor) for v in (ce, sd_eeg, sd_emg)):
        total = T.as_tensor(ce) * (1.0 - a) + (T.as_tensor(sd_eeg) + T.as_tensor(sd_emg)) * (a / 2.0)
        vals = [float(T.as_tensor(v).data) for v in (ce, sd_eeg, sd_emg)]
        breakdown = LossBreakdown(*vals, total=float(total.data), n_labeled=n_labeled)
        return total, breakdown
    total = combine_losses(ce, sd_eeg, sd_emg, a)
    return total, LossBreakdown(float(ce), float(sd_eeg), float(sd_emg), float(total), n_labeled)


# ----------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(named_params, state: OptimState) -> OptimState:
    """Bias-corrected Adam update with decoupled weight decay, in place.

    A missing ``.grad`` counts as zero. Any non-finite gradient aborts the step
    before a single parameter is touched.
    """
    named_params = list(named_params)
    grads = {}
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}; step aborted")
        grads[name] = g
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in named_params:
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ValueError(f"optimizer moment for {name!r} has shape {m.shape}, parameter {p.data.shape}")
        p.data = p.data - state.lr * state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    pathway: str
    accuracy: float
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    confusion: list[list[int]]  # rows: truth, columns: prediction
    n_labeled: int
    n_masked: int
    absent_classes: list[str]
    f1_average: str = "macro"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def format(self) -> str:
        lines = [
            f"pathway: {self.pathway}",
            f"accuracy: {self.accuracy:.4f}",
            f"macro_f1: {self.macro_f1:.4f}",
            f"labeled: {self.n_labeled}  masked: {self.n_masked}",
            "class      precision  recall  f1",
        ]
        for i, name in enumerate(STAGE_NAMES):
            lines.append(f"{name:<10} {self.precision[i]:9.4f} {self.recall[i]:7.4f} {self.f1[i]:6.4f}")
        lines.append("confusion (rows=truth, cols=pred):")
        lines.extend("  " + " ".join(f"{v:6d}" for v in row) for row in self.confusion)
        if self.absent_classes:
            lines.append("absent classes (f1 counted as 0): " + ", ".join(self.absent_classes))
        return "\n".join(lines)


def confusion_matrix(pred, truth, n_classes: int = N_CLASSES) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    keep = truth != UNLABELED
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (truth[keep], pred[keep]), 1)
    return out


def report_from_confusion(conf, pathway: str = "", n_masked: int = 0) -> EvalReport:
    conf = np.asarray(conf, dtype=np.int64)
    total = int(conf.sum())
    if total == 0:
        raise ValueError("no labeled samples to evaluate")
    tp = np.diag(conf).astype(np.float64)
    pred_count = conf.sum(axis=0)
    true_count = conf.sum(axis=1)
    precision = np.divide(tp, pred_count, out=np.zeros_like(tp), where=pred_count > 0)
    recall = np.divide(tp, true_count, out=np.zeros_like(tp), where=true_count > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    absent = [STAGE_NAMES[i] for i in range(len(tp)) if pred_count[i] == 0 and true_count[i] == 0]
    return EvalReport(
        pathway=pathway,
        accuracy=float(tp.sum() / total),
        macro_f1=float(f1.mean()),
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        confusion=conf.tolist(),
        n_labeled=total,
        n_masked=int(n_masked),
        absent_classes=absent,
    )


def predict_dataset(model, data: PatchedDataset, pathway: str = "auto", batch_size: int = 256):
    """Per-epoch predicted labels for every epoch of ``data``; returns ``(pathway, labels)``."""
    if model.kind == "epoch":
        pred = infer(model, data.x, pathway, batch_size)
        return pred.pathway, pred.labels
    starts = data.cover_windows(model.config.K)
    out = np.full(len(data.labels), -1, dtype=np.int64)
    used = None
    seq_batch = max(1, batch_size // model.config.K)
    for lo in range(0, len(starts), seq_batch):
        chunk = starts[lo : lo + seq_batch]
        pred = infer(model, data.window_x(chunk), pathway, seq_batch)
        used = pred.pathway
        for s, labels in zip(chunk, pred.labels):
            span = slice(s, s + model.config.K)
            fresh = out[span] < 0
            out[span][fresh] = labels[fresh]
    return used, out


def evaluate(model, data: PatchedDataset, pathway: str = "auto", batch_size: int = 256) -> EvalReport:
    used, pred = predict_dataset(model, data, pathway, batch_size)
    conf = confusion_matrix(pred, data.labels)
    n_masked = int((data.labels == UNLABELED).sum())
    return report_from_confusion(conf, used, n_masked)


# ------------------------------------------------------------------ training

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 256
    micro_batch: int = 64
    eval_interval: int = 100
    eval_pathways: tuple[str, ...] = (MIX,)
    stop_at_accuracy: float | None = None
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_wall_time: bool = True


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    log: list[dict]
    evals: list[dict]
    optimizer: OptimState
    steps_run: int
    stopped_early: bool = False

    def final_eval(self, pathway: str = MIX) -> EvalReport | None:
        for rec in reversed(self.evals):
            if pathway in rec["reports"]:
                return rec["reports"][pathway]
        return None


def _batch_forward_losses(model, data: PatchedDataset, idx, labels, n_labeled, cfg: DistillConfig, rng):
    pathways = [MIX]
    if cfg.sd_eeg_on:
        pathways.append(EEG)
    if cfg.sd_emg_on:
        pathways.append(EMG)
    logits = model.forward(data.batch_x(idx), tuple(pathways), rng=rng)
    mask = labels != UNLABELED
    ce = ce_loss(logits[MIX], labels, mask, n_labeled=n_labeled)
    sd = {}
    for m, on, tau in ((EEG, cfg.sd_eeg_on, cfg.tau_eeg), (EMG, cfg.sd_emg_on, cfg.tau_emg)):
        if on:
            sd[m] = sd_loss(
                logits[m],
                logits[MIX],
                tau,
                mask,
                detach_teacher=cfg.detach_teacher,
                scale_by_tau_sq=cfg.scale_by_tau_sq,
                teacher_first=cfg.teacher_first,
                n_labeled=n_labeled,
            )
        else:
            sd[m] = Tensor(0.0)
    return total_loss(ce, sd[EEG], sd[EMG], cfg)


def train(
    model,
    train_data: PatchedDataset,
    test_data: PatchedDataset | None,
    distill: DistillConfig,
    cfg: TrainConfig,
    seed: int = 0,
    *,
    log_path=None,
    checkpoint_path=None,
    on_eval: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Run ``cfg.steps`` AdamW steps of the self-distilled objective.

    Every step draws ``batch_size`` samples without replacement from a seeded
    permutation (reshuffled when exhausted), accumulates gradients over
    micro-batches and logs a :class:`LossBreakdown`. Evaluation on
    ``test_data`` runs every ``eval_interval`` steps and after the last step.
    """
    if len(train_data) == 0:
        raise TrainingError("training split is empty")
    if test_data is not None and len(test_data) == 0:
        raise TrainingError("evaluation split is empty")
    rng = np.random.default_rng(seed)
    drop_rng = np.random.default_rng([seed, 1])
    params = list(model.named_parameters())
    opt = OptimState(cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
    log_fh = open(log_path, "w") if log_path else None
    records, evals = [], []
    order = np.empty(0, dtype=np.int64)
    cursor = 0
    stopped = False
    step = 0

    def run_eval(step_no: int) -> dict:
        reports = {p: evaluate(model, test_data, p) for p in cfg.eval_pathways}
        rec = {"step": step_no, "reports": reports}
        evals.append(rec)
        if on_eval:
            on_eval(step_no, reports)
        log.info(
            "step %d eval %s",
            step_no,
            " ".join(f"{p}={r.accuracy:.4f}" for p, r in reports.items()),
        )
        return reports

    try:
        for step in range(1, cfg.steps + 1):
            t0 = time.perf_counter()
            if cursor + cfg.batch_size > len(order):
                order = rng.permutation(len(train_data))
                cursor = 0
            idx = np.sort(order[cursor : cursor + cfg.batch_size])
            cursor += cfg.batch_size
            labels = train_data.batch_labels(idx)
            n_labeled = int((labels != UNLABELED).sum())
            if n_labeled == 0:
                log.warning("step %d: batch has no labeled samples; skipped", step)
                continue
            model.zero_grad()
            acc = np.zeros(4)
            per_sample = labels.reshape(len(idx), -1)
            for lo in range(0, len(idx), cfg.micro_batch):
                sl = slice(lo, lo + cfg.micro_batch)
                with Tape() as tape:
                    total, parts = _batch_forward_losses(
                        model, train_data, idx[sl], per_sample[sl], n_labeled, distill, drop_rng
                    )
                if not np.isfinite(parts.total):
                    if checkpoint_path:
                        save_checkpoint(model, checkpoint_path, step=step - 1)
                    raise TrainingError(f"non-finite loss at step {step}; last good parameters kept")
                backward(total, tape)
                acc += (parts.ce, parts.sd_eeg, parts.sd_emg, parts.total)
            adamw_step(params, opt)
            rec = {
                "step": step,
                "ce": float(acc[0]),
                "sd_eeg": float(acc[1]),
                "sd_emg": float(acc[2]),
                "total": float(acc[3]),
                "lr": cfg.lr,
                "n_labeled": n_labeled,
            }
            if cfg.log_wall_time:
                rec["wall_ms"] = round(1000.0 * (time.perf_counter() - t0), 3)
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if test_data is not None and cfg.eval_interval and step % cfg.eval_interval == 0:
                reports = run_eval(step)
                if cfg.stop_at_accuracy is not None and MIX in reports:
                    if reports[MIX].accuracy >= cfg.stop_at_accuracy:
                        stopped = True
                        break
        if test_data is not None and not stopped and (not evals or evals[-1]["step"] != step):
            run_eval(step)
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path, step=opt.step, rng_state=rng.bit_generator.state)
    return TrainResult(records, evals, opt, step, stopped)
