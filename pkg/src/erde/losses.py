"""Distillation losses for multi-exit training.

The total loss gates each intermediate exit per example: where the teacher is
correct the exit receives the usual softened-KL + cross-entropy pair, where it
is wrong the exit instead receives the negative-entropy term, so minimizing
the total drives those predictions toward the uniform distribution.  The final
exit always receives the KL + CE pair.

Note on the entropy sign: the negative entropy sum(p*log p) enters the
minimized total with a *positive* coefficient omega_e.  Combining the written
form of the gated total with the negative-entropy definition verbatim would
minimize entropy instead, contradicting the stated goal of making uncertain
intermediate exits; the intent wins here.

Temperature applies to the KL term only (teacher and student both softened);
cross-entropy, the entropy term, and inference softmaxes run at T=1 unless
`soften_ce` is set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ExitCountError(ValueError):
    """Student/teacher exit counts differ and no alignment map was given."""


@dataclass(frozen=True)
class LossWeights:
    omega_kl: float = 0.25
    omega_ce: float = 0.75
    omega_e: float = 0.005
    temperature: float = 2.0
    soften_ce: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if min(self.omega_kl, self.omega_ce, self.omega_e) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    """Per-exit diagnostics plus the differentiable total.

    `components` holds, per exit, the subset means needed to reassemble the
    exit's contribution: gated exits store kl/ce means over teacher-correct
    samples, the negative-entropy mean over teacher-wrong samples, and the
    correct fraction; ungated exits store plain batch means.
    """
    total: Tensor
    exit_terms: list          # batch-mean contribution of each exit
    components: list          # per-exit dict of subset means (see above)
    kl_per_exit: list         # mean softened KL over the full batch
    ce_per_exit: list         # mean cross-entropy over the full batch
    entropy_per_exit: list    # mean sum(p*log p) over the full batch
    teacher_correct: list     # per-exit boolean mask (B,); None when ungated

    def recompute_total(self, weights):
        """Reassemble the scalar total from components and weights."""
        total = 0.0
        for comp in self.components:
            if "frac_correct" in comp:
                frac = comp["frac_correct"]
                total += frac * (weights.omega_kl * comp["kl_correct_mean"]
                                 + weights.omega_ce * comp["ce_correct_mean"])
                total += (1.0 - frac) * weights.omega_e * comp["negentropy_wrong_mean"]
            else:
                total += (weights.omega_kl * comp["kl_mean"]
                          + weights.omega_ce * comp["ce_mean"])
        return total


def _detach_logits(t):
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def _check_pair(op, student, teacher):
    s_shape = student.data.shape
    t_shape = teacher.shape
    if s_shape != t_shape:
        raise T.ShapeError(f"{op}: student {s_shape} and teacher {t_shape} shapes differ")
    if len(s_shape) != 2 or s_shape[1] == 0:
        raise T.ShapeError(f"{op}: expected (B, K) logits with K >= 1, got {s_shape}")


def _check_labels(op, logits_shape, labels):
    labels = np.asarray(labels)
    k = logits_shape[1]
    if labels.shape != (logits_shape[0],):
        raise T.ShapeError(f"{op}: labels shape {labels.shape} != ({logits_shape[0]},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"{op}: labels must lie in [0, {k})")
    return labels.astype(np.int64)


def _log_softmax_np(z, temperature):
    zt = z / temperature
    m = zt.max(axis=1, keepdims=True)
    shifted = zt - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def kl_per_example(student_logits, teacher_logits, temperature):
    """Per-example softened KL, scaled by T^2 / K; gradient reaches the student only."""
    t_data = _detach_logits(teacher_logits)
    _check_pair("kl_distill", student_logits, t_data)
    k = t_data.shape[1]
    ls_t = _log_softmax_np(t_data.astype(np.float64), temperature)
    p_t = np.exp(ls_t)
    scale = temperature * temperature / k
    const = scale * (p_t * ls_t).sum(axis=1)  # teacher self-term, constant
    ls_s = T.log_softmax(student_logits, temperature=temperature, axis=1)
    cross = (T.mul(ls_s, p_t.astype(student_logits.dtype))).sum(axis=1)
    return T.add(T.mul_scalar(cross, -scale), const.astype(student_logits.dtype))


def kl_distill(student_logits, teacher_logits, temperature):
    """Batch-mean softened Kullback-Leibler distillation term."""
    return kl_per_example(student_logits, teacher_logits, temperature).mean()


def ce_per_example(student_logits, labels, temperature=1.0):
    """Per-example cross-entropy against integer labels."""
    labels = _check_labels("cross_entropy", student_logits.data.shape, labels)
    b, k = student_logits.data.shape
    onehot = np.zeros((b, k), dtype=student_logits.dtype)
    onehot[np.arange(b), labels] = 1
    ls = T.log_softmax(student_logits, temperature=temperature, axis=1)
    return T.mul_scalar(T.mul(ls, onehot).sum(axis=1), -1.0)


def cross_entropy(student_logits, labels, temperature=1.0):
    """Batch-mean cross-entropy of softmax predictions vs ground truth."""
    return ce_per_example(student_logits, labels, temperature).mean()


def negative_entropy_per_example(student_logits):
    """Per-example sum(p * log p); lies in [-log K, 0]."""
    if student_logits.data.ndim != 2:
        raise T.ShapeError(
            f"entropy_regularizer: expected (B, K) logits, got {student_logits.data.shape}")
    ls = T.log_softmax(student_logits, temperature=1.0, axis=1)
    p = T.exp(ls)
    return T.mul(p, ls).sum(axis=1)


def entropy_regularizer(student_logits):
    """Batch-mean negative entropy of the student's softmax output."""
    return negative_entropy_per_example(student_logits).mean()


def teacher_correct_mask(teacher_logits, labels):
    """Boolean vector: argmax of the teacher's logits equals the label.

    Exact argmax ties resolve to the lowest class index.
    """
    t_data = _detach_logits(teacher_logits)
    labels = _check_labels("teacher_correct_mask", t_data.shape, labels)
    return t_data.argmax(axis=1) == labels


def _resolve_alignment(n_student, n_teacher, exit_map):
    if exit_map is None:
        if n_student != n_teacher:
            raise ExitCountError(
                f"student has {n_student} exits but teacher has {n_teacher}; "
                "provide an exit alignment map")
        return list(range(n_student))
    exit_map = [int(i) for i in exit_map]
    if len(exit_map) != n_student:
        raise ExitCountError(
            f"alignment map length {len(exit_map)} != student exit count {n_student}")
    for i in exit_map:
        if not 1 <= i <= n_teacher:
            raise ExitCountError(f"alignment entry {i} outside teacher exits 1..{n_teacher}")
    return [i - 1 for i in exit_map]


def _kd_pair(student_logits, teacher_logits, labels, weights):
    """Shared per-example KL/CE pieces of the distillation pair."""
    kl_pe = kl_per_example(student_logits, teacher_logits, weights.temperature)
    ce_t = weights.temperature if weights.soften_ce else 1.0
    ce_pe = ce_per_example(student_logits, labels, temperature=ce_t)
    pair = T.add(T.mul_scalar(kl_pe, weights.omega_kl),
                 T.mul_scalar(ce_pe, weights.omega_ce))
    return pair, kl_pe, ce_pe


def _new_breakdown():
    return LossBreakdown(total=None, exit_terms=[], components=[], kl_per_exit=[],
                         ce_per_exit=[], entropy_per_exit=[], teacher_correct=[])


def _record_exit(breakdown, term, comp, kl_pe, ce_pe, ent_pe, mask):
    breakdown.exit_terms.append(term.item())
    breakdown.components.append(comp)
    breakdown.kl_per_exit.append(float(kl_pe.data.mean()))
    breakdown.ce_per_exit.append(float(ce_pe.data.mean()))
    breakdown.entropy_per_exit.append(
        None if ent_pe is None else float(ent_pe.data.mean()))
    breakdown.teacher_correct.append(mask)


def _subset_mean(values, mask):
    return float(values[mask].mean()) if mask.any() else 0.0


def erde_total(student_exits, teacher_exits, labels, weights, exit_map=None):
    """Gated distillation total over all exits.

    Intermediate exits contribute the KL + CE pair on examples the teacher
    classifies correctly and omega_e * sum(p*log p) on the rest; the final
    exit contributes the KL + CE pair unconditionally.
    """
    align = _resolve_alignment(len(student_exits), len(teacher_exits), exit_map)
    breakdown = _new_breakdown()
    total = None
    n = len(student_exits)
    for i, s_logits in enumerate(student_exits):
        t_logits = teacher_exits[align[i]]
        pair, kl_pe, ce_pe = _kd_pair(s_logits, t_logits, labels, weights)
        if i < n - 1:
            mask = teacher_correct_mask(t_logits, labels)
            ent_pe = negative_entropy_per_example(s_logits)
            gated = T.select(mask, pair, T.mul_scalar(ent_pe, weights.omega_e))
            term = gated.mean()
            comp = {
                "frac_correct": float(mask.mean()),
                "kl_correct_mean": _subset_mean(kl_pe.data, mask),
                "ce_correct_mean": _subset_mean(ce_pe.data, mask),
                "negentropy_wrong_mean": _subset_mean(ent_pe.data, ~mask),
            }
        else:
            mask, ent_pe = None, None
            term = pair.mean()
            comp = {"kl_mean": float(kl_pe.data.mean()),
                    "ce_mean": float(ce_pe.data.mean())}
        _record_exit(breakdown, term, comp, kl_pe, ce_pe, ent_pe, mask)
        total = term if total is None else T.add(total, term)
    breakdown.total = total
    return breakdown


def kd_baseline(student_exits, teacher_exits, labels, weights, exit_map=None):
    """Plain distillation: the KL + CE pair at every exit, no gating."""
    align = _resolve_alignment(len(student_exits), len(teacher_exits), exit_map)
    breakdown = _new_breakdown()
    total = None
    for i, s_logits in enumerate(student_exits):
        pair, kl_pe, ce_pe = _kd_pair(s_logits, teacher_exits[align[i]], labels, weights)
        term = pair.mean()
        comp = {"kl_mean": float(kl_pe.data.mean()),
                "ce_mean": float(ce_pe.data.mean())}
        _record_exit(breakdown, term, comp, kl_pe, ce_pe, None, None)
        total = term if total is None else T.add(total, term)
    breakdown.total = total
    return breakdown


def ce_joint(exits, labels):
    """Sum of per-exit cross-entropies; the teacher / no-distillation objective."""
    total = None
    for logits in exits:
        term = cross_entropy(logits, labels)
        total = term if total is None else T.add(total, term)
    return total
