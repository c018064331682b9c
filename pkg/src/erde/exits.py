"""Thresholded early-exit inference, MAC accounting, and threshold sweeps.

Inference walks the blocks in order, computing each exit's logits and the
Shannon entropy (nats) of their softmax.  The example leaves at the first exit
whose entropy is at or below the threshold; the last exit always terminates.
Head computations on the way count as spent even when their exit is rejected.

MAC convention: convolutions cost C_out*H_out*W_out*C_in*kH*kW, fully-connected
layers cost in*out, and BN / activations / pooling / dropout cost zero.  All
counts are exact integers, so sweep aggregation is order-independent.
"""

from __future__ import annotations

import csv
import json
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

THREADS_ENV = "ERDE_THREADS"


def worker_count(explicit=None):
    """Resolve the trace/sweep worker count; default 1 for bit-reproducibility."""
    if explicit is not None:
        return max(1, int(explicit))
    value = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# entropy confidence score


def entropy_score(logits):
    """Shannon entropy in nats of softmax(logits) at T=1, with 0*log(0) := 0."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if z.size == 0 or not np.all(np.isfinite(z)):
        raise ValueError(f"entropy_score: logits must be finite and nonempty, got {logits!r}")
    shifted = z - z.max()
    log_p = shifted - np.log(np.exp(shifted).sum())
    p = np.exp(log_p)
    return float(-(p * log_p).sum())  # p == 0 contributes exactly 0 * finite


def entropy_rows(logits):
    """Row-wise entropy for an (N, K) logit array."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -(np.exp(log_p) * log_p).sum(axis=1)


# ---------------------------------------------------------------------------
# MAC accounting


@dataclass(frozen=True)
class MacTable:
    block_macs: tuple      # per block, integer
    head_macs: tuple       # per head, integer
    rows: tuple            # (name, macs) per layer for reporting

    @property
    def n(self):
        return len(self.block_macs)

    def cumulative_through_exit(self, i):
        """MACs spent reaching exit i (1-based): blocks 1..i plus heads 1..i."""
        return sum(self.block_macs[:i]) + sum(self.head_macs[:i])

    @property
    def exit_cumulative(self):
        return tuple(self.cumulative_through_exit(i) for i in range(1, self.n + 1))

    @property
    def full_network(self):
        return self.cumulative_through_exit(self.n)


def _conv_macs(c_in, c_out, k, h_out, w_out):
    return c_out * h_out * w_out * c_in * k * k


def mac_count(net):
    """Exact per-block and per-head multiply-accumulate table for a network."""
    config = net.config
    h, w = config.image_hw
    block_macs, head_macs, rows = [], [], []
    for i, spec in enumerate(config.blocks, start=1):
        h = (h + 2 - 3) // spec.stride + 1
        w = (w + 2 - 3) // spec.stride + 1
        macs = _conv_macs(spec.in_channels, spec.out_channels, 3, h, w)
        parts = [(f"block{i}.conv1", macs)]
        for j in range(2, spec.conv_count + 1):
            extra = _conv_macs(spec.out_channels, spec.out_channels, 3, h, w)
            parts.append((f"block{i}.conv{j}", extra))
            macs += extra
        if spec.kind == "residual" and (spec.stride != 1 or spec.in_channels != spec.out_channels):
            proj = _conv_macs(spec.in_channels, spec.out_channels, 1, h, w)
            parts.append((f"block{i}.proj", proj))
            macs += proj
        block_macs.append(macs)
        rows.extend(parts)
        fc = spec.out_channels * (h // 2) * (w // 2) * config.class_count
        head_macs.append(fc)
        rows.append((f"head{i}.fc", fc))
    return MacTable(tuple(block_macs), tuple(head_macs), tuple(rows))


# ---------------------------------------------------------------------------
# early-exit inference and traces


@dataclass
class ExitTrace:
    """Cached per-example record of every exit's logits, entropies, and costs."""
    logits: np.ndarray        # (n, K)
    entropies: np.ndarray     # (n,)
    cumulative_macs: np.ndarray  # (n,) integers
    label: int


def _forward_single(net, example):
    """Eval-mode forward of one example through all exits; returns (n, K) logits."""
    x = Tensor(np.asarray(example)[None, ...], dtype=net.dtype)
    logits = net.forward_all_exits(x, mode="eval")
    return np.stack([l.data[0].astype(np.float64) for l in logits])


def early_exit_infer(net, example, theta):
    """Run thresholded inference on one example.

    Returns (prediction, exit_index, macs_used) with exit_index 1-based.
    """
    if theta < 0:
        raise ValueError(f"threshold must be nonnegative, got {theta}")
    table = mac_count(net)
    x = Tensor(np.asarray(example)[None, ...], dtype=net.dtype)
    h = x
    n = net.n
    for i in range(n):
        h, logits = net.forward_step(h, i, training=False)
        row = logits.data[0].astype(np.float64)
        c = entropy_score(row)
        if c <= theta or i == n - 1:
            exit_index = i + 1
            return int(row.argmax()), exit_index, table.cumulative_through_exit(exit_index)
    raise AssertionError("unreachable: final exit always terminates")


def trace_dataset(net, dataset, workers=None):
    """Cache all n exits' logits and entropies for every example.

    Each example runs as its own batch-of-one eval forward, so cached logits
    agree bit-for-bit with sequential early-exit execution.  Examples may be
    partitioned across threads; assembly is by index, so the result does not
    depend on the partitioning.
    """
    table = mac_count(net)
    cum = np.array(table.exit_cumulative, dtype=np.int64)
    n_examples = len(dataset)
    all_logits = [None] * n_examples

    def run(idx):
        all_logits[idx] = _forward_single(net, dataset.images[idx])

    count = worker_count(workers)
    if count == 1 or n_examples < 2:
        for idx in range(n_examples):
            run(idx)
    else:
        with ThreadPoolExecutor(max_workers=count) as pool:
            list(pool.map(run, range(n_examples)))

    traces = []
    for idx in range(n_examples):
        logits = all_logits[idx]
        traces.append(ExitTrace(logits=logits,
                                entropies=entropy_rows(logits),
                                cumulative_macs=cum.copy(),
                                label=int(dataset.labels[idx])))
    return traces


# ---------------------------------------------------------------------------
# threshold sweeps


@dataclass(frozen=True)
class SweepConfig:
    thetas: tuple

    def __post_init__(self):
        if len(self.thetas) == 0:
            raise ValueError("theta grid must be nonempty")
        if any(t < 0 for t in self.thetas):
            raise ValueError("all thresholds must be nonnegative")

    @staticmethod
    def linear(theta_min, theta_max, steps):
        if steps < 1:
            raise ValueError("steps must be at least 1")
        if theta_min < 0:
            raise ValueError("theta_min must be nonnegative")
        if theta_max < theta_min:
            raise ValueError("theta_max must be >= theta_min")
        if steps == 1:
            return SweepConfig((float(theta_min),))
        return SweepConfig(tuple(np.linspace(theta_min, theta_max, steps).tolist()))


@dataclass
class SweepRow:
    theta: float
    accuracy: float
    avg_macs: float
    exit_counts: tuple
    mean_exit_index: float


@dataclass
class SweepReport:
    rows: list
    n_exits: int
    example_count: int
    provenance: dict = field(default_factory=dict)

    def csv_header(self):
        exits = [f"exit_{i}_count" for i in range(1, self.n_exits + 1)]
        return ["theta", "accuracy", "avg_macs"] + exits + ["mean_exit_index"]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.csv_header())
            for row in self.rows:
                writer.writerow([repr(row.theta), repr(row.accuracy), repr(row.avg_macs)]
                                + [str(c) for c in row.exit_counts]
                                + [repr(row.mean_exit_index)])

    def to_json(self, path):
        payload = {
            "provenance": self.provenance,
            "n_exits": self.n_exits,
            "example_count": self.example_count,
            "rows": [
                {"theta": row.theta, "accuracy": row.accuracy, "avg_macs": row.avg_macs,
                 "exit_counts": list(row.exit_counts),
                 "mean_exit_index": row.mean_exit_index}
                for row in self.rows
            ],
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")


def chosen_exits(entropies, theta):
    """Per-example chosen exit (0-based): first entropy <= theta, else the last."""
    exited = entropies <= theta
    n = entropies.shape[1]
    first = exited.argmax(axis=1)
    return np.where(exited.any(axis=1), first, n - 1)


def sweep(traces, config, provenance=None):
    """Evaluate accuracy / cost per threshold from cached traces.

    Average MACs are summed as exact integers before the single final division,
    so results are independent of example order and worker partitioning.
    """
    if not traces:
        raise ValueError("sweep needs at least one trace")
    n = traces[0].entropies.shape[0]
    entropies = np.stack([t.entropies for t in traces])          # (N, n)
    logits = np.stack([t.logits for t in traces])                # (N, n, K)
    labels = np.array([t.label for t in traces])
    cum = traces[0].cumulative_macs.astype(np.int64)
    predictions = logits.argmax(axis=2)                          # (N, n)
    n_examples = len(traces)
    rows = []
    for theta in config.thetas:
        chosen = chosen_exits(entropies, theta)
        correct = predictions[np.arange(n_examples), chosen] == labels
        mac_total = int(cum[chosen].sum())
        counts = np.bincount(chosen, minlength=n)
        rows.append(SweepRow(
            theta=float(theta),
            accuracy=float(correct.sum()) / n_examples,
            avg_macs=mac_total / n_examples,
            exit_counts=tuple(int(c) for c in counts),
            mean_exit_index=float((chosen + 1).sum()) / n_examples,
        ))
    return SweepReport(rows=rows, n_exits=n, example_count=n_examples,
                       provenance=dict(provenance or {}))


# ---------------------------------------------------------------------------
# latency probing (informational only)


@dataclass
class LatencyReport:
    mean_seconds: float
    std_seconds: float
    repetitions: int
    theta: float
    host: str
    samples: tuple = ()


def latency_probe(net, dataset, theta, repetitions, warmup=1):
    """Wall-clock per-example timing of thresholded inference; never asserted."""
    host = f"{platform.platform()} / {platform.processor() or 'unknown-cpu'}"
    if repetitions <= 0:
        return LatencyReport(mean_seconds=None, std_seconds=None, repetitions=0,
                             theta=theta, host=host)
    n = len(dataset)
    for r in range(min(warmup, n)):
        early_exit_infer(net, dataset.images[r % n], theta)
    samples = []
    for r in range(repetitions):
        start = time.perf_counter()
        early_exit_infer(net, dataset.images[r % n], theta)
        samples.append(time.perf_counter() - start)
    arr = np.array(samples)
    return LatencyReport(mean_seconds=float(arr.mean()), std_seconds=float(arr.std()),
                        repetitions=repetitions, theta=theta, host=host,
                        samples=tuple(samples))
