import json
import math
import os

import numpy as np
import pytest

from erde.data import synth_generate
from erde.exits import (SweepConfig, chosen_exits, early_exit_infer, entropy_score,
                        latency_probe, mac_count, sweep, trace_dataset)
from erde.nn import ArchConfig, BlockSpec, build_network, preset_config

FIXTURE = os.path.join(os.path.dirname(__file__), "fixtures", "mac_reference.json")


@pytest.fixture(scope="module")
def reference():
    with open(FIXTURE) as f:
        return json.load(f)


@pytest.fixture(scope="module")
def random_net():
    return build_network(preset_config("tiny3", 4, 3, (16, 16)), seed=5)


@pytest.fixture(scope="module")
def small_traces(random_net):
    ds = synth_generate(4, 40, 16, 16, 0.8, seed=2)
    return trace_dataset(random_net, ds), ds


class TestEntropyScore:
    def test_uniform_binary(self):
        assert entropy_score([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-12)

    def test_closed_form_example(self):
        logits = np.log([0.8, 0.2])
        assert entropy_score(logits) == pytest.approx(0.500402, abs=1e-6)

    def test_one_hot_limit(self):
        assert entropy_score([100.0, 0.0]) < 1e-10

    def test_exact_zero_for_underflowed_softmax(self):
        # a logit margin past the double-precision exp underflow point gives
        # probability exactly [1, 0] and entropy exactly 0.0
        assert entropy_score([800.0, 0.0]) == 0.0

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            entropy_score([np.inf, 0.0])
        with pytest.raises(ValueError):
            entropy_score([np.nan, 1.0])

    def test_bounds(self, rng):
        for _ in range(50):
            k = int(rng.integers(2, 9))
            value = entropy_score(rng.standard_normal(k) * 10)
            assert -1e-12 <= value <= math.log(k) + 1e-12


class TestMacCount:
    def test_single_conv_example(self):
        arch = ArchConfig(blocks=(BlockSpec("plain", 3, 8),), class_count=4,
                          in_channels=3, image_hw=(8, 8))
        table = mac_count(build_network(arch, seed=0))
        assert table.block_macs[0] == 13824  # 8 * 8 * 8 * 3 * 9
        assert table.head_macs[0] == 8 * 4 * 4 * 4

    def test_fc_macs_is_in_times_out(self):
        arch = ArchConfig(blocks=(BlockSpec("plain", 3, 4),), class_count=10,
                          in_channels=3, image_hw=(8, 8))
        table = mac_count(build_network(arch, seed=0))
        assert table.head_macs[0] == (4 * 4 * 4) * 10

    def test_reference_architecture_matches_hand_count(self, reference):
        arch = ArchConfig.from_dict(reference["arch"])
        table = mac_count(build_network(arch, seed=0))
        assert dict(table.rows) == reference["layers"]
        assert list(table.block_macs) == reference["block_macs"]
        assert list(table.head_macs) == reference["head_macs"]
        assert list(table.exit_cumulative) == reference["cumulative_through_exit"]
        assert table.full_network == reference["full_network"]

    def test_counts_are_integers(self, random_net):
        table = mac_count(random_net)
        assert all(isinstance(m, int) for m in table.block_macs + table.head_macs)


class TestChosenExits:
    def test_first_exit_at_or_below_threshold(self):
        entropies = np.array([[1.2, 0.35, 0.05]])
        assert chosen_exits(entropies, 0.4)[0] == 1  # 0-based: exit 2

    def test_no_exit_falls_through_to_last(self):
        entropies = np.array([[1.2, 0.9, 0.5]])
        assert chosen_exits(entropies, 0.0)[0] == 2

    def test_exact_zero_entropy_exits_at_theta_zero(self):
        entropies = np.array([[0.0, 0.5, 0.5]])
        assert chosen_exits(entropies, 0.0)[0] == 0


class TestEarlyExitInfer:
    def test_theta_zero_runs_full_network(self, random_net, rng):
        example = rng.standard_normal((3, 16, 16)).astype(np.float32)
        pred, exit_index, macs = early_exit_infer(random_net, example, 0.0)
        assert exit_index == random_net.n
        assert macs == mac_count(random_net).full_network

    def test_theta_ln_k_exits_first(self, random_net, rng):
        example = rng.standard_normal((3, 16, 16)).astype(np.float32)
        pred, exit_index, macs = early_exit_infer(random_net, example, math.log(4))
        assert exit_index == 1
        assert macs == mac_count(random_net).cumulative_through_exit(1)

    def test_exact_zero_entropy_exits_at_theta_zero(self, rng):
        # rig head 1 to emit a constant overwhelming logit margin
        net = build_network(preset_config("tiny3", 4, 3, (16, 16)), seed=1)
        fc = net.heads[0].fc
        fc.weight.data = np.zeros_like(fc.weight.data)
        fc.bias.data = np.array([800.0, 0.0, 0.0, 0.0], dtype=net.dtype)
        example = rng.standard_normal((3, 16, 16)).astype(np.float32)
        pred, exit_index, _ = early_exit_infer(net, example, 0.0)
        assert exit_index == 1 and pred == 0

    def test_negative_threshold_rejected(self, random_net, rng):
        with pytest.raises(ValueError):
            early_exit_infer(random_net, rng.standard_normal((3, 16, 16)), -0.1)


class TestTraces:
    def test_entries_per_example(self, small_traces, random_net):
        traces, ds = small_traces
        assert len(traces) == len(ds)
        assert all(t.logits.shape == (random_net.n, 4) for t in traces)

    def test_entropies_match_entropy_score(self, small_traces):
        traces, _ = small_traces
        for t in traces[:10]:
            for i in range(t.logits.shape[0]):
                assert t.entropies[i] == pytest.approx(
                    entropy_score(t.logits[i]), abs=1e-12)

    def test_cumulative_macs_match_prefix_sums(self, small_traces, random_net):
        traces, _ = small_traces
        table = mac_count(random_net)
        expected = np.array(table.exit_cumulative)
        for t in traces:
            np.testing.assert_array_equal(t.cumulative_macs, expected)
        assert (np.diff(traces[0].cumulative_macs) > 0).all()

    def test_multithreaded_tracing_matches_single(self, random_net):
        ds = synth_generate(4, 24, 16, 16, 0.8, seed=3)
        single = trace_dataset(random_net, ds, workers=1)
        multi = trace_dataset(random_net, ds, workers=4)
        for a, b in zip(single, multi):
            assert a.logits.tobytes() == b.logits.tobytes()
            assert a.entropies.tobytes() == b.entropies.tobytes()

    def test_env_var_controls_workers(self, monkeypatch):
        from erde.exits import worker_count
        monkeypatch.setenv("ERDE_THREADS", "3")
        assert worker_count() == 3
        monkeypatch.setenv("ERDE_THREADS", "junk")
        assert worker_count() == 1
        monkeypatch.delenv("ERDE_THREADS")
        assert worker_count() == 1


class TestSweep:
    def test_theta_zero_row_equals_final_exit(self, small_traces, random_net):
        traces, ds = small_traces
        report = sweep(traces, SweepConfig((0.0,)))
        final_pred = np.array([t.logits[-1].argmax() for t in traces])
        labels = np.array([t.label for t in traces])
        assert report.rows[0].accuracy == (final_pred == labels).mean()
        assert report.rows[0].avg_macs == mac_count(random_net).full_network
        assert report.rows[0].exit_counts[-1] == len(traces)

    def test_monotone_in_theta(self, small_traces):
        traces, _ = small_traces
        grid = SweepConfig.linear(0.0, math.log(4), 100)
        report = sweep(traces, grid)
        macs = [row.avg_macs for row in report.rows]
        mean_exit = [row.mean_exit_index for row in report.rows]
        assert all(a >= b - 1e-12 for a, b in zip(macs, macs[1:]))
        assert all(a >= b - 1e-12 for a, b in zip(mean_exit, mean_exit[1:]))

    def test_per_example_exit_monotone_in_theta(self, small_traces, rng):
        traces, _ = small_traces
        entropies = np.stack([t.entropies for t in traces])
        thetas = np.sort(rng.uniform(0, math.log(4), 30))
        previous = None
        for theta in thetas:
            chosen = chosen_exits(entropies, theta)
            if previous is not None:
                assert (chosen <= previous).all()
            previous = chosen

    def test_histogram_sums_to_example_count(self, small_traces):
        traces, _ = small_traces
        report = sweep(traces, SweepConfig.linear(0, 1.4, 10))
        for row in report.rows:
            assert sum(row.exit_counts) == len(traces)

    def test_theta_ln_k_sends_everyone_to_exit_one(self, small_traces):
        traces, _ = small_traces
        report = sweep(traces, SweepConfig((math.log(4),)))
        assert report.rows[0].exit_counts[0] == len(traces)

    def test_sweep_equals_sequential_inference_oracle(self, random_net):
        """Cached sweep must agree exactly with per-example re-execution."""
        ds = synth_generate(4, 20, 16, 16, 0.8, seed=7)
        traces = trace_dataset(random_net, ds)
        gen = np.random.default_rng(13)
        thetas = np.concatenate([[0.0, math.log(4)], gen.uniform(0, math.log(4), 50)])
        labels = ds.labels
        for theta in thetas:
            report = sweep(traces, SweepConfig((float(theta),)))
            row = report.rows[0]
            exits, preds, macs = [], [], 0
            for i in range(len(ds)):
                p, e, m = early_exit_infer(random_net, ds.images[i], float(theta))
                exits.append(e)
                preds.append(p)
                macs += m
            counts = np.bincount(np.array(exits) - 1, minlength=random_net.n)
            assert tuple(counts) == row.exit_counts
            assert row.avg_macs == macs / len(ds)
            assert row.accuracy == (np.array(preds) == labels).mean()

    def test_errors(self, small_traces):
        traces, _ = small_traces
        with pytest.raises(ValueError):
            sweep([], SweepConfig((0.1,)))
        with pytest.raises(ValueError):
            SweepConfig(())
        with pytest.raises(ValueError):
            SweepConfig((-0.5,))
        with pytest.raises(ValueError):
            SweepConfig.linear(0.0, 1.0, 0)


class TestSweepSerialization:
    def test_csv_layout_and_determinism(self, small_traces, tmp_path):
        traces, _ = small_traces
        report = sweep(traces, SweepConfig.linear(0, 1.0, 5))
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        report.to_csv(p1)
        report.to_csv(p2)
        assert p1.read_bytes() == p2.read_bytes()
        lines = p1.read_text().strip().splitlines()
        assert lines[0].split(",")[:3] == ["theta", "accuracy", "avg_macs"]
        assert len(lines) == 6  # header + 5 rows

    def test_json_provenance_block(self, small_traces, tmp_path):
        traces, ds = small_traces
        report = sweep(traces, SweepConfig((0.2,)),
                       provenance={"dataset": ds.provenance})
        path = tmp_path / "r.json"
        report.to_json(path)
        payload = json.loads(path.read_text())
        assert payload["provenance"]["dataset"] == ds.provenance
        assert len(payload["rows"]) == 1


class TestLatencyProbe:
    def test_zero_repetitions_is_empty(self, random_net):
        ds = synth_generate(4, 4, 16, 16, 0.5, seed=1)
        probe = latency_probe(random_net, ds, 0.1, repetitions=0)
        assert probe.repetitions == 0 and probe.mean_seconds is None

    def test_report_carries_host_descriptor(self, random_net):
        ds = synth_generate(4, 4, 16, 16, 0.5, seed=1)
        probe = latency_probe(random_net, ds, 0.1, repetitions=2, warmup=1)
        assert isinstance(probe.host, str) and len(probe.host) > 0
        assert probe.repetitions == 2 and probe.mean_seconds > 0
