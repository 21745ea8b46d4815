"""Benchmark plans, run accounting, and report emission."""

import pytest

from svcmarket.bench import (
    BenchCell,
    BenchPlan,
    BenchResult,
    RunSample,
    chi_square_uniform,
    emit_report,
    run_bench,
)

from helpers import free_port

NODES = ("http://n1.invalid", "http://n2.invalid")


class TestPlanValidation:
    def test_roundtrips_through_dict(self):
        plan = BenchPlan("subscribe", (1, 5, 10), "random", NODES, runs=3)
        assert BenchPlan.from_dict(plan.to_dict()) == plan

    def test_unknown_operation_rejected(self):
        with pytest.raises(ValueError, match="operation"):
            BenchPlan("coffee", (1,), "random", NODES)

    def test_unknown_regime_rejected(self):
        with pytest.raises(ValueError, match="regime"):
            BenchPlan("subscribe", (1,), "shuffled", NODES)

    @pytest.mark.parametrize("counts", [(), (2, 1), (1, 1), (0,), (-3,), (1.5,)])
    def test_counts_must_be_strictly_ascending_positive_integers(self, counts):
        with pytest.raises(ValueError, match="counts"):
            BenchPlan("subscribe", counts, "random", NODES)

    def test_nodes_and_runs_validated(self):
        with pytest.raises(ValueError, match="node"):
            BenchPlan("subscribe", (1,), "random", ())
        with pytest.raises(ValueError, match="runs"):
            BenchPlan("subscribe", (1,), "random", NODES, runs=0)


class TestChiSquare:
    def test_perfectly_uniform_counts_pass(self):
        statistic, critical, within = chi_square_uniform([10, 10, 10])
        assert statistic == 0.0
        assert critical == 5.991
        assert within is True

    def test_collapsed_counts_fail(self):
        statistic, _, within = chi_square_uniform([30, 0, 0])
        assert statistic == 60.0
        assert within is False

    def test_input_validation(self):
        with pytest.raises(ValueError, match="two categories"):
            chi_square_uniform([5])
        with pytest.raises(ValueError, match="categories"):
            chi_square_uniform([1] * 12)
        with pytest.raises(ValueError, match="observations"):
            chi_square_uniform([0, 0])


class TestCellAccounting:
    def sample(self, per_op, aborted=False):
        return RunSample(
            total_ms=per_op * 4, per_op_ms=per_op, blocks_delta=4, aborted=aborted
        )

    def test_aborted_samples_never_contribute(self):
        cell = BenchCell("subscribe", 4, "sequential")
        cell.samples = [self.sample(10.0), self.sample(30.0), self.sample(99.0, aborted=True)]
        assert cell.status == "OK"
        assert cell.per_op_ms_mean == 20.0
        assert cell.total_ms_mean == 80.0
        assert cell.spread_ms == 20.0
        assert len(cell.completed) == 2

    def test_all_aborted_means_no_numbers(self):
        cell = BenchCell("subscribe", 4, "sequential")
        cell.samples = [self.sample(5.0, aborted=True)]
        assert cell.status == "ABORTED"
        assert cell.per_op_ms_mean is None
        assert cell.total_ms_mean is None
        assert cell.spread_ms is None

    def test_result_roundtrips_and_merges(self, tmp_path):
        plan = BenchPlan("tenant-create", (2,), "sequential", NODES)
        cell = BenchCell("tenant-create", 2, "sequential", [self.sample(7.0)])
        result = BenchResult([plan], [cell])
        path = result.save(tmp_path / "raw.json")
        loaded = BenchResult.load(path)
        assert loaded.to_dict() == result.to_dict()
        merged = loaded.merge(BenchResult([], []))
        assert merged.cell("tenant-create", 2, "sequential").per_op_ms_mean == 7.0
        assert merged.cell("tenant-create", 9, "sequential") is None


class TestRunsAgainstTheCluster:
    def test_sequential_run_is_single_file_on_one_node(self, stack):
        plan = BenchPlan("tenant-create", (4,), "sequential", tuple(stack.endpoints), runs=1)
        result = run_bench(plan, seed=11)
        [sample] = result.cell("tenant-create", 4, "sequential").samples
        assert sample.aborted is False
        assert sample.max_in_flight == 1
        assert sample.node_choices == {
            stack.endpoints[0]: 4,
            stack.endpoints[1]: 0,
            stack.endpoints[2]: 0,
        }
        # each write committed alone, so blocks advance one per request
        assert sample.blocks_delta == 4
        assert sample.per_op_ms * 4 == pytest.approx(sample.total_ms)
        assert sample.total_ms > 0

    def test_random_run_spreads_over_all_nodes(self, stack):
        plan = BenchPlan("authenticate", (12,), "random", tuple(stack.endpoints), runs=1)
        result = run_bench(plan, seed=5)
        [sample] = result.cell("authenticate", 12, "random").samples
        assert sample.aborted is False
        assert sum(sample.node_choices.values()) == 12
        # the seeded picker draws a fixed multiset of nodes
        assert sorted(sample.node_choices.values()) == [2, 3, 7]
        assert sample.blocks_delta == 0  # logins never touch the ledger

    def test_subscribe_units_count_two_requests_each(self, stack):
        plan = BenchPlan("subscribe", (3,), "sequential", tuple(stack.endpoints), runs=1)
        result = run_bench(plan, seed=2)
        [sample] = result.cell("subscribe", 3, "sequential").samples
        assert sample.aborted is False
        assert sum(sample.node_choices.values()) == 2 * 3
        assert sample.blocks_delta == 3  # one block per delegation write
        assert sample.per_op_ms * 3 == pytest.approx(sample.total_ms)

    def test_listing_run_leaves_the_chain_alone(self, stack):
        plan = BenchPlan("service-list", (2,), "sequential", tuple(stack.endpoints), runs=1)
        result = run_bench(plan, seed=3)
        [sample] = result.cell("service-list", 2, "sequential").samples
        assert sample.aborted is False
        assert sample.blocks_delta == 0

    def test_unreachable_node_aborts_the_run_and_discards_timings(self, stack):
        nodes = (stack.endpoints[0], f"http://127.0.0.1:{free_port()}")
        plan = BenchPlan("authenticate", (8,), "random", nodes, runs=1)
        result = run_bench(plan, seed=1)
        cell = result.cell("authenticate", 8, "random")
        [sample] = cell.samples
        assert sample.aborted is True
        assert sample.error
        assert sample.total_ms == 0.0
        assert sample.per_op_ms == 0.0
        assert cell.status == "ABORTED"
        assert cell.per_op_ms_mean is None


class TestReports:
    def build_result(self):
        plan_seq = BenchPlan("subscribe", (1, 2), "sequential", NODES)
        plan_rnd = BenchPlan("subscribe", (1, 2), "random", NODES)
        cells = [
            BenchCell("subscribe", 1, "sequential", [RunSample(total_ms=8.0, per_op_ms=8.0)]),
            BenchCell("subscribe", 2, "sequential", [RunSample(total_ms=18.0, per_op_ms=9.0)]),
            BenchCell("subscribe", 1, "random", [RunSample(total_ms=12.0, per_op_ms=12.0)]),
            BenchCell(
                "subscribe", 2, "random", [RunSample(aborted=True, error="boom")]
            ),
        ]
        return BenchResult([plan_seq, plan_rnd], cells)

    def test_csv_rows_and_aborted_blanks(self, tmp_path):
        written = emit_report(self.build_result(), tmp_path)
        assert [p.name for p in written] == ["bench_raw.json", "bench_subscribe.csv"]
        lines = (tmp_path / "bench_subscribe.csv").read_text().splitlines()
        assert lines == [
            "count,sequential_per_op_ms,random_per_op_ms",
            "1,8.000,12.000",
            "2,9.000,",
        ]

    def test_reemitting_from_the_raw_file_is_byte_identical(self, tmp_path):
        first = tmp_path / "first"
        second = tmp_path / "second"
        emit_report(self.build_result(), first)
        reloaded = BenchResult.load(first / "bench_raw.json")
        emit_report(reloaded, second)
        for name in ("bench_raw.json", "bench_subscribe.csv"):
            assert (second / name).read_bytes() == (first / name).read_bytes()

    def test_plans_without_cells_still_get_a_header(self, tmp_path):
        result = BenchResult([BenchPlan("service-list", (5,), "random", NODES)], [])
        emit_report(result, tmp_path)
        assert (tmp_path / "bench_service-list.csv").read_bytes() == (
            b"count,sequential_per_op_ms,random_per_op_ms\r\n"
        )
