"""Evaluation, sweeps, summaries, selection, and the sweep CSV."""

import numpy as np
import pytest

from soupkit import bench as B
from soupkit import data as D
from soupkit import model as M
from soupkit import soup as S


def tiny_pair(seed1=11, seed2=22):
    cfg = M.ModelConfig(d_model=8, n_layers=1, n_heads=2, d_ff=16, vocab_size=64, max_seq_len=32)
    return M.init_ancestor(cfg, seed1), M.init_ancestor(cfg, seed2)


@pytest.fixture(scope="module")
def sets():
    return {
        "reverse": D.gen_task_reverse(seed=0, n_train=30, n_eval=8, len_range=(3, 4)),
        "modadd": D.gen_task_modadd(seed=0, n_train=30, n_eval=8, modulus=11),
    }


def naive_greedy(ckpt, prompt, max_new=32):
    """Per-sample decode loop: the oracle for the batched decoder."""
    seq = list(prompt)
    out = []
    for _ in range(max_new):
        if len(seq) >= ckpt.config.max_seq_len:
            break
        logits = M.forward(ckpt, np.asarray([seq], dtype=np.int64))
        nxt = int(np.argmax(logits[0, -1]))
        out.append(nxt)
        seq.append(nxt)
        if nxt in D.TERMINATOR_IDS:
            break
    return out


class TestGreedyDecode:
    def test_batched_matches_per_sample_loop(self, sets):
        c1, _ = tiny_pair()
        prompts = [s.prompt for s in sets["modadd"].eval if len(s.prompt) == len(sets["modadd"].eval[0].prompt)][:4]
        batched = B.greedy_complete(c1, prompts)
        for prompt, completion in zip(prompts, batched):
            naive = naive_greedy(c1, prompt)
            assert B._terminate(completion) == B._terminate(naive)

    def test_mixed_length_prompts_rejected(self):
        c1, _ = tiny_pair()
        with pytest.raises(ValueError, match="equal length"):
            B.greedy_complete(c1, [(1, 2), (1, 2, 3)])

    def test_terminator_cut(self):
        hash_id = D.CHAR_TO_ID["#"]
        assert B._terminate([5, 6, hash_id, 9]) == (5, 6)
        assert B._terminate([5, D.EOS_ID, 7]) == (5,)
        assert B._terminate([5, 6]) == (5, 6)

    def test_generation_capped_at_32(self):
        c1, _ = tiny_pair()
        # pick a prompt the untrained model will not terminate quickly
        completions = B.greedy_complete(c1, [tuple(D.encode("abc|")[:-1])], max_new_tokens=32)
        assert len(completions[0]) <= 32


class TestEvaluate:
    def test_untrained_model_scores_near_chance(self, sets):
        c1, _ = tiny_pair()
        metrics = B.evaluate(c1, sets["modadd"])
        assert metrics.exact_match <= 2 / 11
        assert metrics.nll > 0

    def test_ppl_is_exp_of_nll(self, sets):
        c1, _ = tiny_pair()
        metrics = B.evaluate(c1, sets["reverse"])
        assert metrics.ppl == pytest.approx(np.exp(metrics.nll), abs=1e-12)

    def test_deterministic(self, sets):
        c1, _ = tiny_pair()
        assert B.evaluate(c1, sets["reverse"]) == B.evaluate(c1, sets["reverse"])

    def test_empty_eval_split_rejected(self):
        c1, _ = tiny_pair()
        ms = D.MetaSet(name="empty", train=[], eval=[])
        with pytest.raises(ValueError, match="empty eval split"):
            B.evaluate(c1, ms)

    def test_nll_matches_direct_loss_on_eval_rows(self, sets):
        c1, _ = tiny_pair()
        metrics = B.evaluate(c1, sets["modadd"])
        rows = D.rows_from_samples(sets["modadd"].eval)
        inputs, targets = D.pad_rows(rows, D.PAD_ID)
        direct = M.nll_loss(M.forward(c1, inputs), targets, D.PAD_ID)
        assert metrics.nll == direct


class TestVanillaSweep:
    def test_eleven_records_ordered_with_bases_at_ends(self, sets):
        c1, c2 = tiny_pair()
        eval_sets = [sets["reverse"]]
        records = B.run_vanilla_sweep(c1, c2, eval_sets)
        assert len(records) == 11
        assert records[0].train_spec == "vanilla@0.00"
        assert records[-1].train_spec == "vanilla@1.00"
        assert [r.train_spec for r in records] == [f"vanilla@{i/10:.2f}" for i in range(11)]

    def test_endpoint_records_equal_base_evaluations(self, sets):
        c1, c2 = tiny_pair()
        records = B.run_vanilla_sweep(c1, c2, [sets["modadd"]])
        assert records[-1].metrics["modadd"] == B.evaluate(c1, sets["modadd"])
        assert records[0].metrics["modadd"] == B.evaluate(c2, sets["modadd"])


class TestPointSeed:
    def test_stable_under_axis_growth(self):
        comps = (("reverse", 10),)
        s1 = B.point_seed(3, comps, 2, 0.1, "softmax", 0.0)
        s2 = B.point_seed(3, comps, 2, 0.1, "softmax", 0.0)
        assert s1 == s2
        assert B.point_seed(4, comps, 2, 0.1, "softmax", 0.0) != s1
        assert B.point_seed(3, comps, 3, 0.1, "softmax", 0.0) != s1

    def test_seed_fits_in_63_bits(self):
        s = B.point_seed(0, (("a", 1),), 1, 0.3, "linear", 0.01)
        assert 0 <= s < 2**63


class TestRunGrid:
    def test_grid_runs_all_points_in_canonical_order(self, sets):
        c1, c2 = tiny_pair()
        grid = B.GridSpec(
            train_specs=((("reverse", 6),), (("modadd", 6),)),
            epochs=(1, 2),
            learning_rates=(0.1,),
            batch_size=4,
        )
        records = B.run_grid(c1, c2, grid, sets, ["reverse"], global_seed=5)
        assert len(records) == 4
        assert [r.train_spec for r in records] == ["reverse:6", "reverse:6", "modadd:6", "modadd:6"]
        assert [r.epochs for r in records] == [1, 2, 1, 2]

    def test_rerun_is_identical(self, sets):
        c1, c2 = tiny_pair()
        grid = B.GridSpec(
            train_specs=((("modadd", 6),),), epochs=(1,), learning_rates=(0.1,), batch_size=4
        )
        r1 = B.run_grid(c1, c2, grid, sets, ["modadd"], global_seed=1)
        r2 = B.run_grid(c1, c2, grid, sets, ["modadd"], global_seed=1)
        assert [r.metrics for r in r1] == [r.metrics for r in r2]

    def test_parallel_matches_serial(self, sets):
        c1, c2 = tiny_pair()
        grid = B.GridSpec(
            train_specs=((("reverse", 6),),),
            epochs=(1, 2),
            learning_rates=(0.1, 0.03),
            batch_size=4,
        )
        serial = B.run_grid(c1, c2, grid, sets, ["reverse"], global_seed=2, jobs=1)
        parallel = B.run_grid(c1, c2, grid, sets, ["reverse"], global_seed=2, jobs=3)
        assert [r.metrics for r in serial] == [r.metrics for r in parallel]
        assert [r.seed for r in serial] == [r.seed for r in parallel]

    def test_aborting_point_marked_failed_without_stopping(self, sets):
        c1, c2 = tiny_pair()
        grid = B.GridSpec(
            train_specs=((("modadd", 6),),),
            epochs=(1,),
            learning_rates=(1e160, 0.1),
            activations=("linear",),
            batch_size=4,
        )
        records = B.run_grid(c1, c2, grid, sets, ["modadd"], global_seed=0)
        assert len(records) == 2
        assert records[0].failed and not records[0].metrics
        assert not records[1].failed and records[1].metrics

    def test_unknown_eval_set_rejected(self, sets):
        c1, c2 = tiny_pair()
        grid = B.GridSpec(train_specs=((("modadd", 6),),), epochs=(1,), learning_rates=(0.1,))
        with pytest.raises(ValueError, match="unknown eval set"):
            B.run_grid(c1, c2, grid, sets, ["nope"], global_seed=0)


class TestRatioComponents:
    def test_ten_points_with_complementary_counts(self):
        comps = B.ratio_components("a", "b", total=100)
        assert len(comps) == 10
        assert comps[0] == (("a", 5), ("b", 95))
        assert comps[-1] == (("a", 95), ("b", 5))
        for pair in comps:
            assert pair[0][1] + pair[1][1] == 100


def make_record(spec, epochs, lr, act, lam, seed, ems: dict, failed=False):
    metrics = {k: B.Metrics(nll=1.0, ppl=float(np.exp(1.0)), exact_match=v) for k, v in ems.items()}
    return B.SweepRecord(
        train_spec=spec,
        epochs=epochs,
        learning_rate=lr,
        activation=act,
        lambda_l1=lam,
        seed=seed,
        metrics={} if failed else metrics,
        failed=failed,
    )


class TestSummarize:
    def test_means_maxes_and_sums(self):
        records = [
            make_record("a:10", 1, 0.1, "softmax", 0.0, 1, {"A": 0.2, "B": 0.4}),
            make_record("a:10", 3, 0.1, "softmax", 0.0, 2, {"A": 0.6, "B": 0.2}),
            make_record("b:10", 1, 0.1, "softmax", 0.0, 3, {"A": 0.5, "B": 0.5}),
        ]
        table = B.summarize(records)
        assert table.eval_sets == ("A", "B")
        row = table.rows[0]
        assert row.train_spec == "a:10"
        assert row.means["A"] == pytest.approx(0.4, abs=1e-15)
        assert row.maxes["A"] == 0.6
        assert row.sum_mean == pytest.approx(0.4 + 0.3, abs=1e-15)
        assert row.sum_max == pytest.approx(0.6 + 0.4, abs=1e-15)

    def test_single_record_mean_equals_max(self):
        table = B.summarize([make_record("a:5", 1, 0.1, "softmax", 0.0, 1, {"A": 0.7})])
        assert table.rows[0].means["A"] == table.rows[0].maxes["A"] == 0.7

    def test_failed_records_excluded(self):
        records = [
            make_record("a:5", 1, 0.1, "softmax", 0.0, 1, {"A": 0.7}),
            make_record("a:5", 2, 0.1, "softmax", 0.0, 2, {}, failed=True),
        ]
        table = B.summarize(records)
        assert table.rows[0].means["A"] == 0.7


class TestSelectBest:
    def test_highest_sum_wins(self):
        records = [
            make_record("a:5", 1, 0.1, "softmax", 0.0, 1, {"A": 0.5, "B": 0.5}),
            make_record("a:5", 3, 0.1, "softmax", 0.0, 2, {"A": 0.9, "B": 0.8}),
        ]
        cfg, spec = B.select_best(records)
        assert cfg.epochs == 3
        assert spec.components == (("a", 5),)

    def test_tie_breaks_lower_lr_then_fewer_epochs_then_activation(self):
        records = [
            make_record("a:5", 3, 0.3, "softmax", 0.0, 1, {"A": 0.8}),
            make_record("a:5", 3, 0.1, "softmax", 0.0, 2, {"A": 0.8}),
            make_record("a:5", 1, 0.1, "softmax", 0.0, 3, {"A": 0.8}),
            make_record("a:5", 1, 0.1, "sigmoid", 0.0, 4, {"A": 0.8}),
        ]
        cfg, _ = B.select_best(records)
        assert cfg.learning_rate == 0.1
        assert cfg.epochs == 1
        assert cfg.activation == "sigmoid"

    def test_failed_and_vanilla_records_ignored(self):
        records = [
            B.SweepRecord("vanilla@0.50", None, None, None, None, None, {"A": B.Metrics(1, np.e, 0.99)}),
            make_record("a:5", 1, 0.1, "softmax", 0.0, 1, {"A": 0.2}),
        ]
        cfg, _ = B.select_best(records)
        assert cfg.epochs == 1

    def test_no_candidates_raises(self):
        with pytest.raises(ValueError, match="no successful"):
            B.select_best([make_record("a:5", 1, 0.1, "softmax", 0.0, 1, {}, failed=True)])


class TestRecordsCsv:
    def test_header_exact(self):
        assert (
            B.RECORDS_CSV_HEADER
            == "train_spec,epochs,lr,activation,lambda,seed,eval_set,nll,ppl,exact_match,wall_s"
        )

    def test_round_trip(self, tmp_path):
        records = [
            make_record("a:5+b:5", 3, 0.1, "softmax", 0.001, 77, {"A": 0.25, "B": 1 / 3}),
            B.SweepRecord("vanilla@0.30", None, None, None, None, None, {"A": B.Metrics(1.5, float(np.exp(1.5)), 0.5)}),
            make_record("a:5", 1, 0.3, "linear", 0.0, 5, {}, failed=True),
        ]
        path = str(tmp_path / "records.csv")
        B.save_records_csv(records, path, eval_order=["A", "B"])
        loaded = B.load_records_csv(path)
        assert len(loaded) == 3
        assert loaded[0].metrics["B"].exact_match == 1 / 3
        assert loaded[0].lambda_l1 == 0.001
        assert loaded[1].train_spec == "vanilla@0.30"
        assert loaded[1].epochs is None
        assert loaded[2].failed

    def test_wall_column_is_constant_zero(self, tmp_path):
        record = make_record("a:5", 1, 0.1, "softmax", 0.0, 1, {"A": 0.5})
        record.wall_time_seconds = 123.456
        text = B.records_to_csv([record])
        assert text.splitlines()[1].endswith(",0")

    def test_summary_csv_layout(self):
        table = B.summarize([make_record("a:5", 1, 0.1, "softmax", 0.0, 1, {"A": 0.25, "B": 0.5})])
        text = B.summary_to_csv(table)
        lines = text.splitlines()
        assert lines[0] == "train_spec,mean:A,max:A,mean:B,max:B,sum_mean,sum_max"
        assert lines[1] == "a:5,0.25,0.25,0.5,0.5,0.75,0.75"
