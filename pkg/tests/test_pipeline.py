"""End-to-end pipeline wiring on a small synthetic dataset: ingest
snapshots, stage outputs, leakage guards, resumability, and the CLI's
exit-code contract."""

import json
from pathlib import Path

import numpy as np
import pytest

from cmrec import cli, evaluation, features, pipeline
from cmrec.config import PipelineConfig
from cmrec.data import CombinationSpec, load_run
from cmrec.synth import MarketSpec, SynthConfig, generate
from cmrec.util import ConfigError, DataError, StageError

COMBOS = [["s1", "t1", "t2"], ["t1", "t2"]]


def pipeline_config(data_dir, workspace, **kw):
    payload = {
        "data_dir": str(data_dir),
        "workspace": str(workspace),
        "markets": ["s1", "t1", "t2"],
        "targets": ["t1", "t2"],
        "seed": 5,
        "prerank": {"scorers": [
            {"name": "item_cf", "params": {"top_k": 30},
             "combinations": COMBOS},
            {"name": "user_cf", "combinations": [COMBOS[0]]},
            {"name": "swing", "combinations": [COMBOS[1]]},
        ]},
        "selection": {"folds": 3, "n_shuffles": 6,
                      "trainer": {"num_leaves": 7, "n_rounds": 10,
                                  "learning_rate": 0.2,
                                  "min_data_in_leaf": 5}},
        "ranker": {"params": {"num_leaves": 7, "n_rounds": 15,
                              "learning_rate": 0.2, "min_data_in_leaf": 5},
                   "folds": 3},
    }
    payload.update(kw)
    return PipelineConfig.from_dict(payload)


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    data_dir = root / "data"
    meta = generate(SynthConfig(
        out_dir=str(data_dir), seed=11, n_items=150, dim=4,
        markets={"s1": MarketSpec(60, 12, 0.9),
                 "t1": MarketSpec(30, 6, 0.8),
                 "t2": MarketSpec(30, 6, 0.8)},
        targets=("t1", "t2"), eval_users=15, n_candidates=30))
    config = pipeline_config(data_dir, root / "work")
    summary = pipeline.run_ingest(config)
    for target in config.targets:
        pipeline.run_prerank(config, target)
        pipeline.run_select(config, target)
        pipeline.run_train(config, target)
        pipeline.run_evaluate(config, target)
    final = pipeline.run_report(config)
    return {"root": root, "data": data_dir, "config": config,
            "meta": meta, "summary": summary, "final": final,
            "ws": pipeline.workspace_for(config)}


class TestIngest:
    def test_summary_counts_match_generator_ground_truth(self, world):
        summary, meta = world["summary"], world["meta"]
        for market in ("s1", "t1", "t2"):
            m = meta["markets"][market]
            # dedupe keys on (user, item, market, split), so the 5-core
            # copies of train rows survive as their own split
            want = (m["train"] + m["train_5core"]
                    + m["valid_qrel"] + m["test_qrel"])
            assert summary["samples"][market] == want
            assert summary["users"][market] == m["users"]

    def test_snapshot_layout(self, world):
        snap = world["ws"].snapshot_dir
        for name in ("user", "item", "rating", "market", "split"):
            assert (snap / f"rows_{name}.npy").exists()
        for name in ("encoders.json", "meta.json", "summary.json"):
            assert (snap / name).exists()
        for target in ("t1", "t2"):
            for which in ("valid", "test"):
                assert world["ws"].run_path(target, which).exists()

    def test_snapshot_round_trips(self, world):
        snap = pipeline.load_snapshot(world["ws"])
        assert snap.markets == ("s1", "t1", "t2")
        assert snap.targets == ("t1", "t2")
        assert len(snap.rows) == world["summary"]["total_samples"]
        # encoders are bijective and cover every row
        assert all(snap.users.decode(r.user) for r in snap.rows[:50])

    def test_reingest_is_byte_identical(self, world, tmp_path):
        config = pipeline_config(world["data"], tmp_path / "w1")
        pipeline.run_ingest(config)
        first = pipeline.snapshot_digest(pipeline.workspace_for(config))
        pipeline.run_ingest(config)
        assert pipeline.snapshot_digest(pipeline.workspace_for(config)) == first
        # and equal to the long-lived fixture workspace built from the
        # same data and config
        assert pipeline.snapshot_digest(world["ws"]) == first

    def test_missing_data_dir_is_a_data_error(self, tmp_path):
        config = pipeline_config(tmp_path / "nope", tmp_path / "w")
        with pytest.raises(DataError, match="data directory"):
            pipeline.run_ingest(config)

    def test_prerank_without_snapshot_is_a_stage_error(self, world, tmp_path):
        config = pipeline_config(world["data"], tmp_path / "virgin")
        with pytest.raises(StageError, match="ingest first"):
            pipeline.run_prerank(config, "t1")


class TestWorkspaceLock:
    def test_lock_excludes_and_releases(self, tmp_path):
        ws = pipeline.Workspace(tmp_path / "w")
        with ws.lock():
            assert (ws.root / ".lock").exists()
            with pytest.raises(StageError, match="locked"):
                with ws.lock():
                    pass
        assert not (ws.root / ".lock").exists()
        with ws.lock():  # reacquire after release
            pass


class TestMakePlan:
    def test_explicit_combinations_expand_in_order(self, world):
        plan = pipeline.make_plan(world["config"], "t1", ("s1", "t1", "t2"))
        assert [(s.scorer, s.combination.combo_id) for s in plan] == [
            ("item_cf", "s1-t1-t2"), ("item_cf", "t1-t2"),
            ("user_cf", "s1-t1-t2"), ("swing", "t1-t2")]
        assert all(s.combination.target == "t1" for s in plan)

    def test_embedding_scorers_get_derived_seeds(self, world, tmp_path):
        config = pipeline_config(world["data"], tmp_path / "w", prerank={
            "scorers": [{"name": "word2vec", "params": {"epochs": 1},
                         "combinations": COMBOS},
                        {"name": "item_cf", "combinations": [COMBOS[0]]}]})
        plan = pipeline.make_plan(config, "t1", ("s1", "t1", "t2"))
        w2v = [s for s in plan if s.scorer == "word2vec"]
        assert all("seed" in s.params for s in w2v)
        assert w2v[0].params["seed"] != w2v[1].params["seed"]
        other_target = pipeline.make_plan(config, "t2", ("s1", "t1", "t2"))
        w2v_t2 = [s for s in other_target if s.scorer == "word2vec"]
        assert w2v_t2[0].params["seed"] != w2v[0].params["seed"]
        item_cf = [s for s in plan if s.scorer == "item_cf"]
        assert all("seed" not in s.params for s in item_cf)

    def test_pinned_seed_wins(self, world, tmp_path):
        config = pipeline_config(world["data"], tmp_path / "w", prerank={
            "scorers": [{"name": "word2vec", "params": {"seed": 99},
                         "combinations": [COMBOS[0]]}]})
        plan = pipeline.make_plan(config, "t1", ("s1", "t1", "t2"))
        assert plan[0].params["seed"] == 99

    def test_unknown_market_in_combination(self, world, tmp_path):
        config = pipeline_config(world["data"], tmp_path / "w", prerank={
            "scorers": [{"name": "item_cf",
                         "combinations": [["s1", "s9", "t1"]]}]})
        with pytest.raises(ConfigError, match="s9"):
            pipeline.make_plan(config, "t1", ("s1", "t1", "t2"))

    def test_combination_must_contain_target(self, world, tmp_path):
        config = pipeline_config(world["data"], tmp_path / "w", prerank={
            "scorers": [{"name": "item_cf", "combinations": [["s1", "t2"]]}]})
        with pytest.raises(ConfigError, match="t1"):
            pipeline.make_plan(config, "t1", ("s1", "t1", "t2"))

    def test_default_combinations_need_the_benchmark_shape(self, world):
        config = world["config"]
        bad = PipelineConfig.from_dict({**config.to_dict(), "prerank": {
            "scorers": [{"name": "item_cf"}]}})
        with pytest.raises(ConfigError, match="3 source"):
            pipeline.make_plan(bad, "t1", ("s1", "t1", "t2"))

    def test_target_outside_config(self, world):
        with pytest.raises(ConfigError, match="t9"):
            pipeline.run_prerank(world["config"], "t9")


class TestPrerankOutputs:
    def test_feature_tables_exist_with_expected_columns(self, world):
        ws = world["ws"]
        valid = features.read_table(ws.features_path("t1", "valid"),
                                    ws.catalog_path("t1", "valid"))
        test = features.read_table(ws.features_path("t1", "test"),
                                   ws.catalog_path("t1", "test"))
        # 4 scorer specs -> 8 columns, plus 17 statistics
        assert len(valid.columns) == 8 + 17
        assert valid.columns == test.columns
        assert valid.labels is not None and test.labels is None

    def test_valid_labels_are_the_valid_qrels(self, world):
        ws = world["ws"]
        valid = features.read_table(ws.features_path("t1", "valid"))
        qrels = {}
        for line in (world["data"] / "t1" / "valid_qrel.tsv"
                     ).read_text().splitlines()[1:]:
            user, item, _ = line.split("\t")
            qrels.setdefault(user, set()).add(item)
        for r in range(valid.n_rows):
            want = 1 if valid.items[r] in qrels.get(valid.users[r], ()) else 0
            assert valid.labels[r] == want
        assert int(valid.labels.sum()) == sum(len(v) for v in qrels.values())

    def test_rows_follow_run_files(self, world):
        ws = world["ws"]
        run = load_run(ws.run_path("t1", "test"))
        test = features.read_table(ws.features_path("t1", "test"))
        assert list(zip(test.users, test.items)) == run.pairs()

    def test_no_eval_positive_reaches_any_scorer_matrix(self, world):
        snap = pipeline.load_snapshot(world["ws"])
        ctx = features.PlanContext(snap.rows, snap.users, snap.items)
        held_out = {(r.user, r.item) for r in snap.rows
                    if r.market == "t1" and r.split in ("valid_qrel",
                                                        "test_qrel")}
        assert held_out
        for combo in COMBOS:
            matrix = features.combination_matrix(
                ctx, CombinationSpec("t1", tuple(sorted(combo))))
            dense = matrix.to_dense()
            assert all(dense[u, i] == 0.0 for u, i in held_out)

    def test_catalog_provenance_declares_the_guard(self, world):
        ws = world["ws"]
        catalog = json.loads(ws.catalog_path("t1", "valid").read_text())
        scorer_cols = {name: p for name, p in catalog["provenance"].items()
                       if p.get("kind") == "scorer"}
        assert len(scorer_cols) == 4
        assert all(p["excludes_target_valid"] for p in scorer_cols.values())

    def test_correlation_matrix_covers_scorer_columns(self, world):
        ws = world["ws"]
        lines = (ws.target_dir("t1") / "correlation.tsv"
                 ).read_text().splitlines()
        header = lines[0].split("\t")[1:]
        assert len(header) == 4 and len(lines) == 5
        diag = [float(lines[i + 1].split("\t")[i + 1])
                for i in range(len(header))]
        assert all(d in (0.0, 1.0) for d in diag)

    def test_failures_file_is_empty_on_success(self, world):
        failures = json.loads((world["ws"].target_dir("t1")
                               / "prerank_failures.json").read_text())
        assert failures == []

    def test_rerun_resumes_from_cache_byte_identically(self, world):
        ws = world["ws"]
        before = {which: ws.features_path("t1", which).read_bytes()
                  for which in ("valid", "test")}
        ws.features_path("t1", "valid").unlink()
        pipeline.run_prerank(world["config"], "t1")
        for which in ("valid", "test"):
            assert ws.features_path("t1", which).read_bytes() == before[which]


class TestSelectTrain:
    def test_kept_features_are_a_nonempty_subset(self, world):
        ws = world["ws"]
        kept = (ws.target_dir("t1") / "kept.txt").read_text().split()
        valid = features.read_table(ws.features_path("t1", "valid"))
        assert kept and set(kept) <= set(valid.columns)

    def test_selection_report_covers_every_column_in_order(self, world):
        ws = world["ws"]
        report = json.loads((ws.target_dir("t1")
                             / "selection_report.json").read_text())
        valid = features.read_table(ws.features_path("t1", "valid"))
        assert [r["name"] for r in report] == list(valid.columns)
        kept = set((ws.target_dir("t1") / "kept.txt").read_text().split())
        assert {r["name"] for r in report if r["decision"] == "keep"} == kept

    def test_metrics_and_model_artifacts(self, world):
        from cmrec import gbdt
        ws = world["ws"]
        metrics = json.loads((ws.target_dir("t1") / "metrics.json").read_text())
        assert 0.0 < metrics["oof_ndcg_at_10"] <= 1.0
        kept = (ws.target_dir("t1") / "kept.txt").read_text().split()
        assert metrics["n_features"] == len(kept)
        model = gbdt.load_model(ws.target_dir("t1") / "model.json")
        assert isinstance(model, gbdt.BaggedModel)
        assert model.folds == 3
        assert len(model.fold_models) == 3

    def test_oof_file_covers_the_valid_table(self, world):
        ws = world["ws"]
        lines = (ws.target_dir("t1") / "oof.tsv").read_text().splitlines()
        valid = features.read_table(ws.features_path("t1", "valid"))
        assert lines[0] == "user\titem\tlabel\toof_score"
        assert len(lines) - 1 == valid.n_rows
        scores = [float(line.split("\t")[3]) for line in lines[1:]]
        assert all(np.isfinite(scores))

    def test_ranked_run_permutes_the_candidates(self, world):
        ws = world["ws"]
        ranked = evaluation.read_run_file(ws.target_dir("t1")
                                          / "test_ranked.tsv")
        source = dict(load_run(ws.run_path("t1", "test")).entries)
        assert {u for u, _ in ranked} == set(source)
        for user, scored in ranked:
            assert {i for i, _ in scored} == set(source[user])
            values = [s for _, s in scored]
            assert values == sorted(values, reverse=True)

    def test_retrain_is_deterministic(self, world):
        ws = world["ws"]
        model_before = (ws.target_dir("t1") / "model.json").read_bytes()
        run_before = (ws.target_dir("t1") / "test_ranked.tsv").read_bytes()
        pipeline.run_train(world["config"], "t1")
        assert (ws.target_dir("t1") / "model.json").read_bytes() == model_before
        assert (ws.target_dir("t1")
                / "test_ranked.tsv").read_bytes() == run_before


class TestEvaluateReport:
    def test_evaluation_scores_every_eval_user(self, world):
        ws = world["ws"]
        report = json.loads((ws.target_dir("t1") / "evaluation.json").read_text())
        assert 0.0 <= report["ndcg_at_10"] <= 1.0
        assert report["n_users"] == world["meta"]["markets"]["t1"]["test_qrel"]
        assert report["market"] == "t1"

    def test_explicit_run_and_qrels_paths_agree_with_defaults(self, world):
        ws = world["ws"]
        default = json.loads((ws.target_dir("t1")
                              / "evaluation.json").read_text())
        explicit = pipeline.run_evaluate(
            world["config"], "t1",
            run_path=ws.target_dir("t1") / "test_ranked.tsv",
            qrels_path=world["data"] / "t1" / "test_qrel.tsv")
        assert explicit["ndcg_at_10"] == default["ndcg_at_10"]

    def test_final_report_weights_renormalize(self, world):
        final = world["final"]
        ws = world["ws"]
        per_market = {t: json.loads((ws.target_dir(t)
                                     / "evaluation.json").read_text())
                      ["ndcg_at_10"] for t in ("t1", "t2")}
        assert final["per_market"] == pytest.approx(per_market)
        w = evaluation.DEFAULT_MARKET_WEIGHTS
        want = ((w["t1"] * per_market["t1"] + w["t2"] * per_market["t2"])
                / (w["t1"] + w["t2"]))
        assert final["weighted"] == pytest.approx(want)
        assert (ws.root / "final.json").exists()

    def test_report_requires_every_evaluation(self, world):
        ws = world["ws"]
        path = ws.target_dir("t2") / "evaluation.json"
        hidden = path.with_suffix(".hidden")
        path.rename(hidden)
        try:
            with pytest.raises(StageError, match="evaluate first"):
                pipeline.run_report(world["config"])
        finally:
            hidden.rename(path)

    def test_custom_market_weights_override_the_fit(self, world):
        config = pipeline_config(world["data"],
                                 world["config"].workspace,
                                 market_weights={"t1": 1.0, "t2": 0.0})
        report = pipeline.run_report(config)
        ws = world["ws"]
        t1 = json.loads((ws.target_dir("t1")
                         / "evaluation.json").read_text())["ndcg_at_10"]
        assert report["weighted"] == pytest.approx(t1)
        # restore the fixture's final.json for other tests
        pipeline.run_report(world["config"])


class TestCli:
    @pytest.fixture()
    def config_file(self, world, tmp_path):
        config = pipeline_config(world["data"], tmp_path / "cli_ws")
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config.to_dict()) + "\n")
        return path

    def test_usage_error_exits_1(self, capsys):
        assert cli.main(["prerank"]) == 1
        assert "cmrec: error:" in capsys.readouterr().err
        assert cli.main(["not-a-command"]) == 1

    def test_missing_config_file_exits_1(self, tmp_path, capsys):
        assert cli.main(["ingest", "--config",
                         str(tmp_path / "absent.json")]) == 1
        assert "not found" in capsys.readouterr().err

    def test_data_error_exits_2(self, tmp_path, capsys):
        config = pipeline_config(tmp_path / "missing_data", tmp_path / "w")
        path = tmp_path / "c.json"
        path.write_text(json.dumps(config.to_dict()))
        assert cli.main(["ingest", "--config", str(path)]) == 2
        assert "data directory" in capsys.readouterr().err

    def test_stage_error_exits_3(self, config_file, capsys):
        assert cli.main(["prerank", "--config", str(config_file),
                         "--target", "t1"]) == 3
        assert "ingest first" in capsys.readouterr().err

    def test_ingest_success_exits_0(self, config_file, capsys):
        assert cli.main(["ingest", "--config", str(config_file)]) == 0
        out = capsys.readouterr().out
        assert "ingested" in out and "3 markets" in out

    def test_workspace_and_seed_overrides(self, config_file, tmp_path,
                                          capsys):
        override = tmp_path / "override_ws"
        assert cli.main(["ingest", "--config", str(config_file),
                         "--workspace", str(override), "--seed", "99"]) == 0
        assert (override / "snapshot" / "meta.json").exists()

    def test_evaluate_with_run_needs_single_target(self, config_file,
                                                   capsys):
        assert cli.main(["evaluate", "--config", str(config_file),
                         "--run", "whatever.tsv"]) == 1
        assert "--target" in capsys.readouterr().err

    def test_help_exits_0(self, capsys):
        assert cli.main(["--help"]) == 0
        assert "command" in capsys.readouterr().out

    def test_locked_workspace_exits_3(self, config_file, capsys):
        config = json.loads(config_file.read_text())
        ws = Path(config["workspace"])
        ws.mkdir(parents=True, exist_ok=True)
        (ws / ".lock").write_text("held\n")
        try:
            assert cli.main(["ingest", "--config", str(config_file)]) == 3
            assert "locked" in capsys.readouterr().err
        finally:
            (ws / ".lock").unlink()

    def test_synth_command_writes_a_dataset(self, tmp_path, capsys):
        payload = {"n_items": 120, "dim": 3, "eval_users": 4,
                   "n_candidates": 20,
                   "markets": {"s1": {"n_users": 12,
                                      "interactions_per_user": 8},
                               "t1": {"n_users": 8,
                                      "interactions_per_user": 5},
                               "t2": {"n_users": 8,
                                      "interactions_per_user": 5}}}
        spec = tmp_path / "synth.json"
        spec.write_text(json.dumps(payload))
        out = tmp_path / "data"
        assert cli.main(["synth", "--out", str(out), "--config", str(spec),
                         "--seed", "3"]) == 0
        assert (out / "t1" / "valid_run.tsv").exists()
        meta = json.loads((out / "synth_meta.json").read_text())
        assert meta["seed"] == 3
