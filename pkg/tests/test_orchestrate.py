import json
import threading
from pathlib import Path

import pytest

from difficulty_sampler import cli, orchestrate
from difficulty_sampler.backend import BackendConfig
from difficulty_sampler.orchestrate import (
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_UNSCORED,
    ConfigMismatch,
    RunConfig,
    Thresholds,
    content_hash,
    resume,
    run_pipeline,
)
from difficulty_sampler.synthetic import build_label_fixture, write_label_fixture
from difficulty_sampler.types import ConfigError, Label, Method
from difficulty_sampler.util import read_jsonl

from conftest import make_stub_config


def read_labels(run_dir) -> dict:
    labels = {}
    for rec in read_jsonl(Path(run_dir) / "labels.jsonl"):
        labels.setdefault(rec["id"], {})[rec["method"]] = rec["label"]
    return labels


def run_dir_snapshot(run_dir, exclude=("report.json",)) -> dict:
    """relpath -> bytes for every file in a run directory."""
    run_dir = Path(run_dir)
    return {
        p.relative_to(run_dir).as_posix(): p.read_bytes()
        for p in sorted(run_dir.rglob("*"))
        if p.is_file() and p.name not in exclude
    }


class CrashAfter:
    """Backend wrapper that injects a hard crash after N predictions."""

    def __init__(self, inner, limit: int):
        self.inner = inner
        self.limit = limit
        self._count = 0
        self._lock = threading.Lock()

    def _tick(self):
        with self._lock:
            self._count += 1
            if self._count > self.limit:
                raise KeyboardInterrupt("injected crash")

    def predict(self, request):
        self._tick()
        return self.inner.predict(request)

    def predict_with_trace(self, request):
        self._tick()
        return self.inner.predict_with_trace(request)


class TestRunPipeline:
    def test_stub_run_matches_construction(self, small_synth, tmp_path):
        config = make_stub_config(small_synth, tmp_path / "run")
        report = run_pipeline(config)
        assert report.exit_code == EXIT_OK
        assert report.failure_count == 0
        assert report.unscored == 0
        labels = read_labels(tmp_path / "run")
        assert labels == small_synth.expected
        # two labels per id on a both-methods run
        assert all(set(v) == {"pism", "cmab"} for v in labels.values())
        lines = (tmp_path / "run" / "labels.jsonl").read_text().splitlines()
        assert len(lines) == 2 * len(small_synth.expected)

    def test_rerun_is_content_hash_identical(self, small_synth, tmp_path):
        r1 = run_pipeline(make_stub_config(small_synth, tmp_path / "a"))
        r2 = run_pipeline(make_stub_config(small_synth, tmp_path / "b"))
        assert r1.content_hash == r2.content_hash
        assert run_dir_snapshot(tmp_path / "a", exclude=("report.json",)) == run_dir_snapshot(
            tmp_path / "b", exclude=("report.json",)
        )

    def test_schedule_independence(self, small_synth, tmp_path):
        hashes = set()
        for concurrency in (1, 8):
            config = make_stub_config(small_synth, tmp_path / f"c{concurrency}", concurrency=concurrency)
            hashes.add(run_pipeline(config).content_hash)
        assert len(hashes) == 1

    def test_trials_log_is_canonical(self, small_synth, tmp_path):
        config = make_stub_config(small_synth, tmp_path / "run", method="pism")
        report = run_pipeline(config)
        rows = read_jsonl(tmp_path / "run" / "trials.jsonl")
        assert len(rows) == report.trial_count
        keys = [(r["sample_id"], r["mask_ratio"], r["trial_k"]) for r in rows]
        assert keys == sorted(keys, key=lambda k: (k[0], k[1], k[2]))
        assert len(set(keys)) == len(keys)
        # unsolved samples short-circuit after the unmasked row
        per_sample = {}
        for r in rows:
            per_sample[r["sample_id"]] = per_sample.get(r["sample_id"], 0) + 1
        for sid, labels in small_synth.expected.items():
            assert per_sample[sid] == (10 if labels["pism"] == "unsolved" else 100)

    def test_totals_consistent_with_labels(self, small_synth, tmp_path):
        config = make_stub_config(small_synth, tmp_path / "run")
        report = run_pipeline(config)
        labels = read_labels(tmp_path / "run")
        manifest_rows = read_jsonl(small_synth.manifest_path)
        task_of = {r["id"]: r["task_type"] for r in manifest_rows}
        for method, tasks in report.totals.items():
            for task, counts in tasks.items():
                for label, count in counts.items():
                    have = sum(
                        1
                        for sid, by_method in labels.items()
                        if task_of[sid] == task and by_method[method] == label
                    )
                    assert have == count, (method, task, label)

    def test_cmab_only_run(self, small_synth, tmp_path):
        config = make_stub_config(small_synth, tmp_path / "run", method="cmab")
        report = run_pipeline(config)
        assert report.trial_count == 0
        assert not (tmp_path / "run" / "trials.jsonl").exists()
        rows = read_jsonl(tmp_path / "run" / "cmab_results.jsonl")
        assert len(rows) == len(small_synth.expected)
        labels = read_labels(tmp_path / "run")
        assert {sid: v["cmab"] for sid, v in labels.items()} == small_synth.expected_for("cmab")
        again = run_pipeline(make_stub_config(small_synth, tmp_path / "run2", method="cmab"))
        assert again.content_hash == report.content_hash

    def test_config_echo_guard(self, small_synth, tmp_path):
        config = make_stub_config(small_synth, tmp_path / "run")
        run_pipeline(config)
        other = make_stub_config(small_synth, tmp_path / "run", seed=99)
        with pytest.raises(ConfigMismatch):
            run_pipeline(other)

    def test_unreachable_backend_all_unscored(self, small_synth, tmp_path):
        config = RunConfig(
            manifest=str(small_synth.manifest_path),
            backend=BackendConfig(
                kind="http", endpoint="http://127.0.0.1:9/unreachable",
                timeout_s=0.2, max_retries=0, retry_base_s=0.01,
            ),
            method="pism",
            out=str(tmp_path / "run"),
            concurrency=8,
        )
        report = run_pipeline(config)
        assert report.exit_code == EXIT_UNSCORED
        assert report.unscored == len(small_synth.expected)
        labels = read_labels(tmp_path / "run")
        assert all(v["pism"] == "unscored" for v in labels.values())

    def test_judge_external_writes_adjudication_log(self, small_synth, tmp_path):
        config = make_stub_config(small_synth, tmp_path / "run", method="pism", judge_mode="external")
        report = run_pipeline(config)
        rows = read_jsonl(tmp_path / "run" / "adjudication.jsonl")
        assert len(rows) == report.trial_count
        assert {"id", "mask_ratio", "trial_k", "prediction", "ground_truth", "answer_type", "rule_delta"} <= set(rows[0])

    def test_dump_masks(self, small_synth, tmp_path):
        masks_dir = tmp_path / "masks"
        config = make_stub_config(
            small_synth, tmp_path / "run", method="pism", dump_masks=str(masks_dir)
        )
        run_pipeline(config)
        some_id = next(iter(small_synth.expected))
        assert (masks_dir / f"{some_id}_0.5_1.png").is_file()


class TestResume:
    def _crashed_run(self, small_synth, tmp_path, monkeypatch, limit, method="both"):
        config = make_stub_config(small_synth, tmp_path / "crashed", method=method, concurrency=3)
        real_create = orchestrate.create_backend
        monkeypatch.setattr(
            orchestrate, "create_backend", lambda backend_config: CrashAfter(real_create(backend_config), limit)
        )
        with pytest.raises(KeyboardInterrupt):
            run_pipeline(config)
        monkeypatch.setattr(orchestrate, "create_backend", real_create)
        return tmp_path / "crashed"

    def test_resume_matches_uninterrupted_control(self, small_synth, tmp_path, monkeypatch):
        control_config = make_stub_config(small_synth, tmp_path / "control", method="both", concurrency=3)
        control_report = run_pipeline(control_config)

        crashed_dir = self._crashed_run(small_synth, tmp_path, monkeypatch, limit=control_report.trial_count // 2)
        partial = read_jsonl(crashed_dir / "trials.jsonl")
        assert 0 < len(partial) < control_report.trial_count

        resumed_report = resume(crashed_dir)
        assert resumed_report.content_hash == control_report.content_hash
        assert run_dir_snapshot(crashed_dir) == run_dir_snapshot(tmp_path / "control")

    def test_resume_of_complete_run_is_noop(self, small_synth, tmp_path):
        config = make_stub_config(small_synth, tmp_path / "run")
        report = run_pipeline(config)
        again = resume(tmp_path / "run")
        assert again.content_hash == report.content_hash
        assert again.trial_count == report.trial_count

    def test_resume_with_changed_seed_rejected(self, small_synth, tmp_path):
        run_pipeline(make_stub_config(small_synth, tmp_path / "run", seed=7))
        with pytest.raises(ConfigMismatch):
            resume(tmp_path / "run", check={"seed": 8})

    def test_resume_without_echo_rejected(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(ConfigError):
            resume(tmp_path / "empty")

    def test_resume_after_torn_and_duplicated_log(self, small_synth, tmp_path, monkeypatch):
        """A torn trailing line and duplicated records never survive resume."""
        control = run_pipeline(make_stub_config(small_synth, tmp_path / "control", method="pism", concurrency=3))
        crashed_dir = self._crashed_run(small_synth, tmp_path, monkeypatch, limit=200, method="pism")
        trials_path = crashed_dir / "trials.jsonl"
        lines = trials_path.read_text().splitlines(keepends=True)
        # duplicate an early record and tear the final one mid-write
        mangled = lines[:1] + lines + [lines[-1][: len(lines[-1]) // 2].rstrip("\n")]
        trials_path.write_text("".join(mangled))

        report = resume(crashed_dir)
        assert report.content_hash == control.content_hash
        rows = read_jsonl(trials_path)
        keys = [(r["sample_id"], r["mask_ratio"], r["trial_k"]) for r in rows]
        assert len(keys) == len(set(keys))
        assert run_dir_snapshot(crashed_dir) == run_dir_snapshot(tmp_path / "control")

    def test_resume_retries_failed_trials(self, small_synth, tmp_path, monkeypatch):
        """Unscored-by-failure samples get retried on resume."""
        flaky_state = {"fail": True}
        real_create = orchestrate.create_backend

        class FlakyOnce:
            def __init__(self, inner):
                self.inner = inner

            def predict(self, request):
                from difficulty_sampler.backend import Timeout

                if flaky_state["fail"]:
                    raise Timeout("transient outage")
                return self.inner.predict(request)

            def predict_with_trace(self, request):
                return self.inner.predict_with_trace(request)

        monkeypatch.setattr(
            orchestrate, "create_backend", lambda bc: FlakyOnce(real_create(bc))
        )
        config = make_stub_config(small_synth, tmp_path / "run", method="pism", concurrency=2)
        report = run_pipeline(config)
        assert report.unscored == len(small_synth.expected)

        flaky_state["fail"] = False
        report2 = resume(tmp_path / "run")
        assert report2.unscored == 0
        control = run_pipeline(make_stub_config(small_synth, tmp_path / "control", method="pism", concurrency=2))
        assert report2.content_hash == control.content_hash


class TestConcurrencyBound:
    def test_in_flight_upstream_requests_never_exceed_limit(
        self, small_synth, tmp_path, mock_server_factory
    ):
        import time as time_mod

        gauge = {"now": 0, "max": 0}
        lock = threading.Lock()

        def answer_fn(payload):
            with lock:
                gauge["now"] += 1
                gauge["max"] = max(gauge["max"], gauge["now"])
            time_mod.sleep(0.02)
            with lock:
                gauge["now"] -= 1
            return "B"

        server = mock_server_factory(answer_fn=answer_fn)
        rows = read_jsonl(small_synth.manifest_path)[:6]
        manifest_path = tmp_path / "mini.jsonl"
        manifest_path.write_text("".join(json.dumps(r) + "\n" for r in rows))
        config = RunConfig(
            manifest=str(manifest_path),
            image_root=str(small_synth.root),
            backend=BackendConfig(kind="http", endpoint=server.endpoint, timeout_s=5.0, max_retries=0),
            method="pism",
            seed=1,
            concurrency=3,
            out=str(tmp_path / "run"),
            thresholds=Thresholds(k_trials=1),
        )
        run_pipeline(config)
        assert 0 < gauge["max"] <= 3


class TestBackendSubstitution:
    def test_http_then_replay_scores_identical(self, small_synth, tmp_path, mock_server_factory):
        import hashlib

        def answer_fn(payload):
            image_url = payload["messages"][0]["content"][1]["image_url"]["url"]
            digest = hashlib.sha256(image_url.encode()).digest()
            return "B" if digest[0] % 2 == 0 else "A"

        server = mock_server_factory(answer_fn=answer_fn)
        cache_dir = tmp_path / "cache"
        thresholds = Thresholds(k_trials=2)
        manifest_rows = read_jsonl(small_synth.manifest_path)[:4]
        manifest_path = tmp_path / "mini.jsonl"
        manifest_path.write_text("".join(json.dumps(r) + "\n" for r in manifest_rows))

        def run(kind, out):
            if kind == "http":
                backend = BackendConfig(
                    kind="http", endpoint=server.endpoint, cache_dir=str(cache_dir),
                    timeout_s=5.0, max_retries=2, retry_base_s=0.01,
                )
            else:
                backend = BackendConfig(kind="replay", cache_dir=str(cache_dir))
            config = RunConfig(
                manifest=str(manifest_path),
                image_root=str(small_synth.root),
                backend=backend,
                method="pism",
                seed=5,
                out=str(out),
                thresholds=thresholds,
            )
            return run_pipeline(config)

        run("http", tmp_path / "live")
        run("replay", tmp_path / "replayed")
        for name in ("labels.jsonl", "pism_results.jsonl", "trials.jsonl"):
            assert (tmp_path / "live" / name).read_bytes() == (tmp_path / "replayed" / name).read_bytes()


class TestCli:
    def test_validate_ok(self, small_synth, capsys):
        code = cli.main(["validate", "--manifest", str(small_synth.manifest_path)])
        assert code == EXIT_OK
        assert "all image refs resolve" in capsys.readouterr().out

    def test_validate_missing_image(self, small_synth, tmp_path, capsys):
        rows = read_jsonl(small_synth.manifest_path)
        rows[0]["image"] = "images/definitely_missing.png"
        bad = tmp_path / "bad.jsonl"
        bad.write_text("".join(json.dumps(r) + "\n" for r in rows))
        code = cli.main(["validate", "--manifest", str(bad), "--root", str(small_synth.root)])
        assert code == EXIT_CONFIG_ERROR

    def test_pism_subcommand_and_report(self, small_synth, tmp_path, capsys):
        out = tmp_path / "run"
        code = cli.main(
            [
                "pism",
                "--manifest", str(small_synth.manifest_path),
                "--backend", "stub",
                "--stub-rules", str(small_synth.rules_path),
                "--out", str(out),
                "--seed", "3",
                "--concurrency", "2",
            ]
        )
        assert code == EXIT_OK
        printed = capsys.readouterr().out
        assert "content_hash=" in printed
        stored = json.loads((out / "report.json").read_text())["content_hash"]
        assert cli.main(["report", "--run", str(out)]) == EXIT_OK
        assert stored in capsys.readouterr().out

    def test_config_error_exit_code(self, tmp_path, capsys):
        code = cli.main(["pism", "--manifest", str(tmp_path / "none.jsonl")])
        assert code == EXIT_CONFIG_ERROR
        assert "config error" in capsys.readouterr().err

    def test_stratify_and_plan_from_fixture_files(self, tmp_path, capsys):
        counts = {Label.EASY: 40, Label.MEDIUM: 25, Label.HARD: 10, Label.UNSOLVED: 12}
        manifest, results = build_label_fixture(counts, Method.PISM)
        manifest_path, labels_path = write_label_fixture(tmp_path, manifest, results)

        code = cli.main(
            ["stratify", "--labels", str(labels_path), "--manifest", str(manifest_path), "--out", str(tmp_path / "s")]
        )
        assert code == EXIT_OK
        assert "pism/perception/medium: 25" in capsys.readouterr().out
        assert (tmp_path / "s" / "strata" / "pism" / "perception" / "hard.jsonl").is_file()

        code = cli.main(
            [
                "plan",
                "--labels", str(labels_path),
                "--manifest", str(manifest_path),
                "--out", str(tmp_path / "p"),
                "--seed", "4",
            ]
        )
        assert code == EXIT_OK
        printed = capsys.readouterr().out
        assert "pism/perception/grpo_only/mid+hard: grpo[mid+hard]=35" in printed
        plan_dirs = list((tmp_path / "p" / "plans").rglob("plan.json"))
        assert len(plan_dirs) == 12

    def test_resume_cli(self, small_synth, tmp_path, capsys):
        out = tmp_path / "run"
        run_pipeline(make_stub_config(small_synth, out, method="pism"))
        assert cli.main(["resume", str(out)]) == EXIT_OK
        assert cli.main(["resume", str(out), "--seed", "12345"]) == EXIT_CONFIG_ERROR
