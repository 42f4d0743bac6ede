"""Command-line surface: subcommand wiring, exit codes, and stdout/stderr
contracts, exercised fully offline."""

import json

import pytest

from corpusforge.cli import main
from corpusforge.records import (
    GeneratedResponse,
    Record,
    load_manifest,
    read_records,
    record_to_obj,
    write_records,
)

from conftest import correct_text, mk_record, seed_solver, wrong_text


def write_input(tmp_path, records, name="in.jsonl"):
    path = tmp_path / name
    write_records(records, path, emit_manifest=False)
    return path


def read_ids(path):
    return [r.id for r in read_records(path, strict=True)]


# --- single-stage subcommands ---


def test_ingest_writes_output_and_manifest(tmp_path, capsys):
    src = write_input(tmp_path, [mk_record(i) for i in range(3)])
    out = tmp_path / "00.jsonl"
    assert main(["ingest", "--input", str(src), "--output", str(out)]) == 0
    assert read_ids(out) == ["r000", "r001", "r002"]
    manifest = load_manifest(tmp_path / "00.jsonl.manifest.json")
    assert manifest.stage == "ingest"
    assert "ingest: 3 in, 3 out, 0 removed" in capsys.readouterr().out


def test_ingest_strict_fails_on_malformed_line(tmp_path, capsys):
    src = tmp_path / "in.jsonl"
    src.write_text('{"id": "a", "question": "Compute 1 plus 1."}\nnot json\n', encoding="utf-8")
    out = tmp_path / "00.jsonl"
    assert main(["ingest", "--strict", "--input", str(src), "--output", str(out)]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["ingest", "--input", str(src), "--output", str(out)]) == 0


def test_dedup_removes_case_variants(tmp_path, capsys):
    records = [mk_record(0), mk_record(1)]
    records.append(mk_record(2, question=records[0].question.upper()))
    src = write_input(tmp_path, records)
    out = tmp_path / "dedup.jsonl"
    assert main(["dedup", "--input", str(src), "--output", str(out)]) == 0
    assert read_ids(out) == ["r000", "r001"]
    assert "1 removed" in capsys.readouterr().out


def test_decontam_drops_benchmark_matches(tmp_path):
    records = [mk_record(i) for i in range(4)]
    src = write_input(tmp_path, records)
    bench = tmp_path / "bench.jsonl"
    bench.write_text(
        json.dumps({"name": "eval", "question": records[2].question}) + "\n", encoding="utf-8"
    )
    out = tmp_path / "clean.jsonl"
    code = main(["decontam", "--input", str(src), "--output", str(out), "--benchmarks", str(bench)])
    assert code == 0
    assert read_ids(out) == ["r000", "r001", "r003"]
    removals = (tmp_path / "clean.jsonl.removals.jsonl").read_text(encoding="utf-8")
    assert json.loads(removals)["id"] == "r002"


def test_select_stage1_uses_replay_store(tmp_path, capsys):
    store = tmp_path / "store"
    store.mkdir()
    hard = mk_record(0, answer="7")
    easy = mk_record(1, answer="9")
    seed_solver(store, hard, "direct", [wrong_text(s) for s in range(4)])
    seed_solver(store, easy, "direct", [correct_text(easy)] + [wrong_text(s) for s in range(3)])
    src = write_input(tmp_path, [hard, easy])
    out = tmp_path / "selected.jsonl"
    code = main(
        ["select", "--stage", "1", "--input", str(src), "--output", str(out), "--replay", str(store)]
    )
    assert code == 0
    assert read_ids(out) == ["r000"]
    assert "stage1: 2 in, 1 out, 1 removed" in capsys.readouterr().out


def test_select_replay_miss_is_a_clean_error(tmp_path, capsys):
    src = write_input(tmp_path, [mk_record(0, answer="7")])
    store = tmp_path / "empty-store"
    store.mkdir()
    out = tmp_path / "selected.jsonl"
    code = main(
        ["select", "--stage", "1", "--input", str(src), "--output", str(out), "--replay", str(store)]
    )
    assert code == 1
    assert "error:" in capsys.readouterr().err
    assert not out.exists()


def test_finalize_policies(tmp_path):
    responses = (
        GeneratedResponse(text="Route one gives \\boxed{4}.", verified=False),
        GeneratedResponse(text="Route two gives \\boxed{4}.", verified=True),
    )
    rec = mk_record(0, answer="4", responses=responses)
    src = write_input(tmp_path, [rec])
    out = tmp_path / "final.jsonl"
    assert main(["finalize", "--input", str(src), "--output", str(out)]) == 0
    final = list(read_records(out, strict=True))
    assert [r.id for r in final] == ["r000"]
    assert final[0].solution == "Route two gives \\boxed{4}."

    out_all = tmp_path / "final-all.jsonl"
    code = main(
        ["finalize", "--policy", "all_verified", "--input", str(src), "--output", str(out_all)]
    )
    assert code == 0
    assert read_ids(out_all) == ["r000#1"]


# --- reporting commands ---


def test_stats_emits_parsable_json(tmp_path, capsys):
    records = [mk_record(i, domain="Algebra" if i % 2 else "Geometry") for i in range(6)]
    src = write_input(tmp_path, records)
    assert main(["stats", "--input", str(src)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["lengths"]["count"] == 6
    assert report["domains"]["Algebra"]["count"] == 3
    assert report["sources"]["unit"]["fraction"] == 1.0


def test_stats_tokenizer_mode_flag(tmp_path, capsys):
    records = [Record(id="a", question="one two", solution="three four five")]
    src = write_input(tmp_path, records)
    assert main(["stats", "--input", str(src), "--tokenizer-mode", "question"]) == 0
    assert json.loads(capsys.readouterr().out)["lengths"]["max"] == 2


def test_efficiency_table_and_json(tmp_path, capsys):
    scores = tmp_path / "scores.csv"
    scores.write_text(
        "name,size,s_base,s_sft\ntiny,817,46.0,54.1\nbig,506000,53.2,72.8\n", encoding="utf-8"
    )
    assert main(["efficiency", "--scores", str(scores)]) == 0
    table = capsys.readouterr().out
    assert "+9.914" in table
    assert "+0.039" in table

    assert main(["efficiency", "--scores", str(scores), "--json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows[0]["dataset_name"] == "tiny"
    assert rows[0]["efficiency"] == pytest.approx(9.9143206, abs=1e-6)


# --- mixture ---


def mixture_setup(tmp_path, patch_budget):
    anchor = [
        Record(id=f"core-{i}", source="core", question=f"Anchor question {i} about totals.")
        for i in range(3)
    ]
    patch = [
        Record(id=f"extra-{i:02d}", source="extra", question=f"Patch question {i} about ratio {i}.")
        for i in range(8)
    ]
    src = write_input(tmp_path, anchor + patch, name="pool.jsonl")
    sidecar = tmp_path / "emb.jsonl"
    sidecar.write_text(
        "".join(
            json.dumps({"id": rec.id, "vector": [float(i % 3), float(i // 3)]}) + "\n"
            for i, rec in enumerate(patch)
        ),
        encoding="utf-8",
    )
    plan = tmp_path / "plan.json"
    plan.write_text(
        json.dumps(
            {
                "anchor": "core",
                "patches": [{"source": "extra", "budget": patch_budget}],
                "n_clusters": 2,
            }
        ),
        encoding="utf-8",
    )
    return src, sidecar, plan


def test_mix_builds_anchor_plus_patch(tmp_path, capsys):
    src, sidecar, plan = mixture_setup(tmp_path, patch_budget=4)
    out = tmp_path / "mixture.jsonl"
    code = main(
        [
            "mix",
            "--input", str(src),
            "--output", str(out),
            "--plan", str(plan),
            "--embeddings", str(sidecar),
        ]
    )
    assert code == 0
    ids = read_ids(out)
    assert ids[:3] == ["core-0", "core-1", "core-2"]
    assert len(ids) == 7
    stdout = capsys.readouterr().out
    assert "core=3" in stdout and "extra=4" in stdout
    manifest = load_manifest(tmp_path / "mixture.jsonl.manifest.json")
    assert manifest.stage == "mix"
    assert manifest.output_count == 7


def test_mix_infeasible_budget_exits_nonzero(tmp_path, capsys):
    src, sidecar, plan = mixture_setup(tmp_path, patch_budget=9)
    out = tmp_path / "mixture.jsonl"
    code = main(
        [
            "mix",
            "--input", str(src),
            "--output", str(out),
            "--plan", str(plan),
            "--embeddings", str(sidecar),
        ]
    )
    assert code == 1
    err = capsys.readouterr().err
    assert "error:" in err and "achievable maximum is 8" in err
    assert not out.exists()


# --- configured runs ---


def run_config_file(tmp_path):
    records = [mk_record(i) for i in range(4)]
    records.append(mk_record(9, question=records[0].question.upper()))
    write_input(tmp_path, records, name="raw.jsonl")
    cfg = tmp_path / "run.json"
    cfg.write_text(
        json.dumps(
            {
                "input": "raw.jsonl",
                "out_dir": "out",
                "stages": [{"name": "ingest"}, {"name": "dedup"}],
            }
        ),
        encoding="utf-8",
    )
    return cfg


def test_run_executes_then_resumes(tmp_path, capsys):
    cfg = run_config_file(tmp_path)
    assert main(["run", "--config", str(cfg)]) == 0
    first = capsys.readouterr().out
    assert "ingest: ran, 5 in, 5 out" in first
    assert "dedup: ran, 5 in, 4 out" in first
    assert "network calls: 0" in first

    assert main(["run", "--config", str(cfg)]) == 0
    second = capsys.readouterr().out
    assert "ingest: skipped" in second and "dedup: skipped" in second


def test_run_stale_output_exit_code_and_hint(tmp_path, capsys):
    cfg = run_config_file(tmp_path)
    assert main(["run", "--config", str(cfg)]) == 0
    capsys.readouterr()
    tampered = tmp_path / "out" / "00_ingest.jsonl"
    tampered.write_text(tampered.read_text(encoding="utf-8") + "\n", encoding="utf-8")
    assert main(["run", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "ingest" in err
    assert "--force" in err
    assert main(["run", "--config", str(cfg), "--force"]) == 0


def test_missing_input_is_a_clean_error(tmp_path, capsys):
    code = main(["dedup", "--input", str(tmp_path / "absent.jsonl"), "--output", str(tmp_path / "o")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_filter_unknown_gate_is_a_clean_error(tmp_path, capsys):
    src = write_input(tmp_path, [mk_record(0)])
    out = tmp_path / "o.jsonl"
    code = main(["filter", "--gates", "sparkle", "--input", str(src), "--output", str(out)])
    assert code == 1
    assert "unknown gates" in capsys.readouterr().err


def test_conflicting_duplicate_ids_refuse_to_write(tmp_path, capsys):
    # same id, different questions: dedup keeps both, the writer must refuse
    src = tmp_path / "in.jsonl"
    src.write_text(
        json.dumps(record_to_obj(mk_record(0)))
        + "\n"
        + json.dumps(record_to_obj(mk_record(1, id="r000")))
        + "\n",
        encoding="utf-8",
    )
    out = tmp_path / "o.jsonl"
    assert main(["dedup", "--input", str(src), "--output", str(out)]) == 1
    assert "duplicate" in capsys.readouterr().err
