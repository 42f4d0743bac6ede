"""End-to-end pipeline orchestration: digest-chained stage outputs, resume
semantics, stale-output refusal, and sidecar placement — all replay-backed."""

import json
from pathlib import Path

import pytest

from corpusforge.pipeline import (
    PipelineError,
    RunConfig,
    StageSpec,
    StaleOutputError,
    load_run_config,
    run_pipeline,
)
from corpusforge.records import Record, file_digest, read_records, record_to_obj, write_records

from conftest import (
    correct_text,
    seed_domain,
    seed_extraction,
    seed_solver,
    seed_teacher,
    seed_validity,
    seed_verifier,
    wrong_text,
)

TRACE_0 = "First pass: combining the two terms gives \\boxed{1}."
TRACE_1 = "Second pass: regrouping confirms the total \\boxed{1}."

EXPECTED_FUNNEL = [
    ("ingest", 10, 10),
    ("dedup", 10, 9),
    ("decontam", 9, 8),
    ("filter", 8, 4),
    ("extract-answer", 4, 3),
    ("stage1", 3, 2),
    ("stage2", 2, 1),
    ("distill", 1, 1),
    ("verify", 1, 1),
    ("finalize", 1, 1),
]


def question(i: int) -> str:
    return f"Compute the value of {i} plus {i + 1}."


def build_fixture(tmp_path: Path) -> RunConfig:
    """Ten records exercising every drop reason on the way to one survivor.

    r000 survives end to end; r001 dies at stage2 (never solved with thinking);
    r002 duplicates r000; r003 matches a benchmark; r004 is Non-Math; r005 is
    invalid; r006 is a proof; r007 extracts an empty answer; r008 is solved
    without thinking (too easy); r009 gets a malformed validity verdict.
    """
    store = tmp_path / "store"
    store.mkdir(exist_ok=True)
    questions = {i: question(i) for i in range(10)}
    questions[2] = questions[0].upper().replace(" PLUS ", "  PLUS ")
    questions[6] = "Prove that 6 plus 7 exceeds 12."
    gold = {0: "1", 1: "3", 8: "17"}
    records = [
        Record(
            id=f"r{i:03d}",
            source="unit",
            question=questions[i],
            solution=f"Adding carefully gives \\boxed{{{gold.get(i, 0)}}}.",
        )
        for i in range(10)
    ]
    src = tmp_path / "input.jsonl"
    write_records(records, src, emit_manifest=False)

    bench = tmp_path / "benchmarks.jsonl"
    bench.write_text(
        json.dumps({"name": "held-out", "question": questions[3]}) + "\n", encoding="utf-8"
    )

    # gold-answer-carrying copies for seeding solver/verifier expectations
    seeded = {i: Record(id=f"r{i:03d}", question=questions[i], answer=gold.get(i)) for i in range(10)}
    for i in (0, 1, 4, 5, 6, 7, 8, 9):
        seed_domain(store, seeded[i], label="Non-Math" if i == 4 else "Algebra")
    for i in (0, 1, 5, 6, 7, 8, 9):
        if i == 9:
            seed_validity(store, seeded[i], raw="<answer>yes</answer>")
        else:
            seed_validity(store, seeded[i], verdict="NO" if i == 5 else "YES")
    for i in (0, 1, 7, 8):
        full = Record(id=f"r{i:03d}", question=questions[i], solution=records[i].solution)
        if i == 7:
            seed_extraction(store, full, "", raw="<answer></answer>")
        else:
            seed_extraction(store, full, gold[i])
    seed_solver(store, seeded[0], "direct", [wrong_text(s) for s in range(4)])
    seed_solver(store, seeded[1], "direct", [wrong_text(s) for s in range(4)])
    seed_solver(store, seeded[8], "direct", [correct_text(seeded[8])] + [wrong_text(s) for s in range(3)])
    seed_solver(
        store,
        seeded[0],
        "thinking",
        [wrong_text(0), wrong_text(1), correct_text(seeded[0]), wrong_text(3), wrong_text(4)],
    )
    seed_solver(store, seeded[1], "thinking", [wrong_text(s) for s in range(5)])
    seed_teacher(store, seeded[0], [TRACE_0, TRACE_1])
    seed_verifier(store, seeded[0], TRACE_0, "0")
    seed_verifier(store, seeded[0], TRACE_1, "1")

    stages = [
        StageSpec("ingest"),
        StageSpec("dedup"),
        StageSpec("decontam", {"benchmarks": str(bench)}),
        StageSpec("filter", {"gates": ["domain", "validity", "problem-type"]}),
        StageSpec("extract-answer"),
        StageSpec("stage1"),
        StageSpec("stage2"),
        StageSpec("distill", {"k": 2}),
        StageSpec("verify"),
        StageSpec("finalize"),
    ]
    return RunConfig(input=src, out_dir=tmp_path / "work", stages=stages, replay_dir=store)


@pytest.fixture()
def funnel_config(tmp_path):
    return build_fixture(tmp_path)


def test_full_run_follows_the_designed_funnel(funnel_config):
    result = run_pipeline(funnel_config)
    assert result.network_calls == 0
    assert result.executed == len(EXPECTED_FUNNEL)
    observed = [
        (s.name, s.manifest.input_count, s.manifest.output_count) for s in result.stages
    ]
    assert observed == EXPECTED_FUNNEL
    for stage in result.stages:
        assert stage.manifest.output_count == stage.manifest.input_count - stage.manifest.removed_count


def test_stage_outputs_are_digest_chained(funnel_config):
    result = run_pipeline(funnel_config)
    prev = Path(funnel_config.input)
    for stage in result.stages:
        assert stage.manifest.input_digest == file_digest(prev)
        assert stage.manifest.output_digest == file_digest(stage.output_path)
        prev = stage.output_path
    names = sorted(
        p.name
        for p in funnel_config.out_dir.glob("[0-9][0-9]_*.jsonl")
        if p.name.count(".") == 1  # the stage outputs themselves, not their sidecars
    )
    assert names == [f"{i:02d}_{name}.jsonl" for i, (name, _, _) in enumerate(EXPECTED_FUNNEL)]


def test_final_record_uses_first_verified_trace(funnel_config):
    result = run_pipeline(funnel_config)
    final = list(read_records(result.stages[-1].output_path, strict=True))
    assert [r.id for r in final] == ["r000"]
    rec = final[0]
    assert rec.solution == TRACE_1  # trace 0 failed verification
    assert rec.answer == "1"
    assert rec.question == question(0)
    assert rec.responses == ()
    assert rec.domain is None  # the export view carries only the five core fields


def test_second_run_skips_every_stage(funnel_config):
    run_pipeline(funnel_config)
    again = run_pipeline(funnel_config)
    assert again.executed == 0
    assert all(s.skipped for s in again.stages)
    assert again.network_calls == 0


def test_tampered_intermediate_refuses_without_force(funnel_config):
    run_pipeline(funnel_config)
    target = funnel_config.out_dir / "02_decontam.jsonl"
    target.write_text(target.read_text(encoding="utf-8") + "\n", encoding="utf-8")
    with pytest.raises(StaleOutputError, match="decontam"):
        run_pipeline(funnel_config)


def test_force_rebuilds_only_the_tampered_stage(funnel_config):
    run_pipeline(funnel_config)
    target = funnel_config.out_dir / "02_decontam.jsonl"
    target.write_text(target.read_text(encoding="utf-8") + "\n", encoding="utf-8")
    result = run_pipeline(funnel_config, force=True)
    assert [s.name for s in result.stages if not s.skipped] == ["decontam"]
    # the rebuild restored byte-identical content, so downstream stages skipped
    assert result.executed == 1


def test_tampered_source_input_refuses(funnel_config):
    run_pipeline(funnel_config)
    src = Path(funnel_config.input)
    extra = Record(id="r999", source="unit", question="Compute the value of 99 plus 100.")
    src.write_text(
        src.read_text(encoding="utf-8") + json.dumps(record_to_obj(extra)) + "\n", encoding="utf-8"
    )
    with pytest.raises(StaleOutputError, match="ingest"):
        run_pipeline(funnel_config)


def test_sidecars_land_next_to_their_stage(funnel_config):
    run_pipeline(funnel_config)
    out = funnel_config.out_dir

    removals = [json.loads(l) for l in (out / "02_decontam.jsonl.removals.jsonl").read_text().splitlines()]
    assert [r["id"] for r in removals] == ["r003"]

    quarantine = [json.loads(l) for l in (out / "03_filter.jsonl.quarantine.jsonl").read_text().splitlines()]
    assert [(q["id"], q["gate"]) for q in quarantine] == [("r009", "validity")]

    passrates = [json.loads(l) for l in (out / "05_stage1.jsonl.passrates.jsonl").read_text().splitlines()]
    by_id = {p["record_id"]: p for p in passrates}
    assert set(by_id) == {"r000", "r001", "r008"}
    assert by_id["r008"]["correct"] == 1 and by_id["r008"]["k"] == 4
    assert by_id["r000"]["pass_rate"] == 0.0

    verdicts = [json.loads(l) for l in (out / "08_verify.jsonl.verdicts.jsonl").read_text().splitlines()]
    assert verdicts == [
        {"id": "r000", "sample_index": 0, "verdict": False},
        {"id": "r000", "sample_index": 1, "verdict": True},
    ]


def test_output_without_manifest_is_silently_rebuilt(funnel_config):
    run_pipeline(funnel_config)
    (funnel_config.out_dir / "04_extract-answer.jsonl.manifest.json").unlink()
    result = run_pipeline(funnel_config)
    assert [s.name for s in result.stages if not s.skipped] == ["extract-answer"]


def test_unknown_stage_and_empty_config_raise(funnel_config, tmp_path):
    with pytest.raises(PipelineError, match="no stages"):
        run_pipeline(RunConfig(input=funnel_config.input, out_dir=tmp_path / "x"))
    config = RunConfig(
        input=funnel_config.input,
        out_dir=tmp_path / "x",
        stages=[StageSpec("ingest"), StageSpec("transmogrify")],
        replay_dir=funnel_config.replay_dir,
    )
    with pytest.raises(PipelineError, match="transmogrify"):
        run_pipeline(config)


def test_decontam_requires_benchmarks_param(funnel_config, tmp_path):
    config = RunConfig(
        input=funnel_config.input,
        out_dir=tmp_path / "x",
        stages=[StageSpec("ingest"), StageSpec("decontam")],
        replay_dir=funnel_config.replay_dir,
    )
    with pytest.raises(PipelineError, match="benchmarks"):
        run_pipeline(config)


def test_relative_stage_params_resolve_against_base_dir(funnel_config, tmp_path):
    base = tmp_path  # the benchmark file lives here
    config = RunConfig(
        input=funnel_config.input,
        out_dir=tmp_path / "rel",
        stages=[StageSpec("ingest"), StageSpec("decontam", {"benchmarks": "benchmarks.jsonl"})],
        replay_dir=funnel_config.replay_dir,
        base_dir=base,
    )
    result = run_pipeline(config)
    assert result.stages[-1].manifest.output_count == 9


def test_load_run_config_resolves_relative_paths(tmp_path):
    cfg_dir = tmp_path / "conf"
    cfg_dir.mkdir()
    obj = {
        "input": "data/in.jsonl",
        "out_dir": "out",
        "replay_dir": "/abs/store",
        "seed": 7,
        "workers": 3,
        "rate_limits": {"teacher": 2.5},
        "roles": {"teacher": {"url": "https://example.test/v1", "model": "big-teacher"}},
        "stages": [{"name": "ingest"}, {"name": "distill", "params": {"k": 3}}],
    }
    path = cfg_dir / "run.json"
    path.write_text(json.dumps(obj), encoding="utf-8")
    config = load_run_config(path)
    assert config.input == cfg_dir / "data/in.jsonl"
    assert config.out_dir == cfg_dir / "out"
    assert config.replay_dir == Path("/abs/store")
    assert config.base_dir == cfg_dir
    assert config.seed == 7 and config.workers == 3
    assert config.rate_limits == {"teacher": 2.5}
    assert config.roles["teacher"].model == "big-teacher"
    assert [s.name for s in config.stages] == ["ingest", "distill"]
    assert config.stages[1].params == {"k": 3}

    ypath = cfg_dir / "run.yaml"
    ypath.write_text(
        "input: data/in.jsonl\nout_dir: out\nreplay_dir: /abs/store\nseed: 7\nworkers: 3\n"
        "rate_limits: {teacher: 2.5}\n"
        "roles: {teacher: {url: 'https://example.test/v1', model: big-teacher}}\n"
        "stages:\n- name: ingest\n- {name: distill, params: {k: 3}}\n",
        encoding="utf-8",
    )
    assert load_run_config(ypath) == config


def test_load_run_config_requires_input_and_out_dir(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"out_dir": "x"}), encoding="utf-8")
    with pytest.raises(PipelineError, match="input"):
        load_run_config(path)
