"""Tests for stage plans, the weighted sampler and stage compilation."""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from tests.fixtures.sample_data import LANGUAGE_RECORD, REFER_RECORD, VQA_RECORD
from vl_instruct.corpus import ConversationRecord, CorpusRecord, Turn
from vl_instruct.errors import ConfigError, DataError, PlanError, SchemaError
from vl_instruct.grammar import TaskIdentifier
from vl_instruct.jsonl import SKIP
from vl_instruct.logger import RunLogger
from vl_instruct.mixer import (
    INCLUSION_MATRIX,
    DataCategory,
    PlanEntry,
    StagePlan,
    check_plan,
    compile_stage,
    dataset_category,
    load_plan,
    normalize_dataset_name,
    render_training_pair,
    sample_schedule,
    validate_plan,
)

PLANS_DIR = Path(__file__).resolve().parent.parent / "configs" / "plans"

VQA_PROMPT = "[INST] <Img><ImageHere></Img> [vqa] What color is the jacket? [/INST]"


def _plan(*entries, stage=2, seed=0, steps=20):
    return StagePlan(stage, tuple(entries), seed, steps)


class TestInclusionMatrix:
    """Test the stage inclusion table."""

    def test_every_cell(self):
        """Test the matrix row by row."""
        expected = {
            DataCategory.WEAKLY_LABELED: (True, False, False),
            DataCategory.GROUNDED_CAPTION: (True, False, False),
            DataCategory.CAPTION: (True, True, True),
            DataCategory.REC: (True, True, True),
            DataCategory.REG: (True, True, True),
            DataCategory.VQA: (True, True, True),
            DataCategory.MULTIMODAL_INSTRUCTION: (False, False, True),
            DataCategory.LANGUAGE: (False, False, True),
        }
        assert INCLUSION_MATRIX == expected
        assert sum(len(row) for row in INCLUSION_MATRIX.values()) == 24

    @pytest.mark.parametrize(
        "name,category",
        [
            ("COCO caption", DataCategory.CAPTION),
            ("RefCOCO+", DataCategory.REC),
            ("refcocog_reg", DataCategory.REG),
            ("Unnatural Instructions", DataCategory.LANGUAGE),
            ("GRIT-20M", DataCategory.GROUNDED_CAPTION),
            ("LAION", DataCategory.WEAKLY_LABELED),
        ],
    )
    def test_known_datasets(self, name, category):
        """Test dataset names map to categories regardless of spelling."""
        assert dataset_category(name) is category

    def test_normalize_name(self):
        """Test case, spaces and underscores are folded."""
        assert normalize_dataset_name("  Multi_task  Conversation ") == "multi-task-conversation"


STAGES_ALLOWED = {
    DataCategory.WEAKLY_LABELED: {1},
    DataCategory.GROUNDED_CAPTION: {1},
    DataCategory.CAPTION: {1, 2, 3},
    DataCategory.REC: {1, 2, 3},
    DataCategory.REG: {1, 2, 3},
    DataCategory.VQA: {1, 2, 3},
    DataCategory.MULTIMODAL_INSTRUCTION: {3},
    DataCategory.LANGUAGE: {3},
}


class TestStrictStageCells:
    """Test strict plan validation against every category and stage."""

    @pytest.mark.parametrize("stage", [1, 2, 3])
    @pytest.mark.parametrize("category", list(DataCategory))
    def test_included_entry(self, category, stage):
        """Test an included entry is flagged exactly when its stage disallows it."""
        anchor = PlanEntry("Anchor", 1.0, category=DataCategory.CAPTION)
        entry = PlanEntry("Candidate", 1.0, category=category)
        violations = validate_plan(_plan(anchor, entry, stage=stage), strict_paper=True)
        if stage in STAGES_ALLOWED[category]:
            assert violations == []
        else:
            assert violations == [f"Candidate ({category.value}) is not used in stage {stage}"]

    @pytest.mark.parametrize("stage", [1, 2, 3])
    @pytest.mark.parametrize("category", list(DataCategory))
    def test_excluded_entry(self, category, stage):
        """Test an excluded entry is never flagged."""
        anchor = PlanEntry("Anchor", 1.0, category=DataCategory.CAPTION)
        entry = PlanEntry("Candidate", 1.0, included=False, category=category)
        assert validate_plan(_plan(anchor, entry, stage=stage), strict_paper=True) == []

    @pytest.mark.parametrize("stage", [1, 2, 3])
    def test_all_categories_at_once(self, stage):
        """Test a plan with every category reports exactly the disallowed ones."""
        entries = [PlanEntry(f"d-{c.value}", 1.0, category=c) for c in DataCategory]
        violations = validate_plan(_plan(*entries, stage=stage), strict_paper=True)
        flagged = {v.split(" ")[0] for v in violations}
        expected = {f"d-{c.value}" for c, stages in STAGES_ALLOWED.items() if stage not in stages}
        assert flagged == expected
        assert len(DataCategory) == 8


class TestValidatePlan:
    """Test plan validation."""

    def test_valid_plan(self):
        """Test a plan with one positive weight passes."""
        assert validate_plan(_plan(PlanEntry("GQA", 1.0))) == []

    def test_all_zero_weights(self):
        """Test a plan needs some probability mass."""
        plan = _plan(PlanEntry("GQA", 0.0), PlanEntry("VQAv2", 0.0))
        assert any("positive weight" in v for v in validate_plan(plan))

    def test_excluded_entries_do_not_count(self):
        """Test weight on excluded entries is ignored."""
        plan = _plan(PlanEntry("GQA", 1.0, included=False))
        assert validate_plan(plan)

    def test_duplicate_dataset(self):
        """Test the same dataset may not appear twice."""
        plan = _plan(PlanEntry("RefCOCO", 1.0), PlanEntry("refcoco", 2.0))
        assert any("listed twice" in v for v in validate_plan(plan))

    def test_structural_errors_are_collected(self):
        """Test every structural problem is reported at once."""
        plan = StagePlan(4, (PlanEntry("GQA", -1.0),), seed=-1, total_steps=0)
        assert len(validate_plan(plan)) == 5

    def test_strict_rejects_weak_data_in_stage_two(self):
        """Test weakly-labeled data is stage 1 only."""
        plan = _plan(PlanEntry("GQA", 1.0), PlanEntry("GRIT-20M-REC", 1.0))
        assert validate_plan(plan) == []
        with pytest.raises(PlanError) as exc_info:
            check_plan(plan, strict_paper=True)
        assert len(exc_info.value.violations) == 1
        assert "stage 2" in exc_info.value.violations[0]

    def test_strict_language_data(self):
        """Test language data belongs to stage 3."""
        entry = PlanEntry("Unnatural Instructions", 1.0)
        assert validate_plan(_plan(entry, stage=3), strict_paper=True) == []
        assert validate_plan(_plan(entry, stage=1), strict_paper=True)

    def test_strict_unknown_dataset_needs_category(self):
        """Test unknown datasets must declare a category in strict mode."""
        assert validate_plan(_plan(PlanEntry("MyData", 1.0)), strict_paper=True)
        entry = PlanEntry("MyData", 1.0, category=DataCategory.VQA)
        assert validate_plan(_plan(entry), strict_paper=True) == []

    def test_strict_ignores_excluded_entries(self):
        """Test excluded entries are not checked against the matrix."""
        plan = _plan(PlanEntry("GQA", 1.0), PlanEntry("LAION", 0.0, included=False))
        assert validate_plan(plan, strict_paper=True) == []


class TestLoadPlan:
    """Test reading plans from YAML."""

    @pytest.mark.parametrize("stage", [1, 2, 3])
    def test_shipped_plans_are_valid(self, stage):
        """Test the bundled stage plans pass strict checks."""
        plan = load_plan(PLANS_DIR / f"stage{stage}.yaml")
        assert plan.stage == stage
        check_plan(plan, strict_paper=True)

    def test_stage_one_steps(self):
        """Test the stage 1 step count."""
        assert load_plan(PLANS_DIR / "stage1.yaml").total_steps == 400000

    def test_paths_are_relative_to_plan(self, tmp_path):
        """Test shard paths resolve against the plan's directory."""
        path = tmp_path / "plan.yaml"
        path.write_text(
            "stage: 2\nseed: 3\nsteps: 10\nnotes: demo\nentries:\n"
            "  - {dataset: GQA, path: shards/gqa.jsonl, weight: 2}\n"
            "  - {dataset: Mine, weight: 1, category: vqa}\n",
            encoding="utf-8",
        )
        plan = load_plan(path)
        assert plan.seed == 3 and plan.total_steps == 10
        assert plan.notes == {"text": "demo"}
        assert plan.entries[0].path == str(tmp_path / "shards" / "gqa.jsonl")
        assert plan.entries[1].category is DataCategory.VQA

    @pytest.mark.parametrize(
        "body",
        [
            "- 1\n",
            "stage: 2\n",
            "stage: 2\nentries: {}\n",
            "stage: two\nentries: []\n",
            "stage: 2\nentries:\n  - {weight: 1}\n",
            "stage: 2\nentries:\n  - {dataset: GQA, weight: heavy}\n",
            "stage: 2\nentries:\n  - {dataset: GQA, colour: red}\n",
            "stage: 2\nentries:\n  - {dataset: GQA, category: nonsense}\n",
        ],
    )
    def test_malformed_plans(self, tmp_path, body):
        """Test malformed plan files are config errors."""
        path = tmp_path / "plan.yaml"
        path.write_text(body, encoding="utf-8")
        with pytest.raises(ConfigError):
            load_plan(path)

    def test_missing_file(self, tmp_path):
        """Test a missing plan is a config error."""
        with pytest.raises(ConfigError):
            load_plan(tmp_path / "nope.yaml")


class TestSampleSchedule:
    """Test the weighted sampler."""

    def test_single_dataset(self):
        """Test every step draws the only dataset."""
        trace = sample_schedule(_plan(PlanEntry("GQA", 1.0), steps=50), {"GQA": 4})
        assert trace.counts() == {"GQA": 50}
        assert len(trace) == 50

    def test_records_cycle_per_epoch(self):
        """Test each epoch visits every record once."""
        trace = sample_schedule(_plan(PlanEntry("GQA", 1.0), steps=9), {"GQA": 3})
        for epoch in range(3):
            assert sorted(trace.record_index[epoch * 3:(epoch + 1) * 3]) == [0, 1, 2]

    def test_deterministic(self):
        """Test the same plan and seed reproduce the trace."""
        plan = _plan(PlanEntry("GQA", 1.0), PlanEntry("VQAv2", 2.0), steps=200, seed=5)
        catalogs = {"GQA": 10, "VQAv2": 7}
        first = sample_schedule(plan, catalogs)
        second = sample_schedule(plan, catalogs)
        np.testing.assert_array_equal(first.dataset_index, second.dataset_index)
        np.testing.assert_array_equal(first.record_index, second.record_index)

    def test_seed_changes_trace(self):
        """Test different seeds give different traces."""
        entries = (PlanEntry("GQA", 1.0), PlanEntry("VQAv2", 1.0))
        catalogs = {"GQA": 10, "VQAv2": 10}
        a = sample_schedule(_plan(*entries, seed=1, steps=100), catalogs)
        b = sample_schedule(_plan(*entries, seed=2, steps=100), catalogs)
        assert not np.array_equal(a.dataset_index, b.dataset_index)

    def test_zero_weight_never_drawn(self):
        """Test included zero-weight datasets are never sampled."""
        plan = _plan(PlanEntry("GQA", 1.0), PlanEntry("VQAv2", 0.0), steps=500)
        trace = sample_schedule(plan, {"GQA": 5, "VQAv2": 5})
        assert trace.counts()["VQAv2"] == 0

    def test_iteration(self):
        """Test iterating yields step, dataset name and record index."""
        trace = sample_schedule(_plan(PlanEntry("GQA", 1.0), steps=3), {"gqa": 1})
        assert list(trace) == [(0, "GQA", 0), (1, "GQA", 0), (2, "GQA", 0)]

    @pytest.mark.slow
    def test_frequencies_converge(self):
        """Test a million draws match the normalized weights."""
        plan = _plan(
            PlanEntry("GQA", 7.0),
            PlanEntry("VQAv2", 2.0),
            PlanEntry("OK-VQA", 1.0),
            steps=1_000_000,
            seed=123,
        )
        trace = sample_schedule(plan, {"GQA": 1000, "VQAv2": 1000, "OK-VQA": 1000})
        np.testing.assert_allclose(trace.frequencies(), [0.7, 0.2, 0.1], atol=0.005)

    def test_missing_catalog(self):
        """Test every included dataset needs a record count."""
        plan = _plan(PlanEntry("GQA", 1.0), PlanEntry("VQAv2", 1.0))
        with pytest.raises(ConfigError):
            sample_schedule(plan, {"GQA": 3})

    def test_unknown_catalog_name(self):
        """Test catalogs may not name datasets outside the plan."""
        with pytest.raises(ConfigError):
            sample_schedule(_plan(PlanEntry("GQA", 1.0)), {"GQA": 3, "OKVQA": 2})

    def test_empty_dataset(self):
        """Test an included dataset with no records is a data error."""
        with pytest.raises(DataError):
            sample_schedule(_plan(PlanEntry("GQA", 1.0)), {"GQA": 0})

    def test_invalid_plan(self):
        """Test structurally invalid plans are rejected."""
        with pytest.raises(PlanError):
            sample_schedule(_plan(PlanEntry("GQA", 1.0), steps=0), {"GQA": 1})


class TestRenderTrainingPair:
    """Test rendering one record as a training pair."""

    def test_vqa(self, vqa_record):
        """Test an image record with identifier."""
        assert render_training_pair(vqa_record) == (VQA_PROMPT, "red", "[vqa]")

    def test_language_record(self):
        """Test a vision-irrelevant record."""
        record = CorpusRecord.from_json(LANGUAGE_RECORD)
        prompt, target, task = render_training_pair(record)
        assert prompt == "[INST] Define entropy. [/INST]"
        assert (target, task) == ("A measure of uncertainty.", "")

    def test_without_identifiers(self, vqa_record):
        """Test identifiers can be left out."""
        prompt, _, _ = render_training_pair(vqa_record, with_identifiers=False)
        assert prompt == "[INST] <Img><ImageHere></Img> What color is the jacket? [/INST]"

    def test_conversation(self):
        """Test a multi-round record renders as one prompt."""
        conversation = ConversationRecord(
            "mr-1",
            "coco/000001.jpg",
            (448, 448),
            (
                Turn(TaskIdentifier.VQA, "[vqa] what is it?", "a cat"),
                Turn(TaskIdentifier.REFER, "[refer] the cat", "{<1><2><3><4>}"),
            ),
        )
        prompt, target, task = render_training_pair(conversation)
        assert prompt == (
            "[INST] <Img><ImageHere></Img> [vqa] what is it? [/INST] a cat "
            "[INST] [refer] the cat [/INST]"
        )
        assert (target, task) == ("{<1><2><3><4>}", "[refer]")

    def test_identifier_mismatch(self, vqa_record):
        """Test an instruction whose identifier disagrees with the task."""
        with pytest.raises(DataError):
            render_training_pair(replace(vqa_record, instruction="[refer] the jacket"))


class TestCompileStage:
    """Test compiling a stage into training pairs."""

    def test_writes_pairs_in_trace_order(self, write_jsonl, read_jsonl, tmp_path):
        """Test output lines follow the trace."""
        vqa = write_jsonl("shards/vqa.jsonl", [VQA_RECORD])
        rec = write_jsonl("shards/rec.jsonl", [REFER_RECORD])
        plan = _plan(
            PlanEntry("VQAv2", 1.0, path=str(vqa)),
            PlanEntry("RefCOCO", 1.0, path=str(rec)),
            steps=30,
            seed=9,
        )
        out = tmp_path / "stage.jsonl"
        trace_path = tmp_path / "trace.jsonl"
        result = compile_stage(plan, out, trace_path=trace_path)

        assert (result.written, result.skipped) == (30, 0)
        rows = read_jsonl(out)
        trace_rows = read_jsonl(trace_path)
        assert len(rows) == len(trace_rows) == 30
        for row, step in zip(rows, trace_rows):
            assert row["source"] == step["dataset"]
            if step["dataset"] == "VQAv2":
                assert row == {
                    "prompt": VQA_PROMPT,
                    "target": "red",
                    "task": "[vqa]",
                    "source": "VQAv2",
                }
                assert step["id"] == "v1"
            else:
                assert row["prompt"].startswith("[INST] <Img><ImageHere></Img> [refer] ")
                assert row["target"] == "{<25><25><75><75>}"
        assert {row["source"] for row in rows} == {"VQAv2", "RefCOCO"}

    def test_rerun_is_byte_identical(self, write_jsonl, tmp_path):
        """Test the same plan writes the same bytes."""
        vqa = write_jsonl("vqa.jsonl", [VQA_RECORD, {**VQA_RECORD, "id": "v2", "target": "blue"}])
        plan = _plan(PlanEntry("VQAv2", 1.0, path=str(vqa)), steps=10, seed=4)
        compile_stage(plan, tmp_path / "a.jsonl")
        compile_stage(plan, tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_empty_shard(self, write_jsonl, tmp_path):
        """Test an empty shard is a data error."""
        empty = write_jsonl("empty.jsonl", [])
        plan = _plan(PlanEntry("GQA", 1.0, path=str(empty)))
        with pytest.raises(DataError):
            compile_stage(plan, tmp_path / "out.jsonl")

    def test_missing_path(self, tmp_path):
        """Test included entries need a shard path."""
        with pytest.raises(ConfigError):
            compile_stage(_plan(PlanEntry("GQA", 1.0)), tmp_path / "out.jsonl")

    def _bad_shard(self, write_jsonl):
        bad = {**VQA_RECORD, "id": "bad", "instruction": "[refer] the jacket"}
        return write_jsonl("mixed.jsonl", [VQA_RECORD, bad])

    def test_fail_mode(self, write_jsonl, tmp_path):
        """Test the first bad record stops the run with its location."""
        shard = self._bad_shard(write_jsonl)
        plan = _plan(PlanEntry("VQAv2", 1.0, path=str(shard)), steps=10)
        with pytest.raises(SchemaError) as exc_info:
            compile_stage(plan, tmp_path / "out.jsonl")
        assert exc_info.value.line == 2
        assert exc_info.value.path == str(shard)

    def test_skip_mode(self, write_jsonl, read_jsonl, tmp_path):
        """Test bad records are skipped and counted."""
        shard = self._bad_shard(write_jsonl)
        plan = _plan(PlanEntry("VQAv2", 1.0, path=str(shard)), steps=10)
        run_logger = RunLogger("mix")
        result = compile_stage(plan, tmp_path / "out.jsonl", on_error=SKIP, run_logger=run_logger)
        assert (result.written, result.skipped) == (5, 5)
        assert run_logger.counts() == {"written": 5, "skipped": 5, "missing": 0}
        assert len(read_jsonl(tmp_path / "out.jsonl")) == 5

    def test_without_identifiers(self, write_jsonl, read_jsonl, tmp_path):
        """Test the identifier ablation drops identifiers from prompts."""
        vqa = write_jsonl("vqa.jsonl", [VQA_RECORD])
        plan = _plan(PlanEntry("VQAv2", 1.0, path=str(vqa)), steps=2)
        compile_stage(plan, tmp_path / "out.jsonl", with_identifiers=False)
        rows = read_jsonl(tmp_path / "out.jsonl")
        assert all("[vqa]" not in row["prompt"] for row in rows)
        assert rows[0]["task"] == "[vqa]"

    def test_trace_lines(self, write_jsonl, tmp_path):
        """Test the trace file format."""
        vqa = write_jsonl("vqa.jsonl", [VQA_RECORD])
        plan = _plan(PlanEntry("VQAv2", 1.0, path=str(vqa)), steps=2)
        compile_stage(plan, tmp_path / "out.jsonl", trace_path=tmp_path / "trace.jsonl")
        lines = (tmp_path / "trace.jsonl").read_text(encoding="utf-8").splitlines()
        assert json.loads(lines[1]) == {"step": 1, "dataset": "VQAv2", "index": 0, "id": "v1"}
