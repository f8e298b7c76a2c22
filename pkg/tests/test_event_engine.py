import asyncio
import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import chisquare

from config import ClientConfig, PipelineConfig
from errors import ClientHttpError, EmptyGlanceSet, GlanceOutOfRange, SchemaViolation, TemplateRenderError
from event_engine import (
    CorpusItem,
    build_corpus,
    build_instruction,
    build_records,
    caption_clip,
    export_jsonl,
    filter_instruction,
    generate_event_proposals,
    generate_normal_proposals,
    load_template_pool,
    mark_filtered,
    read_instruction_jsonl,
    render_task_prompt,
)
from llm_client import MockTextGenClient
from models import EventProposal, GlanceSet, InstructionRecord, Provenance, ScoreSeries

SCHEMA = Path(__file__).resolve().parent.parent / "schemas" / "instruction_record.schema.json"


def _glances(points, label="Explosion"):
    return GlanceSet(video_id="v", anomaly_class=label, glances=tuple(points))


def _proposal_oracle(scores, points, levels, pad):
    spans = set()
    n = len(scores)
    for g in points:
        for level in levels:
            threshold = level * scores[g]
            passing = scores > threshold
            passing[g] = True
            best = (g, g)
            for s in range(0, g + 1):
                for e in range(g, n):
                    if passing[s:e + 1].all() and e - s > best[1] - best[0]:
                        best = (s, e)
            spans.add((max(0, best[0] - pad), min(n - 1, best[1] + pad)))
    return spans


def test_unimodal_bump_gives_nested_proposals():
    scores = ScoreSeries(video_id="v", scores=[0.05, 0.1, 0.3, 0.6, 0.9, 1.0, 0.85, 0.65, 0.4, 0.1, 0.05, 0.0])
    proposals = generate_event_proposals(scores, _glances([5]), PipelineConfig(proposal_pad=0))
    assert [(p.start, p.end) for p in proposals] == [(3, 7), (4, 6), (5, 5)]
    widths = [p.length for p in proposals]
    assert widths == sorted(widths, reverse=True)
    for outer, inner in zip(proposals, proposals[1:]):
        assert outer.start <= inner.start and inner.end <= outer.end
    assert all(p.start <= 5 <= p.end and p.label == "Explosion" and p.source_glance == 5 for p in proposals)


def test_zero_scores_give_padded_singleton():
    scores = ScoreSeries(video_id="v", scores=np.zeros(20))
    proposals = generate_event_proposals(scores, _glances([10]), PipelineConfig(proposal_pad=2))
    assert [(p.start, p.end) for p in proposals] == [(8, 12)]


def test_proposals_match_interval_scan():
    rng = np.random.default_rng(0)
    cfg = PipelineConfig()
    for _ in range(200):
        t = int(rng.integers(1, 65))
        points = sorted(rng.choice(t, size=int(rng.integers(1, min(4, t) + 1)), replace=False).tolist())
        scores = ScoreSeries(video_id="v", scores=rng.random(t))
        proposals = generate_event_proposals(scores, _glances(points), cfg)
        spans = [(p.start, p.end) for p in proposals]
        assert len(spans) == len(set(spans))
        assert set(spans) == _proposal_oracle(scores.scores, points, cfg.proposal_levels, cfg.proposal_pad)
        for p in proposals:
            p.check_bounds(t)


def test_proposal_errors():
    scores = ScoreSeries(video_id="v", scores=[0.5, 0.5])
    with pytest.raises(GlanceOutOfRange):
        generate_event_proposals(scores, _glances([4]), PipelineConfig())
    with pytest.raises(EmptyGlanceSet):
        generate_event_proposals(scores, GlanceSet(video_id="v", anomaly_class="Normal"), PipelineConfig())


def test_normal_proposals():
    assert generate_normal_proposals(100, 0, (16, 64), 1) == []
    proposals = generate_normal_proposals(40, 50, (16, 64), 7, video_id="n")
    assert len(proposals) == 50
    assert all(0 <= p.start <= p.end < 40 and p.label == "Normal" for p in proposals)
    assert proposals == generate_normal_proposals(40, 50, (16, 64), 7, video_id="n")


def test_normal_proposal_starts_are_uniform():
    proposals = generate_normal_proposals(100, 10_000, (20, 20), 11)
    counts = np.bincount([p.start for p in proposals], minlength=81)
    assert counts.size == 81
    assert chisquare(counts).pvalue > 0.01


def test_default_question_template():
    pool = load_template_pool()
    assert pool.question_templates[0] == "<video>\n Are there any unexpected or unusual events in the video clip?"
    assert all("{label}" in t and "{caption}" in t for t in pool.task_templates)


def test_template_pool_validation(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"task_templates": ["{label} {caption}"], "question_templates": ["no placeholder"]}))
    with pytest.raises(SchemaViolation):
        load_template_pool(path)
    with pytest.raises(TemplateRenderError):
        render_task_prompt("{label} {missing}", "Riot", "a caption")


def _clip(video_id="v", label="Explosion", start=3, end=9):
    return EventProposal(video_id=video_id, start=start, end=end, label=label, source_glance=start)


class _FlakyCaptioner:
    """Fails on one video; every other call hangs until cancelled."""

    model_name = "flaky"

    def __init__(self, failing_video):
        self.failing_video = failing_video
        self.cancelled = 0

    async def generate(self, prompt, max_tokens=None):
        if self.failing_video in prompt:
            raise ClientHttpError(503, "overloaded")
        try:
            await asyncio.sleep(30)
        except asyncio.CancelledError:
            self.cancelled += 1
            raise
        return "unreachable"


def test_failed_clip_cancels_the_rest_of_the_build():
    captioner = _FlakyCaptioner("v3")
    clips = [_clip(video_id=f"v{i}") for i in range(6)]

    async def scenario():
        started = time.perf_counter()
        with pytest.raises(ClientHttpError):
            await build_records(
                clips, load_template_pool(), captioner, MockTextGenClient(style="echo"), seed=0, max_in_flight=8
            )
        assert asyncio.all_tasks() == {asyncio.current_task()}
        return time.perf_counter() - started

    assert asyncio.run(scenario()) < 5.0
    assert captioner.cancelled > 0


def test_echo_record_contains_label_and_caption():
    async def scenario():
        captioned = await caption_clip(_clip(), MockTextGenClient(seed=0, style="caption"))
        record = await build_instruction(
            captioned, load_template_pool(), MockTextGenClient(style="echo"), np.random.default_rng(0)
        )
        return captioned, record

    captioned, record = asyncio.run(scenario())
    assert "Explosion" in record.assistant
    assert captioned.caption in record.assistant
    assert record.user in load_template_pool().question_templates
    assert record.clip_span == (3, 9)


def test_mock_caption_is_deterministic():
    async def caption(seed):
        return (await caption_clip(_clip(), MockTextGenClient(seed=seed, style="caption"))).caption

    assert asyncio.run(caption(3)) == asyncio.run(caption(3))


def test_hundred_mock_records_are_byte_identical(tmp_path):
    clips = [_clip(video_id=f"v{i % 7}", label=["Explosion", "Normal", "Riot"][i % 3], start=i, end=i + 5)
             for i in range(100)]

    async def run():
        return await build_records(
            clips, load_template_pool(), MockTextGenClient(5, "caption"), MockTextGenClient(5, "echo"),
            seed=42, max_in_flight=8,
        )

    export_jsonl(asyncio.run(run()), tmp_path / "a.jsonl")
    export_jsonl(asyncio.run(run()), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    records = read_instruction_jsonl(tmp_path / "a.jsonl")
    assert len(records) == 100
    assert len({r.id for r in records}) == 100
    schema = json.loads(SCHEMA.read_text(encoding="utf-8"))
    for line in (tmp_path / "a.jsonl").read_text(encoding="utf-8").splitlines():
        obj = json.loads(line)
        assert set(obj) == set(schema["required"])
        assert set(obj["provenance"]) == set(schema["properties"]["provenance"]["required"])
        assert "<video>\n" in obj["user"]


def _record(assistant, label="Explosion"):
    return InstructionRecord(
        id="r", video_id="v", clip_span=(0, 4), label=label,
        user="<video>\n Are there any unexpected or unusual events in the video clip?",
        assistant=assistant,
        provenance=Provenance(template_id="task-0/question-0", model_name="test"),
    )


GOOD = [
    "A fireball erupts beside the parked truck and debris is thrown across the street while people run away.",
    "Two men start shoving each other near the entrance, one throws a punch and a crowd gathers around them quickly.",
    "The car runs the red light at speed and strikes the cyclist crossing the intersection, who falls to the road.",
    "Several people wearing masks smash shop windows and set a bin on fire while police approach from the left side.",
    "A man raises a handgun toward the cashier, fires once, and then flees through the glass door with the bag.",
    "Yes. There is an explosion in the warehouse: a bright flash is followed by thick smoke filling the whole room.",
    "The guard pushes the visitor against the wall and keeps hitting him although he is not resisting at all.",
    "Unusual activity is present because a group suddenly scatters after a loud blast near the subway platform.",
    "The driver loses control on the wet road, the van flips onto its side and slides into the barrier.",
    "An anomaly occurs midway through the clip when a man collapses after being struck by a thrown object.",
]
BAD = [
    ("I cannot help with that.", "refusal"),
    ("As an AI language model, I am not able to watch videos, but the description mentions a street.", "refusal"),
    ("I'm sorry, but I can't describe this clip because the content could be harmful to viewers.", "refusal"),
    ("I am unable to determine what happens in this clip from the information that was given.", "refusal"),
    ("Too short to be useful.", "too_short"),
    ("Nothing happens.", "too_short"),
    ("There is no anomaly in this clip; people simply walk through the parking lot as usual.", "label_contradiction"),
    ("No anomalies are visible, the scene shows ordinary traffic moving along the road at night.", "label_contradiction"),
    ("Nothing unusual happens here, the cashier serves customers and the door opens and closes.", "label_contradiction"),
    ("The clip shows nothing abnormal at all; two friends chat calmly on a bench for a while.", "label_contradiction"),
]


def test_filter_fixture_has_no_false_passes():
    for text in GOOD:
        assert filter_instruction(_record(text)) == (True, [])
    for text, reason in BAD:
        keep, reasons = filter_instruction(_record(text))
        assert not keep
        assert reason in reasons


def test_contradiction_rule_ignores_normal_clips():
    text = "There is no anomaly in this clip; people simply walk through the parking lot as usual."
    assert filter_instruction(_record(text, label="Normal")) == (True, [])


def test_filter_marks_but_keeps_records():
    record = mark_filtered(_record("I cannot help with that."))
    assert record.provenance.filtered
    assert record.provenance.filter_reasons == ("too_short", "refusal")
    assert mark_filtered(_record(GOOD[0])).provenance.filtered is False


def test_filter_is_order_independent():
    records = [_record(t) for t in GOOD] + [_record(t) for t, _ in BAD]
    forward = [filter_instruction(r) for r in records]
    backward = [filter_instruction(r) for r in reversed(records)][::-1]
    assert forward == backward


def test_build_corpus_mock_report():
    scores = ScoreSeries(video_id="a", scores=[0.1, 0.2, 0.9, 0.95, 0.3, 0.1, 0.1, 0.1])
    items = [
        CorpusItem(video_id="a", label="Riot", snippet_count=8, scores=scores,
                   glances=GlanceSet(video_id="a", anomaly_class="Riot", glances=(3,))),
        CorpusItem(video_id="n", label="Normal", snippet_count=30),
    ]
    cfg = PipelineConfig(normal_length_range=(4, 8))
    records, report = asyncio.run(build_corpus(items, cfg, ClientConfig(mock_seed=1)))
    assert report.videos == 2
    assert report.records == len(records) == report.proposals
    assert report.kept + report.filtered == report.records
    assert report.avg_assistant_words > 10
    assert report.reference_avg_words == 44.83
    assert sum(r.video_id == "n" for r in records) == 3
