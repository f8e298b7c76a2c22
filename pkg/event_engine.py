import asyncio
import json
import logging
import re
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from config import ClientConfig, PipelineConfig
from errors import EmptyGlanceSet, GlanceOutOfRange, IoFailure, SchemaViolation, TemplateRenderError
from llm_client import TextGenerator, open_clients
from models import (
    VIDEO_PLACEHOLDER,
    AnomalyClass,
    CaptionedClip,
    EventProposal,
    GlanceSet,
    InstructionRecord,
    Provenance,
    ScoreSeries,
    is_normal,
)

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE_FILE = Path(__file__).parent / "templates" / "prompts.json"
CAPTION_PROMPT = (
    "Describe in detail the people, objects and actions visible in video {video_id} "
    "between snippet {start} and snippet {end}."
)
REFERENCE_AVG_WORDS = 44.83


class PromptTemplatePool(BaseModel):
    model_config = ConfigDict(frozen=True)

    task_templates: Tuple[str, ...]
    question_templates: Tuple[str, ...]

    @field_validator("task_templates", "question_templates")
    @classmethod
    def _nonempty(cls, value):
        if not value:
            raise ValueError("template list must not be empty")
        return value

    @field_validator("question_templates")
    @classmethod
    def _has_placeholder(cls, value):
        for template in value:
            if VIDEO_PLACEHOLDER not in template:
                raise ValueError(f"question template lacks the video placeholder: {template!r}")
        return value


def load_template_pool(path: Optional[str | Path] = None) -> PromptTemplatePool:
    source = Path(path) if path else DEFAULT_TEMPLATE_FILE
    try:
        data = json.loads(source.read_text(encoding="utf-8"))
    except OSError as e:
        raise IoFailure(f"cannot read templates {source}: {e}") from e
    except json.JSONDecodeError as e:
        raise SchemaViolation(f"templates {source} are not valid JSON: {e.msg}", line=e.lineno) from e
    try:
        return PromptTemplatePool.model_validate(data)
    except ValidationError as e:
        raise SchemaViolation(f"templates {source}: {e.errors()[0]['msg']}") from e


# ======================
#  PROPOSALS
# ======================

def grow_interval(values: np.ndarray, g: int, level: float) -> Tuple[int, int]:
    """Maximal run around g with values > level * values[g]; g is always inside."""
    threshold = level * values[g]
    start = g
    while start > 0 and values[start - 1] > threshold:
        start -= 1
    end = g
    while end + 1 < len(values) and values[end + 1] > threshold:
        end += 1
    return start, end


def generate_event_proposals(
    scores: ScoreSeries,
    glances: GlanceSet,
    cfg: PipelineConfig,
) -> List[EventProposal]:
    if not glances.glances:
        raise EmptyGlanceSet(f"{glances.video_id} has no glances to propose around")
    count = len(scores)
    if glances.glances[-1] >= count:
        raise GlanceOutOfRange(f"glance {glances.glances[-1]} outside score series of length {count}")

    spans: Dict[Tuple[int, int], int] = {}
    for g in glances.glances:
        for level in cfg.proposal_levels:
            start, end = grow_interval(scores.scores, g, level)
            span = (max(0, start - cfg.proposal_pad), min(count - 1, end + cfg.proposal_pad))
            spans.setdefault(span, g)
    return [
        EventProposal(video_id=glances.video_id, start=s, end=e, label=glances.anomaly_class, source_glance=g)
        for (s, e), g in spans.items()
    ]


def generate_normal_proposals(
    snippet_count: int,
    count: int,
    length_range: Tuple[int, int],
    rng_seed: int | Sequence[int],
    video_id: str = "",
) -> List[EventProposal]:
    """`count` random Normal clips; lengths uniform in range (capped at T), starts uniform."""
    rng = np.random.default_rng(rng_seed)
    low, high = length_range
    proposals = []
    for _ in range(count):
        length = min(int(rng.integers(low, high + 1)), snippet_count)
        start = int(rng.integers(0, snippet_count - length + 1))
        proposals.append(EventProposal(
            video_id=video_id, start=start, end=start + length - 1, label=AnomalyClass.NORMAL.value
        ))
    return proposals


# ======================
#  CAPTIONS AND INSTRUCTIONS
# ======================

async def caption_clip(clip: EventProposal, client: TextGenerator) -> CaptionedClip:
    prompt = CAPTION_PROMPT.format(video_id=clip.video_id, start=clip.start, end=clip.end)
    caption = await client.generate(prompt)
    logger.debug(f"Captioned {clip.video_id} [{clip.start}, {clip.end}]")
    return CaptionedClip(proposal=clip, caption=caption, caption_source="client")


def render_task_prompt(template: str, label: str, caption: str) -> str:
    try:
        return template.format(label=label, caption=caption)
    except (KeyError, IndexError, ValueError) as e:
        raise TemplateRenderError(f"task template cannot be rendered ({e!r}): {template[:60]!r}") from e


async def build_instruction(
    clip: CaptionedClip,
    pool: PromptTemplatePool,
    client: TextGenerator,
    rng: np.random.Generator,
    record_id: Optional[str] = None,
) -> InstructionRecord:
    proposal = clip.proposal
    task_idx = int(rng.integers(len(pool.task_templates)))
    question_idx = int(rng.integers(len(pool.question_templates)))
    prompt = render_task_prompt(pool.task_templates[task_idx], proposal.label, clip.caption)
    answer = await client.generate(prompt)
    return InstructionRecord(
        id=record_id or f"{proposal.video_id}-{proposal.start:05d}-{proposal.end:05d}",
        video_id=proposal.video_id,
        clip_span=(proposal.start, proposal.end),
        label=proposal.label,
        user=pool.question_templates[question_idx],
        assistant=answer,
        provenance=Provenance(template_id=f"task-{task_idx}/question-{question_idx}", model_name=client.model_name),
    )


# ======================
#  FILTERING
# ======================

class FilterRules(BaseModel):
    model_config = ConfigDict(frozen=True)

    min_words: int = 10
    refusal_phrases: Tuple[str, ...] = ("i cannot", "i can't", "as an ai", "i'm sorry, but", "i am unable")
    contradiction_patterns: Tuple[str, ...] = (r"\bno\s+anomal", r"\bnothing\s+(?:unusual|abnormal)")


def filter_instruction(record: InstructionRecord, rules: FilterRules = FilterRules()) -> Tuple[bool, List[str]]:
    reasons = []
    text = record.assistant.lower()
    if len(record.assistant.split()) < rules.min_words:
        reasons.append("too_short")
    if any(phrase in text for phrase in rules.refusal_phrases):
        reasons.append("refusal")
    if not is_normal(record.label) and any(re.search(p, text) for p in rules.contradiction_patterns):
        reasons.append("label_contradiction")
    return not reasons, reasons


def mark_filtered(record: InstructionRecord, rules: FilterRules = FilterRules()) -> InstructionRecord:
    """Flag rejected records; they stay in the corpus for a downstream human pass."""
    keep, reasons = filter_instruction(record, rules)
    if keep:
        return record
    provenance = record.provenance.model_copy(update={"filtered": True, "filter_reasons": tuple(reasons)})
    return record.model_copy(update={"provenance": provenance})


def export_jsonl(records: Iterable[InstructionRecord], path: str | Path) -> None:
    body = "".join(record.model_dump_json() + "\n" for record in records)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(body.encode("utf-8"))
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def read_instruction_jsonl(path: str | Path) -> List[InstructionRecord]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    records = []
    for lineno, line in enumerate(lines, start=1):
        try:
            records.append(InstructionRecord.model_validate_json(line))
        except ValidationError as e:
            raise SchemaViolation(e.errors()[0]["msg"], line=lineno) from e
    return records


# ======================
#  CORPUS BUILD
# ======================

class CorpusItem(BaseModel):
    """One video entering the data engine; abnormal videos carry scores and glances."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    video_id: str
    label: str
    snippet_count: int
    scores: Optional[ScoreSeries] = None
    glances: Optional[GlanceSet] = None


class CorpusReport(BaseModel):
    videos: int
    proposals: int
    records: int
    kept: int
    filtered: int
    reasons: Dict[str, int]
    avg_assistant_words: float
    reference_avg_words: float = REFERENCE_AVG_WORDS


def proposals_for(item: CorpusItem, index: int, cfg: PipelineConfig) -> List[EventProposal]:
    if is_normal(item.label):
        return generate_normal_proposals(
            item.snippet_count, cfg.normal_proposal_count, cfg.normal_length_range,
            [cfg.rng_seed, index], video_id=item.video_id,
        )
    if item.scores is None or item.glances is None:
        raise SchemaViolation(f"abnormal video {item.video_id} needs scores and glances")
    return generate_event_proposals(item.scores, item.glances, cfg)


def summarize(records: List[InstructionRecord], videos: int, proposals: int) -> CorpusReport:
    reasons = Counter(r for rec in records for r in rec.provenance.filter_reasons)
    words = [len(rec.assistant.split()) for rec in records]
    filtered = sum(rec.provenance.filtered for rec in records)
    return CorpusReport(
        videos=videos,
        proposals=proposals,
        records=len(records),
        kept=len(records) - filtered,
        filtered=filtered,
        reasons=dict(sorted(reasons.items())),
        avg_assistant_words=float(np.mean(words)) if words else 0.0,
    )


async def build_records(
    clips: List[EventProposal],
    pool: PromptTemplatePool,
    captioner: TextGenerator,
    responder: TextGenerator,
    seed: int,
    max_in_flight: int,
    rules: FilterRules = FilterRules(),
) -> List[InstructionRecord]:
    """Caption and instruct every clip with bounded concurrency; output order follows `clips`."""
    gate = asyncio.Semaphore(max_in_flight)
    per_video: Counter = Counter()
    record_ids = []
    for clip in clips:
        record_ids.append(f"{clip.video_id}-{per_video[clip.video_id]:03d}")
        per_video[clip.video_id] += 1

    async def one(position: int, clip: EventProposal) -> InstructionRecord:
        async with gate:
            captioned = await caption_clip(clip, captioner)
        async with gate:
            record = await build_instruction(
                captioned, pool, responder, np.random.default_rng([seed, position]), record_ids[position]
            )
        return mark_filtered(record, rules)

    try:
        async with asyncio.TaskGroup() as tg:
            tasks = [tg.create_task(one(i, clip)) for i, clip in enumerate(clips)]
    except ExceptionGroup as group:
        # siblings are cancelled by now; surface the first failure as the domain error it is
        logger.error(f"Instruction build failed on {len(group.exceptions)} clip(s): {group.exceptions[0]}")
        raise group.exceptions[0] from group
    return [task.result() for task in tasks]


async def build_corpus(
    items: List[CorpusItem],
    cfg: PipelineConfig,
    client_cfg: ClientConfig,
    pool: Optional[PromptTemplatePool] = None,
    rules: FilterRules = FilterRules(),
) -> Tuple[List[InstructionRecord], CorpusReport]:
    pool = pool or load_template_pool()
    clips = [clip for index, item in enumerate(items) for clip in proposals_for(item, index, cfg)]
    logger.info(f"Building instructions for {len(clips)} clips from {len(items)} videos ({client_cfg.mode} client)")
    async with open_clients(client_cfg) as (captioner, responder):
        records = await build_records(
            clips, pool, captioner, responder, cfg.rng_seed, client_cfg.max_in_flight, rules
        )
    report = summarize(records, len(items), len(clips))
    logger.info(
        f"Built {report.records} records, {report.filtered} flagged by filters, "
        f"avg assistant length {report.avg_assistant_words:.2f} words (reference {REFERENCE_AVG_WORDS})"
    )
    return records, report
