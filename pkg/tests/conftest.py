from __future__ import annotations

import pytest

from tablepanel.gateway import ScriptedBackend, ScriptEntry
from tablepanel.personas import OUTPUT_CONTRACTS, Stage
from tablepanel.tables import Answer, ContextPassages, Query, Table, TaskInstance, TaskKind


def stage_entry(stage: Stage, response: str) -> ScriptEntry:
    """A script entry that fires only for prompts of the given stage.

    Each stage's full output contract appears verbatim in that stage's
    system message and nowhere else (agent histories only ever echo concrete
    marker lines, not the bracketed contract text), so it is a safe matcher.
    """
    return ScriptEntry(response=response, matcher=OUTPUT_CONTRACTS[stage])


def stage_entries(stage: Stage, response: str, n: int) -> list[ScriptEntry]:
    return [stage_entry(stage, response) for _ in range(n)]


def assessment_text(complexity: str = "basic", points: tuple[str, ...] = ("check the table",)) -> str:
    lines = [f"COMPLEXITY: {complexity}", "NOTES:"]
    lines.extend(f"- {p}" for p in points)
    return "\n".join(lines)


def make_table() -> Table:
    return Table(
        headers=("Model", "Score", "Year"),
        rows=(("B-1", "88", "2019"), ("C-2", "74", "2020")),
        caption="Benchmark entries",
    )


def make_task(kind: TaskKind | None = None, task_id: str = "task-1",
              query: str = "Which model scored highest?") -> TaskInstance:
    kind = kind or TaskKind.qa()
    gold_text = kind.label_set[0] if kind.label_set else "B-1"
    return TaskInstance(
        id=task_id,
        table=make_table(),
        context=ContextPassages(("Scores are out of 100.",)),
        query=Query(query),
        kind=kind,
        gold=Answer.from_raw(gold_text, kind),
    )


@pytest.fixture
def qa_task() -> TaskInstance:
    return make_task()


def unanimity_script(answer: str, agents: int = 5) -> list[ScriptEntry]:
    """Happy-path script for the full pipeline: every agent assesses, solves,
    validates, then presents the same answer."""
    return (
        stage_entries(Stage.ASSESS, assessment_text(), agents)
        + stage_entries(Stage.SOLVE, f"ANSWER: {answer}", agents)
        + stage_entries(Stage.VERIFY, "VERDICT: validated", agents)
        + stage_entries(Stage.PRESENT, f"RATIONALE: read from the table\nANSWER: {answer}", agents)
    )


def make_backend(entries, strict: bool = True) -> ScriptedBackend:
    return ScriptedBackend(entries, strict=strict)
