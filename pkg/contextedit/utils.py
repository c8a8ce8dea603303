from dataclasses import dataclass
from pathlib import Path

import humanize
import numpy as np
from rich.panel import Panel
from rich.progress import Progress
from rich.table import Table


class ProgressPanel(Progress):
    def __init__(self, title: str, *args, **kwargs) -> None:
        self.title = title  # Must be set before Progress.__init__ renders
        super().__init__(*args, **kwargs)

    def get_renderables(self):
        yield Panel(
            self.make_tasks_table(self.tasks),
            title=f"[bold]{self.title}[/]",
            title_align="left",
            expand=False,
            highlight=True,
        )


@dataclass
class ModuleSummary:
    """Parameter counts of one top-level model component."""

    name: str
    blocks: int = 0
    values: int = 0
    trainable: int = 0


def summarize_blocks(shapes: dict[str, tuple[int, ...]], trainable: dict[str, bool]) -> list[ModuleSummary]:
    """
    Group parameter blocks by the component they belong to.

    Block names are dotted paths such as `head.blocks.0.q.weight`; the first
    part names the component. Components keep the order they first appear in.
    """
    summaries: dict[str, ModuleSummary] = {}
    for name, shape in shapes.items():
        summary = summaries.setdefault(name.split(".")[0], ModuleSummary(name.split(".")[0]))
        size = int(np.prod(shape, dtype=np.int64))
        summary.blocks += 1
        summary.values += size
        if trainable.get(name, False):
            summary.trainable += size
    return list(summaries.values())


def summary_table(title: str, summaries: list[ModuleSummary]) -> Table:
    table = Table(title=title, title_justify="left")
    table.add_column("Component")
    table.add_column("Blocks", justify="right")
    table.add_column("Values", justify="right")
    table.add_column("Trainable", justify="right")
    for s in summaries:
        table.add_row(s.name, str(s.blocks), humanize.intcomma(s.values), humanize.intcomma(s.trainable))
    total = sum(s.values for s in summaries)
    table.add_section()
    table.add_row(
        "[bold]total[/]",
        str(sum(s.blocks for s in summaries)),
        f"{humanize.intcomma(total)} ({humanize.naturalsize(total * 8, binary=True)})",
        humanize.intcomma(sum(s.trainable for s in summaries)),
    )
    return table


def metrics_table(title: str, overall: dict[str, float], per_task: dict[str, dict[str, float]]) -> Table:
    """One row per metric, one column for all episodes and one per task."""
    table = Table(title=title, title_justify="left")
    table.add_column("Metric")
    table.add_column("all", justify="right")
    for task in per_task:
        table.add_column(task, justify="right")
    for key, value in overall.items():
        row = [f"{value:.4f}"] + [f"{per_task[task].get(key, float('nan')):.4f}" for task in per_task]
        table.add_row(key, *row)
    return table


def file_size(path: Path) -> str:
    return humanize.naturalsize(path.stat().st_size)
