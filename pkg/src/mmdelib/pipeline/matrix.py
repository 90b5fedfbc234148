"""The 3 family x 5 setup experiment matrix: train, decode congruently and incongruently, report."""

from __future__ import annotations

import logging
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..decode import derangement, write_permutation
from ..evaluation import corpus_bleu, significance
from ..transformer import FAMILIES
from .experiment import SETUPS, ExperimentSpec, PreparedData, decode_words, prepare_data, save_run, train

log = logging.getLogger(__name__)

MULTIMODAL = SETUPS[1:]
ALPHA = 0.05


@dataclass
class CellResult:
    family: str
    setup: str
    congruent_bleu: float | None = None
    incongruent_bleu: float | None = None
    p_value: float | None = None
    p_vs_text: float | None = None
    error: str | None = None
    hyps: list = field(default_factory=list, repr=False)

    @property
    def delta(self) -> float | None:
        if self.congruent_bleu is None or self.incongruent_bleu is None:
            return None
        return self.incongruent_bleu - self.congruent_bleu

    def machine_line(self) -> str:
        if self.error is not None:
            return f"{self.family} {self.setup} failed - - -"
        if self.setup == "Baseline":
            return f"{self.family} {self.setup} {self.congruent_bleu:.2f} - - -"
        return (f"{self.family} {self.setup} {self.congruent_bleu:.2f} {self.incongruent_bleu:.2f} "
                f"{self.delta:+.2f} {self.p_value:.4f}")


@dataclass
class MatrixReport:
    cells: dict[tuple[str, str], CellResult]

    def machine_lines(self) -> list[str]:
        return [self.cells[k].machine_line() for k in sorted_keys(self.cells)]

    def congruent_grid(self) -> str:
        rows = []
        for setup in SETUPS:
            row = []
            for fam in FAMILIES:
                c = self.cells.get((fam, setup))
                if c is None or c.error is not None:
                    row.append("failed" if c is not None else "")
                    continue
                mark = " †" if c.p_vs_text is not None and c.p_vs_text <= ALPHA else ""
                row.append(f"{c.congruent_bleu:.1f}{mark}")
            rows.append((setup, row))
        return _grid("Test BLEU (congruent); † = differs from text-only counterpart, p <= 0.05", rows)

    def delta_grid(self) -> str:
        rows = []
        for setup in MULTIMODAL:
            row = []
            for fam in FAMILIES:
                c = self.cells.get((fam, setup))
                if c is None or c.error is not None or c.delta is None:
                    row.append("failed" if c is not None else "")
                    continue
                arrow = "↑" if c.delta > 0 else "↓" if c.delta < 0 else "="
                mark = " †" if c.p_value <= ALPHA else ""
                row.append(f"{arrow} {abs(c.delta):.1f}{mark}")
            rows.append((setup, row))
        return _grid("Incongruent decoding: change w.r.t. congruent BLEU; † = p <= 0.05", rows)

    def render(self) -> str:
        parts = [self.congruent_grid(), "", self.delta_grid(), ""]
        failed = [c for c in self.cells.values() if c.error is not None]
        for c in failed:
            parts.append(f"cell {c.family} {c.setup} failed: {c.error}")
        parts += ["# family setup congruent_bleu incongruent_bleu delta p_value"] + self.machine_lines()
        return "\n".join(parts) + "\n"


def sorted_keys(cells) -> list[tuple[str, str]]:
    order = {k: i for i, k in enumerate((f, s) for f in FAMILIES for s in SETUPS)}
    return sorted(cells, key=order.__getitem__)


def _grid(title: str, rows) -> str:
    width = max(12, *(len(v) + 2 for _, r in rows for v in r))
    head = f"{'':16}" + "".join(f"{f:>{width}}" for f in FAMILIES)
    body = [f"{name:16}" + "".join(f"{v:>{width}}" for v in vals) for name, vals in rows]
    return "\n".join([title, head, *body])


def _write_lines(path: Path, sents) -> None:
    path.write_text("".join(" ".join(s) + "\n" for s in sents), encoding="utf-8")


def run_cell(spec: ExperimentSpec, prepared: PreparedData, out: Path, stage1_cache: dict, beam: int,
             iterations: int, max_epochs: int | None) -> CellResult:
    cell = CellResult(spec.family, spec.setup)
    system = train(spec, prepared, stage1_cache, max_epochs)
    cell_dir = out / "systems" / spec.name
    save_run(system, prepared, cell_dir)
    tag = system.config.feature_tag
    refs = prepared.refs["test"]
    congruent = decode_words(system.model, prepared, "test", tag, beam)
    _write_lines(cell_dir / "test.congruent.txt", congruent)
    cell.congruent_bleu = corpus_bleu(congruent, refs).bleu
    cell.hyps = congruent
    if tag is None:
        return cell
    visual = prepared.features(tag, "test")
    perm = derangement(len(visual), spec.seed)
    write_permutation(cell_dir / "test.permutation.txt", perm, spec.seed)
    incongruent = decode_words(system.model, prepared, "test", tag, beam, visual=visual[perm])
    _write_lines(cell_dir / "test.incongruent.txt", incongruent)
    cell.incongruent_bleu = corpus_bleu(incongruent, refs).bleu
    cell.p_value = significance(incongruent, congruent, refs, iterations, seed=spec.seed)
    return cell


def run_matrix(specs: list[ExperimentSpec], out_dir, prepared: PreparedData | None = None,
               beam: int | None = None, iterations: int = 10000, max_epochs: int | None = None,
               figures: bool = True) -> MatrixReport:
    """Train and evaluate every cell, continuing past per-cell failures.

    Writes ``report.txt`` (grids plus machine lines), ``lines.txt`` (machine
    lines only), per-system outputs under ``systems/`` and figures under ``figures/``.
    """
    if not specs:
        raise ValueError("no experiment specs given")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    first = specs[0]
    prepared = prepared or prepare_data(first.data_dir, first.train, first.seed)
    beam = beam or first.train.beam
    cache: dict = {}
    cells: dict[tuple[str, str], CellResult] = {}
    # Transformer cells first: deliberation cells reuse them as stage 1.
    for spec in sorted(specs, key=lambda s: (s.family != "Trans", FAMILIES.index(s.family), SETUPS.index(s.setup))):
        log.info("cell %s", spec.name)
        try:
            cells[(spec.family, spec.setup)] = run_cell(spec, prepared, out, cache, beam, iterations, max_epochs)
        except Exception as exc:  # a failed cell must not sink the matrix
            log.error("cell %s failed: %s", spec.name, exc)
            (out / "systems" / spec.name).mkdir(parents=True, exist_ok=True)
            (out / "systems" / spec.name / "error.txt").write_text(traceback.format_exc(), encoding="utf-8")
            cells[(spec.family, spec.setup)] = CellResult(spec.family, spec.setup, error=f"{type(exc).__name__}: {exc}")
    refs = prepared.refs["test"]
    for (fam, setup), cell in cells.items():
        base = cells.get((fam, "Baseline"))
        if setup != "Baseline" and cell.error is None and base is not None and base.error is None:
            cell.p_vs_text = significance(cell.hyps, base.hyps, refs, iterations, seed=first.seed)
    report = MatrixReport(cells)
    (out / "report.txt").write_text(report.render(), encoding="utf-8")
    (out / "lines.txt").write_text("\n".join(report.machine_lines()) + "\n", encoding="utf-8")
    if figures:
        render_figures(report, out / "figures")
    return report


def render_figures(report: MatrixReport, fig_dir) -> list[Path]:
    """Grouped bar charts of congruent BLEU and incongruent deltas (Agg backend, PNG files)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, setups, value, ylabel in (
            ("congruent_bleu.png", SETUPS, lambda c: c.congruent_bleu, "test BLEU"),
            ("incongruent_delta.png", MULTIMODAL, lambda c: c.delta, "BLEU change (incongruent - congruent)")):
        fig, ax = plt.subplots(figsize=(8, 4))
        x = np.arange(len(setups))
        w = 0.8 / len(FAMILIES)
        for j, fam in enumerate(FAMILIES):
            vals = []
            for s in setups:
                c = report.cells.get((fam, s))
                v = value(c) if c is not None and c.error is None else None
                vals.append(np.nan if v is None else v)
            ax.bar(x + (j - 1) * w, vals, w, label=fam)
        ax.set_xticks(x, setups)
        ax.set_ylabel(ylabel)
        ax.axhline(0.0, color="black", linewidth=0.6)
        ax.legend()
        fig.tight_layout()
        fig.savefig(fig_dir / name, dpi=100)
        plt.close(fig)
        paths.append(fig_dir / name)
    return paths
