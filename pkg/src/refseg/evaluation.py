"""oIoU / mIoU accumulation, the score ablation matrix and the weight sweep.

Pixel counts are exact integers; the only floating-point steps are the final
divisions and a correctly rounded sum (``math.fsum``) for mIoU, so metrics do
not depend on sample order.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import EmptyAccumulator
from .masks import BinaryMask, RleCounts, intersection_union, ratio, rle_decode
from .scoring import FusionWeights, ScoreBreakdown, refuse, select_mask


@dataclass
class MetricAccumulator:
    total_intersection: int = 0
    total_union: int = 0
    per_sample_iou: list[float] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.per_sample_iou)

    def add_counts(self, inter: int, union: int) -> MetricAccumulator:
        if not 0 <= inter <= union:
            raise ValueError(f"need 0 <= intersection <= union, got {inter}, {union}")
        self.total_intersection += inter
        self.total_union += union
        self.per_sample_iou.append(ratio(inter, union))
        return self

    def accumulate(self, pred: BinaryMask, gt: BinaryMask) -> MetricAccumulator:
        return self.add_counts(*intersection_union(pred, gt))

    def finalize(self) -> tuple[float, float]:
        """Return ``(oIoU, mIoU)``."""
        if self.n == 0:
            raise EmptyAccumulator("no samples accumulated")
        oiou = ratio(self.total_intersection, self.total_union)
        miou = math.fsum(self.per_sample_iou) / self.n
        return oiou, miou


def accumulate(acc: MetricAccumulator, pred: BinaryMask, gt: BinaryMask) -> MetricAccumulator:
    return acc.accumulate(pred, gt)


def finalize(acc: MetricAccumulator) -> tuple[float, float]:
    return acc.finalize()


def overlaps_against(gt: RleCounts, proposals: Sequence[RleCounts]) -> list[tuple[int, int]]:
    """(intersection, union) of every proposal against the ground truth."""
    gt_mask = rle_decode(gt)
    return [intersection_union(rle_decode(p), gt_mask) for p in proposals]


@dataclass(frozen=True)
class ScoredSample:
    """Weight-independent scores of one sample plus its exact overlap counts."""

    sample_id: str
    breakdowns: Sequence[ScoreBreakdown]
    overlaps: Sequence[tuple[int, int]]

    def select(self, w: FusionWeights) -> int:
        return select_mask([refuse(b, w) for b in self.breakdowns])


def evaluate(scored: Sequence[ScoredSample], w: FusionWeights) -> tuple[tuple[float, float], list[int]]:
    """Metrics and selected indices when every sample is re-fused under ``w``."""
    acc = MetricAccumulator()
    picks = []
    for s in scored:
        idx = s.select(w)
        picks.append(idx)
        acc.add_counts(*s.overlaps[idx])
    return acc.finalize(), picks


@dataclass(frozen=True)
class AblationConfig:
    use_att: bool
    use_sur: bool

    def weights(self, w: FusionWeights) -> FusionWeights:
        return FusionWeights(w.alpha if self.use_att else 0.0, w.beta if self.use_sur else 0.0)

    @property
    def label(self) -> str:
        parts = ["S_van"] + (["S_att"] if self.use_att else []) + (["S_sur"] if self.use_sur else [])
        return " + ".join(parts)


# row order of the published ablation table
ABLATION_CONFIGS = (
    AblationConfig(False, False),
    AblationConfig(False, True),
    AblationConfig(True, False),
    AblationConfig(True, True),
)


@dataclass(frozen=True)
class AblationRow:
    config: AblationConfig
    oiou: float
    miou: float


def run_ablation(scored: Sequence[ScoredSample], w: FusionWeights) -> list[AblationRow]:
    rows = []
    for cfg in ABLATION_CONFIGS:
        (oiou, miou), _ = evaluate(scored, cfg.weights(w))
        rows.append(AblationRow(cfg, oiou, miou))
    return rows


@dataclass
class SweepGrid:
    alphas: list[float]
    betas: list[float]
    cells: list[list[tuple[float, float]]]

    def best(self, metric: str = "oiou") -> tuple[float, float, float, float]:
        """(alpha, beta, oIoU, mIoU) of the best cell; earliest cell wins ties."""
        k = 0 if metric == "oiou" else 1
        best = None
        for i, a in enumerate(self.alphas):
            for j, b in enumerate(self.betas):
                cell = self.cells[i][j]
                if best is None or cell[k] > best[2 + k]:
                    best = (a, b, cell[0], cell[1])
        assert best is not None
        return best


def run_sweep(scored: Sequence[ScoredSample], alphas: Sequence[float], betas: Sequence[float]) -> SweepGrid:
    if not alphas or not betas:
        raise ValueError("sweep grids must be non-empty")
    cells = [[evaluate(scored, FusionWeights(a, b))[0] for b in betas] for a in alphas]
    return SweepGrid(list(alphas), list(betas), cells)


def default_grid() -> tuple[list[float], list[float]]:
    alphas = [round(0.1 * i, 10) for i in range(11)]
    betas = [0.25 * i for i in range(9)]
    return alphas, betas


def _fmt(x: float) -> str:
    return repr(float(x))


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["use_att", "use_sur", "oIoU", "mIoU"])
    for r in rows:
        wr.writerow([int(r.config.use_att), int(r.config.use_sur), _fmt(r.oiou), _fmt(r.miou)])
    return buf.getvalue()


def sweep_csv(grid: SweepGrid) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["alpha", "beta", "oIoU", "mIoU"])
    for i, a in enumerate(grid.alphas):
        for j, b in enumerate(grid.betas):
            o, m = grid.cells[i][j]
            wr.writerow([_fmt(a), _fmt(b), _fmt(o), _fmt(m)])
    return buf.getvalue()


def write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
