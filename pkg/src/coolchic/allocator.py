"""Max-min quality bit allocation across images under a total byte budget."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field


class InfeasibleError(ValueError):
    def __init__(self, shortfall, cheapest_total, budget):
        super().__init__(
            f"budget {budget} bytes is {shortfall} bytes short of the cheapest allocation ({cheapest_total} bytes)"
        )
        self.shortfall = shortfall


@dataclass(frozen=True)
class RdPoint:
    image: str
    bytes: int
    quality: float
    lmbda: float | None = None
    psnr_db: float | None = None
    ms_ssim: float | None = None


@dataclass
class Allocation:
    chosen: dict
    budget: int
    total_bytes: int = field(init=False)
    min_quality: float = field(init=False)
    mean_quality: float = field(init=False)

    def __post_init__(self):
        self.total_bytes = sum(p.bytes for p in self.chosen.values())
        qs = [p.quality for p in self.chosen.values()]
        self.min_quality = min(qs)
        self.mean_quality = sum(qs) / len(qs)

    def table(self):
        return [(img, p.bytes, p.quality) for img, p in sorted(self.chosen.items())]


def normalize_points(points):
    """Group by image; drop duplicates and points dominated at equal size.

    Returns ``{image: [RdPoint, ...]}`` sorted by bytes.
    """
    groups = {}
    for p in points:
        if p.bytes <= 0:
            raise ValueError(f"{p.image}: point sizes must be positive, got {p.bytes}")
        groups.setdefault(p.image, []).append(p)
    out = {}
    for img, pts in groups.items():
        best = {}
        for p in pts:
            if p.bytes not in best or p.quality > best[p.bytes].quality:
                best[p.bytes] = p
        out[img] = sorted(best.values(), key=lambda p: p.bytes)
    return out


def _as_groups(points):
    if isinstance(points, dict):
        return {img: sorted(pts, key=lambda p: p.bytes) for img, pts in points.items()}
    return normalize_points(points)


def _cheapest_at(pts, threshold):
    best = None
    for p in pts:
        if p.quality >= threshold and (best is None or p.bytes < best.bytes):
            best = p
    return best


def feasible(points, budget, threshold):
    """True iff every image has a point of quality >= threshold and the cheapest such points fit."""
    total = 0
    for pts in _as_groups(points).values():
        p = _cheapest_at(pts, threshold)
        if p is None:
            return False
        total += p.bytes
    return total <= budget


def allocate_maxmin(points, budget):
    """Choose one point per image maximizing the minimum quality within ``budget``.

    The best threshold is found by bisection over the distinct point
    qualities; leftover bytes are then spent on the upgrade with the highest
    quality gain per byte until nothing more fits.
    """
    groups = _as_groups(points)
    if not groups:
        raise ValueError("no points to allocate")
    cheapest = sum(pts[0].bytes for pts in groups.values())
    if cheapest > budget:
        raise InfeasibleError(cheapest - budget, cheapest, budget)
    # every image must reach the threshold; its own best quality caps it
    cap = min(max(p.quality for p in pts) for pts in groups.values())
    levels = sorted({p.quality for pts in groups.values() for p in pts if p.quality <= cap})
    # levels[0] is feasible: every point qualifies, so it costs the cheapest total
    lo, hi = 0, len(levels) - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if feasible(groups, budget, levels[mid]):
            lo = mid
        else:
            hi = mid - 1
    threshold = levels[lo]
    chosen = {img: _cheapest_at(pts, threshold) for img, pts in groups.items()}
    _spend_leftover(groups, chosen, budget)
    return Allocation(chosen, budget)


def _spend_leftover(groups, chosen, budget):
    total = sum(p.bytes for p in chosen.values())
    while True:
        best = None
        for img, pts in groups.items():
            cur = chosen[img]
            for p in pts:
                extra = p.bytes - cur.bytes
                gain = p.quality - cur.quality
                if extra <= 0 or gain <= 0 or total + extra > budget:
                    continue
                key = (gain / extra, gain, img)
                if best is None or key > best[0]:
                    best = (key, img, p)
        if best is None:
            return
        _, img, p = best
        total += p.bytes - chosen[img].bytes
        chosen[img] = p


def brute_force_maxmin(points, budget):
    """Exhaustive max-min value (for checking); None when nothing fits."""
    from itertools import product

    groups = _as_groups(points)
    best = None
    for combo in product(*groups.values()):
        if sum(p.bytes for p in combo) <= budget:
            q = min(p.quality for p in combo)
            best = q if best is None else max(best, q)
    return best


# CSV interfaces ----------------------------------------------------------------


class CsvFormatError(ValueError):
    pass


def read_points_csv(path):
    """Rows of ``image,bytes,quality`` (header required)."""
    points = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:3]] != ["image", "bytes", "quality"]:
            raise CsvFormatError(f"line 1: expected header image,bytes,quality, got {header}")
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise CsvFormatError(f"line {lineno}: expected 3 columns, got {len(row)}")
            try:
                points.append(RdPoint(row[0].strip(), int(row[1]), float(row[2])))
            except ValueError as exc:
                raise CsvFormatError(f"line {lineno}: {exc}") from None
            if points[-1].bytes <= 0:
                raise CsvFormatError(f"line {lineno}: bytes must be positive")
    return points


def write_allocation_csv(path_or_file, allocation):
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    f = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(f)
        w.writerow(["image", "chosen_bytes", "chosen_quality"])
        for img, b, q in allocation.table():
            w.writerow([img, b, f"{q:.6f}"])
        w.writerow(["total", allocation.total_bytes, ""])
        w.writerow(["min", "", f"{allocation.min_quality:.6f}"])
        w.writerow(["mean", "", f"{allocation.mean_quality:.6f}"])
    finally:
        if own:
            f.close()
