"""Image quality metrics (PSNR, SSIM, pluggable perceptual distance) and the
evaluation/report protocol."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .imaging import ImageTensor

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

SSIM_PARAMS = {
    "window": SSIM_WINDOW,
    "sigma": SSIM_SIGMA,
    "K1": SSIM_K1,
    "K2": SSIM_K2,
    "data_range": 1.0,
    "padding": "valid",
}


class MetricError(ValueError):
    pass


def as_unit(x) -> torch.Tensor:
    """Unit-range tensor from an ImageTensor; tensors are assumed unit already."""
    if isinstance(x, ImageTensor):
        return x.to("unit").torch()
    return x


def _pair(a, b) -> tuple[torch.Tensor, torch.Tensor]:
    a, b = as_unit(a), as_unit(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def psnr(a, b, mask: torch.Tensor | None = None) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images.

    With ``mask`` (1 x H x W, broadcast over channels) only masked pixels
    count.  Zero error returns the 100 dB cap.
    """
    a, b = _pair(a, b)
    err = (a.double() - b.double()) ** 2
    if mask is not None:
        m = as_unit(mask).double().expand_as(err)
        if m.sum() == 0:
            raise MetricError("mask selects no pixels")
        mse = float((err * m).sum() / m.sum())
    else:
        mse = float(err.mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    r = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-scale SSIM over unit-range images.

    Gaussian 11x11 window (sigma 1.5), K1=0.01, K2=0.03, valid filtering,
    computed per channel.  Returns ``(mean, map)``; the map has shape
    N x C x (H-10) x (W-10).  Differentiable.
    """
    a, b = _pair(a, b)
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    n, c, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise MetricError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window(dtype=a.dtype).to(a.device).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)
    filt = lambda t: F.conv2d(t, win, groups=c)  # noqa: E731
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    smap = num / den
    return smap.mean(), smap


# ---------------------------------------------------------------- perceptual


class PerceptualPluginError(RuntimeError):
    pass


@dataclass(frozen=True)
class PerceptualPlugin:
    """A named distance function ``fn(a, b) -> float`` over unit-range images."""

    name: str
    fn: Callable[[torch.Tensor, torch.Tensor], float]


_PERCEPTUAL: dict[str, PerceptualPlugin] = {}


def register_perceptual(name: str, fn: Callable[[torch.Tensor, torch.Tensor], float]) -> PerceptualPlugin:
    plugin = PerceptualPlugin(name, fn)
    _PERCEPTUAL[name] = plugin
    return plugin


def get_perceptual(name: str | None) -> PerceptualPlugin | None:
    if name is None:
        return None
    if name not in _PERCEPTUAL:
        raise PerceptualPluginError(f"perceptual plugin {name!r} not registered")
    return _PERCEPTUAL[name]


def perceptual_distance(a, b, plugin: PerceptualPlugin | None) -> float | None:
    if plugin is None:
        return None
    a, b = _pair(a, b)
    try:
        return float(plugin.fn(a, b))
    except Exception as exc:
        raise PerceptualPluginError(f"perceptual plugin {plugin.name!r} failed: {exc}") from exc


# ---------------------------------------------------------------- reports


@dataclass
class FrameScore:
    frame_id: str
    ssim: float
    psnr_db: float
    perceptual: float | None = None
    masked_psnr_db: float | None = None


@dataclass
class MetricReport:
    per_frame: list[FrameScore]
    method_label: str = "ours"
    split: str = ""
    config_hash: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.per_frame:
            raise MetricError("report needs at least one frame")

    def _mean(self, attr: str) -> float | None:
        vals = [getattr(f, attr) for f in self.per_frame]
        if any(v is None for v in vals):
            return None
        total = 0.0
        for v in vals:  # fixed order
            total += v
        return total / len(vals)

    @property
    def aggregate(self) -> dict[str, float | None]:
        out = {"ssim": self._mean("ssim"), "psnr_db": self._mean("psnr_db")}
        out["perceptual"] = self._mean("perceptual")
        if self.per_frame[0].masked_psnr_db is not None:
            out["masked_psnr_db"] = self._mean("masked_psnr_db")
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "method_label": self.method_label,
                "split": self.split,
                "config_hash": self.config_hash,
                "metadata": self.metadata,
                "aggregate": self.aggregate,
                "per_frame": [vars(f) for f in self.per_frame],
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(
            [FrameScore(**f) for f in d["per_frame"]],
            d["method_label"],
            d["split"],
            d["config_hash"],
            d["metadata"],
        )


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def score_frame(rec, gt, frame_id: str, plugin=None, mask=None) -> FrameScore:
    """Full-frame scores of unit-range ``rec`` against ``gt``."""
    with torch.no_grad():
        s, _ = ssim(rec.double(), gt.double())
        return FrameScore(
            frame_id,
            float(s),
            psnr(rec, gt),
            perceptual_distance(rec, gt, plugin),
            psnr(rec, gt, mask) if mask is not None and mask.sum() > 0 else None,
        )


def oracle_generator(batch) -> torch.Tensor:
    """Test hook: returns the ground truth (signed range)."""
    return batch.ground_truth


def identity_generator(batch) -> torch.Tensor:
    """Test hook: returns the occluded input unchanged."""
    return batch.occluded


def evaluate(
    params,
    source,
    mode: str = "attention",
    generator: Callable | None = None,
    plugin: PerceptualPlugin | None = None,
    batch_size: int = 8,
    masked_only: bool = False,
    method_label: str = "ours",
    split: str = "test",
) -> MetricReport:
    """Score every sample of ``source`` (a SampleSource, in order).

    The generator defaults to ``generator_forward(params, ., mode)`` in eval
    mode; ``generator`` replaces it (e.g. :func:`oracle_generator`).
    """
    from .dataset import iter_batches
    from .network import generator_forward

    if len(source) == 0:
        raise MetricError("empty test split")
    if generator is None:
        if params is None:
            raise MetricError("need params or a generator")

        dtype = next(params.parameters()).dtype

        def generator(batch):
            x_rec, _ = generator_forward(params, batch.occluded.to(dtype), mode, mask=batch.mask)
            return x_rec

        was_training = params.training
        params.eval()
    else:
        was_training = None
    rows = []
    try:
        with torch.no_grad():
            for batch in iter_batches(source, batch_size, shuffle=False):
                x_rec = generator(batch)
                rec = ((x_rec.double() + 1) / 2).clamp(0, 1)
                gt = (batch.ground_truth.double() + 1) / 2
                for i, fid in enumerate(batch.frame_ids):
                    mask = batch.mask[i] if masked_only else None
                    rows.append(score_frame(rec[i], gt[i], fid, plugin, mask))
    finally:
        if was_training:
            params.train()
    meta = {"ssim_params": SSIM_PARAMS, "psnr_cap_db": PSNR_CAP_DB, "mode": mode, "full_frame": True}
    if plugin is not None:
        meta["perceptual_plugin"] = plugin.name
    chash = config_hash(params.config.to_dict()) if params is not None else ""
    return MetricReport(rows, method_label, split, chash, meta)


TABLE_COLUMNS = ("method", "SSIM", "PSNR", "LPIPS")


def compare_report(reports: Sequence[MetricReport]) -> list[dict]:
    """One row per method: method, SSIM, PSNR, LPIPS (None when no plugin)."""
    if not reports:
        raise MetricError("need at least one report")
    splits = {r.split for r in reports}
    if len(splits) > 1:
        raise MetricError(f"reports cover different splits: {sorted(splits)}")
    rows = []
    for r in reports:
        agg = r.aggregate
        rows.append(
            {"method": r.method_label, "SSIM": agg["ssim"], "PSNR": agg["psnr_db"], "LPIPS": agg["perceptual"]}
        )
    return rows


def table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for row in rows:
        writer.writerow(["" if row[c] is None else (f"{row[c]:.6f}" if c != "method" else row[c]) for c in TABLE_COLUMNS])
    return buf.getvalue()


def format_table(rows: list[dict]) -> str:
    """Plain-text table; the LPIPS column is omitted when no row has it."""
    cols = [c for c in TABLE_COLUMNS if c == "method" or any(r[c] is not None for r in rows)]
    heads = {"method": "Method", "SSIM": "SSIM↑", "PSNR": "PSNR↑", "LPIPS": "LPIPS↓"}
    cells = [[heads[c] for c in cols]]
    for r in rows:
        cells.append([r["method"]] + [f"{r[c]:.3f}" if r[c] is not None else "-" for c in cols[1:]])
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    return "\n".join(" | ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells)


def write_report(report: MetricReport, path: str | Path) -> None:
    Path(path).write_text(report.to_json() + "\n", encoding="utf-8")
