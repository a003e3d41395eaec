#!/usr/bin/env python3
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from importlib.resources import files
from pathlib import Path
from typing import Any

import numpy as np
from mako.template import Template

from igpode.errors import ConfigError
from igpode.simdata import Dataset

logger = logging.getLogger(__name__)

DIM_NAMES = ("s_x", "s_y", "v_x", "v_y")


@dataclass
class Panel:
    label: str
    offset: int
    band: str
    mean: str
    truth: str
    prefix_x: float | None
    y_min: float
    y_max: float


@dataclass
class Plot:
    title: str
    width: int
    height: int
    margin: int
    inner_width: int
    panel_height: int
    panels: list[Panel]


def _points(xs: np.ndarray, ys: np.ndarray) -> str:
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))


class PlotExporter:
    """Writes one CSV and one SVG per sequence and object from an evaluation
    report: the truth, the predictive mean and the shaded 95% band per observed
    dimension.
    """

    def __init__(self, width: int = 640, panel_height: int = 140, margin: int = 40):
        self.width = width
        self.panel_height = panel_height
        self.margin = margin
        self.template = Template(filename=str(files("igpode").joinpath("plot.svg.tpl")))

    def _offset(self, index: int) -> int:
        return self.margin + index * (self.panel_height + self.margin // 2)

    def _height(self, num_panels: int) -> int:
        return self._offset(num_panels)

    def _panel(
        self,
        index: int,
        label: str,
        times: np.ndarray,
        truth: np.ndarray,
        mean: np.ndarray,
        lo: np.ndarray,
        hi: np.ndarray,
        prefix: int | None,
    ) -> Panel:
        y_min = float(min(truth.min(), lo.min()))
        y_max = float(max(truth.max(), hi.max()))
        if y_max - y_min < 1e-9:
            y_min, y_max = y_min - 1.0, y_max + 1.0
        span = times[-1] - times[0] if len(times) > 1 else 1.0
        inner = self.width - 2 * self.margin
        xs = self.margin + inner * (times - times[0]) / span

        def y(v):
            return self.panel_height * (1.0 - (v - y_min) / (y_max - y_min))

        band = _points(
            np.concatenate([xs, xs[::-1]]),
            np.concatenate([y(hi), y(lo[::-1])]),
        )
        prefix_x = float(xs[prefix - 1]) if prefix and prefix <= len(xs) else None
        return Panel(
            label,
            self._offset(index),
            band,
            _points(xs, y(mean)),
            _points(xs, y(truth)),
            prefix_x,
            y_min,
            y_max,
        )

    def export(
        self,
        report: dict[str, Any],
        dataset: Dataset,
        output: str | Path,
    ) -> list[Path]:
        """Renders every sequence in ``report`` against the truth in ``dataset``.

        :return: the files written
        :rtype: list[Path]
        """
        outpath = Path(output)
        outpath.mkdir(parents=True, exist_ok=True)
        prefix = report.get("header", {}).get("encoder_prefix")
        written = []
        for seq in report["sequences"]:
            index = seq["index"]
            if index >= dataset.num_sequences:
                raise ConfigError(
                    f"report sequence {index} is missing from the truth dataset",
                )
            mean = np.asarray(seq["mean"])
            lo = np.asarray(seq["lo95"])
            hi = np.asarray(seq["hi95"])
            steps, num_objects, obs_dim = mean.shape
            truth = dataset.truth[index, :steps]
            if truth.shape != mean.shape:
                raise ConfigError(
                    f"truth {truth.shape} does not match report {mean.shape}",
                )
            times = dataset.dt * np.arange(steps)
            names = [
                DIM_NAMES[d] if d < len(DIM_NAMES) else f"d{d}" for d in range(obs_dim)
            ]

            for a in range(num_objects):
                stem = outpath / f"seq{index:03d}_obj{a}"
                csv_path = stem.with_suffix(".csv")
                with csv_path.open("w", newline="") as f:
                    writer = csv.writer(f)
                    header = ["t"]
                    for name in names:
                        header += [
                            f"{col}_{name}" for col in ("truth", "mean", "lo95", "hi95")
                        ]
                    writer.writerow(header)
                    for n in range(steps):
                        row = [f"{times[n]:.6g}"]
                        for d in range(obs_dim):
                            row += [
                                repr(float(v[n, a, d]))
                                for v in (truth, mean, lo, hi)
                            ]
                        writer.writerow(row)

                panels = [
                    self._panel(
                        d,
                        names[d],
                        times,
                        truth[:, a, d],
                        mean[:, a, d],
                        lo[:, a, d],
                        hi[:, a, d],
                        prefix,
                    )
                    for d in range(obs_dim)
                ]
                plot = Plot(
                    title=f"sequence {index}, object {a}",
                    width=self.width,
                    height=self._height(obs_dim),
                    margin=self.margin,
                    inner_width=self.width - 2 * self.margin,
                    panel_height=self.panel_height,
                    panels=panels,
                )
                svg_path = stem.with_suffix(".svg")
                with svg_path.open("w") as f:
                    f.write(self.template.render(plot=plot))
                written += [csv_path, svg_path]
                logger.debug(f"wrote {csv_path} and {svg_path}")
        return written
