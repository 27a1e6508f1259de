"""File artifacts: design files, EIG estimates, metric tables, SVG plots.

All writes are atomic (temp file + rename) and byte-deterministic: JSON
is emitted with sorted keys, floats go through repr, and no timestamps
or environment details enter any payload.  Every file carries the same
header block (tool version, config hash, model hash, seed) so mixed-up
artifacts are detected instead of merged.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile

import numpy as np

from .trainer import ContinuousDesign, DiscretePolicy, FixedDiscreteDesign

TOOL = {"name": "maxeig", "version": "0.1.0"}

METRIC_COLUMNS = [
    "method",
    "eig_mean", "eig_se",
    "mse_mstar_mean", "mse_mstar_se",
    "mse_psi_mean", "mse_psi_se",
    "mse_a_or_hitrate_mean", "mse_a_or_hitrate_se",
    "regret_mean", "regret_se",
    "n_envs", "seed",
]


def atomic_write_text(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=1) + "\n")


def header(resolved, seed: int | None = None) -> dict:
    return {
        "tool": TOOL,
        "config_hash": resolved.config_hash,
        "model_hash": resolved.model_hash,
        "seed": resolved.seed if seed is None else seed,
    }


# -- design files ------------------------------------------------------------


def design_payload(design, method: str, resolved, contexts) -> dict:
    payload = header(resolved)
    payload["method"] = method
    payload["contexts"] = contexts.experimental.tolist()
    payload["eval_contexts"] = contexts.evaluation.tolist()
    if isinstance(design, FixedDiscreteDesign):
        payload["action_kind"] = "discrete"
        payload["designs"] = design.treatments.tolist()
    elif isinstance(design, ContinuousDesign):
        payload["action_kind"] = "continuous"
        payload["designs"] = design.actions.tolist()
    elif isinstance(design, DiscretePolicy):
        payload["action_kind"] = "discrete"
        payload["designs"] = design.logits.argmax(axis=1).tolist()
        payload["logits"] = design.logits.tolist()
    else:
        raise TypeError(f"cannot serialise design {type(design).__name__}")
    return payload


def save_design(path, design, method: str, resolved, contexts) -> None:
    write_json(path, design_payload(design, method, resolved, contexts))


def load_design(path):
    """Returns (design, payload); the design is always concrete."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload["action_kind"] == "discrete":
        design = FixedDiscreteDesign(np.asarray(payload["designs"], dtype=np.int64))
    else:
        design = ContinuousDesign(np.asarray(payload["designs"], dtype=np.float64),
                                  trainable=False)
    return design, payload


# -- metric tables -----------------------------------------------------------


def metrics_row(method: str, eig_estimate, deployment: dict, seed: int) -> dict:
    eig_mean, eig_se = eig_estimate
    return {
        "method": method,
        "eig_mean": eig_mean,
        "eig_se": eig_se,
        "mse_mstar_mean": deployment["mse_mstar_mean"],
        "mse_mstar_se": deployment["mse_mstar_se"],
        "mse_psi_mean": deployment["mse_psi_mean"],
        "mse_psi_se": deployment["mse_psi_se"],
        "mse_a_or_hitrate_mean": deployment["mse_a_or_hitrate_mean"],
        "mse_a_or_hitrate_se": deployment["mse_a_or_hitrate_se"],
        "regret_mean": deployment["regret_mean"],
        "regret_se": deployment["regret_se"],
        "n_envs": deployment["n_envs"],
        "seed": seed,
        # diagnostics; not part of the fixed CSV schema
        "ess_mean": deployment.get("ess_mean"),
        "n_failed": deployment.get("n_failed", 0),
    }


def metrics_csv_text(rows: list) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(row[k]) for k in METRIC_COLUMNS})
    return buf.getvalue()


def _cell(value):
    if isinstance(value, float):
        return repr(float(value))
    return value


def write_metrics(csv_path, json_path, rows: list, resolved) -> None:
    atomic_write_text(csv_path, metrics_csv_text(rows))
    payload = header(resolved)
    payload["rows"] = rows
    write_json(json_path, payload)


def write_calibration_csv(path, records: list) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf, fieldnames=["env", "posterior_std", "l2_error", "l2_error_rolling"],
        lineterminator="\n",
    )
    writer.writeheader()
    for rec in records:
        writer.writerow({k: _cell(rec[k]) for k in writer.fieldnames})
    atomic_write_text(path, buf.getvalue())


# -- SVG design plots --------------------------------------------------------

_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]


def design_scatter_svg(payload: dict, width: int = 640, height: int = 400) -> str:
    """Scatter of designs against their experimental contexts.

    Discrete designs plot one marker per experiment at (context, treatment),
    colour-coded by treatment; continuous designs plot (context, action).
    """
    contexts = payload["contexts"]
    designs = payload["designs"]
    discrete = payload["action_kind"] == "discrete"
    margin = 46

    xs = _scaled_positions(contexts, margin, width - margin)
    if discrete:
        levels = sorted(set(int(d) for d in designs))
        span = [min(designs) - 0.5, max(designs) + 0.5]
        ys = _scaled_positions(designs, height - margin, margin, span)
    else:
        ys = _scaled_positions(designs, height - margin, margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="{height - 8}" text-anchor="middle" '
        f'font-size="12">experimental context</text>',
        f'<text x="14" y="{height // 2}" transform="rotate(-90 14 {height // 2})" '
        f'text-anchor="middle" font-size="12">'
        + ("treatment" if discrete else "action") + "</text>",
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="#333"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="#333"/>',
    ]
    for x, y, d in zip(xs, ys, designs):
        colour = _PALETTE[int(d) % len(_PALETTE)] if discrete else _PALETTE[0]
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="5" fill="{colour}"/>')
    if discrete:
        for i, level in enumerate(levels):
            colour = _PALETTE[level % len(_PALETTE)]
            parts.append(
                f'<rect x="{width - margin + 8}" y="{margin + 18 * i}" width="10" '
                f'height="10" fill="{colour}"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _scaled_positions(values, lo: float, hi: float, span=None) -> list:
    vals = [float(v) for v in values]
    vmin, vmax = (min(vals), max(vals)) if span is None else span
    if vmax == vmin:
        vmax = vmin + 1.0
    return [lo + (hi - lo) * (v - vmin) / (vmax - vmin) for v in vals]


# -- comparison merging -------------------------------------------------------


class MergeError(ValueError):
    pass


def merge_metric_files(paths: list) -> tuple:
    """Concatenate rows from metric JSON files in input order.

    Refuses to merge files whose model hashes differ.
    """
    rows = []
    model_hash = None
    for path in paths:
        with open(path) as fh:
            payload = json.load(fh)
        if model_hash is None:
            model_hash = payload["model_hash"]
        elif payload["model_hash"] != model_hash:
            raise MergeError(
                f"{path} was produced under a different model config "
                f"({payload['model_hash']} != {model_hash})"
            )
        rows.extend(payload["rows"])
    return rows, model_hash
