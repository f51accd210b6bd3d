"""Tracking metrics over a set of pairs."""

from __future__ import annotations

import numpy as np

from . import data, geometry
from .registration import DegenerateConfiguration, track

METRICS = ("euler_mae_deg", "rotation_frobenius", "translation_mm", "translation_voxels", "dice")


def pair_metrics(t_est, pair):
    out = {}
    t = pair.transform
    if t is not None:
        dt = t_est.translation - t.translation
        out["euler_mae_deg"] = geometry.euler_mae(t_est.rotation, t.rotation)
        out["rotation_frobenius"] = float(np.linalg.norm(np.eye(3) - t.rotation @ t_est.rotation.T))
        out["geodesic_deg"] = float(np.degrees(geometry.rotation_error_geodesic(t_est.rotation, t.rotation)))
        out["translation_mm"] = float(np.linalg.norm(dt))
        out["translation_voxels"] = data.translation_voxels(dt, pair.fixed.voxel_size)
    if pair.fixed_mask is not None and pair.moving_mask is not None:
        mask = pair.fixed.with_data(pair.fixed_mask.astype(np.float64))
        out["dice"] = data.dice(data.warp_mask(mask, t_est), pair.moving_mask)
    return out


def evaluate(net, params, pairs):
    rows = []
    for i, pair in enumerate(pairs):
        try:
            t_est, diag = track(pair.fixed, pair.moving, net, params)
        except DegenerateConfiguration as exc:
            rows.append({"pair": i, "error": str(exc)})
            continue
        row = {"pair": i, **pair_metrics(t_est, pair), "estimate": t_est.to_dict(),
               "residual_mm2": diag["residual_mm2"]}
        rows.append(row)
    summary = {}
    for m in METRICS + ("geodesic_deg",):
        vals = [r[m] for r in rows if m in r]
        if vals:
            summary[m] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
    failed = sum(1 for r in rows if "error" in r)
    return {"pairs": len(pairs), "failed": failed, "summary": summary, "per_pair": rows}


def format_table(report):
    lines = [f"{'metric':<22}{'mean':>12}{'std':>12}{'n':>6}"]
    for m, s in report["summary"].items():
        lines.append(f"{m:<22}{s['mean']:>12.4f}{s['std']:>12.4f}{s['n']:>6d}")
    if report["failed"]:
        lines.append(f"degenerate pairs: {report['failed']}")
    return "\n".join(lines)
