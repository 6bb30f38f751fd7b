"""Procedure reports: JSON summary, text rendering and vector plots."""

from __future__ import annotations

import io
import json
from typing import IO, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .classifier import SkillCategory, SkillModel, feature_usage, predict  # noqa: E402
from .kinematics import KinematicSeries  # noqa: E402

KEY_FEATURES = 5

# fixed salt and no date keep the SVG bytes a function of the data only
_SVG_RC = {"svg.hashsalt": "microskill", "svg.fonttype": "path"}
_COLORS = {"needle_driver_s": "tab:blue", "needle_driver_c": "tab:orange", "scissors_s": "tab:green",
           "scissors_c": "tab:red", "needle": "tab:purple"}


def score_procedure(model: SkillModel, values: Mapping[str, float]) -> dict:
    """Category, probabilities and the most used model features with their values."""
    cat, proba = predict(model, dict(values))
    usage = feature_usage(model)
    ranked = sorted(usage, key=lambda n: (-usage[n], n))[:KEY_FEATURES]
    return {
        "category": cat.label,
        "probabilities": {c.label: float(p) for c, p in zip(SkillCategory, proba)},
        "key_features": [{"name": n, "value": values[n], "splits": usage[n]} for n in ranked],
    }


def procedure_report(score: Mapping, series: Sequence[KinematicSeries], meta: Mapping) -> dict:
    tracks = []
    for s in series:
        v = s.valid
        tracks.append({
            "object_id": s.object_id, "class": s.cls.value, "samples": int(len(s.frames)),
            "valid_samples": int(v.sum()),
            "mean_speed": float(s.speed[v].mean()) if v.any() else 0.0,
            "rms_jerk": float(np.sqrt(np.mean(s.jerk_magnitude[v] ** 2))) if v.any() else 0.0,
        })
    return {"meta": dict(meta), "category": score["category"], "probabilities": score["probabilities"],
            "key_features": score["key_features"], "tracks": tracks,
            "plots": ["trajectory.svg", "timelines.svg"]}


def render_report(rep: Mapping) -> str:
    lines = [f"Skill category: {rep['category']}",
             "Probabilities: " + ", ".join(f"{k} {v:.3f}" for k, v in rep["probabilities"].items()),
             "Key features:"]
    for f in rep["key_features"]:
        lines.append(f"  {f['name']:<48} {f['value']:.6g}")
    lines.append("Tracks:")
    for t in rep["tracks"]:
        lines.append(f"  #{t['object_id']:<3} {t['class']:<16} samples {t['samples']:>6}  "
                     f"mean speed {t['mean_speed']:9.2f} px/s  rms jerk {t['rms_jerk']:12.1f} px/s^3")
    return "\n".join(lines) + "\n"


def write_json(fh: IO[str], obj) -> None:
    json.dump(obj, fh, indent=1, sort_keys=False)
    fh.write("\n")


def _svg(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def trajectory_svg(series: Sequence[KinematicSeries]) -> str:
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for s in series:
            ax.plot(s.position[:, 0], s.position[:, 1], lw=0.8, color=_COLORS.get(s.cls.value),
                    label=f"#{s.object_id} {s.cls.value}")
        ax.invert_yaxis()  # image coordinates
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("x [px]")
        ax.set_ylabel("y [px]")
        ax.set_title("Tip trajectories")
        if series:
            ax.legend(fontsize=7, loc="upper right")
        return _svg(fig)


def timelines_svg(series: Sequence[KinematicSeries]) -> str:
    with plt.rc_context(_SVG_RC):
        fig, (a1, a2) = plt.subplots(2, 1, figsize=(7.0, 4.5), sharex=True)
        for s in series:
            t = s.frames * s.dt
            speed = np.where(s.valid, s.speed, np.nan)
            jerk = np.where(s.valid, s.jerk_magnitude, np.nan)
            a1.plot(t, speed, lw=0.6, color=_COLORS.get(s.cls.value), label=f"#{s.object_id} {s.cls.value}")
            a2.plot(t, jerk, lw=0.6, color=_COLORS.get(s.cls.value))
        a1.set_ylabel("speed [px/s]")
        a2.set_ylabel("jerk [px/s³]")
        a2.set_yscale("symlog", linthresh=1e3)
        a2.set_xlabel("t [s]")
        if series:
            a1.legend(fontsize=7, loc="upper right")
        return _svg(fig)
