"""Tables built purely from search artifacts (trial logs, baselines, minima)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

from .arm import ArmModel
from .fpcodec import FP32, FpFormat, data_movement_model
from .pipeline import PipelineSettings, format_attempt_stats
from .precision import SLOTS, PrecisionConfig
from .search import BaselineTargets, SearchSpace, Trial, best_trial, reduce_space, reduction_summary

IKO_SLOTS = ("out_spheres", "grad_out_spheres", "out_vec", "closest_pt")
TO_SLOTS = ("out_spheres", "grad_out_spheres", "out_vec", "closest_pt_swept")


def format_cell(fmt: FpFormat) -> str:
    return f"FP{fmt.total_bits} ({fmt.name})"


def meets_target(trial: Trial, env: str, targets: BaselineTargets) -> bool:
    """Whether ``trial`` matched the baseline on ``env`` alone.

    A stopped environment carries an optimistic rate that is still below its
    target, so the rate comparison never admits an unfinished environment.
    """
    rate = trial.rates.get(env)
    if rate is None:
        return False
    return round(rate * targets.problems[env]) >= targets.successes[env]


def best_per_environment(trials: list[Trial], targets: BaselineTargets) -> dict[str, Trial | None]:
    out = {}
    for env in targets.successes:
        ok = [replace(t, feasible=True) for t in trials if meets_target(t, env, targets)]
        out[env] = best_trial(ok)
    return out


@dataclass
class GridRow:
    label: str
    config: PrecisionConfig | None

    def cells(self) -> list[str]:
        if self.config is None:
            return ["n/a"] * len(SLOTS) + [""]
        return [format_cell(f) for f in self.config.formats()] + [str(self.config.total_bits)]


def format_grid(trials: list[Trial], targets: BaselineTargets, minima: dict | None = None) -> dict[str, list[GridRow]]:
    """Two blocks: the per-slot minima (one joint row) and the smallest
    configuration that holds the baseline per environment, plus the joint
    best that holds it everywhere."""
    blocks: dict[str, list[GridRow]] = {}
    if minima:
        witnesses = PrecisionConfig.from_dict({s: minima["slots"][s]["witness"] for s in SLOTS})
        blocks["Per-tensor binary search"] = [GridRow("all environments", witnesses)]
    rows = [GridRow(env, t.config if t else None) for env, t in best_per_environment(trials, targets).items()]
    joint = best_trial(trials)
    rows.append(GridRow("all environments", joint.config if joint else None))
    blocks["Combinatorial search"] = rows
    return blocks


def slot_elements(model: ArmModel, settings: PipelineSettings) -> list[tuple[str, str, int]]:
    """(stage, slot, element count) for one optimizer iteration of each stage."""
    ns, np_ = model.n_spheres, model.n_pairs
    sizes = {
        "out_spheres": ns * 3,
        "grad_out_spheres": ns * 2,
        "out_vec": np_,
        "closest_pt": ns * 3,
        "closest_pt_swept": ns * 3,
    }
    rows = [("IKO", slot, settings.ik_seeds * sizes[slot]) for slot in IKO_SLOTS]
    rows += [("TO", slot, settings.to_seeds * settings.horizon * sizes[slot]) for slot in TO_SLOTS]
    return rows


def size_table(
    model: ArmModel,
    settings: PipelineSettings,
    config: PrecisionConfig | None = None,
    scales=(1, 2, 4, 8),
) -> list[dict]:
    """Bytes moved per slot as IKO and TO seed counts grow together."""
    config = config or PrecisionConfig()
    out = []
    for k in scales:
        scaled = replace(settings, ik_seeds=settings.ik_seeds * k, to_seeds=settings.to_seeds * k)
        for stage, slot, count in slot_elements(model, scaled):
            fmt = getattr(config, slot)
            out.append(
                {
                    "ik_seeds": scaled.ik_seeds,
                    "to_seeds": scaled.to_seeds,
                    "stage": stage,
                    "slot": slot,
                    "elements": count,
                    "fp32_bytes": data_movement_model(count, FP32),
                    "format": fmt.name,
                    "bytes": data_movement_model(count, fmt),
                }
            )
    return out


def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def grid_rows(blocks: dict[str, list[GridRow]]) -> list[dict]:
    out = []
    for block, rows in blocks.items():
        for row in rows:
            cells = row.cells()
            out.append({"block": block, "environment": row.label, **dict(zip(SLOTS, cells)), "total_bits": cells[-1]})
    return out


def _md_table(header: list[str], rows: list[list[str]]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return lines


def space_summary(minima_bits: dict[str, int]) -> dict:
    space: SearchSpace = reduce_space(minima_bits)
    return {"size": space.size, "reduction_factor": space.reduction_factor}


def render_markdown(
    trials: list[Trial],
    targets: BaselineTargets,
    minima: dict | None = None,
    baseline: dict | None = None,
    best: dict | None = None,
    sizes: list[dict] | None = None,
) -> str:
    lines = ["# Precision search report", ""]
    lines += ["## Baseline", ""]
    lines += _md_table(
        ["environment", "successes", "problems", "rate"],
        [[e, targets.successes[e], targets.problems[e], f"{targets.rates[e]:.3f}"] for e in targets.successes],
    )
    lines.append("")

    if minima:
        bits = {s: minima["slots"][s]["min_bits"] for s in SLOTS}
        summary = space_summary(bits)
        lines += ["## Search space", ""]
        lines.append("Per-slot minimum bits: " + ", ".join(f"{s}={b}" for s, b in bits.items()))
        lines.append(f"Reduced space size: {summary['size']:,} (reduction {summary['reduction_factor']:.2f}x)")
        flagged = [s for s in SLOTS if not minima["slots"][s].get("monotonic", True)]
        if flagged:
            lines.append("Monotonicity check failed for: " + ", ".join(flagged))
        lines.append("")

    lines += ["## Formats per environment", ""]
    header = ["", *SLOTS, "total_bits"]
    for block, rows in format_grid(trials, targets, minima).items():
        lines.append(f"**{block}**")
        lines.append("")
        lines += _md_table(header, [[r.label, *r.cells()] for r in rows])
        lines.append("")

    joint = best_trial(trials)
    lines += ["## Best configuration", ""]
    if joint is None:
        lines.append("No feasible configuration in the log.")
    else:
        red = reduction_summary(joint.config)
        lines.append(f"Config: {joint.config}  total_bits={joint.total_bits} (trial {joint.trial_id})")
        lines.append(
            f"Size reduction: aggregate {red['aggregate']:.2f}x (160 / total bits), "
            f"mean per-slot {red['mean_per_slot']:.2f}x"
        )
        lines.append("")
        lines += _md_table(
            ["slot", "format", "compression"],
            [[s, f.name, f"{32 / f.total_bits:.2f}x"] for s, f in zip(SLOTS, joint.config.formats())],
        )
    lines.append("")
    lines.append(f"Trials logged: {len(trials)}; feasible: {sum(t.feasible for t in trials)}")
    lines.append("")

    stats_rows = attempt_rows(baseline, best)
    if stats_rows:
        lines += ["## Attempts (median, 75%, mean)", ""]
        lines += _md_table(["config", "environment", "attempts"], [[r["config"], r["environment"], r["attempts"]] for r in stats_rows])
        lines.append("")

    if baseline and baseline.get("sparsity"):
        lines += ["## Slot sparsity (FP32 baseline)", ""]
        lines += _md_table(["slot", "zero fraction"], [[s, f"{v:.4f}"] for s, v in baseline["sparsity"].items()])
        lines.append("")

    if sizes:
        lines += ["## Tensor bytes vs seed count", ""]
        lines += _md_table(
            ["ik_seeds", "to_seeds", "stage", "slot", "FP32 bytes", "format", "bytes"],
            [
                [r["ik_seeds"], r["to_seeds"], r["stage"], r["slot"], f"{r['fp32_bytes']:g}", r["format"], f"{r['bytes']:g}"]
                for r in sizes
            ],
        )
        lines.append("")
    return "\n".join(lines)


def attempt_rows(baseline: dict | None, best: dict | None) -> list[dict]:
    rows = []
    for label, data in (("FP32", baseline), ("best", best)):
        if not data or "attempt_stats" not in data:
            continue
        for env, stats in data["attempt_stats"].items():
            rows.append({"config": label, "environment": env, "attempts": format_attempt_stats(stats)})
    return rows
