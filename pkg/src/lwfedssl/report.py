"""Cross-run comparison tables and per-round cost curves."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

from .experiment import LEDGER, RUN_LOG, SUMMARY
from .resource import ResourceLedger

MB = 2**20
REQUIRED = (SUMMARY, LEDGER)


class ReportError(RuntimeError):
    pass


@dataclass
class RunView:
    name: str
    summary: dict
    ledger: ResourceLedger
    losses: dict[int, float]

    @property
    def strategy(self) -> str:
        return self.summary.get("config", {}).get("strategy", "?")

    @property
    def client(self) -> dict:
        return self.ledger.totals("client:0")

    @property
    def accuracy(self) -> float | None:
        return self.summary.get("probe_accuracy")


def load_run(path) -> RunView:
    path = Path(path)
    missing = [f for f in REQUIRED if not (path / f).is_file()]
    if missing:
        raise ReportError(f"{path}: incomplete run directory, missing {', '.join(missing)}")
    summary = json.loads((path / SUMMARY).read_text())
    ledger = ResourceLedger.from_csv((path / LEDGER).read_text())
    losses = {}
    if (path / RUN_LOG).is_file():
        for line in (path / RUN_LOG).read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                losses[rec["round"]] = rec["mean_local_loss"]
    return RunView(path.name or str(path), summary, ledger, losses)


def _ratio(a: int, b: int) -> str:
    return f"{a / b:.2f}" if b else "inf"


COLUMNS = [
    "run",
    "strategy",
    "mem_model_MB",
    "GFLOPs",
    "enc_up_MB",
    "enc_down_MB",
    "comm_MB",
    "probe_acc",
    "enc_up_ratio",
    "enc_down_ratio",
]


def comparison_rows(runs: list[RunView]) -> list[dict[str, str]]:
    """One row per run with single-client totals; ratios are first run / this run."""
    rows = []
    ref = runs[0].client if runs else None
    for i, run in enumerate(runs):
        t = run.client
        acc = run.accuracy
        rows.append(
            {
                "run": run.name,
                "strategy": run.strategy,
                "mem_model_MB": f"{t['mem_model_peak'] / MB:.3f}",
                "GFLOPs": f"{(t['flops_fwd'] + t['flops_bwd']) / 1e9:.4f}",
                "enc_up_MB": f"{t['enc_bytes_up'] / MB:.3f}",
                "enc_down_MB": f"{t['enc_bytes_down'] / MB:.3f}",
                "comm_MB": f"{(t['bytes_up'] + t['bytes_down']) / MB:.3f}",
                "probe_acc": "-" if acc is None else f"{acc:.4f}",
                "enc_up_ratio": "" if i == 0 else _ratio(ref["enc_bytes_up"], t["enc_bytes_up"]),
                "enc_down_ratio": "" if i == 0 else _ratio(ref["enc_bytes_down"], t["enc_bytes_down"]),
            }
        )
    return rows


def format_table(rows: list[dict[str, str]]) -> str:
    widths = {c: max([len(c)] + [len(r[c]) for r in rows]) for c in COLUMNS}
    lines = ["  ".join(c.ljust(widths[c]) for c in COLUMNS)]
    lines.append("  ".join("-" * widths[c] for c in COLUMNS))
    lines += ["  ".join(r[c].ljust(widths[c]) for c in COLUMNS) for r in rows]
    return "\n".join(lines)


CURVE_COLUMNS = ["run", "round", "stage", "flops_fwd", "flops_bwd", "bytes_down", "bytes_up", "mem_model", "mean_local_loss"]


def curves_csv(runs: list[RunView]) -> str:
    """Per-round single-client costs (client 0) for plotting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for run in runs:
        for e in run.ledger.for_actor("client:0"):
            loss = run.losses.get(e.round)
            w.writerow(
                [run.name, e.round, e.stage, e.flops_fwd, e.flops_bwd, e.bytes_down, e.bytes_up, e.mem_model,
                 "" if loss is None else repr(loss)]
            )
    return buf.getvalue()


def rows_csv(rows: list[dict[str, str]]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
