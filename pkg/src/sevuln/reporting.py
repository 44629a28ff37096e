"""Report writers, run manifests and the on-disk sensitivity cache."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def file_hash(path):
    return sha256_bytes(Path(path).read_bytes())


def fmt(x):
    """Shortest round-trip float text; keeps CSV bodies byte-stable."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if x == 0:
        return "0"
    return repr(x)


@dataclass
class RunManifest:
    command: str
    case_path: str
    case_hash: str
    meas_path: str
    meas_hash: str
    parameters: dict
    tool_version: str = __version__
    started: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    finished: str = ""

    def content_hash(self):
        """Hash over everything except timestamps."""
        body = {k: v for k, v in asdict(self).items() if k not in ("started", "finished")}
        return sha256_bytes(json.dumps(body, sort_keys=True, default=str).encode())

    def to_dict(self):
        d = asdict(self)
        d["content_hash"] = self.content_hash()
        return d


def csv_text(header, rows, manifest=None):
    buf = io.StringIO()
    if manifest is not None:
        buf.write(f"# manifest {manifest.content_hash()}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) if isinstance(v, (float, np.floating, int, np.integer)) and not isinstance(v, bool) else v for v in row])
    return buf.getvalue()


def csv_body(text):
    """CSV text without comment lines."""
    return "".join(line for line in text.splitlines(keepends=True) if not line.startswith("#"))


SCORE_HEADER = [
    "measurement_id", "kind", "location", "raw_dJdz", "raw_stat", "raw_colnorm",
    "s_score", "l_score", "v_score", "rank",
]


def _loc_text(loc, net):
    if isinstance(loc, tuple):
        return "-".join(str(net.label(i)) for i in loc)
    return str(net.label(loc))


def score_rows(table, net):
    ranks = table.ranks()
    for k in range(len(table)):
        yield [
            table.ids[k], table.kinds[k], _loc_text(table.locations[k], net),
            table.raw_dJdz[k], table.raw_stat[k], table.raw_colnorm[k],
            table.s_score[k], table.l_score[k], table.v_score[k], int(ranks[k]),
        ]


def score_csv(table, net, manifest=None):
    return csv_text(SCORE_HEADER, score_rows(table, net), manifest)


def score_json(table, net, manifest=None):
    rows = [dict(zip(SCORE_HEADER, r)) for r in score_rows(table, net)]
    for r in rows:
        for key in ("raw_dJdz", "raw_stat", "raw_colnorm", "s_score", "l_score", "v_score"):
            r[key] = float(r[key])
    out = {"mode": table.mode, "scores": rows}
    if manifest is not None:
        out["manifest"] = manifest.to_dict()
    return json.dumps(out, indent=2)


def matrix_csv(matrix, row_names, col_names, manifest=None):
    rows = ([name] + list(map(float, row)) for name, row in zip(row_names, np.atleast_2d(matrix)))
    return csv_text(["name"] + list(col_names), rows, manifest)


def svd_csv(report, manifest=None):
    sx, sj = report.singular_values_x, report.singular_values_j
    cx, cj = report.cumulative_energy_x, report.cumulative_energy_j
    rows = []
    for r in range(max(len(sx), len(sj))):
        rows.append([
            r + 1,
            sx[r] if r < len(sx) else "",
            cx[r] if r < len(cx) else "",
            sj[r] if r < len(sj) else "",
            cj[r] if r < len(cj) else "",
        ])
    return csv_text(["r", "sigma_x", "ce_x", "sigma_j", "ce_j"], rows, manifest)


def top_table(table, k=10, threshold=None):
    order = table.ranking()[:k]
    width = max([len(i) for i in table.ids] + [11])
    lines = [f"{'rank':>4}  {'measurement':<{width}}  {'S-score':>8}  {'L-score':>8}  {'V-score':>8}"]
    for pos, idx in enumerate(order, start=1):
        flag = " *" if threshold is not None and table.v_score[idx] >= threshold else ""
        lines.append(
            f"{pos:>4}  {table.ids[idx]:<{width}}  {table.s_score[idx]:8.4f}  "
            f"{table.l_score[idx]:8.4f}  {table.v_score[idx]:8.4f}{flag}"
        )
    return "\n".join(lines)


class SensitivityCache:
    """npz files keyed by (case hash, config hash, scale factor, seed, noise, tolerance)."""

    def __init__(self, root):
        self.root = Path(root)

    def key(self, case_hash, config_hash, factor, seed, noise, tol):
        text = json.dumps([case_hash, config_hash, fmt(factor), int(seed), fmt(noise), fmt(tol)])
        return sha256_bytes(text.encode())[:32]

    def load(self, key):
        path = self.root / f"{key}.npz"
        if not path.exists():
            return None
        with np.load(path) as data:
            return {k: data[k] for k in data.files}

    def store(self, key, **arrays):
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.root / f"{key}.tmp.npz"
        np.savez(tmp, **arrays)
        tmp.replace(self.root / f"{key}.npz")
