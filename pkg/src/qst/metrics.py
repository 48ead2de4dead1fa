"""Append-only JSON-lines metrics, one file per run."""

from __future__ import annotations

import json


class MetricsWriter:
    def __init__(self, path):
        self.path = path

    def log(self, **row) -> None:
        with open(self.path, "a", encoding="ascii") as fh:
            fh.write(json.dumps(row) + "\n")


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
