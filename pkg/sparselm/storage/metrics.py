import csv
import logging
import os
from typing import List

from sparselm.models.metrics import METRICS_HEADER, MetricsRow

log = logging.getLogger("metrics")


class MetricsWriter:
    """Appends MetricsRow lines to a CSV, flushing after every row so aborted runs keep their history."""

    def __init__(self, path: str) -> None:
        self.path = path
        self.rows: List[MetricsRow] = []
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(self.path, "w", encoding="utf-8", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(METRICS_HEADER)

    def record(self, row: MetricsRow) -> None:
        with open(self.path, "a", encoding="utf-8", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(row.to_csv_fields())
        self.rows.append(row)


def read_metrics(path: str) -> List[dict]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))
