"""
Timbre Engine Metrics Module.
Prometheus-compatible instrumentation and the plain-text training metrics log.
"""
from pathlib import Path
from typing import Iterator, List, Optional, TextIO, Tuple

from prometheus_client import (
    REGISTRY,
    Counter,
    Gauge,
    Histogram,
    write_to_textfile,
)

from app.models import LossReport

# ==================== Training Metrics ====================

TRAIN_ITERATIONS = Counter(
    "timbre_train_iterations_total",
    "Total number of training iterations completed",
)

LOSS_VALUE = Gauge(
    "timbre_loss_value",
    "Latest value of each loss term",
    ["term"],
)

STEP_LATENCY = Histogram(
    "timbre_train_step_seconds",
    "Wall time of one training iteration",
    buckets=(0.05, 0.1, 0.25, 0.5, 1.0, 2.5, 5.0, 10.0, 30.0),
)

CHECKPOINTS_WRITTEN = Counter(
    "timbre_checkpoints_written_total",
    "Total number of checkpoints written",
)

# ==================== Corpus Metrics ====================

CLIPS_EXTRACTED = Counter(
    "timbre_clips_extracted_total",
    "Total number of clips turned into feature stacks",
    ["domain"],
)

CLIPS_SKIPPED = Counter(
    "timbre_clips_skipped_total",
    "Total number of clips skipped as too short",
    ["domain"],
)

EXTRACTION_LATENCY = Histogram(
    "timbre_extraction_seconds",
    "Feature extraction time per clip",
    buckets=(0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 2.5, 5.0),
)

# ==================== Reconstruction Metrics ====================

NNLS_ITERATIONS = Histogram(
    "timbre_nnls_iterations",
    "Projected-gradient iterations per NNLS solve",
    buckets=(1, 5, 10, 25, 50, 100, 200, 500, 1000),
)

NNLS_RESIDUAL = Gauge(
    "timbre_nnls_relative_residual",
    "Relative residual of the latest NNLS solve",
)

TRANSFERS_RENDERED = Counter(
    "timbre_transfers_rendered_total",
    "Total number of transferred clips written",
    ["direction"],
)


class MetricsCollector:
    """
    Centralized metrics collection and reporting.
    """

    def record_iteration(self, report: LossReport, latency_seconds: float) -> None:
        """Record metrics for one training iteration."""
        TRAIN_ITERATIONS.inc()
        STEP_LATENCY.observe(latency_seconds)
        for key in LossReport.LOG_KEYS:
            LOSS_VALUE.labels(term=key).set(getattr(report, key))

    def record_checkpoint(self) -> None:
        CHECKPOINTS_WRITTEN.inc()

    def record_extraction(self, domain: str, seconds: float) -> None:
        CLIPS_EXTRACTED.labels(domain=domain).inc()
        EXTRACTION_LATENCY.observe(seconds)

    def record_skipped_clip(self, domain: str) -> None:
        CLIPS_SKIPPED.labels(domain=domain).inc()

    def record_nnls(self, iterations: int, relative_residual: float) -> None:
        NNLS_ITERATIONS.observe(iterations)
        NNLS_RESIDUAL.set(relative_residual)

    def record_transfer(self, direction: str) -> None:
        TRANSFERS_RENDERED.labels(direction=direction).inc()

    def write_textfile(self, path: Path) -> None:
        """Dump the registry in Prometheus text exposition format."""
        path.parent.mkdir(parents=True, exist_ok=True)
        write_to_textfile(str(path), REGISTRY)


# Global metrics collector
metrics_collector = MetricsCollector()


def get_metrics_collector() -> MetricsCollector:
    """Get the global metrics collector."""
    return metrics_collector


class MetricsLog:
    """Append-only "iter key=value ..." log, one record per line."""

    def __init__(self, path: Path, append: bool = False):
        self.path = path
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle: Optional[TextIO] = open(path, "a" if append else "w", encoding="utf-8")

    def write(self, step: int, report: LossReport) -> None:
        if self._handle is None:
            raise ValueError("metrics log is closed")
        self._handle.write(report.log_line(step) + "\n")
        self._handle.flush()

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self) -> "MetricsLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @staticmethod
    def truncate(path: Path, last_step: int) -> int:
        """Drop records after `last_step`; returns the number of records kept."""
        if not path.exists():
            return 0
        kept = []
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                if line.strip() and LossReport.parse_line(line.strip())[0] <= last_step:
                    kept.append(line if line.endswith("\n") else line + "\n")
        path.write_text("".join(kept), encoding="utf-8")
        return len(kept)

    @staticmethod
    def read(path: Path) -> List[Tuple[int, LossReport]]:
        return list(_iter_records(path))


def _iter_records(path: Path) -> Iterator[Tuple[int, LossReport]]:
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                yield LossReport.parse_line(line)
