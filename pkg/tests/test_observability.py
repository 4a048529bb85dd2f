"""Tests for the metrics log, the prometheus textfile and structured log formatting."""
import json
import logging

from app.metrics import MetricsLog, get_metrics_collector
from app.models import LossReport
from app.structured_logging import JSONFormatter, KeyValueFormatter, StructuredLogger, start_run


def test_metrics_log_append(tmp_path):
    path = tmp_path / "metrics.log"
    with MetricsLog(path) as log:
        log.write(1, LossReport(total=1.0))
    with MetricsLog(path, append=True) as log:
        log.write(2, LossReport(total=0.5))
    assert [(step, r.total) for step, r in MetricsLog.read(path)] == [(1, 1.0), (2, 0.5)]


def test_metrics_log_truncates_without_append(tmp_path):
    path = tmp_path / "metrics.log"
    path.write_text("1 total=9.0\n")
    with MetricsLog(path) as log:
        log.write(1, LossReport(total=2.0))
    assert MetricsLog.read(path)[0][1].total == 2.0


def test_metrics_log_rewind(tmp_path):
    path = tmp_path / "metrics.log"
    with MetricsLog(path) as log:
        for step in range(1, 6):
            log.write(step, LossReport(total=float(step)))
    assert MetricsLog.truncate(path, 3) == 3
    assert [step for step, _ in MetricsLog.read(path)] == [1, 2, 3]
    assert MetricsLog.truncate(tmp_path / "absent.log", 3) == 0


def test_textfile_export(tmp_path):
    collector = get_metrics_collector()
    collector.record_iteration(LossReport(total=0.25), 0.01)
    collector.record_skipped_clip("x")
    path = tmp_path / "metrics" / "timbre.prom"
    collector.write_textfile(path)
    text = path.read_text()
    assert "timbre_train_iterations_total" in text
    assert 'timbre_clips_skipped_total{domain="x"}' in text


def _record(logger_name: str = "timbre") -> logging.LogRecord:
    records = []

    class Collect(logging.Handler):
        def emit(self, record):
            records.append(record)

    logger = StructuredLogger(logger_name)
    handler = Collect()
    logger.logger.addHandler(handler)
    logger.logger.setLevel(logging.INFO)
    try:
        logger.info("Checkpoint written", iteration=3)
    finally:
        logger.logger.removeHandler(handler)
    return records[0]


def test_json_formatter_carries_run_context():
    run_id = start_run("train")
    payload = json.loads(JSONFormatter().format(_record()))
    assert payload["message"] == "Checkpoint written"
    assert payload["iteration"] == 3
    assert payload["run_id"] == run_id
    assert payload["command"] == "train"


def test_key_value_formatter():
    start_run("extract")
    line = KeyValueFormatter().format(_record())
    assert "Checkpoint written" in line
    assert "iteration=3" in line
    assert "command=extract" in line
