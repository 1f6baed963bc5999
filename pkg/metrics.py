"""
g2kit pipeline metrics
Counters for the batch pipeline, exported in the Prometheus textfile format.
"""

import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Union

from prometheus_client import CollectorRegistry, Counter, Histogram, write_to_textfile

logger = logging.getLogger('g2kit.metrics')

REGISTRY = CollectorRegistry()

EVENTS_READ = Counter(
    'g2kit_events_read_total', 'Time-tag events read from disk', registry=REGISTRY
)
PAIRS_BINNED = Counter(
    'g2kit_pairs_binned_total', 'Detector pairs accumulated into chronograms', registry=REGISTRY
)
RUNS_SIMULATED = Counter(
    'g2kit_runs_simulated_total', 'Simulated acquisition runs', registry=REGISTRY
)
FITS = Counter(
    'g2kit_fits_total', 'Lifetime fits by outcome', ['status'], registry=REGISTRY
)
STAGE_SECONDS = Histogram(
    'g2kit_stage_seconds', 'Wall time per pipeline stage', ['stage'],
    buckets=(0.01, 0.1, 0.5, 1.0, 5.0, 20.0, 60.0, 300.0),
    registry=REGISTRY,
)


@contextmanager
def timed(stage: str) -> Iterator[None]:
    """Observe the wall time of a block under the given stage label"""
    start = time.perf_counter()
    try:
        yield
    finally:
        elapsed = time.perf_counter() - start
        STAGE_SECONDS.labels(stage=stage).observe(elapsed)
        logger.debug(f"{stage} took {elapsed:.3f}s")


def write_metrics(path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_to_textfile(str(path), REGISTRY)
    logger.info(f"Metrics written to {path}")
