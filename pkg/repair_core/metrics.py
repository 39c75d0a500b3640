from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile

# Own registry so repeated imports in tests never clash with the default one
REGISTRY = CollectorRegistry()

EPOCH_COUNT = Counter(
    "sagerepair_epochs_total",
    "Training epochs completed",
    registry=REGISTRY,
)
STEP_COUNT = Counter(
    "sagerepair_optimizer_steps_total",
    "Optimizer steps taken",
    registry=REGISTRY,
)
STEP_LATENCY = Histogram(
    "sagerepair_step_latency_seconds",
    "Forward + backward + update time of one mini-batch",
    buckets=(0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1, 2, 5),
    registry=REGISTRY,
)
VAL_LOSS = Gauge(
    "sagerepair_validation_loss",
    "Validation loss of the last completed epoch",
    registry=REGISTRY,
)
REPAIRED_CELLS = Counter(
    "sagerepair_repaired_cells_total",
    "Missing cells filled by repair_log",
    ["attribute"],
    registry=REGISTRY,
)
ERROR_COUNT = Counter(
    "sagerepair_errors_total",
    "Errors surfaced to the command line",
    ["code"],
    registry=REGISTRY,
)


def write_metrics(path) -> None:
    """Dump the registry in text exposition format (node exporter textfile style)."""
    try:
        write_to_textfile(str(path), REGISTRY)
    except Exception as e:
        # Metrics must never break a run
        import logging
        logging.getLogger(__name__).warning("failed to write metrics to %s: %s", path, e)
