#just using this to write a small sample log to play with
import sys
from pathlib import Path

from repair_core.config import DEFAULT_SEED
from repair_core.eventlog import write_csv_log
from repair_core.io_utils import atomic_output
from repair_core.synthetic import generate_synthetic_log, load_process_spec

ROOT = Path(__file__).resolve().parent


def seed(out="data/sample_log.csv", spec="specs/deterministic.json", n_traces=50):
    log = generate_synthetic_log(load_process_spec(ROOT / spec), n_traces, DEFAULT_SEED)
    with atomic_output(ROOT / out, "w", newline="", encoding="utf-8") as fh:
        write_csv_log(log, fh)
    print(f"[SageRepair] Seeded {len(log)} traces ({log.n_events} events) -> {out}")
    return log


if __name__ == "__main__":
    seed(*sys.argv[1:2])
