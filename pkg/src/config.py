from __future__ import annotations

from enum import Enum


class StrategyKind(str, Enum):
    SYNC_SGD = "sync_sgd"
    DILOCO = "diloco"
    DILOCO_DYNUPD = "diloco_dynupd"
    ASYNC_LOCAL_SGD = "async_local_sgd"
    HALOS = "halos"


class InnerKind(str, Enum):
    PLAIN_SGD = "sgd"
    ADAMW = "adamw"


class ShardMode(str, Enum):
    IID = "iid"
    NON_IID = "non_iid"


class ExitCode(int, Enum):
    OK = 0
    DIVERGED = 2
    CONFIG_ERROR = 3
    IO_ERROR = 4


# ---------------------------------------------------------------------------
# Default geo-distributed cluster: 4 regions x 4 workers
# ---------------------------------------------------------------------------

DEFAULT_REGIONS = ("R-1", "R-2", "R-3", "R-4")

# Gbps; the diagonal is the intra-region bandwidth
DEFAULT_BANDWIDTH_GBPS = (
    (100.0, 0.537, 0.935, 0.202),
    (0.537, 100.0, 0.386, 0.117),
    (0.935, 0.386, 100.0, 0.127),
    (0.202, 0.117, 0.127, 100.0),
)

DEFAULT_WORKER_SPEEDS = (
    (10.0, 9.1, 3.8, 2.6),
    (9.4, 8.0, 6.3, 5.8),
    (9.9, 5.7, 2.1, 1.5),
    (9.1, 8.7, 5.8, 1.2),
)

# 2, 4, 4 and 6 workers per region, same four regions and links
HETEROGENEOUS_WORKER_SPEEDS = (
    (10.0, 2.6),
    (9.4, 8.0, 6.3, 5.8),
    (9.9, 5.7, 2.1, 1.5),
    (9.1, 8.7, 5.8, 1.2, 3.8, 7.4),
)
# workers per LPS once the heterogeneous cluster is regrouped
HETEROGENEOUS_GROUP_SIZE = 2

# seconds per local step on the fastest worker, keyed by model
PROFILED_STEP_S = {
    "pythia-70m": 0.2384,
    "pythia-160m": 0.6230,
    "pythia-410m": 1.5897,
}

MODEL_PARAMS = {
    "pythia-70m": 70_000_000,
    "pythia-160m": 160_000_000,
    "pythia-410m": 410_000_000,
}

# float16 on the wire
BYTES_PER_PARAM = 2

# ---------------------------------------------------------------------------
# Optimizer defaults
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.95
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.1
CLIP_NORM = 1.0
LR_FLOOR_FRACTION = 0.1
WARMUP_FRACTION = 0.05

# ---------------------------------------------------------------------------
# Loss sampling cadence during replay
# ---------------------------------------------------------------------------

SAMPLE_EVERY_S = 10.0
SAMPLE_EVERY_UPDATES = 50
# a sampled loss above this multiple of max(initial loss, 1) counts as divergence
LOSS_BLOWUP_FACTOR = 1.0e3

OUTPUT_DIR_ENV = "HALOS_OUTPUT_DIR"
APP_TITLE = "halos-sim"
