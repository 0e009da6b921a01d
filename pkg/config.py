# config.py - Central configuration
import logging
import os
from dotenv import load_dotenv

logger = logging.getLogger()

# Load environment variables
load_dotenv()


def _int_from_env(name, default):
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except (ValueError, TypeError):
        logger.warning(f"Invalid {name}={raw!r} in environment variables, using {default}")
        return default


# Runtime configuration
# 0 means auto (bounded by the CPU count)
LSK_THREADS = _int_from_env("LSK_THREADS", 0)
LOG_LEVEL = os.getenv("LSK_LOG_LEVEL", "INFO").upper()
LOG_DIR = os.getenv("LSK_LOG_DIR")

# LSK module defaults
DEFAULT_PLAN = ((5, 1), (7, 3))
DEFAULT_SELECTION_KERNEL = 7
DEFAULT_CHANNEL_REDUCTION = 4
DEFAULT_FFN_RATIO = 4
INIT_STD = 0.02

# Cost model
FLOP_INPUT_SIZE = 1024
COMPARISON_CHANNELS = 64

# Decomposition search caps
SEARCH_MAX_KERNEL = 31
SEARCH_MAX_BRANCHES = 4
SEARCH_MAX_RF = 64
SEARCH_KERNEL_CANDIDATES = (1, 3, 5, 7, 9, 11, 13, 15, 17, 19, 21, 23, 25, 27, 29, 31)

# Gradient checking
GRADCHECK_EPS = 1e-5
GRADCHECK_RTOL = 1e-6

# Backbone presets (channels / depths per stage)
BACKBONE_PRESETS = {
    "lsknet-t": {"channels": (32, 64, 160, 256), "depths": (3, 3, 5, 2)},
    "lsknet-s": {"channels": (64, 128, 320, 512), "depths": (2, 2, 4, 2)},
    "tiny": {"channels": (4, 4, 4, 4), "depths": (1, 1, 1, 1)},
}

# Reported parameter totals used for the banded reconciliation
REPORTED_PARAMS = {"lsknet-t": 4.3e6, "lsknet-s": 14.4e6}
PARAM_BAND = 0.20
