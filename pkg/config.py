import os
from dotenv import load_dotenv
import numpy as np

# Load .env file for local development; existing variables win
load_dotenv()

# Sub-seed slots fanned out from the single --seed value.
SEED_STREAMS = {
    "split": 0,
    "init": 1,
    "shuffle": 2,
    "synth": 3,
}

def get_setting(name, default=None):
    """
    Get a setting from the environment (.env values are loaded at import)
    """
    if name in os.environ and os.environ[name] != "":
        return os.environ[name]

    return default

def get_int_setting(name, default=None):
    """
    Integer variant of get_setting
    """
    value = get_setting(name)
    if value is None:
        return default
    try:
        return int(value)
    except ValueError:
        raise ValueError(f"{name} must be an integer, got {value!r}")

def num_threads():
    """
    Worker count for per-sample layer work
    """
    configured = get_int_setting("DCNN_NUM_THREADS")
    if configured is not None:
        return max(1, configured)
    return min(4, os.cpu_count() or 1)

def get_log_level():
    return get_setting("DCNN_LOG_LEVEL", "INFO").upper()

def derive_seed(seed, name):
    """
    Derive the named sub-seed used by one component.

    SeedSequence(seed, spawn_key=(SEED_STREAMS[name],)) generates two u32
    words; the first is the low half of the result, the second the high half.
    """
    if name not in SEED_STREAMS:
        raise KeyError(f"unknown seed stream {name!r}")
    sequence = np.random.SeedSequence(int(seed), spawn_key=(SEED_STREAMS[name],))
    low, high = sequence.generate_state(2, dtype=np.uint32)
    return int(low) | (int(high) << 32)
