# utils/helpers.py - Helper functions
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor

from config import LSK_THREADS
from utils.errors import ContractViolation, FormatError

# Get logger
logger = logging.getLogger()

_thread_override = None


def set_thread_count(count):
    """Override LSK_THREADS for the current process (None restores the env value)."""
    global _thread_override
    if count is not None and count < 0:
        raise ContractViolation(f"thread count must be >= 0, got {count}")
    _thread_override = count


def resolve_threads():
    requested = LSK_THREADS if _thread_override is None else _thread_override
    if requested <= 0:
        return max(1, min(32, os.cpu_count() or 1))
    return requested


def run_parallel(fn, items):
    """Apply fn to every item, preserving input order in the returned list.

    Each item is processed by exactly one worker, so results do not depend on
    the number of threads.
    """
    items = list(items)
    workers = min(resolve_threads(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, items))


def split_slabs(count, parts):
    """Split range(count) into at most `parts` contiguous (start, stop) slabs."""
    parts = max(1, min(parts, count))
    base, extra = divmod(count, parts)
    slabs = []
    start = 0
    for index in range(parts):
        stop = start + base + (1 if index < extra else 0)
        slabs.append((start, stop))
        start = stop
    return slabs


def parse_dims(text):
    """Parse '1x3x64x64' into a tuple of ints."""
    try:
        dims = tuple(int(part) for part in text.lower().split("x"))
    except ValueError:
        raise FormatError(f"invalid dimension string {text!r}, expected e.g. 1x3x64x64")
    if any(d < 0 for d in dims):
        raise ContractViolation(f"dimensions must be non-negative, got {text!r}")
    return dims


def parse_plan(text):
    """Parse '5,1:7,3' (or '5,1->7,3') into ((5, 1), (7, 3))."""
    cleaned = text.replace("->", ":").replace(" ", "")
    specs = []
    for chunk in cleaned.split(":"):
        if not chunk:
            continue
        try:
            k, d = (int(value) for value in chunk.split(","))
        except ValueError:
            raise FormatError(f"invalid plan segment {chunk!r} in {text!r}, expected k,d")
        specs.append((k, d))
    if not specs:
        raise FormatError(f"empty plan {text!r}")
    return tuple(specs)


def require_file_stem(name, what):
    """`name` becomes part of a file name; it must not address another directory."""
    text = str(name)
    if not text or text in (".", "..") or "/" in text or "\\" in text or "\0" in text:
        raise FormatError(f"{what} {name!r} cannot be used in a file name")
    return text


def format_plan(specs):
    return " -> ".join(f"({k},{d})" for k, d in specs)


def echo_config(args):
    """Resolved arguments of a command, in a JSON-friendly form."""
    echoed = {}
    for key, value in sorted(vars(args).items()):
        if key == "handler":
            continue
        echoed[key] = list(value) if isinstance(value, tuple) else value
    return echoed


def emit_result(args, payload, lines):
    """Print `payload` as JSON with --json, otherwise the human table `lines`.

    Both forms carry the resolved config.
    """
    payload = dict(payload)
    payload["config"] = echo_config(args)
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, sort_keys=True))
        return payload
    for line in lines:
        print(line)
    print(f"config: {json.dumps(payload['config'], sort_keys=True)}")
    return payload
