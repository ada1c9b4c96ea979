"""Activation memory and step time across depths and block kinds."""
import csv
import logging

import attr
import numpy as np

from .blocks import ModelConfig
from .engine import engine_for
from .model import init_model
from .numerics import cross_entropy
from .step import steps
from .verify import random_batch

log = logging.getLogger("bench")

BENCH_COLUMNS = ('depth', 'block_kind', 'engine', 'tensors_stored', 'scalars_stored',
                 'peak_bytes', 'step_seconds', 'max_batch', 'recompute_overhead')


class StepTimer:
    """Collects durations of finished forward and backward steps from step events."""

    def __init__(self):
        self.durations = {}

    def __enter__(self):
        steps.subscribe(self.notify)
        return self

    def __exit__(self, *exc):
        steps.unsubscribe(self.notify)

    def notify(self, event):
        if event.state != 'stop' or event.data.get('exception') is not None:
            return
        title = event.step.title
        if title.startswith(('forward_', 'backward_')):
            self.durations[title] = self.durations.get(title, 0.0) + event.data.get('duration', 0.0)

    def total(self):
        return sum(self.durations.values())


@attr.s(frozen=True)
class BenchRow:
    depth = attr.ib()
    block_kind = attr.ib()
    engine = attr.ib()
    tensors_stored = attr.ib()
    scalars_stored = attr.ib()
    peak_bytes = attr.ib()
    step_seconds = attr.ib()
    max_batch = attr.ib()
    recompute_overhead = attr.ib(default=None)

    def as_dict(self):
        return attr.asdict(self)


def measure(model, tokens, targets, engine, repeats=1):
    """Runs forward and backward; returns (ledger, seconds per step)."""
    forward, backward = engine_for(model, engine)
    with StepTimer() as timer:
        for _ in range(repeats):
            result = forward(tokens, model)
            _, dlogits = cross_entropy(result.logits, targets)
            backward(result, dlogits, model)
    return result.ledger, timer.total() / repeats


def run_bench(depths, block_kinds, width=64, heads=4, seq_len=64, budget_bytes=2**30,
              dtype='float32', seed=0, repeats=1):
    """One row per (depth, kind) plus a stored-engine row for every reversible kind.

    ``max_batch`` is the number of single-sequence peaks fitting into
    ``budget_bytes``; ``recompute_overhead`` is reversible over stored step time.
    """
    rows = []
    for depth in depths:
        for kind in block_kinds:
            config = ModelConfig(context_length=seq_len, width=width, heads=heads, layers=depth,
                                 block_kind=kind, dtype=dtype)
            model = init_model(config, seed)
            tokens, targets = random_batch(model, seq_len, 1, seed)
            engines = ['reversible', 'stored'] if config.reversible else ['stored']
            measured = {e: measure(model, tokens, targets, e, repeats) for e in engines}
            for engine in engines:
                ledger, seconds = measured[engine]
                overhead = None
                if engine == 'reversible':
                    overhead = seconds / max(measured['stored'][1], np.finfo(float).tiny)
                rows.append(BenchRow(
                    depth=depth, block_kind=kind, engine=engine,
                    tensors_stored=ledger.tensors_stored,
                    scalars_stored=ledger.scalars_stored,
                    peak_bytes=ledger.peak_bytes,
                    step_seconds=seconds,
                    max_batch=budget_bytes // max(ledger.peak_bytes, 1),
                    recompute_overhead=overhead,
                ))
                log.info("depth %d %s/%s: %d tensors, peak %d bytes, %.4fs", depth, kind, engine,
                         ledger.tensors_stored, ledger.peak_bytes, seconds)
    return rows


def format_table(rows):
    header = ('depth', 'kind', 'engine', 'tensors', 'scalars', 'peak_bytes', 'step_s',
              'max_batch', 'overhead')
    lines = ["{:>5} {:<12} {:<10} {:>7} {:>7} {:>12} {:>8} {:>9} {:>8}".format(*header)]
    for r in rows:
        overhead = f"{r.recompute_overhead:.2f}" if r.recompute_overhead is not None else "-"
        lines.append(f"{r.depth:>5} {r.block_kind:<12} {r.engine:<10} {r.tensors_stored:>7} "
                     f"{r.scalars_stored:>7} {r.peak_bytes:>12} {r.step_seconds:>8.4f} "
                     f"{r.max_batch:>9} {overhead:>8}")
    return "\n".join(lines)


def write_bench_csv(path, rows):
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.as_dict())
