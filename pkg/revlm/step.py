"""Lightweight tracing of engine phases.

Functions decorated with :func:`step` emit a start and a stop
:class:`StepEvent` to every subscriber of :data:`steps`; the benchmark and
the step reporter are the consumers.
"""
import inspect
import warnings
from functools import wraps
from time import monotonic


class Steps:
    def __init__(self):
        self._stack = []
        self._subscribers = []

    def get_current(self):
        return self._stack[-1] if self._stack else None

    def push(self, step):
        assert step not in self._stack
        step.parent = self.get_current()
        self._stack.append(step)
        step.level = len(self._stack)

    def pop(self, step):
        assert self._stack[-1] is step
        self._stack.pop()

    def subscribe(self, callback):
        self._subscribers.append(callback)

    def unsubscribe(self, callback):
        assert callback in self._subscribers
        self._subscribers.remove(callback)

    def notify(self, event):
        for subscriber in list(self._subscribers):
            try:
                subscriber(event)
            except Exception as e:  # pylint: disable=broad-except
                warnings.warn(f"unhandled exception during event notification: {e}")


steps = Steps()


class StepEvent:
    def __init__(self, step, data):
        self.ts = monotonic()
        self.step = step
        self.data = data

    def __str__(self):
        data = self.data.copy()
        duration = data.pop('duration', 0.0)
        pairs = [f"{k}={v!r}" for k, v in data.items() if v is not None]
        if duration >= 0.001:
            pairs.append(f"duration={duration:.3f}")
        return f"{self.step} {', '.join(pairs)}"

    def __setitem__(self, k, v):
        self.data[k] = v

    @property
    def state(self):
        return self.data.get('state')


class Step:
    def __init__(self, title, tag=None):
        self.title = title
        self.tag = tag
        self.level = 0
        self.parent = None
        self.args = None
        self.result = None
        self.exception = None
        self._start_ts = None
        self._stop_ts = None

    def __repr__(self):
        parts = [f"Step(title={self.title!r}, level={self.level}, status={self.status}"]
        if self.args is not None:
            parts.append(f", args={self.args}")
        if self.exception is not None:
            parts.append(f", exception={self.exception!r}")
        parts.append(")")
        return "".join(parts)

    def __str__(self):
        return self.title

    @property
    def duration(self):
        if self._start_ts is None:
            return 0.0
        if self._stop_ts is None:
            return monotonic() - self._start_ts
        return self._stop_ts - self._start_ts

    @property
    def status(self):
        if self._start_ts is None:
            return 'new'
        if self._stop_ts is None:
            return 'active'
        return 'done'

    def start(self):
        assert self._start_ts is None
        self._start_ts = monotonic()
        steps.push(self)
        steps.notify(StepEvent(self, {'state': 'start', 'args': self.args}))

    def stop(self):
        assert self._start_ts is not None and self._stop_ts is None
        self._stop_ts = monotonic()
        event = StepEvent(self, {'state': 'stop'})
        if self.exception is not None:
            event['exception'] = self.exception
        else:
            event['result'] = self.result
        event['duration'] = self.duration
        steps.notify(event)
        steps.pop(self)


def step(*, title=None, args=(), result=False, tag=None):
    """Traces every call of the decorated function as a :class:`Step`.

    ``args`` names arguments recorded in the start event; plain values only,
    tensors should not be listed. ``result`` records the return value.
    """
    def decorator(func):
        nonlocal title
        title = title or func.__name__
        signature = inspect.signature(func)

        @wraps(func)
        def wrapper(*_args, **_kwargs):
            current = Step(title, tag)
            if args:
                bound = signature.bind_partial(*_args, **_kwargs)
                bound.apply_defaults()
                current.args = {k: bound.arguments[k] for k in args}
            current.start()
            try:
                _result = func(*_args, **_kwargs)
                if result:
                    current.result = _result
            except Exception as e:
                current.exception = e
                raise
            finally:
                current.stop()
            return _result

        return wrapper

    return decorator
