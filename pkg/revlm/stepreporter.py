import sys

import colors

from .step import steps


class StepReporter:
    """Prints every finished untagged step with its duration."""
    instance = None

    @classmethod
    def start(cls, stream=None):
        """starts the StepReporter"""
        assert cls.instance is None
        cls.instance = cls(stream or sys.stderr)

    @classmethod
    def stop(cls):
        """stops the StepReporter"""
        assert cls.instance is not None
        steps.unsubscribe(cls.instance.notify)
        cls.instance = None

    def __init__(self, stream):
        self.stream = stream
        steps.subscribe(self.notify)

    @staticmethod
    def format(event):
        indent = '  ' * (event.step.level - 1)
        data = event.data.copy()
        duration = data.pop('duration', 0.0)
        data.pop('state', None)
        pairs = [f"{colors.color(k, style='underline')}={v!r}" for k, v in data.items()
                 if v is not None]
        if duration >= 0.001:
            pairs.append(f"{colors.color('duration', style='underline')}={duration:.3f}")
        return " ".join([indent + colors.color(event.step.title, style='bold')] + pairs)

    def notify(self, event):
        # ignore tagged events
        if event.step.tag or event.state != 'stop':
            return
        print(self.format(event), file=self.stream)
