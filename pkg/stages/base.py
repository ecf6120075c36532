from abc import ABC, abstractmethod
from collections import Counter


class Stage(ABC):
    """Base class for all streaming stages of the detection pipeline."""

    def __init__(self):
        self.counters = Counter()

    @property
    def name(self):
        """Return the name of the stage (class name by default)."""
        return self.__class__.__name__

    @abstractmethod
    def process(self, item):
        """Consume one item from the previous stage.

        Args:
            item: The value produced upstream.

        Returns:
            A list of items for the next stage (possibly empty).
        """

    @abstractmethod
    def flush(self):
        """Emit everything still buffered. Called once at end of input.

        Returns:
            A list of items for the next stage.
        """
