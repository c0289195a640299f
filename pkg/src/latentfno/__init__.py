from .signal import Stimulus, TimeGrid, Trace

__all__ = ["Stimulus", "TimeGrid", "Trace"]

__version__ = "0.1.0"
