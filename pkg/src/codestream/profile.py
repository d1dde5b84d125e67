"""Count the work done by sampler streams.

Example usage:

    >>> prof = Profile()
    >>> chain = prof.stream('model_evals', denoise(model, sched, x, sched.T, noise), weight=len(x))
    >>> _ = chain.last()
    >>> prof.count('reward_queries', len(x))
    >>> prof['model_evals']
    1000
    >>> prof.dump()
"""

import logging
import threading
import time

from .streams import stream

log = logging.getLogger(__name__)


@stream
def profile_stream(entry, lock, stream, weight):
    it = iter(stream)
    while True:
        start = time.perf_counter()
        try:
            value = next(it)
        except StopIteration as e:
            with lock:
                entry[1] += 1
                entry[2] += time.perf_counter() - start
            return e.value
        with lock:
            entry[0] += weight
            entry[2] += time.perf_counter() - start
        yield value


class Profile:
    "Per-key entries of [count, endings, seconds]; safe to share between worker threads."

    def __init__(self):
        self.data = {}
        self._lock = threading.Lock()

    def _entry(self, key):
        with self._lock:
            # Using a list instead of a dict/namedtuple/etc. for performance.
            return self.data.setdefault(key, [0, 0, 0.0])

    def stream(self, key, strm, weight=1):
        "Wrap `strm` so that every element it yields adds `weight` to the count under `key`."
        return profile_stream(self._entry(key), self._lock, strm, weight)

    def count(self, key, n=1, seconds=0.0):
        entry = self._entry(key)
        with self._lock:
            entry[0] += n
            entry[2] += seconds

    def __getitem__(self, key):
        return self.data.get(key, [0, 0, 0.0])[0]

    def seconds(self, key):
        return self.data.get(key, [0, 0, 0.0])[2]

    def reset(self):
        with self._lock:
            self.data.clear()

    def dump(self):
        "Log the collected counts."
        for key, (calls, ends, seconds) in self.data.items():
            avg = seconds / calls if calls else 0.0
            log.info("%s: %d counted (%d ending%s) | %.3fus avg | %.3fs total",
                     key, calls, ends, '' if ends == 1 else 's', avg * 1e6, seconds)
