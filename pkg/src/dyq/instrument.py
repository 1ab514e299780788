"""Per-invocation operation counters.

The integer executor runs with an :class:`OpCounter` attached; every kernel
and rescale helper reports the integer work it did, and anything touching a
float array inside the counted window charges ``float_ops``.  A clean run
therefore ends with ``float_ops == 0``, which is the integer-only proof the
inference path is held to.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class OpCounter:
    int_mul: int = 0
    int_add: int = 0
    int_shift: int = 0
    int_cmp: int = 0
    float_ops: int = 0

    @property
    def total_int_ops(self):
        return self.int_mul + self.int_add + self.int_shift + self.int_cmp

    def count_mac(self, n):
        self.int_mul += n
        self.int_add += n

    def count_requant(self, n):
        # multiply, rounding add, shift per element
        self.int_mul += n
        self.int_add += n
        self.int_shift += n

    def count_add(self, n):
        self.int_add += n

    def count_cmp(self, n):
        self.int_cmp += n

    def count_float(self, n):
        self.float_ops += n

    def check_integer_array(self, arr):
        """Charge float ops if a non-integer array reaches the integer path."""
        arr = np.asarray(arr)
        if not np.issubdtype(arr.dtype, np.integer):
            self.float_ops += int(arr.size)
        return arr
