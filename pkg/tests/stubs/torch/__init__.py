"""Just enough of ``torch`` for graph scripts: tensors are numpy arrays."""
import numpy as np

float = np.float32
float32 = np.float32
long = np.int64
int64 = np.int64


def tensor(data, dtype=None):
    return np.asarray(data, dtype=dtype)


def from_numpy(arr):
    return np.asarray(arr)
