"""Reconstruction-style time-series detectors over sliding windows."""
import numpy as np

from _stubbase import StubDetector


class _WindowDetector(StubDetector):
    def __init__(self, seq_len=100, d_model=64, e_layers=2, n_heads=8, train_epochs=10, batch_size=128,
                 learning_rate=0.0001, anomaly_ratio=1.0, **extra):
        if not 0 < anomaly_ratio < 100:
            raise ValueError("anomaly_ratio must be between 0 and 100 (percent)")
        self.seq_len = seq_len
        self.train_epochs = train_epochs
        self.contamination = anomaly_ratio / 100.0
        for k, v in extra.items():
            setattr(self, k, v)

    def _windows_ok(self, X):
        X = self._check(X)
        if self.seq_len > len(X):
            raise ValueError("sequence length %d exceeds the input length %d" % (self.seq_len, len(X)))
        return X

    def fit(self, X, y=None):
        return super().fit(self._windows_ok(X))

    def decision_function(self, X):
        return super().decision_function(self._windows_ok(X))


def _model(name, **own):
    def __init__(self, seq_len=100, d_model=64, e_layers=2, n_heads=8, train_epochs=10, batch_size=128,
                 learning_rate=0.0001, anomaly_ratio=1.0, **extra):
        unknown = set(extra) - set(own)
        if unknown:
            raise TypeError("%s.__init__() got an unexpected keyword argument '%s'" % (name, sorted(unknown)[0]))
        _WindowDetector.__init__(self, seq_len, d_model, e_layers, n_heads, train_epochs, batch_size,
                                 learning_rate, anomaly_ratio, **{**own, **extra})
    return type(name, (_WindowDetector,), {"__init__": __init__})


Autoformer = _model("Autoformer")
DLinear = _model("DLinear")
FEDformer = _model("FEDformer")
Informer = _model("Informer")
iTransformer = _model("iTransformer")
LightTS = _model("LightTS")
PatchTST = _model("PatchTST", patch_len=16)
TimesNet = _model("TimesNet", top_k=5)
Transformer = _model("Transformer")
_PyraBase = _model("Pyraformer", window_size=[4, 4])


class Pyraformer(_PyraBase):
    def fit(self, X, y=None):
        span = int(np.prod(self.window_size))
        if self.seq_len < span:
            raise ValueError("sequence length %d is shorter than the pyramid span %d" % (self.seq_len, span))
        return super().fit(X, y)
