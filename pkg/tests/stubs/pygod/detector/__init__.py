"""Graph detectors with the pygod ``fit(data)`` / ``predict(data, ...)`` interface."""
import numpy as np

from _stubbase import StubDetector


class _GraphDetector(StubDetector):
    def __init__(self, contamination=0.1, epoch=100, gpu=-1, verbose=0, **kwargs):
        self.contamination = contamination
        self.epoch = epoch

    @staticmethod
    def _features(data):
        if not hasattr(data, "x") or not hasattr(data, "edge_index"):
            raise TypeError("expected a torch_geometric Data object with x and edge_index")
        x = np.asarray(data.x, dtype=float)
        edges = np.asarray(data.edge_index)
        if edges.ndim != 2 or edges.shape[0] != 2:
            raise ValueError("edge_index must have shape [2, num_edges], got %s" % (edges.shape,))
        if edges.size and edges.max() >= len(x):
            raise IndexError("edge_index refers to node %d but the graph has %d nodes (out of range)"
                             % (edges.max(), len(x)))
        # mix each node with its neighbours' mean so structure matters
        agg = np.zeros_like(x)
        deg = np.zeros(len(x))
        np.add.at(agg, edges[1], x[edges[0]])
        np.add.at(deg, edges[1], 1)
        return np.hstack([x, agg / np.maximum(deg, 1)[:, None]])

    def fit(self, data, label=None):
        return StubDetector.fit(self, self._features(data))

    def decision_function(self, data, label=None):
        return StubDetector.decision_function(self, self._features(data))

    def predict(self, data=None, label=None, return_pred=True, return_score=False, return_prob=False,
                prob_method="linear", return_conf=False):
        scores = self.decision_function(data)
        pred = (scores > self.threshold_).astype(int)
        out = []
        if return_pred:
            out.append(pred)
        if return_score:
            out.append(scores)
        return out[0] if len(out) == 1 else tuple(out)


def _detector(name, **own):
    def __init__(self, contamination=0.1, gpu=-1, verbose=0, **kwargs):
        unknown = set(kwargs) - set(own)
        if unknown:
            raise TypeError("%s.__init__() got an unexpected keyword argument '%s'" % (name, sorted(unknown)[0]))
        _GraphDetector.__init__(self, contamination, kwargs.get("epoch", own.get("epoch", 0)), gpu, verbose)
    return type(name, (_GraphDetector,), {"__init__": __init__})


_COMMON = dict(hid_dim=64, num_layers=4, dropout=0.0, weight_decay=0.0, lr=0.004, epoch=100, batch_size=0)

AdONE = _detector("AdONE", **_COMMON)
ANOMALOUS = _detector("ANOMALOUS", gamma=1.0, weight_decay=0.0, lr=0.004, epoch=100)
AnomalyDAE = _detector("AnomalyDAE", alpha=0.5, emb_dim=64, **_COMMON)
CONAD = _detector("CONAD", **_COMMON)
DONE = _detector("DONE", **_COMMON)
GUIDE = _detector("GUIDE", hid_a=32, hid_s=4, **_COMMON)
Radar = _detector("Radar", gamma=1.0, weight_decay=0.0, lr=0.004, epoch=100)
SCAN = _detector("SCAN", eps=0.5, mu=2)
_GAANBase = _detector("GAAN", noise_dim=16, **_COMMON)


class GAAN(_GAANBase):
    def fit(self, data, label=None):
        y = getattr(data, "y", None)
        if y is not None and not np.isin(np.asarray(y), (0, 1)).all():
            raise ValueError("GAAN expects a binary target in data.y")
        return super().fit(data, label)
