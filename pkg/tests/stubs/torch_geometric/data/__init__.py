import numpy as np


class Data:
    def __init__(self, x=None, edge_index=None, y=None, **kwargs):
        self.x = x
        self.edge_index = edge_index
        self.y = y
        for k, v in kwargs.items():
            setattr(self, k, v)

    @property
    def num_nodes(self):
        return 0 if self.x is None else len(self.x)
