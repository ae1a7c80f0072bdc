"""
JSON helpers for reports that contain numpy and torch values.
"""
import json
import math

import numpy as np


class NumpyEncoder(json.JSONEncoder):
    """Custom JSON encoder for numpy/torch types."""

    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return _finite_or_text(float(obj))
        if isinstance(obj, np.bool_):
            return bool(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        try:
            import torch
            if isinstance(obj, torch.Tensor):
                return obj.detach().cpu().numpy().tolist()
        except ImportError:
            pass
        return super().default(obj)


def _finite_or_text(value):
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if math.isnan(value):
        return None
    return value


def dumps(payload):
    """Deterministic, indented JSON used for every report file."""
    return json.dumps(payload, indent=2, cls=NumpyEncoder)
