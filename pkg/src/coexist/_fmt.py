"""Text formatting shared by the on-disk formats."""
import math


def num(x: float) -> str:
    """17 significant digits; parses back to the identical double."""
    x = float(x)
    if math.isnan(x) or math.isinf(x):
        raise ValueError(f"refusing to serialize non-finite value {x!r}")
    return format(x, ".16e")


def nested(values) -> str:
    """Nested lists of floats as JSON text using :func:`num` for every leaf."""
    if hasattr(values, "tolist"):
        values = values.tolist()
    if isinstance(values, (list, tuple)):
        return "[" + ", ".join(nested(v) for v in values) + "]"
    return num(values)
