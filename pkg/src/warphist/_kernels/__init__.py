"""Hot kernels: layered-plane ray casting and z-buffered splatting.

The compiled extension is used when it was built; otherwise the numpy
implementation is selected at import. ``use_backend`` switches explicitly
(benchmarks and equivalence tests use it).
"""
from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels

BACKEND = "compiled" if _ckernels is not None else "python"
_active = _BACKENDS[BACKEND]


def available_backends():
    return sorted(_BACKENDS)


def get_backend(name: str):
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available_backends()}") from None


def use_backend(name: str) -> None:
    global BACKEND, _active
    _active = get_backend(name)
    BACKEND = name


def render_layers(*args, **kwargs):
    return _active.render_layers(*args, **kwargs)


def splat(px, py, z, colors, width, height, footprint=1):
    return _active.splat(px, py, z, colors, width, height, footprint)
