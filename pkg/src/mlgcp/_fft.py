"""Real 2-d FFTs over the trailing two axes.

Uses FFTW through pyfftw when it is installed (plans built with
FFTW_ESTIMATE, which is deterministic for a given shape), otherwise
``scipy.fft``. Plans are cached per process and are not thread-safe.
"""

import numpy as np
import scipy.fft

try:
    import pyfftw
except ImportError:  # pragma: no cover - exercised only without pyfftw
    pyfftw = None

BACKEND = "fftw" if pyfftw is not None else "scipy"

_plans: dict = {}


def _plan(kind, shape, tag=None):
    plan = _plans.get((kind, shape, tag))
    if plan is None:
        half = shape[:-1] + (shape[-1] // 2 + 1,)
        real = pyfftw.zeros_aligned(shape, dtype="float64")
        cplx = pyfftw.empty_aligned(half, dtype="complex128")
        flags = ("FFTW_ESTIMATE", "FFTW_DESTROY_INPUT")
        if kind == "r":
            plan = pyfftw.FFTW(real, cplx, axes=(-2, -1), direction="FFTW_FORWARD",
                               flags=flags, threads=1)
        elif kind == "rpad":
            # input keeps its zero padding between calls: only the leading
            # block is ever written, and without DESTROY_INPUT r2c leaves it intact
            plan = pyfftw.FFTW(real, cplx, axes=(-2, -1), direction="FFTW_FORWARD",
                               flags=("FFTW_ESTIMATE",), threads=1)
        else:
            plan = pyfftw.FFTW(cplx, real, axes=(-2, -1), direction="FFTW_BACKWARD",
                               flags=flags, threads=1)
        _plans[(kind, shape, tag)] = plan
    return plan


def rfft2(x, s=None):
    """Forward real FFT; ``s`` zero-pads the trailing axes to that shape."""
    if pyfftw is None:
        return scipy.fft.rfft2(x, s=s)
    x = np.asarray(x, dtype=np.float64)
    s = tuple(s) if s is not None else x.shape[-2:]
    if x.shape[-2:] == s:
        plan = _plan("r", x.shape)
        plan.input_array[...] = x
    else:
        plan = _plan("rpad", x.shape[:-2] + s, tag=x.shape[-2:])
        plan.input_array[..., : x.shape[-2], : x.shape[-1]] = x
    plan.execute()
    return plan.output_array.copy()


def filtered_irfft2(filt, X, s):
    """``irfft2(filt * X, s)`` without an intermediate product array."""
    if pyfftw is None:
        return scipy.fft.irfft2(filt * X, s=s)
    s = tuple(s)
    plan = _plan("c", X.shape[:-2] + s)
    np.multiply(filt, X, out=plan.input_array)
    plan.execute()
    return plan.output_array * (1.0 / (s[0] * s[1]))


def irfft2(X, s):
    """Inverse of :func:`rfft2` for a real output of trailing shape ``s``."""
    if pyfftw is None:
        return scipy.fft.irfft2(X, s=s)
    s = tuple(s)
    plan = _plan("c", X.shape[:-2] + s)
    # c2r destroys its input, so always work on the plan's own buffer
    plan.input_array[...] = X
    plan.execute()
    return plan.output_array * (1.0 / (s[0] * s[1]))
