"""Shared test oracles, independent of the library's fast paths."""

from __future__ import annotations

import itertools

import numpy as np
import pytest


def naive_conv3d(x, weights, bias, spec):
    """Direct sliding-window convolution oracle (explicit loops, no reuse
    of the library's tap-slicing implementation)."""
    kt, kh, kw = spec.kernel
    dt, dh, dw = spec.dilation
    eff = [(k - 1) * d + 1 for k, d in zip(spec.kernel, spec.dilation)]
    if spec.padding == "same":
        pads = [((e - 1) // 2, (e - 1) - (e - 1) // 2) for e in eff]
        xp = np.pad(x, (*pads, (0, 0)))
        out_thw = x.shape[:3]
    else:
        xp = x
        out_thw = tuple(s - (e - 1) for s, e in zip(x.shape[:3], eff))
    to, ho, wo = out_thw
    y = np.zeros((to, ho, wo, spec.out_channels), dtype=np.float64)
    for t, h, w, o in itertools.product(range(to), range(ho), range(wo),
                                        range(spec.out_channels)):
        acc = 0.0
        for i, j, k, c in itertools.product(range(kt), range(kh), range(kw),
                                            range(spec.in_channels)):
            acc += weights[i, j, k, c, o] * xp[t + i * dt, h + j * dh,
                                               w + k * dw, c]
        y[t, h, w, o] = acc + (bias[o] if bias is not None else 0.0)
    return y


def closed_form_conv_params(specs):
    """Spreadsheet-style parameter count over a list of (name, ConvSpec)."""
    total = 0
    for _, spec in specs:
        kt, kh, kw = spec.kernel
        total += kt * kh * kw * spec.in_channels * spec.out_channels
        if spec.bias:
            total += spec.out_channels
    return total


def zero_all_params(model):
    for arr in model.named_params().values():
        arr[...] = 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
