"""Optional JIT-compiled inner loops for the simulator.

Every kernel reproduces the reference numpy arithmetic elementwise (no
fastmath, no reassociation of the per-element expressions), so enabling or
disabling this module changes speed only.  Set SNNFORGE_NO_NUMBA=1 to force
the pure-numpy paths.
"""

import os

import numpy as np

ENABLED = False

if not os.environ.get("SNNFORGE_NO_NUMBA"):
    try:
        import numba
        from numba import njit, prange

        ENABLED = True
    except ImportError:  # pragma: no cover - exercised on minimal installs
        ENABLED = False


if ENABLED:

    @njit(cache=True)
    def if_step(v, z, n, theta, tau, to_zero, clamp):
        """Fused integrate-and-fire update over flattened state arrays."""
        for i in range(v.size):
            vi = v[i] + z[i]
            if vi >= tau:
                theta[i] = 1.0
                n[i] += 1
                vi = 0.0 if to_zero else vi - tau
            else:
                theta[i] = 0.0
            if clamp and vi < 0.0:
                vi = 0.0
            v[i] = vi

    @njit(cache=True)
    def ewma_gate(rho, theta, out, gamma, kh, kw, sh, sw):
        """Fused EWMA update and gated max-pool on (B,H,W,C) arrays.

        Ties go to the lowest (di,dj) row-major window index, matching the
        channels-first flat-index convention.
        """
        b_n, h, w, c = rho.shape
        ho = (h - kh) // sh + 1
        wo = (w - kw) // sw + 1
        for b in range(b_n):
            for i in range(h):
                for j in range(w):
                    for k in range(c):
                        rho[b, i, j, k] = (
                            gamma * rho[b, i, j, k]
                            + (1.0 - gamma) * theta[b, i, j, k]
                        )
            for i in range(ho):
                for j in range(wo):
                    for k in range(c):
                        best = -1.0
                        bi = 0
                        bj = 0
                        for di in range(kh):
                            for dj in range(kw):
                                r = rho[b, i * sh + di, j * sw + dj, k]
                                if r > best:
                                    best = r
                                    bi = di
                                    bj = dj
                        out[b, i, j, k] = theta[b, i * sh + bi, j * sw + bj, k]

    @njit(cache=True, parallel=True)
    def conv_cl(xpad, taps, bias, out, sh, sw):
        """Channels-last convolution: xpad (B,Hp,Wp,C) x taps (kh,kw,C,O)
        -> out (B,Ho,Wo,O), accumulating taps in (di,dj,c) order."""
        b_n, hp, wp, c = xpad.shape
        kh, kw, _, o = taps.shape
        ho = out.shape[1]
        wo = out.shape[2]
        for b in prange(b_n):
            for i in range(ho):
                for j in range(wo):
                    for oc in range(o):
                        out[b, i, j, oc] = bias[oc]
                    for di in range(kh):
                        for dj in range(kw):
                            for ic in range(c):
                                xv = xpad[b, i * sh + di, j * sw + dj, ic]
                                if xv != 0.0:
                                    for oc in range(o):
                                        out[b, i, j, oc] += xv * taps[di, dj, ic, oc]

    def warmup():
        """Compile the kernels on tiny inputs (amortizes JIT cost)."""
        v = np.zeros(4)
        z = np.zeros(4)
        n = np.zeros(4, dtype=np.int64)
        theta = np.zeros(4)
        if_step(v, z, n, theta, 1.0, True, False)
        rho = np.zeros((1, 2, 2, 1))
        out = np.zeros((1, 1, 1, 1))
        ewma_gate(rho, rho.copy(), out, 0.5, 2, 2, 2, 2)
        xpad = np.zeros((1, 3, 3, 1))
        taps = np.zeros((3, 3, 1, 1))
        conv_cl(xpad, taps, np.zeros(1), np.zeros((1, 1, 1, 1)), 1, 1)
