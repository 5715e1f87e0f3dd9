"""Three-form equivalence harness shared by the CLI, tests, and acceptance suite.

For a gate variant it draws random instances, runs the recurrent,
masked-parallel, and chunkwise forms on identical inputs, and reports the
maximum absolute deviation across all form pairs.
"""

from __future__ import annotations

import numpy as np

from . import gating, kernels, tensor as tt
from .errors import ConfigError
from .rng import Rng
from .tensor import Tensor

TOLERANCES = {"f32": 1e-4, "f64": 1e-10}


def _instance_dims(variant: str, rng: Rng, dim_max: int) -> tuple[int, int, int]:
    """(key_dim, value_dim, gate_width) honoring per-variant divisibility."""
    dk = int(rng.integers(1, dim_max + 1))
    dv = int(rng.integers(1, dim_max + 1))
    if variant == "gsa":
        dk = max(2, dk - dk % 2)
        divisors = [m for m in range(1, dk + 1) if dk % m == 0]
        m = int(divisors[int(rng.integers(0, len(divisors)))])
        return dk, dv, m
    return dk, dv, dk


def three_form_check(
    variant: str,
    trials: int = 20,
    t_max: int = 64,
    dim_max: int = 16,
    dtype: str = "f32",
    seed: int = 0,
    chunk: int = kernels.DEFAULT_CHUNK,
    phi: str = "softmax",
) -> dict:
    """Run `trials` random instances and return deviation statistics."""
    if variant not in kernels.GATE_VARIANTS:
        raise ConfigError(f"unknown gate variant {variant!r}")
    if dtype not in TOLERANCES:
        raise ConfigError(f"dtype must be f32 or f64, got {dtype!r}")
    np_dtype = np.float32 if dtype == "f32" else np.float64
    rng = Rng(seed).child("equiv", variant, dtype)
    gv = gating.GateVariant(variant)
    max_dev = 0.0
    per_pair = {"rec_par": 0.0, "rec_chunk": 0.0, "par_chunk": 0.0}
    with tt.no_grad():
        for trial in range(trials):
            r = rng.child(trial)
            T = int(r.integers(1, t_max + 1))
            dk, dv, width = _instance_dims(variant, r, dim_max)
            q = Tensor(r.normal((T, dk), dtype=np_dtype))
            k = Tensor(r.normal((T, dk), dtype=np_dtype))
            v = Tensor(r.normal((T, dv), dtype=np_dtype))
            keys = Tensor(r.normal((T, dk), dtype=np_dtype))
            gv_t = gating.GateVariant(variant, gsa_slots_m=width)
            gate = gating.construct_gate(gv_t, keys)
            if gv.shape_kind != "slots":
                gate = gating.expand_gate_rows(gate, dk)

            if variant == "hgrn2":
                fmap = kernels.resolve_feature_map(phi)
                qm = fmap(q)
                o_rec, _ = kernels.hgrn2_recurrent(qm, v, gate)
                o_par = kernels.hgrn2_parallel(qm, v, gate)
                o_chk, _ = kernels.hgrn2_chunkwise(qm, v, gate, chunk=chunk)
            elif variant == "gsa":
                fmap = kernels.resolve_feature_map(phi)
                qm, km = fmap(q), fmap(k)
                o_rec, _ = kernels.gsa_recurrent(qm, km, v, gate)
                o_par = kernels.gsa_parallel(qm, km, v, gate)
                o_chk, _ = kernels.gsa_chunkwise(qm, km, v, gate, chunk=chunk)
            else:
                o_rec, _ = kernels.gated_recurrent(q, k, v, gate, phi=phi)
                o_par = kernels.gated_parallel_masked(q, k, v, gate, phi=phi)
                o_chk, _ = kernels.gated_chunkwise(q, k, v, gate, chunk=chunk, phi=phi)

            pairs = {
                "rec_par": float(np.abs(o_rec.data - o_par.data).max()),
                "rec_chunk": float(np.abs(o_rec.data - o_chk.data).max()),
                "par_chunk": float(np.abs(o_par.data - o_chk.data).max()),
            }
            for name, dev in pairs.items():
                per_pair[name] = max(per_pair[name], dev)
            max_dev = max(max_dev, *pairs.values())
    return {
        "variant": variant,
        "dtype": dtype,
        "trials": trials,
        "max_deviation": max_dev,
        "per_pair": per_pair,
        "tolerance": TOLERANCES[dtype],
        "passed": max_dev < TOLERANCES[dtype],
    }
