"""Randomized attention instances shared by the property and acceptance tests."""

import numpy as np

from blasst.geometry import AttentionSpec, MaskMode, ThresholdPolicy
from blasst.tensor_io import IidGaussian, SharedImportance, SinkBiased, SyntheticWorkloadSpec, generate_workload

BLOCK_SIZES = (16, 32, 64)


def _distribution(rng, head_dim):
    # Scaled scores stay within about ±50, the range where float32 score
    # rounding leaves the engine inside 1e-6 of the float64 oracle.
    pick = rng.integers(3)
    if pick == 0:
        return IidGaussian(sigma=float(rng.uniform(0.5, 2.5)))
    if pick == 1:
        return SinkBiased(sigma=1.0, sink_cols=(0,), sink_boost=float(rng.uniform(2, 12) * np.sqrt(head_dim)))
    return SharedImportance(sigma=0.3, tail_scale=float(rng.uniform(1.0, 3.0)),
                            num_topics=min(8, head_dim - 1), topic_span=int(rng.choice([8, 32])))


def random_instance(rng, lam=None, max_len=512):
    """(q, k, v, spec) with every geometry knob drawn at random.

    Queries are the trailing rows of the generated sequence, so decode-like
    shapes (seq_len_q < seq_len_kv) keep their causal alignment.
    """
    lkv = int(rng.integers(1, max_len + 1))
    lq = lkv if rng.random() < 0.6 else int(rng.integers(1, lkv + 1))
    hkv = int(rng.choice([1, 2, 4]))
    hq = hkv * int(rng.choice([1, 2])) if hkv < 8 else hkv
    d = int(rng.choice([8, 16, 32, 64]))
    mask = [MaskMode(), MaskMode.causal(), MaskMode.sliding_window(int(rng.integers(1, lkv + 1)))][rng.integers(3)]
    if lam is None:
        lam = float(10 ** rng.uniform(-6, -1))
    w = SyntheticWorkloadSpec(lkv, hq, hkv, d, seed=int(rng.integers(2**32)), distribution=_distribution(rng, d))
    q, k, v = (t.data for t in generate_workload(w))
    spec = AttentionSpec(lq, lkv, hq, hkv, d, int(rng.choice(BLOCK_SIZES)), int(rng.choice(BLOCK_SIZES)),
                         mask=mask, threshold=ThresholdPolicy.fixed(lam),
                         col_order=str(rng.choice(["sequential", "reverse"])))
    return q[:, lkv - lq:], k, v, spec


def rel_err(a, ref):
    scale = float(np.abs(ref).max())
    return float(np.abs(a - ref).max()) / scale if scale > 0 else float(np.abs(a - ref).max())
