"""Counter-based random streams built on Philox.

Every draw in the package is addressed by (seed, tag, step) plus a counter
offset, so results are bitwise reproducible under any partition of the Monte
Carlo ensemble into batches and any parallel schedule.  Normals come from the
inverse CDF applied to counter-indexed uniforms; one uniform consumes exactly
one 64-bit Philox output, which is what makes offsetting exact.

numpy's Philox.advance(delta) skips 4*delta outputs, so all per-sample strides
are padded to multiples of four 64-bit words.
"""

import numpy as np
from scipy.special import ndtri

# stream tags keep independent uses of the same user seed disjoint
TAG_FIELD = 0x66  # random_divergence_free
TAG_NOISE = 0x4E  # simulator noise increments
TAG_BOOT = 0x42   # bootstrap resampling
TAG_RESTART = 0x52  # optimizer restarts

_TINY = 2.0 ** -54  # guard against ndtri(0) = -inf


def _key(seed: int, tag: int, step: int = 0) -> np.ndarray:
    word = (np.uint64(tag) << np.uint64(40)) ^ np.uint64(step)
    return np.array([np.uint64(seed) & np.uint64(0xFFFFFFFFFFFFFFFF), word],
                    dtype=np.uint64)


def generator(seed: int, tag: int, step: int = 0) -> np.random.Generator:
    """Fresh keyed Generator; fine for one-shot draws (fields, bootstrap)."""
    return np.random.Generator(np.random.Philox(key=_key(seed, tag, step)))


def padded_stride(count: int) -> int:
    """Per-sample stride in 64-bit words, rounded up to a multiple of 4."""
    return -4 * (-count // 4)


def normals_from(stream: np.random.Generator, count: int) -> np.ndarray:
    """Standard normals from an existing stream, same inverse-CDF recipe."""
    return ndtri(np.maximum(stream.random(count), _TINY))


def normal_block(seed: int, tag: int, step: int, first_sample: int,
                 n_samples: int, per_sample: int) -> np.ndarray:
    """Standard normals of shape (n_samples, per_sample).

    Sample i of a given (seed, tag, step) always occupies the same Philox
    counter range, independent of how the ensemble is split into batches.
    """
    stride = padded_stride(per_sample)
    bg = np.random.Philox(key=_key(seed, tag, step))
    if first_sample:
        bg.advance(first_sample * (stride // 4))
    u = np.random.Generator(bg).random(n_samples * stride)
    u = u.reshape(n_samples, stride)[:, :per_sample]
    return ndtri(np.maximum(u, _TINY))
