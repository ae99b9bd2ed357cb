import numpy as np

from capsdbn.numerics import RandomStream


def two_pattern_dataset(n_per_pattern=20, extent=12, flip_rate=0.03, seed=123):
    """Binary stripe images in two orientations with sparse pixel flips.

    The pinned-seed learning-signal dataset used by the Boltzmann-machine
    tests: 1-channel, extent x extent, values in {0, 1}.
    """
    stream = RandomStream(seed)
    horizontal = np.zeros((extent, extent), dtype=np.float32)
    horizontal[::2, :] = 1.0
    vertical = np.zeros((extent, extent), dtype=np.float32)
    vertical[:, ::2] = 1.0
    images = []
    for base in (horizontal, vertical):
        for _ in range(n_per_pattern):
            flips = (stream.uniform((extent, extent)) < flip_rate).astype(np.float32)
            images.append(np.abs(base - flips)[None, :, :])
    return np.stack(images)
