import numpy as np


def derive_seed(*keys: int) -> int:
    """Collapse a tuple of non-negative ints into one 64-bit seed."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def counter_uniform(seed: int, position: int) -> float:
    """Uniform [0, 1) draw addressed by (seed, position); no hidden state."""
    bitgen = np.random.Philox(key=int(seed) % (1 << 128), counter=[int(position), 0, 0, 0])
    return float(np.random.Generator(bitgen).random())
