"""Dataset generation for mixture-of-experts measures.

Randomness comes from counter-based Philox streams.  substream(seed, *path)
folds the path integers into the 128-bit Philox key with a splitmix64 mix,
so (seed, n_index, replication) always yields the same independent stream
no matter which worker draws it.  Draw order inside sample_dataset is
fixed (inputs, then gate uniforms, then noise) to keep output byte-stable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import model
from .jsonutil import fmt_float

_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def stream_key(seed: int, *path: int) -> int:
    """64-bit subkey for a (seed, *path) stream, stable across processes."""
    key = _splitmix64(int(seed) & _MASK64)
    for part in path:
        key = _splitmix64(key ^ _splitmix64((int(part) + 1) & _MASK64))
    return key


def substream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for the given stream path."""
    key = stream_key(seed, *path)
    return np.random.Generator(np.random.Philox(key=[int(seed) & _MASK64, key]))


@dataclass(frozen=True)
class SampleConfig:
    n: int
    seed: int
    x_dist: str = "standard_normal"

    def __post_init__(self):
        if int(self.n) < 1:
            raise ValueError("n must be >= 1")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "seed", int(self.seed))
        if self.x_dist != "standard_normal":
            raise ValueError("unsupported x_dist %r" % self.x_dist)


@dataclass(frozen=True)
class Dataset:
    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        xs = np.array(self.xs, dtype=float)
        ys = np.array(self.ys, dtype=float)
        if xs.ndim != 2:
            raise ValueError("xs must be (n, d)")
        if ys.shape != (xs.shape[0],):
            raise ValueError("ys must be (n,) matching xs")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            raise ValueError("dataset values must be finite")
        xs.setflags(write=False)
        ys.setflags(write=False)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def n(self) -> int:
        return self.xs.shape[0]

    @property
    def d(self) -> int:
        return self.xs.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x_%d" % u for u in range(self.d)] + ["y"])
            for i in range(self.n):
                writer.writerow(
                    [fmt_float(v) for v in self.xs[i]] + [fmt_float(self.ys[i])]
                )

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            d = len(header) - 1
            expected = ["x_%d" % u for u in range(d)] + ["y"]
            if header != expected:
                raise ValueError("unexpected dataset header %r" % header)
            xs, ys = [], []
            for row in reader:
                vals = [float(v) for v in row]
                xs.append(vals[:d])
                ys.append(vals[d])
        return cls(np.asarray(xs), np.asarray(ys))


def sample_dataset(G: model.MixingMeasure, cfg: SampleConfig, rng=None) -> Dataset:
    """Draw (x, y) pairs from the measure; x ~ N(0, I_d).

    Expert indices come from inverting the gate-weight CDF at a uniform
    draw; y then adds sqrt(nu) noise to the selected expert mean.
    """
    if rng is None:
        rng = substream(cfg.seed)
    n = cfg.n
    xs = rng.standard_normal((n, G.d))
    u = rng.uniform(size=n)
    eps = rng.standard_normal(n)
    w = model.gate_weights_batch(G, xs)
    cum = np.cumsum(w, axis=1)
    z = np.sum(cum < u[:, None], axis=1)
    z = np.minimum(z, G.k - 1)  # guard the u ~ 1.0 edge
    means = model.expert_means(G, xs)
    ys = means[np.arange(n), z] + np.sqrt(G.nu_vec[z]) * eps
    return Dataset(xs, ys)
