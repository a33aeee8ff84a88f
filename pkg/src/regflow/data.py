"""Seeded synthetic conditional datasets and their exact ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

SPLITS = ("train", "test")


class CoverageError(ValueError):
    """Some x in the range has no active branch."""

    def __init__(self, lo: float, hi: float):
        super().__init__(f"no branch is active on x in [{lo:g}, {hi:g}]")
        self.interval = (lo, hi)


class Branch(NamedTuple):
    slope: float
    intercept: float
    lo: float
    hi: float


DEFAULT_BRANCHES = (
    Branch(1.0, 0.0, -10.0, 10.0),
    Branch(-1.0, 0.0, -10.0, 10.0),
    Branch(0.3, 4.0, 0.0, 10.0),
    Branch(0.0, -5.0, -10.0, 0.0),
    Branch(2.0, -8.0, 5.0, 10.0),
)


@dataclass(frozen=True)
class ToyConfig:
    x_range: tuple[float, float] = (-10.0, 10.0)
    branches: tuple[Branch, ...] = DEFAULT_BRANCHES
    noise_sigma: float = 0.1
    n_samples: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(Branch(*map(float, b)) for b in self.branches))
        object.__setattr__(self, "x_range", tuple(map(float, self.x_range)))
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be positive")
        if self.n_samples < 0:
            raise ValueError("n_samples must be non-negative")
        lo, hi = self.x_range
        if not hi > lo:
            raise ValueError(f"empty x_range {self.x_range}")
        gap = _first_gap(self.branches, lo, hi)
        if gap is not None:
            raise CoverageError(*gap)

    def active(self, x) -> np.ndarray:
        """Boolean mask (n, n_branches) of branches active at each x."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        lo = np.array([b.lo for b in self.branches])
        hi = np.array([b.hi for b in self.branches])
        return (x >= lo) & (x <= hi)

    def check_x(self, x: float) -> None:
        lo, hi = self.x_range
        if not lo <= x <= hi:
            raise ValueError(f"x={x} outside x_range [{lo:g}, {hi:g}]")


def _first_gap(branches, lo: float, hi: float):
    # walk the union of closed intervals clipped to [lo, hi]
    spans = sorted((max(b.lo, lo), min(b.hi, hi)) for b in branches if b.hi >= lo and b.lo <= hi)
    reach = lo
    started = False
    for a, b in spans:
        if a > reach or (not started and a > lo):
            return (reach, a)
        started = True
        reach = max(reach, b)
    if not started:
        return (lo, hi)
    if reach < hi:
        return (reach, hi)
    return None


@dataclass(frozen=True)
class TrajConfig:
    """Start state (position, heading) -> one of several destination modes.

    ``mode_centers`` are expressed in the agent frame; each target is
    ``start + R(heading) @ center + noise``.
    """

    mode_centers: tuple[tuple[float, float], ...] = ((4.0, 2.0), (4.0, -2.0), (2.0, 0.0))
    mode_weights: tuple[float, ...] = (0.4, 0.4, 0.2)
    noise_sigma: float = 0.2
    n_samples: int = 1000
    start_box: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "mode_centers", tuple(tuple(map(float, c)) for c in self.mode_centers))
        object.__setattr__(self, "mode_weights", tuple(map(float, self.mode_weights)))
        if len(self.mode_centers) != len(self.mode_weights) or not self.mode_centers:
            raise ValueError("mode_centers and mode_weights must be non-empty and of equal length")
        w = np.array(self.mode_weights)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"mode_weights must lie on the simplex, got {self.mode_weights}")
        if len(set(self.mode_centers)) != len(self.mode_centers):
            raise ValueError("mode_centers must be pairwise distinct")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def n_modes(self) -> int:
        return len(self.mode_centers)


@dataclass
class Dataset:
    x: np.ndarray  # (n, c)
    y: np.ndarray  # (n, d)
    seed: int
    generator_id: str
    split: str = "train"
    config: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        self.x = np.asarray(self.x, dtype=np.float64).reshape(len(self.x), -1)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(len(self.y), -1)
        if len(self.x) != len(self.y):
            raise ValueError("x and y must hold the same number of pairs")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite values")

    def __len__(self) -> int:
        return len(self.x)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        return zip(self.x, self.y)

    @property
    def cond_dim(self) -> int:
        return self.x.shape[1]

    @property
    def target_dim(self) -> int:
        return self.y.shape[1]


def _rng(seed: int, split: str) -> np.random.Generator:
    # train and test draw from distinct child streams of the same seed
    return np.random.default_rng([int(seed), SPLITS.index(split)])


def _pick_active(mask: np.ndarray, u: np.ndarray) -> np.ndarray:
    counts = mask.sum(axis=1)
    rank = np.minimum((u * counts).astype(int), counts - 1)
    cum = np.cumsum(mask, axis=1) - 1
    return np.argmax(mask & (cum == rank[:, None]), axis=1)


def gen_toy(config: ToyConfig, seed: int, split: str = "train") -> Dataset:
    rng = _rng(seed, split)
    n = config.n_samples
    lo, hi = config.x_range
    x = rng.uniform(lo, hi, n)
    j = _pick_active(config.active(x), rng.random(n))
    slope = np.array([b.slope for b in config.branches])
    intercept = np.array([b.intercept for b in config.branches])
    y = slope[j] * x + intercept[j] + rng.normal(0.0, config.noise_sigma, n)
    return Dataset(x[:, None], y[:, None], seed, "toy", split, config)


def true_conditional_sample(config: ToyConfig, x: float, n: int, seed: int) -> np.ndarray:
    config.check_x(x)
    rng = np.random.default_rng(seed)
    idx = np.flatnonzero(config.active(x)[0])
    j = idx[rng.integers(0, len(idx), n)]
    slope = np.array([b.slope for b in config.branches])
    intercept = np.array([b.intercept for b in config.branches])
    return slope[j] * x + intercept[j] + rng.normal(0.0, config.noise_sigma, n)


def true_conditional_log_prob(config: ToyConfig, x: float, y) -> np.ndarray:
    """Log density of the uniform mixture over branches active at ``x``."""
    config.check_x(x)
    y = np.asarray(y, dtype=np.float64)
    idx = np.flatnonzero(config.active(x)[0])
    means = np.array([config.branches[j].slope * x + config.branches[j].intercept for j in idx])
    s = config.noise_sigma
    comp = -0.5 * ((y[..., None] - means) / s) ** 2 - math.log(s) - 0.5 * math.log(2 * math.pi)
    top = comp.max(axis=-1, keepdims=True)
    return (top + np.log(np.exp(comp - top).sum(axis=-1, keepdims=True)))[..., 0] - math.log(len(idx))


def _rotation(heading: np.ndarray) -> np.ndarray:
    c, s = np.cos(heading), np.sin(heading)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def gen_traj2d(config: TrajConfig, seed: int, split: str = "train") -> Dataset:
    """x = (px, py, cos h, sin h); y = start + R(h) @ center_j + noise."""
    rng = _rng(seed, split)
    n = config.n_samples
    start = rng.uniform(-config.start_box, config.start_box, (n, 2))
    heading = rng.uniform(-math.pi, math.pi, n)
    j = rng.choice(config.n_modes, size=n, p=np.array(config.mode_weights))
    centers = np.array(config.mode_centers)[j]
    offset = np.einsum("nij,nj->ni", _rotation(heading), centers)
    y = start + offset + rng.normal(0.0, 1.0, (n, 2)) * config.noise_sigma
    x = np.column_stack([start, np.cos(heading), np.sin(heading)])
    ds = Dataset(x, y, seed, "traj2d", split, config)
    ds.modes = j
    return ds


def traj_conditional_sample(config: TrajConfig, x, n: int, seed: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    heading = math.atan2(x[3], x[2])
    j = rng.choice(config.n_modes, size=n, p=np.array(config.mode_weights))
    rot = _rotation(np.array(heading))
    offset = np.array(config.mode_centers)[j] @ rot.T
    return x[:2] + offset + rng.normal(0.0, 1.0, (n, 2)) * config.noise_sigma


class GroundTruth:
    """Exact generative model exposed with the same sampling surface as a trained model."""

    kind = "truth"

    def __init__(self, config):
        self.config = config

    def sample(self, x, n: int, seed: int) -> np.ndarray:
        if isinstance(self.config, ToyConfig):
            return true_conditional_sample(self.config, float(np.ravel(x)[0]), n, seed)[:, None]
        return traj_conditional_sample(self.config, x, n, seed)

    def log_prob(self, x, y) -> np.ndarray:
        if not isinstance(self.config, ToyConfig):
            raise NotImplementedError("analytic density is only provided for the toy task")
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)[:, 0]
        y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)[:, 0]
        return np.array([true_conditional_log_prob(self.config, xi, yi) for xi, yi in zip(x, y)])


# --- serialization -----------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def config_to_text(config) -> dict[str, str]:
    if isinstance(config, ToyConfig):
        return {
            "x_range": ",".join(map(_fmt, config.x_range)),
            "branches": ";".join(",".join(_fmt(v) for v in b) for b in config.branches),
            "noise_sigma": _fmt(config.noise_sigma),
            "n_samples": str(config.n_samples),
        }
    return {
        "mode_centers": ";".join(",".join(map(_fmt, c)) for c in config.mode_centers),
        "mode_weights": ",".join(map(_fmt, config.mode_weights)),
        "noise_sigma": _fmt(config.noise_sigma),
        "n_samples": str(config.n_samples),
        "start_box": _fmt(config.start_box),
    }


def config_from_text(generator_id: str, values: dict[str, str]):
    def pairs(s):
        return tuple(tuple(float(v) for v in part.split(",")) for part in s.split(";") if part.strip())

    def floats(s):
        return tuple(float(v) for v in s.split(","))

    kw = {}
    if generator_id == "toy":
        if "x_range" in values:
            kw["x_range"] = floats(values["x_range"])
        if "branches" in values:
            kw["branches"] = pairs(values["branches"])
        if "noise_sigma" in values:
            kw["noise_sigma"] = float(values["noise_sigma"])
        if "n_samples" in values:
            kw["n_samples"] = int(values["n_samples"])
        return ToyConfig(**kw)
    if generator_id == "traj2d":
        if "mode_centers" in values:
            kw["mode_centers"] = pairs(values["mode_centers"])
        if "mode_weights" in values:
            kw["mode_weights"] = floats(values["mode_weights"])
        for key in ("noise_sigma", "start_box"):
            if key in values:
                kw[key] = float(values[key])
        if "n_samples" in values:
            kw["n_samples"] = int(values["n_samples"])
        return TrajConfig(**kw)
    raise ValueError(f"unknown generator {generator_id!r}")


def save_dataset(ds: Dataset, path) -> None:
    """CSV with header ``x0..,y0..`` plus a ``.meta.txt`` sibling."""
    path = Path(path)
    header = [f"x{i}" for i in range(ds.cond_dim)] + [f"y{i}" for i in range(ds.target_dim)]
    lines = [",".join(header)]
    for row in np.hstack([ds.x, ds.y]):
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    meta = {"generator_id": ds.generator_id, "seed": str(ds.seed), "split": ds.split}
    if ds.config is not None:
        meta.update(config_to_text(ds.config))
    meta_path(path).write_text("".join(f"{k}={v}\n" for k, v in meta.items()))


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.txt")


def load_dataset(path) -> Dataset:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    c = sum(h.startswith("x") for h in header)
    meta = {}
    mp = meta_path(path)
    if mp.exists():
        meta = read_key_values(mp.read_text())
    gen_id = meta.get("generator_id", "unknown")
    config = None
    if gen_id in ("toy", "traj2d"):
        config = config_from_text(gen_id, meta)
    return Dataset(table[:, :c], table[:, c:], int(meta.get("seed", 0)), gen_id, meta.get("split", "train"), config)


def read_key_values(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out
