"""Synthetic task families and the ILAD1 dataset file format.

An utterance is built by concatenating one prototype (an F x s_proto
feature patch) per label, optionally passing every prototype frame through
an affine "accent" map ``W x + b``, then adding i.i.d. Gaussian noise.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

DATA_MAGIC = b"ILAD"
DATA_VERSION = 1

DEFAULT_F = 16
DEFAULT_S_PROTO = 8
DEFAULT_M = 13
BASE_INVENTORY = tuple(range(1, 9))
NEW_WORDS = tuple(range(9, 13))


@dataclass
class TaskSpec:
    task_id: str
    inventory: tuple[int, ...]
    prototypes: dict[int, np.ndarray]           # symbol -> (F, s_proto)
    num_classes: int = DEFAULT_M
    transform: np.ndarray | None = None        # (F, F)
    bias: np.ndarray | None = None             # (F,)
    noise_std: float = 0.5
    length_range: tuple[int, int] = (2, 6)
    num_samples: int = 2000
    seed: int = 0

    @property
    def feature_dim(self) -> int:
        return next(iter(self.prototypes.values())).shape[0]

    def validate(self) -> None:
        if not self.inventory:
            raise ConfigError(f"task {self.task_id}: symbol inventory is empty")
        bad = [s for s in self.inventory if not 1 <= s < self.num_classes]
        if bad:
            raise ConfigError(f"task {self.task_id}: symbols {bad} outside [1, {self.num_classes - 1}]")
        missing = [s for s in self.inventory if s not in self.prototypes]
        if missing:
            raise ConfigError(f"task {self.task_id}: no prototype for symbols {missing}")
        shapes = {p.shape for p in self.prototypes.values()}
        if len(shapes) != 1:
            raise ConfigError(f"task {self.task_id}: prototypes have mixed shapes {shapes}")
        if not all(np.all(np.isfinite(p)) for p in self.prototypes.values()):
            raise ConfigError(f"task {self.task_id}: prototypes must be finite")
        lo, hi = self.length_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"task {self.task_id}: bad utterance length range {self.length_range}")
        if self.noise_std < 0:
            raise ConfigError(f"task {self.task_id}: noise_std must be >= 0")
        if self.num_samples < 0:
            raise ConfigError(f"task {self.task_id}: num_samples must be >= 0")
        F = self.feature_dim
        if self.transform is not None and self.transform.shape != (F, F):
            raise ConfigError(f"task {self.task_id}: transform must be {F}x{F}")
        if self.bias is not None and self.bias.shape != (F,):
            raise ConfigError(f"task {self.task_id}: bias must have length {F}")

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "inventory": list(self.inventory),
            "prototypes": {str(k): v.tolist() for k, v in sorted(self.prototypes.items())},
            "num_classes": self.num_classes,
            "transform": None if self.transform is None else self.transform.tolist(),
            "bias": None if self.bias is None else self.bias.tolist(),
            "noise_std": self.noise_std,
            "length_range": list(self.length_range),
            "num_samples": self.num_samples,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        try:
            return cls(
                task_id=str(d["task_id"]),
                inventory=tuple(int(s) for s in d["inventory"]),
                prototypes={int(k): np.array(v, dtype=np.float64) for k, v in d["prototypes"].items()},
                num_classes=int(d.get("num_classes", DEFAULT_M)),
                transform=None if d.get("transform") is None else np.array(d["transform"], float),
                bias=None if d.get("bias") is None else np.array(d["bias"], float),
                noise_std=float(d.get("noise_std", 0.5)),
                length_range=tuple(int(v) for v in d.get("length_range", (2, 6))),
                num_samples=int(d.get("num_samples", 2000)),
                seed=int(d.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"malformed task spec: {e}") from None


@dataclass
class Sample:
    x: np.ndarray              # (F, S)
    y: tuple[int, ...]
    task_id: str = field(default="", compare=False)
    index: int = field(default=0, compare=False)

    def __eq__(self, other):
        return (isinstance(other, Sample) and self.y == other.y
                and self.x.shape == other.x.shape and np.array_equal(self.x, other.x))


@dataclass
class Dataset:
    feature_dim: int
    num_classes: int
    samples: list[Sample]
    task_id: str = field(default="", compare=False)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def random_prototypes(symbols, feature_dim: int = DEFAULT_F, s_proto: int = DEFAULT_S_PROTO,
                      seed: int = 0) -> dict[int, np.ndarray]:
    """Standard-normal prototype patches, one independent stream per symbol."""
    return {int(s): np.random.default_rng([seed, int(s)]).standard_normal((feature_dim, s_proto))
            for s in symbols}


def make_base_task(task_id: str = "base", inventory=BASE_INVENTORY, feature_dim: int = DEFAULT_F,
                   s_proto: int = DEFAULT_S_PROTO, num_classes: int = DEFAULT_M,
                   noise_std: float = 0.5, length_range=(2, 6), num_samples: int = 2000,
                   seed: int = 0, prototype_seed: int = 0) -> TaskSpec:
    spec = TaskSpec(task_id, tuple(inventory),
                    random_prototypes(inventory, feature_dim, s_proto, prototype_seed),
                    num_classes=num_classes, noise_std=noise_std,
                    length_range=tuple(length_range), num_samples=num_samples, seed=seed)
    spec.validate()
    return spec


def generate_task(spec: TaskSpec) -> Dataset:
    """Draw ``num_samples`` utterances; sample i uses its own stream seeded by (seed, i)."""
    spec.validate()
    inv = np.array(spec.inventory)
    protos = {s: p for s, p in spec.prototypes.items()}
    if spec.transform is not None or spec.bias is not None:
        W = spec.transform if spec.transform is not None else np.eye(spec.feature_dim)
        b = spec.bias if spec.bias is not None else np.zeros(spec.feature_dim)
        protos = {s: W @ p + b[:, None] for s, p in protos.items()}
    lo, hi = spec.length_range
    samples = []
    for i in range(spec.num_samples):
        rng = np.random.default_rng([spec.seed, i])
        U = int(rng.integers(lo, hi + 1))
        y = tuple(int(s) for s in rng.choice(inv, size=U))
        x = np.concatenate([protos[s] for s in y], axis=1)
        if spec.noise_std > 0:
            x = x + spec.noise_std * rng.standard_normal(x.shape)
        samples.append(Sample(x, y, spec.task_id, i))
    return Dataset(spec.feature_dim, spec.num_classes, samples, spec.task_id)


def derive_accent_task(base: TaskSpec, rotation_strength: float, seed: int,
                       task_id: str | None = None, bias_scale: float = 0.1) -> TaskSpec:
    """Same symbols, shifted acoustics.

    The map is ``(1 - s) I + s R`` with R a seeded random orthogonal matrix,
    plus a bias of size ``bias_scale * s``; it is composed after any transform
    the base task already has.
    """
    if not 0.0 <= rotation_strength <= 1.0:
        raise ConfigError(f"rotation_strength must lie in [0, 1], got {rotation_strength}")
    F = base.feature_dim
    rng = np.random.default_rng([seed, 7919])
    q, r = np.linalg.qr(rng.standard_normal((F, F)))
    R = q * np.sign(np.diag(r))
    s = float(rotation_strength)
    W = (1.0 - s) * np.eye(F) + s * R
    b = bias_scale * s * rng.standard_normal(F)
    if base.transform is not None:
        b = W @ (base.bias if base.bias is not None else np.zeros(F)) + b
        W = W @ base.transform
    elif base.bias is not None:
        b = W @ base.bias + b
    return replace(base, task_id=task_id or f"{base.task_id}-accent", transform=W, bias=b, seed=seed)


def derive_newwords_task(base: TaskSpec, new_symbols, seed: int, task_id: str | None = None) -> TaskSpec:
    """Base inventory plus ``new_symbols`` with fresh prototypes; no accent transform."""
    new = tuple(sorted(int(s) for s in new_symbols))
    overlap = set(new) & set(base.inventory)
    if overlap:
        raise ConfigError(f"new symbols {sorted(overlap)} already in the base inventory")
    out_of_range = [s for s in new if not 1 <= s < base.num_classes]
    if out_of_range:
        raise ConfigError(f"new symbols {out_of_range} outside [1, {base.num_classes - 1}]")
    shape = next(iter(base.prototypes.values())).shape
    protos = dict(base.prototypes)
    protos.update(random_prototypes(new, shape[0], shape[1], seed=seed))
    return replace(base, task_id=task_id or f"{base.task_id}-newwords",
                   inventory=tuple(sorted(base.inventory + new)), prototypes=protos,
                   transform=None, bias=None, seed=seed)


# -- ILAD1 ----------------------------------------------------------------

def dataset_to_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(DATA_MAGIC)
    buf.write(struct.pack("<4I", DATA_VERSION, ds.feature_dim, ds.num_classes, len(ds.samples)))
    for smp in ds.samples:
        S = smp.x.shape[1]
        buf.write(struct.pack("<2I", S, len(smp.y)))
        buf.write(np.ascontiguousarray(smp.x, dtype="<f8").tobytes())
        buf.write(np.asarray(smp.y, dtype="<i4").tobytes())
    return buf.getvalue()


def dataset_from_bytes(data: bytes, task_id: str = "") -> Dataset:
    n = len(data)

    def need(pos, k, what):
        if pos + k > n:
            raise DataFormatError(f"unexpected end of file while reading {what}", pos)

    need(0, 4, "magic")
    if data[:4] != DATA_MAGIC:
        raise DataFormatError("bad magic: not an ILAD1 dataset", 0)
    need(4, 16, "header")
    version, F, M, N = struct.unpack_from("<4I", data, 4)
    if version != DATA_VERSION:
        raise DataFormatError(f"unsupported dataset version {version}", 4)
    if F == 0:
        raise DataFormatError("feature dimension F must be positive", 8)
    pos = 20
    samples = []
    for i in range(N):
        need(pos, 8, f"sample {i} header")
        S, U = struct.unpack_from("<2I", data, pos)
        if S * F * 8 + U * 4 > n - pos - 8:
            if S * F > n or U > n:
                raise DataFormatError(f"dimension overflow in sample {i}: S={S}, U={U}", pos)
            raise DataFormatError(f"unexpected end of file at offset {n} in sample {i}", n)
        pos += 8
        x = np.frombuffer(data, dtype="<f8", count=S * F, offset=pos).astype(np.float64).reshape(F, S)
        pos += 8 * S * F
        y = np.frombuffer(data, dtype="<i4", count=U, offset=pos)
        pos += 4 * U
        if np.any(y < 0) or np.any(y >= M):
            raise DataFormatError(f"sample {i} has label ids outside [0, {M})", pos - 4 * U)
        samples.append(Sample(x, tuple(int(v) for v in y), task_id, i))
    if pos != n:
        raise DataFormatError("trailing bytes after the last sample", pos)
    return Dataset(F, M, samples, task_id)


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def read_dataset(path) -> Dataset:
    path = Path(path)
    return dataset_from_bytes(path.read_bytes(), task_id=path.stem)


_BASE_KEYS = {"task_id", "inventory", "feature_dim", "s_proto", "num_classes", "noise_std",
              "length_range", "num_samples", "seed", "prototype_seed"}


def task_from_recipe(d: dict) -> TaskSpec:
    """Build a TaskSpec from either a full spec or a short recipe.

    Recipes name a family and its parameters::

        {"recipe": "base", "noise_std": 1.2, "seed": 1, "prototype_seed": 0}
        {"recipe": "accent", "base": {...}, "rotation_strength": 0.5, "seed": 2}
        {"recipe": "newwords", "base": {...}, "new_symbols": [9, 10, 11, 12], "seed": 3}

    ``base`` is itself a recipe or spec.  Derived recipes accept
    ``num_samples``, ``sample_seed`` and ``task_id`` overrides, which is how
    a test split of the same task is described.
    """
    d = dict(d)
    kind = d.pop("recipe", None)
    if kind is None:
        return TaskSpec.from_dict(d)
    try:
        if kind == "base":
            unknown = set(d) - _BASE_KEYS
            if unknown:
                raise ConfigError(f"unknown base recipe keys {sorted(unknown)}")
            if "inventory" in d:
                d["inventory"] = tuple(d["inventory"])
            return make_base_task(**d)
        overrides = {k: d.pop(k) for k in ("num_samples", "sample_seed", "task_id") if k in d}
        if "base" not in d:
            raise ConfigError(f"{kind} recipe needs a 'base' task")
        base = task_from_recipe(d.pop("base"))
        if kind == "accent":
            spec = derive_accent_task(base, float(d.pop("rotation_strength")), int(d.pop("seed")),
                                      bias_scale=float(d.pop("bias_scale", 0.1)))
        elif kind == "newwords":
            spec = derive_newwords_task(base, d.pop("new_symbols", NEW_WORDS), int(d.pop("seed")))
        else:
            raise ConfigError(f"unknown recipe {kind!r}; expected base, accent or newwords")
        if d:
            raise ConfigError(f"unknown {kind} recipe keys {sorted(d)}")
    except KeyError as e:
        raise ConfigError(f"{kind} recipe is missing {e}") from None
    except TypeError as e:
        raise ConfigError(f"malformed {kind} recipe: {e}") from None
    if "sample_seed" in overrides:
        spec = replace(spec, seed=int(overrides["sample_seed"]))
    if "num_samples" in overrides:
        spec = replace(spec, num_samples=int(overrides["num_samples"]))
    if "task_id" in overrides:
        spec = replace(spec, task_id=str(overrides["task_id"]))
    spec.validate()
    return spec


def load_task_spec(path) -> TaskSpec:
    """Read a JSON task spec or recipe (see :func:`task_from_recipe`)."""
    try:
        return task_from_recipe(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
