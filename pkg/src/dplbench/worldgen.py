"""Synthetic multi-domain worlds with known ground truth.

A class is a prototype vector; a domain is an orthogonal rotation plus an
offset applied to ``prototype + noise``. Captions are token-id tuples made of
three fixed template tokens, a class token and, optionally, a domain
attribute token.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .numkit import Rng

TEMPLATE_LEN = 3


@dataclass(frozen=True)
class WorldConfig:
    num_classes: int = 8
    input_dim: int = 16
    num_pretrain_domains: int = 10
    num_benchmark_domains: int = 4
    class_separation: float = 3.0
    noise_sigma: float = 0.6
    # rotations are QR(I + strength * G); large strength approaches Haar
    pretrain_rotation: float = 0.1
    benchmark_rotation: float = 0.1
    pretrain_offset: float = 2.0
    benchmark_offset: float = 2.0
    # common style shift shared by all benchmark domains
    benchmark_shared_offset: float = 3.0
    # offsets live in a shared low-rank "style" subspace; 0 means full rank
    style_rank: int = 0
    benchmark_in_pool: bool = False
    max_vocab: int = 256

    @property
    def num_domains(self) -> int:
        return self.num_pretrain_domains + self.num_benchmark_domains


@dataclass(frozen=True)
class Vocab:
    template: tuple[int, ...]
    classes: tuple[int, ...]
    domains: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.template) + len(self.classes) + len(self.domains)


@dataclass
class DomainTransform:
    domain_id: int
    rotation: np.ndarray
    offset: np.ndarray
    in_pretrain_corpus: bool

    def apply(self, z: np.ndarray) -> np.ndarray:
        return z @ self.rotation.T + self.offset

    def invert(self, x: np.ndarray) -> np.ndarray:
        return (x - self.offset) @ self.rotation


@dataclass
class WorldSpec:
    config: WorldConfig
    seed: int
    prototypes: np.ndarray
    domains: list[DomainTransform]
    vocab: Vocab

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def input_dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def pretrain_domains(self) -> list[int]:
        return [d.domain_id for d in self.domains if d.in_pretrain_corpus]

    @property
    def benchmark_domains(self) -> list[int]:
        """Benchmark domains are always the last ``num_benchmark_domains``."""
        return list(range(self.config.num_pretrain_domains, self.config.num_domains))

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "seed": self.seed,
            "prototypes": self.prototypes.tolist(),
            "domains": [
                {
                    "domain_id": d.domain_id,
                    "rotation": d.rotation.tolist(),
                    "offset": d.offset.tolist(),
                    "in_pretrain_corpus": d.in_pretrain_corpus,
                }
                for d in self.domains
            ],
            "vocab": asdict(self.vocab),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WorldSpec":
        return cls(
            config=WorldConfig(**data["config"]),
            seed=data["seed"],
            prototypes=np.array(data["prototypes"], dtype=np.float64),
            domains=[
                DomainTransform(
                    d["domain_id"],
                    np.array(d["rotation"], dtype=np.float64),
                    np.array(d["offset"], dtype=np.float64),
                    d["in_pretrain_corpus"],
                )
                for d in data["domains"]
            ],
            vocab=Vocab(**{k: tuple(v) for k, v in data["vocab"].items()}),
        )

    def to_bytes(self) -> bytes:
        parts = [json.dumps(asdict(self.config), sort_keys=True).encode(), self.prototypes.tobytes()]
        for d in self.domains:
            parts += [d.rotation.tobytes(), d.offset.tobytes(), bytes([d.in_pretrain_corpus])]
        return b"".join(parts)


@dataclass
class DomainDataset:
    domain_id: int
    x: np.ndarray
    y: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "DomainDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return DomainDataset(self.domain_id, self.x[idx], self.y[idx], self.seed)

    def to_dict(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "seed": self.seed,
            "x": self.x.tolist(),
            "y": self.y.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DomainDataset":
        x = np.array(data["x"], dtype=np.float64).reshape(len(data["y"]), -1)
        return cls(data["domain_id"], x, np.array(data["y"], dtype=np.int64), data["seed"])


@dataclass
class CaptionedSample:
    x: np.ndarray
    caption: tuple[int, ...]


@dataclass
class CaptionCorpus:
    """Column-wise storage of captioned samples used for pretraining."""

    x: np.ndarray
    captions: list[tuple[int, ...]]
    labels: np.ndarray
    domain_ids: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.captions)

    def __getitem__(self, i) -> CaptionedSample:
        return CaptionedSample(self.x[i], self.captions[i])


def _random_rotation(rng: Rng, d: int, strength: float) -> np.ndarray:
    g = np.eye(d) + strength * rng.normal(d * d).reshape(d, d)
    q, r = np.linalg.qr(g)
    # sign fix makes the factorization unique and keeps weak rotations near I
    return q * np.sign(np.diag(r))


def make_world(config: WorldConfig = WorldConfig(), seed: int = 0) -> WorldSpec:
    k, d = config.num_classes, config.input_dim
    if k < 2 or d < 2 or config.num_domains < 2:
        raise ConfigError("need at least 2 classes, 2 input dims and 2 domains")
    if config.num_benchmark_domains < 0 or config.num_pretrain_domains < 0:
        raise ConfigError("domain counts must be non-negative")
    if TEMPLATE_LEN + k + config.num_domains > config.max_vocab:
        raise ConfigError(
            f"vocabulary of {TEMPLATE_LEN + k + config.num_domains} tokens exceeds "
            f"capacity {config.max_vocab}"
        )
    if config.noise_sigma < 0 or config.class_separation <= 0:
        raise ConfigError("noise_sigma must be >= 0 and class_separation > 0")
    root = Rng(seed, ("world",))

    protos = root.spawn("prototypes").normal(k * d).reshape(k, d)
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    protos *= config.class_separation

    rank = config.style_rank or d
    if not 0 < rank <= d:
        raise ConfigError("style_rank must lie in [0, input_dim]")
    basis, _ = np.linalg.qr(root.spawn("style").normal(d * rank).reshape(d, rank))

    shared = root.spawn("shared").normal(rank)
    shared = config.benchmark_shared_offset * (basis @ (shared / max(np.linalg.norm(shared), 1e-12)))

    domains = []
    for i in range(config.num_domains):
        bench = i >= config.num_pretrain_domains
        drng = root.spawn("domain", i)
        rot = _random_rotation(
            drng, d, config.benchmark_rotation if bench else config.pretrain_rotation
        )
        scale = config.benchmark_offset if bench else config.pretrain_offset
        coef = drng.normal(rank)
        offset = scale * (basis @ (coef / max(np.linalg.norm(coef), 1e-12)))
        if bench:
            offset = offset + shared
        in_pool = (not bench) or config.benchmark_in_pool
        domains.append(DomainTransform(i, rot, offset, in_pool))

    base = TEMPLATE_LEN
    vocab = Vocab(
        template=tuple(range(TEMPLATE_LEN)),
        classes=tuple(range(base, base + k)),
        domains=tuple(range(base + k, base + k + config.num_domains)),
    )
    return WorldSpec(config, seed, protos, domains, vocab)


def sample_domain_dataset(
    world: WorldSpec, domain_id: int, n: int, seed: int, stream: str = "samples"
) -> DomainDataset:
    """Draw ``n`` labelled samples.

    The (label, noise) stream is keyed by ``(seed, stream)`` only, so equal
    seeds give the same latent draws in every domain. Distinct ``stream``
    names keep pretraining, benchmark and validation data disjoint.
    """
    if not 0 <= domain_id < len(world.domains):
        raise IndexError(f"invalid domain id {domain_id}")
    if n < 1:
        raise ContractError("need n >= 1")
    rng = Rng(seed, (stream,))
    y = rng.integers(0, world.num_classes, size=n)
    eps = rng.normal(n * world.input_dim, world.config.noise_sigma).reshape(n, world.input_dim)
    x = world.domains[domain_id].apply(world.prototypes[y] + eps)
    return DomainDataset(domain_id, x, y.astype(np.int64), seed)


def make_caption(world: WorldSpec, class_id: int, domain_id: int | None = None) -> tuple[int, ...]:
    if not 0 <= class_id < world.num_classes:
        raise IndexError(f"invalid class id {class_id}")
    tokens = world.vocab.template + (world.vocab.classes[class_id],)
    if domain_id is not None:
        tokens += (world.vocab.domains[domain_id],)
    return tokens


def make_pretrain_corpus(
    world: WorldSpec, n_per_domain: int, seed: int, domain_token_prob: float = 0.5
) -> CaptionCorpus:
    """Captioned samples from every in-pool domain.

    Each caption names its domain with probability ``domain_token_prob``;
    the rest use the plain template so that template prompts stay
    in-distribution for the text tower.
    """
    xs, caps, ys, ds = [], [], [], []
    for dom in world.pretrain_domains:
        data = sample_domain_dataset(world, dom, n_per_domain, seed * 1000 + dom, "corpus")
        coin = Rng(seed, ("captions", dom)).random(n_per_domain)
        for x, y, c in zip(data.x, data.y, coin):
            xs.append(x)
            caps.append(make_caption(world, int(y), dom if c < domain_token_prob else None))
            ys.append(int(y))
            ds.append(dom)
    return CaptionCorpus(np.array(xs), caps, np.array(ys, dtype=np.int64), np.array(ds, dtype=np.int64))


def split_train_val(dataset: DomainDataset, fraction: float, seed: int):
    n = len(dataset)
    if not 0.0 < fraction < 1.0:
        raise ContractError("fraction must lie strictly between 0 and 1")
    if n < 2:
        raise ContractError("cannot split fewer than 2 samples")
    n_train = min(max(math.ceil(fraction * n - 1e-9), 1), n - 1)
    perm = Rng(seed, ("split", dataset.domain_id)).permutation(n)
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])


def bayes_predict(world: WorldSpec, domain_id: int, x: np.ndarray) -> np.ndarray:
    """Nearest prototype after undoing the domain transform."""
    z = world.domains[domain_id].invert(np.atleast_2d(x))
    d2 = ((z[:, None, :] - world.prototypes[None, :, :]) ** 2).sum(-1)
    return np.argmin(d2, axis=1)


def bayes_accuracy(world: WorldSpec, dataset: DomainDataset) -> float:
    return float(np.mean(bayes_predict(world, dataset.domain_id, dataset.x) == dataset.y))
