"""Synthetic cross-market dataset generator.

One shared latent-factor space drives preferences in every market, so the
dense source markets genuinely carry ranking signal for the sparse target
markets — the property the whole pipeline is built to exploit. Each target
user holds out two liked-but-unseen items: one becomes the valid positive,
one the test positive, each hidden inside a candidate list of uniform and
hard (high-preference) negatives. Fully deterministic given the seed.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import RunFile, write_run
from .util import ConfigError, atomic_write_text, fmt, stage_seed

_HARD_NEGATIVES = 10


@dataclass(frozen=True)
class MarketSpec:
    n_users: int
    interactions_per_user: int
    item_coverage: float = 1.0

    def __post_init__(self):
        if self.n_users < 1 or self.interactions_per_user < 2:
            raise ConfigError("market needs users and at least 2 interactions each")
        if not 0 < self.item_coverage <= 1:
            raise ConfigError("item_coverage must lie in (0, 1]")


def _default_markets() -> dict[str, MarketSpec]:
    return {
        "s1": MarketSpec(800, 24, 0.80),
        "s2": MarketSpec(400, 20, 0.70),
        "s3": MarketSpec(300, 18, 0.60),
        "t1": MarketSpec(200, 8, 0.60),
        "t2": MarketSpec(220, 8, 0.65),
    }


@dataclass(frozen=True)
class SynthConfig:
    out_dir: str
    seed: int = 0
    n_items: int = 350
    dim: int = 8
    markets: Mapping[str, MarketSpec] = field(default_factory=_default_markets)
    targets: tuple[str, ...] = ("t1", "t2")
    eval_users: int = 120
    n_candidates: int = 100
    temperature: float = 3.0

    def __post_init__(self):
        for t in self.targets:
            if t not in self.markets:
                raise ConfigError(f"target {t!r} missing from markets")
        if self.n_candidates < 2:
            raise ConfigError("n_candidates must be at least 2")
        for name, spec in self.markets.items():
            pool = int(round(spec.item_coverage * self.n_items))
            need = spec.interactions_per_user + 2 + _HARD_NEGATIVES
            if name in self.targets:
                need += self.n_candidates
            if pool < need:
                raise ConfigError(
                    f"market {name!r} pool of {pool} items cannot host "
                    f"{need} interactions+candidates per user")


def synth_config_from_dict(payload: Mapping) -> SynthConfig:
    payload = dict(payload)
    allowed = {f.name for f in dataclasses.fields(SynthConfig)}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
    if "markets" in payload:
        markets = {}
        for name, spec in payload["markets"].items():
            extra = set(spec) - {f.name for f in dataclasses.fields(MarketSpec)}
            if extra:
                raise ConfigError(f"unknown market keys for {name!r}: {sorted(extra)}")
            markets[name] = MarketSpec(**spec)
        payload["markets"] = markets
    if "targets" in payload:
        payload["targets"] = tuple(payload["targets"])
    return SynthConfig(**payload)


def _item_id(idx: int) -> str:
    return f"I{idx:04d}"


def _user_id(market: str, idx: int) -> str:
    return f"{market}U{idx:04d}"


def generate(config: SynthConfig) -> dict:
    """Write the per-market TSV files plus a ground-truth meta JSON;
    returns the meta payload."""
    out = Path(config.out_dir)
    rng_items = np.random.default_rng(stage_seed(config.seed, "synth", "items"))
    factors = rng_items.normal(0.0, 1.0, (config.n_items, config.dim))
    factors /= config.dim ** 0.25

    meta_markets: dict[str, dict] = {}
    for market in sorted(config.markets):
        spec = config.markets[market]
        rng = np.random.default_rng(stage_seed(config.seed, "synth", market))
        pool = np.sort(rng.choice(config.n_items,
                                  int(round(spec.item_coverage * config.n_items)),
                                  replace=False))
        is_target = market in config.targets
        train_rows: list[str] = []
        core_rows: list[str] = []
        valid_qrel: list[str] = []
        test_qrel: list[str] = []
        valid_entries: list[tuple[str, tuple[str, ...]]] = []
        test_entries: list[tuple[str, tuple[str, ...]]] = []
        users_with_items = 0
        eval_count = 0

        for uidx in range(spec.n_users):
            user = _user_id(market, uidx)
            u_vec = rng.normal(0.0, 1.0, config.dim) / config.dim ** 0.25
            pref = factors[pool] @ u_vec
            noisy = pref * config.temperature + rng.gumbel(size=len(pool))
            ranked = pool[np.argsort(-noisy)]
            k = int(np.clip(rng.integers(spec.interactions_per_user - 3,
                                         spec.interactions_per_user + 4),
                            2, len(pool) - 2 - _HARD_NEGATIVES))
            history = ranked[:k]
            users_with_items += 1
            ratings = np.clip(np.round(3.0 + 1.2 * (factors[history] @ u_vec)
                                       + rng.normal(0.0, 0.4, k)), 1.0, 5.0)
            for item, rating in zip(history, ratings):
                train_rows.append(f"{user}\t{_item_id(item)}\t{fmt(rating)}")
            if k >= 5:
                for item, rating in zip(history, ratings):
                    core_rows.append(f"{user}\t{_item_id(item)}\t{fmt(rating)}")

            if is_target and eval_count < config.eval_users and k >= 3:
                eval_count += 1
                valid_pos, test_pos = ranked[k], ranked[k + 1]
                hard = ranked[k + 2:k + 2 + _HARD_NEGATIVES]
                held = set(history) | {valid_pos, test_pos} | set(hard)
                free = np.array([i for i in pool if i not in held])
                for positive, qrel_lines, entries in (
                        (valid_pos, valid_qrel, valid_entries),
                        (test_pos, test_qrel, test_entries)):
                    n_uniform = config.n_candidates - 1 - len(hard)
                    uniform = rng.choice(free, n_uniform, replace=False)
                    cands = np.concatenate([[positive], hard, uniform])
                    cands = cands[rng.permutation(len(cands))]
                    qrel_lines.append(f"{user}\t{_item_id(positive)}\t{fmt(5.0)}")
                    entries.append((user, tuple(_item_id(c) for c in cands)))

        mdir = out / market
        mdir.mkdir(parents=True, exist_ok=True)
        header = "userId\titemId\trating"
        atomic_write_text(mdir / "train.tsv",
                          "\n".join([header] + train_rows) + "\n")
        atomic_write_text(mdir / "train_5core.tsv",
                          "\n".join([header] + core_rows) + "\n")
        if is_target:
            atomic_write_text(mdir / "valid_qrel.tsv",
                              "\n".join([header] + valid_qrel) + "\n")
            atomic_write_text(mdir / "test_qrel.tsv",
                              "\n".join([header] + test_qrel) + "\n")
            write_run(RunFile(tuple(valid_entries)), mdir / "valid_run.tsv")
            write_run(RunFile(tuple(test_entries)), mdir / "test_run.tsv")

        meta_markets[market] = {
            "train": len(train_rows), "train_5core": len(core_rows),
            "valid_qrel": len(valid_qrel), "test_qrel": len(test_qrel),
            "users": users_with_items,
            "items": len({line.split("\t")[1] for line in train_rows}),
            "pool_size": int(len(pool)),
        }

    meta = {"seed": config.seed, "n_items": config.n_items, "dim": config.dim,
            "targets": list(config.targets), "markets": meta_markets}
    atomic_write_text(out / "synth_meta.json",
                      json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta
