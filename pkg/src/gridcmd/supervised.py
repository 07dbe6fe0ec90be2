"""Supervised training of the sub-goal instruction generator on demo sets.

Teacher-forced cross entropy over target tokens (eos included, pad masked),
validation split by episode so macro steps of one layout never leak across
the split, best-validation checkpointing by sequence exact match.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .expert import DemoSet
from .grammar import BOS, EOS, PAD, is_grammatical, detokenize
from .models import ArchConfig, GENERATOR, GeneratorNet, ParamStore, init_params, preprocess

MAX_TARGET_LEN = 6  # longest sentence (5 words) + eos


@dataclass(frozen=True)
class SupervisedConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    grad_clip_norm: float = 1.0
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.val_fraction < 0.5):
            raise ValueError("val_fraction must be in (0, 0.5)")
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size, learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer: {self.optimizer!r}")

    def to_json(self) -> dict:
        d = self.__dict__.copy()
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_token_accuracy: float
    val_exact_match: float

    def to_json(self) -> dict:
        return self.__dict__.copy()


@dataclass
class GenMetrics:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1


@dataclass
class EvalStats:
    token_accuracy: float
    exact_match: float
    ungrammatical: float
    n_records: int


class _Tensors:
    """Demo records as training tensors (planes, padded targets, lengths)."""

    def __init__(self, records, arch: ArchConfig):
        if not records:
            raise ValueError("empty record list")
        for r in records:
            if r.observation.shape != (arch.obs_width, arch.obs_height, 3):
                raise ValueError(
                    f"demo observation shape {r.observation.shape} does not match arch"
                )
        self.planes = torch.from_numpy(np.stack([preprocess(r.observation) for r in records]))
        targets = [list(r.instruction.tokens) + [EOS] for r in records]
        self.lengths = torch.tensor([len(t) for t in targets])
        T = max(len(t) for t in targets)
        self.targets = torch.full((len(targets), T), PAD, dtype=torch.long)
        for i, t in enumerate(targets):
            self.targets[i, : len(t)] = torch.tensor(t)
        self.inputs = torch.cat(
            [torch.full((len(targets), 1), BOS, dtype=torch.long), self.targets[:, :-1]], dim=1
        )

    def __len__(self):
        return self.planes.shape[0]


def _batch_loss(net: GeneratorNet, data: _Tensors, idx) -> torch.Tensor:
    emb = net.encoder(data.planes[idx])
    logits = net.step_logits(emb, data.inputs[idx])
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        data.targets[idx].reshape(-1),
        ignore_index=PAD,
    )


def dataset_loss(store: ParamStore, records) -> float:
    """Mean per-token NLL over a record list (no gradient)."""
    data = _Tensors(records, store.arch)
    with torch.no_grad():
        return float(_batch_loss(store.module, data, slice(None)))


def greedy_decode_batch(store: ParamStore, planes: torch.Tensor, max_len: int = 7) -> list:
    """Batched greedy decode; returns one token list (no bos/eos) per row."""
    net: GeneratorNet = store.module
    with torch.no_grad():
        emb = net.encoder(planes)
        h, c = net.initial_state(emb)
        B = planes.shape[0]
        token = torch.full((B, 1), BOS, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        out = [[] for _ in range(B)]
        for _ in range(max_len):
            step_out, (h, c) = net.rnn(net.embed(token) + emb.unsqueeze(1), (h, c))
            nxt = net.out(step_out[:, 0]).argmax(dim=-1)
            for i in range(B):
                if not done[i]:
                    if int(nxt[i]) == EOS:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
            if bool(done.all()):
                break
            token = nxt.unsqueeze(1)
    return out


def _decode_stats(store: ParamStore, data: _Tensors) -> tuple:
    """(token accuracy, exact match, ungrammatical fraction) via greedy decode
    plus teacher-forced argmax."""
    net: GeneratorNet = store.module
    with torch.no_grad():
        emb = net.encoder(data.planes)
        logits = net.step_logits(emb, data.inputs)
        pred = logits.argmax(dim=-1)
        mask = data.targets != PAD
        token_acc = float((pred[mask] == data.targets[mask]).float().mean())
    decoded = greedy_decode_batch(store, data.planes)
    exact = ungram = 0
    for i, toks in enumerate(decoded):
        target = [int(t) for t in data.targets[i, : data.lengths[i] - 1]]  # strip eos
        exact += toks == target
        ungram += not is_grammatical(detokenize(toks))
    n = len(decoded)
    return token_acc, exact / n, ungram / n


def split_by_episode(demos: DemoSet, val_fraction: float, seed: int) -> tuple:
    """Seeded episode-level split -> (train_records, val_records)."""
    episodes = sorted(demos.episodes().items())
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(episodes))
    n_val = max(1, int(round(val_fraction * len(episodes))))
    if len(episodes) == 1:
        # degenerate single-episode set: validate on the training episode
        recs = episodes[0][1]
        return list(recs), list(recs)
    n_val = min(n_val, len(episodes) - 1)
    val_ids = {episodes[i][0] for i in order[:n_val]}
    train = [r for ep, recs in episodes if ep not in val_ids for r in recs]
    val = [r for ep, recs in episodes if ep in val_ids for r in recs]
    return train, val


def train_generator(
    demos: DemoSet, arch: ArchConfig, cfg: SupervisedConfig, on_epoch=None
) -> tuple:
    """Minimize teacher-forced per-token NLL; returns the best-validation
    ParamStore and per-epoch GenMetrics."""
    if not demos.records:
        raise ValueError("demo set is empty")
    train_recs, val_recs = split_by_episode(demos, cfg.val_fraction, cfg.seed)
    train = _Tensors(train_recs, arch)
    val = _Tensors(val_recs, arch)

    store = init_params(arch, GENERATOR, cfg.seed)
    params = list(store.module.parameters())
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(
            params,
            lr=cfg.learning_rate,
            betas=cfg.adam_betas,
            eps=cfg.adam_eps,
            weight_decay=cfg.weight_decay,
        )
    else:
        opt = torch.optim.SGD(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    rng = np.random.default_rng(cfg.seed + 1)
    metrics = GenMetrics()
    best_exact, best_state = -1.0, None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
            loss = _batch_loss(store.module, train, idx)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm)
            opt.step()
            losses.append(float(loss.detach()))
        store.assert_finite()
        token_acc, exact, _ = _decode_stats(store, val)
        stats = EpochStats(epoch, float(np.mean(losses)), token_acc, exact)
        metrics.epochs.append(stats)
        if exact > best_exact:
            best_exact = exact
            metrics.best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in store.module.state_dict().items()}
        if on_epoch is not None:
            on_epoch(stats)
    if best_state is not None:
        store.module.load_state_dict(best_state)
    return store, metrics


def eval_generator(store: ParamStore, heldout: DemoSet) -> EvalStats:
    """Greedy decode every record and compare against the expert instruction."""
    data = _Tensors(heldout.records, store.arch)
    token_acc, exact, ungram = _decode_stats(store, data)
    return EvalStats(token_acc, exact, ungram, len(heldout.records))
