"""Differentiable function approximators and their parameter store.

Three roles built from shared pieces:
  - state encoder: 3-layer CNN (16/32/64 filters, kernel 2, stride 1, no
    padding, ReLU) over feature planes derived from the integer observation,
    flattened and projected to the image embedding
  - generator: image embedding conditions the initial state of an LSTM that
    decodes an instruction token by token
  - controller: image embedding concatenated with the final hidden state of
    an instruction LSTM, through two 64-wide FC layers into a 7-way action
    head and a scalar value head

All parameters are float32 and live on the CPU. Initialization is uniform
in +-1/sqrt(fan_in) from a seeded generator, so stores are reproducible.
Checkpoints are a directory of manifest.json plus params.bin (concatenated
little-endian float32 in manifest order); round-trips are bitwise exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grammar import BOS, EOS, VOCAB_SIZE

# One-hot / conjunction feature planes fed to the conv stack:
#   6 cell kinds, 3 door states, 18 door color-by-state conjunctions,
#   6 key colors, 4 agent facings, 1 carrying flag + 6 carried colors,
#   2 region masks (cells reachable from the agent / from the key)
INPUT_PLANES = 46

CHECKPOINT_FORMAT = "ckpt/1"

GENERATOR = "generator"
CONTROLLER = "controller"


class CheckpointError(ValueError):
    pass


class CorruptManifest(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


class TruncatedBlob(CheckpointError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    conv_channels: tuple = (16, 32, 64)
    kernel: int = 2
    embed_dim: int = 512
    rnn_hidden: int = 1024
    fc_dim: int = 64
    n_actions: int = 7
    vocab_size: int = VOCAB_SIZE
    scale: float = 1.0
    obs_width: int = 13
    obs_height: int = 13

    def __post_init__(self) -> None:
        if not (0.0 < self.scale <= 1.0):
            raise ValueError(f"scale must be in (0, 1], got {self.scale}")
        if min(self.embed_scaled, self.hidden_scaled) < 8:
            raise ValueError("scaled embedding/hidden dims must be >= 8")
        if self.obs_width < 4 or self.obs_height < 4:
            raise ValueError("observation too small for the conv stack")

    @property
    def embed_scaled(self) -> int:
        return int(round(self.embed_dim * self.scale))

    @property
    def hidden_scaled(self) -> int:
        return int(round(self.rnn_hidden * self.scale))

    @property
    def conv_out_hw(self) -> tuple:
        shrink = len(self.conv_channels) * (self.kernel - 1)
        return (self.obs_height - shrink, self.obs_width - shrink)

    def to_json(self) -> dict:
        return {
            "conv_channels": list(self.conv_channels),
            "kernel": self.kernel,
            "embed_dim": self.embed_dim,
            "rnn_hidden": self.rnn_hidden,
            "fc_dim": self.fc_dim,
            "n_actions": self.n_actions,
            "vocab_size": self.vocab_size,
            "scale": self.scale,
            "obs_width": self.obs_width,
            "obs_height": self.obs_height,
        }

    @staticmethod
    def from_json(obj: dict) -> "ArchConfig":
        return ArchConfig(
            conv_channels=tuple(obj["conv_channels"]),
            kernel=obj["kernel"],
            embed_dim=obj["embed_dim"],
            rnn_hidden=obj["rnn_hidden"],
            fc_dim=obj["fc_dim"],
            n_actions=obj["n_actions"],
            vocab_size=obj["vocab_size"],
            scale=obj["scale"],
            obs_width=obj["obs_width"],
            obs_height=obj["obs_height"],
        )

    @staticmethod
    def for_env(env_cfg, scale: float = 1.0) -> "ArchConfig":
        return ArchConfig(scale=scale, obs_width=env_cfg.width, obs_height=env_cfg.height)


def preprocess(obs: np.ndarray) -> np.ndarray:
    """Integer observation [W, H, 3] -> float feature planes [44, H, W].

    Categorical channels are exploded to one-hot planes, and the two
    bindings the tasks hinge on (key color, door color x door state) get
    explicit conjunction planes.
    """
    kind = obs[..., 0].astype(np.int64)
    color = obs[..., 1].astype(np.int64)
    third = obs[..., 2].astype(np.int64)
    is_door = kind == 2
    is_key = kind == 3
    is_agent = kind == 5
    planes = np.zeros((INPUT_PLANES,) + kind.shape, dtype=np.float32)
    for k in range(6):
        planes[k] = kind == k
    for s in range(3):
        planes[6 + s] = is_door & (third == s)
        for c in range(6):
            planes[9 + 6 * s + c] = is_door & (third == s) & (color == c)
    for c in range(6):
        planes[27 + c] = is_key & (color == c)
    for d in range(4):
        planes[33 + d] = is_agent & (third % 4 == d)
    carrying = is_agent & (third >= 4)
    planes[37] = carrying
    for c in range(6):
        planes[38 + c] = carrying & (third // 4 - 1 == c)
    passable = (kind == 0) | (kind == 4) | (is_door & (third == 0))
    planes[44] = _region_mask(passable, is_agent)
    planes[45] = _region_mask(passable, is_key)
    return planes.transpose(0, 2, 1)


def _region_mask(passable: np.ndarray, seed_mask: np.ndarray) -> np.ndarray:
    """Cells reachable from the seed cells over passable terrain (iterative
    dilation; closed and locked doors block)."""
    reach = seed_mask.copy()
    while True:
        grown = reach.copy()
        grown[1:, :] |= reach[:-1, :]
        grown[:-1, :] |= reach[1:, :]
        grown[:, 1:] |= reach[:, :-1]
        grown[:, :-1] |= reach[:, 1:]
        grown &= passable | seed_mask
        if np.array_equal(grown, reach):
            return reach
        reach = grown


def preprocess_batch(obs_batch) -> torch.Tensor:
    return torch.from_numpy(np.stack([preprocess(o) for o in obs_batch]))


class StateEncoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        chans = (INPUT_PLANES,) + tuple(arch.conv_channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], arch.kernel) for i in range(len(arch.conv_channels))
        )
        h, w = arch.conv_out_hw
        self.proj = nn.Linear(arch.conv_channels[-1] * h * w, arch.embed_scaled)

    def forward(self, planes: torch.Tensor) -> torch.Tensor:
        x = planes
        for conv in self.convs:
            x = F.relu(conv(x))
        emb = self.proj(x.flatten(1))
        # standardize per sample: downstream consumers (tanh state injection,
        # concat with the language embedding) need a gain-independent scale
        return (emb - emb.mean(dim=-1, keepdim=True)) / torch.sqrt(
            emb.var(dim=-1, unbiased=False, keepdim=True) + 1e-5
        )


class GeneratorNet(nn.Module):
    """Observation -> instruction decoder (encoder-decoder)."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.encoder = StateEncoder(arch)
        self.embed = nn.Embedding(arch.vocab_size, arch.embed_scaled)
        self.init_h = nn.Linear(arch.embed_scaled, arch.hidden_scaled)
        self.init_c = nn.Linear(arch.embed_scaled, arch.hidden_scaled)
        self.rnn = nn.LSTM(arch.embed_scaled, arch.hidden_scaled, batch_first=True)
        self.out = nn.Linear(arch.hidden_scaled, arch.vocab_size)

    def initial_state(self, image_emb: torch.Tensor):
        h = torch.tanh(self.init_h(image_emb)).unsqueeze(0)
        c = torch.tanh(self.init_c(image_emb)).unsqueeze(0)
        return h.contiguous(), c.contiguous()

    def step_logits(self, image_emb: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits [B, T, V] for input token ids [B, T].

        The image embedding conditions the initial recurrent state and is
        also added to every input embedding so it stays available at late
        decode steps.
        """
        state = self.initial_state(image_emb)
        outputs, _ = self.rnn(self.embed(inputs) + image_emb.unsqueeze(1), state)
        return self.out(outputs)


class ControllerNet(nn.Module):
    """(observation, instruction) -> action logits and state value."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.encoder = StateEncoder(arch)
        self.embed = nn.Embedding(arch.vocab_size, arch.embed_scaled)
        self.rnn = nn.LSTM(arch.embed_scaled, arch.hidden_scaled, batch_first=True)
        self.fc1 = nn.Linear(arch.embed_scaled + arch.hidden_scaled, arch.fc_dim)
        self.fc2 = nn.Linear(arch.fc_dim, arch.fc_dim)
        self.pi = nn.Linear(arch.fc_dim, arch.n_actions)
        self.v = nn.Linear(arch.fc_dim, 1)

    def encode_language(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Final hidden state per sequence [B, H]; length-0 rows are zeros."""
        B = tokens.shape[0]
        hidden = torch.zeros(
            B, self.arch.hidden_scaled, dtype=self.fc1.weight.dtype, device=tokens.device
        )
        if tokens.shape[1] == 0 or int(lengths.max()) == 0:
            return hidden
        outputs, _ = self.rnn(self.embed(tokens))
        nonzero = lengths > 0
        idx = (lengths[nonzero] - 1).long()
        hidden[nonzero] = outputs[nonzero, idx]
        return hidden

    def heads(self, image_emb: torch.Tensor, lang_emb: torch.Tensor):
        x = F.relu(self.fc1(torch.cat([image_emb, lang_emb], dim=-1)))
        x = F.relu(self.fc2(x))
        return self.pi(x), self.v(x).squeeze(-1)

    def forward(self, planes: torch.Tensor, tokens: torch.Tensor, lengths: torch.Tensor):
        return self.heads(self.encoder(planes), self.encode_language(tokens, lengths))


@dataclass
class PolicyOutput:
    logits: torch.Tensor  # [n_actions]
    value: torch.Tensor  # scalar


class ParamStore:
    """Named float32 parameters for one model role, with its build recipe."""

    def __init__(self, arch: ArchConfig, role: str, rng_seed: int, module: nn.Module):
        self.arch = arch
        self.role = role
        self.rng_seed = rng_seed
        self.module = module

    def tensors(self):
        return dict(self.module.named_parameters())

    def names(self) -> list:
        return [n for n, _ in self.module.named_parameters()]

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def clone(self) -> "ParamStore":
        other = init_params(self.arch, self.role, self.rng_seed)
        other.module.load_state_dict(self.module.state_dict())
        return other

    def assert_finite(self) -> None:
        for name, p in self.module.named_parameters():
            if not torch.isfinite(p).all():
                raise FloatingPointError(f"non-finite values in parameter {name}")


def _build_module(arch: ArchConfig, role: str) -> nn.Module:
    if role == GENERATOR:
        return GeneratorNet(arch)
    if role == CONTROLLER:
        return ControllerNet(arch)
    raise ValueError(f"unknown role: {role!r}")


# Output heads start at zero: the untrained generator decodes from an exactly
# uniform softmax and the untrained policy is exactly uniform over actions.
_HEAD_MODULES = ("out", "pi", "v")


def init_params(arch: ArchConfig, role: str, seed: int) -> ParamStore:
    """Deterministic seeded init: uniform +-1/sqrt(fan_in) per tensor, with
    the output heads zeroed."""
    module = _build_module(arch, role)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.split(".")[0] in _HEAD_MODULES:
                p.zero_()
            else:
                fan_in = p.shape[1:].numel() if p.dim() > 1 else p.shape[0]
                bound = 1.0 / math.sqrt(fan_in)
                p.uniform_(-bound, bound, generator=gen)
    return ParamStore(arch, role, seed, module)


def _check_obs(store: ParamStore, obs: np.ndarray) -> None:
    expected = (store.arch.obs_width, store.arch.obs_height, 3)
    if tuple(obs.shape) != expected:
        raise ValueError(f"observation shape {obs.shape} != expected {expected}")


def encode_state(store: ParamStore, obs: np.ndarray) -> torch.Tensor:
    """Image embedding (length embed_dim * scale) for one observation."""
    _check_obs(store, obs)
    planes = preprocess_batch([obs]).to(next(store.module.parameters()).dtype)
    return store.module.encoder(planes)[0]


def decode_instruction(
    store: ParamStore,
    embedding: torch.Tensor,
    mode: str = "greedy",
    max_len: int = 7,
    rng: Optional[torch.Generator] = None,
) -> list:
    """Autoregressive decode from bos; stops at eos or max_len tokens.

    Returns content token ids (no bos/eos). Sampling mode draws from the
    softmax at each step using `rng`.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode: {mode!r}")
    net: GeneratorNet = store.module
    with torch.no_grad():
        emb = embedding.unsqueeze(0)
        h, c = net.initial_state(emb)
        token = torch.tensor([[BOS]])
        out_tokens = []
        for _ in range(max_len):
            step_out, (h, c) = net.rnn(net.embed(token) + emb.unsqueeze(1), (h, c))
            logits = net.out(step_out[0, 0])
            if mode == "greedy":
                nxt = int(torch.argmax(logits))
            else:
                probs = F.softmax(logits, dim=-1)
                nxt = int(torch.multinomial(probs, 1, generator=rng))
            if nxt == EOS:
                break
            out_tokens.append(nxt)
            token = torch.tensor([[nxt]])
    return out_tokens


def instruction_step_distributions(
    store: ParamStore, embedding: torch.Tensor, targets
) -> torch.Tensor:
    """Teacher-forced per-step log-softmax over the vocabulary [T, V]."""
    targets = list(targets)
    if any(t < 0 or t >= store.arch.vocab_size for t in targets):
        raise ValueError("target token id out of range")
    net: GeneratorNet = store.module
    dtype = next(net.parameters()).dtype
    inputs = torch.tensor([[BOS] + targets[:-1]])
    logits = net.step_logits(embedding.unsqueeze(0).to(dtype), inputs)[0]
    return F.log_softmax(logits, dim=-1)


def instruction_logprobs(store: ParamStore, embedding: torch.Tensor, targets) -> torch.Tensor:
    """Per-step log-probabilities of the target tokens (eos included) [T]."""
    dists = instruction_step_distributions(store, embedding, targets)
    idx = torch.tensor(list(targets))
    return dists.gather(1, idx.unsqueeze(1)).squeeze(1)


def encode_instruction(store: ParamStore, tokens) -> torch.Tensor:
    """Language embedding: the instruction LSTM's final hidden state."""
    tokens = list(tokens)
    if any(t < 0 or t >= store.arch.vocab_size for t in tokens):
        raise ValueError("token id out of range")
    net: ControllerNet = store.module
    batch = torch.tensor([tokens], dtype=torch.long) if tokens else torch.zeros(1, 0, dtype=torch.long)
    lengths = torch.tensor([len(tokens)])
    return net.encode_language(batch, lengths)[0]


def policy_forward(store: ParamStore, obs: np.ndarray, tokens) -> PolicyOutput:
    """Action logits and value for one (observation, instruction) pair."""
    _check_obs(store, obs)
    net: ControllerNet = store.module
    planes = preprocess_batch([obs]).to(next(net.parameters()).dtype)
    image_emb = net.encoder(planes)
    lang_emb = encode_instruction(store, tokens).unsqueeze(0)
    logits, value = net.heads(image_emb, lang_emb)
    return PolicyOutput(logits=logits[0], value=value[0])


def save_checkpoint(store: ParamStore, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = store.tensors()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "arch": store.arch.to_json(),
        "role": store.role,
        "rng_seed": store.rng_seed,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors.items()],
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    with (path / "params.bin").open("wb") as f:
        for t in tensors.values():
            f.write(t.detach().numpy().astype("<f4").tobytes())


def load_checkpoint(path) -> ParamStore:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptManifest(f"unreadable manifest in {path}: {e}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CorruptManifest(f"unknown checkpoint format {manifest.get('format')!r}")
    arch = ArchConfig.from_json(manifest["arch"])
    store = init_params(arch, manifest["role"], manifest["rng_seed"])
    tensors = store.tensors()
    entries = manifest["tensors"]
    if [e["name"] for e in entries] != list(tensors):
        raise ShapeMismatch("tensor names do not match the architecture")
    for e in entries:
        if tuple(e["shape"]) != tuple(tensors[e["name"]].shape):
            raise ShapeMismatch(
                f"{e['name']}: manifest {e['shape']} != arch {list(tensors[e['name']].shape)}"
            )
    blob = (path / "params.bin").read_bytes()
    total = sum(t.numel() for t in tensors.values())
    if len(blob) != 4 * total:
        raise TruncatedBlob(f"params.bin holds {len(blob)} bytes, expected {4 * total}")
    offset = 0
    with torch.no_grad():
        for t in tensors.values():
            n = t.numel()
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(tuple(t.shape))
            t.copy_(torch.from_numpy(arr.copy()))
            offset += 4 * n
    return store


def to_double(store: ParamStore) -> ParamStore:
    """Float64 deep copy (gradient checks need the extra precision)."""
    other = store.clone()
    other.module.double()
    return other
