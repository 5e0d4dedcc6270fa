"""A tiny self-contained vision-language model with attention capture.

Deterministic (seeded weights, greedy decoding, single-threaded ops) and
fast enough to run in tests, while behaving like the real thing where it
matters for trace export: the prompt is [image patch tokens][BOS + question
bytes], every layer is a causal transformer block, and the captured
attention rows are genuine softmax distributions over all prior positions,
so prompt-restricted sums obey 0 <= s_img + s_txt <= 1.

Model ids look like `toy:layers=4,dim=32,heads=2,seed=0`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

BOS = 256
EOS = 257
VOCAB = 258

IMAGE_SIDE = 16  # images are resized to IMAGE_SIDE x IMAGE_SIDE
PATCH = 4  # 4x4 patches -> 16 image tokens
MAX_SEQ = 512


@dataclass(frozen=True)
class ToyConfig:
    layers: int = 4
    dim: int = 32
    heads: int = 2
    seed: int = 0

    @classmethod
    def from_id(cls, model_id: str) -> "ToyConfig":
        spec = model_id.partition(":")[2]
        kwargs = {}
        if spec:
            for part in spec.split(","):
                key, _, value = part.partition("=")
                kwargs[key.strip()] = int(value)
        config = cls(**kwargs)
        if config.dim % config.heads:
            raise ValueError("dim must be divisible by heads")
        if config.layers < 1:
            raise ValueError("layers must be >= 1")
        return config

    @property
    def model_id(self) -> str:
        return f"toy:layers={self.layers},dim={self.dim},heads={self.heads},seed={self.seed}"


@dataclass
class GenerationResult:
    """Everything the exporter needs from one greedy generation."""

    answer_text: str
    layers: int
    img_tokens: int
    txt_tokens: int
    s_img: np.ndarray  # (T, L)
    s_txt: np.ndarray  # (T, L)

    @property
    def generated_count(self) -> int:
        return self.s_img.shape[0]


class _Block(torch.nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = torch.nn.LayerNorm(dim)
        self.ln2 = torch.nn.LayerNorm(dim)
        self.qkv = torch.nn.Linear(dim, 3 * dim)
        self.proj = torch.nn.Linear(dim, dim)
        self.mlp = torch.nn.Sequential(
            torch.nn.Linear(dim, 4 * dim), torch.nn.GELU(), torch.nn.Linear(4 * dim, dim)
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        seq, dim = x.shape
        head_dim = dim // self.heads
        q, k, v = self.qkv(self.ln1(x)).split(dim, dim=-1)
        q = q.view(seq, self.heads, head_dim).transpose(0, 1)
        k = k.view(seq, self.heads, head_dim).transpose(0, 1)
        v = v.view(seq, self.heads, head_dim).transpose(0, 1)
        scores = q @ k.transpose(-1, -2) / math.sqrt(head_dim)
        causal = torch.triu(torch.full((seq, seq), float("-inf")), diagonal=1)
        attn = torch.softmax(scores + causal, dim=-1)  # (heads, seq, seq)
        x = x + self.proj((attn @ v).transpose(0, 1).reshape(seq, dim))
        x = x + self.mlp(self.ln2(x))
        return x, attn


class ToyModel:
    def __init__(self, config: ToyConfig):
        self.config = config
        torch.manual_seed(config.seed)
        dim = config.dim
        self.token_emb = torch.nn.Embedding(VOCAB, dim)
        self.pos_emb = torch.nn.Embedding(MAX_SEQ, dim)
        self.patch_proj = torch.nn.Linear(PATCH * PATCH * 3, dim)
        self.blocks = torch.nn.ModuleList(_Block(dim, config.heads) for _ in range(config.layers))
        self.ln_out = torch.nn.LayerNorm(dim)
        self.head = torch.nn.Linear(dim, VOCAB)
        for module in (self.token_emb, self.pos_emb, self.patch_proj, self.blocks, self.ln_out, self.head):
            module.eval()

    @classmethod
    def from_id(cls, model_id: str) -> "ToyModel":
        return cls(ToyConfig.from_id(model_id))

    @property
    def model_id(self) -> str:
        return self.config.model_id

    def _image_tokens(self, image: Image.Image) -> torch.Tensor:
        small = image.convert("RGB").resize((IMAGE_SIDE, IMAGE_SIDE), Image.NEAREST)
        arr = np.asarray(small, dtype=np.float32) / 255.0  # (H, W, 3)
        grid = IMAGE_SIDE // PATCH
        patches = (
            arr.reshape(grid, PATCH, grid, PATCH, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(grid * grid, PATCH * PATCH * 3)
        )
        return self.patch_proj(torch.from_numpy(patches))

    @staticmethod
    def _text_ids(question: str) -> list[int]:
        return [BOS] + list(question.encode("utf-8"))

    def generate(self, image: Image.Image, question: str, max_tokens: int) -> GenerationResult:
        """Greedy decoding with per-step, per-layer attention capture.

        For generated token t, the recorded row is the attention of the
        position that predicts it, head-averaged, restricted to prompt
        columns (generated positions are excluded from both sums).
        """
        img_emb = self._image_tokens(image)
        n_img = img_emb.shape[0]
        text_ids = self._text_ids(question)
        n_txt = len(text_ids)
        if n_img + n_txt + max_tokens > MAX_SEQ:
            raise ValueError(f"prompt of {n_img + n_txt} tokens + {max_tokens} exceeds {MAX_SEQ}")

        generated: list[int] = []
        s_img_rows: list[list[float]] = []
        s_txt_rows: list[list[float]] = []
        with torch.inference_mode():
            for _ in range(max_tokens):
                ids = torch.tensor(text_ids + generated, dtype=torch.long)
                x = torch.cat([img_emb, self.token_emb(ids)], dim=0)
                x = x + self.pos_emb(torch.arange(x.shape[0]))
                img_sums, txt_sums = [], []
                for block in self.blocks:
                    x, attn = block(x)
                    row = attn[:, -1, :].mean(dim=0)  # head-averaged, last position
                    img_sums.append(float(row[:n_img].sum()))
                    txt_sums.append(float(row[n_img : n_img + n_txt].sum()))
                logits = self.head(self.ln_out(x[-1]))
                token = int(torch.argmax(logits))
                generated.append(token)
                s_img_rows.append(img_sums)
                s_txt_rows.append(txt_sums)
                if token == EOS:
                    break

        answer = bytes(t for t in generated if t < 256).decode("utf-8", errors="replace")
        return GenerationResult(
            answer_text=answer,
            layers=self.config.layers,
            img_tokens=n_img,
            txt_tokens=n_txt,
            s_img=np.asarray(s_img_rows, dtype=np.float64),
            s_txt=np.asarray(s_txt_rows, dtype=np.float64),
        )
