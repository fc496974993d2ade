"""Self-contained CPU backend used for tests and desk-scale experiments.

Everything runs in float64 on a 16x16 single-channel latent with an identity
codec, so results are exactly reproducible across machines. The denoiser is a
frozen randomly-initialized stack of 16 cross-attention layers whose noise
estimate is

    eps_hat = z_t / sqrt(1 - abar_t) + g(t) * B(conditionings)

with g(t) = sqrt(abar_t / (1 - abar_t)). Substituting the forward process
gives the residual eps - eps_hat = -g(t) * (z0 + B): the conditioning bias
has the time-independent optimum B* = -z0, reconstruction is exact at the
optimum, and the DDIM x0 prediction collapses to -B, so sampling is purely
conditioning-driven. The conditioning gain is strongest at the coarse
(lowest-resolution) layers and weakest at the fine ones, mirroring where
content versus detail is decided.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

from ..errors import BackendError, EncoderError
from ..router import LAYER_RESOLUTIONS, N_LAYERS, normalize_prompt, _PLACEHOLDER_RE
from ..schedule import NoiseSchedule, ScheduleParams
from .base import BackendDescriptor, DiffusionBackend

LATENT_SIZE = 16
EMBED_DIM = 48
MAX_TOKENS = 77
BOS = "<|bos|>"
EOS = "<|eos|>"

# Native per-layer attention resolutions, scaled down from the reference
# UNet geometry by 8 so the coarsest layer is a single cell.
TOY_RESOLUTIONS = tuple(r // 8 for r in LAYER_RESOLUTIONS)

_D_K = 16
_D_V = 8
_POS_SCALE = 0.05
_ATTN_SCALE = 1.0
# Linear conditioning gain per attention resolution: coarse layers carry
# content and get a large gain, fine layers refine and get a weak one.
_LIN_SCALE = {1: 40.0, 2: 40.0, 4: 4.0, 8: 1.0}
_WEIGHT_SEED = 4242
_POS_SEED = 7101

_STRIP_CHARS = ".,;:!?\"'"


def _hash_seed(text: str) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def _unit_vector(word: str, dim: int = EMBED_DIM) -> torch.Tensor:
    gen = torch.Generator().manual_seed(_hash_seed("word|" + word))
    v = torch.randn(dim, dtype=torch.float64, generator=gen)
    return v / v.norm()


class ToyTextEncoder:
    """Whitespace tokenizer over a hash-derived embedding table.

    Every word maps to a deterministic unit vector; placeholder tokens like
    <c> must be registered before they can be encoded, and registered slots
    shadow the hash table so learnable tokens update in place.
    """

    def __init__(self):
        self._slots: dict[str, torch.Tensor] = {}
        gen = torch.Generator().manual_seed(_POS_SEED)
        pos = torch.randn(MAX_TOKENS, EMBED_DIM, dtype=torch.float64, generator=gen)
        self._positional = pos / pos.norm(dim=1, keepdim=True)

    def tokenize(self, prompt: str) -> list[str]:
        words = self._words(prompt)
        tokens = [BOS, *words, EOS]
        if len(tokens) > MAX_TOKENS:
            raise EncoderError(
                f"prompt is {len(tokens)} tokens long, the encoder limit is {MAX_TOKENS}"
            )
        return tokens

    def _words(self, prompt: str) -> list[str]:
        words = []
        for raw in normalize_prompt(prompt).lower().split():
            word = raw.strip(_STRIP_CHARS)
            if word:
                words.append(word)
        return words

    def register_token(self, name: str, vector: torch.Tensor | None = None,
                       learnable: bool = False) -> torch.Tensor:
        if not _PLACEHOLDER_RE.fullmatch(name):
            raise EncoderError(f"token name {name!r} is not of the form <word>")
        if vector is None:
            vector = _unit_vector(name)
        vector = torch.as_tensor(vector, dtype=torch.float64).clone().detach()
        if vector.shape != (EMBED_DIM,):
            raise EncoderError(
                f"token vector must have shape ({EMBED_DIM},), got {tuple(vector.shape)}"
            )
        vector.requires_grad_(learnable)
        self._slots[name] = vector
        return vector

    def registered_tokens(self) -> dict[str, torch.Tensor]:
        return dict(self._slots)

    def _lookup(self, word: str) -> torch.Tensor:
        if word in self._slots:
            return self._slots[word]
        if _PLACEHOLDER_RE.fullmatch(word):
            raise EncoderError(f"placeholder token {word!r} is not registered")
        return _unit_vector(word)

    def token_embedding(self, word: str) -> torch.Tensor:
        """Mean input embedding of a word or phrase; constant, never learnable."""
        words = self._words(word)
        if not words:
            raise EncoderError("cannot embed an empty word")
        vecs = [self._lookup(w).detach() for w in words]
        return torch.stack(vecs).mean(dim=0)

    def encode(self, prompt: str) -> torch.Tensor:
        tokens = self.tokenize(prompt)
        rows = []
        for i, token in enumerate(tokens):
            if token in (BOS, EOS):
                base = _unit_vector(token)
            else:
                base = self._lookup(token)
            rows.append(base + _POS_SCALE * self._positional[i])
        return torch.stack(rows)


class ToyDenoiser:
    """Frozen seeded denoiser with one cross-attention block per layer.

    Layer i pools the latent to its native resolution, attends over the
    conditioning sequence, and adds a linear read-out of the mean
    conditioning vector; the per-layer biases average into B.
    """

    def __init__(self, schedule: NoiseSchedule):
        self.schedule = schedule
        gen = torch.Generator().manual_seed(_WEIGHT_SEED)

        def draw(*shape, scale=1.0):
            return scale * torch.randn(*shape, dtype=torch.float64, generator=gen)

        self.layers = []
        for res in TOY_RESOLUTIONS:
            n = res * res
            self.layers.append({
                "res": res,
                "q0": draw(n, _D_K),
                "vq": draw(_D_K),
                "wk": draw(EMBED_DIM, _D_K, scale=EMBED_DIM ** -0.5),
                "wv": draw(EMBED_DIM, _D_V, scale=EMBED_DIM ** -0.5),
                "u": draw(_D_V),
                "lin": draw(n, EMBED_DIM, scale=EMBED_DIM ** -0.5),
            })

    @staticmethod
    def _pool(z: torch.Tensor, res: int) -> torch.Tensor:
        k = LATENT_SIZE // res
        pooled = z.reshape(res, k, res, k).mean(dim=(1, 3))
        return pooled.reshape(-1) * k  # undo the 1/k std shrink of block means

    def _layer_bias(self, layer: dict, z: torch.Tensor,
                    cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        res = layer["res"]
        q = layer["q0"] + torch.outer(self._pool(z.detach(), res), layer["vq"])
        k = cond @ layer["wk"]
        attn = torch.softmax(q @ k.T / _D_K ** 0.5, dim=1)
        attn_out = attn @ (cond @ layer["wv"]) @ layer["u"]
        lin_out = layer["lin"] @ cond.mean(dim=0)
        bias = _ATTN_SCALE * attn_out + _LIN_SCALE[res] * lin_out
        grid = bias.reshape(res, res)
        up = LATENT_SIZE // res
        return grid.repeat_interleave(up, 0).repeat_interleave(up, 1), attn

    def predict(self, z_t: torch.Tensor, t: int, conds: list[torch.Tensor],
                want_attention: bool = False):
        if len(conds) != N_LAYERS:
            raise BackendError(
                f"denoiser expects {N_LAYERS} conditionings, got {len(conds)}"
            )
        abar = self.schedule.alpha_bar(t)
        # With eps_hat = z_t / sqrt(1 - abar) + g * b and g = sqrt(abar / (1
        # - abar)), the residual eps - eps_hat equals -g * (z0 + b): a bias
        # that learns -z0 reconstructs exactly, and the DDIM x0 prediction
        # collapses to -b, so sampled images are purely conditioning-driven.
        g = (abar / (1.0 - abar)) ** 0.5
        biases = []
        attentions = []
        for layer, cond in zip(self.layers, conds):
            bias, attn = self._layer_bias(layer, z_t, cond)
            biases.append(bias)
            if want_attention:
                res = layer["res"]
                maps = attn.T.reshape(-1, res, res)
                attentions.append(maps.detach().numpy().astype(np.float32))
        b = torch.stack(biases).mean(dim=0)
        eps_hat = z_t / (1.0 - abar) ** 0.5 + g * b
        if want_attention:
            return eps_hat, attentions
        return eps_hat


class ToyBackend(DiffusionBackend):
    """16-layer toy diffusion stack over a 16x16 identity-codec latent."""

    name = "toy"

    def __init__(self):
        params = ScheduleParams()
        self.schedule = NoiseSchedule(params)
        self.descriptor = BackendDescriptor(
            n_cross_attention_layers=N_LAYERS,
            layer_resolutions=TOY_RESOLUTIONS,
            embedding_dim=EMBED_DIM,
            max_timestep=params.n_steps,
            schedule=params,
        )
        self.encoder = ToyTextEncoder()
        self.denoiser = ToyDenoiser(self.schedule)
        gen = torch.Generator().manual_seed(_hash_seed("image-embedder"))
        w = torch.randn(EMBED_DIM, LATENT_SIZE * LATENT_SIZE + 1,
                        dtype=torch.float64, generator=gen)
        self._image_proj = w / w.norm(dim=1, keepdim=True)

    # -- text side ---------------------------------------------------------
    def tokenize(self, prompt: str) -> list[str]:
        return self.encoder.tokenize(prompt)

    def encode_text(self, prompt: str) -> torch.Tensor:
        return self.encoder.encode(prompt)

    def token_embedding(self, word: str) -> torch.Tensor:
        return self.encoder.token_embedding(word)

    def register_token(self, name: str, vector: torch.Tensor | None = None,
                       learnable: bool = False) -> torch.Tensor:
        return self.encoder.register_token(name, vector, learnable)

    # -- latent side -------------------------------------------------------
    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if arr.ndim == 3:
            arr = arr.mean(axis=2)
        if arr.shape != (LATENT_SIZE, LATENT_SIZE):
            raise BackendError(
                f"toy images must be {LATENT_SIZE}x{LATENT_SIZE}, got {arr.shape}"
            )
        return torch.from_numpy(arr.copy())

    def decode_latent(self, z: torch.Tensor) -> np.ndarray:
        return z.detach().clamp(0.0, 1.0).numpy().copy()

    def initial_latent(self, seed: int) -> torch.Tensor:
        gen = torch.Generator().manual_seed(seed)
        return torch.randn(LATENT_SIZE, LATENT_SIZE, dtype=torch.float64,
                           generator=gen)

    # -- denoiser ----------------------------------------------------------
    def predict_noise(self, z_t: torch.Tensor, t: int,
                      conditionings: list[torch.Tensor]) -> torch.Tensor:
        return self.denoiser.predict(z_t, t, conditionings)

    def predict_noise_with_attention(self, z_t, t, conditionings):
        return self.denoiser.predict(z_t, t, conditionings, want_attention=True)

    # -- shared embedding space for scoring ----------------------------------
    def embed_text(self, text: str) -> np.ndarray:
        words = self.encoder._words(text)
        if not words:
            raise EncoderError("cannot embed an empty text")
        vecs = torch.stack([self.encoder._lookup(w).detach() for w in words])
        mean = vecs.mean(dim=0)
        return (mean / mean.norm()).numpy()

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        arr = np.asarray(image, dtype=np.float64)
        if arr.shape != (LATENT_SIZE, LATENT_SIZE):
            raise BackendError(
                f"toy images must be {LATENT_SIZE}x{LATENT_SIZE}, got {arr.shape}"
            )
        # The appended constant keeps the embedding defined for flat images:
        # an all-black sample projects to the bias column instead of NaN.
        aug = torch.cat([torch.from_numpy(arr.reshape(-1)),
                         torch.ones(1, dtype=torch.float64)])
        feat = self._image_proj @ aug
        feat = feat / feat.norm()
        return feat.numpy()
