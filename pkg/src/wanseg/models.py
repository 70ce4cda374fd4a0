"""U-Net generator, fully-convolutional domain discriminators and the built-up detection head."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from wanseg.core import functional as F
from wanseg.core.tensor import Tensor
from wanseg.errors import ContractError

OUTPUT_SPACE = "output_space"
LATENT_SPACE = "latent_space"

OUTPUT_DISC_WIDTHS = (64, 128, 256, 512, 1)
LATENT_DISC_WIDTHS = (256, 256, 128, 64, 1)
HEAD_CONV_WIDTHS = (64, 32)
HEAD_DENSE_WIDTHS = (256, 64, 1)
LEAK = 0.2


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, int], dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def scale_widths(widths: tuple[int, ...], factor: float) -> tuple[int, ...]:
    """Scale every width but the final single-channel output; never below 1."""
    return tuple(max(1, int(round(w * factor))) for w in widths[:-1]) + (widths[-1],)


class Module:
    """A named, ordered collection of parameter tensors."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _conv(self, rng, name: str, cout: int, cin: int, k: int, dtype) -> None:
        self.params[f"{name}.weight"] = Tensor(he_uniform(rng, (cout, cin, k, k), dtype), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def _dense(self, rng, name: str, fin: int, fout: int, dtype) -> None:
        self.params[f"{name}.weight"] = Tensor(xavier_uniform(rng, (fin, fout), dtype), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(fout, dtype=dtype), requires_grad=True)

    def conv(self, x: Tensor, name: str, stride: int = 1) -> Tensor:
        return F.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride=stride)

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ContractError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ContractError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.asarray(state[k], dtype=p.dtype).copy()

    def astype(self, dtype) -> "Module":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self


class UNetGenerator(Module):
    """Four down-steps, a bottleneck and four up-steps with skip connections.

    Encoder level ``i`` has ``base_width * 2**i`` filters; with the default 32 the
    bottleneck carries 512 channels at 1/16 of the input resolution.
    """

    levels = 4

    def __init__(self, rng: np.random.Generator, base_width: int = 32, in_channels: int = 3, dtype=np.float32):
        super().__init__()
        self.base_width = base_width
        self.in_channels = in_channels
        widths = [base_width * 2 ** i for i in range(self.levels + 1)]
        self.widths = widths
        cin = in_channels
        for i, w in enumerate(widths):
            self._conv(rng, f"enc{i}.conv1", w, cin, 3, dtype)
            self._conv(rng, f"enc{i}.conv2", w, w, 3, dtype)
            cin = w
        for i in reversed(range(self.levels)):
            w = widths[i]
            self._conv(rng, f"dec{i}.up", w, widths[i + 1], 3, dtype)
            self._conv(rng, f"dec{i}.conv1", w, 2 * w, 3, dtype)
            self._conv(rng, f"dec{i}.conv2", w, w, 3, dtype)
        self._conv(rng, "head", 1, widths[0], 1, dtype)

    @property
    def latent_channels(self) -> int:
        return self.widths[-1]

    def encoder_params(self) -> list[str]:
        return [k for k in self.params if k.startswith("enc")]

    def decoder_params(self) -> list[str]:
        return [k for k in self.params if k.startswith("dec") or k.startswith("head")]

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(latent, seg, last_decoder)``."""
        if images.ndim != 4 or images.shape[1] != self.in_channels:
            raise ContractError(f"generator expects (N, {self.in_channels}, H, W), got {images.shape}")
        h, w = images.shape[2:]
        step = 2 ** self.levels
        if h % step or w % step or h == 0 or w == 0:
            raise ContractError(f"generator input extents must be multiples of {step}, got {h}x{w}")
        skips = []
        x = images
        for i in range(self.levels + 1):
            x = F.relu(self.conv(x, f"enc{i}.conv1"))
            x = F.relu(self.conv(x, f"enc{i}.conv2"))
            if i < self.levels:
                skips.append(x)
                x = F.max_pool2d(x, 2, 2)
        latent = x
        for i in reversed(range(self.levels)):
            x = F.relu(self.conv(F.upsample_nearest(x, 2), f"dec{i}.up"))
            x = F.concat_channels(skips[i], x)
            x = F.relu(self.conv(x, f"dec{i}.conv1"))
            x = F.relu(self.conv(x, f"dec{i}.conv2"))
        last_decoder = x
        seg = F.sigmoid(self.conv(x, "head"))
        return latent, seg, last_decoder

    __call__ = forward


class Discriminator(Module):
    """Five convolutions, LeakyReLU(0.2) in between, sigmoid last, nearest upsample at the end.

    ``output_space``: 4x4 kernels, stride 2, widths 64-128-256-512-1 over the 1-channel map.
    ``latent_space``: 3x3 kernels, stride 1, widths 256-256-128-64-1 over the bottleneck.
    """

    def __init__(self, rng: np.random.Generator, variant: str, in_channels: int | None = None,
                 width_factor: float = 1.0, dtype=np.float32):
        super().__init__()
        if variant == OUTPUT_SPACE:
            widths, self.kernel, self.stride = OUTPUT_DISC_WIDTHS, 4, 2
            in_channels = 1 if in_channels is None else in_channels
        elif variant == LATENT_SPACE:
            widths, self.kernel, self.stride = LATENT_DISC_WIDTHS, 3, 1
            in_channels = 512 if in_channels is None else in_channels
        else:
            raise ContractError(f"unknown discriminator variant {variant!r}")
        self.variant = variant
        self.in_channels = in_channels
        self.widths = scale_widths(widths, width_factor)
        cin = in_channels
        for i, w in enumerate(self.widths):
            self._conv(rng, f"conv{i}", w, cin, self.kernel, dtype)
            cin = w

    def score_map(self, rep: Tensor) -> Tensor:
        """Per-location scores before the trailing upsample."""
        if rep.ndim != 4 or rep.shape[1] != self.in_channels:
            raise ContractError(
                f"{self.variant} discriminator expects {self.in_channels} input channels, got {rep.shape}")
        x = rep
        last = len(self.widths) - 1
        for i in range(len(self.widths)):
            x = self.conv(x, f"conv{i}", stride=self.stride)
            x = F.sigmoid(x) if i == last else F.leaky_relu(x, LEAK)
        return x

    def forward(self, rep: Tensor, out_size: int | None = None) -> Tensor:
        """Scores upsampled to ``out_size`` (default: the input's own spatial size)."""
        scores = self.score_map(rep)
        target = rep.shape[2] if out_size is None else out_size
        factor = target // scores.shape[2]
        if factor * scores.shape[2] != target or rep.shape[2] != rep.shape[3]:
            raise ContractError(f"cannot upsample {scores.shape[2]} to {target}")
        return F.upsample_nearest(scores, factor)

    __call__ = forward


class DetectionHead(Module):
    """Image-level built-up presence classifier over latent and last-decoder features.

    The latent map is resampled x2 and the decoder map x1/2 (bilinear); the decoder branch
    is then average-pooled onto the latent branch's grid, the two are concatenated
    depth-wise and passed through two 3x3 convolutions, global average pooling and three
    dense layers.
    """

    def __init__(self, rng: np.random.Generator, latent_channels: int = 512, decoder_channels: int = 32,
                 width_factor: float = 1.0, dtype=np.float32):
        super().__init__()
        self.latent_channels = latent_channels
        self.decoder_channels = decoder_channels
        self.conv_widths = tuple(max(1, int(round(w * width_factor))) for w in HEAD_CONV_WIDTHS)
        self.dense_widths = scale_widths(HEAD_DENSE_WIDTHS, width_factor)
        cin = latent_channels + decoder_channels
        for i, w in enumerate(self.conv_widths):
            self._conv(rng, f"conv{i}", w, cin, 3, dtype)
            cin = w
        for i, w in enumerate(self.dense_widths):
            self._dense(rng, f"fc{i}", cin, w, dtype)
            cin = w

    def merge(self, latent: Tensor, last_decoder: Tensor) -> Tensor:
        if latent.shape[0] != last_decoder.shape[0]:
            raise ContractError(f"batch mismatch: latent {latent.shape[0]} vs decoder {last_decoder.shape[0]}")
        if latent.shape[1] != self.latent_channels or last_decoder.shape[1] != self.decoder_channels:
            raise ContractError("detection head channel mismatch")
        up = F.resize_bilinear(latent, 2)
        down = F.resize_bilinear(last_decoder, 0.5)
        k = down.shape[2] // up.shape[2]
        if k * up.shape[2] != down.shape[2]:
            raise ContractError(f"cannot reconcile branch sizes {up.shape[2:]} and {down.shape[2:]}")
        if k > 1:
            down = F.avg_pool2d(down, k)
        return F.concat_channels(up, down)

    def forward(self, latent: Tensor, last_decoder: Tensor) -> Tensor:
        x = self.merge(latent, last_decoder)
        for i in range(len(self.conv_widths)):
            x = F.relu(self.conv(x, f"conv{i}"))
        x = F.global_avg_pool(x)
        last = len(self.dense_widths) - 1
        for i in range(len(self.dense_widths)):
            x = F.dense(x, self.params[f"fc{i}.weight"], self.params[f"fc{i}.bias"])
            x = F.sigmoid(x) if i == last else F.relu(x)
        return x

    __call__ = forward
