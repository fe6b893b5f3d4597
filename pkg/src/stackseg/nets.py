"""Small fully convolutional networks built from the autodiff ops.

Every conv is followed by a learnable per-channel affine and a ReLU (no batch
statistics). Dense blocks concatenate each layer's output onto its input. No
layer changes resolution, so outputs align voxel-for-voxel with inputs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, checkpoint
from .synthgen import item_rng


@dataclass(frozen=True)
class ArchSpec:
    stem_channels: int = 16
    stem_kernel: int = 5
    growth: int = 8
    block_convs: int = 3
    n_blocks: int = 2
    kernel: int = 3
    init: str = "he"  # "he" or "gaussian" (mean 0, sigma init_sigma)
    init_sigma: float = 0.01

    def to_dict(self):
        return asdict(self)


class Network:
    """Ordered bag of named parameters plus a forward function."""

    def __init__(self, ndim: int, arch: ArchSpec, seed: int):
        self.ndim = ndim
        self.arch = arch
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self._draws = 0

    # -- construction helpers
    def _kernel(self, name, c_out, c_in, k):
        shape = (c_out, c_in) + (k,) * self.ndim
        rng = item_rng(self.seed, self._draws)
        self._draws += 1
        if self.arch.init == "he":
            t = ad.init_he(shape, rng)
        else:
            t = ad.init_gaussian(shape, 0.0, self.arch.init_sigma, rng)
        self.params[name] = t

    def _conv_unit(self, name, c_in, c_out, k):
        self._kernel(f"{name}.w", c_out, c_in, k)
        self.params[f"{name}.scale"] = ad.init_constant((c_out,), 1.0)
        self.params[f"{name}.shift"] = ad.init_constant((c_out,), 0.0)
        return c_out

    def _dense_block(self, name, c_in):
        c = c_in
        for j in range(self.arch.block_convs):
            self._conv_unit(f"{name}.conv{j}", c, self.arch.growth, self.arch.kernel)
            c += self.arch.growth
        return c

    def _classifier(self, name, c_in, c_out):
        self._kernel(f"{name}.w", c_out, c_in, 1)
        self.params[f"{name}.bias"] = ad.init_constant((c_out,), 0.0)

    # -- forward helpers
    def conv_unit(self, name, x):
        p = self.params
        y = ad.conv(x, p[f"{name}.w"], 1, "same")
        return ad.relu(ad.channel_affine(y, p[f"{name}.scale"], p[f"{name}.shift"]))

    def dense_block(self, name, x):
        feats = [x]
        for j in range(self.arch.block_convs):
            inp = feats[0] if len(feats) == 1 else ad.concat(feats, axis=0)
            feats.append(self.conv_unit(f"{name}.conv{j}", inp))
        return ad.concat(feats, axis=0)

    def classifier(self, name, x):
        y = ad.conv(x, self.params[f"{name}.w"], 1, "same")
        ones = Tensor(np.ones(y.shape[0]))
        return ad.channel_affine(y, ones, self.params[f"{name}.bias"])

    # -- parameters
    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def state(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: dict):
        if set(state) != set(self.params):
            raise ValueError("checkpoint tensors do not match the network")
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} vs {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)

    def to_bytes(self, hyper: dict) -> bytes:
        return checkpoint.dumps(self.state(), hyper)


class MiniFCN(Network):
    """Stem conv, ``n_blocks`` dense blocks, 1-wide classifier."""

    def __init__(self, ndim: int, in_channels: int, num_classes: int, arch: ArchSpec = ArchSpec(), seed: int = 0):
        super().__init__(ndim, arch, seed)
        self.in_channels = in_channels
        self.num_classes = num_classes
        c = self._conv_unit("stem", in_channels, arch.stem_channels, arch.stem_kernel)
        for b in range(arch.n_blocks):
            c = self._dense_block(f"block{b}", c)
        self._classifier("cls", c, num_classes)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv_unit("stem", x)
        for b in range(self.arch.n_blocks):
            h = self.dense_block(f"block{b}", h)
        return self.classifier("cls", h)


class MetaNet(Network):
    """Two encoder branches (raw image, pseudo-label summary), fused by a dense block.

    With ``use_image=False`` only the summary branch is built. The optional
    auxiliary head classifies directly from the concatenated branch outputs.
    """

    def __init__(self, summary_channels: int, num_classes: int, arch: ArchSpec = ArchSpec(),
                 seed: int = 0, use_image: bool = True, aux_head: bool = False):
        super().__init__(3, arch, seed)
        self.summary_channels = summary_channels
        self.num_classes = num_classes
        self.use_image = use_image
        self.aux_head = aux_head
        c = 0
        if use_image:
            self._conv_unit("img.stem", 1, arch.stem_channels, arch.stem_kernel)
            c += self._dense_block("img.block", arch.stem_channels)
        self._conv_unit("pl.stem", summary_channels, arch.stem_channels, arch.stem_kernel)
        c += self._dense_block("pl.block", arch.stem_channels)
        if aux_head:
            self._classifier("aux", c, num_classes)
        c = self._dense_block("fuse.block", c)
        self._classifier("cls", c, num_classes)

    def forward(self, image: Tensor | None, summary: Tensor):
        branches = []
        if self.use_image:
            branches.append(self.dense_block("img.block", self.conv_unit("img.stem", image)))
        branches.append(self.dense_block("pl.block", self.conv_unit("pl.stem", summary)))
        h = branches[0] if len(branches) == 1 else ad.concat(branches, axis=0)
        aux = self.classifier("aux", h) if self.aux_head else None
        out = self.classifier("cls", self.dense_block("fuse.block", h))
        return out, aux
