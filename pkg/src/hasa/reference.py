"""Small fixed networks used to calibrate the synthetic datasets."""
from __future__ import annotations

import numpy as np

from .autodiff import functional as F
from .autodiff.module import Module
from .ops import Conv2d, Dense


class ReferenceConvNet(Module):
    """Two conv/relu/max-pool stages and a dense layer over the flattened map."""

    task = "classification"

    def __init__(self, image_size: int = 64, n_classes: int = 9, c1: int = 16, c2: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.conv1 = Conv2d(1, c1, 5, rng, stride=2, padding=2, bias=True)
        self.conv2 = Conv2d(c1, c2, 3, rng, padding=1, bias=True)
        side = image_size // 8
        self.head = Dense(c2 * side * side, n_classes, rng)
        self.assign_names()

    def forward(self, x):
        h = F.pool2d(F.relu(self.conv1(x)), "max", 2)
        h = F.pool2d(F.relu(self.conv2(h)), "max", 2)
        return self.head(F.flatten(h))


class ReferenceEncoderDecoder(Module):
    """Two stride-2 encoder convs, a bottleneck, and two bilinear x2 decoder steps."""

    task = "segmentation"

    def __init__(self, n_classes: int = 3, c1: int = 16, c2: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.enc1 = Conv2d(1, c1, 3, rng, stride=2, padding=1, bias=True)
        self.enc2 = Conv2d(c1, c2, 3, rng, stride=2, padding=1, bias=True)
        self.mid = Conv2d(c2, c2, 3, rng, padding=2, dilation=2, bias=True)
        self.dec2 = Conv2d(c2 + c1, c1, 3, rng, padding=1, bias=True)
        self.dec1 = Conv2d(c1 + 1, c1, 3, rng, padding=1, bias=True)
        self.out = Conv2d(c1, n_classes, 1, rng, bias=True)
        self.assign_names()

    def forward(self, x):
        e1 = F.relu(self.enc1(x))
        e2 = F.relu(self.mid(F.relu(self.enc2(e1))))
        d2 = F.relu(self.dec2(F.concat([F.bilinear_upsample(e2, 2), e1], axis=1)))
        d1 = F.relu(self.dec1(F.concat([F.bilinear_upsample(d2, 2), x], axis=1)))
        return self.out(d1)
