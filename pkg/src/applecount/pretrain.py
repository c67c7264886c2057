"""Stand-in for ImageNet weights: pretrain the AlexNet conv stages locally.

The conv stages learn a dense objectness pretext task on random crops of
synthetic canopy renders: per-cell apple-center counts on the pooled 6x6
grid plus an apple-pixel mask on the 13x13 grid. No patch-level count labels
are used. The result is saved as a plain ``features`` state dict, the same file
format :func:`applecount.cnncount.build_network` consumes.
"""
import logging
import time

import cv2
import numpy as np
import torch
from torch import nn

from .cnncount import CountNetwork
from .patchset import crop_and_resize
from .synthbench.patches import VARIETIES, render_cluster_canvas

logger = logging.getLogger(__name__)

# seed namespace kept apart from the patch corpora used for count training
PRETRAIN_SEED_OFFSET = 7_000_000


def pretext_sample(rng):
    """One random canopy crop with its (6x6 center counts, 13x13 mask) targets."""
    count = int(rng.integers(0, 7))
    radius = rng.uniform(9.0, 22.0)
    variety = VARIETIES[rng.integers(len(VARIETIES))]
    img, ids, centers, _, _ = render_cluster_canvas(count, rng, radius, variety)
    H, W = ids.shape
    side = rng.uniform(0.45, 1.0) * min(H, W)
    x0, y0 = rng.uniform(0, W - side), rng.uniform(0, H - side)
    box = (int(x0), int(y0), max(int(side), 8), max(int(side), 8))
    pixels = crop_and_resize(img, box)
    apple = (ids[box[1]:box[1] + box[3], box[0]:box[0] + box[2]] >= 0).astype(np.float32)
    mask = cv2.resize(apple, (13, 13), interpolation=cv2.INTER_AREA)
    density = np.zeros((6, 6), np.float32)
    for cx, cy in centers:
        u = (cx - box[0]) / box[2]
        v = (cy - box[1]) / box[3]
        if 0.0 <= u < 1.0 and 0.0 <= v < 1.0:
            density[int(v * 6), int(u * 6)] += 1.0
    if rng.random() < 0.5:
        pixels, mask, density = pixels[:, ::-1], mask[:, ::-1], density[:, ::-1]
    return np.ascontiguousarray(pixels), np.ascontiguousarray(mask), np.ascontiguousarray(density)


class _PretextModel(nn.Module):
    def __init__(self, features):
        super().__init__()
        self.features = features
        self.trunk = features[:-1]
        self.pool = features[-1]
        self.mask_head = nn.Conv2d(256, 1, 1)
        self.density_head = nn.Conv2d(256, 1, 1)

    def forward(self, x):
        f13 = self.trunk(x)
        f6 = self.pool(f13)
        return self.mask_head(f13)[:, 0], self.density_head(f6)[:, 0]


def pretrain_feature_weights(path, steps=400, batch_size=32, lr=3e-4, seed=0, log=None):
    """Train conv stages on the pretext task and save their state dict."""
    log = log or logger.info
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = CountNetwork()
        for m in net.features:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)
        model = _PretextModel(net.features)
        gen = torch.Generator().manual_seed(seed)
        for head in (model.mask_head, model.density_head):
            nn.init.normal_(head.weight, std=0.01, generator=gen)
            nn.init.zeros_(head.bias)
    rng = np.random.default_rng(PRETRAIN_SEED_OFFSET + seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    start = time.perf_counter()
    model.train()
    for step in range(steps):
        batch = [pretext_sample(rng) for _ in range(batch_size)]
        x = net.normalize(np.stack([b[0] for b in batch]))
        mask = torch.from_numpy(np.stack([b[1] for b in batch]))
        density = torch.from_numpy(np.stack([b[2] for b in batch]))
        mask_logit, density_pred = model(x)
        loss = (nn.functional.binary_cross_entropy_with_logits(mask_logit, mask)
                + nn.functional.mse_loss(density_pred, density) * 4.0)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 25 == 0 or step == steps - 1:
            log(f"pretrain step {step} loss {loss.item():.4f} ({time.perf_counter() - start:.0f}s)")
    torch.save(net.features.state_dict(), path)
    return path
