"""In-memory paired patch sampling over a manifest (single stream, seeded)."""
import torch

from .degradations import read_image, upsample_to
from .errors import ConfigError


class PairedPatchDataset:
    """Holds every (degraded, clean) pair of a manifest as float tensors.

    True low-resolution pairs (degraded smaller than clean) are bicubically
    upsampled to the clean size on load so all pairs are aligned.
    """

    def __init__(self, manifest, patch, hflip=False):
        if len(manifest) == 0:
            raise ConfigError("manifest has no entries")
        self.patch = int(patch)
        self.hflip = hflip
        self.kinds = []
        self.pairs = []
        for e in manifest:
            deg = read_image(manifest.path(e.degraded))
            clean = read_image(manifest.path(e.clean))
            if deg.shape != clean.shape:
                deg = upsample_to(deg, clean.shape[-2:]).clamp(0, 1)
            self.pairs.append((deg, clean))
            self.kinds.append(e.spec.kind)
        smallest = min(min(c.shape[-2:]) for _, c in self.pairs)
        if self.patch > smallest:
            raise ConfigError(f"patch {self.patch} does not fit the smallest image ({smallest} px)")

    def __len__(self):
        return len(self.pairs)

    def crop(self, index, generator):
        deg, clean = self.pairs[index]
        h, w = clean.shape[-2:]
        p = self.patch
        y = int(torch.randint(0, h - p + 1, (1,), generator=generator))
        x = int(torch.randint(0, w - p + 1, (1,), generator=generator))
        d, c = deg[:, y:y + p, x:x + p], clean[:, y:y + p, x:x + p]
        if self.hflip and bool(torch.randint(0, 2, (1,), generator=generator)):
            d, c = d.flip(-1), c.flip(-1)
        return d, c

    def batches(self, batch_size, generator):
        """One epoch of shuffled random-crop batches."""
        order = torch.randperm(len(self), generator=generator).tolist()
        for k in range(0, len(order), batch_size):
            crops = [self.crop(i, generator) for i in order[k:k + batch_size]]
            yield torch.stack([d for d, _ in crops]), torch.stack([c for _, c in crops])
