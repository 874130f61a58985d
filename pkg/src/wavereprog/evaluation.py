"""PSNR/SSIM and the cross-degradation evaluation protocols."""
import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import torch
import torch.nn.functional as F

from .degradations import DISPLAY_NAMES, KINDS, PairManifest, read_image
from .errors import ConfigError, DimensionError, ManifestError
from .model import restore
from .training import load_model

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
COLUMNS = tuple(DISPLAY_NAMES[k] for k in KINDS) + ("Avg",)


def _as_space(img, metric_space):
    img = img.to(torch.float64)
    if metric_space == "rgb":
        return img
    if metric_space == "y":
        r, g, b = img.unbind(-3)
        return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b)[..., None, :, :] / 255.0
    raise ConfigError(f"metric_space must be 'rgb' or 'y', got {metric_space!r}")


def _check_pair(pred, target, what):
    if pred.shape != target.shape:
        raise DimensionError(f"{what}: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")


def psnr(pred, target, metric_space="rgb", cap=PSNR_CAP):
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical images give ``cap``."""
    _check_pair(pred, target, "psnr")
    mse = torch.mean((_as_space(pred, metric_space) - _as_space(target, metric_space)) ** 2)
    mse = float(mse)
    if mse == 0:
        return cap
    return min(10.0 * math.log10(1.0 / mse), cap)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(r ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(pred, target, metric_space="rgb"):
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    _check_pair(pred, target, "ssim")
    if min(pred.shape[-2:]) < SSIM_WINDOW:
        raise ConfigError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, "
                          f"got {tuple(pred.shape[-2:])}")
    x = _as_space(pred, metric_space).reshape(-1, 1, *pred.shape[-2:])
    y = _as_space(target, metric_space).reshape(-1, 1, *pred.shape[-2:])
    win = _gaussian_window()[None, None]

    def filt(z):
        return F.conv2d(z, win)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    smap = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2))
    return float(smap.mean())


def row_label(train_kinds):
    return " & ".join(DISPLAY_NAMES[k] for k in train_kinds)


@dataclass
class EvalReport:
    protocol: int
    psnr: dict = field(default_factory=dict)
    ssim: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def rows(self):
        return sorted(self.psnr)

    def add_row(self, label, psnr_cells, ssim_cells):
        self.psnr[label] = dict(psnr_cells)
        self.ssim[label] = dict(ssim_cells)
        for cells in (self.psnr[label], self.ssim[label]):
            cells["Avg"] = sum(cells[DISPLAY_NAMES[k]] for k in KINDS) / len(KINDS)

    def values(self, label, metric="psnr"):
        cells = getattr(self, metric)[label]
        return [cells[c] for c in COLUMNS]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("train", "metric") + COLUMNS)
            for label in self.rows:
                for metric in ("psnr", "ssim"):
                    writer.writerow([label, metric] + [f"{v:.6f}" for v in self.values(label, metric)])
        return path

    def to_text(self, metric="psnr"):
        fmt = "{:.2f}" if metric == "psnr" else "{:.4f}"
        head = ["Train \\ Test"] + list(COLUMNS)
        body = [[label] + [fmt.format(v) for v in self.values(label, metric)] for label in self.rows]
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
        lines = ["  ".join(cell.rjust(w) if i else cell.ljust(w)
                           for i, (cell, w) in enumerate(zip(r, widths)))
                 for r in [head] + body]
        rule = "-" * len(lines[0])
        title = f"Protocol {self.protocol} - {metric.upper()}"
        return "\n".join([title, rule, lines[0], rule] + lines[1:] + [rule]) + "\n"

    def write(self, out_dir, stem="report"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = self.to_csv(out_dir / f"{stem}.csv")
        txt_path = out_dir / f"{stem}.txt"
        txt_path.write_text(self.to_text("psnr") + "\n" + self.to_text("ssim"))
        (out_dir / f"{stem}.meta.json").write_text(json.dumps(self.metadata, indent=2, sort_keys=True))
        return csv_path, txt_path


def _group_test_manifests(test_manifests):
    if isinstance(test_manifests, PairManifest):
        test_manifests = test_manifests.by_kind()
    missing = [k for k in KINDS if k not in test_manifests or len(test_manifests[k]) == 0]
    if missing:
        raise ManifestError(f"test manifests missing degradation kind(s): {', '.join(missing)}")
    return {k: test_manifests[k].filter([k]) for k in KINDS}


def _load_pairs(manifest):
    h = hashlib.sha256()
    pairs = []
    for e in manifest:
        for rel in (e.degraded, e.clean):
            h.update(manifest.path(rel).read_bytes())
        pairs.append((e.degraded, read_image(manifest.path(e.degraded)),
                      read_image(manifest.path(e.clean))))
    return pairs, h.hexdigest()


def check_protocol(protocol, train_kinds):
    if protocol not in (1, 2):
        raise ConfigError(f"protocol must be 1 or 2, got {protocol}")
    unknown = [k for k in train_kinds if k not in KINDS]
    if unknown:
        raise ConfigError(f"unknown train kind {unknown[0]!r}; valid kinds: {', '.join(KINDS)}")
    if len(set(train_kinds)) != protocol:
        raise ConfigError(f"protocol {protocol} needs exactly {protocol} distinct train kind(s), "
                          f"got {list(train_kinds)}")


@torch.no_grad()
def evaluate_model(model, pairs, tiling=True, overlap=16, metric_space="rgb", log=None):
    """Mean PSNR/SSIM of ``model`` over ``(name, degraded, clean)`` pairs."""
    ps, ss = [], []
    for name, degraded, clean in pairs:
        pred = restore(model, degraded, tiling=tiling, overlap=overlap).clamp(0, 1)
        p, s = psnr(pred, clean, metric_space), ssim(pred, clean, metric_space)
        ps.append(p)
        ss.append(s)
        if log is not None:
            log.write(json.dumps({"image": name, "psnr": p, "ssim": s}) + "\n")
    return sum(ps) / len(ps), sum(ss) / len(ss)


def run_protocol(protocol, runs, test_manifests, tiling=True, overlap=16, metric_space="rgb",
                 per_image_log=None):
    """Evaluate every run on all five test kinds.

    ``runs`` is a sequence of ``(train_kinds, model)`` or
    ``(train_kinds, model, label)``; ``model`` is any callable on image batches,
    a :class:`ReprogramModel`, or a checkpoint path. ``test_manifests`` maps kind
    to manifest, or is one mixed manifest grouped by kind.
    """
    grouped = _group_test_manifests(test_manifests)
    data, hashes = {}, {}
    for kind, manifest in grouped.items():
        data[kind], hashes[kind] = _load_pairs(manifest)
    report = EvalReport(protocol, metadata={
        "protocol": protocol,
        "dataset_hashes": hashes,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "runs": {},
    })
    log = open(per_image_log, "w") if per_image_log else None
    try:
        for run in runs:
            train_kinds, model = run[0], run[1]
            check_protocol(protocol, train_kinds)
            label = run[2] if len(run) > 2 else row_label(train_kinds)
            if label in report.psnr:
                raise ConfigError(f"duplicate report row {label!r}")
            source = None
            if isinstance(model, (str, Path)):
                source = str(model)
                model = load_model(model)
            if isinstance(model, torch.nn.Module):
                model.eval()
            ident = source or getattr(getattr(model, "backbone", None), "fingerprint", None)
            report.metadata["runs"][label] = {"train_kinds": list(train_kinds), "checkpoint": ident}
            p_cells, s_cells = {}, {}
            for kind in KINDS:
                p, s = evaluate_model(model, data[kind], tiling, overlap, metric_space, log)
                p_cells[DISPLAY_NAMES[kind]] = p
                s_cells[DISPLAY_NAMES[kind]] = s
            report.add_row(label, p_cells, s_cells)
    finally:
        if log is not None:
            log.close()
    return report
