"""Synthetic degradations, toy clean images and paired-image manifests.

All randomness for one degraded image comes from a single numpy Generator
seeded with the spec's seed; parameters that are not pinned are drawn from it
first, always in the same order, so a resolved spec reproduces its image.
"""
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, DataIOError, ManifestError

KINDS = ("lr", "rain", "noise", "blur", "haze")
DISPLAY_NAMES = {"lr": "LR", "rain": "Rain", "noise": "Noise", "blur": "Blur", "haze": "Haze"}
NOISE_LEVELS = (15, 25, 50)
LR_SCALES = (2, 3, 4)
HAZE_T_RANGE = (0.3, 0.9)
HAZE_A_RANGE = (0.7, 1.0)
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MANIFEST_HEADER = "# degraded_path\tclean_path\tkind\tparams\tseed"

# the single positional value accepted by "kind:value" strings
_MAIN_PARAM = {"lr": "scale", "noise": "sigma", "blur": "kernel_size", "haze": "t",
               "rain": "streak_count"}
_ALLOWED = {
    "lr": {"scale"},
    "noise": {"sigma"},
    "blur": {"kernel_size", "sigma_blur", "motion_length", "motion_angle"},
    "haze": {"t", "A"},
    "rain": {"streak_count", "length", "angle", "intensity"},
}


def _check_kind(kind):
    if kind not in KINDS:
        raise ConfigError(f"unknown degradation kind {kind!r}; valid kinds: {', '.join(KINDS)}")


@dataclass
class DegradationSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        _check_kind(self.kind)
        self.params = dict(self.params)
        extra = set(self.params) - _ALLOWED[self.kind]
        if extra:
            raise ConfigError(
                f"{self.kind}: unknown parameter(s) {sorted(extra)}; "
                f"allowed: {sorted(_ALLOWED[self.kind])}"
            )
        _validate_params(self.kind, self.params)

    @property
    def label(self):
        main = self.params.get(_MAIN_PARAM[self.kind])
        return self.kind if main is None else f"{self.kind}-{main:g}"

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def resolve(self, shape):
        """Return a copy with every parameter concrete for an image of ``shape``."""
        rng = np.random.default_rng(self.seed)
        return replace(self, params=_resolve(self.kind, self.params, shape[-2:], rng))


def _validate_params(kind, p):
    def bad(msg):
        raise ConfigError(f"{kind}: {msg}")

    if kind == "lr" and "scale" in p and p["scale"] not in LR_SCALES:
        bad(f"scale must be one of {LR_SCALES}, got {p['scale']}")
    if kind == "noise" and "sigma" in p and not 0 <= p["sigma"] <= 255:
        bad(f"sigma must be in [0, 255] (8-bit scale), got {p['sigma']}")
    if kind == "blur":
        k = p.get("kernel_size")
        if k is not None and (int(k) != k or k < 3 or k % 2 == 0):
            bad(f"kernel_size must be an odd integer >= 3, got {k}")
        if "sigma_blur" in p and not p["sigma_blur"] > 0:
            bad(f"sigma_blur must be > 0, got {p['sigma_blur']}")
        if "motion_length" in p and not p["motion_length"] > 0:
            bad(f"motion_length must be > 0, got {p['motion_length']}")
    if kind == "haze":
        if "t" in p and not 0 < p["t"] <= 1:
            bad(f"transmission t must be in (0, 1], got {p['t']}")
        if "A" in p and not 0 <= p["A"] <= 1:
            bad(f"airlight A must be in [0, 1], got {p['A']}")
    if kind == "rain":
        if "streak_count" in p and (int(p["streak_count"]) != p["streak_count"]
                                    or p["streak_count"] < 0):
            bad(f"streak_count must be a non-negative integer, got {p['streak_count']}")
        if "length" in p and not p["length"] >= 1:
            bad(f"length must be >= 1, got {p['length']}")
        if "intensity" in p and not 0 <= p["intensity"] <= 1:
            bad(f"intensity must be in [0, 1], got {p['intensity']}")


def _resolve(kind, p, hw, rng):
    p = dict(p)
    if kind == "lr":
        drawn = int(rng.choice(LR_SCALES))
        p.setdefault("scale", drawn)
        p["scale"] = int(p["scale"])
    elif kind == "noise":
        drawn = float(rng.choice(NOISE_LEVELS))
        p["sigma"] = float(p.get("sigma", drawn))
    elif kind == "blur":
        k = int(p.get("kernel_size", 5))
        p["kernel_size"] = k
        if "motion_length" in p:
            p["motion_length"] = float(p["motion_length"])
            p["motion_angle"] = float(p.get("motion_angle", 0.0))
        else:
            p["sigma_blur"] = float(p.get("sigma_blur", 0.3 * ((k - 1) * 0.5 - 1) + 0.8))
    elif kind == "haze":
        t = float(rng.uniform(*HAZE_T_RANGE))
        a = float(rng.uniform(*HAZE_A_RANGE))
        p["t"] = float(p.get("t", t))
        p["A"] = float(p.get("A", a))
    elif kind == "rain":
        count = int(round(hw[0] * hw[1] / 100))
        length = float(rng.uniform(7, 15))
        angle = float(rng.uniform(-20, 20))
        intensity = float(rng.uniform(0.5, 0.8))
        p["streak_count"] = int(p.get("streak_count", count))
        p["length"] = float(p.get("length", length))
        p["angle"] = float(p.get("angle", angle))
        p["intensity"] = float(p.get("intensity", intensity))
    return p


def parse_spec(text, seed=0):
    """Parse ``kind`` or ``kind:value`` (value = the kind's main parameter)."""
    kind, _, value = text.strip().partition(":")
    kind = kind.strip().lower()
    _check_kind(kind)
    params = {}
    if value:
        try:
            num = float(value)
        except ValueError:
            raise ConfigError(f"{text!r}: value must be numeric") from None
        key = _MAIN_PARAM[kind]
        params[key] = int(num) if key in ("scale", "kernel_size", "streak_count") else num
    return DegradationSpec(kind, params, seed)


def parse_specs(text, seed=0):
    return [parse_spec(part, seed) for part in text.split(",") if part.strip()]


# -- kernels -------------------------------------------------------------------

def gaussian_kernel(size, sigma):
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(r ** 2) / (2 * sigma ** 2))
    k = torch.outer(g, g)
    return k / k.sum()


def line_kernel(size, length, angle_deg, width=0.6):
    """Anti-aliased segment through the centre, Gaussian cross-section, peak 1."""
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    yy, xx = torch.meshgrid(r, r, indexing="ij")
    a = math.radians(angle_deg)
    along = xx * math.cos(a) + yy * math.sin(a)
    perp = -xx * math.sin(a) + yy * math.cos(a)
    k = torch.exp(-(perp ** 2) / (2 * width ** 2))
    k = k * (along.abs() <= length / 2 + 0.5)
    return k / k.max()


def blur_kernel(params):
    k = params["kernel_size"]
    if "motion_length" in params:
        kern = line_kernel(k, params["motion_length"], params.get("motion_angle", 0.0), 0.5)
        return kern / kern.sum()
    return gaussian_kernel(k, params["sigma_blur"])


def _filter(img, kernel, padding_mode):
    c = img.shape[0]
    k = kernel.to(img.dtype)
    pad = k.shape[-1] // 2
    x = img[None]
    if padding_mode == "reflect":
        x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
        pad = 0
    w = k.expand(c, 1, *k.shape).contiguous()
    return F.conv2d(x, w, padding=pad, groups=c)[0]


# -- degradations -------------------------------------------------------------

def downsample(img, scale):
    """Bicubic (antialiased) downsample by an integer factor, sizes floored."""
    h, w = img.shape[-2] // scale, img.shape[-1] // scale
    return F.interpolate(img[None], size=(h, w), mode="bicubic", antialias=True,
                         align_corners=False)[0]


def upsample_to(img, size):
    return F.interpolate(img[None], size=tuple(size), mode="bicubic", align_corners=False)[0]


def degrade(clean, spec: DegradationSpec):
    """Apply ``spec`` to a ``(3, H, W)`` image in [0, 1]; output stays in [0, 1]."""
    if clean.dim() != 3:
        raise ConfigError(f"degrade expects a (C, H, W) image, got {tuple(clean.shape)}")
    rng = np.random.default_rng(spec.seed)
    p = _resolve(spec.kind, spec.params, clean.shape[-2:], rng)
    kind = spec.kind
    if kind == "noise":
        noise = torch.from_numpy(rng.standard_normal(tuple(clean.shape))).to(clean.dtype)
        out = clean + (p["sigma"] / 255.0) * noise
    elif kind == "lr":
        out = upsample_to(downsample(clean, p["scale"]), clean.shape[-2:])
    elif kind == "blur":
        out = _filter(clean, blur_kernel(p), "reflect")
    elif kind == "haze":
        out = clean * p["t"] + p["A"] * (1 - p["t"])
    else:
        out = clean + p["intensity"] * rain_layer(clean.shape[-2:], p, rng).to(clean.dtype)
    return out.clamp(0, 1)


def rain_layer(hw, p, rng):
    """Oriented streaks: random impulses convolved with a line kernel."""
    h, w = hw
    n = p["streak_count"]
    impulses = np.zeros((h, w))
    ys = rng.integers(0, h, n)
    xs = rng.integers(0, w, n)
    amps = rng.uniform(0.6, 1.0, n)
    np.add.at(impulses, (ys, xs), amps)
    size = int(math.ceil(p["length"])) | 1
    size += 2
    kern = line_kernel(size, p["length"], 90.0 + p["angle"], 0.6)
    layer = _filter(torch.from_numpy(impulses)[None], kern, "zeros")[0]
    return layer.clamp(0, 1)


def invert_haze(hazy, t, airlight):
    return (hazy - airlight * (1 - t)) / t


# -- image I/O ----------------------------------------------------------------

def to_uint8(img):
    return (img.detach().clamp(0, 1) * 255).round().to(torch.uint8)


def read_image(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DataIOError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).to(torch.float32) / 255.0


def write_image(path, img):
    arr = to_uint8(img).permute(1, 2, 0).cpu().numpy()
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr, "RGB").save(path, format="PNG")
    except OSError as exc:
        raise DataIOError(f"cannot write image {path}: {exc}") from exc
    return path


def image_size(path):
    with Image.open(path) as im:
        return im.size[1], im.size[0]


# -- toy clean images -----------------------------------------------------------

def make_toy_image(rng, size=64):
    """Gradient background with random rectangles, ellipses and striped patches."""
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / max(size - 1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
    c0, c1 = rng.uniform(0.1, 0.9, (2, 3))
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(rng.integers(4, 9)):
        color = rng.uniform(0, 1, 3)[:, None, None]
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.06, 0.3, 2)
        shape = rng.integers(0, 3)
        if shape == 0:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
            img = np.where(mask, color, img)
        elif shape == 1:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
            img = np.where(mask, color, img)
        else:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
            freq = rng.uniform(4, 14)
            phi = rng.uniform(0, np.pi)
            stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(phi) * xx + np.sin(phi) * yy))
            img = np.where(mask, color * stripes + (1 - stripes) * (1 - color), img)
    return torch.from_numpy(np.clip(img, 0, 1)).to(torch.float32)


def make_toy_images(n, size=64, seed=0):
    rng = np.random.default_rng(seed)
    return [make_toy_image(rng, size) for _ in range(n)]


def write_toy_images(out_dir, n, size=64, seed=0):
    out_dir = Path(out_dir)
    paths = []
    for i, img in enumerate(make_toy_images(n, size, seed)):
        paths.append(write_image(out_dir / f"toy_{i:04d}.png", img))
    return paths


# -- manifests ------------------------------------------------------------------

@dataclass
class ManifestEntry:
    degraded: str
    clean: str
    spec: DegradationSpec


@dataclass
class PairManifest:
    entries: list
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def path(self, rel):
        return self.root / rel

    @property
    def kinds(self):
        return sorted({e.spec.kind for e in self.entries}, key=KINDS.index)

    def filter(self, kinds=None, sigma=None):
        keep = [e for e in self.entries
                if (kinds is None or e.spec.kind in kinds)
                and (sigma is None or e.spec.params.get("sigma") == sigma)]
        return PairManifest(keep, self.root)

    def by_kind(self):
        return {k: self.filter([k]) for k in self.kinds}

    def to_text(self):
        lines = [MANIFEST_HEADER]
        for e in self.entries:
            params = json.dumps(e.spec.params, sort_keys=True, separators=(",", ":"))
            lines.append("\t".join([e.degraded, e.clean, e.spec.kind, params, str(e.spec.seed)]))
        return "\n".join(lines) + "\n"

    def write(self, path):
        try:
            Path(path).write_text(self.to_text(), encoding="utf-8")
        except OSError as exc:
            raise DataIOError(f"cannot write manifest {path}: {exc}") from exc
        return path


def merge_manifests(*manifests):
    """Combine manifests with different roots by making every path absolute."""
    entries = []
    for m in manifests:
        for e in m.entries:
            entries.append(ManifestEntry(str(m.path(e.degraded).resolve()),
                                         str(m.path(e.clean).resolve()), e.spec))
    return PairManifest(entries, Path("/"))


def derive_seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def list_images(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataIOError(f"clean image directory {directory} does not exist")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTS)


def synth_dataset(clean_dir, specs, out_dir, seed=0, manifest_name="manifest.tsv"):
    """Degrade every clean image with every spec; write PNGs and a manifest.

    Clean images are re-encoded into ``out_dir/clean`` so the manifest is
    self-contained. Returns the :class:`PairManifest` (rooted at ``out_dir``).
    """
    clean_paths = list_images(clean_dir)
    if not clean_paths:
        raise DataIOError(f"no readable images in {clean_dir}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create output directory {out_dir}: {exc}") from exc
    cleans = []
    for cp in clean_paths:
        img = read_image(cp)
        rel = f"clean/{cp.stem}.png"
        write_image(out_dir / rel, img)
        cleans.append((rel, img))
    entries = []
    for si, spec in enumerate(specs):
        sub = f"{si:02d}_{spec.label}"
        for ii, (clean_rel, img) in enumerate(cleans):
            resolved = spec.with_seed(derive_seed(seed, spec.seed, si, ii)).resolve(img.shape)
            rel = f"{sub}/{Path(clean_rel).stem}.png"
            write_image(out_dir / rel, degrade(img, resolved))
            entries.append(ManifestEntry(rel, clean_rel, resolved))
    manifest = PairManifest(entries, out_dir.resolve())
    manifest.write(out_dir / manifest_name)
    return manifest


def load_manifest(path, check_files=True, check_sizes=True):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read manifest {path}: {exc}") from exc
    root = path.resolve().parent
    entries, problems = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            problems.append(f"line {lineno}: expected 5 tab-separated columns, got {len(cols)}")
            continue
        degraded, clean, kind, params, seed = cols
        try:
            spec = DegradationSpec(kind, json.loads(params), int(seed))
        except (ConfigError, ValueError, TypeError) as exc:
            problems.append(f"line {lineno}: {exc}")
            continue
        entries.append(ManifestEntry(degraded, clean, spec))
    if problems:
        raise ManifestError(f"{path}: invalid rows:\n  " + "\n  ".join(problems))
    manifest = PairManifest(entries, root)
    if check_files:
        missing = []
        for e in entries:
            for rel in (e.degraded, e.clean):
                if not manifest.path(rel).is_file() and rel not in missing:
                    missing.append(rel)
        if missing:
            raise ManifestError(f"{path}: missing files:\n  " + "\n  ".join(missing))
        if check_sizes:
            _check_pair_sizes(manifest, path)
    return manifest


def _check_pair_sizes(manifest, source):
    bad = []
    for e in manifest.entries:
        dh, dw = image_size(manifest.path(e.degraded))
        ch, cw = image_size(manifest.path(e.clean))
        if (dh, dw) == (ch, cw):
            continue
        s = e.spec.params.get("scale")
        if e.spec.kind == "lr" and s and (ch // s, cw // s) == (dh, dw):
            continue
        bad.append(f"{e.degraded}: {dh}x{dw} vs clean {ch}x{cw}")
    if bad:
        raise ManifestError(f"{source}: inconsistent pair sizes:\n  " + "\n  ".join(bad))
