"""Synthetic paired datasets and the on-disk formats (PGM, point CSV, checkpoints)."""

from __future__ import annotations

import csv
import glob
import os
from dataclasses import dataclass, field

import numpy as np

from .scores import MlpDenoiser

PGM_MAXVAL = 65535
CKPT_MAGIC = "SCOREFLOW-CKPT v1"

GMM_MEANS = np.array([[-1.0, -1.0], [1.0, 1.0]])
GMM_STD = 0.25
# x -> 0.25 x + 0.5 maps [-2, 2]^2 onto [0, 1]^2
GMM_SCALE, GMM_OFFSET = 0.25, 0.5

LABELS = ("background", "soft", "bone", "fluid")
CT_INTENSITY = {"background": 0.0, "soft": 0.35, "fluid": 0.30, "bone": 0.95}
MR_INTENSITY = {"background": 0.0, "soft": 0.70, "fluid": 0.90, "bone": 0.10}
BONE_THRESHOLD = 0.65


class FormatError(ValueError):
    pass


@dataclass
class PairedDataset:
    """Aligned (target x0, condition y) rows, flattened, values in [0, 1]."""

    x0: np.ndarray
    y: np.ndarray
    kind: str
    side: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.x0.shape[0]

    def labels(self) -> np.ndarray:
        return np.argmax(self.y, axis=1)


# ---------------------------------------------------------------------------
# generators

def gen_conditional_gmm2d(n: int, seed: int = 0) -> PairedDataset:
    """Two-class 2-D point cloud; y is one-hot, x0 ~ N(mu_y, 0.25^2 I) mapped to [0, 1]^2."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    pts = GMM_MEANS[labels] + GMM_STD * rng.standard_normal((n, 2))
    x0 = np.clip(GMM_SCALE * pts + GMM_OFFSET, 0.0, 1.0)
    y = np.eye(2)[labels]
    return PairedDataset(x0, y, "gmm2d", 0, seed,
                         {"scale": GMM_SCALE, "offset": GMM_OFFSET,
                          "means": (GMM_SCALE * GMM_MEANS + GMM_OFFSET).tolist()})


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    angle: float
    label: str

    def mask(self, size: int) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        dx, dy = xx - self.cx, yy - self.cy
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = (dx * c + dy * s) / self.a
        w = (-dx * s + dy * c) / self.b
        return u * u + w * w <= 1.0


def phantom_geometry(rng, size: int) -> list:
    """Body ellipse (soft tissue) plus 2-5 inner structures, all inside the canvas."""
    mid = (size - 1) / 2.0
    ba = rng.uniform(0.34, 0.44) * size
    bb = rng.uniform(0.28, 0.40) * size
    body = Ellipse(mid + rng.uniform(-1, 1), mid + rng.uniform(-1, 1), ba, bb, 0.0, "soft")
    shapes = [body]
    for _ in range(int(rng.integers(2, 6))):
        a = rng.uniform(0.06, 0.16) * size
        b = rng.uniform(0.06, 0.16) * size
        r = max(a, b)
        cx = np.clip(body.cx + rng.uniform(-0.5, 0.5) * ba, r, size - 1 - r)
        cy = np.clip(body.cy + rng.uniform(-0.5, 0.5) * bb, r, size - 1 - r)
        label = rng.choice(["bone", "fluid", "soft"], p=[0.45, 0.35, 0.20])
        shapes.append(Ellipse(float(cx), float(cy), a, b, rng.uniform(0, np.pi), str(label)))
    return shapes


def label_map(shapes, size: int) -> np.ndarray:
    """Integer label image (indices into LABELS); later ellipses paint over earlier ones."""
    out = np.zeros((size, size), dtype=np.int64)
    for e in shapes:
        out[e.mask(size)] = LABELS.index(e.label)
    return out


def _paint(labels, table):
    lut = np.array([table[name] for name in LABELS])
    return lut[labels]


def gen_phantom_pair(seed, size: int = 32, noise_std: float = 0.02, with_labels: bool = False):
    """Pixel-aligned (mr_like, ct_like) images sharing one ellipse geometry."""
    if size < 16:
        raise ValueError("phantom size must be >= 16")
    rng = np.random.default_rng(seed)
    labels = label_map(phantom_geometry(rng, size), size)
    mr = _paint(labels, MR_INTENSITY)
    ct = _paint(labels, CT_INTENSITY)
    if noise_std:
        mr = np.clip(mr + noise_std * rng.standard_normal(mr.shape), 0.0, 1.0)
        ct = np.clip(ct + noise_std * rng.standard_normal(ct.shape), 0.0, 1.0)
    if with_labels:
        return mr, ct, labels
    return mr, ct


def gen_phantom_dataset(n: int, seed: int = 0, size: int = 32) -> PairedDataset:
    """n phantom pairs; pair i is generated from seed sequence (seed, i)."""
    pairs = [gen_phantom_pair([seed, i], size) for i in range(n)]
    ct = np.stack([p[1].ravel() for p in pairs])
    mr = np.stack([p[0].ravel() for p in pairs])
    return PairedDataset(ct, mr, "phantom", size, seed)


def normalize_intensity(img) -> np.ndarray:
    """Min-max normalisation to [0, 1]; a constant image maps to zeros."""
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# PGM (plain "P2", 16-bit)

def write_pgm(path, img) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError("PGM images must be 2-D")
    q = np.rint(np.clip(img, 0.0, 1.0) * PGM_MAXVAL).astype(np.int64)
    h, w = q.shape
    lines = ["P2", f"{w} {h}", str(PGM_MAXVAL)]
    for row in q:
        line = ""
        for val in row:
            tok = str(val)
            if line and len(line) + 1 + len(tok) > 70:
                lines.append(line)
                line = tok
            else:
                line = tok if not line else f"{line} {tok}"
        lines.append(line)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"P5":
        raise FormatError(f"{path}: binary P5 PGM is not supported, expected plain P2")
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not an ASCII PGM") from exc
    tokens = []
    for line in text.splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] != "P2":
        raise FormatError(f"{path}: missing P2 magic")
    try:
        w, h, maxval = (int(tok) for tok in tokens[1:4])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header") from exc
    if maxval != PGM_MAXVAL:
        raise FormatError(f"{path}: maxval {maxval} != {PGM_MAXVAL}")
    body = tokens[4:]
    if len(body) < w * h:
        raise FormatError(f"{path}: truncated payload ({len(body)} of {w * h} values)")
    try:
        vals = np.array([int(tok) for tok in body[:w * h]], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: non-integer pixel value") from exc
    if vals.min(initial=0) < 0 or vals.max(initial=0) > maxval:
        raise FormatError(f"{path}: pixel value out of range")
    return vals.reshape(h, w) / float(PGM_MAXVAL)


# ---------------------------------------------------------------------------
# point CSV

def fmt(v: float) -> str:
    """Decimal with 9 significant digits, used by every CSV writer."""
    return f"{v:.9g}"


def write_csv_points(path, dataset: PairedDataset) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["x0", "x1", "y"])
        for (a, b), lab in zip(dataset.x0, dataset.labels()):
            wr.writerow([fmt(a), fmt(b), int(lab)])


def read_csv_points(path) -> PairedDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["x0", "x1", "y"]:
        raise FormatError(f"{path}: expected header x0,x1,y")
    try:
        x0 = np.array([[float(r[0]), float(r[1])] for r in rows[1:]]).reshape(-1, 2)
        labels = np.array([int(r[2]) for r in rows[1:]], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed row") from exc
    return PairedDataset(x0, np.eye(2)[labels], "gmm2d")


# ---------------------------------------------------------------------------
# checkpoints

HEAD_CODES = {"eps": 0, "sigma_score": 1}
META_KEYS = ("x_dim", "y_dim", "time_embed_dim", "head", "data_mean", "data_std",
             "T", "beta_start", "beta_end", "sigma_base", "t_max")


def format_tensor(name: str, arr) -> str:
    arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    rows, cols = arr.shape
    lines = [f"{name} {rows} {cols}"]
    lines += [" ".join(f"{v:.8e}" for v in row) for row in arr]
    return "\n".join(lines)


def write_tensors(path, tensors) -> None:
    """``tensors`` is an ordered iterable of (name, 2-D array)."""
    parts = [CKPT_MAGIC] + [format_tensor(n, a) for n, a in tensors]
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def read_tensors(path) -> list:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CKPT_MAGIC:
        raise FormatError(f"{path}: missing '{CKPT_MAGIC}' header")
    out, i = [], 1
    while i < len(lines):
        head = lines[i].split()
        if len(head) != 3:
            raise FormatError(f"{path}: bad tensor header on line {i + 1}")
        name, rows, cols = head[0], int(head[1]), int(head[2])
        body = lines[i + 1:i + 1 + rows]
        if len(body) != rows:
            raise FormatError(f"{path}: truncated tensor {name}")
        arr = np.array([[float(v) for v in ln.split()] for ln in body]).reshape(rows, cols)
        out.append((name, arr))
        i += 1 + rows
    return out


def save_checkpoint(path, model: MlpDenoiser, meta: dict) -> None:
    """Write model parameters plus schedule metadata (see META_KEYS)."""
    full = dict(meta, x_dim=model.x_dim, y_dim=model.y_dim,
                time_embed_dim=model.time_embed_dim, head=HEAD_CODES[model.head],
                data_mean=model.data_mean, data_std=model.data_std)
    row = [[float(full[k]) for k in META_KEYS]]
    write_tensors(path, [("meta", row)] + list(zip(model.param_names(), model.params)))


def load_checkpoint(path):
    """Return (MlpDenoiser, meta dict)."""
    tensors = read_tensors(path)
    if not tensors or tensors[0][0] != "meta":
        raise FormatError(f"{path}: first tensor must be 'meta'")
    meta = dict(zip(META_KEYS, tensors[0][1][0].tolist()))
    for k in ("x_dim", "y_dim", "time_embed_dim", "head", "T"):
        meta[k] = int(round(meta[k]))
    head = {v: k for k, v in HEAD_CODES.items()}[meta["head"]]
    params = [a for _, a in tensors[1:]]
    hidden = tuple(p.shape[1] for p in params[0:-2:2])
    model = MlpDenoiser(meta["x_dim"], meta["y_dim"], hidden, meta["time_embed_dim"], head,
                        params=params, data_mean=meta["data_mean"], data_std=meta["data_std"])
    meta["head"] = head
    return model, meta


# ---------------------------------------------------------------------------
# dataset directories

def write_dataset(out_dir, ds: PairedDataset) -> list:
    os.makedirs(out_dir, exist_ok=True)
    if ds.kind == "gmm2d":
        path = os.path.join(out_dir, "points.csv")
        write_csv_points(path, ds)
        return [path]
    paths = []
    for i in range(len(ds)):
        for tag, img in (("mr", ds.y[i]), ("ct", ds.x0[i])):
            p = os.path.join(out_dir, f"pair_{i:04d}_{tag}.pgm")
            write_pgm(p, img.reshape(ds.side, ds.side))
            paths.append(p)
    return paths


def load_dataset(data_dir) -> PairedDataset:
    pts = os.path.join(data_dir, "points.csv")
    if os.path.exists(pts):
        return read_csv_points(pts)
    cts = sorted(glob.glob(os.path.join(data_dir, "pair_*_ct.pgm")))
    if not cts:
        raise FormatError(f"{data_dir}: no points.csv or pair_*_ct.pgm files")
    xs, ys = [], []
    for ct_path in cts:
        ct = read_pgm(ct_path)
        mr = read_pgm(ct_path[:-len("ct.pgm")] + "mr.pgm")
        xs.append(ct.ravel())
        ys.append(mr.ravel())
    return PairedDataset(np.stack(xs), np.stack(ys), "phantom", ct.shape[0])
