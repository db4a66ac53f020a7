"""Two-branch pointmap transformer over the autodiff tape.

A shared (Siamese) encoder turns each image into patch tokens; twin
decoders exchange information through cross-attention and two linear
heads emit the three pointmaps with confidences.  Optional priors
(rays, normalized depth, relative pose) enter either as one-time input
embeddings ("embed") or through block-specific MLPs added inside the
first n blocks ("injectN").  Camera priors condition the encoder; the
pose embedding, being global, is broadcast over every token of the
second decoder.

Absent modalities are skipped structurally: their parameters never
join the graph, so their gradients stay exactly zero.
"""

from __future__ import annotations

import dataclasses
import functools
import re
from dataclasses import dataclass

import numpy as np

from ..conditioning import AuxiliaryBundle, encode_pose, normalize_depth_input, rays_from_intrinsics
from ..fileio import load_checkpoint, save_checkpoint
from ..geometry import ConfidenceMap, PairPrediction, PointMap, ValidationError
from .tape import Tensor, concat

_VARIANT_RE = re.compile(r"^inject([0-9]+)$")


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters; the default is the 64x64 toy size."""

    patch_size: int = 8
    dim: int = 64
    enc_blocks: int = 3
    dec_blocks: int = 3
    heads: int = 4
    variant: str = "inject1"
    seed: int = 0
    tie_decoders: bool = False

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValidationError(f"patch size must be positive, got {self.patch_size}")
        if self.enc_blocks < 1 or self.dec_blocks < 1:
            raise ValidationError("need at least one encoder and one decoder block")
        if self.dim % self.heads != 0:
            raise ValidationError(f"token width {self.dim} not divisible by {self.heads} heads")
        if self.dim % 4 != 0:
            raise ValidationError("token width must be a multiple of 4 for the positional code")
        if self.variant != "embed":
            m = _VARIANT_RE.match(self.variant)
            if m is None:
                raise ValidationError(f"variant must be 'embed' or 'injectN', got {self.variant!r}")
            n = int(m.group(1))
            if not 1 <= n <= self.dec_blocks:
                raise ValidationError(f"inject depth must lie in 1..{self.dec_blocks}, got {n}")

    @property
    def inject_depth(self) -> int:
        """0 for the embed variant, otherwise the N of injectN."""
        if self.variant == "embed":
            return 0
        return int(_VARIANT_RE.match(self.variant).group(1))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class ParameterStore:
    """Named parameter tensors, each with its gradient buffer."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValidationError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list:
        return list(self._params.values())

    @property
    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def arrays(self) -> dict:
        """Snapshot of all parameter values, by name."""
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_arrays(self, arrays: dict) -> None:
        """Overwrite parameter values in place; names and shapes must match."""
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValidationError(
                f"parameter names do not match: missing {sorted(missing)}, extra {sorted(extra)}"
            )
        for name, t in self._params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != t.data.shape:
                raise ValidationError(f"shape mismatch for {name!r}: {value.shape} vs {t.data.shape}")
            t.data = value.copy()


@functools.lru_cache(maxsize=32)
def _pos_code(grid_h: int, grid_w: int, dim: int):
    half = dim // 2
    code = np.zeros((grid_h, grid_w, dim))
    code[:, :, :half] = _sincos_1d(np.arange(grid_h), half)[:, None, :]
    code[:, :, half:] = _sincos_1d(np.arange(grid_w), half)[None, :, :]
    out = code.reshape(grid_h * grid_w, dim)
    out.flags.writeable = False
    return out


def _sincos_1d(pos, dim):
    freq = 1.0 / (10000.0 ** (np.arange(dim // 2) / (dim // 2)))
    ang = pos[:, None] * freq[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def sincos_position_code(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Fixed 2-D sine/cosine token code: row half then column half."""
    return _pos_code(grid_h, grid_w, dim)


def patchify(grids: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, T, patch*patch*C) with row-major patches."""
    grids = np.asarray(grids, dtype=np.float64)
    b, h, w, c = grids.shape
    if h % patch or w % patch:
        raise ValidationError(f"grid dims {(h, w)} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = grids.reshape(b, gh, patch, gw, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, patch * patch * c)


def _unpatchify(tokens: Tensor, grid_h: int, grid_w: int, patch: int, channels: int) -> Tensor:
    b = tokens.shape[0]
    x = tokens.reshape(b, grid_h, grid_w, patch, patch, channels)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, grid_h * patch, grid_w * patch, channels)


@dataclass
class AuxBatch:
    """Dense per-sample conditioning arrays with 0/1 presence masks.

    Rows whose mask is 0 carry zeros and do not influence the forward
    pass; a modality absent across the whole batch is skipped entirely.
    """

    k1: np.ndarray
    k1_mask: np.ndarray
    k2: np.ndarray
    k2_mask: np.ndarray
    d1: np.ndarray
    d1_mask: np.ndarray
    d2: np.ndarray
    d2_mask: np.ndarray
    p12: np.ndarray
    p12_mask: np.ndarray

    @classmethod
    def empty(cls, batch: int, h: int, w: int) -> "AuxBatch":
        def rays():
            return np.zeros((batch, h, w, 3))

        def depth():
            return np.zeros((batch, h, w, 2))

        def mask():
            return np.zeros(batch)

        return cls(rays(), mask(), rays(), mask(), depth(), mask(), depth(), mask(),
                   np.zeros((batch, 12)), mask())

    @classmethod
    def from_bundles(cls, bundles, h: int, w: int) -> "AuxBatch":
        """Stack per-pair prior bundles into batch arrays."""
        out = cls.empty(len(bundles), h, w)
        for i, bundle in enumerate(bundles):
            if bundle is None:
                continue
            for slot, field in (("k1", out.k1), ("k2", out.k2)):
                K = getattr(bundle, slot)
                if K is not None:
                    if (K.height, K.width) != (h, w):
                        raise ValidationError(f"{slot} dims {(K.height, K.width)} do not match image {(h, w)}")
                    field[i] = rays_from_intrinsics(K).directions
                    getattr(out, slot + "_mask")[i] = 1.0
            for slot, field in (("d1", out.d1), ("d2", out.d2)):
                d = getattr(bundle, slot)
                if d is not None:
                    field[i] = normalize_depth_input(d).stacked()
                    getattr(out, slot + "_mask")[i] = 1.0
            if bundle.p12 is not None:
                out.p12[i] = encode_pose(bundle.p12).vector()
                out.p12_mask[i] = 1.0
        return out


class PairNet:
    """Siamese encoder, twin cross-attending decoders and linear heads."""

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        self.params = ParameterStore()
        self._build(np.random.default_rng(cfg.seed))

    # -------------------------------------------------------- construction

    def _branch(self, idx: int) -> str:
        return "dec" if self.cfg.tie_decoders else f"dec{idx}"

    def _build(self, rng):
        cfg = self.cfg
        d = cfg.dim
        pvec = cfg.patch_size * cfg.patch_size

        def linear(name, fan_in, fan_out, scale=1.0):
            bound = scale * np.sqrt(6.0 / (fan_in + fan_out))
            self.params.add(name + ".w", rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.params.add(name + ".b", np.zeros(fan_out))

        def norm(name):
            self.params.add(name + ".g", np.ones(d))
            self.params.add(name + ".b", np.zeros(d))

        def mlp(name, fan_in=d):
            linear(name + ".fc1", fan_in, 4 * d)
            linear(name + ".fc2", 4 * d, d)

        def attn(name):
            for part in ("q", "k", "v", "o"):
                linear(f"{name}.{part}", d, d)

        linear("enc.patch", pvec * 3, d)
        if cfg.inject_depth == 0:
            linear("emb.k", pvec * 3, d)
            linear("emb.d", pvec * 2, d)
            linear("emb.p", 12, d)
        else:
            for i in range(min(cfg.inject_depth, cfg.enc_blocks)):
                mlp(f"inj.k.{i}", pvec * 3)
                mlp(f"inj.d.{i}", pvec * 2)
            for i in range(cfg.inject_depth):
                mlp(f"inj.p.{i}", 12)
        for i in range(cfg.enc_blocks):
            norm(f"enc.{i}.ln1")
            attn(f"enc.{i}.attn")
            norm(f"enc.{i}.ln2")
            mlp(f"enc.{i}.mlp")
        norm("enc.lnf")
        branches = ("dec",) if cfg.tie_decoders else ("dec1", "dec2")
        for b in branches:
            linear(f"{b}.proj", d, d)
            self.params.add(f"{b}.cls", 0.02 * rng.standard_normal(d))
            for i in range(cfg.dec_blocks):
                norm(f"{b}.{i}.ln1")
                attn(f"{b}.{i}.sa")
                norm(f"{b}.{i}.ln2")
                norm(f"{b}.{i}.lnm")
                attn(f"{b}.{i}.ca")
                norm(f"{b}.{i}.ln3")
                mlp(f"{b}.{i}.mlp")
            norm(f"{b}.lnf")
        linear("head1", d, pvec * 4, scale=0.1)
        linear("head2", d, pvec * 8, scale=0.1)
        # start the z channels at depth 1 so predicted point norms open
        # near the gt-normalized scale instead of drifting there
        b1 = self.params["head1.b"].data.reshape(cfg.patch_size, cfg.patch_size, 4)
        b1[:, :, 2] = 1.0
        b2 = self.params["head2.b"].data.reshape(cfg.patch_size, cfg.patch_size, 8)
        b2[:, :, 2] = 1.0
        b2[:, :, 6] = 1.0

    # ----------------------------------------------------------- sublayers

    def _ln(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        return x.layernorm() * p[name + ".g"] + p[name + ".b"]

    def _attn(self, x: Tensor, mem, name: str) -> Tensor:
        cfg = self.cfg
        p = self.params
        if mem is None:
            mem = x
        b, t, _ = x.shape
        s = mem.shape[1]
        nh, dh = cfg.heads, cfg.dim // cfg.heads
        q = (x @ p[name + ".q.w"] + p[name + ".q.b"]).reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
        k = (mem @ p[name + ".k.w"] + p[name + ".k.b"]).reshape(b, s, nh, dh).transpose(0, 2, 1, 3)
        v = (mem @ p[name + ".v.w"] + p[name + ".v.b"]).reshape(b, s, nh, dh).transpose(0, 2, 1, 3)
        att = ((q @ k.transpose(0, 1, 3, 2)) * (dh ** -0.5)).softmax()
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, cfg.dim)
        return out @ p[name + ".o.w"] + p[name + ".o.b"]

    def _feedforward(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        return (x @ p[name + ".fc1.w"] + p[name + ".fc1.b"]).gelu() @ p[name + ".fc2.w"] + p[name + ".fc2.b"]

    def _modality_mlp(self, raw: np.ndarray, name: str) -> Tensor:
        p = self.params
        return (raw @ p[name + ".fc1.w"] + p[name + ".fc1.b"]).gelu() @ p[name + ".fc2.w"] + p[name + ".fc2.b"]

    # ------------------------------------------------------------ pipeline

    def encode(self, images, rays=None, rays_mask=None, depth=None, depth_mask=None) -> Tensor:
        """Shared encoder over one image batch and its optional priors.

        ``images`` is (B, H, W, 3) in [0, 1]; ``rays`` (B, H, W, 3) and
        ``depth`` (B, H, W, 2) carry the per-sample priors gated by the
        (B,) 0/1 masks.  Returns (B, T, dim) patch tokens, no CLS.
        """
        cfg = self.cfg
        p = self.params
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[3] != 3:
            raise ValidationError(f"image batch must be (B, H, W, 3), got {images.shape}")
        b, h, w, _ = images.shape
        x = patchify(images * 2.0 - 1.0, cfg.patch_size) @ p["enc.patch.w"] + p["enc.patch.b"]
        x = x + sincos_position_code(h // cfg.patch_size, w // cfg.patch_size, cfg.dim)[None]

        k_tok = k_gate = d_tok = d_gate = None
        if rays is not None and rays_mask is not None and np.max(rays_mask) > 0:
            k_tok = patchify(rays, cfg.patch_size)
            k_gate = np.asarray(rays_mask, dtype=np.float64).reshape(b, 1, 1)
        if depth is not None and depth_mask is not None and np.max(depth_mask) > 0:
            d_tok = patchify(depth, cfg.patch_size)
            d_gate = np.asarray(depth_mask, dtype=np.float64).reshape(b, 1, 1)

        if cfg.inject_depth == 0:
            if k_tok is not None:
                x = x + (k_tok @ p["emb.k.w"] + p["emb.k.b"]) * k_gate
            if d_tok is not None:
                x = x + (d_tok @ p["emb.d.w"] + p["emb.d.b"]) * d_gate
        for i in range(cfg.enc_blocks):
            x = x + self._attn(self._ln(x, f"enc.{i}.ln1"), None, f"enc.{i}.attn")
            if i < cfg.inject_depth:
                if k_tok is not None:
                    x = x + self._modality_mlp(k_tok, f"inj.k.{i}") * k_gate
                if d_tok is not None:
                    x = x + self._modality_mlp(d_tok, f"inj.d.{i}") * d_gate
            x = x + self._feedforward(self._ln(x, f"enc.{i}.ln2"), f"enc.{i}.mlp")
        return self._ln(x, "enc.lnf")

    def decode(self, f1: Tensor, f2: Tensor, pose=None, pose_mask=None):
        """Twin decoders; each block cross-attends to the other branch's
        previous-block output.  The pose prior is added to every token
        of branch 2.  Returns the two (B, T+1, dim) sequences."""
        cfg = self.cfg
        p = self.params
        if f1.shape != f2.shape:
            raise ValidationError(f"branch token shapes differ: {f1.shape} vs {f2.shape}")
        b = f1.shape[0]

        p_vec = p_gate = None
        if pose is not None and pose_mask is not None and np.max(pose_mask) > 0:
            p_vec = np.asarray(pose, dtype=np.float64)
            p_gate = np.asarray(pose_mask, dtype=np.float64).reshape(b, 1, 1)

        seqs = []
        for idx, f in ((1, f1), (2, f2)):
            key = self._branch(idx)
            y = f @ p[f"{key}.proj.w"] + p[f"{key}.proj.b"]
            cls = p[f"{key}.cls"].reshape(1, 1, cfg.dim) + np.zeros((b, 1, cfg.dim))
            seq = concat([cls, y], axis=1)
            if idx == 2 and p_vec is not None and cfg.inject_depth == 0:
                seq = seq + (p_vec @ p["emb.p.w"] + p["emb.p.b"]).reshape(b, 1, cfg.dim) * p_gate
            seqs.append(seq)
        y1, y2 = seqs

        for i in range(cfg.dec_blocks):
            new = []
            for idx, own, other in ((1, y1, y2), (2, y2, y1)):
                key = self._branch(idx)
                z = own + self._attn(self._ln(own, f"{key}.{i}.ln1"), None, f"{key}.{i}.sa")
                z = z + self._attn(self._ln(z, f"{key}.{i}.ln2"),
                                   self._ln(other, f"{key}.{i}.lnm"), f"{key}.{i}.ca")
                if idx == 2 and p_vec is not None and i < cfg.inject_depth:
                    z = z + self._modality_mlp(p_vec, f"inj.p.{i}").reshape(b, 1, cfg.dim) * p_gate
                z = z + self._feedforward(self._ln(z, f"{key}.{i}.ln3"), f"{key}.{i}.mlp")
                new.append(z)
            y1, y2 = new
        return self._ln(y1, self._branch(1) + ".lnf"), self._ln(y2, self._branch(2) + ".lnf")

    def heads(self, g1: Tensor, g2: Tensor, image_hw) -> dict:
        """Linear heads: branch 1 emits x11/c11, branch 2 the two maps of
        image 2.  Confidences are 1 + exp(raw)."""
        cfg = self.cfg
        p = self.params
        h, w = image_hw
        gh, gw = h // cfg.patch_size, w // cfg.patch_size
        grid1 = _unpatchify(g1[:, 1:, :] @ p["head1.w"] + p["head1.b"], gh, gw, cfg.patch_size, 4)
        grid2 = _unpatchify(g2[:, 1:, :] @ p["head2.w"] + p["head2.b"], gh, gw, cfg.patch_size, 8)
        return {
            "x11": grid1[..., 0:3],
            "c11": grid1[..., 3].exp() + 1.0,
            "x21": grid2[..., 0:3],
            "c21": grid2[..., 3].exp() + 1.0,
            "x22": grid2[..., 4:7],
            "c22": grid2[..., 7].exp() + 1.0,
        }

    def forward(self, images1, images2, aux: AuxBatch | None = None) -> dict:
        """Full pair forward; returns the five output grids as tensors."""
        images1 = np.asarray(images1, dtype=np.float64)
        b, h, w = images1.shape[:3]
        if aux is None:
            aux = AuxBatch.empty(b, h, w)
        f1 = self.encode(images1, aux.k1, aux.k1_mask, aux.d1, aux.d1_mask)
        f2 = self.encode(images2, aux.k2, aux.k2_mask, aux.d2, aux.d2_mask)
        g1, g2 = self.decode(f1, f2, aux.p12, aux.p12_mask)
        return self.heads(g1, g2, (h, w))

    def infer_pair(self, img1, img2, bundle: AuxiliaryBundle | None = None) -> PairPrediction:
        """No-grad forward of a single pair, packaged into domain types."""
        img1 = np.asarray(img1, dtype=np.float64)
        h, w = img1.shape[:2]
        aux = AuxBatch.from_bundles([bundle if bundle is not None else AuxiliaryBundle.empty()], h, w)
        with Tensor.no_grad():
            out = self.forward(img1[None], np.asarray(img2, dtype=np.float64)[None], aux)
        full = np.ones((h, w), dtype=bool)

        def pm(key, subject, frame):
            return PointMap(out[key].data[0], full.copy(), subject=subject, frame=frame)

        def cm(key):
            return ConfidenceMap(out[key].data[0])

        return PairPrediction(x11=pm("x11", 1, 1), x21=pm("x21", 2, 1), x22=pm("x22", 2, 2),
                              c11=cm("c11"), c21=cm("c21"), c22=cm("c22"))

    # --------------------------------------------------------- persistence

    def zero_grad(self) -> None:
        self.params.zero_grad()

    @property
    def parameter_count(self) -> int:
        return self.params.count

    def save(self, path) -> None:
        save_checkpoint(path, {"net": self.cfg.to_dict()},
                        {name: t.data for name, t in self.params.items()})

    @classmethod
    def load(cls, path) -> "PairNet":
        config, tensors = load_checkpoint(path)
        net = cls(NetConfig(**config["net"]))
        net.params.load_arrays(tensors)
        return net
