"""Style-modulated pose generator ``phi(A(f(z)))``, the transfer matrix and checkpoints.

The generator emits one ``R x R`` probability map per joint. Hidden states of
the synthesis network are modulated per layer: ``h <- lrelu(scale * LN(W h + b) + shift)``
with ``(scale, shift)`` split from that layer's style code.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MAGIC = b"FXP1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    d_z: int = 64
    d_w: int = 64
    n_layers: int = 8
    d_h: int = 64
    m: int = 13
    res: int = 32

    def __post_init__(self):
        for name, v in asdict(self).items():
            if int(v) != v or v <= 0:
                raise ValueError(f"{name} must be a positive integer")
        if self.n_layers < 4:
            raise ValueError("n_layers must be at least 4")
        if self.m < 2:
            raise ValueError("m must be at least 2")

    @property
    def d_s(self) -> int:
        return 2 * self.d_h

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        dims = [self.d_z, self.d_w, self.d_w, self.d_w]
        for i in range(3):
            shapes[f"map.{i}.w"] = (dims[i], dims[i + 1])
            shapes[f"map.{i}.b"] = (dims[i + 1],)
        for l in range(1, self.n_layers + 1):
            shapes[f"affine.{l}.w"] = (self.d_w, self.d_s)
            shapes[f"affine.{l}.b"] = (self.d_s,)
        shapes["syn.const"] = (self.d_h,)
        for l in range(1, self.n_layers + 1):
            shapes[f"syn.{l}.w"] = (self.d_h, self.d_h)
            shapes[f"syn.{l}.b"] = (self.d_h,)
        shapes["head.w"] = (self.d_h, self.m * self.res * self.res)
        shapes["head.b"] = (self.m * self.res * self.res,)
        return shapes


def pixel_grid(res: int) -> np.ndarray:
    """``(res*res, 2)`` normalized (x, y) pixel-center coordinates, row-major."""
    ax = np.arange(res, dtype=np.float64) / (res - 1)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


class Generator:
    def __init__(self, config: GeneratorConfig, params: dict[str, np.ndarray]):
        shapes = config.param_shapes()
        if set(params) != set(shapes):
            raise ValueError("parameter names do not match the config")
        self.config = config
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            self.params[name] = Tensor(arr)
        self._grid = Tensor(pixel_grid(config.res))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    # -- graph builders -------------------------------------------------

    def mapping(self, z) -> Tensor:
        z = ad.as_tensor(z)
        if z.shape[-1] != self.config.d_z:
            raise ad.ShapeError(f"latent has dim {z.shape[-1]}, expected {self.config.d_z}")
        p = self.params
        h = z
        for i in range(3):
            h = ad.linear(h, p[f"map.{i}.w"], p[f"map.{i}.b"])
            if i < 2:
                h = ad.leaky_relu(h)
        return h

    def style_codes(self, z) -> list[Tensor]:
        w = self.mapping(z)
        p = self.params
        return [ad.linear(w, p[f"affine.{l}.w"], p[f"affine.{l}.b"])
                for l in range(1, self.config.n_layers + 1)]

    def synthesize(self, codes: list[Tensor]) -> Tensor:
        """Per-joint probability maps, shape ``(B, M, R*R)``."""
        cfg, p = self.config, self.params
        if len(codes) != cfg.n_layers:
            raise ad.ShapeError(f"expected {cfg.n_layers} style codes, got {len(codes)}")
        codes = [ad.as_tensor(c) for c in codes]
        batch = codes[0].shape[0]
        for c in codes:
            if c.shape != (batch, cfg.d_s):
                raise ad.ShapeError(f"style code shape {c.shape}, expected ({batch}, {cfg.d_s})")
        h = ad.add(Tensor(np.zeros((batch, cfg.d_h))), p["syn.const"])
        for l in range(1, cfg.n_layers + 1):
            s = codes[l - 1]
            x = ad.layer_norm(ad.linear(h, p[f"syn.{l}.w"], p[f"syn.{l}.b"]))
            h = ad.leaky_relu(ad.add(ad.mul(s[:, :cfg.d_h], x), s[:, cfg.d_h:]))
        logits = ad.linear(h, p["head.w"], p["head.b"])
        logits = ad.reshape(logits, (batch, cfg.m, cfg.res * cfg.res))
        return ad.softmax(logits)

    def keypoints(self, maps: Tensor) -> Tensor:
        """Soft-argmax of ``(B, M, R*R)`` maps to ``(B, M, 2)`` normalized coordinates."""
        return ad.matmul(maps, self._grid)

    def maps_with_transfer(self, tau: "TransferMatrix | None", z) -> Tensor:
        codes = self.style_codes(z)
        if tau is not None:
            codes = tau.apply(codes)
        return self.synthesize(codes)


def init_generator(config: GeneratorConfig, seed) -> Generator:
    """Weights ~ N(0, 1/fan_in), constant input ~ N(0, 1), biases zero.

    Affine heads are the exception: the scale half starts as the identity
    (bias 1) and the shift half starts at zero (zero weights), so each style
    code initially acts as a pure per-channel gain. With zero-centered scales
    or random shifts the last layer's shift dominates the output and early
    layers lose almost all influence.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.param_shapes().items():
        if name == "syn.const":
            params[name] = rng.standard_normal(shape)
        elif name.endswith(".w"):
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        else:
            params[name] = np.zeros(shape)
    for l in range(1, config.n_layers + 1):
        params[f"affine.{l}.b"][:config.d_h] = 1.0
        params[f"affine.{l}.w"][:, config.d_h:] = 0.0
    return Generator(config, params)


def _batch(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return z[None] if z.ndim == 1 else z


def style_codes(g: Generator, z) -> np.ndarray:
    """Style codes as an array of shape ``(B, L, d_s)`` (or ``(L, d_s)`` for one latent)."""
    zb = _batch(z)
    out = np.stack([c.data for c in g.style_codes(zb)], axis=1)
    return out[0] if np.ndim(z) == 1 else out


def forward(g: Generator, codes) -> np.ndarray:
    """Heatmaps ``(B, M, R, R)`` from style codes ``(B, L, d_s)``."""
    codes = np.asarray(codes, dtype=np.float64)
    single = codes.ndim == 2
    if single:
        codes = codes[None]
    cfg = g.config
    if codes.shape[1:] != (cfg.n_layers, cfg.d_s):
        raise ad.ShapeError(f"codes shape {codes.shape[1:]}, expected ({cfg.n_layers}, {cfg.d_s})")
    maps = g.synthesize([Tensor(codes[:, l]) for l in range(cfg.n_layers)]).data
    maps = maps.reshape(len(codes), cfg.m, cfg.res, cfg.res)
    return maps[0] if single else maps


def forward_with_transfer(g: Generator, tau: "TransferMatrix | None", z) -> np.ndarray:
    """Heatmaps of the transferred generator ``phi(tau(A(f(z))))``."""
    zb = _batch(z)
    if tau is not None:
        tau.check_layout(g.config)
    cfg = g.config
    maps = g.maps_with_transfer(tau, zb).data.reshape(len(zb), cfg.m, cfg.res, cfg.res)
    return maps[0] if np.ndim(z) == 1 else maps


class TransferMatrix:
    """Block-diagonal map on the stacked style codes.

    Blocks outside ``layers`` are the identity and are never touched. Modes:

    * ``linear``: dense block ``U``, initialized to the identity;
    * ``lowrank``: ``U = I + B A`` with rank ``rank`` (``B`` starts at zero);
    * ``nonlinear``: residual two-layer map ``s + W2 lrelu(W1 s + b1) + b2``
      with ``W2 = 0`` at start.

    Internally the linear block is stored transposed so that row-vector codes
    are mapped as ``s @ u`` with ``u = U.T``.
    """

    MODES = ("linear", "lowrank", "nonlinear")

    def __init__(self, config: GeneratorConfig, layers=(3,), mode: str = "linear",
                 rank: int = 8, seed=0):
        if mode not in self.MODES:
            raise ValueError(f"unknown transfer mode {mode!r}")
        layers = tuple(sorted(set(int(l) for l in layers)))
        if not layers or layers[0] < 1 or layers[-1] > config.n_layers:
            raise ValueError(f"layer set {layers} outside [1, {config.n_layers}]")
        self.n_layers = config.n_layers
        self.d_s = config.d_s
        self.layers = layers
        self.mode = mode
        self.rank = int(rank)
        rng = np.random.default_rng(seed)
        d = self.d_s
        self.blocks: dict[int, dict[str, Tensor]] = {}
        for l in layers:
            if mode == "linear":
                blk = {"u": np.eye(d)}
            elif mode == "lowrank":
                blk = {"a": rng.standard_normal((d, self.rank)) / np.sqrt(d),
                       "b": np.zeros((self.rank, d))}
            else:
                blk = {"w1": rng.standard_normal((d, d)) / np.sqrt(d), "b1": np.zeros(d),
                       "w2": np.zeros((d, d)), "b2": np.zeros(d)}
            self.blocks[l] = {k: ad.parameter(v) for k, v in blk.items()}

    @classmethod
    def identity(cls, config: GeneratorConfig) -> "TransferMatrix":
        """An all-identity dense transfer over every layer."""
        return cls(config, range(1, config.n_layers + 1), "linear")

    def parameters(self) -> list[Tensor]:
        return [t for l in self.layers for t in self.blocks[l].values()]

    def check_layout(self, config: GeneratorConfig) -> None:
        if config.n_layers != self.n_layers or config.d_s != self.d_s:
            raise ad.ShapeError(
                f"transfer layout ({self.n_layers} x {self.d_s}) does not match generator "
                f"({config.n_layers} x {config.d_s})")

    def apply_block(self, l: int, s: Tensor) -> Tensor:
        if l not in self.blocks:
            return s
        b = self.blocks[l]
        if self.mode == "linear":
            return ad.matmul(s, b["u"])
        if self.mode == "lowrank":
            return ad.add(s, ad.matmul(ad.matmul(s, b["a"]), b["b"]))
        hid = ad.leaky_relu(ad.add(ad.matmul(s, b["w1"]), b["b1"]))
        return ad.add(s, ad.add(ad.matmul(hid, b["w2"]), b["b2"]))

    def apply(self, codes: list[Tensor]) -> list[Tensor]:
        if len(codes) != self.n_layers:
            raise ad.ShapeError(f"expected {self.n_layers} style codes, got {len(codes)}")
        return [self.apply_block(l, c) for l, c in zip(range(1, self.n_layers + 1), codes)]

    def apply_codes(self, codes) -> np.ndarray:
        """Apply to a ``(B, L, d_s)`` array of style codes."""
        codes = np.asarray(codes, dtype=np.float64)
        out = self.apply([Tensor(codes[:, l]) for l in range(self.n_layers)])
        return np.stack([t.data for t in out], axis=1)

    def matrix(self, l: int) -> np.ndarray:
        """The effective ``d_s x d_s`` block (linear and low-rank modes)."""
        if l not in self.blocks:
            return np.eye(self.d_s)
        b = self.blocks[l]
        if self.mode == "linear":
            return b["u"].data.T.copy()
        if self.mode == "lowrank":
            return np.eye(self.d_s) + (b["a"].data @ b["b"].data).T
        raise ValueError("nonlinear blocks have no matrix form")

    def set_matrix(self, l: int, mat) -> None:
        if self.mode != "linear" or l not in self.blocks:
            raise ValueError("set_matrix needs a linear block at an adapted layer")
        self.blocks[l]["u"].data[...] = np.asarray(mat, dtype=np.float64).T

    def meta(self) -> dict:
        return {"n_layers": self.n_layers, "d_s": self.d_s, "layers": list(self.layers),
                "mode": self.mode, "rank": self.rank}

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"tau.{l}.{k}": t.data for l in self.layers for k, t in self.blocks[l].items()}

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "TransferMatrix":
        cfg = GeneratorConfig(n_layers=meta["n_layers"], d_h=meta["d_s"] // 2)
        tau = cls(cfg, meta["layers"], meta["mode"], meta.get("rank", 8))
        for l in tau.layers:
            for k, t in tau.blocks[l].items():
                arr = arrays[f"tau.{l}.{k}"]
                if arr.shape != t.data.shape:
                    raise CheckpointError(f"tau.{l}.{k}: shape {arr.shape} != {t.data.shape}")
                t.data = np.array(arr, dtype=np.float64)
        return tau


# -- checkpoints ---------------------------------------------------------

def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        out.append(struct.pack("<I", len(key)) + key)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(struct.pack("<Q", arr.size) + arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("unexpected end of checkpoint data")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def arrays(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (klen,) = self.unpack("<I")
            name = self.take(klen).decode("utf-8")
            (ndim,) = self.unpack("<I")
            shape = self.unpack(f"<{ndim}I") if ndim else ()
            (size,) = self.unpack("<Q")
            if int(np.prod(shape)) != size:
                raise CheckpointError(f"{name}: size {size} inconsistent with shape {shape}")
            out[name] = np.frombuffer(self.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        return out

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)


def checkpoint_bytes(g: Generator, tau: TransferMatrix | None = None) -> bytes:
    """Serialize as: magic, u32 version, config JSON block, arrays, optional tau section, CRC-32."""
    cfg = json.dumps(asdict(g.config), sort_keys=True).encode("utf-8")
    body = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg,
            _pack_arrays({k: v.data for k, v in g.params.items()})]
    if tau is None:
        body.append(b"\x00")
    else:
        meta = json.dumps(tau.meta(), sort_keys=True).encode("utf-8")
        body += [b"\x01", struct.pack("<I", len(meta)), meta, _pack_arrays(tau.arrays())]
    payload = b"".join(body)
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def parse_checkpoint(buf: bytes) -> tuple[Generator, TransferMatrix | None]:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CheckpointError("bad magic: not a FXP1 checkpoint")
    payload, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt or truncated")
    r = _Reader(payload)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = GeneratorConfig(**json.loads(r.blob()))
    g = Generator(config, r.arrays())
    tau = None
    if r.take(1) == b"\x01":
        meta = json.loads(r.blob())
        tau = TransferMatrix.from_arrays(meta, r.arrays())
        tau.check_layout(config)
    if r.pos != len(payload):
        raise CheckpointError("trailing bytes in checkpoint")
    return g, tau


def save_checkpoint(g: Generator, tau: TransferMatrix | None, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(g, tau))


def load_checkpoint(path) -> tuple[Generator, TransferMatrix | None]:
    return parse_checkpoint(Path(path).read_bytes())
