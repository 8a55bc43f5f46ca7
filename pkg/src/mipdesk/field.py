"""The radiance MLP with a hand-written reverse pass.

Graph (per sample)::

    h = relu(dense(x)) x depth          # optional input re-injection at `skip`
    tau = softplus(dense(h) - 1)
    b = dense(h)                         # linear bottleneck
    g = relu(dense([b, view_enc]))
    c = (1 + 2 eps) * sigmoid(dense(g)) - eps

The view encoding enters after the density head, so it can only affect c.
Inputs are batched as (rays, samples, features); the view encoding is
per ray and broadcast over samples.
"""

import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import rng as rng_mod

COLOR_PAD = 1e-3
DENSITY_SHIFT = 1.0

CKPT_MAGIC = b"MIPDCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    dir_dim: int
    depth: int = 4
    width: int = 64
    skip: Optional[int] = None
    view_width: Optional[int] = None

    @classmethod
    def desk(cls, in_dim, dir_dim):
        return cls(in_dim, dir_dim, depth=4, width=64)

    @classmethod
    def full(cls, in_dim, dir_dim):
        return cls(in_dim, dir_dim, depth=8, width=256, skip=4)

    @property
    def vw(self):
        return self.view_width or self.width // 2

    def layer_shapes(self):
        """(name, shape) for every parameter tensor, in declaration order."""
        shapes = []
        fan_in = self.in_dim
        for i in range(self.depth):
            shapes += [(f"trunk.{i}.w", (fan_in, self.width)), (f"trunk.{i}.b", (self.width,))]
            fan_in = self.width
            if self.skip is not None and i == self.skip:
                fan_in += self.in_dim
        shapes += [
            ("density.w", (self.width, 1)), ("density.b", (1,)),
            ("bottleneck.w", (self.width, self.width)), ("bottleneck.b", (self.width,)),
            ("view.w", (self.width + self.dir_dim, self.vw)), ("view.b", (self.vw,)),
            ("rgb.w", (self.vw, 3)), ("rgb.b", (3,)),
        ]
        return shapes

    def param_count(self):
        return sum(int(np.prod(s)) for _, s in self.layer_shapes())


def _relu(x):
    return np.maximum(x, 0)


def _sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * x))


class RadianceMlp:
    def __init__(self, spec: MlpSpec, params: dict):
        self.spec = spec
        self.params = params

    @classmethod
    def init(cls, spec: MlpSpec, seed=0, dtype=np.float32, stream_key=0):
        gen = rng_mod.stream(seed, rng_mod.INIT, stream_key)
        params = {}
        for name, shape in spec.layer_shapes():
            if name.endswith(".w"):
                bound = np.sqrt(6.0 / shape[0])
                params[name] = gen.uniform(-bound, bound, size=shape).astype(dtype)
            else:
                params[name] = np.zeros(shape, dtype=dtype)
        return cls(spec, params)

    @property
    def dtype(self):
        return self.params["trunk.0.w"].dtype

    def astype(self, dtype):
        return RadianceMlp(self.spec, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self):
        return RadianceMlp(self.spec, {k: v.copy() for k, v in self.params.items()})

    def names(self):
        return [n for n, _ in self.spec.layer_shapes()]

    def param_count(self):
        return sum(v.size for v in self.params.values())

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x, view_enc):
        """Evaluate the field.

        Args:
            x: (B, n, in_dim) spatial features.
            view_enc: (B, dir_dim) encoded view directions.

        Returns:
            tau (B, n), rgb (B, n, 3) and the cache needed by :meth:`backward`.
        """
        p, spec = self.params, self.spec
        dt = self.dtype
        x = np.asarray(x, dtype=dt)
        view_enc = np.asarray(view_enc, dtype=dt)
        if x.shape[-1] != spec.in_dim or view_enc.shape[-1] != spec.dir_dim:
            raise ValueError(f"feature dims {x.shape[-1]}/{view_enc.shape[-1]} do not match "
                             f"model {spec.in_dim}/{spec.dir_dim}")
        B, n, _ = x.shape
        inp = x.reshape(B * n, -1)
        acts = [inp]
        h = inp
        for i in range(spec.depth):
            h = _relu(h @ p[f"trunk.{i}.w"] + p[f"trunk.{i}.b"])
            if spec.skip is not None and i == spec.skip:
                h = np.concatenate([h, inp], axis=-1)
            acts.append(h)
        raw_density = (h @ p["density.w"] + p["density.b"])[:, 0]
        bottleneck = h @ p["bottleneck.w"] + p["bottleneck.b"]
        wv = p["view.w"]
        view_term = view_enc @ wv[spec.width:]
        pre_g = (bottleneck @ wv[:spec.width]).reshape(B, n, -1) + view_term[:, None, :] + p["view.b"]
        g = _relu(pre_g).reshape(B * n, -1)
        raw_rgb = g @ p["rgb.w"] + p["rgb.b"]

        tau = np.logaddexp(0, raw_density - DENSITY_SHIFT)
        sig = _sigmoid(raw_rgb)
        rgb = (1 + 2 * COLOR_PAD) * sig - COLOR_PAD
        cache = dict(acts=acts, raw_density=raw_density, bottleneck=bottleneck, view_enc=view_enc,
                     g=g, sig=sig, shape=(B, n))
        return tau.reshape(B, n), rgb.reshape(B, n, 3), cache

    def backward(self, cache, d_tau, d_rgb, grads=None):
        """Accumulate parameter gradients for upstream d_tau (B, n), d_rgb (B, n, 3)."""
        if cache is None or "acts" not in cache:
            raise ValueError("backward needs the cache from a matching forward call")
        p, spec = self.params, self.spec
        dt = self.dtype
        if grads is None:
            grads = self.zero_grads()
        B, n = cache["shape"]
        d_tau = np.asarray(d_tau, dtype=dt).reshape(B * n)
        d_rgb = np.asarray(d_rgb, dtype=dt).reshape(B * n, 3)
        acts = cache["acts"]
        h = acts[-1]

        sig = cache["sig"]
        d_raw_rgb = d_rgb * ((1 + 2 * COLOR_PAD) * sig * (1 - sig))
        g = cache["g"]
        grads["rgb.w"] += g.T @ d_raw_rgb
        grads["rgb.b"] += d_raw_rgb.sum(0)
        d_g = d_raw_rgb @ p["rgb.w"].T
        d_pre_g = d_g * (g > 0)
        grads["view.b"] += d_pre_g.sum(0)
        wv = p["view.w"]
        grads["view.w"][:spec.width] += cache["bottleneck"].T @ d_pre_g
        grads["view.w"][spec.width:] += cache["view_enc"].T @ d_pre_g.reshape(B, n, -1).sum(1)
        d_bottleneck = d_pre_g @ wv[:spec.width].T
        grads["bottleneck.w"] += h.T @ d_bottleneck
        grads["bottleneck.b"] += d_bottleneck.sum(0)
        d_h = d_bottleneck @ p["bottleneck.w"].T

        d_raw_density = d_tau * _sigmoid(cache["raw_density"] - DENSITY_SHIFT)
        grads["density.w"] += h.T @ d_raw_density[:, None]
        grads["density.b"] += d_raw_density.sum(keepdims=True)
        d_h += d_raw_density[:, None] @ p["density.w"].T

        for i in reversed(range(spec.depth)):
            out = acts[i + 1]
            if spec.skip is not None and i == spec.skip:
                d_h = d_h[:, :spec.width]
                out = out[:, :spec.width]
            d_pre = d_h * (out > 0)
            grads[f"trunk.{i}.w"] += acts[i].T @ d_pre
            grads[f"trunk.{i}.b"] += d_pre.sum(0)
            if i > 0:
                d_h = d_pre @ p[f"trunk.{i}.w"].T
        return grads

    def flat(self):
        return np.concatenate([self.params[k].ravel() for k in self.names()])


def save_checkpoint(path, models, meta=None):
    """Write models to a versioned little-endian float32 container plus a JSON sidecar."""
    header = json.dumps({
        "models": [{"spec": asdict(m.spec), "tensors": [[n, list(s)] for n, s in m.spec.layer_shapes()]}
                   for m in models],
        "meta": meta or {},
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(header)))
        f.write(header)
        for m in models:
            for name in m.names():
                f.write(np.ascontiguousarray(m.params[name], dtype="<f4").tobytes())
    with open(str(path) + ".json", "w") as f:
        json.dump(json.loads(header), f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path):
    """Returns (models, meta)."""
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen))
        models = []
        for entry in header["models"]:
            spec = MlpSpec(**entry["spec"])
            params = {}
            for name, shape in entry["tensors"]:
                count = int(np.prod(shape))
                buf = f.read(4 * count)
                if len(buf) != 4 * count:
                    raise ValueError(f"{path}: truncated tensor {name}")
                params[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
            models.append(RadianceMlp(spec, params))
    return models, header.get("meta", {})
