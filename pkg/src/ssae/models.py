"""Encoder-decoder variants and the per-level scale-space model."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, ParameterError, ShapeError
from .pyramid import GaussianKernel1D, as_image, build_pyramid, gaussian_kernel, upsample

VARIANTS = ("dense", "spatial", "variational")
PARAM_TOLERANCE = 0.10


@dataclass
class ModelConfig:
    channels: tuple[int, int, int] = (16, 32, 64)
    slope: float = 0.1
    latent_dim: int = 128  # dense variant; the other two are solved to match its budget
    code_values: int = 64  # width of the flattened map feeding the dense latent
    kl_weight: float = 1e-4
    pad_mode: str = "zeros"
    zero_final: bool = True
    min_grid: int = 4  # smallest spatial bottleneck side; small inputs skip early decimation

    @classmethod
    def from_dict(cls, d: dict | None) -> "ModelConfig":
        d = dict(d or {})
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _conv_params(kh, cin, cout):
    return kh * kh * cin * cout + cout


def _dense_params(nin, nout):
    return nin * nout + nout


def _code_channels(input_size: int, cfg: ModelConfig) -> int:
    cells = (input_size // 8) ** 2
    return max(1, cfg.code_values // cells)


def _bottleneck_budget(input_size: int, cfg: ModelConfig) -> int:
    """Parameter count of the dense bottleneck, the reference budget for every variant."""
    c3 = cfg.channels[2]
    code_c = _code_channels(input_size, cfg)
    flat = code_c * (input_size // 8) ** 2
    n = _dense_params(flat, cfg.latent_dim) + _dense_params(cfg.latent_dim, flat)
    if code_c != c3:
        n += _conv_params(1, c3, code_c) + _conv_params(1, code_c, c3)
    return n


def _spatial_width(input_size: int, cfg: ModelConfig) -> int:
    c3 = cfg.channels[2]
    per_channel = 9 * c3 + 1 + 9 * c3
    return max(1, round((_bottleneck_budget(input_size, cfg) - c3) / per_channel))


def _variational_width(input_size: int, cfg: ModelConfig) -> int:
    c3 = cfg.channels[2]
    code_c = _code_channels(input_size, cfg)
    flat = code_c * (input_size // 8) ** 2
    fixed = flat
    if code_c != c3:
        fixed += _conv_params(1, c3, code_c) + _conv_params(1, code_c, c3)
    per_unit = 2 * (flat + 1) + flat
    return max(1, round((_bottleneck_budget(input_size, cfg) - fixed) / per_unit))


def _decimations(variant: str, input_size: int, cfg: ModelConfig) -> int:
    """Number of stride-2 encoder layers (out of three)."""
    if variant != "spatial":
        return 3
    return int(min(3, max(0, np.log2(input_size / cfg.min_grid))))


class EncoderDecoder:
    """Convolutional autoencoder mapping (N, S, S) images to (N, S, S) images.

    All variants share a three-layer encoder and a mirrored nearest-upsample
    + conv decoder; they differ only in the bottleneck. The encoder halves
    the resolution at every layer, except that the spatial variant keeps its
    code map at least ``min_grid`` cells wide by running the leading layers
    at stride 1 on small inputs.
    """

    def __init__(self, variant: str, input_size: int, config: ModelConfig | None = None, seed: int = 0):
        if variant not in VARIANTS:
            raise ParameterError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if input_size < 8 or input_size & (input_size - 1):
            raise ParameterError(f"input_size must be a power of two >= 8, got {input_size}")
        self.variant = variant
        self.input_size = input_size
        self.config = config or ModelConfig()
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._init(np.random.default_rng(seed))

    # -- construction ---------------------------------------------------

    def _add(self, name, values):
        self.params[name] = ad.parameter(values, name=name)

    def _conv(self, rng, name, k, cin, cout, zero=False):
        w = np.zeros((k, k, cin, cout)) if zero else _he(rng, (k, k, cin, cout), k * k * cin)
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(cout))

    def _dense(self, rng, name, nin, nout, scale=1.0):
        self._add(f"{name}.w", scale * _he(rng, (nin, nout), nin))
        self._add(f"{name}.b", np.zeros(nout))

    def _init(self, rng):
        cfg, s = self.config, self.input_size
        c1, c2, c3 = cfg.channels
        self._conv(rng, "enc1", 3, 1, c1)
        self._conv(rng, "enc2", 3, c1, c2)
        self._conv(rng, "enc3", 3, c2, c3)
        cells = (s // 8) ** 2
        self.code_channels = _code_channels(s, cfg)
        flat = self.code_channels * cells
        self.decimations = _decimations(self.variant, s, cfg)
        if self.variant == "spatial":
            width = _spatial_width(s, cfg)
            grid = s >> self.decimations
            self.latent_spec = (grid, grid, width)
            self._conv(rng, "code", 3, c3, width)
            self._conv(rng, "expand", 3, width, c3)
        else:
            if self.code_channels != c3:
                self._conv(rng, "reduce", 1, c3, self.code_channels)
            if self.variant == "dense":
                width = cfg.latent_dim
                self._dense(rng, "latent", flat, width)
            else:
                width = _variational_width(s, cfg)
                self._dense(rng, "mu", flat, width)
                self._dense(rng, "logvar", flat, width, scale=0.1)
            self.latent_spec = (width,)
            self._dense(rng, "unlatent", width, flat)
            if self.code_channels != c3:
                self._conv(rng, "unreduce", 1, self.code_channels, c3)
        self._conv(rng, "dec1", 3, c3, c2)
        self._conv(rng, "dec2", 3, c2, c1)
        self._conv(rng, "dec3", 3, c1, 1, zero=cfg.zero_final)

    # -- bookkeeping ----------------------------------------------------

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise DataError(f"checkpoint tensors {sorted(state)} do not match model {sorted(self.params)}")
        for name, values in state.items():
            if values.shape != self.params[name].shape:
                raise DataError(f"tensor {name!r} has shape {values.shape}, expected {self.params[name].shape}")
            self.params[name].values = np.array(values, dtype=np.float64)

    # -- forward --------------------------------------------------------

    def _conv_layer(self, x, name, stride=1, act=True):
        y = ad.conv2d(x, self.params[f"{name}.w"], stride=stride, padding="same", pad_mode=self.config.pad_mode)
        y = ad.bias_add(y, self.params[f"{name}.b"])
        return ad.leaky_relu(y, self.config.slope) if act else y

    def _dense_layer(self, x, name, act=True):
        y = ad.matmul(x, self.params[f"{name}.w"])
        y = ad.bias_add(y, self.params[f"{name}.b"])
        return ad.leaky_relu(y, self.config.slope) if act else y

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor | None]:
        """Differentiable pass on an NHWC tensor.

        Returns ``(reconstruction, kl)``; ``kl`` is None except for the
        variational variant. With ``rng`` the variational latent is sampled,
        without it the mean is decoded.
        """
        n, h, w, c = x.shape
        if (h, w, c) != (self.input_size, self.input_size, 1):
            raise ShapeError(f"model expects {self.input_size}x{self.input_size} input, got {h}x{w}x{c}")
        s8 = self.input_size // 8
        strides = [1] * (3 - self.decimations) + [2] * self.decimations
        h1 = self._conv_layer(x, "enc1", stride=strides[0])
        h2 = self._conv_layer(h1, "enc2", stride=strides[1])
        h3 = self._conv_layer(h2, "enc3", stride=strides[2])
        kl = None
        if self.variant == "spatial":
            z = self._conv_layer(h3, "code", act=False)
            b = self._conv_layer(z, "expand")
        else:
            r = self._conv_layer(h3, "reduce") if "reduce.w" in self.params else h3
            flat = ad.reshape(r, (n, -1))
            if self.variant == "dense":
                z = self._dense_layer(flat, "latent", act=False)
            else:
                mu = self._dense_layer(flat, "mu", act=False)
                logvar = self._dense_layer(flat, "logvar", act=False)
                kl = ad.gaussian_kl(mu, logvar)
                if rng is None:
                    z = mu
                else:
                    eps = rng.standard_normal(mu.shape)
                    z = ad.add(mu, ad.mul(ad.exp(ad.mul(logvar, 0.5)), eps))
            u = self._dense_layer(z, "unlatent")
            u = ad.reshape(u, (n, s8, s8, self.code_channels))
            b = self._conv_layer(u, "unreduce") if "unreduce.w" in self.params else u
        up = strides[::-1]
        d1 = self._conv_layer(self._up(b, up[0]), "dec1")
        d2 = self._conv_layer(self._up(d1, up[1]), "dec2")
        out = self._conv_layer(self._up(d2, up[2]), "dec3", act=False)
        return out, kl

    @staticmethod
    def _up(x, factor):
        return ad.upsample_nearest(x) if factor == 2 else x

    def __call__(self, images) -> np.ndarray:
        """Inference on (S, S) or (N, S, S) arrays; variational models decode the mean."""
        arr = as_image(images)
        single = arr.ndim == 2
        batch = arr[None] if single else arr.reshape(-1, *arr.shape[-2:])
        outs = []
        with ad.no_grad():
            for start in range(0, len(batch), 64):
                chunk = batch[start : start + 64]
                out, _ = self.forward(Tensor(chunk[..., None]))
                outs.append(out.values[..., 0])
        out = np.concatenate(outs)
        return out[0] if single else out.reshape(arr.shape)


def build_model(variant: str, input_size: int, config: ModelConfig | None = None, seed: int = 0) -> EncoderDecoder:
    model = EncoderDecoder(variant, input_size, config, seed)
    check_matched_complexity([model.parameter_count, *sibling_parameter_counts(input_size, model.config)])
    return model


def sibling_parameter_counts(input_size: int, config: ModelConfig | None = None) -> list[int]:
    config = config or ModelConfig()
    return [EncoderDecoder(v, input_size, config).parameter_count for v in VARIANTS]


def check_matched_complexity(counts, tolerance: float = PARAM_TOLERANCE) -> None:
    lo, hi = min(counts), max(counts)
    if hi > lo * (1.0 + tolerance):
        raise ParameterError(f"parameter counts {counts} differ by more than {tolerance:.0%}")


# -- scale-space model -----------------------------------------------------

LevelModel = Union[EncoderDecoder, Callable[[np.ndarray], np.ndarray]]


@dataclass
class ScaleSpaceModel:
    """One encoder-decoder per pyramid band plus one for the low-pass base.

    ``band_models[k]`` maps ``H_k`` to its reconstruction; ``base_model`` maps
    ``I_K``. Any callable on arrays can stand in for a network.
    """

    levels: int
    band_models: list[LevelModel]
    base_model: LevelModel | None
    kernel: GaussianKernel1D = field(default_factory=gaussian_kernel)
    variant: str = "custom"
    native_size: int | None = None
    trained: set[int] = field(default_factory=set)

    def __post_init__(self):
        if len(self.band_models) != self.levels:
            raise ParameterError(f"expected {self.levels} band models, got {len(self.band_models)}")

    @property
    def model_base(self) -> bool:
        return self.base_model is not None

    def stage_model(self, k: int) -> LevelModel | None:
        return self.base_model if k == self.levels else self.band_models[k]

    def networks(self) -> dict[int, EncoderDecoder]:
        return {k: m for k in range(self.levels + 1) if isinstance(m := self.stage_model(k), EncoderDecoder)}


def build_scale_space_model(
    variant: str,
    native_size: int,
    levels: int = 3,
    config: ModelConfig | None = None,
    coverage: float = 0.99,
    seed: int = 0,
    model_base: bool = True,
) -> ScaleSpaceModel:
    if native_size % 2**levels or native_size // 2**levels < 8:
        raise ParameterError(f"native size {native_size} cannot host {levels} levels with models >= 8 px")
    bands = [build_model(variant, native_size >> k, config, seed=seed + k) for k in range(levels)]
    base = build_model(variant, native_size >> levels, config, seed=seed + levels) if model_base else None
    return ScaleSpaceModel(levels, bands, base, gaussian_kernel(coverage), variant, native_size)


def apply_level_model(model: LevelModel | None, images: np.ndarray) -> np.ndarray:
    if model is None:
        return images
    out = np.asarray(model(images), dtype=np.float64)
    if out.shape != images.shape:
        raise ShapeError(f"level model returned {out.shape} for input {images.shape}")
    return out


def forward_band(model: LevelModel, band) -> np.ndarray:
    return apply_level_model(model, as_image(band))


def forward_base(model: LevelModel | None, base) -> np.ndarray:
    return apply_level_model(model, as_image(base))


def reconstruct_levels(model: ScaleSpaceModel, x) -> list[np.ndarray]:
    """``[Î_0, ..., Î_K]`` with ``Î_K = M_K(I_K)`` and ``Î_k = u(Î_{k+1}) + M_k(H_k)``."""
    pyr = build_pyramid(x, model.levels, model.kernel)
    recon = [None] * (model.levels + 1)
    recon[-1] = forward_base(model.base_model, pyr.base)
    for k in range(model.levels - 1, -1, -1):
        recon[k] = upsample(recon[k + 1]) + forward_band(model.band_models[k], pyr.highs[k])
    return recon


# -- bundles ---------------------------------------------------------------

MANIFEST = "manifest.json"


def save_bundle(path, model: ScaleSpaceModel | EncoderDecoder, extra: dict | None = None) -> Path:
    """Directory with a JSON manifest and one checkpoint per network."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if isinstance(model, EncoderDecoder):
        manifest = {
            "kind": "ae",
            "variant": model.variant,
            "input_sizes": [model.input_size],
            "seeds": [model.seed],
            "model_config": asdict(model.config),
            "files": ["level_0.ckpt"],
        }
        save_checkpoint(root / "level_0.ckpt", model.state_dict())
    else:
        nets = model.networks()
        if len(nets) != model.levels + int(model.model_base):
            raise ParameterError("only scale-space models built from networks can be saved")
        first = next(iter(nets.values()))
        files = []
        for k, net in nets.items():
            files.append(f"level_{k}.ckpt")
            save_checkpoint(root / files[-1], net.state_dict())
        manifest = {
            "kind": "ssae",
            "variant": model.variant,
            "levels": model.levels,
            "native_size": model.native_size,
            "model_base": model.model_base,
            "input_sizes": [net.input_size for net in nets.values()],
            "seeds": [net.seed for net in nets.values()],
            "kernel_sigma": model.kernel.sigma,
            "kernel_taps": model.kernel.taps.tolist(),
            "model_config": asdict(first.config),
            "trained": sorted(model.trained),
            "files": files,
        }
    manifest.update(extra or {})
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return root


def load_bundle(path) -> ScaleSpaceModel | EncoderDecoder:
    root = Path(path)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read bundle manifest in {root}: {exc}") from None
    cfg = ModelConfig.from_dict(manifest["model_config"])
    nets = []
    for size, seed, fname in zip(manifest["input_sizes"], manifest["seeds"], manifest["files"]):
        net = EncoderDecoder(manifest["variant"], size, cfg, seed=seed)
        net.load_state_dict(load_checkpoint(root / fname))
        nets.append(net)
    if manifest["kind"] == "ae":
        return nets[0]
    levels = manifest["levels"]
    kernel = GaussianKernel1D(taps=np.array(manifest["kernel_taps"]), sigma=manifest["kernel_sigma"])
    base = nets[levels] if manifest["model_base"] else None
    return ScaleSpaceModel(
        levels,
        nets[:levels],
        base,
        kernel,
        manifest["variant"],
        manifest["native_size"],
        trained=set(manifest.get("trained", [])),
    )
