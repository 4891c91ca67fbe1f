"""Network descriptions and the four-network bundle.

A network is described by a list of layer codes (``n256k3s1p1``: output
channels, cubic kernel, stride, padding) plus per-layer flags, either
built from the named presets or read from a plain-text spec file (one
layer per line), so alternative channel ladders can be supplied without
code changes.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from . import autodiff as ad
from .errors import ContractError, DimensionError, ParseError
from .rng import SeedStream, named_streams

ROLES = ("generator", "discriminator", "encoder", "code_discriminator")
PRESET_NAMES = ("adni_baseline", "sigmarat1", "sigmarat2")
LAYER_KINDS = ("dense", "conv", "tconv")
NORM_KINDS = ("none", "instance", "batch")


@dataclass(frozen=True)
class LayerCode:
    n: int
    k: int
    s: int
    p: int

    def __str__(self):
        return f"n{self.n}k{self.k}s{self.s}p{self.p}"


_FIELD_ORDER = ("n", "k", "s", "p")


def parse_layer_code(code: str) -> LayerCode:
    """Parse ``n<int>k<int>s<int>p<int>`` with the fields in that order."""
    if not isinstance(code, str):
        raise ParseError(f"layer code must be a string, got {type(code).__name__}")
    pos = 0
    values = {}
    for name in _FIELD_ORDER:
        m = re.match(rf"{name}(\d+)", code[pos:])
        if m is None:
            raise ParseError(
                f"layer code {code!r}: expected field {name!r} at position {pos}")
        values[name] = int(m.group(1))
        pos += m.end()
    if pos != len(code):
        raise ParseError(f"layer code {code!r}: trailing characters {code[pos:]!r}")
    if values["n"] < 1 or values["k"] < 1 or values["s"] < 1 or values["p"] < 0:
        raise ParseError(f"layer code {code!r}: fields out of range")
    return LayerCode(**values)


@dataclass
class LayerSpec:
    kind: str                      # dense | conv | tconv
    code: LayerCode
    spectral_norm: bool = False
    norm: str = "none"             # none | instance | batch
    activation: str | None = None  # relu | leaky_relu | tanh | None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ContractError(f"unknown layer kind {self.kind!r}")
        if self.norm not in NORM_KINDS:
            raise ContractError(f"unknown norm kind {self.norm!r}")


@dataclass
class NetworkSpec:
    role: str
    layers: list[LayerSpec] = field(default_factory=list)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ContractError(f"unknown network role {self.role!r}")

    @property
    def final_activation(self):
        return self.layers[-1].activation if self.layers else None


# ---------------------------------------------------------------------------
# text serialization (one layer per line)
# ---------------------------------------------------------------------------

def network_spec_to_text(spec: NetworkSpec) -> str:
    lines = [f"role {spec.role}"]
    for ls in spec.layers:
        parts = [ls.kind, str(ls.code)]
        if ls.spectral_norm:
            parts.append("sn")
        if ls.norm != "none":
            parts.append(f"norm={ls.norm}")
        if ls.activation:
            parts.append(f"act={ls.activation}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def network_spec_from_text(text: str) -> NetworkSpec:
    role = None
    layers = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] == "role":
            if len(tokens) != 2 or tokens[1] not in ROLES:
                raise ParseError(f"line {ln}: bad role directive {raw!r}")
            role = tokens[1]
            continue
        if role is None:
            raise ParseError(f"line {ln}: layer before 'role' directive")
        kind = tokens[0]
        if kind not in LAYER_KINDS:
            raise ParseError(f"line {ln}: unknown layer kind {kind!r}")
        if len(tokens) < 2:
            raise ParseError(f"line {ln}: missing layer code")
        code = parse_layer_code(tokens[1])
        ls = LayerSpec(kind=kind, code=code)
        for tok in tokens[2:]:
            if tok == "sn":
                ls.spectral_norm = True
            elif tok.startswith("norm="):
                value = tok[5:]
                if value not in NORM_KINDS:
                    raise ParseError(f"line {ln}: unknown norm {value!r}")
                ls.norm = value
            elif tok.startswith("act="):
                ls.activation = tok[4:]
            else:
                raise ParseError(f"line {ln}: unknown token {tok!r}")
        layers.append(ls)
    if role is None:
        raise ParseError("spec text has no 'role' directive")
    return NetworkSpec(role=role, layers=layers)


# ---------------------------------------------------------------------------
# network construction
# ---------------------------------------------------------------------------

class Network:
    """A built network: ordered (name, layer) steps plus role metadata."""

    def __init__(self, spec: NetworkSpec, steps, input_shape, output_shape):
        self.spec = spec
        self.role = spec.role
        self.steps = steps  # list of (name, Layer)
        self.input_shape = input_shape    # without batch axis
        self.output_shape = output_shape  # without batch axis

    def forward(self, x: ad.DiffTensor, training: bool = False) -> ad.DiffTensor:
        for _, layer in self.steps:
            x = layer.forward(x, training=training)
        return x

    __call__ = forward

    def parameters(self) -> dict[str, ad.DiffTensor]:
        out = {}
        for name, layer in self.steps:
            for pname, p in layer.parameters().items():
                out[f"{name}/{pname}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.steps:
            for bname, b in layer.buffers().items():
                out[f"{name}/{bname}"] = b
        return out

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        for name, layer in self.steps:
            prefix = f"{name}/"
            local = {k[len(prefix):]: v for k, v in values.items()
                     if k.startswith(prefix)}
            if local:
                layer.load_buffers(local)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def weight_layers(self):
        """Yield (name, weight layer, sn_wrapped) for every parameterized
        linear map, unwrapping spectral normalization."""
        for name, layer in self.steps:
            if isinstance(layer, nn.SpectralNorm):
                yield name, layer.layer, True
            elif isinstance(layer, nn.WEIGHT_LAYER_TYPES):
                yield name, layer, False

    def sn_layers(self):
        return [(name, layer) for name, layer in self.steps
                if isinstance(layer, nn.SpectralNorm)]

    def norm_layers(self):
        return [(name, layer) for name, layer in self.steps
                if isinstance(layer, (nn.InstanceNorm3d, nn.BatchNorm3d))]


def _infer_generator_start(conv_layers, volume_shape):
    """Inverse-propagate the output extents through the upsampling stack."""
    extents = list(volume_shape)
    for idx, ls in reversed(conv_layers):
        c = ls.code
        for ax, e in enumerate(extents):
            if ls.kind == "tconv":
                num = e + 2 * c.p - c.k
                if num % c.s != 0 or num // c.s + 1 < 1:
                    raise DimensionError(
                        f"generator layer {idx}: extent {e} not reachable by "
                        f"transposed conv {c}")
                extents[ax] = num // c.s + 1
            else:
                extents[ax] = (e - 1) * c.s + c.k - 2 * c.p
                if extents[ax] < 1:
                    raise DimensionError(
                        f"generator layer {idx}: extent {e} not reachable by conv {c}")
    return tuple(extents)


def _make_weight_layer(ls: LayerSpec, in_features, stream, dtype):
    c = ls.code
    if ls.kind == "dense":
        return nn.Dense(in_features, c.n, stream, dtype=dtype)
    if ls.kind == "conv":
        return nn.Conv3d(in_features, c.n, c.k, c.s, c.p, stream, dtype=dtype)
    return nn.ConvTranspose3d(in_features, c.n, c.k, c.s, c.p, stream, dtype=dtype)


def build_network(spec: NetworkSpec, volume_shape, latent_dim, stream: SeedStream,
                  dtype=np.float32, leaky_slope=nn.DEFAULT_LEAKY_SLOPE,
                  sn_power_iterations: int = 1) -> Network:
    """Assemble a callable network, validating shape propagation.

    Norm flags are skipped on steps whose output has a single spatial
    voxel (normalizing one voxel is degenerate), and are never applied to
    dense layers operating on flat latent vectors.
    """
    volume_shape = tuple(int(v) for v in volume_shape)
    role = spec.role
    steps = []
    vector_size = None   # set while activations are flat [N, F]
    spatial = None       # set while activations are [N, C, ...]
    channels = None

    if role == "generator":
        vector_size = latent_dim
        input_shape = (latent_dim,)
        conv_layers = [(i, ls) for i, ls in enumerate(spec.layers)
                       if ls.kind in ("conv", "tconv")]
        start_spatial = _infer_generator_start(conv_layers, volume_shape)
    elif role == "code_discriminator":
        vector_size = latent_dim
        input_shape = (latent_dim,)
    else:
        channels = 1
        spatial = volume_shape
        input_shape = (1,) + volume_shape

    for idx, ls in enumerate(spec.layers):
        c = ls.code
        if ls.kind == "dense":
            if vector_size is None:
                raise DimensionError(
                    f"{role} layer {idx}: dense layer on non-flat activations")
            out_features = c.n
            reshape_to = None
            if role == "generator" and idx == 0:
                out_features = c.n * int(np.prod(start_spatial))
                reshape_to = (c.n,) + start_spatial
            layer = nn.Dense(vector_size, out_features, stream, dtype=dtype)
            name = f"layer{idx:02d}/dense"
            if ls.spectral_norm:
                layer = nn.SpectralNorm(layer, stream, sn_power_iterations)
            steps.append((name, layer))
            if reshape_to is not None:
                steps.append((f"layer{idx:02d}/reshape", nn.Reshape(reshape_to)))
                channels, spatial, vector_size = reshape_to[0], reshape_to[1:], None
            else:
                vector_size = out_features
        else:
            if spatial is None:
                raise DimensionError(
                    f"{role} layer {idx}: convolution on flat activations")
            inner = _make_weight_layer(ls, channels, stream, dtype)
            try:
                new_spatial = inner.output_spatial(spatial)
            except Exception as exc:
                raise DimensionError(f"{role} layer {idx}: {exc}") from exc
            for e in new_spatial:
                if e < 1:
                    raise DimensionError(
                        f"{role} layer {idx}: non-positive output extent {new_spatial}")
            if ls.kind == "conv" and any(c.k > e + 2 * c.p for e in spatial):
                raise DimensionError(
                    f"{role} layer {idx}: kernel {c.k} exceeds padded extent")
            layer = inner
            name = f"layer{idx:02d}/{ls.kind}"
            if ls.spectral_norm:
                layer = nn.SpectralNorm(layer, stream, sn_power_iterations)
            steps.append((name, layer))
            channels, spatial = c.n, new_spatial

        if ls.norm != "none" and spatial is not None and int(np.prod(spatial)) >= 2:
            norm_cls = nn.InstanceNorm3d if ls.norm == "instance" else nn.BatchNorm3d
            steps.append((f"layer{idx:02d}/norm", norm_cls(channels, dtype=dtype)))
        if ls.activation:
            steps.append((f"layer{idx:02d}/act",
                          nn.Activation(ls.activation, slope=leaky_slope)))

    # role-specific heads and output validation
    if role == "generator":
        if spatial != volume_shape or channels != 1:
            raise DimensionError(
                f"generator output {channels}x{spatial} != 1x{volume_shape}")
        output_shape = (1,) + volume_shape
    elif role == "discriminator":
        if spatial is not None:
            if int(np.prod(spatial)) != 1 or channels != 1:
                raise DimensionError(
                    f"discriminator output {channels}x{spatial} is not scalar")
        elif vector_size != 1:
            raise DimensionError(f"discriminator output width {vector_size} != 1")
        steps.append(("head/squeeze", nn.Reshape(())))
        output_shape = ()
    elif role == "encoder":
        if spatial is None or int(np.prod(spatial)) != 1 or channels != latent_dim:
            raise DimensionError(
                f"encoder output {channels}x{spatial} != latent {latent_dim}")
        steps.append(("head/flatten", nn.Reshape((latent_dim,))))
        output_shape = (latent_dim,)
    else:  # code_discriminator
        if vector_size != 1:
            raise DimensionError(
                f"code_discriminator output width {vector_size} != 1")
        steps.append(("head/squeeze", nn.Reshape(())))
        output_shape = ()

    return Network(spec, steps, input_shape, output_shape)


def init_parameters(spec: NetworkSpec, volume_shape, latent_dim,
                    seed: int, dtype=np.float32) -> dict[str, ad.DiffTensor]:
    """Freshly initialized parameter set for a network spec (fan-in-scaled
    normal weights, zero biases, reproducible per seed)."""
    stream = SeedStream(seed)
    net = build_network(spec, volume_shape, latent_dim, stream, dtype=dtype)
    return net.parameters()


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

G_LADDER = (512, 256, 128, 64)
D_LADDER = (64, 128, 256, 512)
C_WIDTH = 4096
DEFAULT_LATENT = {"adni_baseline": 1000, "sigmarat1": 500, "sigmarat2": 500}


def _scaled(c: int, width_mult: float) -> int:
    return max(1, round(c * width_mult))


def preset_network_specs(name: str, volume_shape, latent_dim: int,
                         width_mult: float = 1.0) -> dict[str, NetworkSpec]:
    """The three architecture presets as network specs.

    adni_baseline: batch norm, ReLU, no spectral norm.
    sigmarat1: spectral norm on every weight layer of all four networks,
      instance norm, LeakyReLU.
    sigmarat2: spectral norm only in the discriminator and code
      discriminator, which carry no normalization layers; the generator
      and encoder keep instance norm and no spectral norm.
    """
    if name not in PRESET_NAMES:
        raise ContractError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    volume_shape = tuple(int(v) for v in volume_shape)
    for v in volume_shape:
        if v % 16 != 0:
            raise DimensionError(
                f"preset ladders downsample by 16; volume extent {v} not divisible")
    start = tuple(v // 16 for v in volume_shape)
    if name == "adni_baseline":
        act, norm = "relu", "batch"
        sn_g = sn_e = sn_dc = False
    elif name == "sigmarat1":
        act, norm = "leaky_relu", "instance"
        sn_g = sn_e = sn_dc = True
    else:
        act, norm = "leaky_relu", "instance"
        sn_g = sn_e = False
        sn_dc = True
    norm_dc = "none" if name == "sigmarat2" else norm

    g_ch = [_scaled(c, width_mult) for c in G_LADDER]
    d_ch = [_scaled(c, width_mult) for c in D_LADDER]
    c_w = _scaled(C_WIDTH, width_mult)

    g_layers = [LayerSpec("dense", LayerCode(g_ch[0], 1, 1, 0),
                          spectral_norm=sn_g, norm=norm, activation=act)]
    for ch in g_ch[1:]:
        g_layers.append(LayerSpec("tconv", LayerCode(ch, 4, 2, 1),
                                  spectral_norm=sn_g, norm=norm, activation=act))
    g_layers.append(LayerSpec("tconv", LayerCode(1, 4, 2, 1),
                              spectral_norm=sn_g, norm="none", activation="tanh"))

    def volume_head(out_n, sn):
        k = max(start)
        return LayerSpec("conv", LayerCode(out_n, k, 1, 0),
                         spectral_norm=sn, norm="none", activation=None)

    d_layers = [LayerSpec("conv", LayerCode(ch, 4, 2, 1), spectral_norm=sn_dc,
                          norm=norm_dc, activation=act) for ch in d_ch]
    d_layers.append(volume_head(1, sn_dc))

    e_layers = [LayerSpec("conv", LayerCode(ch, 4, 2, 1), spectral_norm=sn_e,
                          norm=norm, activation=act) for ch in d_ch]
    e_layers.append(volume_head(latent_dim, sn_e))

    c_layers = [
        LayerSpec("dense", LayerCode(c_w, 1, 1, 0), spectral_norm=sn_dc,
                  norm="none", activation=act),
        LayerSpec("dense", LayerCode(c_w, 1, 1, 0), spectral_norm=sn_dc,
                  norm="none", activation=act),
        LayerSpec("dense", LayerCode(1, 1, 1, 0), spectral_norm=sn_dc,
                  norm="none", activation=None),
    ]

    return {
        "generator": NetworkSpec("generator", g_layers),
        "discriminator": NetworkSpec("discriminator", d_layers),
        "encoder": NetworkSpec("encoder", e_layers),
        "code_discriminator": NetworkSpec("code_discriminator", c_layers),
    }


@dataclass
class AlphaGanBundle:
    """The assembled four-network set {G, D, E, C}."""

    generator: Network
    discriminator: Network
    encoder: Network
    code_discriminator: Network
    preset: str
    latent_dim: int
    volume_shape: tuple
    width_mult: float
    seed: int

    @property
    def networks(self) -> dict[str, Network]:
        return {"generator": self.generator, "discriminator": self.discriminator,
                "encoder": self.encoder, "code_discriminator": self.code_discriminator}

    def parameters(self) -> dict[str, ad.DiffTensor]:
        out = {}
        for role, net in self.networks.items():
            for name, p in net.parameters().items():
                out[f"{role}/{name}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for role, net in self.networks.items():
            for name, b in net.buffers().items():
                out[f"{role}/{name}"] = b
        return out

    def set_trainable(self, **flags: bool) -> None:
        for role, net in self.networks.items():
            if role in flags:
                net.set_trainable(flags[role])


def load_preset(name: str, volume_shape, latent_dim: int | None = None,
                width_mult: float = 1.0, seed: int = 0, dtype=np.float32,
                sn_power_iterations: int = 1,
                spec_overrides: dict[str, NetworkSpec] | None = None) -> AlphaGanBundle:
    """Build a full bundle for one of the architecture presets.

    ``spec_overrides`` maps roles to externally supplied network specs
    (e.g. parsed from spec files) replacing the preset's defaults.
    """
    if latent_dim is None:
        latent_dim = DEFAULT_LATENT[name] if name in DEFAULT_LATENT else 500
    if latent_dim not in (500, 1000):
        raise ContractError(f"latent_dim must be 500 or 1000, got {latent_dim}")
    specs = preset_network_specs(name, volume_shape, latent_dim, width_mult)
    if spec_overrides:
        for role, spec in spec_overrides.items():
            if role not in ROLES:
                raise ContractError(f"unknown override role {role!r}")
            specs[role] = spec
    streams = named_streams(seed, ROLES)
    nets = {}
    for role in ROLES:
        nets[role] = build_network(
            specs[role], volume_shape, latent_dim, streams[role], dtype=dtype,
            sn_power_iterations=sn_power_iterations)
    return AlphaGanBundle(
        generator=nets["generator"], discriminator=nets["discriminator"],
        encoder=nets["encoder"], code_discriminator=nets["code_discriminator"],
        preset=name, latent_dim=latent_dim, volume_shape=tuple(volume_shape),
        width_mult=width_mult, seed=seed)
