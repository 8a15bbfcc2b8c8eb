"""Recurrent cells at the encoder bottleneck and the naive fusion step.

The ConvLSTM comes in five activation/normalization layouts; layout 5
(ELU with parameter-free layer norm inside the candidate gate and on
the cell state) is the production choice and keeps the state bounded,
layout 1 (plain ELU, no normalization) is kept as the known-unstable
baseline. A ConvGRU with the analogous normalization is available as a
cheaper alternative. Gate convolutions carry no bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ConvParams, Tensor
from .errors import ContractError
from .geometry import CameraIntrinsics, Pose
from .network import BOTTLENECK_CHANNELS, DepthNetwork, StepResult, init_conv

_LSTM_GATES = ("xi", "hi", "xf", "hf", "xo", "ho", "xg", "hg")
_GRU_GATES = ("xu", "hu", "xr", "hr", "xo", "ho")


@dataclass
class RecurrentState:
    """Hidden (and, for LSTM, cell) state plus the camera it was made under."""

    hidden: Tensor  # (B, C_b, H/32, W/32)
    cell: Tensor | None
    source_pose: object  # Pose or list[Pose], parallel to the batch
    source_intrinsics: CameraIntrinsics | None = None

    def poses(self) -> list:
        b = self.hidden.shape[0]
        if isinstance(self.source_pose, Pose):
            return [self.source_pose] * b
        return list(self.source_pose)


@dataclass
class CellConfig:
    """Gate convolutions for one recurrent cell."""

    cell_kind: str  # "convlstm" | "convgru"
    configuration: int = 5
    kernels: dict = field(default_factory=dict)  # gate name -> ConvParams
    alpha: Tensor | None = None  # learnable scale for configuration 3

    def __post_init__(self):
        if self.cell_kind not in ("convlstm", "convgru"):
            raise ContractError(f"unknown cell kind {self.cell_kind!r}")
        if self.configuration not in (1, 2, 3, 4, 5):
            raise ContractError("configuration must be 1..5")
        shapes = {k.weight.shape[2:] for k in self.kernels.values()}
        if len(shapes) > 1:
            raise ContractError("gate kernels must share their spatial shape")

    def parameters(self) -> dict:
        out = {}
        for gate, conv in self.kernels.items():
            out[f"cell.w_{gate}.w"] = conv.weight
            if conv.bias is not None:
                out[f"cell.w_{gate}.b"] = conv.bias
        if self.alpha is not None:
            out["cell.alpha"] = self.alpha
        return out


def make_cell(rng, kind: str = "convlstm", configuration: int = 5,
              channels: int = BOTTLENECK_CHANNELS,
              use_bias: bool = False) -> CellConfig:
    """Random-initialized cell; bias is off per the cell equations but kept
    as an experiment knob."""
    gates = _LSTM_GATES if kind == "convlstm" else _GRU_GATES
    kernels = {g: init_conv(rng, channels, channels, bias=use_bias)
               for g in gates}
    alpha = (Tensor(np.ones(()), requires_grad=True)
             if configuration == 3 else None)
    return CellConfig(kind, configuration, kernels, alpha)


def _gate(cfg: CellConfig, x: Tensor, h: Tensor, xk: str, hk: str) -> Tensor:
    return ad.add(ad.conv2d(x, cfg.kernels[xk]), ad.conv2d(h, cfg.kernels[hk]))


def _candidate_act(cfg: CellConfig, pre: Tensor) -> Tensor:
    if cfg.configuration == 1:
        return ad.elu(pre)
    if cfg.configuration == 2:
        return ad.tanh(pre)
    if cfg.configuration == 3:
        return ad.mul(ad.tanh(pre), cfg.alpha)
    return ad.elu(ad.layer_norm_spatial(pre))


def _state_act(cfg: CellConfig, c: Tensor) -> Tensor:
    if cfg.configuration == 2:
        return ad.tanh(c)
    if cfg.configuration == 3:
        return ad.mul(ad.tanh(c), cfg.alpha)
    return ad.elu(c)


def convlstm_step(x: Tensor, prev: RecurrentState, cfg: CellConfig) -> RecurrentState:
    """One ConvLSTM update; layouts per cfg.configuration:

    1: ELU, no normalization    2: tanh, no normalization
    3: alpha*tanh (learnable)   4: layer norm also before the sigmoids
    5: layer norm inside the candidate and on the cell state only
    """
    if cfg.cell_kind != "convlstm":
        raise ContractError("convlstm_step requires a convlstm config")
    h, c = prev.hidden, prev.cell
    if h.shape != x.shape or c is None or c.shape != x.shape:
        raise ContractError(
            f"state shape {h.shape} does not match encoding {x.shape}")
    norm_sig = cfg.configuration == 4
    pre_i = _gate(cfg, x, h, "xi", "hi")
    pre_f = _gate(cfg, x, h, "xf", "hf")
    pre_o = _gate(cfg, x, h, "xo", "ho")
    if norm_sig:
        pre_i = ad.layer_norm_spatial(pre_i)
        pre_f = ad.layer_norm_spatial(pre_f)
        pre_o = ad.layer_norm_spatial(pre_o)
    i = ad.sigmoid(pre_i)
    f = ad.sigmoid(pre_f)
    o = ad.sigmoid(pre_o)
    g = _candidate_act(cfg, _gate(cfg, x, h, "xg", "hg"))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    if cfg.configuration in (4, 5):
        c_new = ad.layer_norm_spatial(c_new)
    h_new = ad.mul(o, _state_act(cfg, c_new))
    return RecurrentState(h_new, c_new, prev.source_pose, prev.source_intrinsics)


def convgru_step(x: Tensor, prev: RecurrentState, cfg: CellConfig) -> RecurrentState:
    """One ConvGRU update with the normalized-ELU layout."""
    if cfg.cell_kind != "convgru":
        raise ContractError("convgru_step requires a convgru config")
    h = prev.hidden
    if h.shape != x.shape:
        raise ContractError(
            f"state shape {h.shape} does not match encoding {x.shape}")
    u = ad.sigmoid(_gate(cfg, x, h, "xu", "hu"))
    r = ad.sigmoid(_gate(cfg, x, h, "xr", "hr"))
    pre = ad.add(ad.conv2d(x, cfg.kernels["xo"]),
                 ad.conv2d(ad.mul(h, r), cfg.kernels["ho"]))
    o = ad.elu(ad.layer_norm_spatial(pre))
    one_minus_u = ad.add(Tensor(np.ones((1,) * 4)), ad.mul(u, -1.0))
    h_new = ad.layer_norm_spatial(ad.add(ad.mul(u, h), ad.mul(one_minus_u, o)))
    return RecurrentState(h_new, None, prev.source_pose, prev.source_intrinsics)


def cell_step(x: Tensor, prev: RecurrentState, cfg: CellConfig) -> RecurrentState:
    if cfg.cell_kind == "convlstm":
        return convlstm_step(x, prev, cfg)
    return convgru_step(x, prev, cfg)


def zero_state(cfg: CellConfig, batch: int, height: int, width: int,
               pose, intrinsics=None,
               channels: int = BOTTLENECK_CHANNELS) -> RecurrentState:
    """Sequence-start state: H = C = 0 (no prior information)."""
    h = Tensor(np.zeros((batch, channels, height, width)))
    c = (Tensor(np.zeros((batch, channels, height, width)))
         if cfg.cell_kind == "convlstm" else None)
    return RecurrentState(h, c, pose, intrinsics)


def naive_fusion_step(net: DepthNetwork, cfg: CellConfig, ref_images: Tensor,
                      ref_poses, measurements: list, k: CameraIntrinsics,
                      planes, prev: RecurrentState | None,
                      ref_pyramid: list | None = None) -> StepResult:
    """Fusion without any state warping: the cell sees the previous hidden
    state as-is."""
    pyr = ref_pyramid or net.extract_features(ref_images)
    enc = net.encode_frame(pyr, ref_images, ref_poses, measurements, k, planes)
    b, cb, hb, wb = enc.bottleneck.shape
    if prev is None:
        prev = zero_state(cfg, b, hb, wb, ref_poses, k, channels=cb)
    state = cell_step(enc.bottleneck, prev, cfg)
    state.source_pose = ref_poses
    state.source_intrinsics = k
    out = net.decode_full(state.hidden, enc.skips, ref_images)
    return StepResult(out, state, pyr)


@dataclass
class StabilityReport:
    """Outcome of a long cell rollout; divergence is reported, not raised."""

    steps_completed: int
    diverged: bool
    max_magnitude: float
    divergence_step: int | None = None


def run_stability(cfg: CellConfig, inputs: list, steps: int,
                  state: RecurrentState, bound: float = 1e3,
                  perturb_step: int | None = None, perturb=None,
                  transform=None) -> StabilityReport:
    """Roll the cell forward for many steps, cycling over the inputs.

    Optionally adds a perturbation to the hidden state after one step
    and applies a per-step state transform (e.g. warping) beforehand.
    Non-finite or out-of-bound states stop the rollout and are reported.
    """
    max_mag = 0.0
    with ad.no_grad(), np.errstate(over="ignore", invalid="ignore"):
        for t in range(steps):
            if transform is not None:
                state = transform(state, t)
            state = cell_step(inputs[t % len(inputs)], state, cfg)
            if perturb_step is not None and t == perturb_step:
                state.hidden = Tensor(state.hidden.data + perturb)
            mag = float(np.abs(state.hidden.data).max())
            if state.cell is not None:
                mag = max(mag, float(np.abs(state.cell.data).max()))
            if not np.isfinite(mag) or mag >= bound:
                return StabilityReport(t + 1, True, mag, t)
            max_mag = max(max_mag, mag)
    return StabilityReport(steps, False, max_mag)
