"""The pair depth network: feature pyramid, cost-volume encoder-decoder,
multi-scale inverse-depth regression and refinement, and the L1 loss.

Layout (input H x W, divisible by 32):

* extractor: five stride-2 conv stages (16/24/32/48/64 channels) merged
  top-down into a 32-channel pyramid at scales 1/2 ... 1/32. The 1/2
  level feeds the cost volume; the rest feed encoder skip connections.
* encoder: a 1x1 aggregation conv over (cost volume, 1/2 features,
  half-res image), then four stride-2 stages with layer norm, each
  concatenating the matching pyramid level at its input. Each stage
  input is kept as a skip; the bottleneck is 128 channels at 1/32 so a
  recurrent state of the same shape can replace it.
* decoder: per scale (1/16 ... 1/2) one conv over (upsampled previous
  encoding, upsampled previous regression, skip), then a 3x3 regression
  conv + sigmoid mapping to inverse depth between d_near and d_far.
* refinement: the half-res encoding and regression are upsampled,
  concatenated with the input image and passed through two convs to
  regress full-resolution inverse depth.

Measurement and reference images share the extractor parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ConvParams, Tensor
from .cost_volume import FeatureMap, average_cost_volumes, build_cost_volume
from .errors import ContractError
from .geometry import CameraIntrinsics, DepthMap, PlaneHypotheses

CH = 32
BOTTLENECK_CHANNELS = 128

_EXTRACTOR_WIDTHS = [16, 24, 32, 48, 64]
_ENCODER_WIDTHS = [32, 48, 64, 96]
_DECODER_WIDTHS = [64, 48, 32, 32]
_REFINE_WIDTH = 16


def init_conv(rng, cin: int, cout: int, k: int = 3, stride: int = 1,
              padding: int | None = None, bias: bool = True) -> ConvParams:
    """Uniform fan-in initialization; biases start at zero."""
    bound = 1.0 / np.sqrt(cin * k * k)
    w = Tensor(rng.uniform(-bound, bound, size=(cout, cin, k, k)),
               requires_grad=True)
    b = Tensor(np.zeros(cout), requires_grad=True) if bias else None
    if padding is None:
        padding = k // 2
    return ConvParams(w, b, stride=stride, padding=padding)


@dataclass
class EncoderOutput:
    bottleneck: Tensor  # X: (B, 128, H/32, W/32)
    skips: list  # stage inputs at scales 1/2, 1/4, 1/8, 1/16


@dataclass
class ScalePrediction:
    scale: int  # resolution denominator: 16, 8, 4, 2 or 1
    encoding: Tensor
    s: Tensor  # sigmoid regression output in (0, 1)
    inverse_depth: Tensor  # metric inverse depth (B, 1, h, w)


@dataclass
class DecoderOutput:
    predictions: list  # ScalePrediction, coarse to fine, last is full-res

    @property
    def final(self) -> ScalePrediction:
        return self.predictions[-1]

    def depth_values(self) -> np.ndarray:
        return 1.0 / self.final.inverse_depth.data[:, 0]

    def depth_map(self, batch_index: int = 0) -> DepthMap:
        inv = self.final.inverse_depth.data[batch_index, 0]
        return DepthMap(1.0 / inv)


@dataclass
class StepResult:
    """One frame processed: predictions, new recurrent state (fusion modes
    only) and the reference feature pyramid for reuse as a measurement."""

    output: DecoderOutput
    state: object
    pyramid: list


class DepthNetwork:
    """Parameter container plus the forward passes of the pair network."""

    def __init__(self, rng, d_near: float = 0.25, d_far: float = 20.0,
                 num_planes: int = 64):
        if not 0 < d_near < d_far:
            raise ContractError("need 0 < d_near < d_far")
        self.d_near = d_near
        self.d_far = d_far
        self.num_planes = num_planes
        self.convs: dict[str, ConvParams] = {}
        c = self.convs
        prev = 3
        for i, width in enumerate(_EXTRACTOR_WIDTHS, start=1):
            c[f"extractor.stage{i}"] = init_conv(rng, prev, width, stride=2)
            prev = width
        for i, width in enumerate(_EXTRACTOR_WIDTHS, start=1):
            c[f"extractor.lateral{i}"] = init_conv(rng, width, CH, k=1)
            c[f"extractor.smooth{i}"] = init_conv(rng, CH, CH)
        c["encoder.agg"] = init_conv(rng, num_planes + CH + 3,
                                     _ENCODER_WIDTHS[0], k=1)
        enc_in = [_ENCODER_WIDTHS[0], _ENCODER_WIDTHS[0] + CH,
                  _ENCODER_WIDTHS[1] + CH, _ENCODER_WIDTHS[2] + CH]
        enc_out = [_ENCODER_WIDTHS[0], _ENCODER_WIDTHS[1],
                   _ENCODER_WIDTHS[2], _ENCODER_WIDTHS[3]]
        for i, (ci, co) in enumerate(zip(enc_in, enc_out), start=1):
            c[f"encoder.down{i}"] = init_conv(rng, ci, co, stride=2)
        skip_ch = enc_in
        dec_in = [
            BOTTLENECK_CHANNELS + skip_ch[3],
            _DECODER_WIDTHS[0] + 1 + skip_ch[2],
            _DECODER_WIDTHS[1] + 1 + skip_ch[1],
            _DECODER_WIDTHS[2] + 1 + skip_ch[0],
        ]
        for name, ci, co in zip(("16", "8", "4", "2"), dec_in, _DECODER_WIDTHS):
            c[f"decoder.block{name}"] = init_conv(rng, ci, co)
            c[f"decoder.reg{name}"] = init_conv(rng, co, 1)
        c["decoder.refine"] = init_conv(rng, _DECODER_WIDTHS[3] + 1 + 3,
                                        _REFINE_WIDTH)
        c["decoder.reg_full"] = init_conv(rng, _REFINE_WIDTH, 1)

    # -- parameter plumbing -------------------------------------------

    def parameters(self) -> dict:
        out = {}
        for name, conv in self.convs.items():
            out[f"{name}.w"] = conv.weight
            if conv.bias is not None:
                out[f"{name}.b"] = conv.bias
        return out

    # -- forward passes -------------------------------------------------

    def extract_features(self, images: Tensor) -> list:
        """32-channel pyramid at scales 1/2 ... 1/32 of a (B,3,H,W) image."""
        images = images if isinstance(images, Tensor) else Tensor(images)
        _, _, h, w = images.shape
        if h % 32 or w % 32:
            raise ContractError(f"image size {h}x{w} not divisible by 32")
        c = self.convs
        stages = []
        x = images
        for i in range(1, 6):
            x = ad.elu(ad.conv2d(x, c[f"extractor.stage{i}"]))
            stages.append(x)
        pyramid = [None] * 5
        top = ad.conv2d(stages[4], c["extractor.lateral5"])
        pyramid[4] = ad.conv2d(top, c["extractor.smooth5"])
        carry = top
        for i in range(3, -1, -1):
            lat = ad.conv2d(stages[i], c[f"extractor.lateral{i + 1}"])
            carry = ad.add(lat, ad.upsample_bilinear2x(carry))
            pyramid[i] = ad.conv2d(carry, c[f"extractor.smooth{i + 1}"])
        return pyramid

    def half_image(self, images: Tensor) -> Tensor:
        return ad.downsample_avg2x(images)

    def encode(self, volume, pyramid: list, image_half: Tensor) -> EncoderOutput:
        """Cost-volume encoder; each stage input is kept as a skip."""
        c = self.convs
        x = ad.concat_channels([volume.data, pyramid[0], image_half])
        x = ad.elu(ad.conv2d(x, c["encoder.agg"]))
        skips = []
        for i in range(1, 5):
            if i > 1:
                x = ad.concat_channels([x, pyramid[i - 1]])
            skips.append(x)
            x = ad.elu(ad.layer_norm_spatial(ad.conv2d(x, c[f"encoder.down{i}"])))
        bottleneck = ad.concat_channels([x, pyramid[4]])
        return EncoderOutput(bottleneck, skips)

    def regress(self, encoding: Tensor, reg: ConvParams):
        """Eq-style inverse-depth regression: sigmoid conv mapped into
        [1/d_far, 1/d_near]."""
        s = ad.sigmoid(ad.conv2d(encoding, reg))
        inv = ad.add(ad.mul(s, 1.0 / self.d_near - 1.0 / self.d_far),
                     Tensor(np.full((1,) * 4, 1.0 / self.d_far)))
        return s, inv

    def decode(self, bottleneck: Tensor, skips: list) -> list:
        """Decoder scales 1/16 ... 1/2; returns ScalePredictions."""
        c = self.convs
        preds = []
        y, s = bottleneck, None
        for name, scale, skip in zip(("16", "8", "4", "2"), (16, 8, 4, 2),
                                     reversed(skips)):
            parts = [ad.upsample_bilinear2x(y)]
            if s is not None:
                parts.append(ad.upsample_bilinear2x(s))
            parts.append(skip)
            y = ad.elu(ad.conv2d(ad.concat_channels(parts), c[f"decoder.block{name}"]))
            s, inv = self.regress(y, c[f"decoder.reg{name}"])
            preds.append(ScalePrediction(scale, y, s, inv))
        return preds

    def refine(self, half_pred: ScalePrediction, images: Tensor) -> ScalePrediction:
        """Full-resolution prediction from the half-res encoding + image."""
        c = self.convs
        x = ad.concat_channels([
            ad.upsample_bilinear2x(half_pred.encoding),
            ad.upsample_bilinear2x(half_pred.s),
            images,
        ])
        r = ad.elu(ad.conv2d(x, c["decoder.refine"]))
        s, inv = self.regress(r, c["decoder.reg_full"])
        return ScalePrediction(1, r, s, inv)

    def decode_full(self, bottleneck: Tensor, skips: list,
                    images: Tensor) -> DecoderOutput:
        preds = self.decode(bottleneck, skips)
        preds.append(self.refine(preds[-1], images))
        return DecoderOutput(preds)

    def encode_frame(self, ref_pyramid: list, ref_images: Tensor, ref_poses,
                     measurements: list, k: CameraIntrinsics,
                     planes: PlaneHypotheses) -> EncoderOutput:
        """Cost volume(s) against the measurement feature maps, averaged,
        then encoded. measurements is a list of FeatureMap."""
        k_half = k.scaled(0.5)
        ref_fm = FeatureMap(ref_pyramid[0], k_half, ref_poses)
        volumes = [build_cost_volume(ref_fm, m, planes, k_half)
                   for m in measurements]
        volume = average_cost_volumes(volumes)
        return self.encode(volume, ref_pyramid, self.half_image(ref_images))

    def forward_pair(self, ref_images: Tensor, ref_poses, measurements: list,
                     k: CameraIntrinsics, planes: PlaneHypotheses):
        pyr = self.extract_features(ref_images)
        enc = self.encode_frame(pyr, ref_images, ref_poses, measurements,
                                k, planes)
        return enc, self.decode_full(enc.bottleneck, enc.skips, ref_images)

    def pair_step(self, ref_images: Tensor, ref_poses, measurements: list,
                  k: CameraIntrinsics, planes: PlaneHypotheses,
                  ref_pyramid: list | None = None) -> StepResult:
        """Stateless per-frame prediction (the decoder consumes X directly)."""
        pyr = ref_pyramid or self.extract_features(ref_images)
        enc = self.encode_frame(pyr, ref_images, ref_poses, measurements,
                                k, planes)
        out = self.decode_full(enc.bottleneck, enc.skips, ref_images)
        return StepResult(out, None, pyr)


# -- loss ---------------------------------------------------------------


def downsample_groundtruth(values: np.ndarray, valid: np.ndarray, scale: int):
    """Nearest-neighbor (top-left anchored) groundtruth downsampling.

    A coarse pixel whose nearest sample is invalid becomes invalid, so
    depth discontinuities are never averaged across.
    """
    return values[:, ::scale, ::scale], valid[:, ::scale, ::scale]


def multiscale_loss(output: DecoderOutput, gt_values: np.ndarray,
                    gt_valid: np.ndarray) -> Tensor:
    """Sum over scales of the mean L1 error between inverse depths,
    restricted to valid groundtruth pixels."""
    gt_values = np.asarray(gt_values, dtype=np.float64)
    gt_valid = np.asarray(gt_valid, dtype=bool)
    if gt_values.ndim == 2:
        gt_values = gt_values[None]
        gt_valid = gt_valid[None]
    total = Tensor(np.zeros(()))
    for pred in output.predictions:
        vals, valid = downsample_groundtruth(gt_values, gt_valid, pred.scale)
        count = valid.sum()
        if count == 0:
            continue
        safe = np.where(valid, vals, 1.0)
        inv_gt = np.where(valid, 1.0 / safe, 0.0)[:, None]
        mask = valid[:, None].astype(np.float64)
        diff = ad.abs_(ad.add(pred.inverse_depth, Tensor(-inv_gt)))
        total = ad.add(total, ad.mul(ad.sum_all(ad.mul(diff, Tensor(mask))),
                                     1.0 / count))
    return total


# -- checkpoints ---------------------------------------------------------

_MAGIC = b"VDCK"
_VERSION = 1


def save_checkpoint(params: dict, path):
    """Little-endian binary: magic, version, tensor count, then per tensor
    (name length, utf-8 name, rank, dims as uint32, raw float64 values)."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(params)))
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ContractError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(dims)
            out[name] = data.copy()
        return out


def assign_parameters(params: dict, values: dict, strict: bool = True):
    """Load checkpoint arrays into live parameter tensors by name."""
    for name, tensor_ in params.items():
        if name not in values:
            if strict:
                raise ContractError(f"checkpoint missing parameter {name}")
            continue
        arr = values[name]
        if arr.shape != tensor_.data.shape:
            raise ContractError(
                f"parameter {name}: checkpoint shape {arr.shape} != "
                f"model shape {tensor_.data.shape}")
        tensor_.data = arr.astype(np.float64, copy=True)
