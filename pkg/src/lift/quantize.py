"""Post-training calibration and the integer inference path.

Calibration runs the float network over sample clouds, records value
ranges at every activation site, and derives per-tensor QuantParams.
Input features get per-feature params (their ranges differ by orders of
magnitude by construction); those scales are folded into the encoder
weights before weight quantization so the integer pipeline still sees a
single accumulator scale per output channel. Everything downstream is
per-tensor activations + per-output-channel weights, with fixed-point
requantizers derived at load time from the stored scales.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, ShapeError
from .network import (ConvWeights, HeadWeights, InferenceResult, NetworkConfig,
                      NetworkWeights, decode, fuse_scales, run_head)
from .pillarizer import GridConfig, PillarSet
from .quant import QuantParams, calibrate, requantize_array
from .sparse import (AddQuant, OutputQuant, SparseTensor2D, relu,
                     sparse_conv_stride2, submanifold_conv)

INPUT_FEATURES_SITE = "input_features"


def activation_sites(cfg: NetworkConfig) -> list:
    """Per-tensor activation sites, in network order."""
    sites = ["dbpfn.out"]
    for s in range(1, 5):
        for idx in range(cfg.stage_depths[s - 1] + 1):
            sites.append(f"stage{s}.layer{idx}.out")
    sites += ["align.out", "fusion.add3.out", "fusion.out",
              "head.cls.conv.out", "head.cls.out",
              "head.reg.conv.out", "head.reg.out"]
    return sites


@dataclass
class CalibrationCollector:
    """Observer accumulating activation ranges across clouds.

    minmax mode keeps running extremes only; percentile mode keeps the
    observed values per site (calibration sets are small by design) and
    clips at the requested percentile of |values| when finalizing.
    """

    mode: str = "minmax"
    percentile: float = 99.9
    lo: dict = field(default_factory=dict)
    hi: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)

    def __call__(self, site: str, values: np.ndarray):
        if values.size == 0:
            return
        axis = 0 if site == INPUT_FEATURES_SITE else None
        lo = values.min(axis=axis)
        hi = values.max(axis=axis)
        if site in self.lo:
            self.lo[site] = np.minimum(self.lo[site], lo)
            self.hi[site] = np.maximum(self.hi[site], hi)
        else:
            self.lo[site], self.hi[site] = lo, hi
        if self.mode == "percentile":
            self.values.setdefault(site, []).append(np.asarray(values, dtype=np.float64))

    def _qp_from_samples(self, samples) -> QuantParams:
        return calibrate(samples, mode=self.mode, percentile=self.percentile)

    def qparams(self, site: str) -> QuantParams:
        if site not in self.lo:
            raise CalibrationError(f"activation site {site!r} was never observed; "
                                   "use calibration clouds that reach every stage")
        if self.mode == "percentile":
            return self._qp_from_samples(np.concatenate(
                [v.ravel() for v in self.values[site]]))
        return self._qp_from_samples([float(self.lo[site]), float(self.hi[site])])

    def feature_qparams(self) -> list:
        if INPUT_FEATURES_SITE not in self.lo:
            raise CalibrationError("no input features observed")
        los, his = self.lo[INPUT_FEATURES_SITE], self.hi[INPUT_FEATURES_SITE]
        if self.mode == "percentile":
            stacked = np.concatenate(self.values[INPUT_FEATURES_SITE], axis=0)
            return [self._qp_from_samples(stacked[:, f]) for f in range(los.size)]
        return [self._qp_from_samples([float(los[f]), float(his[f])])
                for f in range(los.size)]


def _quantize_per_channel(kernel: np.ndarray, axis: int):
    """Symmetric int8 per-channel weights: scale = maxabs / 127."""
    reduce_axes = tuple(a for a in range(kernel.ndim) if a != axis)
    maxabs = np.abs(kernel).max(axis=reduce_axes)
    scales = np.where(maxabs > 0, maxabs / 127.0, 1.0 / 127.0)
    shape = [1] * kernel.ndim
    shape[axis] = -1
    q = np.clip(np.rint(kernel / scales.reshape(shape)), -127, 127).astype(np.int8)
    return q, scales


@dataclass(frozen=True)
class Int8Linear:
    q_weight: np.ndarray         # (F, H) int8, input-feature scales folded in
    weight_scales: np.ndarray    # (H,)
    bias: np.ndarray             # (H,) real


@dataclass(frozen=True)
class Int8Conv:
    q_kernel: np.ndarray         # (K, K, Cin, Cout) int8
    weight_scales: np.ndarray    # (Cout,)
    bias: np.ndarray             # (Cout,) real
    kind: str                    # submanifold | downsample
    apply_relu: bool
    in_site: str
    out_site: str


@dataclass
class Int8Network:
    feature_qps: list
    encoder: Int8Linear
    stages: list                 # 4 lists of Int8Conv
    align: Int8Conv
    head: dict                   # cls_conv / cls_out / reg_conv / reg_out
    act: dict                    # site -> QuantParams


# requantization factors must stay below 1 to be representable as a Q31
# mantissa with a non-negative shift; calibrated output scales get widened
# by this margin when an upstream scale would push a factor to 1 or above
# (the margin dwarfs f32 storage rounding, so loaded files stay valid)
_SCALE_MARGIN = 1.0 + 1.0 / 64.0


def quantize_network(weights: NetworkWeights, feature_qps: list,
                     act: dict) -> Int8Network:
    """Quantize a fused float network with calibrated activation params."""
    if weights.form != "fused":
        raise ShapeError("quantization requires a fused network")
    act = dict(act)

    def widen(site: str, needed: float):
        qp = act[site]
        if needed >= qp.scale:
            act[site] = QuantParams(scale=needed * _SCALE_MARGIN,
                                    zero_point=qp.zero_point)

    scales = np.array([qp.scale for qp in feature_qps])
    folded = weights.dbpfn.weight * scales[:, None]
    q_w, w_scales = _quantize_per_channel(folded, axis=1)
    widen("dbpfn.out", float(w_scales.max()))
    encoder = Int8Linear(q_weight=q_w, weight_scales=w_scales,
                         bias=np.asarray(weights.dbpfn.bias, dtype=np.float64))

    stages = []
    in_site = "dbpfn.out"
    for s, stage in enumerate(weights.stages, start=1):
        layers = []
        for idx, layer in enumerate(stage):
            qk, ws = _quantize_per_channel(layer.kernel, axis=3)
            out_site = f"stage{s}.layer{idx}.out"
            widen(out_site, act[in_site].scale * float(ws.max()))
            layers.append(Int8Conv(q_kernel=qk, weight_scales=ws, bias=layer.bias,
                                   kind=layer.kind, apply_relu=True,
                                   in_site=in_site, out_site=out_site))
            in_site = out_site
        stages.append(layers)

    def plain(conv: ConvWeights, kind, relu_flag, in_s, out_s) -> Int8Conv:
        qk, ws = _quantize_per_channel(np.asarray(conv.kernel, dtype=np.float64), axis=3)
        widen(out_s, act[in_s].scale * float(ws.max()))
        return Int8Conv(q_kernel=qk, weight_scales=ws,
                        bias=np.asarray(conv.bias, dtype=np.float64), kind=kind,
                        apply_relu=relu_flag, in_site=in_s, out_site=out_s)

    align = plain(weights.align, "submanifold", False,
                  f"stage2.layer{len(weights.stages[1]) - 1}.out", "align.out")
    # projected adds rescale both operands onto the output scale
    widen("fusion.add3.out", max(act["align.out"].scale,
                                 act[f"stage3.layer{len(weights.stages[2]) - 1}.out"].scale))
    widen("fusion.out", max(act["fusion.add3.out"].scale,
                            act[f"stage4.layer{len(weights.stages[3]) - 1}.out"].scale))
    head = {
        "cls_conv": plain(weights.head.cls_conv, "submanifold", True,
                          "fusion.out", "head.cls.conv.out"),
        "cls_out": plain(weights.head.cls_out, "submanifold", False,
                         "head.cls.conv.out", "head.cls.out"),
        "reg_conv": plain(weights.head.reg_conv, "submanifold", True,
                          "fusion.out", "head.reg.conv.out"),
        "reg_out": plain(weights.head.reg_out, "submanifold", False,
                         "head.reg.conv.out", "head.reg.out"),
    }
    return Int8Network(feature_qps=list(feature_qps), encoder=encoder,
                       stages=stages, align=align, head=head, act=act)


def quantize_features(features: np.ndarray, feature_qps: list) -> np.ndarray:
    scales = np.array([qp.scale for qp in feature_qps])
    zps = np.array([qp.zero_point for qp in feature_qps])
    q = np.rint(features / scales) + zps
    return np.clip(q, -128, 127).astype(np.int8)


def encode_int8(pillars: PillarSet, net: Int8Network) -> SparseTensor2D:
    """Integer dual-bound encoding: int32 accumulate, pool, requantize."""
    enc_qp = net.act["dbpfn.out"]
    hidden = net.encoder.q_weight.shape[1]
    if len(pillars) == 0:
        return SparseTensor2D.empty(pillars.width, pillars.height, 2 * hidden,
                                    qparams=enc_qp, int8=True)
    if pillars.feature_length != net.encoder.q_weight.shape[0]:
        raise ShapeError("pillar feature length does not match encoder weights")
    q = quantize_features(pillars.features, net.feature_qps)
    zps = np.array([qp.zero_point for qp in net.feature_qps], dtype=np.float64)
    # exact in float64: integer operands and sums stay far below 2^53
    acc = ((q.astype(np.float64) - zps) @ net.encoder.q_weight.astype(np.float64)
           ).astype(np.int64)
    acc += np.rint(net.encoder.bias / net.encoder.weight_scales).astype(np.int64)
    starts = pillars.offsets[:-1]
    oq = OutputQuant.from_scales(1.0, net.encoder.weight_scales, enc_qp)
    q_max = requantize_array(np.maximum.reduceat(acc, starts, axis=0),
                             oq.multipliers, oq.shifts, enc_qp.zero_point)
    q_min = requantize_array(np.minimum.reduceat(acc, starts, axis=0),
                             oq.multipliers, oq.shifts, enc_qp.zero_point)
    return SparseTensor2D.build(pillars.width, pillars.height, pillars.coords,
                                np.concatenate([q_max, q_min], axis=1), qparams=enc_qp)


def _exec_conv(x: SparseTensor2D, conv: Int8Conv, act: dict, threads: int = 1):
    in_qp = act[conv.in_site]
    out_qp = act[conv.out_site]
    oq = OutputQuant.from_scales(in_qp.scale, conv.weight_scales, out_qp)
    bias_i = np.rint(conv.bias / (in_qp.scale * conv.weight_scales)).astype(np.int64)
    op = sparse_conv_stride2 if conv.kind == "downsample" else submanifold_conv
    y = op(x, conv.q_kernel, bias_i, out_quant=oq, threads=threads)
    return relu(y) if conv.apply_relu else y


def run_int8_network(pillars: PillarSet, net: Int8Network, grid: GridConfig,
                     cfg: NetworkConfig, score_threshold: float = 0.1,
                     top_k: int = 500, threads: int = 1) -> InferenceResult:
    """Integer path, pillars to boxes; bitwise deterministic."""
    x = encode_int8(pillars, net)
    sizes = {"pillars": len(pillars), "encoder": len(x)}
    outs = []
    cur = x
    for s, layers in enumerate(net.stages, start=1):
        for conv in layers:
            cur = _exec_conv(cur, conv, net.act, threads)
        outs.append(cur)
    s2, s3, s4 = outs[1], outs[2], outs[3]
    sizes.update(stage2=len(s2), stage3=len(s3), stage4=len(s4))

    act = net.act
    align_bias = np.rint(net.align.bias /
                         (act[net.align.in_site].scale * net.align.weight_scales)
                         ).astype(np.int64)
    plan = {
        "align": OutputQuant.from_scales(act[net.align.in_site].scale,
                                         net.align.weight_scales, act["align.out"]),
        "add3": AddQuant.from_scales(act["align.out"], act["stage3.layer%d.out"
                                     % (len(net.stages[2]) - 1)], act["fusion.add3.out"]),
        "add4": AddQuant.from_scales(act["fusion.add3.out"], act["stage4.layer%d.out"
                                     % (len(net.stages[3]) - 1)], act["fusion.out"]),
    }
    fused = fuse_scales(s2, s3, s4,
                        ConvWeights(kernel=net.align.q_kernel, bias=align_bias),
                        threads=threads, int8_plan=plan)
    sizes["fused"] = len(fused)

    head_plan = {}
    head_convs = {}
    for tag in ("cls", "reg"):
        conv = net.head[f"{tag}_conv"]
        out = net.head[f"{tag}_out"]
        head_plan[f"{tag}.conv"] = OutputQuant.from_scales(
            act[conv.in_site].scale, conv.weight_scales, act[conv.out_site])
        head_plan[f"{tag}.out"] = OutputQuant.from_scales(
            act[out.in_site].scale, out.weight_scales, act[out.out_site])
        head_convs[f"{tag}_conv"] = ConvWeights(
            kernel=conv.q_kernel,
            bias=np.rint(conv.bias / (act[conv.in_site].scale * conv.weight_scales)
                         ).astype(np.int64))
        head_convs[f"{tag}_out"] = ConvWeights(
            kernel=out.q_kernel,
            bias=np.rint(out.bias / (act[out.in_site].scale * out.weight_scales)
                         ).astype(np.int64))
    head_weights = HeadWeights(cls_conv=head_convs["cls_conv"],
                               cls_out=head_convs["cls_out"],
                               reg_conv=head_convs["reg_conv"],
                               reg_out=head_convs["reg_out"])
    heatmap, regression = run_head(fused, head_weights, threads=threads,
                                   int8_plan=head_plan)
    boxes = decode(heatmap, regression, grid, cfg, score_threshold, top_k)
    return InferenceResult(boxes=boxes, heatmap=heatmap, regression=regression,
                           stage_sizes=sizes)
