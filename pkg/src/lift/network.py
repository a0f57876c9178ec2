"""Full detector graph: dual-bound pillar encoder, 4-stage sparse
backbone, multi-scale fusion, sparse center head, box decoding.

The encoder maps every point through one linear layer (no ReLU -- the
min half would otherwise collapse to zeros) and concatenates per-pillar
max pooling with min pooling, so each output feature is tied to the two
extreme points of its pillar instead of one. Each backbone stage is a
stride-2 reparameterizable conv followed by a run of submanifold ones;
stages 3 and 4 are added back onto stage 2's active set for the head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, StructuralError
from .pillarizer import GridConfig, PillarSet
from .reparam import (BnParams, FusedConvLayer, RepConvLayer, apply_fused,
                      apply_training_form, fuse)
from .sparse import SparseTensor2D, relu, sparse_add_projected, sparse_max_pool, submanifold_conv

DEFAULT_CLASS_NAMES = (
    "car", "truck", "construction_vehicle", "bus", "trailer",
    "barrier", "motorcycle", "pedestrian", "traffic_cone", "bicycle",
)

# regression row: [offset_x, offset_y, z, log_l, log_w, log_h, sin_yaw, cos_yaw]
REGRESSION_CHANNELS = 8
OFFSET_CLAMP = 1.0     # cells; keeps decoded centers near their site
LOG_SIZE_CLAMP = 8.0   # keeps exp() finite for arbitrary regressions


@dataclass(frozen=True)
class NetworkConfig:
    encoder_out: int = 64
    stage_channels: tuple = (64, 64, 128, 128)
    stage_depths: tuple = (6, 12, 6, 6)
    align_channels: int = 128
    num_classes: int = 10
    class_names: tuple = DEFAULT_CLASS_NAMES

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            raise StructuralError("backbone has exactly 4 stages")
        if self.encoder_out % 2 != 0:
            raise StructuralError("encoder output width must be even (max/min halves)")
        if not (self.stage_channels[2] == self.stage_channels[3] == self.align_channels):
            raise StructuralError("fusion requires align_channels == stage 3/4 channels")
        if self.num_classes < 1:
            raise StructuralError("need at least one class")
        if len(self.class_names) != self.num_classes:
            raise StructuralError("class_names length must equal num_classes")

    @property
    def encoder_hidden(self) -> int:
        """Width of the per-point linear map; pooling concat doubles it."""
        return self.encoder_out // 2


@dataclass(frozen=True)
class DbpfnParams:
    """Per-point linear map of the dual-bound encoder."""

    weight: np.ndarray           # (F_in, H)
    bias: np.ndarray             # (H,)
    bn: BnParams | None = None


@dataclass(frozen=True)
class ConvWeights:
    kernel: np.ndarray           # (K, K, Cin, Cout)
    bias: np.ndarray             # (Cout,)


@dataclass(frozen=True)
class HeadWeights:
    cls_conv: ConvWeights        # 3x3, align -> align
    cls_out: ConvWeights         # 1x1, align -> num_classes
    reg_conv: ConvWeights        # 3x3
    reg_out: ConvWeights         # 1x1, align -> 8


@dataclass(frozen=True)
class NetworkWeights:
    form: str                    # "train" | "fused"
    dbpfn: DbpfnParams
    stages: tuple                # 4 tuples of RepConvLayer | FusedConvLayer
    align: ConvWeights
    head: HeadWeights


@dataclass(frozen=True)
class DetectionBox:
    class_id: int
    class_name: str
    score: float
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise StructuralError("box sizes must be positive")
        if not math.isfinite(self.score):
            raise StructuralError("box score must be finite")


def dbpfn_encode(pillars: PillarSet, params: DbpfnParams) -> SparseTensor2D:
    """Dual-bound pillar encoding: linear map per point, then
    concat(max-pool, min-pool) over each pillar. No ReLU before the
    pooling, so the min half carries real lower-bound information."""
    if pillars.feature_length != params.weight.shape[0]:
        raise ShapeError(
            f"pillar features have length {pillars.feature_length}, "
            f"encoder expects {params.weight.shape[0]}")
    hidden = params.weight.shape[1]
    if len(pillars) == 0:
        return SparseTensor2D.empty(pillars.width, pillars.height, 2 * hidden)
    mapped = pillars.features @ params.weight.astype(np.float64) + params.bias
    if params.bn is not None:
        mapped = params.bn.apply(mapped)
    starts = pillars.offsets[:-1]
    maxs = np.maximum.reduceat(mapped, starts, axis=0)
    mins = np.minimum.reduceat(mapped, starts, axis=0)
    return SparseTensor2D.build(pillars.width, pillars.height, pillars.coords,
                                np.concatenate([maxs, mins], axis=1))


def _apply_layer(layer, x: SparseTensor2D, threads: int = 1) -> SparseTensor2D:
    if isinstance(layer, RepConvLayer):
        return apply_training_form(layer, x, threads=threads)
    return apply_fused(layer, x, threads=threads)


def run_backbone(x: SparseTensor2D, weights: NetworkWeights, threads: int = 1,
                 observer=None):
    """Run the 4 stages; returns stage 2, 3, 4 outputs (strides 4, 8, 16)."""
    outs = []
    cur = x
    for s, layers in enumerate(weights.stages, start=1):
        for idx, layer in enumerate(layers):
            cur = relu(_apply_layer(layer, cur, threads))
            if observer is not None:
                observer(f"stage{s}.layer{idx}.out", cur.features)
        outs.append(cur)
    return outs[1], outs[2], outs[3]


def fuse_scales(s2: SparseTensor2D, s3: SparseTensor2D, s4: SparseTensor2D,
                align_weights: ConvWeights, threads: int = 1, observer=None,
                int8_plan=None) -> SparseTensor2D:
    """Project stages 3 and 4 onto stage 2's active set and add.

    s2 first passes a 1x1 submanifold alignment conv to the fusion
    width. The result keeps exactly s2's active pixels.
    """
    aligned = submanifold_conv(
        s2, align_weights.kernel, align_weights.bias, threads=threads,
        out_quant=None if int8_plan is None else int8_plan["align"])
    if observer is not None:
        observer("align.out", aligned.features)
    out = sparse_add_projected(
        aligned, s3, 2, add_quant=None if int8_plan is None else int8_plan["add3"])
    if observer is not None:
        observer("fusion.add3.out", out.features)
    out = sparse_add_projected(
        out, s4, 4, add_quant=None if int8_plan is None else int8_plan["add4"])
    if observer is not None:
        observer("fusion.out", out.features)
    return out


def run_head(x: SparseTensor2D, head_weights: HeadWeights, threads: int = 1,
             observer=None, int8_plan=None):
    """Two shallow submanifold branches: class logits and box regression."""

    def branch(conv, out, tag):
        hidden = submanifold_conv(
            x, conv.kernel, conv.bias, threads=threads,
            out_quant=None if int8_plan is None else int8_plan[f"{tag}.conv"])
        hidden = relu(hidden)
        if observer is not None:
            observer(f"head.{tag}.conv.out", hidden.features)
        result = submanifold_conv(
            hidden, out.kernel, out.bias, threads=threads,
            out_quant=None if int8_plan is None else int8_plan[f"{tag}.out"])
        if observer is not None:
            observer(f"head.{tag}.out", result.features)
        return result

    heatmap = branch(head_weights.cls_conv, head_weights.cls_out, "cls")
    regression = branch(head_weights.reg_conv, head_weights.reg_out, "reg")
    return heatmap, regression


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decode(heatmap: SparseTensor2D, regression: SparseTensor2D, grid: GridConfig,
           cfg: NetworkConfig, score_threshold: float, top_k: int,
           stride: int = 4) -> list:
    """Turn head maps into boxes.

    Per class, a site survives if its score is a local maximum over the
    3x3 window of active neighbors and clears the threshold; the global
    top_k by score is kept, ties broken by ascending (class, j, i).
    Box centers use the cell-center convention (i + 0.5 + offset) with
    offsets clamped to one cell, so centers stay within the grid
    expanded by one cell at this stride.
    """
    if len(heatmap) == 0:
        return []
    if heatmap.is_int8:
        heatmap = _dequantized(heatmap)
    if regression.is_int8:
        regression = _dequantized(regression)
    if not np.array_equal(heatmap.coords, regression.coords):
        raise ShapeError("heatmap and regression maps must share an active set")

    logits = heatmap.features
    pooled = sparse_max_pool(heatmap, 3).features
    scores = _sigmoid(logits)
    candidate = (logits == pooled) & (scores >= score_threshold)
    rows, cls = np.nonzero(candidate)
    if rows.size == 0:
        return []
    cand_scores = scores[rows, cls]
    ii = heatmap.coords[rows, 0]
    jj = heatmap.coords[rows, 1]
    order = np.lexsort((ii, jj, cls, -cand_scores))[:top_k]

    cell_x = grid.pillar_size_x * stride
    cell_y = grid.pillar_size_y * stride
    boxes = []
    for idx in order:
        r, c = rows[idx], cls[idx]
        reg = regression.features[r]
        off_x = float(np.clip(reg[0], -OFFSET_CLAMP, OFFSET_CLAMP))
        off_y = float(np.clip(reg[1], -OFFSET_CLAMP, OFFSET_CLAMP))
        # the downsampled grid can overhang the range when the pillar count
        # is not a multiple of the stride; clamp centers to range + one cell
        x = (float(ii[idx]) + 0.5 + off_x) * cell_x + grid.x_min
        y = (float(jj[idx]) + 0.5 + off_y) * cell_y + grid.y_min
        x = min(max(x, grid.x_min - cell_x), grid.x_max + cell_x)
        y = min(max(y, grid.y_min - cell_y), grid.y_max + cell_y)
        sizes = np.exp(np.clip(reg[3:6], -LOG_SIZE_CLAMP, LOG_SIZE_CLAMP))
        yaw = math.atan2(reg[6], reg[7])
        if yaw <= -math.pi:
            yaw += 2.0 * math.pi
        boxes.append(DetectionBox(
            class_id=int(c),
            class_name=cfg.class_names[c],
            score=float(cand_scores[idx]),
            x=x, y=y, z=float(reg[2]),
            l=float(sizes[0]), w=float(sizes[1]), h=float(sizes[2]),
            yaw=yaw,
        ))
    return boxes


def _dequantized(x: SparseTensor2D) -> SparseTensor2D:
    feats = (x.features.astype(np.float64) - x.qparams.zero_point) * x.qparams.scale
    return SparseTensor2D(width=x.width, height=x.height, coords=x.coords,
                          features=feats, _keys=x.keys())


@dataclass
class InferenceResult:
    boxes: list
    heatmap: SparseTensor2D
    regression: SparseTensor2D
    stage_sizes: dict = field(default_factory=dict)


def run_network(pillars: PillarSet, weights: NetworkWeights, grid: GridConfig,
                cfg: NetworkConfig, score_threshold: float = 0.1, top_k: int = 500,
                threads: int = 1, observer=None) -> InferenceResult:
    """Float path, pillars to boxes, recording active-set sizes."""
    x = dbpfn_encode(pillars, weights.dbpfn)
    if observer is not None:
        observer("dbpfn.out", x.features)
    sizes = {"pillars": len(pillars), "encoder": len(x)}
    s2, s3, s4 = run_backbone(x, weights, threads=threads, observer=observer)
    sizes.update(stage2=len(s2), stage3=len(s3), stage4=len(s4))
    fused = fuse_scales(s2, s3, s4, weights.align, threads=threads, observer=observer)
    sizes["fused"] = len(fused)
    heatmap, regression = run_head(fused, weights.head, threads=threads, observer=observer)
    boxes = decode(heatmap, regression, grid, cfg, score_threshold, top_k)
    return InferenceResult(boxes=boxes, heatmap=heatmap, regression=regression,
                           stage_sizes=sizes)


# ---------------------------------------------------------------------------
# structure: fusion of a whole network, graph audit, random weights


def fuse_network(weights: NetworkWeights) -> NetworkWeights:
    """Fold every training-form layer (and the encoder BN) for inference."""
    if weights.form != "train":
        raise StructuralError("network is not in training form")
    dbpfn = weights.dbpfn
    if dbpfn.bn is not None:
        w, b = fold_linear_bn(dbpfn.weight, dbpfn.bias, dbpfn.bn)
        dbpfn = DbpfnParams(weight=w, bias=b, bn=None)
    stages = tuple(tuple(fuse(layer) for layer in stage) for stage in weights.stages)
    return NetworkWeights(form="fused", dbpfn=dbpfn, stages=stages,
                          align=weights.align, head=weights.head)


def fold_linear_bn(weight: np.ndarray, bias: np.ndarray, bn: BnParams):
    inv = bn.gamma / np.sqrt(bn.running_var + bn.epsilon)
    return weight * inv, (bias - bn.running_mean) * inv + bn.beta


@dataclass(frozen=True)
class GraphOp:
    name: str
    kind: str                    # conv | add | relu | pool | encode


def inference_graph(weights: NetworkWeights) -> list:
    """Structural op list of the network as it would execute.

    Training-form layers contribute one add per extra branch; fused
    layers contribute none, so a fused graph carries residual adds only
    at the two multi-scale fusion points.
    """
    ops = [GraphOp("dbpfn", "encode")]
    for s, stage in enumerate(weights.stages, start=1):
        for idx, layer in enumerate(stage):
            tag = f"stage{s}.layer{idx}"
            if isinstance(layer, RepConvLayer):
                branches = 3 if layer.identity_bn is not None else 2
                for b in range(branches):
                    ops.append(GraphOp(f"{tag}.branch{b}", "conv"))
                for b in range(branches - 1):
                    ops.append(GraphOp(f"{tag}.branch_sum{b}", "add"))
            else:
                ops.append(GraphOp(f"{tag}.fused", "conv"))
            ops.append(GraphOp(f"{tag}.relu", "relu"))
    ops.append(GraphOp("align", "conv"))
    ops.append(GraphOp("fusion.add3", "add"))
    ops.append(GraphOp("fusion.add4", "add"))
    for tag in ("cls", "reg"):
        ops.append(GraphOp(f"head.{tag}.conv", "conv"))
        ops.append(GraphOp(f"head.{tag}.relu", "relu"))
        ops.append(GraphOp(f"head.{tag}.out", "conv"))
    return ops


def residual_add_count(weights: NetworkWeights) -> int:
    return sum(1 for op in inference_graph(weights) if op.kind == "add")


def fusion_probe_deviation(train: NetworkWeights, fused: NetworkWeights,
                           probes: int = 16, seed: int = 0, grid: int = 16) -> float:
    """Max relative deviation of fused vs training-form layer outputs
    over random sparse probe inputs, layer by layer."""
    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for stage_t, stage_f in zip(train.stages, fused.stages):
        for layer_t, layer_f in zip(stage_t, stage_f):
            for _ in range(probes):
                n = int(rng.integers(1, grid * grid // 3))
                flat = rng.choice(grid * grid, size=n, replace=False)
                coords = np.column_stack([flat % grid, flat // grid])
                feats = rng.normal(size=(n, layer_t.cin))
                x = SparseTensor2D.build(grid, grid, coords, feats)
                out_t = apply_training_form(layer_t, x)
                out_f = apply_fused(layer_f, x)
                scale = max(np.abs(out_t.features).max(initial=0.0), 1e-30)
                dev = np.abs(out_t.features - out_f.features).max(initial=0.0) / scale
                worst = max(worst, float(dev))
    return worst


def _xavier(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _random_bn(rng, channels) -> BnParams:
    return BnParams(gamma=rng.uniform(0.5, 1.5, channels),
                    beta=rng.uniform(-0.5, 0.5, channels),
                    running_mean=rng.uniform(-0.5, 0.5, channels),
                    running_var=rng.uniform(0.5, 1.5, channels))


def _random_conv(rng, k, cin, cout) -> ConvWeights:
    fan_in, fan_out = k * k * cin, k * k * cout
    return ConvWeights(kernel=_xavier(rng, (k, k, cin, cout), fan_in, fan_out),
                       bias=_xavier(rng, (cout,), fan_in, fan_out))


def random_network_weights(cfg: NetworkConfig, feature_length: int, seed: int,
                           form: str = "fused") -> NetworkWeights:
    """Deterministic pseudo-random weights (PCG64 stream from the seed).

    Kernels, linear maps and biases draw uniform from [-b, b] with
    b = sqrt(6 / (fan_in + fan_out)). Training-form BN statistics draw
    gamma/var from [0.5, 1.5] and beta/mean from [-0.5, 0.5]. Tensors
    are drawn in serialization order, so one seed gives one file.
    """
    if form not in ("train", "fused"):
        raise StructuralError(f"unknown weight form {form!r}")
    rng = np.random.Generator(np.random.PCG64(seed))
    hidden = cfg.encoder_hidden
    dbpfn = DbpfnParams(
        weight=_xavier(rng, (feature_length, hidden), feature_length, hidden),
        bias=_xavier(rng, (hidden,), feature_length, hidden),
        bn=_random_bn(rng, hidden) if form == "train" else None)

    stages = []
    cin = cfg.encoder_out
    for s in range(4):
        cout = cfg.stage_channels[s]
        layers = []
        for idx in range(cfg.stage_depths[s] + 1):
            down = idx == 0
            lin, lout = (cin, cout) if down else (cout, cout)
            if form == "fused":
                conv = _random_conv(rng, 3, lin, lout)
                layers.append(FusedConvLayer(kernel=conv.kernel, bias=conv.bias,
                                             stride=2 if down else 1,
                                             kind="downsample" if down else "submanifold"))
            else:
                k3 = _xavier(rng, (3, 3, lin, lout), 9 * lin, 9 * lout)
                k1 = _xavier(rng, (1, 1, lin, lout), lin, lout)
                layers.append(RepConvLayer(
                    kernel3=k3, bn3=_random_bn(rng, lout),
                    kernel1=k1, bn1=_random_bn(rng, lout),
                    identity_bn=None if down else _random_bn(rng, lout),
                    stride=2 if down else 1,
                    kind="downsample" if down else "submanifold"))
        stages.append(tuple(layers))
        cin = cout

    align = _random_conv(rng, 1, cfg.stage_channels[1], cfg.align_channels)
    head = HeadWeights(
        cls_conv=_random_conv(rng, 3, cfg.align_channels, cfg.align_channels),
        cls_out=_random_conv(rng, 1, cfg.align_channels, cfg.num_classes),
        reg_conv=_random_conv(rng, 3, cfg.align_channels, cfg.align_channels),
        reg_out=_random_conv(rng, 1, cfg.align_channels, REGRESSION_CHANNELS))
    return NetworkWeights(form=form, dbpfn=dbpfn, stages=tuple(stages),
                          align=align, head=head)
