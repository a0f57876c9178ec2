"""Binary weight file format and its binding to network structures.

Layout (all little-endian):

    magic "LIFW" | version u32 = 1 | tensor_count u32
    per tensor:
        name     u16 length + UTF-8 bytes
        dtype    u8 (0 = f32, 1 = i8)
        rank     u8
        dims     u32 x rank
        quant    only when dtype = 1:
                 per_channel u8;
                 0 -> scale f32, zero_point i32
                 1 -> axis u8, count u32, scales f32 x C, zero_points i32 x C
        payload  row-major

Tensor names are unique and follow "stage{S}.layer{L}.{branch}.{param}"
for backbone layers so the fuse command can locate branches
structurally. Activation quantization parameters ride along as f32
tensors named "act.{site}.scale" / "act.{site}.zero_point".
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import EngineConfig
from .errors import FormatError, StructuralError
from .network import (REGRESSION_CHANNELS, BnParams, ConvWeights, DbpfnParams,
                      FusedConvLayer, HeadWeights, NetworkWeights, RepConvLayer)
from .quant import QuantParams
from .quantize import Int8Conv, Int8Linear, Int8Network, activation_sites

MAGIC = b"LIFW"
VERSION = 1
DTYPE_F32 = 0
DTYPE_I8 = 1

BN_PARAMS = ("gamma", "beta", "mean", "var")


@dataclass(frozen=True)
class TensorQuant:
    axis: int | None             # None = per-tensor
    scales: np.ndarray           # float32 (C,) or (1,)
    zero_points: np.ndarray      # int32, same length


@dataclass
class TensorRecord:
    name: str
    data: np.ndarray             # float32 or int8
    quant: TensorQuant | None = None


def _f32(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a), dtype=np.float32)


def write_weight_file(path, records) -> None:
    names = [r.name for r in records]
    if len(set(names)) != len(names):
        raise StructuralError("tensor names must be unique")
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(records))
    for r in records:
        data = r.data
        if data.dtype == np.float32:
            dtype = DTYPE_F32
        elif data.dtype == np.int8:
            dtype = DTYPE_I8
        else:
            raise StructuralError(f"tensor {r.name}: unsupported dtype {data.dtype}")
        if (r.quant is not None) != (dtype == DTYPE_I8):
            raise StructuralError(f"tensor {r.name}: quant block must accompany i8 data")
        name = r.name.encode("utf-8")
        buf += struct.pack("<H", len(name)) + name
        buf += struct.pack("<BB", dtype, data.ndim)
        buf += struct.pack(f"<{data.ndim}I", *data.shape)
        if dtype == DTYPE_I8:
            q = r.quant
            if q.axis is None:
                buf += struct.pack("<Bfi", 0, float(q.scales[0]), int(q.zero_points[0]))
            else:
                buf += struct.pack("<BBI", 1, q.axis, q.scales.size)
                buf += _f32(q.scales).tobytes()
                buf += np.ascontiguousarray(q.zero_points, dtype="<i4").tobytes()
        buf += np.ascontiguousarray(data, dtype="<f4" if dtype == DTYPE_F32 else np.int8
                                    ).tobytes()
    with open(path, "wb") as f:
        f.write(bytes(buf))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated at byte {self.off} "
                              f"(needed {n} more, file has {len(self.raw)})")
        chunk = self.raw[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_weight_file(path) -> list:
    with open(path, "rb") as f:
        raw = f.read()
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic (not a weight file)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    records = []
    seen = set()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        if name in seen:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        seen.add(name)
        dtype, rank = r.unpack("<BB")
        dims = r.unpack(f"<{rank}I") if rank else ()
        quant = None
        if dtype == DTYPE_I8:
            (per_channel,) = r.unpack("<B")
            if per_channel == 0:
                scale, zp = r.unpack("<fi")
                quant = TensorQuant(axis=None, scales=np.array([scale], dtype=np.float32),
                                    zero_points=np.array([zp], dtype=np.int32))
            elif per_channel == 1:
                axis, c = r.unpack("<BI")
                scales = np.frombuffer(r.take(4 * c), dtype="<f4").copy()
                zps = np.frombuffer(r.take(4 * c), dtype="<i4").copy()
                quant = TensorQuant(axis=int(axis), scales=scales, zero_points=zps)
            else:
                raise FormatError(f"{path}: tensor {name!r}: bad per_channel flag")
        elif dtype != DTYPE_F32:
            raise FormatError(f"{path}: tensor {name!r}: unknown dtype code {dtype}")
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        if dtype == DTYPE_F32:
            data = np.frombuffer(r.take(4 * n), dtype="<f4").copy().reshape(dims)
        else:
            data = np.frombuffer(r.take(n), dtype=np.int8).copy().reshape(dims)
        records.append(TensorRecord(name=name, data=data, quant=quant))
    if r.off != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.off} trailing bytes after "
                          "declared payloads")
    return records


def file_kind(records) -> str:
    if any(r.data.dtype == np.int8 for r in records):
        return "int8"
    if any(".branch3x3." in r.name for r in records):
        return "train"
    return "fused"


# ---------------------------------------------------------------------------
# float network <-> records


def _bn_records(prefix: str, bn: BnParams) -> list:
    return [TensorRecord(f"{prefix}.gamma", _f32(bn.gamma)),
            TensorRecord(f"{prefix}.beta", _f32(bn.beta)),
            TensorRecord(f"{prefix}.mean", _f32(bn.running_mean)),
            TensorRecord(f"{prefix}.var", _f32(bn.running_var))]


def float_network_records(weights: NetworkWeights) -> list:
    recs = [TensorRecord("dbpfn.linear.weight", _f32(weights.dbpfn.weight)),
            TensorRecord("dbpfn.linear.bias", _f32(weights.dbpfn.bias))]
    if weights.dbpfn.bn is not None:
        recs += _bn_records("dbpfn.bn", weights.dbpfn.bn)
    for s, stage in enumerate(weights.stages, start=1):
        for idx, layer in enumerate(stage):
            prefix = f"stage{s}.layer{idx}"
            if isinstance(layer, FusedConvLayer):
                recs.append(TensorRecord(f"{prefix}.fused.kernel", _f32(layer.kernel)))
                recs.append(TensorRecord(f"{prefix}.fused.bias", _f32(layer.bias)))
            else:
                recs.append(TensorRecord(f"{prefix}.branch3x3.kernel", _f32(layer.kernel3)))
                recs += _bn_records(f"{prefix}.branch3x3.bn", layer.bn3)
                recs.append(TensorRecord(f"{prefix}.branch1x1.kernel", _f32(layer.kernel1)))
                recs += _bn_records(f"{prefix}.branch1x1.bn", layer.bn1)
                if layer.identity_bn is not None:
                    recs += _bn_records(f"{prefix}.identity.bn", layer.identity_bn)
    recs.append(TensorRecord("align.kernel", _f32(weights.align.kernel)))
    recs.append(TensorRecord("align.bias", _f32(weights.align.bias)))
    for tag in ("cls", "reg"):
        for part in ("conv", "out"):
            conv: ConvWeights = getattr(weights.head, f"{tag}_{part}")
            recs.append(TensorRecord(f"head.{tag}.{part}.kernel", _f32(conv.kernel)))
            recs.append(TensorRecord(f"head.{tag}.{part}.bias", _f32(conv.bias)))
    return recs


class _RecordMap:
    def __init__(self, records):
        self.by_name = {r.name: r for r in records}
        self.used = set()

    def get(self, name: str, dims=None) -> TensorRecord:
        rec = self.by_name.get(name)
        if rec is None:
            raise FormatError(f"missing tensor {name!r}")
        if dims is not None and tuple(rec.data.shape) != tuple(dims):
            raise FormatError(f"tensor {name!r}: expected dims {tuple(dims)}, "
                              f"got {tuple(rec.data.shape)}")
        self.used.add(name)
        return rec

    def has(self, name: str) -> bool:
        return name in self.by_name

    def array(self, name: str, dims=None) -> np.ndarray:
        return self.get(name, dims).data.astype(np.float64)

    def check_all_used(self):
        extra = sorted(set(self.by_name) - self.used)
        if extra:
            raise FormatError(f"unexpected tensor {extra[0]!r}")


def _bn_from(rm: _RecordMap, prefix: str, channels: int) -> BnParams:
    dims = (channels,)
    return BnParams(gamma=rm.array(f"{prefix}.gamma", dims),
                    beta=rm.array(f"{prefix}.beta", dims),
                    running_mean=rm.array(f"{prefix}.mean", dims),
                    running_var=rm.array(f"{prefix}.var", dims))


def records_to_float_network(records) -> NetworkWeights:
    """Rebuild a float network from tensors alone (no config needed);
    structure and channel widths come from names and dims."""
    rm = _RecordMap(records)
    form = "train" if any(".branch3x3." in r.name for r in records) else "fused"

    w = rm.get("dbpfn.linear.weight").data
    if w.ndim != 2:
        raise FormatError("tensor 'dbpfn.linear.weight': expected rank 2")
    f_in, hidden = w.shape
    dbpfn = DbpfnParams(
        weight=w.astype(np.float64),
        bias=rm.array("dbpfn.linear.bias", (hidden,)),
        bn=_bn_from(rm, "dbpfn.bn", hidden) if rm.has("dbpfn.bn.gamma") else None)

    stages = []
    cin = 2 * hidden
    for s in range(1, 5):
        layers = []
        depth = 0
        while True:
            prefix = f"stage{s}.layer{depth}"
            if not (rm.has(f"{prefix}.fused.kernel") or rm.has(f"{prefix}.branch3x3.kernel")):
                break
            down = depth == 0
            if form == "fused":
                kernel = rm.get(f"{prefix}.fused.kernel").data
                if kernel.ndim != 4 or kernel.shape[:2] != (3, 3) or kernel.shape[2] != cin:
                    raise FormatError(f"tensor '{prefix}.fused.kernel': expected dims "
                                      f"(3, 3, {cin}, Cout), got {tuple(kernel.shape)}")
                cout = kernel.shape[3]
                layers.append(FusedConvLayer(
                    kernel=kernel.astype(np.float64),
                    bias=rm.array(f"{prefix}.fused.bias", (cout,)),
                    stride=2 if down else 1,
                    kind="downsample" if down else "submanifold"))
            else:
                k3 = rm.get(f"{prefix}.branch3x3.kernel").data
                if k3.ndim != 4 or k3.shape[:2] != (3, 3) or k3.shape[2] != cin:
                    raise FormatError(f"tensor '{prefix}.branch3x3.kernel': expected dims "
                                      f"(3, 3, {cin}, Cout), got {tuple(k3.shape)}")
                cout = k3.shape[3]
                has_id = rm.has(f"{prefix}.identity.bn.gamma")
                layers.append(RepConvLayer(
                    kernel3=k3.astype(np.float64),
                    bn3=_bn_from(rm, f"{prefix}.branch3x3.bn", cout),
                    kernel1=rm.array(f"{prefix}.branch1x1.kernel", (1, 1, cin, cout)),
                    bn1=_bn_from(rm, f"{prefix}.branch1x1.bn", cout),
                    identity_bn=_bn_from(rm, f"{prefix}.identity.bn", cout)
                    if has_id else None,
                    stride=2 if down else 1,
                    kind="downsample" if down else "submanifold"))
            cin = cout
            depth += 1
        if not layers:
            raise FormatError(f"missing tensor 'stage{s}.layer0.fused.kernel'")
        stages.append(tuple(layers))

    stage2_out = stages[1][-1].cout
    align_kernel = rm.get("align.kernel").data
    if align_kernel.ndim != 4 or align_kernel.shape[:3] != (1, 1, stage2_out):
        raise FormatError(f"tensor 'align.kernel': expected dims (1, 1, {stage2_out}, C), "
                          f"got {tuple(align_kernel.shape)}")
    align_channels = align_kernel.shape[3]
    align = ConvWeights(kernel=align_kernel.astype(np.float64),
                        bias=rm.array("align.bias", (align_channels,)))

    def head_conv(tag, part, k, cout=None) -> ConvWeights:
        name = f"head.{tag}.{part}.kernel"
        kernel = rm.get(name).data
        want = (k, k, align_channels) + ((cout,) if cout else ())
        if kernel.ndim != 4 or kernel.shape[:len(want)] != want:
            raise FormatError(f"tensor {name!r}: expected dims {(k, k, align_channels, cout or 'C')}, "
                              f"got {tuple(kernel.shape)}")
        return ConvWeights(kernel=kernel.astype(np.float64),
                           bias=rm.array(f"head.{tag}.{part}.bias", (kernel.shape[3],)))

    head = HeadWeights(cls_conv=head_conv("cls", "conv", 3, align_channels),
                       cls_out=head_conv("cls", "out", 1),
                       reg_conv=head_conv("reg", "conv", 3, align_channels),
                       reg_out=head_conv("reg", "out", 1, REGRESSION_CHANNELS))
    rm.check_all_used()
    return NetworkWeights(form=form, dbpfn=dbpfn, stages=tuple(stages),
                          align=align, head=head)


def validate_float_against_config(weights: NetworkWeights, cfg: EngineConfig) -> None:
    """Shape compatibility between a loaded network and an engine config;
    reports the first offending tensor by name."""
    if weights.dbpfn.weight.shape[0] != cfg.feature_length:
        raise FormatError(f"tensor 'dbpfn.linear.weight': expected dims "
                          f"({cfg.feature_length}, {cfg.network.encoder_hidden}), "
                          f"got {tuple(weights.dbpfn.weight.shape)}")
    if weights.dbpfn.weight.shape[1] != cfg.network.encoder_hidden:
        raise FormatError(f"tensor 'dbpfn.linear.weight': expected dims "
                          f"({cfg.feature_length}, {cfg.network.encoder_hidden}), "
                          f"got {tuple(weights.dbpfn.weight.shape)}")
    for s, stage in enumerate(weights.stages, start=1):
        if len(stage) != cfg.network.stage_depths[s - 1] + 1:
            raise FormatError(f"stage{s} has {len(stage) - 1} submanifold layers, "
                              f"config expects {cfg.network.stage_depths[s - 1]}")
        for idx, layer in enumerate(stage):
            if layer.cout != cfg.network.stage_channels[s - 1]:
                raise FormatError(
                    f"tensor 'stage{s}.layer{idx}.{'fused' if weights.form == 'fused' else 'branch3x3'}"
                    f".kernel': expected {cfg.network.stage_channels[s - 1]} output "
                    f"channels, got {layer.cout}")
    if weights.align.kernel.shape[3] != cfg.network.align_channels:
        raise FormatError(f"tensor 'align.kernel': expected {cfg.network.align_channels} "
                          f"output channels, got {weights.align.kernel.shape[3]}")
    if weights.head.cls_out.kernel.shape[3] != cfg.network.num_classes:
        raise FormatError(f"tensor 'head.cls.out.kernel': expected "
                          f"{cfg.network.num_classes} output channels, "
                          f"got {weights.head.cls_out.kernel.shape[3]}")


# ---------------------------------------------------------------------------
# int8 network <-> records


def _qp_records(site: str, qps) -> list:
    qps = [qps] if isinstance(qps, QuantParams) else list(qps)
    return [TensorRecord(f"{site}.scale", _f32([qp.scale for qp in qps])),
            TensorRecord(f"{site}.zero_point", _f32([qp.zero_point for qp in qps]))]


def _i8_record(name: str, q: np.ndarray, axis: int, scales: np.ndarray) -> TensorRecord:
    return TensorRecord(name, np.ascontiguousarray(q, dtype=np.int8),
                        TensorQuant(axis=axis, scales=_f32(scales),
                                    zero_points=np.zeros(scales.size, dtype=np.int32)))


def int8_network_records(net: Int8Network) -> list:
    recs = _qp_records("input_features", net.feature_qps)
    recs.append(_i8_record("dbpfn.linear.weight", net.encoder.q_weight, 1,
                           net.encoder.weight_scales))
    recs.append(TensorRecord("dbpfn.linear.bias", _f32(net.encoder.bias)))
    recs += _qp_records("act.dbpfn.out", net.act["dbpfn.out"])
    for s, stage in enumerate(net.stages, start=1):
        for idx, conv in enumerate(stage):
            prefix = f"stage{s}.layer{idx}"
            recs.append(_i8_record(f"{prefix}.fused.kernel", conv.q_kernel, 3,
                                   conv.weight_scales))
            recs.append(TensorRecord(f"{prefix}.fused.bias", _f32(conv.bias)))
            recs += _qp_records(f"act.{prefix}.out", net.act[f"{prefix}.out"])
    recs.append(_i8_record("align.kernel", net.align.q_kernel, 3, net.align.weight_scales))
    recs.append(TensorRecord("align.bias", _f32(net.align.bias)))
    recs += _qp_records("act.align.out", net.act["align.out"])
    recs += _qp_records("act.fusion.add3.out", net.act["fusion.add3.out"])
    recs += _qp_records("act.fusion.out", net.act["fusion.out"])
    for tag in ("cls", "reg"):
        for part in ("conv", "out"):
            conv: Int8Conv = net.head[f"{tag}_{part}"]
            recs.append(_i8_record(f"head.{tag}.{part}.kernel", conv.q_kernel, 3,
                                   conv.weight_scales))
            recs.append(TensorRecord(f"head.{tag}.{part}.bias", _f32(conv.bias)))
            recs += _qp_records(f"act.{conv.out_site}", net.act[conv.out_site])
    return recs


def _qp_from(rm: _RecordMap, site: str):
    scales = rm.get(f"{site}.scale").data
    zps = rm.get(f"{site}.zero_point").data
    if scales.shape != zps.shape:
        raise FormatError(f"tensor '{site}.zero_point': dims differ from scales")
    return [QuantParams(scale=float(s), zero_point=int(z)) for s, z in zip(scales, zps)]


def _i8_from(rm: _RecordMap, name: str, axis: int):
    rec = rm.get(name)
    if rec.data.dtype != np.int8 or rec.quant is None:
        raise FormatError(f"tensor {name!r}: expected quantized int8 data")
    if rec.quant.axis != axis:
        raise FormatError(f"tensor {name!r}: expected channel axis {axis}")
    return rec.data, rec.quant.scales.astype(np.float64)


def records_to_int8_network(records) -> Int8Network:
    rm = _RecordMap(records)
    feature_qps = _qp_from(rm, "input_features")
    q_w, w_scales = _i8_from(rm, "dbpfn.linear.weight", 1)
    encoder = Int8Linear(q_weight=q_w, weight_scales=w_scales,
                         bias=rm.array("dbpfn.linear.bias", (q_w.shape[1],)))
    act = {"dbpfn.out": _qp_from(rm, "act.dbpfn.out")[0]}

    stages = []
    in_site = "dbpfn.out"
    cin = 2 * q_w.shape[1]
    for s in range(1, 5):
        layers = []
        idx = 0
        while rm.has(f"stage{s}.layer{idx}.fused.kernel"):
            prefix = f"stage{s}.layer{idx}"
            qk, ws = _i8_from(rm, f"{prefix}.fused.kernel", 3)
            if qk.ndim != 4 or qk.shape[:2] != (3, 3) or qk.shape[2] != cin:
                raise FormatError(f"tensor '{prefix}.fused.kernel': expected dims "
                                  f"(3, 3, {cin}, Cout), got {tuple(qk.shape)}")
            cout = qk.shape[3]
            out_site = f"{prefix}.out"
            act[out_site] = _qp_from(rm, f"act.{out_site}")[0]
            layers.append(Int8Conv(q_kernel=qk, weight_scales=ws,
                                   bias=rm.array(f"{prefix}.fused.bias", (cout,)),
                                   kind="downsample" if idx == 0 else "submanifold",
                                   apply_relu=True, in_site=in_site, out_site=out_site))
            in_site = out_site
            cin = cout
            idx += 1
        if not layers:
            raise FormatError(f"missing tensor 'stage{s}.layer0.fused.kernel'")
        stages.append(layers)

    qk, ws = _i8_from(rm, "align.kernel", 3)
    align = Int8Conv(q_kernel=qk, weight_scales=ws,
                     bias=rm.array("align.bias", (qk.shape[3],)),
                     kind="submanifold", apply_relu=False,
                     in_site=stages[1][-1].out_site, out_site="align.out")
    for site in ("align.out", "fusion.add3.out", "fusion.out"):
        act[site] = _qp_from(rm, f"act.{site}")[0]

    head = {}
    for tag in ("cls", "reg"):
        for part, relu_flag, in_site in (("conv", True, "fusion.out"),
                                         ("out", False, f"head.{tag}.conv.out")):
            qk, ws = _i8_from(rm, f"head.{tag}.{part}.kernel", 3)
            out_site = f"head.{tag}.conv.out" if part == "conv" else f"head.{tag}.out"
            act[out_site] = _qp_from(rm, f"act.{out_site}")[0]
            head[f"{tag}_{part}"] = Int8Conv(
                q_kernel=qk, weight_scales=ws,
                bias=rm.array(f"head.{tag}.{part}.bias", (qk.shape[3],)),
                kind="submanifold", apply_relu=relu_flag,
                in_site=in_site, out_site=out_site)
    rm.check_all_used()
    return Int8Network(feature_qps=feature_qps, encoder=encoder, stages=stages,
                       align=align, head=head, act=act)


def validate_int8_against_config(net: Int8Network, cfg: EngineConfig) -> None:
    if net.encoder.q_weight.shape != (cfg.feature_length, cfg.network.encoder_hidden):
        raise FormatError(f"tensor 'dbpfn.linear.weight': expected dims "
                          f"({cfg.feature_length}, {cfg.network.encoder_hidden}), "
                          f"got {tuple(net.encoder.q_weight.shape)}")
    for s, stage in enumerate(net.stages, start=1):
        if len(stage) != cfg.network.stage_depths[s - 1] + 1:
            raise FormatError(f"stage{s} has {len(stage) - 1} submanifold layers, "
                              f"config expects {cfg.network.stage_depths[s - 1]}")
        for idx, conv in enumerate(stage):
            if conv.q_kernel.shape[3] != cfg.network.stage_channels[s - 1]:
                raise FormatError(f"tensor 'stage{s}.layer{idx}.fused.kernel': expected "
                                  f"{cfg.network.stage_channels[s - 1]} output channels, "
                                  f"got {conv.q_kernel.shape[3]}")
    if net.head["cls_out"].q_kernel.shape[3] != cfg.network.num_classes:
        raise FormatError(f"tensor 'head.cls.out.kernel': expected "
                          f"{cfg.network.num_classes} output channels, "
                          f"got {net.head['cls_out'].q_kernel.shape[3]}")
    expected = set(activation_sites(cfg.network))
    missing = expected - set(net.act)
    if missing:
        raise FormatError(f"missing tensor 'act.{sorted(missing)[0]}.scale'")
