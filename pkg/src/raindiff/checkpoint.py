"""Binary checkpoint format (bit-exact persistence contract).

Little-endian layout:

    magic   b"RDIF"
    version u32                      (currently 1)
    T       u32                      schedule step count
    beta_start f64, beta_end f64     schedule endpoints
    u32 tensor count, then per tensor:
        u32 name length | UTF-8 name | u32 rank | u32 dims[rank]
        | f32 data (row-major)
    u32 moment-tensor count, then the same record layout for the Adam
        moments (names "m.<param>" and "v.<param>")
    u32 blob length | UTF-8 JSON trainer-state blob

Parameter names carry their collection prefix ("thetaA.", "thetaB.",
"phiA.", "phiB."). The JSON blob holds everything else TrainState needs
to round-trip bit-exactly: step counter, optimizer hyperparameters,
lambda_cyc, and the four RNG stream states (sorted keys, so equal states
serialize to equal bytes). save(load(f)) reproduces f byte for byte.
"""

import io
import json
import struct

import numpy as np

from .ndcore import Tensor
from .schedule import NoiseSchedule, make_linear_schedule

MAGIC = b"RDIF"
VERSION = 1
_MAX_NAME = 4096
_MAX_RANK = 8
_MAX_DIM = 1 << 31

PARAM_SETS = ("thetaA", "thetaB", "phiA", "phiB")


class CheckpointError(ValueError):
    """Malformed, truncated, or inconsistent checkpoint file."""


# -- writing ---------------------------------------------------------------


def _write_record(out, name: str, arr: np.ndarray):
    enc = name.encode("utf-8")
    out.write(struct.pack("<I", len(enc)))
    out.write(enc)
    out.write(struct.pack("<I", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(models, state, path) -> None:
    """models: ModelBundle, state: TrainState (see trainer module)."""
    sched = state.schedule
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack("<I", sched.T))
    out.write(struct.pack("<dd", sched.beta_start, sched.beta_end))

    named = list(models.named_params())
    out.write(struct.pack("<I", len(named)))
    for name, tensor in named:
        _write_record(out, name, tensor.data)

    moments = [("m." + n, state.m[n]) for n, _ in named]
    moments += [("v." + n, state.v[n]) for n, _ in named]
    out.write(struct.pack("<I", len(moments)))
    for name, arr in moments:
        _write_record(out, name, arr)

    blob = json.dumps(
        {
            "step": state.step,
            "lr": state.lr,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps": state.eps,
            "clip_norm": state.clip_norm,
            "lambda_cyc": state.lambda_cyc,
            "rng": {k: g.bit_generator.state for k, g in state.rngs.items()},
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    out.write(struct.pack("<I", len(blob)))
    out.write(blob)

    with open(path, "wb") as fh:
        fh.write(out.getvalue())


# -- reading ---------------------------------------------------------------


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos},"
                f" file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]


def _read_record(r: _Reader):
    name_len = r.u32()
    if name_len > _MAX_NAME:
        raise CheckpointError(f"implausible name length {name_len}")
    try:
        name = r.take(name_len).decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointError(f"tensor name is not UTF-8: {e}") from None
    rank = r.u32()
    if rank > _MAX_RANK:
        raise CheckpointError(f"{name}: implausible rank {rank}")
    dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
    count = 1
    for d in dims:
        if d == 0 or d >= _MAX_DIM:
            raise CheckpointError(f"{name}: bad dimension {d}")
        count *= d
    raw = r.take(4 * count)
    arr = np.frombuffer(raw, dtype="<f4").reshape(dims)
    if arr.size != count:
        raise CheckpointError(f"{name}: element count {arr.size} != declared {count}")
    # frombuffer views are read-only; params and moments mutate in place
    return name, arr.copy()


def load_checkpoint(path):
    """Returns (ModelBundle, TrainState); inverse of save_checkpoint."""
    from .trainer import ModelBundle, TrainState  # cycle: trainer owns the types

    with open(path, "rb") as fh:
        r = _Reader(fh.read())

    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    T = r.u32()
    beta_start = r.f64()
    beta_end = r.f64()
    try:
        sched = make_linear_schedule(T, beta_start, beta_end)
    except ValueError as e:
        raise CheckpointError(f"bad schedule header: {e}") from None

    sets = {k: {} for k in PARAM_SETS}
    n_params = r.u32()
    param_order = []
    for _ in range(n_params):
        name, arr = _read_record(r)
        prefix, _, rest = name.partition(".")
        if prefix not in sets or not rest:
            raise CheckpointError(f"parameter {name!r} has no known collection prefix")
        sets[prefix][rest] = Tensor(arr, requires_grad=True)
        param_order.append(name)

    n_moments = r.u32()
    if n_moments != 2 * n_params:
        raise CheckpointError(
            f"moment section has {n_moments} tensors, expected {2 * n_params}"
        )
    moments = {}
    for _ in range(n_moments):
        name, arr = _read_record(r)
        moments[name] = arr
    m, v = {}, {}
    for name in param_order:
        if "m." + name not in moments or "v." + name not in moments:
            raise CheckpointError(f"moments missing for parameter {name!r}")
        m[name] = moments["m." + name]
        v[name] = moments["v." + name]

    blob_len = r.u32()
    try:
        blob = json.loads(r.take(blob_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"bad state blob: {e}") from None
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after state blob")

    rngs = {}
    for key, st in blob["rng"].items():
        gen = np.random.Generator(np.random.PCG64())
        gen.bit_generator.state = st
        rngs[key] = gen

    models = ModelBundle(
        thetaA=sets["thetaA"], thetaB=sets["thetaB"], phiA=sets["phiA"], phiB=sets["phiB"]
    )
    shapes_ok = all(
        m[n].shape == t.data.shape and v[n].shape == t.data.shape
        for n, t in models.named_params()
    )
    if not shapes_ok:
        raise CheckpointError("moment shapes disagree with parameter shapes")

    state = TrainState(
        step=int(blob["step"]),
        m=m,
        v=v,
        lr=float(blob["lr"]),
        beta1=float(blob["beta1"]),
        beta2=float(blob["beta2"]),
        eps=float(blob["eps"]),
        clip_norm=float(blob["clip_norm"]),
        lambda_cyc=float(blob["lambda_cyc"]),
        schedule=sched,
        rngs=rngs,
    )
    return models, state
