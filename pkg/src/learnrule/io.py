"""File formats: dataset CSV, latents sidecar, binary model files, JSON configs and reports.

Model file layout (all integers and floats little-endian)::

    b"RLRN"  u16 version
    str kind                         (u16 length + utf-8 bytes)
    str fit-config JSON              (u32 length + utf-8, sorted keys)
    u16 n_blocks, then per block:    str name, u8 ndim, u32 dims..., float64 data
    u8 has_norm [float64 mean(k), float64 std(k) with u32 k]
    u8 has_shared_w0 [u32 d, float64 w0(d)]
    u32 n_w0, then per entry:        str animal_id, float64 w0(d)
    32-byte sha256 of everything above

Parameter blocks are written in sorted-name order, so save -> load -> save
reproduces the same bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import struct
from dataclasses import replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from learnrule import model as M
from learnrule.glm import ContractError, SessionRecord
from learnrule.inference import FitConfig, FittedModel
from learnrule.rules import RuleParams
from learnrule.simulate import ConfigError, SimConfig, SimulatedAnimal, calibrated_alpha

MAGIC = b"RLRN"
MODEL_VERSION = 1
DATASET_HEADER = ["animal_id", "trial_index", "stimulus", "choice", "reward", "label"]
LATENT_HEADER = ["animal_id", "trial_index", "w_stim", "w_bias", "dw_stim", "dw_bias"]


class DataError(ContractError):
    pass


class ModelFileError(ContractError):
    pass


def fmt(x: float) -> str:
    """Shortest round-tripping decimal text for a float."""
    return repr(float(x))


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- dataset CSV ------------------------------------------------------------------------


def write_dataset(sessions, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(DATASET_HEADER)
        for s in sessions:
            for i in range(len(s)):
                w.writerow(
                    [s.animal_id, i, fmt(s.stimulus[i]), int(s.choice[i]), int(s.reward[i]), int(s.label[i])]
                )


def _parse_binary(v, name, row):
    if v not in ("0", "1"):
        raise DataError(f"row {row}: {name} must be 0 or 1, got {v!r}")
    return int(v)


def _parse_float(v, name, row):
    try:
        x = float(v)
    except ValueError:
        raise DataError(f"row {row}: {name} is not a number: {v!r}") from None
    if not math.isfinite(x):
        raise DataError(f"row {row}: {name} must be finite")
    return x


def _check_header(header, expected, path):
    if header != expected:
        raise DataError(f"{path}: header must be {','.join(expected)}, got {header}")


def read_dataset(path, source: str = "ingested") -> list[SessionRecord]:
    """Strict loader; any invalid row aborts with its (1-based, header = row 1) row number."""
    cols = {}
    order = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        _check_header(next(reader, None), DATASET_HEADER, path)
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(DATASET_HEADER):
                raise DataError(f"row {row_no}: expected {len(DATASET_HEADER)} fields, got {len(row)}")
            aid, idx, s, y, r, z = row
            if not aid:
                raise DataError(f"row {row_no}: empty animal_id")
            if not idx.isdigit():
                raise DataError(f"row {row_no}: trial_index must be a nonnegative integer, got {idx!r}")
            s = _parse_float(s, "stimulus", row_no)
            y = _parse_binary(y, "choice", row_no)
            r = _parse_binary(r, "reward", row_no)
            z = _parse_binary(z, "label", row_no)
            if r != int(y == z):
                raise DataError(f"row {row_no}: reward {r} != 1[choice == label]")
            if s != 0 and z != int(s > 0):
                raise DataError(f"row {row_no}: label {z} disagrees with stimulus sign {s}")
            if aid not in cols:
                cols[aid] = ([], [], [], [])
                order.append(aid)
            c = cols[aid]
            if int(idx) != len(c[0]):
                raise DataError(f"row {row_no}: trial_index {idx} for {aid!r}, expected {len(c[0])}")
            for lst, v in zip(c, (s, y, r, z)):
                lst.append(v)
    if not order:
        raise DataError(f"{path}: no data rows")
    return [SessionRecord(a, *cols[a], source=source) for a in order]


def write_latents(animals, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LATENT_HEADER)
        for a in animals:
            for t in range(len(a.session)):
                w.writerow(
                    [a.animal_id, t, fmt(a.w[t, 0]), fmt(a.w[t, 1]), fmt(a.dw[t, 0]), fmt(a.dw[t, 1])]
                )


def read_latents(path) -> dict:
    """animal_id -> (W (T, 2) pre-update weights, DW (T, 2) updates)."""
    out = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        _check_header(next(reader, None), LATENT_HEADER, path)
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(LATENT_HEADER):
                raise DataError(f"row {row_no}: expected {len(LATENT_HEADER)} fields, got {len(row)}")
            aid, idx = row[0], row[1]
            vals = [_parse_float(v, n, row_no) for v, n in zip(row[2:], LATENT_HEADER[2:])]
            lst = out.setdefault(aid, [])
            if not idx.isdigit() or int(idx) != len(lst):
                raise DataError(f"row {row_no}: trial_index {idx!r} for {aid!r}, expected {len(lst)}")
            lst.append(vals)
    res = {}
    for aid, rows in out.items():
        a = np.array(rows, dtype=np.float64)
        res[aid] = (a[:, :2], a[:, 2:])
    return res


def attach_latents(sessions, latents) -> list[SimulatedAnimal]:
    """Pair loaded sessions with sidecar latents for recovery analyses."""
    animals = []
    for s in sessions:
        if s.animal_id not in latents:
            raise DataError(f"no latents for animal {s.animal_id!r}")
        W, DW = latents[s.animal_id]
        if len(W) != len(s):
            raise DataError(f"latents for {s.animal_id!r} have {len(W)} trials, session has {len(s)}")
        w = np.vstack([W, W[-1] + DW[-1]])
        animals.append(SimulatedAnimal(s, None, w, DW, np.zeros_like(DW), bool(np.all(DW[:, 1] == 0))))
    return animals


# -- tidy tables ---------------------------------------------------------------------------


def write_table(rows, path, columns=None) -> None:
    rows = list(rows)
    columns = columns or list(rows[0].keys())
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r[c]) if isinstance(r[c], (float, np.floating)) else r[c] for c in columns])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_slice_table(path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for row_no, r in enumerate(csv.DictReader(f), start=2):
            try:
                rows.append(
                    {
                        "stimulus": float(r["stimulus"]),
                        "w_stim": float(r["w_stim"]),
                        "outcome": r["outcome"],
                        "dw_stim": float(r["dw_stim"]),
                        "dw_bias": float(r["dw_bias"]),
                    }
                )
            except (KeyError, ValueError, TypeError) as e:
                raise DataError(f"{path} row {row_no}: {e}") from None
    return rows


# -- model files -----------------------------------------------------------------------------


def _pack_str(s: str, wide=False) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I" if wide else "<H", len(b)) + b


def _pack_floats(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def model_to_bytes(model: FittedModel) -> bytes:
    out = [MAGIC, struct.pack("<H", MODEL_VERSION), _pack_str(model.kind)]
    out.append(_pack_str(json.dumps(_jsonable(model.config.to_dict()), sort_keys=True), wide=True))
    names = sorted(model.params)
    out.append(struct.pack("<H", len(names)))
    for name in names:
        a = np.asarray(model.params[name], dtype=np.float64)
        out.append(_pack_str(name))
        out.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(_pack_floats(a))
    if model.norm is None:
        out.append(b"\x00")
    else:
        mean = np.asarray(model.norm["mean"], dtype=np.float64)
        out.append(b"\x01" + struct.pack("<I", len(mean)) + _pack_floats(mean) + _pack_floats(model.norm["std"]))
    if model.shared_w0 is None:
        out.append(b"\x00")
    else:
        w = np.asarray(model.shared_w0, dtype=np.float64)
        out.append(b"\x01" + struct.pack("<I", len(w)) + _pack_floats(w))
    d = model.d
    out.append(struct.pack("<I", len(model.w0_table)))
    for aid in sorted(model.w0_table):
        out.append(_pack_str(aid) + _pack_floats(np.asarray(model.w0_table[aid], dtype=np.float64).reshape(d)))
    body = b"".join(out)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise ModelFileError("model file is truncated")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt_):
        return struct.unpack(fmt_, self.take(struct.calcsize(fmt_)))

    def string(self, wide=False):
        (n,) = self.unpack("<I" if wide else "<H")
        return self.take(n).decode("utf-8")

    def floats(self, n):
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def model_from_bytes(buf: bytes) -> FittedModel:
    if len(buf) < len(MAGIC) + 32 or buf[:4] != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFileError("model file checksum mismatch (corrupt or truncated)")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != MODEL_VERSION:
        raise ModelFileError(f"unsupported model file version {version}")
    kind = r.string()
    M.check_kind(kind)
    config = FitConfig(**json.loads(r.string(wide=True)))
    params = {}
    (n_blocks,) = r.unpack("<H")
    for _ in range(n_blocks):
        name = r.string()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        params[name] = r.floats(int(np.prod(shape))).reshape(shape)
    norm = None
    if r.take(1) == b"\x01":
        (k,) = r.unpack("<I")
        norm = {"mean": r.floats(k), "std": r.floats(k)}
    shared = None
    if r.take(1) == b"\x01":
        (k,) = r.unpack("<I")
        shared = r.floats(k)
    d = M.glm_dim(kind)
    (n_w0,) = r.unpack("<I")
    table = {}
    for _ in range(n_w0):
        aid = r.string()
        table[aid] = r.floats(d)
    if r.pos != len(body):
        raise ModelFileError("trailing bytes in model file")
    return FittedModel(kind, params, config, table, shared, norm, {})


def save_model(model: FittedModel, path) -> str:
    """Write the model file and return its content hash (sha256 hex of the file)."""
    buf = model_to_bytes(model)
    Path(path).write_bytes(buf)
    return hashlib.sha256(buf).hexdigest()


def load_model(path) -> FittedModel:
    return model_from_bytes(Path(path).read_bytes())


# -- JSON -----------------------------------------------------------------------------------


def load_schema(name: str) -> dict:
    return json.loads(resources.files("learnrule.schemas").joinpath(f"{name}.schema.json").read_text())


def validate(doc, name: str) -> None:
    try:
        jsonschema.validate(doc, load_schema(name))
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{name}: {where}: {e.message}") from None


def _finite_or_token(v):
    """JSON has no infinities: -inf/inf/nan are written as strings."""
    if isinstance(v, float) and not math.isfinite(v):
        return "nan" if math.isnan(v) else ("-inf" if v < 0 else "inf")
    if isinstance(v, dict):
        return {k: _finite_or_token(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_finite_or_token(x) for x in v]
    return v


def dumps(doc) -> str:
    return json.dumps(_finite_or_token(_jsonable(doc)), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(doc, path, schema: str | None = None) -> None:
    doc = json.loads(dumps(doc))
    if schema:
        validate(doc, schema)
    Path(path).write_text(dumps(doc), encoding="utf-8")


# -- run configs --------------------------------------------------------------------------


def read_run_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    validate(doc, "run_config")
    return doc


def rule_from_json(d: dict, sim: SimConfig | None = None) -> RuleParams:
    lr = d.get("learning_rate", 0.1)
    rule = RuleParams(
        kind=d.get("kind", "reinforce"),
        learning_rate=1.0 if lr == "calibrated" else lr,
        window=d.get("window", 10),
        reward_threshold=d.get("reward_threshold", 0.5),
    )
    if lr == "calibrated":
        if sim is None:
            raise ConfigError("a calibrated learning rate needs a simulation config")
        rule = rule.with_rate(calibrated_alpha(replace(sim, rule=rule)))
    return rule


def _as_config_error(fn):
    def wrapped(*a, **kw):
        try:
            return fn(*a, **kw)
        except ConfigError:
            raise
        except (ContractError, TypeError) as e:
            raise ConfigError(str(e)) from None

    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


@_as_config_error
def sim_config(doc: dict, seed: int | None = None) -> SimConfig:
    """SimConfig from the "simulate" section; ``seed`` overrides master_seed."""
    s = dict(doc.get("simulate", {}))
    master = doc["master_seed"] if seed is None else seed
    rule_doc = s.pop("rule", {})
    mix_doc = s.pop("mixture", None)
    if "bias_set" in s:
        s["bias_set"] = tuple(s["bias_set"])
    base = SimConfig(**s, master_seed=master)
    rule = rule_from_json(rule_doc, base)
    cfg = replace(base, rule=rule)
    if mix_doc is not None:
        mix = tuple((rule_from_json(m["rule"], cfg), float(m["weight"])) for m in mix_doc)
        cfg = replace(cfg, mixture=mix)
    return cfg


@_as_config_error
def fit_config(doc: dict, seed: int | None = None) -> FitConfig:
    f = dict(doc.get("fit", {}))
    f["seed"] = doc["master_seed"] if seed is None else seed
    return FitConfig(**f)
