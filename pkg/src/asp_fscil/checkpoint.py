"""ASPC v1 checkpoint container.

Layout (little endian)::

    0   4s   magic b"ASPC"
    4   u32  version (1)
    8   u32  record count R
    12  R records:
          u32 name length, utf-8 name,
          u8 dtype code, u32 ndim, ndim x u32 dims,
          raw array bytes
    end u32  CRC-32 of every preceding byte

Learned tensors are stored as float32; the record ``meta`` is a uint8 array
holding a JSON document with configuration, frozen flags, class ids, prompt
average bookkeeping, the task index and any caller-supplied extras.
"""
from __future__ import annotations

import json
import struct
import zlib
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .exceptions import FormatError
from .learner import Ablation, ASPModel
from .objective import LossConfig
from .prompts import EncoderHeads, Hyperparams, PromptAverage, TipBlock
from .prototypes import PrototypeClassifier
from .vit import ViTConfig, VisionTransformer

MAGIC = b"ASPC"
VERSION = 1
_HEAD = struct.Struct("<4sII")
_U32 = struct.Struct("<I")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


# ---------------------------------------------------------------------------
# raw container
# ---------------------------------------------------------------------------

def pack(records: List[Tuple[str, np.ndarray]]) -> bytes:
    """Serialise named arrays; dtypes must be float32/float64/int64/uint8."""
    out = [_HEAD.pack(MAGIC, VERSION, len(records))]
    for name, arr in records:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in _CODES:
            raise TypeError(f"ASPC: unsupported dtype {arr.dtype} for record {name!r}")
        key = name.encode("utf-8")
        out.append(_U32.pack(len(key)) + key)
        out.append(struct.pack("<BI", _CODES[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(out)
    return body + _U32.pack(zlib.crc32(body))


def unpack(raw: bytes, name: str = "<bytes>") -> List[Tuple[str, np.ndarray]]:
    if len(raw) < _HEAD.size + _U32.size:
        raise FormatError(f"{name}: truncated checkpoint ({len(raw)} bytes)")
    magic, version, count = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise FormatError(f"{name}: unsupported checkpoint version {version} at byte offset 4")
    body, (crc,) = raw[:-4], _U32.unpack_from(raw, len(raw) - 4)
    if zlib.crc32(body) != crc:
        raise FormatError(f"{name}: checksum mismatch, file is corrupted or truncated")
    pos, out = _HEAD.size, []

    def need(n: int, what: str):
        if pos + n > len(body):
            raise FormatError(f"{name}: truncated {what} at byte offset {pos}")

    for _ in range(count):
        need(4, "record name length")
        (n,) = _U32.unpack_from(body, pos)
        pos += 4
        need(n + 5, "record header")
        key = body[pos:pos + n].decode("utf-8")
        pos += n
        code, ndim = struct.unpack_from("<BI", body, pos)
        pos += 5
        if code not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code} in record {key!r}")
        need(4 * ndim, "record shape")
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        need(nbytes, f"record {key!r} data")
        arr = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos)
        out.append((key, arr.reshape(shape).copy()))
        pos += nbytes
    if pos != len(body):
        raise FormatError(f"{name}: {len(body) - pos} trailing bytes at offset {pos}")
    return out


# ---------------------------------------------------------------------------
# RNG state as JSON
# ---------------------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, np.ndarray):
        return {"__ndarray__": x.tolist(), "dtype": str(x.dtype)}
    if isinstance(x, np.integer):
        return int(x)
    return x


def _from_jsonable(x):
    if isinstance(x, dict):
        if "__ndarray__" in x:
            return np.asarray(x["__ndarray__"], dtype=x["dtype"])
        return {k: _from_jsonable(v) for k, v in x.items()}
    return x


def rng_state(rng: np.random.Generator) -> dict:
    return _jsonable(rng.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    state = _from_jsonable(state)
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


# ---------------------------------------------------------------------------
# model <-> records
# ---------------------------------------------------------------------------

def model_records(model: ASPModel, extra: Optional[Dict[str, Any]] = None) -> List[Tuple[str, np.ndarray]]:
    recs = [(f"backbone.{k}", p.data) for k, p in model.backbone.params.items()]
    if model.tip is not None:
        recs += [(f"tip.{l}", model.tip.params[l].data) for l in model.tip.layers]
    if model.encoder is not None:
        recs += [(k, p.data) for k, p in model.encoder.params.items()]
    recs.append(("classifier.w", model.classifier.weight.data))
    if model.p_avg is not None:
        recs += [(f"p_avg.{l}", b) for l, b in sorted(model.p_avg.blocks.items())]
    meta = {
        "kind": "model",
        "vit": model.backbone.config.to_dict(),
        "hyper": vars(model.hyper).copy(),
        "loss": vars(model.loss).copy(),
        "ablation": model.ablation.to_dict(),
        "base_classes": model.base_classes,
        "class_ids": model.classifier.class_ids.tolist(),
        "classifier_mode": model.classifier.mode,
        "task_index": model.task_index,
        "tip_tied": model.tip.tied if model.tip is not None else None,
        "p_avg": None if model.p_avg is None else
                 {"sample_count": model.p_avg.sample_count, "task_index": model.p_avg.task_index},
        "frozen": {name: bool(t.frozen) for name, t in _named_tensors(model)},
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    recs.append(("meta", np.frombuffer(blob, dtype=np.uint8)))
    return [(n, np.asarray(a, dtype=np.float32) if np.asarray(a).dtype.kind == "f" else a)
            for n, a in recs]


def _named_tensors(model: ASPModel):
    out = [(f"backbone.{k}", p) for k, p in model.backbone.params.items()]
    if model.tip is not None:
        out += [(f"tip.{l}", model.tip.params[l]) for l in model.tip.layers]
    if model.encoder is not None:
        out += list(model.encoder.params.items())
    out.append(("classifier.w", model.classifier.weight))
    return out


def model_from_records(records: List[Tuple[str, np.ndarray]], name: str = "<bytes>"):
    arrays = dict(records)
    if "meta" not in arrays:
        raise FormatError(f"{name}: checkpoint has no meta record")
    try:
        meta = json.loads(arrays.pop("meta").tobytes().decode("utf-8"))
        if meta.get("kind") != "model":
            raise FormatError(f"{name}: not a model checkpoint")
        cfg = ViTConfig(**meta["vit"])
        hyper = Hyperparams(**meta["hyper"])
        loss = LossConfig(**meta["loss"])
        ablation = Ablation(**meta["ablation"])
        frozen = meta["frozen"]

        def param(key):
            t = T.parameter(arrays[key], name=key)
            return t.freeze() if frozen.get(key, False) else t

        backbone = VisionTransformer(cfg, params={k[9:]: param(k) for k in arrays
                                                  if k.startswith("backbone.")})
        L, D = hyper.prompt_length, cfg.embed_dim
        tip = None
        if meta["tip_tied"] is not None:
            tip = TipBlock(cfg.prompt_layers, L, D, tied=meta["tip_tied"],
                           params={l: param(f"tip.{l}") for l in cfg.prompt_layers})
        encoder = None
        if any(k.startswith("enc.") for k in arrays):
            encoder = EncoderHeads(cfg.prompt_layers, L, D, hyper.encoder_hidden,
                                   use_tip=tip is not None,
                                   params={k: param(k) for k in arrays if k.startswith("enc.")})
        clf = PrototypeClassifier(meta["class_ids"], D, weight=arrays["classifier.w"],
                                  mode=meta["classifier_mode"])
        if frozen.get("classifier.w", False):
            clf.weight.freeze()
        p_avg = None
        if meta["p_avg"] is not None:
            p_avg = PromptAverage({l: arrays[f"p_avg.{l}"] for l in cfg.prompt_layers},
                                  meta["p_avg"]["sample_count"], meta["p_avg"]["task_index"])
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{name}: inconsistent checkpoint contents ({e!r})") from None
    model = ASPModel.from_parts(backbone, hyper, loss, ablation, tip, encoder, clf, p_avg,
                                meta["base_classes"], meta["task_index"])
    return model, meta["extra"]


def dumps(model: ASPModel, extra: Optional[Dict[str, Any]] = None) -> bytes:
    return pack(model_records(model, extra))


def loads(raw: bytes, name: str = "<bytes>"):
    """Returns ``(model, extra)``."""
    return model_from_records(unpack(raw, name), name)


def save(model: ASPModel, path: str, extra: Optional[Dict[str, Any]] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(model, extra))


def load(path: str):
    with open(path, "rb") as fh:
        return loads(fh.read(), path)


# ---------------------------------------------------------------------------
# backbone-only files (written by the ``pretrain`` command)
# ---------------------------------------------------------------------------

def save_backbone(backbone: VisionTransformer, path: str,
                  extra: Optional[Dict[str, Any]] = None) -> None:
    recs = [(f"backbone.{k}", np.asarray(p.data, np.float32)) for k, p in backbone.params.items()]
    meta = {"kind": "backbone", "vit": backbone.config.to_dict(),
            "frozen": {k: bool(p.frozen) for k, p in backbone.params.items()},
            "extra": extra or {}}
    recs.append(("meta", np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8)))
    with open(path, "wb") as fh:
        fh.write(pack(recs))


def load_backbone(path: str):
    """Returns ``(backbone, extra)`` from a file written by :func:`save_backbone`."""
    with open(path, "rb") as fh:
        arrays = dict(unpack(fh.read(), path))
    try:
        meta = json.loads(arrays.pop("meta").tobytes().decode("utf-8"))
        if meta.get("kind") != "backbone":
            raise FormatError(f"{path}: not a backbone file")
        params = {}
        for k, a in arrays.items():
            t = T.parameter(a, name=k[9:])
            params[k[9:]] = t.freeze() if meta["frozen"][k[9:]] else t
        return VisionTransformer(ViTConfig(**meta["vit"]), params=params), meta["extra"]
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: inconsistent backbone file ({e!r})") from None
