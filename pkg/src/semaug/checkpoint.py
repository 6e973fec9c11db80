"""Binary tensor container shared by model, adapter and router checkpoints.

Layout::

    8 bytes   magic b"SEMAUG01"
    8 bytes   header length n, unsigned little-endian
    n bytes   UTF-8 JSON header {"meta": {...}, "tensors": [{"name", "shape", "offset"}]}
    ...       tensor payloads, row-major float64 little-endian, in header order

Offsets are relative to the start of the payload section. The JSON is written
with sorted keys and no whitespace, so equal inputs give equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SEMAUG01"

# reserved names for the prompt bank inside a model checkpoint
BANK_KEYS = "bank.keys"
BANK_PROMPTS = "bank.prompts"
BANK_N = "bank.N"
BANK_M = "bank.M"


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True,
                        separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + n])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    base = 16 + n
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        if start + 8 * count > len(raw):
            raise CheckpointError(f"{path}: tensor {e['name']!r} truncated")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return tensors, header["meta"]


# -- model / adapters -----------------------------------------------------------


def save_model(path: str | Path, model, adapters=None, meta: dict | None = None) -> None:
    """Base parameters under their own names, adapters under ``lora*`` and the
    bank under the reserved ``bank.*`` names."""
    tensors = {name: p.value for name, p in model.named_parameters().items()}
    header = {"architecture": model.architecture()}
    if adapters is not None:
        for s, ad in enumerate(adapters.lora):
            tensors[f"lora{s}.A"] = ad.A.value
            tensors[f"lora{s}.B"] = ad.B.value
        bank = adapters.bank
        tensors[BANK_KEYS] = bank.keys.value
        tensors[BANK_PROMPTS] = bank.prompts.value
        tensors[BANK_N] = np.array([bank.n_pairs], dtype=np.float64)
        tensors[BANK_M] = np.array([bank.prompt_len], dtype=np.float64)
        header["adapters"] = {"r": adapters.lora[0].rank, "alpha": adapters.lora[0].alpha,
                              "n_select": adapters.n_select}
    header.update(meta or {})
    save_tensors(path, tensors, header)


def load_model(path: str | Path):
    """Returns (frozen ToyOVModel, AdapterSet or None, header)."""
    from .detector import AdapterSet
    from .model import ModelSpec, ToyOVModel
    from .numerics import SeededRng

    tensors, meta = load_tensors(path)
    arch = meta.get("architecture")
    if arch is None:
        raise CheckpointError(f"{path}: no architecture header")
    spec = ModelSpec(dim=arch["D"], n_stages=arch["S"], n_queries=arch["Q"],
                     head_hidden=arch["head_hidden"], max_text_len=arch["max_text_len"],
                     attn_radius=arch["attn_radius"], size_prior=arch["size_prior"],
                     head_layers=arch["head_layers"])
    model = ToyOVModel(arch["vocabulary"], spec, SeededRng(0))
    for name, p in model.named_parameters().items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != p.value.shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                                  f"expected {p.value.shape}")
        p.value = tensors[name].copy()
        p.grad = np.zeros_like(p.value)
    model.freeze()
    adapters = None
    if "adapters" in meta:
        a = meta["adapters"]
        n, m = int(tensors[BANK_N][0]), int(tensors[BANK_M][0])
        adapters = AdapterSet(model, SeededRng(0), a["r"], a["alpha"], n, m, a["n_select"])
        for name, p in adapters.named_parameters().items():
            p.value = tensors[name].copy()
            p.grad = np.zeros_like(p.value)
    return model, adapters, meta


# -- routers -----------------------------------------------------------------------


def save_router(path: str | Path, router) -> None:
    ext = router.extractor_
    tensors = {f"ae.{k}": v for k, v in router.autoencoder_.state().items()}
    tensors.update({"extractor.W1": ext.W1, "extractor.b1": ext.b1,
                    "extractor.W2": ext.W2, "extractor.b2": ext.b2})
    meta = {"mode": router.mode, "params": router.get_params()}
    save_tensors(path, tensors, meta)


def load_router(path: str | Path):
    from .router import ContentAutoencoder, DDASRouter, SemanticAwareRouter

    tensors, meta = load_tensors(path)
    cls = {"sar": SemanticAwareRouter, "ddas": DDASRouter}.get(meta.get("mode"))
    if cls is None:
        raise CheckpointError(f"{path}: not a router checkpoint")
    router = cls(**meta["params"])
    router.extractor_ = router._extractor()
    for k in ("W1", "b1", "W2", "b2"):
        setattr(router.extractor_, k, tensors[f"extractor.{k}"])
    router.autoencoder_ = ContentAutoencoder(router.feature_dim)
    router.autoencoder_.load_state({k[3:]: v for k, v in tensors.items() if k.startswith("ae.")})
    return router
