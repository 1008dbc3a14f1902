"""Versioned, integrity-checked model checkpoints.

A checkpoint is an ``.npz`` archive. Every numeric array is stored with an
explicit little-endian dtype so files load identically on any host. The
``meta`` entry holds JSON (structure, config, hashes); ``digest`` is a
SHA-256 over the metadata and every array, checked before anything is
reconstructed.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import pges, scee
from .backbone import ClassEmbeddingTable, FrozenEncoder, LogitHead
from .errors import CheckpointError, CheckpointIntegrityError, CheckpointVersionError
from .moe import ExpertPool, LoraExpert, Router
from .trainer import ModelState, TrainConfig

FORMAT_VERSION = 1


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def _digest(meta_bytes: bytes, arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256(meta_bytes)
    for key in sorted(arrays):
        h.update(key.encode())
        h.update(np.ascontiguousarray(arrays[key]).tobytes())
    return h.hexdigest()


def _f8(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype="<f8")


def state_to_arrays(state: ModelState) -> tuple[dict, dict[str, np.ndarray]]:
    arrays: dict[str, np.ndarray] = {}
    enc = state.encoder
    meta: dict = {
        "format_version": FORMAT_VERSION,
        "config": state.config.to_dict(),
        "encoder": {
            "seed": enc.seed,
            "input_dim": enc.input_dim,
            "feature_dim": enc.feature_dim,
            "taps": enc.taps,
            "weight_scale": enc.weight_scale,
            "fingerprint": enc.fingerprint(),
        },
        "temperature": state.head.temperature,
        "table": [],
        "pool": {"rank": state.pool.rank, "dim": state.pool.dim, "next_id": list(state.pool.next_id), "experts": []},
        "routers": [],
        "prototypes": [],
        "delta": state.delta,
        "completed": list(state.completed),
        "calib_tasks": sorted(state.calib_scores),
        "opt": {
            "lr": state.opt.lr,
            "beta1": state.opt.beta1,
            "beta2": state.opt.beta2,
            "weight_decay": state.opt.weight_decay,
            "eps": state.opt.eps,
            "steps": dict(sorted(state.opt.steps.items())),
        },
        "rng": {"seed": state.config.seed, "streams": "SeedSequence([seed, task, purpose])"},
    }
    for t in state.table.tasks():
        meta["table"].append(t)
        arrays[f"table/{t}/labels"] = np.ascontiguousarray(state.table.labels(t), dtype="<i8")
        arrays[f"table/{t}/emb"] = _f8(state.table.embeddings(t))
    for layer in range(len(state.pool)):
        for e in state.pool.experts(layer):
            meta["pool"]["experts"].append({"layer": layer, "id": e.id, "origin_task": e.origin_task, "frozen": e.frozen})
            arrays[f"expert/{layer}/{e.id}/down"] = _f8(e.down.data)
            arrays[f"expert/{layer}/{e.id}/up"] = _f8(e.up.data)
    for (task, layer), r in sorted(state.routers.items()):
        meta["routers"].append({"key": [task, layer], "task": r.task, "expert_ids": r.expert_ids, "frozen": r.frozen, "name": r.weight.name[: -len(".W")]})
        arrays[f"router/{task}/{layer}/W"] = _f8(r.weight.data)
        arrays[f"router/{task}/{layer}/b"] = _f8(r.bias.data)
    for p in state.prototypes:
        comps = []
        for k, c in enumerate(p.components):
            comps.append({"logdet": c.logdet, "count": c.count, "reg": c.reg})
            for field in ("mean", "cov", "chol"):
                arrays[f"proto/{p.task}/{k}/{field}"] = _f8(getattr(c, field))
        meta["prototypes"].append({"task": p.task, "components": comps})
    for t, s in state.calib_scores.items():
        arrays[f"calib/{t}"] = _f8(s)
    for name in sorted(state.opt.m):
        arrays[f"opt/m/{name}"] = _f8(state.opt.m[name])
        arrays[f"opt/v/{name}"] = _f8(state.opt.v[name])
    return meta, arrays


def save_checkpoint(state: ModelState, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    meta, arrays = state_to_arrays(state)
    meta["config_hash"] = config_hash(meta["config"])
    meta["extra"] = extra or {}
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    digest = _digest(meta_bytes, arrays)
    payload = {k: v for k, v in arrays.items()}
    payload["meta"] = np.frombuffer(meta_bytes, dtype=np.uint8)
    payload["digest"] = np.frombuffer(digest.encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Load and verify; raises before returning anything partial."""
    raw = Path(path).read_bytes()
    try:
        with np.load(io.BytesIO(raw), allow_pickle=False) as z:
            contents = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, EOFError, ValueError, OSError, KeyError) as exc:
        raise CheckpointIntegrityError(f"{path}: unreadable checkpoint ({exc})") from exc
    if "meta" not in contents or "digest" not in contents:
        raise CheckpointIntegrityError(f"{path}: missing metadata")
    meta_bytes = contents.pop("meta").tobytes()
    stored = contents.pop("digest").tobytes().decode()
    if _digest(meta_bytes, contents) != stored:
        raise CheckpointIntegrityError(f"{path}: digest mismatch")
    meta = json.loads(meta_bytes)
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint format {version} is not supported (expected {FORMAT_VERSION}); re-run or migrate")
    return meta, contents


def load_checkpoint(path: str | Path) -> tuple[ModelState, dict]:
    meta, arrays = read_checkpoint(path)
    native = {k: v.astype(np.float64) if v.dtype.kind == "f" else v.astype(np.int64) for k, v in arrays.items()}
    cfg = TrainConfig.from_dict(meta["config"])
    e = meta["encoder"]
    encoder = FrozenEncoder(seed=e["seed"], input_dim=e["input_dim"], feature_dim=e["feature_dim"], taps=e["taps"], weight_scale=e["weight_scale"])
    if encoder.fingerprint() != e["fingerprint"]:
        raise CheckpointError("encoder rebuilt from seed does not match the recorded fingerprint")
    table = ClassEmbeddingTable()
    for t in meta["table"]:
        table.add_task(t, native[f"table/{t}/labels"], native[f"table/{t}/emb"])

    store = ad.ParamStore()
    pm = meta["pool"]
    pool = ExpertPool(e["taps"], pm["dim"], pm["rank"])
    pool.next_id = list(pm["next_id"])
    for em in pm["experts"]:
        layer, eid = em["layer"], em["id"]
        base = f"L{layer}.E{eid}"
        expert = LoraExpert(
            id=eid,
            layer=layer,
            origin_task=em["origin_task"],
            down=store.create(f"{base}.down", native[f"expert/{layer}/{eid}/down"], frozen=em["frozen"]),
            up=store.create(f"{base}.up", native[f"expert/{layer}/{eid}/up"], frozen=em["frozen"]),
        )
        pool.layers[layer].append(expert)
    routers = {}
    for rm in meta["routers"]:
        task, layer = rm["key"]
        routers[(task, layer)] = Router(
            task=rm["task"],
            layer=layer,
            weight=store.create(f"{rm['name']}.W", native[f"router/{task}/{layer}/W"], frozen=rm["frozen"]),
            bias=store.create(f"{rm['name']}.b", native[f"router/{task}/{layer}/b"], frozen=rm["frozen"]),
            expert_ids=list(rm["expert_ids"]),
        )
    protos = []
    for pmeta in meta["prototypes"]:
        t = pmeta["task"]
        comps = [
            pges.GaussianComponent(
                mean=native[f"proto/{t}/{k}/mean"],
                cov=native[f"proto/{t}/{k}/cov"],
                chol=native[f"proto/{t}/{k}/chol"],
                logdet=c["logdet"],
                count=c["count"],
                reg=c["reg"],
            )
            for k, c in enumerate(pmeta["components"])
        ]
        protos.append(pges.TaskPrototypeSet(task=t, components=comps))
    om = meta["opt"]
    opt = ad.AdamWState(lr=om["lr"], beta1=om["beta1"], beta2=om["beta2"], weight_decay=om["weight_decay"], eps=om["eps"])
    opt.steps = {k: int(v) for k, v in om["steps"].items()}
    for key, arr in native.items():
        if key.startswith("opt/m/"):
            opt.m[key[len("opt/m/") :]] = arr
        elif key.startswith("opt/v/"):
            opt.v[key[len("opt/v/") :]] = arr
    state = ModelState(
        encoder=encoder,
        table=table,
        head=LogitHead(meta["temperature"]),
        pool=pool,
        store=store,
        opt=opt,
        config=cfg,
        routers=routers,
        prototypes=protos,
        calib_scores={t: native[f"calib/{t}"] for t in meta["calib_tasks"]},
        delta=float(meta["delta"]),
        completed=list(meta["completed"]),
        baselines=[scee.Baselines(cfg.alpha) for _ in range(e["taps"])],
        telemetry=[scee.ExpertTelemetry(window=cfg.interval) for _ in range(e["taps"])],
    )
    return state, meta
