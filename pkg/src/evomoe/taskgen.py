"""Seeded synthetic multi-domain task streams.

Every task owns a disjoint block of global labels. Class prototypes are unit
vectors clustered around a task-specific direction; samples are
``Q_t @ (prototype + noise)`` with ``Q_t`` an orthogonal domain transform.
The frozen backbone's class embeddings come from the *clean* prototypes, so
the zero-shot path sees shifted inputs against unshifted references.

A "hard" task draws each sample from one of two domain transforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


@dataclass
class TaskSplit:
    x: np.ndarray  # (n, input_dim)
    y: np.ndarray  # local class index
    domain: np.ndarray  # which transform produced each sample


@dataclass
class DomainSpec:
    task: int
    name: str
    prototypes: np.ndarray  # (C, input_dim) unit rows, unshifted
    transforms: list[np.ndarray]  # orthogonal matrices; two for a hard task
    noise: float
    label_offset: int
    train: TaskSplit
    test: TaskSplit

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return self.label_offset + np.arange(self.num_classes)

    @property
    def hard(self) -> bool:
        return len(self.transforms) > 1


@dataclass
class TaskStream:
    tasks: list[DomainSpec]
    input_dim: int
    seed: int
    params: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tasks)

    def __getitem__(self, i: int) -> DomainSpec:
        return self.tasks[i]


def haar_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def random_orthogonal(dim: int, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Rotation by ``strength`` radians in every plane of a random basis.

    For even ``dim`` every vector is rotated by exactly ``strength``;
    ``strength=0`` gives the identity.
    """
    basis = haar_orthogonal(dim, rng)
    c, s = np.cos(strength), np.sin(strength)
    block = np.eye(dim)
    for i in range(0, dim - 1, 2):
        block[i : i + 2, i : i + 2] = [[c, -s], [s, c]]
    return basis @ block @ basis.T


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _min_angle(rows: np.ndarray) -> float:
    if len(rows) < 2:
        return np.pi
    cos = np.clip(rows @ rows.T, -1.0, 1.0)
    np.fill_diagonal(cos, -1.0)
    return float(np.arccos(cos.max()))


def generate_stream(
    num_tasks: int = 5,
    classes_per_task: int = 8,
    samples_per_class: int = 250,
    shift: float = 0.6,
    seed: int = 0,
    input_dim: int = 16,
    noise: float = 0.3,
    class_spread: float = 0.55,
    min_class_angle_deg: float = 15.0,
    min_task_angle_deg: float = 60.0,
    test_fraction: float = 0.2,
    hard_tasks: tuple[int, ...] = (2,),
    retries: int = 200,
) -> TaskStream:
    if num_tasks < 1 or classes_per_task < 1 or samples_per_class < 1:
        raise ValueError("num_tasks, classes_per_task and samples_per_class must be >= 1")
    root = np.random.SeedSequence([seed, 0x5EED])
    rng = np.random.default_rng(root.spawn(1)[0])

    centers = None
    for _ in range(retries):
        cand = _unit(rng.standard_normal((num_tasks, input_dim)))
        if _min_angle(cand) >= np.radians(min_task_angle_deg):
            centers = cand
            break
    if centers is None:
        raise ValueError(f"could not separate {num_tasks} task centers by {min_task_angle_deg} deg")

    n_test = int(round(samples_per_class * test_fraction))
    n_train = samples_per_class - n_test
    tasks = []
    offset = 0
    for t, task_seq in enumerate(root.spawn(num_tasks)):
        trng = np.random.default_rng(task_seq)
        protos = None
        for _ in range(retries):
            # every class sits class_spread radians away from the task center
            v = trng.standard_normal((classes_per_task, input_dim))
            v = _unit(v - np.outer(v @ centers[t], centers[t]))
            cand = np.cos(class_spread) * centers[t] + np.sin(class_spread) * v
            if _min_angle(cand) >= np.radians(min_class_angle_deg):
                protos = cand
                break
        if protos is None:
            raise ValueError(f"task {t}: could not separate {classes_per_task} classes by {min_class_angle_deg} deg")
        n_dom = 2 if t in hard_tasks else 1
        transforms = [random_orthogonal(input_dim, shift, trng) for _ in range(n_dom)]

        def draw(count: int) -> TaskSplit:
            y = np.repeat(np.arange(classes_per_task), count)
            dom = np.tile(np.arange(count) % n_dom, classes_per_task)
            clean = protos[y] + noise * trng.standard_normal((y.size, input_dim)) / np.sqrt(input_dim)
            x = np.empty_like(clean)
            for d, q in enumerate(transforms):
                sel = dom == d
                x[sel] = clean[sel] @ q.T
            perm = trng.permutation(y.size)
            return TaskSplit(x[perm], y[perm], dom[perm])

        train = draw(n_train)
        test = draw(n_test)
        tasks.append(
            DomainSpec(
                task=t,
                name=f"task{t}" + ("-hard" if n_dom > 1 else ""),
                prototypes=protos,
                transforms=transforms,
                noise=noise,
                label_offset=offset,
                train=train,
                test=test,
            )
        )
        offset += classes_per_task
    params = dict(
        num_tasks=num_tasks,
        classes_per_task=classes_per_task,
        samples_per_class=samples_per_class,
        shift=shift,
        input_dim=input_dim,
        noise=noise,
        class_spread=class_spread,
        min_class_angle_deg=min_class_angle_deg,
        min_task_angle_deg=min_task_angle_deg,
        test_fraction=test_fraction,
        hard_tasks=list(hard_tasks),
    )
    return TaskStream(tasks=tasks, input_dim=input_dim, seed=seed, params=params)


@dataclass
class StreamReport:
    checks: dict[str, bool]
    failures: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures


def verify_stream(stream: TaskStream, min_class_angle_deg: float | None = None, tol: float = 1e-9) -> StreamReport:
    checks: dict[str, bool] = {}
    failures: list[str] = []

    def check(name: str, ok: bool, msg: str) -> None:
        checks[name] = checks.get(name, True) and ok
        if not ok:
            failures.append(msg)

    seen: dict[int, int] = {}
    for spec in stream.tasks:
        for lab in spec.labels.tolist():
            if lab in seen:
                check("label_disjoint", False, f"label {lab} in task {spec.task} also in task {seen[lab]}")
            seen[lab] = spec.task
        checks.setdefault("label_disjoint", True)

        for i, q in enumerate(spec.transforms):
            err = float(np.abs(q.T @ q - np.eye(q.shape[0])).max())
            check("orthogonal", err <= tol, f"task {spec.task} transform {i} not orthogonal (max error {err:.3g})")

        tr = {r.tobytes() for r in spec.train.x}
        overlap = sum(r.tobytes() in tr for r in spec.test.x)
        check("split_disjoint", overlap == 0, f"task {spec.task}: {overlap} test rows also in train")

        for name, split in (("train", spec.train), ("test", spec.test)):
            counts = np.bincount(split.y, minlength=spec.num_classes)
            check(
                "class_counts",
                bool(np.all(counts == counts[0])) and counts.size == spec.num_classes,
                f"task {spec.task} {name}: unequal per-class counts {counts.tolist()}",
            )
        if min_class_angle_deg is not None:
            ang = np.degrees(_min_angle(spec.prototypes))
            check("class_separation", ang >= min_class_angle_deg - 1e-9, f"task {spec.task}: class prototypes only {ang:.2f} deg apart")
    return StreamReport(checks, failures)


def save_stream(stream: TaskStream, path: str | Path) -> None:
    """Write a versioned ``.npz`` bundle (little-endian float64)."""
    arrays = {}
    meta = {"format_version": FORMAT_VERSION, "seed": stream.seed, "input_dim": stream.input_dim, "params": stream.params, "tasks": []}
    for spec in stream.tasks:
        p = f"t{spec.task}_"
        arrays[p + "prototypes"] = spec.prototypes.astype("<f8")
        for i, q in enumerate(spec.transforms):
            arrays[p + f"Q{i}"] = q.astype("<f8")
        for split in ("train", "test"):
            s = getattr(spec, split)
            arrays[p + f"{split}_x"] = s.x.astype("<f8")
            arrays[p + f"{split}_y"] = s.y.astype("<i8")
            arrays[p + f"{split}_domain"] = s.domain.astype("<i8")
        meta["tasks"].append(
            {"task": spec.task, "name": spec.name, "noise": spec.noise, "label_offset": spec.label_offset, "transforms": len(spec.transforms)}
        )
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_stream(path: str | Path) -> TaskStream:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"dataset bundle version {meta.get('format_version')} != {FORMAT_VERSION}")
        tasks = []
        for tm in meta["tasks"]:
            p = f"t{tm['task']}_"
            splits = {
                s: TaskSplit(z[p + f"{s}_x"].astype(np.float64), z[p + f"{s}_y"].astype(np.int64), z[p + f"{s}_domain"].astype(np.int64))
                for s in ("train", "test")
            }
            tasks.append(
                DomainSpec(
                    task=tm["task"],
                    name=tm["name"],
                    prototypes=z[p + "prototypes"].astype(np.float64),
                    transforms=[z[p + f"Q{i}"].astype(np.float64) for i in range(tm["transforms"])],
                    noise=tm["noise"],
                    label_offset=tm["label_offset"],
                    train=splits["train"],
                    test=splits["test"],
                )
            )
    return TaskStream(tasks=tasks, input_dim=meta["input_dim"], seed=meta["seed"], params=meta["params"])
