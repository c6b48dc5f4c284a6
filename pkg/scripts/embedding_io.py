"""
Binary file formats of the harness.

All four formats are little-endian and start with a four-byte magic and a
u32 format version:

- ZSLB: slide embeddings of a task sequence (ingestion point for real
  precomputed features)
- ZSLP: class prototype variants
- ZSLM: aggregator and head checkpoint
- ZSLR: rehearsal buffer snapshot

Readers report the byte offset of the first problem and, for slide records,
the index of the failing slide.
"""
import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from scripts.aggregator import AGGREGATOR_KINDS, AggregatorParams
from scripts.buffers import RegionBufferItem, ReplayBuffer, ReplayItemDer
from scripts.core import GlobalLabel, LabelSpace
from scripts.datagen import STORAGE_DTYPE, SlideBag, TaskDataset, TaskPrototypeSpec, TaskSpec
from scripts.error_handling import ConsistencyError, FormatError
from scripts.logger import get_logger
from scripts.version import FORMAT_VERSIONS

logger = get_logger(__name__)

PathLike = Union[str, os.PathLike]

MAGIC_EMBEDDINGS = b"ZSLB"
MAGIC_PROTOTYPES = b"ZSLP"
MAGIC_MODEL = b"ZSLM"
MAGIC_BUFFER = b"ZSLR"

BUFFER_KIND_CODES = {"der": 1, "region": 2}
SPLITS = ("train", "val", "test")


class _Reader:
    """Cursor over a byte string that raises FormatError with the failing offset."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0
        self.slide_index: Optional[int] = None

    def fail(self, message: str, offset: Optional[int] = None):
        raise FormatError(message, offset=self.offset if offset is None else offset,
                          slide_index=self.slide_index)

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            self.fail(f"truncated {what}: need {size} bytes, {len(self.data) - self.offset} left")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))[0]

    def u8(self, what: str) -> int:
        return self.unpack("<B", what)

    def u16(self, what: str) -> int:
        return self.unpack("<H", what)

    def u32(self, what: str) -> int:
        return self.unpack("<I", what)

    def u64(self, what: str) -> int:
        return self.unpack("<Q", what)

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(width * count, what), dtype=dtype).copy()

    def header(self, magic: bytes) -> int:
        found = self.take(4, "magic")
        if found != magic:
            self.fail(f"bad magic {found!r}, expected {magic!r}", offset=0)
        version = self.u32("version")
        expected = FORMAT_VERSIONS[magic.decode("ascii")]
        if version != expected:
            self.fail(f"unsupported {magic.decode('ascii')} version {version}, expected {expected}", offset=4)
        return version

    def finish(self) -> None:
        self.slide_index = None
        if self.offset != len(self.data):
            self.fail(f"{len(self.data) - self.offset} trailing bytes")


def _read_bytes(path: PathLike) -> bytes:
    return Path(path).read_bytes()


def _atomic_write(path: PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    logger.debug("wrote %d bytes to %s", len(payload), path)


# Slide records (shared by ZSLB and ZSLR)

def _pack_slide(out: io.BytesIO, slide_id: str, local_class: int,
                regions: np.ndarray, patches: np.ndarray) -> None:
    encoded = slide_id.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise FormatError(f"slide id of {len(encoded)} bytes does not fit a u16 length")
    regions = np.asarray(regions, dtype="<f4")
    patches = np.asarray(patches, dtype="<f4")
    out.write(struct.pack("<H", len(encoded)))
    out.write(encoded)
    out.write(struct.pack("<III", local_class, regions.shape[0], patches.shape[1]))
    for r in range(regions.shape[0]):
        out.write(regions[r].tobytes())
        out.write(patches[r].tobytes())


def _read_slide(reader: _Reader, dim: int) -> Tuple[str, int, np.ndarray, np.ndarray]:
    id_len = reader.u16("slide id length")
    start = reader.offset
    try:
        slide_id = reader.take(id_len, "slide id").decode("utf-8")
    except UnicodeDecodeError:
        reader.fail("slide id is not valid UTF-8", offset=start)
    local_class = reader.u32("local class")
    region_count = reader.u32("region count")
    patches_per_region = reader.u32("patches per region")
    if region_count == 0:
        reader.fail(f"slide '{slide_id}' has no regions")
    needed = region_count * (1 + patches_per_region) * dim * np.dtype(STORAGE_DTYPE).itemsize
    left = len(reader.data) - reader.offset
    if needed > left:
        reader.fail(f"slide '{slide_id}' declares {region_count} regions of {patches_per_region} patches "
                    f"({needed} bytes), {left} left")
    regions = np.empty((region_count, dim), dtype=STORAGE_DTYPE)
    patches = np.empty((region_count, patches_per_region, dim), dtype=STORAGE_DTYPE)
    for r in range(region_count):
        regions[r] = reader.array("<f4", dim, "region embedding")
        patches[r] = reader.array("<f4", patches_per_region * dim, "patches").reshape(patches_per_region, dim)
    return slide_id, local_class, regions, patches


# ZSLB

def write_embedding_file(tasks: Sequence[TaskDataset], path: PathLike) -> None:
    """Write a task sequence in the ZSLB format."""
    dims = {bag.dim for task in tasks for bag in task.all_slides()}
    if len(dims) != 1:
        raise ConsistencyError(f"slides of a sequence must share one dim, found {sorted(dims)}")
    dim = dims.pop()

    out = io.BytesIO()
    out.write(MAGIC_EMBEDDINGS)
    out.write(struct.pack("<III", FORMAT_VERSIONS["ZSLB"], dim, len(tasks)))
    for task in tasks:
        out.write(struct.pack("<I", task.class_count))
        for split in SPLITS:
            bags = getattr(task, split)
            out.write(struct.pack("<I", len(bags)))
            for bag in bags:
                _pack_slide(out, bag.slide_id, bag.label.local_class, bag.region_embeddings, bag.patches)
    _atomic_write(path, out.getvalue())
    logger.info("wrote %d tasks to %s", len(tasks), path)


def load_embedding_file(path: PathLike) -> List[TaskDataset]:
    """Read a ZSLB file back into task datasets (without generated class means)."""
    reader = _Reader(_read_bytes(path))
    reader.header(MAGIC_EMBEDDINGS)
    dim = reader.u32("dim")
    if dim == 0:
        reader.fail("dim must be positive", offset=reader.offset - 4)
    task_count = reader.u32("task count")

    raw = []
    slide_index = 0
    patches_per_region: Optional[int] = None
    for task_index in range(task_count):
        class_count = reader.u32(f"class count of task {task_index}")
        if class_count == 0:
            reader.fail(f"task {task_index} declares no classes", offset=reader.offset - 4)
        splits: Dict[str, list] = {}
        for split in SPLITS:
            slide_count = reader.u32(f"{split} slide count of task {task_index}")
            records = []
            for _ in range(slide_count):
                reader.slide_index = slide_index
                record = _read_slide(reader, dim)
                if record[1] >= class_count:
                    raise ConsistencyError(
                        f"slide index {slide_index}: local class {record[1]} outside "
                        f"task {task_index} ({class_count} classes)"
                    )
                if patches_per_region is None:
                    patches_per_region = record[3].shape[1]
                elif record[3].shape[1] != patches_per_region:
                    raise ConsistencyError(
                        f"slide index {slide_index}: {record[3].shape[1]} patches per region, "
                        f"earlier slides have {patches_per_region}"
                    )
                records.append(record)
                slide_index += 1
            reader.slide_index = None
            splits[split] = records
        raw.append((class_count, splits))
    reader.finish()

    label_space = LabelSpace([class_count for class_count, _ in raw])
    tasks = []
    for task_index, (class_count, splits) in enumerate(raw):
        total = sum(len(records) for records in splits.values())
        spec = TaskSpec(task_index, class_count, total // class_count)
        bags = {
            split: [SlideBag(slide_id, label_space.label(task_index, local), regions, patches)
                    for slide_id, local, regions, patches in records]
            for split, records in splits.items()
        }
        tasks.append(TaskDataset(spec, bags["train"], bags["val"], bags["test"]))
    logger.info("loaded %d tasks (%d slides, dim %d) from %s", len(tasks), slide_index, dim, path)
    return tasks


# ZSLP

def write_prototype_file(specs: Sequence[TaskPrototypeSpec], path: PathLike) -> None:
    """Write prototype variants in the ZSLP format."""
    dims = {variants.shape[1] for spec in specs for variants in spec.variants}
    if len(dims) != 1:
        raise ConsistencyError(f"prototype variants must share one dim, found {sorted(dims)}")
    dim = dims.pop()

    out = io.BytesIO()
    out.write(MAGIC_PROTOTYPES)
    out.write(struct.pack("<III", FORMAT_VERSIONS["ZSLP"], dim, len(specs)))
    for spec in specs:
        out.write(struct.pack("<I", spec.class_count))
        for variants in spec.variants:
            out.write(struct.pack("<I", variants.shape[0]))
            out.write(np.asarray(variants, dtype="<f4").tobytes())
    _atomic_write(path, out.getvalue())
    logger.info("wrote prototypes of %d tasks to %s", len(specs), path)


def load_prototype_file(path: PathLike) -> List[TaskPrototypeSpec]:
    reader = _Reader(_read_bytes(path))
    reader.header(MAGIC_PROTOTYPES)
    dim = reader.u32("dim")
    if dim == 0:
        reader.fail("dim must be positive", offset=reader.offset - 4)
    task_count = reader.u32("task count")
    specs = []
    for task_index in range(task_count):
        class_count = reader.u32(f"class count of task {task_index}")
        per_class = []
        for local in range(class_count):
            variant_count = reader.u32(f"variant count of task {task_index} class {local}")
            if variant_count == 0:
                reader.fail(f"task {task_index} class {local} has no variants", offset=reader.offset - 4)
            values = reader.array("<f4", variant_count * dim, f"variants of task {task_index} class {local}")
            per_class.append(values.reshape(variant_count, dim))
        specs.append(TaskPrototypeSpec(task_index, per_class))
    reader.finish()
    return specs


def check_prototypes_match(tasks: Sequence[TaskDataset], specs: Sequence[TaskPrototypeSpec]) -> None:
    """Prototype specs must cover every task with the same class counts and dim."""
    if len(specs) < len(tasks):
        raise ConsistencyError(f"prototypes cover {len(specs)} tasks, the data has {len(tasks)}")
    for task, spec in zip(tasks, specs):
        if spec.class_count != task.class_count:
            raise ConsistencyError(
                f"task {task.task_index}: {spec.class_count} prototype classes for "
                f"{task.class_count} data classes"
            )
        slides = task.all_slides()
        for variants in spec.variants:
            if slides and variants.shape[1] != slides[0].dim:
                raise ConsistencyError(
                    f"task {task.task_index}: prototype dim {variants.shape[1]} "
                    f"differs from embedding dim {slides[0].dim}"
                )


# ZSLM

def write_model_file(params: AggregatorParams, path: PathLike) -> None:
    out = io.BytesIO()
    out.write(MAGIC_MODEL)
    out.write(struct.pack("<IBII", FORMAT_VERSIONS["ZSLM"], AGGREGATOR_KINDS.index(params.kind),
                          params.dim, params.class_count))
    out.write(params.flat().astype("<f8").tobytes())
    _atomic_write(path, out.getvalue())


def load_model_file(path: PathLike) -> AggregatorParams:
    reader = _Reader(_read_bytes(path))
    reader.header(MAGIC_MODEL)
    kind_code = reader.u8("aggregator kind")
    if kind_code >= len(AGGREGATOR_KINDS):
        reader.fail(f"unknown aggregator kind {kind_code}", offset=reader.offset - 1)
    dim = reader.u32("dim")
    class_count = reader.u32("class count")
    size = 2 * dim + class_count * (dim + 1)
    values = reader.array("<f8", size, "parameters")
    reader.finish()
    template = AggregatorParams(AGGREGATOR_KINDS[kind_code], np.zeros(dim), np.zeros(dim),
                                np.zeros((class_count, dim)), np.zeros(class_count))
    return template.with_flat(values)


# ZSLR

def write_buffer_file(buffer: ReplayBuffer, path: PathLike, dim: int) -> None:
    out = io.BytesIO()
    out.write(MAGIC_BUFFER)
    out.write(struct.pack("<IBIIQI", FORMAT_VERSIONS["ZSLR"], BUFFER_KIND_CODES[buffer.kind],
                          dim, buffer.capacity, buffer.seen_count, len(buffer.items)))
    for item in buffer.items:
        label = item.label
        out.write(struct.pack("<II", label.task_index, label.global_id))
        if isinstance(item, ReplayItemDer):
            bag = item.bag
            _pack_slide(out, bag.slide_id, label.local_class, bag.region_embeddings, bag.patches)
            out.write(struct.pack("<I", item.stored_logits.size))
            out.write(item.stored_logits.astype("<f8").tobytes())
        else:
            _pack_slide(out, item.slide_id, label.local_class,
                        item.region_embedding[np.newaxis, :], item.patches[np.newaxis, :, :])
    _atomic_write(path, out.getvalue())


def load_buffer_file(path: PathLike) -> ReplayBuffer:
    reader = _Reader(_read_bytes(path))
    reader.header(MAGIC_BUFFER)
    kind_code = reader.u8("buffer kind")
    kinds = {code: kind for kind, code in BUFFER_KIND_CODES.items()}
    if kind_code not in kinds:
        reader.fail(f"unknown buffer kind {kind_code}", offset=reader.offset - 1)
    kind = kinds[kind_code]
    dim = reader.u32("dim")
    capacity = reader.u32("capacity")
    seen_count = reader.u64("seen count")
    item_count = reader.u32("item count")
    if item_count > capacity or item_count > seen_count:
        raise ConsistencyError(
            f"{item_count} items for capacity {capacity} after {seen_count} offers"
        )

    items = []
    for index in range(item_count):
        reader.slide_index = index
        task_index = reader.u32("item task index")
        global_id = reader.u32("item class")
        slide_id, local, regions, patches = _read_slide(reader, dim)
        label = GlobalLabel(task_index, local, global_id)
        if kind == "der":
            logit_count = reader.u32("stored logit count")
            logits = reader.array("<f8", logit_count, "stored logits")
            items.append(ReplayItemDer(SlideBag(slide_id, label, regions, patches), logits))
        else:
            if regions.shape[0] != 1:
                raise ConsistencyError(f"region item {index} holds {regions.shape[0]} regions")
            items.append(RegionBufferItem(regions[0], patches[0], label, slide_id))
    reader.finish()
    return ReplayBuffer(capacity, kind, items, seen_count)


# Validation

@dataclass(frozen=True)
class FileSummary:
    path: str
    format: str
    version: int
    detail: str

    def __str__(self):
        return f"{self.path}: {self.format} v{self.version}, {self.detail}"


def validate_file(path: PathLike) -> FileSummary:
    """Fully parse a file of any of the four formats and summarize it."""
    data = _read_bytes(path)
    magic = data[:4]
    if magic == MAGIC_EMBEDDINGS:
        tasks = load_embedding_file(path)
        slides = sum(len(task.all_slides()) for task in tasks)
        dim = tasks[0].all_slides()[0].dim if slides else 0
        detail = f"{len(tasks)} tasks, {sum(t.class_count for t in tasks)} classes, {slides} slides, dim {dim}"
    elif magic == MAGIC_PROTOTYPES:
        specs = load_prototype_file(path)
        detail = f"{len(specs)} tasks, {sum(s.class_count for s in specs)} classes"
    elif magic == MAGIC_MODEL:
        params = load_model_file(path)
        detail = f"{params.kind} aggregator, dim {params.dim}, {params.class_count} classes"
    elif magic == MAGIC_BUFFER:
        buffer = load_buffer_file(path)
        detail = f"{buffer.kind} buffer, {len(buffer)}/{buffer.capacity} items, {buffer.seen_count} offered"
    else:
        raise FormatError(f"unrecognized magic {magic!r}", offset=0)
    return FileSummary(str(path), magic.decode("ascii"), FORMAT_VERSIONS[magic.decode("ascii")], detail)
