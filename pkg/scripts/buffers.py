"""
Bounded rehearsal buffers.

Both buffer kinds use reservoir sampling: after n offers, every offered item
is held with probability capacity / n. DER++ buffers hold whole slides with
the logits they received at storage time; BuRo buffers hold single regions
and recombine same-class regions into synthetic slides for replay.
"""
from dataclasses import dataclass, field
from typing import List, Union

import numpy as np

from scripts.core import GlobalLabel
from scripts.datagen import STORAGE_DTYPE, SlideBag
from scripts.error_handling import DomainError, SamplingError
from scripts.logger import get_logger

logger = get_logger(__name__)

BUFFER_KINDS = ("der", "region")


@dataclass(eq=False)
class ReplayItemDer:
    """A stored slide and the logits it produced when it was stored."""
    bag: SlideBag
    stored_logits: np.ndarray

    def __post_init__(self):
        self.stored_logits = np.asarray(self.stored_logits, dtype=np.float64).reshape(-1)

    @property
    def label(self) -> GlobalLabel:
        return self.bag.label

    def __eq__(self, other):
        if not isinstance(other, ReplayItemDer):
            return NotImplemented
        return self.bag == other.bag and np.array_equal(self.stored_logits, other.stored_logits)


@dataclass(eq=False)
class RegionBufferItem:
    """One region cut out of a finished task's slide."""
    region_embedding: np.ndarray
    patches: np.ndarray
    label: GlobalLabel
    slide_id: str

    def __post_init__(self):
        self.region_embedding = np.asarray(self.region_embedding, dtype=STORAGE_DTYPE).reshape(-1)
        self.patches = np.asarray(self.patches, dtype=STORAGE_DTYPE).reshape(-1, self.region_embedding.size)

    def __eq__(self, other):
        if not isinstance(other, RegionBufferItem):
            return NotImplemented
        return (self.label == other.label and self.slide_id == other.slide_id
                and np.array_equal(self.region_embedding, other.region_embedding)
                and np.array_equal(self.patches, other.patches))


BufferItem = Union[ReplayItemDer, RegionBufferItem]


@dataclass(eq=False)
class ReplayBuffer:
    """Reservoir of at most ``capacity`` items; ``seen_count`` counts every offer."""
    capacity: int
    kind: str = "der"
    items: List[BufferItem] = field(default_factory=list)
    seen_count: int = 0

    def __post_init__(self):
        if self.capacity < 0:
            raise DomainError(f"buffer capacity must be non-negative, got {self.capacity}")
        if self.kind not in BUFFER_KINDS:
            raise DomainError(f"unknown buffer kind '{self.kind}'")
        if len(self.items) > self.capacity or self.seen_count < len(self.items):
            raise DomainError(
                f"buffer holds {len(self.items)} items for capacity {self.capacity} "
                f"after {self.seen_count} offers"
            )

    def __len__(self) -> int:
        return len(self.items)

    def is_empty(self) -> bool:
        return not self.items

    def classes_present(self) -> List[int]:
        return sorted({item.label.global_id for item in self.items})

    def __eq__(self, other):
        if not isinstance(other, ReplayBuffer):
            return NotImplemented
        return (self.capacity == other.capacity and self.kind == other.kind
                and self.seen_count == other.seen_count and self.items == other.items)


def reservoir_insert(buffer: ReplayBuffer, item: BufferItem, rng: np.random.Generator) -> ReplayBuffer:
    """Offer one item to the reservoir; the buffer is updated in place and returned."""
    buffer.seen_count += 1
    if buffer.capacity == 0:
        return buffer
    if len(buffer.items) < buffer.capacity:
        buffer.items.append(item)
        return buffer
    slot = int(rng.integers(0, buffer.seen_count))
    if slot < buffer.capacity:
        buffer.items[slot] = item
    return buffer


def sample_items(buffer: ReplayBuffer, count: int, rng: np.random.Generator) -> List[BufferItem]:
    """``count`` items drawn uniformly with replacement."""
    if buffer.is_empty():
        raise SamplingError("cannot sample from an empty buffer")
    return [buffer.items[int(i)] for i in rng.integers(0, len(buffer.items), size=count)]


def buro_store(buffer: ReplayBuffer, bag: SlideBag, rng: np.random.Generator) -> ReplayBuffer:
    """Offer every region of a slide to the reservoir as an independent item."""
    for r in range(bag.n_regions):
        item = RegionBufferItem(bag.region_embeddings[r], bag.patches[r], bag.label, bag.slide_id)
        reservoir_insert(buffer, item, rng)
    return buffer


def buro_sample(buffer: ReplayBuffer, regions_per_bag: int, rng: np.random.Generator) -> SlideBag:
    """
    Recombine stored regions into a synthetic slide.

    A class is chosen uniformly among the classes present, then
    ``regions_per_bag`` regions of that class are drawn with replacement.
    """
    if buffer.is_empty():
        raise SamplingError("cannot sample a bag from an empty region buffer")
    if regions_per_bag < 1:
        raise DomainError(f"regions_per_bag must be positive, got {regions_per_bag}")

    classes = buffer.classes_present()
    chosen = classes[int(rng.integers(0, len(classes)))]
    pool = [item for item in buffer.items if item.label.global_id == chosen]
    picks = [pool[int(i)] for i in rng.integers(0, len(pool), size=regions_per_bag)]
    return SlideBag(
        f"buro-c{chosen}",
        pool[0].label,
        np.stack([item.region_embedding for item in picks]),
        np.stack([item.patches for item in picks]),
    )
