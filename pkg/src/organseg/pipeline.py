"""Case volumes to training samples: 2.5D stacks, crops, targets, folds, batches."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .catalog import OrganCatalog, availability_mask
from .phantom import CaseVolume


@dataclass
class SliceStack:
    values: np.ndarray  # [S, H, W]
    center_index: int
    case_ref: tuple[int, str]  # (source, case id)


@dataclass
class TrainingSample:
    input: SliceStack
    target_onehot: np.ndarray  # [C, H, W] uint8, background channel last
    availability: np.ndarray  # [C-1] uint8
    region_label: int


@dataclass
class Batch:
    inputs: np.ndarray  # [B, S, H, W] float32
    targets: np.ndarray  # [B, C, H, W] float32
    availabilities: np.ndarray  # [B, C-1] float32
    region_labels: np.ndarray  # [B] int64
    refs: list


def normalize_intensities(volume: np.ndarray) -> np.ndarray:
    """Per-case min-max scaling to [0, 1]; constant volumes map to zeros."""
    v = np.asarray(volume, dtype=np.float32)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def stack_slices(case: CaseVolume, center: int, S: int = 5, volume: np.ndarray | None = None) -> SliceStack:
    """Slices ``center - S//2 .. center + S//2`` with edge replication.

    ``volume`` overrides ``case.intensities`` (e.g. a normalized copy).
    """
    if S < 1 or S % 2 == 0:
        raise ValueError(f"stack size must be odd, got {S}")
    vol = case.intensities if volume is None else volume
    D = vol.shape[0]
    if not 0 <= center < D:
        raise IndexError(f"center slice {center} out of range [0, {D})")
    idx = np.clip(np.arange(center - S // 2, center + S // 2 + 1), 0, D - 1)
    return SliceStack(vol[idx], center, (case.source, case.case_id))


def crop_offsets(H0: int, W0: int, H: int, W: int) -> tuple[int, int]:
    if H > H0 or W > W0:
        raise ValueError(f"crop {H}x{W} larger than input {H0}x{W0}")
    return (H0 - H) // 2, (W0 - W) // 2


def crop_array(a: np.ndarray, H: int, W: int) -> np.ndarray:
    """Center crop of the last two axes."""
    oy, ox = crop_offsets(a.shape[-2], a.shape[-1], H, W)
    return a[..., oy:oy + H, ox:ox + W]


def center_crop(stack: SliceStack, H: int, W: int) -> SliceStack:
    return replace(stack, values=crop_array(stack.values, H, W))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """[H, W] integer labels -> [C, H, W] uint8."""
    return (labels[None] == np.arange(num_classes)[:, None, None]).astype(np.uint8)


def case_samples(case: CaseVolume, catalog: OrganCatalog, S: int = 5,
                 crop: tuple[int, int] | None = None) -> list[TrainingSample]:
    """One sample per slice (stride-1 window over z)."""
    vol = normalize_intensities(case.intensities)
    labels = case.label_map
    if crop is not None:
        vol = crop_array(vol, *crop)
        labels = crop_array(labels, *crop)
    avail = availability_mask(catalog, case.source).mask
    out = []
    for z in range(vol.shape[0]):
        out.append(TrainingSample(
            input=stack_slices(case, z, S, volume=vol),
            target_onehot=one_hot(labels[z], catalog.num_classes),
            availability=avail,
            region_label=int(case.region_per_slice[z]),
        ))
    return out


def elastic_transform_2d(sample: TrainingSample, amplitude: float, smoothness: float,
                         seed: int) -> TrainingSample:
    """Warp input slices and target channels with one smooth random field.

    ``amplitude`` is the peak displacement in pixels, ``smoothness`` the
    Gaussian sigma (pixels) applied to white noise before rescaling.
    """
    if amplitude < 0:
        raise ValueError("amplitude must be >= 0")
    if amplitude == 0:
        return replace(sample, input=replace(sample.input, values=sample.input.values.copy()),
                       target_onehot=sample.target_onehot.copy())

    S, H, W = sample.input.values.shape
    rng = np.random.default_rng(seed)
    fields = []
    for _ in range(2):
        f = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, size=(H, W)), smoothness, mode="reflect")
        peak = np.abs(f).max()
        fields.append(f * (amplitude / peak) if peak > 0 else f)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    coords = np.stack([yy + fields[0], xx + fields[1]])

    values = np.stack([
        ndimage.map_coordinates(s.astype(np.float64), coords, order=1, mode="nearest")
        for s in sample.input.values
    ]).astype(sample.input.values.dtype)
    labels = np.argmax(sample.target_onehot, axis=0)
    warped = ndimage.map_coordinates(labels, coords, order=0, mode="nearest")
    target = one_hot(warped, sample.target_onehot.shape[0])
    return replace(sample, input=replace(sample.input, values=values), target_onehot=target)


def make_folds(case_ids: Sequence, k: int, seed: int,
               sources: Sequence[int] | None = None) -> list[tuple[list, list]]:
    """Source-stratified k-fold split; returns ``(train_ids, test_ids)`` per fold."""
    ids = list(case_ids)
    if k < 2:
        raise ValueError("need k >= 2 folds")
    if len(ids) < k:
        raise ValueError(f"{len(ids)} cases cannot fill {k} folds")
    if sources is None:
        sources = [0] * len(ids)
    groups: dict[int, list] = {}
    for cid, src in zip(ids, sources):
        groups.setdefault(int(src), []).append(cid)

    rng = np.random.default_rng(seed)
    tests: list[list] = [[] for _ in range(k)]
    offset = 0
    for src in sorted(groups):
        members = groups[src]
        if len(members) < k:
            warnings.warn(f"source {src} has {len(members)} cases for {k} folds; "
                          "some test folds will miss it", stacklevel=2)
        for j, pos in enumerate(rng.permutation(len(members))):
            tests[(offset + j) % k].append(members[pos])
        offset += len(members)

    order = {cid: i for i, cid in enumerate(ids)}
    folds = []
    for test in tests:
        test = sorted(test, key=order.__getitem__)
        held = set(test)
        folds.append(([c for c in ids if c not in held], test))
    return folds


def collate(samples: Sequence[TrainingSample]) -> Batch:
    return Batch(
        inputs=np.stack([s.input.values for s in samples]).astype(np.float32),
        targets=np.stack([s.target_onehot for s in samples]).astype(np.float32),
        availabilities=np.stack([s.availability for s in samples]).astype(np.float32),
        region_labels=np.array([s.region_label for s in samples], dtype=np.int64),
        refs=[(s.input.case_ref, s.input.center_index) for s in samples],
    )


def batch_iterator(samples: Sequence[TrainingSample], B: int = 16,
                   shuffle_seed: int | None = 0) -> Iterator[Batch]:
    """Shuffled mini-batches; the last short batch is kept.

    ``shuffle_seed=None`` keeps the input order.
    """
    if B < 1:
        raise ValueError("batch size must be >= 1")
    if len(samples) == 0:
        raise ValueError("no samples to batch")
    if shuffle_seed is None:
        order = np.arange(len(samples))
    else:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))

    def _gen():
        for i in range(0, len(order), B):
            yield collate([samples[j] for j in order[i:i + B]])

    return _gen()
