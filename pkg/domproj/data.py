"""Datasets: folder ingestion with WSI-as-domain labels and a synthetic stain-shift generator."""

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
from PIL import Image
from scipy import ndimage
from torch.utils.data import Dataset

from domproj.core import DataError, ExperimentConfig, ValidationError, numpy_generator

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {'.png', '.jpg', '.jpeg', '.tif', '.tiff', '.bmp'}


class Split(str, enum.Enum):
    TRAIN = 'train'
    ID_VAL = 'id_val'
    OOD_VAL = 'ood_val'
    OOD_TEST = 'ood_test'


OOD_SPLITS = (Split.OOD_VAL, Split.OOD_TEST)


@dataclass(frozen=True)
class LabeledSample:
    image: torch.Tensor  # (C, H, W) in [-1, 1]
    class_label: int
    domain: int
    split: Split


class DomainDataset(Dataset):
    """In-memory images of one split with class and domain labels"""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, domains: torch.Tensor, split: Split,
                 class_names: List[str], domain_names: List[str]):
        if not (len(images) == len(labels) == len(domains)):
            raise DataError('images, labels and domains must have the same length')
        if len(labels) and int(labels.max()) >= len(class_names):
            raise DataError(f'class label {int(labels.max())} outside the {len(class_names)} known classes')
        self.images = images.float()
        self.labels = labels.long()
        self.domains = domains.long()
        self.split = Split(split)
        self.class_names = list(class_names)
        self.domain_names = list(domain_names)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, index):
        return self.images[index], self.labels[index], self.domains[index]

    def samples(self) -> Iterator[LabeledSample]:
        for image, label, domain in zip(self.images, self.labels.tolist(), self.domains.tolist()):
            yield LabeledSample(image, label, domain, self.split)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def domain_ids(self) -> List[int]:
        return sorted(set(self.domains.tolist()))

    def indices_of_domain(self, domain: int) -> torch.Tensor:
        return torch.nonzero(self.domains == domain, as_tuple=False).flatten()

    def summary(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            'split': self.split.value,
            'class': [self.class_names[i] for i in self.labels.tolist()],
            'domain': [self.domain_names[i] for i in self.domains.tolist()],
        })
        return frame.groupby(['split', 'class', 'domain']).size().rename('count').reset_index()


@dataclass
class DatasetBundle:
    """All splits of one dataset with a shared dense domain mapping"""
    splits: Dict[Split, DomainDataset]
    domain_mapping: Dict[str, int]
    class_names: List[str]
    num_source_domains: int

    def __getitem__(self, split: Union[str, Split]) -> DomainDataset:
        split = Split(split)
        if split not in self.splits:
            raise DataError(f'dataset has no {split.value!r} split (available: {", ".join(s.value for s in self.splits)})')
        return self.splits[split]

    def __contains__(self, split) -> bool:
        return Split(split) in self.splits

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def check_split_hygiene(self):
        """OOD splits must not contain any training domain"""
        if Split.TRAIN not in self.splits:
            return
        train_domains = set(self.splits[Split.TRAIN].domain_ids)
        for split in OOD_SPLITS:
            if split in self.splits:
                shared = train_domains & set(self.splits[split].domain_ids)
                if shared:
                    names = [self.splits[split].domain_names[i] for i in sorted(shared)]
                    raise DataError(f'{split.value} shares training domains: {", ".join(names)}')

    def summary(self) -> pd.DataFrame:
        return pd.concat([ds.summary() for ds in self.splits.values()], ignore_index=True)

    def save_mapping(self, path: Union[str, Path]):
        Path(path).write_text(json.dumps({
            'domains': self.domain_mapping,
            'classes': self.class_names,
            'num_source_domains': self.num_source_domains,
        }, indent=2), encoding='utf-8')


##################################################################################
# Folder datasets
##################################################################################

def _read_image(path: Path, resolution: Optional[int]) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert('RGB')
        if resolution is not None and img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), Image.BILINEAR)
        array = np.asarray(img, dtype=np.float32)
    return array.transpose(2, 0, 1) / 127.5 - 1.0


def _list_images(folder: Path) -> List[Path]:
    return sorted(p for p in folder.rglob('*') if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def load_folder_dataset(root: Union[str, Path], domain_key: str = 'subfolder',
                        metadata_path: Optional[Union[str, Path]] = None,
                        resolution: Optional[int] = None) -> DatasetBundle:
    """Load root/<split>/<class>/... with one domain per WSI (or any grouping).

    domain_key='subfolder' expects root/<split>/<class>/<domain>/<image>; 'metadata_column'
    expects root/<split>/<class>/<image> plus a CSV with columns `path` (relative to root)
    and `domain`.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f'dataset root not found: {root}')
    if domain_key not in ('subfolder', 'metadata_column'):
        raise DataError(f'unknown domain key {domain_key!r}')

    metadata = None
    if domain_key == 'metadata_column':
        if metadata_path is None:
            raise DataError('domain_key=metadata_column needs a metadata table')
        table = pd.read_csv(metadata_path)
        if not {'path', 'domain'} <= set(table.columns):
            raise DataError(f'metadata table {metadata_path} needs columns path and domain')
        metadata = {Path(p).as_posix(): str(d) for p, d in zip(table['path'], table['domain'])}

    split_dirs = {split: root / split.value for split in Split if (root / split.value).is_dir()}
    if Split.TRAIN not in split_dirs:
        raise DataError(f'{root} has no train split')

    class_names = sorted(p.name for p in split_dirs[Split.TRAIN].iterdir() if p.is_dir())
    if not class_names:
        raise DataError(f'train split of {root} has no class folders')

    raw: Dict[Split, List[Tuple[Path, int, str]]] = {}
    for split, split_dir in split_dirs.items():
        entries = []
        for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            if class_dir.name not in class_names:
                raise DataError(f'unknown class directory {class_dir} (train classes: {", ".join(class_names)})')
            label = class_names.index(class_dir.name)
            for path in _list_images(class_dir):
                if metadata is None:
                    relative = path.relative_to(class_dir)
                    if len(relative.parts) < 2:
                        raise DataError(f'no domain subfolder for {path}')
                    domain = relative.parts[0]
                else:
                    key = path.relative_to(root).as_posix()
                    if key not in metadata:
                        raise DataError(f'no domain in metadata for {key}')
                    domain = metadata[key]
                entries.append((path, label, domain))
        if not entries:
            raise DataError(f'split {split.value} of {root} is empty')
        raw[split] = entries

    # Dense re-indexing: training domains first, the rest after them
    train_domains = sorted({d for _, _, d in raw[Split.TRAIN]})
    other_domains = sorted({d for entries in raw.values() for _, _, d in entries} - set(train_domains))
    domain_names = train_domains + other_domains
    mapping = {name: index for index, name in enumerate(domain_names)}

    splits = {}
    for split, entries in raw.items():
        images = torch.from_numpy(np.stack([_read_image(p, resolution) for p, _, _ in entries]))
        labels = torch.tensor([label for _, label, _ in entries])
        domains = torch.tensor([mapping[d] for _, _, d in entries])
        splits[split] = DomainDataset(images, labels, domains, split, class_names, domain_names)

    bundle = DatasetBundle(splits, mapping, class_names, len(train_domains))
    bundle.check_split_hygiene()
    for split, ds in bundle.splits.items():
        logger.info('Loaded %s: %d images, %d classes, %d domains', split.value, len(ds), ds.num_classes,
                    len(ds.domain_ids))
    return bundle


def load_dataset_for_config(cfg: ExperimentConfig) -> DatasetBundle:
    if cfg.train_dir is None:
        raise DataError('config has no train_dir; generate data first or point train_dir at a dataset')
    bundle = load_folder_dataset(cfg.train_dir, cfg.domain_key, cfg.metadata_path, cfg.image_resolution)
    if bundle.num_source_domains != cfg.num_domains:
        raise ValidationError(
            f'dataset has {bundle.num_source_domains} training domains but config says num_domains={cfg.num_domains}',
            'num_domains')
    if bundle.num_classes != cfg.num_classes:
        raise ValidationError(
            f'dataset has {bundle.num_classes} classes but config says num_classes={cfg.num_classes}', 'num_classes')
    return bundle


def save_bundle(bundle: DatasetBundle, root: Union[str, Path]) -> Path:
    """Write a bundle as root/<split>/<class>/<domain>/<n>.png (lossless)"""
    root = Path(root)
    for split, ds in bundle.splits.items():
        pixels = ((ds.images.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
        for n, (array, label, domain) in enumerate(zip(pixels, ds.labels.tolist(), ds.domains.tolist())):
            folder = root / split.value / ds.class_names[label] / ds.domain_names[domain]
            folder.mkdir(parents=True, exist_ok=True)
            Image.fromarray(array).save(folder / f'{n:06d}.png')
    bundle.save_mapping(root / 'domain_mapping.json')
    return root


##################################################################################
# Synthetic stain shift
##################################################################################

@dataclass(frozen=True, eq=False)
class StainShiftSpec:
    """Appearance transform of one synthetic domain, applied to RGB images in [0, 1]"""
    mixing: np.ndarray  # (3, 3) color mixing, out_c = sum_k mixing[c, k] * in_k
    gain: np.ndarray  # (3,)
    bias: np.ndarray  # (3,)
    blur_sigma: float = 0.0
    noise_std: float = 0.0
    seed: int = 0

    @classmethod
    def identity(cls, seed: int = 0) -> 'StainShiftSpec':
        return cls(np.eye(3), np.ones(3), np.zeros(3), 0.0, 0.0, seed)

    def validate(self, max_condition: float = 100.0):
        mixing = np.asarray(self.mixing, dtype=np.float64)
        if mixing.shape != (3, 3) or np.shape(self.gain) != (3,) or np.shape(self.bias) != (3,):
            raise DataError('stain shift needs a 3x3 mixing matrix and 3 gains and biases')
        condition = np.linalg.cond(mixing)
        if not np.isfinite(condition) or condition >= max_condition:
            raise DataError(f'degenerate mixing matrix (condition number {condition:.3g})')
        if np.any(np.asarray(self.gain) <= 0):
            raise DataError('gains must be positive')
        if self.blur_sigma < 0 or self.noise_std < 0:
            raise DataError('blur and noise levels must be non-negative')

    def apply(self, images: np.ndarray) -> np.ndarray:
        """images: (N, H, W, 3) in [0, 1]"""
        self.validate()
        out = images @ np.asarray(self.mixing).T
        out = out * np.asarray(self.gain) + np.asarray(self.bias)
        if self.blur_sigma > 0:
            out = ndimage.gaussian_filter(out, sigma=(0, self.blur_sigma, self.blur_sigma, 0))
        if self.noise_std > 0:
            out = out + np.random.default_rng(self.seed).normal(0.0, self.noise_std, size=out.shape)
        return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class ShiftRanges:
    """Magnitude ranges (low, high) of each shift component; gains and biases get a random sign"""
    mixing: Tuple[float, float] = (0.0, 0.08)
    gain: Tuple[float, float] = (0.0, 0.1)
    bias: Tuple[float, float] = (0.0, 0.05)
    blur: Tuple[float, float] = (0.0, 0.6)
    noise: Tuple[float, float] = (0.0, 0.02)

    def sample(self, rng: np.random.Generator, seed: int) -> StainShiftSpec:
        for name in ('mixing', 'gain', 'bias', 'blur', 'noise'):
            low, high = getattr(self, name)
            if not 0 <= low <= high:
                raise DataError(f'bad {name} range ({low}, {high})')
        if self.gain[1] >= 1:
            raise DataError('gain deviation must stay below 1')

        def signed(low, high, size):
            return rng.uniform(low, high, size) * rng.choice([-1.0, 1.0], size)

        mixing = np.eye(3)
        off_diagonal = ~np.eye(3, dtype=bool)
        mixing[off_diagonal] = signed(*self.mixing, 6)
        gain = 1.0 + signed(*self.gain, 3)
        bias = signed(*self.bias, 3)
        spec = StainShiftSpec(mixing, gain, bias, float(rng.uniform(*self.blur)), float(rng.uniform(*self.noise)), seed)
        spec.validate()
        return spec


@dataclass(frozen=True)
class SyntheticRanges:
    train: ShiftRanges = field(default_factory=ShiftRanges)
    target: ShiftRanges = field(default_factory=lambda: ShiftRanges(
        mixing=(0.2, 0.35), gain=(0.25, 0.4), bias=(0.12, 0.2), blur=(0.6, 1.0), noise=(0.03, 0.03)))

    @classmethod
    def no_shift(cls) -> 'SyntheticRanges':
        zero = ShiftRanges((0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0))
        return cls(zero, zero)


# Unstained background and fully stained nuclei colors (RGB in [0, 1])
_BACKGROUND = np.array([0.93, 0.76, 0.86])
_NUCLEI = np.array([0.42, 0.24, 0.58])


def class_texture_scales(num_classes: int) -> np.ndarray:
    """Blob scale (gaussian sigma in pixels at 64x64) encoding each class"""
    return np.geomspace(0.9, 3.6, num_classes)


def render_base_patterns(labels: np.ndarray, resolution: int, rng: np.random.Generator,
                         num_classes: int) -> np.ndarray:
    """Rotation-invariant textures whose blob size encodes the class, as (N, H, W, 3) in [0, 1]"""
    scales = class_texture_scales(num_classes) * resolution / 64
    images = np.empty((len(labels), resolution, resolution, 3))
    for i, label in enumerate(labels):
        noise = rng.normal(size=(resolution, resolution))
        field_ = ndimage.gaussian_filter(noise, scales[label], mode='wrap')
        field_ = (field_ - field_.mean()) / (field_.std() + 1e-8)
        nuclei = 1.0 / (1.0 + np.exp(-4.0 * (field_ - rng.uniform(0.6, 0.9))))
        stroma = ndimage.gaussian_filter(rng.normal(size=(resolution, resolution)), resolution / 8, mode='wrap')
        stroma = 0.15 * (stroma - stroma.min()) / (np.ptp(stroma) + 1e-8)
        t = np.clip(0.85 * nuclei + stroma, 0.0, 1.0)[..., None]
        images[i] = (1 - t) * _BACKGROUND + t * _NUCLEI
    return images


def _domain_split(specs: List[StainShiftSpec], names: List[str], offset: int, count: int, num_classes: int,
                  resolution: int, rng: np.random.Generator):
    images, labels, domains = [], [], []
    for d, spec in enumerate(specs):
        y = np.repeat(np.arange(num_classes), count)
        base = render_base_patterns(y, resolution, rng, num_classes)
        images.append(spec.apply(base))
        labels.append(y)
        domains.append(np.full(len(y), offset + d))
    images = np.concatenate(images).astype(np.float32).transpose(0, 3, 1, 2) * 2 - 1
    return torch.from_numpy(images), torch.from_numpy(np.concatenate(labels)), torch.from_numpy(np.concatenate(domains))


def _take(ds_tensors, index: np.ndarray):
    return tuple(t[torch.from_numpy(index)] for t in ds_tensors)


class SyntheticDG(NamedTuple):
    train: DatasetBundle  # train + id_val splits over the source domains
    target: DatasetBundle  # ood_val + ood_test splits over the unseen domains
    specs: Dict[str, StainShiftSpec]

    def merged(self) -> DatasetBundle:
        splits = dict(self.train.splits)
        splits.update(self.target.splits)
        bundle = DatasetBundle(splits, self.train.domain_mapping, self.train.class_names,
                               self.train.num_source_domains)
        bundle.check_split_hygiene()
        return bundle


def generate_synthetic_dg(base_pattern_count: int, num_train_domains: int, num_target_domains: int,
                          ranges: Optional[SyntheticRanges] = None, seed: int = 0, num_classes: int = 2,
                          resolution: int = 64, id_val_fraction: float = 0.2) -> SyntheticDG:
    """Class-structured textures pushed through per-domain stain shifts.

    Target domains draw their shift from ranges disjoint from the training ranges, so they
    are out of distribution by construction. Labels are never touched by the shift.
    """
    if num_train_domains < 2:
        raise ValidationError(f'need at least 2 training domains, got {num_train_domains}', 'num_domains')
    if num_target_domains < 1:
        raise ValidationError(f'need at least 1 target domain, got {num_target_domains}')
    if base_pattern_count < 2:
        raise ValidationError(f'need at least 2 base patterns per class and domain, got {base_pattern_count}')
    ranges = ranges or SyntheticRanges()
    rng = numpy_generator(seed, 'synthetic')

    train_names = [f'source_{i}' for i in range(num_train_domains)]
    target_names = [f'target_{i}' for i in range(num_target_domains)]
    names = train_names + target_names
    mapping = {name: i for i, name in enumerate(names)}
    class_names = [f'class_{c}' for c in range(num_classes)]

    train_specs = [ranges.train.sample(rng, int(rng.integers(2 ** 31))) for _ in train_names]
    target_specs = [ranges.target.sample(rng, int(rng.integers(2 ** 31))) for _ in target_names]
    specs = dict(zip(names, train_specs + target_specs))

    source = _domain_split(train_specs, train_names, 0, base_pattern_count, num_classes, resolution, rng)
    held_out = rng.random(len(source[1])) < id_val_fraction
    train = DatasetBundle({
        Split.TRAIN: DomainDataset(*_take(source, np.flatnonzero(~held_out)), Split.TRAIN, class_names, names),
        Split.ID_VAL: DomainDataset(*_take(source, np.flatnonzero(held_out)), Split.ID_VAL, class_names, names),
    }, mapping, class_names, num_train_domains)

    target = _domain_split(target_specs, target_names, num_train_domains, base_pattern_count, num_classes,
                           resolution, rng)
    if num_target_domains >= 2:
        # Different unseen domains for validation and test
        cut = num_train_domains + num_target_domains // 2
        is_val = (target[2] < cut).numpy()
    else:
        is_val = np.arange(len(target[1])) % 2 == 0
    target_bundle = DatasetBundle({
        Split.OOD_VAL: DomainDataset(*_take(target, np.flatnonzero(is_val)), Split.OOD_VAL, class_names, names),
        Split.OOD_TEST: DomainDataset(*_take(target, np.flatnonzero(~is_val)), Split.OOD_TEST, class_names, names),
    }, mapping, class_names, num_train_domains)

    logger.info('Generated synthetic data: %d source and %d target domains, %d images per domain',
                num_train_domains, num_target_domains, base_pattern_count * num_classes)
    return SyntheticDG(train, target_bundle, specs)
