"""Synthetic head phantoms with controllable intensity domain shift.

A phantom is an ellipsoidal "brain" (two-tissue texture) wrapped in a dark
CSF gap, a bright skull shell and a thin scalp layer, on a zero background.
The ground-truth mask is the brain ellipsoid. Domains differ only in how
intensities are remapped, never in geometry.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import Mask, Volume, rescale_intensity, save_native

__all__ = [
    "DomainParams",
    "SyntheticCase",
    "DEFAULT_DOMAINS",
    "TISSUE_LEVELS",
    "make_phantom",
    "bias_field",
    "apply_domain",
    "build_benchmark",
    "case_seed",
]

MANIFEST_SCHEMA_VERSION = 1

TISSUE_LEVELS = {
    "background": 0.0,
    "scalp": 0.35,
    "skull": 1.0,
    "csf": 0.1,
    "grey": 0.5,
    "white": 0.7,
}


@dataclass(frozen=True)
class DomainParams:
    name: str
    gamma: float = 1.0
    bias_amplitude: float = 0.0
    noise_sigma: float = 0.0
    contrast_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for key in ("gamma", "bias_amplitude", "noise_sigma", "contrast_scale"):
            if not np.isfinite(getattr(self, key)):
                raise ValueError(f"{key} must be finite")
        if self.gamma <= 0 or self.contrast_scale <= 0:
            raise ValueError("gamma and contrast_scale must be > 0")
        if self.bias_amplitude < 0 or self.noise_sigma < 0:
            raise ValueError("bias_amplitude and noise_sigma must be >= 0")
        if self.bias_amplitude >= 1:
            raise ValueError("bias_amplitude must be < 1 to keep the field positive")


# "A" is close to the raw phantom, "B" applies a gamma curve and a bias
# field, "C" stretches contrast hard and compresses it with a low gamma, so
# dark tissue ends up almost as bright as bone.
DEFAULT_DOMAINS = (
    DomainParams("A", gamma=1.0, bias_amplitude=0.05, noise_sigma=0.01, contrast_scale=1.0, seed=11),
    DomainParams("B", gamma=2.0, bias_amplitude=0.3, noise_sigma=0.02, contrast_scale=1.0, seed=22),
    DomainParams("C", gamma=0.4, bias_amplitude=0.1, noise_sigma=0.02, contrast_scale=2.0, seed=33),
)


@dataclass
class SyntheticCase:
    volume: Volume
    mask: Mask
    case_id: str = "case"
    domain_name: str = "raw"
    seed: int = 0
    meta: dict = field(default_factory=dict)


def case_seed(benchmark_seed: int, domain_index: int, case_index: int) -> int:
    """Deterministic per-case seed."""
    ss = np.random.SeedSequence([int(benchmark_seed), int(domain_index), int(case_index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _ellipsoid(coords, center, radii) -> np.ndarray:
    r2 = sum(((c - c0) / r) ** 2 for c, c0, r in zip(coords, center, radii))
    return r2


def make_phantom(rng: np.random.Generator | int, shape=(64, 64, 32), spacing=(1.0, 1.0, 1.0)) -> SyntheticCase:
    """Generate an undomained phantom with its brain mask."""
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or min(shape) < 16:
        raise ValueError(f"phantom shape must be >= 16 along every axis, got {shape}")
    seed = rng if isinstance(rng, (int, np.integer)) else int(rng.integers(0, 2**31))
    rng = np.random.default_rng(int(seed))
    spacing = tuple(float(s) for s in spacing)

    extent = np.array(shape) * np.array(spacing)
    coords = np.meshgrid(
        *[(np.arange(n) + 0.5) * s for n, s in zip(shape, spacing)], indexing="ij"
    )
    center = extent / 2 + rng.uniform(-0.06, 0.06, size=3) * extent
    radii = rng.uniform([0.26, 0.26, 0.30], [0.34, 0.34, 0.40]) * extent

    brain = _ellipsoid(coords, center, radii) <= 1.0
    # Shell layers at fixed physical offsets from the brain surface.
    csf_r, skull_r, scalp_r = radii + 1.5, radii + 4.0, radii + 5.5
    inside_csf = _ellipsoid(coords, center, csf_r) <= 1.0
    inside_skull = _ellipsoid(coords, center, skull_r) <= 1.0
    inside_scalp = _ellipsoid(coords, center, scalp_r) <= 1.0

    data = np.full(shape, TISSUE_LEVELS["background"], dtype=np.float64)
    data[inside_scalp] = TISSUE_LEVELS["scalp"]
    data[inside_skull] = TISSUE_LEVELS["skull"]
    data[inside_csf] = TISSUE_LEVELS["csf"]

    texture = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=2.5 / np.array(spacing))
    white = texture > np.quantile(texture[brain], 0.5)
    data[brain & ~white] = TISSUE_LEVELS["grey"]
    data[brain & white] = TISSUE_LEVELS["white"]
    data = ndimage.gaussian_filter(data, sigma=0.6)

    volume = rescale_intensity(Volume(data.astype(np.float32), spacing))
    return SyntheticCase(
        volume=volume,
        mask=Mask(brain.astype(np.uint8), spacing),
        seed=int(seed),
        meta={"center_mm": center.tolist(), "radii_mm": radii.tolist()},
    )


def bias_field(shape, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth positive multiplicative field ``1 + amplitude * f``.

    ``f`` is a random combination of the separable cosine basis functions
    ``cos(pi * kx * x) cos(pi * ky * y) cos(pi * kz * z)`` with
    ``kx + ky + kz`` in [1, 2] (coordinates normalised to [0, 1]), scaled so
    that ``max |f| = 1``.
    """
    if amplitude == 0:
        return np.ones(shape)
    axes = [(np.arange(n) + 0.5) / n for n in shape]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    field_ = np.zeros(shape)
    for kx in range(3):
        for ky in range(3):
            for kz in range(3):
                if 1 <= kx + ky + kz <= 2:
                    coef = rng.standard_normal()
                    field_ += coef * np.cos(np.pi * kx * x) * np.cos(np.pi * ky * y) * np.cos(np.pi * kz * z)
    peak = np.abs(field_).max()
    if peak > 0:
        field_ /= peak
    return 1.0 + amplitude * field_


def contrast_adjust(v: np.ndarray, contrast_scale: float) -> np.ndarray:
    """Stretch intensities about 0.5 by ``contrast_scale``, clamped to [0, 1]."""
    if contrast_scale == 1.0:
        return v
    return np.clip(0.5 + contrast_scale * (v - 0.5), 0.0, 1.0)


def apply_domain(case: SyntheticCase, d: DomainParams, *, rescale: bool = True) -> SyntheticCase:
    """Remap intensities of ``case`` into domain ``d``.

    ``clamp(contrast(v) ** gamma * bias + noise, 0, 1)`` followed by min-max
    rescaling (skipped when ``rescale`` is False). Geometry, mask and spacing
    are untouched.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(case.seed), int(d.seed), 0xD0]))
    v = case.volume.data.astype(np.float64)
    out = contrast_adjust(v, d.contrast_scale) ** d.gamma
    if d.bias_amplitude > 0:
        out = out * bias_field(v.shape, d.bias_amplitude, rng)
    if d.noise_sigma > 0:
        out = out + rng.normal(0.0, d.noise_sigma, size=v.shape)
    if d.bias_amplitude > 0 or d.noise_sigma > 0:
        out = np.clip(out, 0.0, 1.0)
    volume = Volume(out.astype(np.float32), case.volume.spacing)
    if rescale:
        volume = rescale_intensity(volume)
    return SyntheticCase(
        volume=volume,
        mask=case.mask,
        case_id=case.case_id,
        domain_name=d.name,
        seed=case.seed,
        meta=dict(case.meta),
    )


def generate_case(domain: DomainParams, domain_index: int, case_index: int, shape, spacing, seed: int) -> SyntheticCase:
    base = make_phantom(case_seed(seed, domain_index, case_index), shape, spacing)
    base.case_id = f"{domain.name}_{case_index:03d}"
    return apply_domain(base, domain)


def build_benchmark(
    domains=DEFAULT_DOMAINS,
    cases_per_domain: int = 8,
    shape=(64, 64, 32),
    spacing=(1.0, 1.0, 1.0),
    seed: int = 0,
    out_dir="benchmark",
) -> Path:
    """Write a synthetic benchmark and return the path of its manifest.

    Layout under ``out_dir``: ``volumes/<case>.{json,raw}``,
    ``masks/<case>.{json,raw}`` and ``manifest.json``. Paths inside the
    manifest are relative to the manifest file.
    """
    domains = list(domains)
    if len(domains) < 2:
        raise ValueError("a benchmark needs at least 2 domains")
    names = [d.name for d in domains]
    if len(set(names)) != len(names):
        raise ValueError(f"domain names must be unique, got {names}")
    if cases_per_domain < 1:
        raise ValueError("cases_per_domain must be >= 1")
    out_dir = Path(out_dir)
    cases = []
    for di, domain in enumerate(domains):
        for ci in range(cases_per_domain):
            case = generate_case(domain, di, ci, shape, spacing, seed)
            try:
                vol_path = save_native(case.volume, out_dir / "volumes" / case.case_id)
                mask_path = save_native(case.mask, out_dir / "masks" / case.case_id)
            except OSError as exc:
                raise OSError(f"failed writing case {case.case_id} under {out_dir}: {exc}") from exc
            cases.append({
                "id": case.case_id,
                "domain": domain.name,
                "volume_path": vol_path.relative_to(out_dir).as_posix(),
                "mask_path": mask_path.relative_to(out_dir).as_posix(),
            })
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "generator": {
            "kind": "synthetic",
            "seed": int(seed),
            "shape": list(shape),
            "spacing": list(spacing),
            "cases_per_domain": int(cases_per_domain),
            "domain_params": [asdict(d) for d in domains],
        },
        "domains": names,
        "cases": cases,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
