"""Input transforms, feature mixing, and combined-batch construction.

A batch of B samples is first expanded with M bijective input
transforms into B' = B * (M + 1) rows: the original block followed by
one transformed block per transform. Features of the expanded rows are
then mixed pairwise with a convex coefficient delta, and the unmixed
and mixed rows are interleaved into a combined batch of 2 * B' rows
whose labels live in a doubled proxy label space: a sample of real
class y contributes one row labeled 2y (unmixed slot) and one labeled
2y + 1 (mixed slot).
"""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from .encoder import ModelParams, forward_features
from .tensor import ShapeError, Tensor, add, gather_rows, interleave_rows, no_grad, scale

MIXTURE_MODES = ("aug+aug", "ori+ori", "ori+aug", "ori+noise", "aug+noise")


@dataclass(frozen=True)
class TransformSet:
    """Bijective row transforms; index 0 is always the identity.

    Vector mode applies a fixed seeded signed coordinate permutation per
    transform. Image mode treats each row as a flattened (channels,
    height, width) volume and composes a 180 degree rotation with a
    channel cycle.
    """

    count: int
    dim: int
    perms: np.ndarray | None = None
    signs: np.ndarray | None = None
    image_shape: tuple[int, int, int] | None = None

    @classmethod
    def vector(cls, dim: int, count: int, seed: int) -> "TransformSet":
        if dim < 1 or count < 0:
            raise ValueError(f"need dim >= 1 and count >= 0, got dim={dim} count={count}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7261]))
        perms = np.stack([rng.permutation(dim) for _ in range(count)]) if count else None
        signs = rng.choice([-1.0, 1.0], size=(count, dim)) if count else None
        return cls(count=count, dim=dim, perms=perms, signs=signs)

    @classmethod
    def image(cls, channels: int, height: int, width: int, count: int) -> "TransformSet":
        if min(channels, height, width) < 1 or count < 0:
            raise ValueError("image dimensions must be >= 1 and count >= 0")
        return cls(count=count, dim=channels * height * width, image_shape=(channels, height, width))

    def apply(self, rows: np.ndarray, index: int) -> np.ndarray:
        """Transform every row with transform ``index``."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ShapeError(f"expected rows of width {self.dim}, got shape {rows.shape}")
        if not 0 <= index <= self.count:
            raise IndexError(f"transform index {index} out of range [0, {self.count}]")
        if index == 0:
            return rows.copy()
        if self.image_shape is not None:
            c, h, w = self.image_shape
            vol = rows.reshape(-1, c, h, w)
            out = np.roll(vol[:, :, ::-1, ::-1], shift=index, axis=1)
            return out.reshape(rows.shape).copy()
        return rows[:, self.perms[index - 1]] * self.signs[index - 1]

    def apply_choices(self, rows: np.ndarray, choices: np.ndarray) -> np.ndarray:
        """Transform row i with transform ``choices[i]``."""
        rows = np.asarray(rows, dtype=np.float64)
        choices = np.asarray(choices, dtype=np.int64)
        if choices.shape != (rows.shape[0],):
            raise ShapeError("need one transform choice per row")
        out = rows.copy()
        for index in np.unique(choices):
            if index == 0:
                continue
            mask = choices == index
            out[mask] = self.apply(rows[mask], int(index))
        return out


def expand_batch(x, y, transforms: TransformSet) -> tuple[np.ndarray, np.ndarray]:
    """Stack the original block and one transformed block per transform."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-d input batch, got shape {x.shape}")
    if y.shape != (x.shape[0],):
        raise ShapeError("need one label per input row")
    blocks = [transforms.apply(x, t) for t in range(transforms.count + 1)]
    return np.vstack(blocks), np.tile(y, transforms.count + 1)


def sample_pairing(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform partner index for each row, never the row itself."""
    if n < 2:
        raise ValueError(f"pairing needs at least 2 rows, got {n}")
    j = rng.integers(0, n - 1, size=n)
    j += j >= np.arange(n)
    return j


def mix_rows(anchor: Tensor, partner: Tensor, pairing: np.ndarray, delta: float) -> Tensor:
    """Convex row mix: delta * anchor[i] + (1 - delta) * partner[pairing[i]]."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    if anchor.shape != partner.shape:
        raise ShapeError(f"anchor and partner shapes differ: {anchor.shape} vs {partner.shape}")
    pairing = np.asarray(pairing, dtype=np.int64)
    if pairing.shape != (anchor.shape[0],):
        raise ShapeError("need one partner index per anchor row")
    if np.any(pairing == np.arange(anchor.shape[0])):
        raise ValueError("pairing must not map a row to itself")
    return add(scale(anchor, delta), scale(gather_rows(partner, pairing), 1.0 - delta))


def mix_features(z_aug, delta: float, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """Mix each feature row with a random partner row from the same tensor."""
    z = z_aug if isinstance(z_aug, Tensor) else Tensor(z_aug)
    if z.values.ndim != 2:
        raise ShapeError(f"expected a 2-d feature tensor, got shape {z.shape}")
    pairing = sample_pairing(z.shape[0], rng)
    return mix_rows(z, z, pairing, delta), pairing


def mix_with_noise(anchor: Tensor, noise: np.ndarray, delta: float) -> Tensor:
    """Convex mix against fixed noise rows instead of partner features."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != anchor.shape:
        raise ShapeError(f"noise shape {noise.shape} must match anchor shape {anchor.shape}")
    return add(scale(anchor, delta), scale(Tensor(noise), 1.0 - delta))


def proxy_encode(y, p, factor: int = 2):
    """Map (real class, slot) to the expanded label y * factor + p."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    y = np.asarray(y, dtype=np.int64)
    p = np.asarray(p, dtype=np.int64)
    if np.any(y < 0):
        raise ValueError("real class ids must be non-negative")
    if np.any(p < 0) or np.any(p >= factor):
        raise ValueError(f"slot must lie in [0, {factor})")
    out = y * factor + p
    return out if out.ndim else int(out)


def proxy_decode(yp, factor: int = 2):
    """Invert proxy_encode: expanded label back to (real class, slot)."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    yp = np.asarray(yp, dtype=np.int64)
    if np.any(yp < 0):
        raise ValueError("expanded labels must be non-negative")
    y, p = np.divmod(yp, factor)
    if y.ndim:
        return y, p
    return int(y), int(p)


def interleaved_proxy_labels(y: np.ndarray) -> np.ndarray:
    """Labels for a combined batch: rows alternate slot 0 and slot 1."""
    y = np.asarray(y, dtype=np.int64)
    out = np.empty(2 * y.shape[0], dtype=np.int64)
    out[0::2] = proxy_encode(y, np.zeros_like(y))
    out[1::2] = proxy_encode(y, np.ones_like(y))
    return out


def combine_interleave(z_ori: Tensor, f_aug: Tensor) -> Tensor:
    """Alternate unmixed and mixed feature rows into one combined batch."""
    if z_ori.shape != f_aug.shape:
        raise ShapeError(f"stream shapes differ: {z_ori.shape} vs {f_aug.shape}")
    return interleave_rows(z_ori, f_aug)


@dataclass
class CombinedFeatureBatch:
    """One view of a training batch at feature level.

    On the two-slot path ``f_comb`` interleaves ``z_ori`` (row 2q) with
    ``f_aug`` (row 2q+1). The single-slot path, used by ablations that
    drop the proxy label space, sets ``f_aug`` and ``pairing`` to None
    and ``f_comb`` to the plain feature rows.
    """

    z_ori: Tensor
    f_aug: Tensor | None
    f_comb: Tensor
    proxy_labels: np.ndarray
    pairing: np.ndarray | None
    delta: float


def make_views(
    x,
    y,
    params: ModelParams,
    transforms: TransformSet,
    *,
    delta: float,
    rng_pair: np.random.Generator,
    rng_view_a: np.random.Generator,
    rng_view_b: np.random.Generator | None = None,
    jitter: float = 0.0,
    perturb: bool = True,
    mixture: str = "aug+aug",
    noise_scale: float = 1.0,
    rng_noise: np.random.Generator | None = None,
    momentum_view: bool = True,
) -> tuple[CombinedFeatureBatch, CombinedFeatureBatch | None]:
    """Build the combined two-slot batch for the online view and, when
    requested, an independently perturbed momentum-encoder view.

    Both views share the expanded labels, the mix pairing, and any noise
    partner rows; they differ only in their per-row perturbation draws.
    The momentum view is built without gradient recording.
    """
    if mixture not in MIXTURE_MODES:
        raise ValueError(f"unknown mixture mode {mixture!r}, expected one of {MIXTURE_MODES}")
    if jitter < 0.0:
        raise ValueError(f"jitter must be non-negative, got {jitter}")
    x_exp, y_exp = expand_batch(x, y, transforms)
    x_ori = np.tile(np.asarray(x, dtype=np.float64), (transforms.count + 1, 1))
    n = x_exp.shape[0]
    labels = interleaved_proxy_labels(y_exp)

    noise_mode = mixture.endswith("+noise")
    pairing: np.ndarray | None = None
    noise_rows: np.ndarray | None = None
    if noise_mode:
        if rng_noise is None:
            raise ValueError(f"mixture {mixture!r} needs rng_noise")
        if noise_scale < 0.0:
            raise ValueError(f"noise_scale must be non-negative, got {noise_scale}")
        noise_rows = noise_scale * rng_noise.standard_normal((n, params.spec.feature_dim))
    else:
        pairing = sample_pairing(n, rng_pair)

    def build(use_momentum: bool, rng_view: np.random.Generator) -> CombinedFeatureBatch:
        xe, xo = x_exp, x_ori
        if perturb:
            # each stream draws its own row transforms, otherwise the
            # identity block would feed both slots the same rows
            xe = transforms.apply_choices(xe, rng_view.integers(0, transforms.count + 1, size=n))
            xo = transforms.apply_choices(xo, rng_view.integers(0, transforms.count + 1, size=n))
            if jitter > 0.0:
                xe = xe + jitter * rng_view.standard_normal(xe.shape)
                xo = xo + jitter * rng_view.standard_normal(xo.shape)
        ctx = no_grad() if use_momentum else nullcontext()
        with ctx:
            z_ori = forward_features(params, xo, use_momentum=use_momentum)
            z_aug = forward_features(params, xe, use_momentum=use_momentum)
            anchor = z_ori if mixture.startswith("ori") else z_aug
            if noise_mode:
                f_aug = mix_with_noise(anchor, noise_rows, delta)
            else:
                partner = z_ori if mixture == "ori+ori" else z_aug
                f_aug = mix_rows(anchor, partner, pairing, delta)
            f_comb = combine_interleave(z_ori, f_aug)
        return CombinedFeatureBatch(
            z_ori=z_ori, f_aug=f_aug, f_comb=f_comb,
            proxy_labels=labels, pairing=pairing, delta=delta,
        )

    view_a = build(False, rng_view_a)
    if not momentum_view:
        return view_a, None
    if rng_view_b is None:
        raise ValueError("momentum_view=True needs rng_view_b")
    return view_a, build(True, rng_view_b)


def plain_views(
    x,
    y,
    params: ModelParams,
    transforms: TransformSet,
    *,
    rng_view_a: np.random.Generator,
    rng_view_b: np.random.Generator | None = None,
    jitter: float = 0.0,
    perturb: bool = True,
    momentum_view: bool = True,
) -> tuple[CombinedFeatureBatch, CombinedFeatureBatch | None]:
    """Single-slot batches over the expanded rows with real labels."""
    if jitter < 0.0:
        raise ValueError(f"jitter must be non-negative, got {jitter}")
    x_exp, y_exp = expand_batch(x, y, transforms)
    n = x_exp.shape[0]

    def build(use_momentum: bool, rng_view: np.random.Generator) -> CombinedFeatureBatch:
        xe = x_exp
        if perturb:
            choices = rng_view.integers(0, transforms.count + 1, size=n)
            xe = transforms.apply_choices(xe, choices)
            if jitter > 0.0:
                xe = xe + jitter * rng_view.standard_normal(xe.shape)
        ctx = no_grad() if use_momentum else nullcontext()
        with ctx:
            z = forward_features(params, xe, use_momentum=use_momentum)
        return CombinedFeatureBatch(
            z_ori=z, f_aug=None, f_comb=z,
            proxy_labels=y_exp.copy(), pairing=None, delta=1.0,
        )

    view_a = build(False, rng_view_a)
    if not momentum_view:
        return view_a, None
    if rng_view_b is None:
        raise ValueError("momentum_view=True needs rng_view_b")
    return view_a, build(True, rng_view_b)
