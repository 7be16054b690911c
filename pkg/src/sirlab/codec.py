#!/usr/bin/env python3
"""Fixed linear image codec: truncated orthonormal cosine basis."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; row k is the k-th cosine basis vector."""
    j = np.arange(n)
    k = np.arange(n)[:, None]
    basis = np.sqrt(2.0 / n) * np.cos(np.pi * (j + 0.5) * k / n)
    basis[0] /= np.sqrt(2.0)
    return basis


@dataclass(frozen=True, eq=False)
class LinearCodec:
    """
    Encoder E keeps the lowest-frequency cosine coefficients of each view;
    decoder D = E^T is its pseudo-inverse because E has orthonormal rows.

    1D views keep n/factor coefficients. Image views (H, W, C) keep
    (H/r)·(W/r) coefficients per channel with r = sqrt(factor).
    """

    view_shape: tuple[int, ...]
    factor: int = 4
    _rows: np.ndarray = field(init=False, repr=False)
    _cols: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.view_shape)
        object.__setattr__(self, "view_shape", shape)
        if self.factor < 1:
            raise ParameterError(f"Codec factor must be >= 1, got {self.factor}")
        if len(shape) == 1:
            keep = shape[0] // self.factor
            if keep < 1:
                raise ParameterError("Codec keeps no coefficients")
            object.__setattr__(self, "_rows", dct_matrix(shape[0])[:keep])
            object.__setattr__(self, "_cols", np.ones((1, 1)))
        elif len(shape) == 3:
            r = math.isqrt(self.factor)
            if r * r != self.factor:
                raise ParameterError("Image codec factor must be a perfect square")
            h, w, _ = shape
            if h // r < 1 or w // r < 1:
                raise ParameterError("Codec keeps no coefficients")
            object.__setattr__(self, "_rows", dct_matrix(h)[: h // r])
            object.__setattr__(self, "_cols", dct_matrix(w)[: w // r])
        else:
            raise ParameterError(f"Unsupported view shape {shape}")

    @property
    def pixel_dim(self) -> int:
        return int(np.prod(self.view_shape))

    @property
    def latent_dim(self) -> int:
        if len(self.view_shape) == 1:
            return self._rows.shape[0]
        return self._rows.shape[0] * self._cols.shape[0] * self.view_shape[2]

    @property
    def matrix(self) -> np.ndarray:
        """Dense encoder E of shape (latent_dim, pixel_dim)."""
        if len(self.view_shape) == 1:
            return self._rows.copy()
        return np.kron(np.kron(self._rows, self._cols), np.eye(self.view_shape[2]))

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Map pixel vectors (..., pixel_dim) to latents (..., latent_dim)."""
        x = np.asarray(x, dtype=np.float64)
        lead = x.shape[:-1]
        if x.shape[-1] != self.pixel_dim:
            raise ParameterError(
                f"Expected pixel vectors of length {self.pixel_dim}, got {x.shape[-1]}"
            )
        if len(self.view_shape) == 1:
            return x @ self._rows.T
        img = x.reshape(lead + self.view_shape)
        z = np.einsum("ah,...hwc,bw->...abc", self._rows, img, self._cols)
        return z.reshape(lead + (self.latent_dim,))

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Map latents (..., latent_dim) back to pixel vectors (..., pixel_dim)."""
        z = np.asarray(z, dtype=np.float64)
        lead = z.shape[:-1]
        if z.shape[-1] != self.latent_dim:
            raise ParameterError(
                f"Expected latents of length {self.latent_dim}, got {z.shape[-1]}"
            )
        if len(self.view_shape) == 1:
            return z @ self._rows
        kh, kw = self._rows.shape[0], self._cols.shape[0]
        lat = z.reshape(lead + (kh, kw, self.view_shape[2]))
        x = np.einsum("ah,...abc,bw->...hwc", self._rows, lat, self._cols)
        return x.reshape(lead + (self.pixel_dim,))

    def project(self, x: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(x))
