//! Grid geometry, volume and field containers, trilinear sampling, warping
//! and composition of deformations.
//!
//! All fields are stored in voxel units with x-fastest memory order. Vector
//! fields are planar: the three components are stored one after another.
//! Samples that fall outside the grid are clamped to the nearest edge voxel.

use crate::error::{Error, Result};

/// Grid extent along (x, y, z).
pub type Dims = [usize; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    dims: Dims,
    spacing: [f64; 3],
}

impl GridGeometry {
    pub fn new(dims: Dims, spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::Geometry(format!("all dims must be >= 2, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Geometry(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        Ok(Self { dims, spacing })
    }

    /// Unit-spacing grid.
    pub fn with_dims(dims: Dims) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::with_dims([n; 3])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Half resolution per axis, doubled spacing.
    pub fn downsampled(&self) -> Result<Self> {
        Self::new(
            self.dims.map(|n| n / 2),
            self.spacing.map(|s| s * 2.0),
        )
    }

    pub fn ensure_same(&self, other: &GridGeometry) -> Result<()> {
        if self.dims != other.dims || self.spacing != other.spacing {
            return Err(Error::GeometryMismatch {
                left: self.dims,
                right: other.dims,
            });
        }
        Ok(())
    }

    /// True if voxel `idx` lies at least `margin` voxels away from every face.
    pub fn is_interior(&self, idx: usize, margin: usize) -> bool {
        let c = self.coords(idx);
        (0..3).all(|a| c[a] >= margin && c[a] + margin < self.dims[a])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    geometry: GridGeometry,
    data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(geometry: GridGeometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.num_voxels() {
            return Err(Error::shape(
                "ScalarVolume::new",
                format!("expected {} values, got {}", geometry.num_voxels(), data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume value at index {pos}")));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        Self {
            geometry,
            data: vec![0.0; geometry.num_voxels()],
        }
    }

    pub fn from_fn(geometry: GridGeometry, mut f: impl FnMut([usize; 3]) -> f64) -> Self {
        let data = (0..geometry.num_voxels())
            .map(|idx| f(geometry.coords(idx)))
            .collect();
        Self { geometry, data }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.geometry.index(i, j, k)]
    }
}

/// How a vector field is meant to be read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Velocity,
    /// `phi(x) = x + u(x)`.
    Displacement,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    geometry: GridGeometry,
    kind: FieldKind,
    /// Planar (ux, uy, uz), each x-fastest.
    data: Vec<f64>,
}

impl VectorField {
    pub fn new(geometry: GridGeometry, kind: FieldKind, data: Vec<f64>) -> Result<Self> {
        let n = geometry.num_voxels();
        if data.len() != 3 * n {
            return Err(Error::shape(
                "VectorField::new",
                format!("expected {} values, got {}", 3 * n, data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "field component {} at voxel {}",
                pos / n,
                pos % n
            )));
        }
        Ok(Self { geometry, kind, data })
    }

    pub fn zeros(geometry: GridGeometry, kind: FieldKind) -> Self {
        Self {
            geometry,
            kind,
            data: vec![0.0; 3 * geometry.num_voxels()],
        }
    }

    pub fn identity(geometry: GridGeometry) -> Self {
        Self::zeros(geometry, FieldKind::Displacement)
    }

    pub fn constant(geometry: GridGeometry, kind: FieldKind, c: [f64; 3]) -> Self {
        Self::from_fn(geometry, kind, |_| c)
    }

    pub fn from_fn(
        geometry: GridGeometry,
        kind: FieldKind,
        mut f: impl FnMut([usize; 3]) -> [f64; 3],
    ) -> Self {
        let n = geometry.num_voxels();
        let mut data = vec![0.0; 3 * n];
        for idx in 0..n {
            let v = f(geometry.coords(idx));
            for c in 0..3 {
                data[c * n + idx] = v[c];
            }
        }
        Self { geometry, kind, data }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: FieldKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.geometry.num_voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.geometry.num_voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, idx: usize) -> [f64; 3] {
        let n = self.geometry.num_voxels();
        [self.data[idx], self.data[n + idx], self.data[2 * n + idx]]
    }

    /// Largest absolute component value.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            geometry: self.geometry,
            kind: self.kind,
            data: self.data.iter().map(|v| a * v).collect(),
        }
    }

    pub fn try_add(&self, other: &VectorField) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn try_sub(&self, other: &VectorField) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &VectorField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.geometry.ensure_same(&other.geometry)?;
        Ok(Self {
            geometry: self.geometry,
            kind: self.kind,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// Corner indices and weights of one trilinear sample, plus what the
/// derivative with respect to the sample position needs.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    /// Fractional offsets within the cell.
    pub t: [f64; 3],
    /// Whether the coordinate was inside `[0, n-1]` on each axis; clamped
    /// axes have zero derivative.
    pub inside: [bool; 3],
}

impl Stencil {
    #[inline]
    pub fn new(dims: Dims, p: [f64; 3]) -> Self {
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        let mut inside = [true; 3];
        for a in 0..3 {
            let hi = (dims[a] - 1) as f64;
            let mut q = p[a];
            if q < 0.0 {
                q = 0.0;
                inside[a] = false;
            } else if q > hi {
                q = hi;
                inside[a] = false;
            }
            let i0 = (q.floor() as usize).min(dims[a] - 2);
            base[a] = i0;
            t[a] = q - i0 as f64;
        }
        let sx = 1;
        let sy = dims[0];
        let sz = dims[0] * dims[1];
        let o = base[0] + sy * base[1] + sz * base[2];
        let [tx, ty, tz] = t;
        let (ux, uy, uz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
        Stencil {
            idx: [
                o,
                o + sx,
                o + sy,
                o + sx + sy,
                o + sz,
                o + sx + sz,
                o + sy + sz,
                o + sx + sy + sz,
            ],
            w: [
                ux * uy * uz,
                tx * uy * uz,
                ux * ty * uz,
                tx * ty * uz,
                ux * uy * tz,
                tx * uy * tz,
                ux * ty * tz,
                tx * ty * tz,
            ],
            t,
            inside,
        }
    }

    #[inline]
    pub fn sample(&self, data: &[f64]) -> f64 {
        let mut acc = 0.0;
        for c in 0..8 {
            acc += self.w[c] * data[self.idx[c]];
        }
        acc
    }

    /// Gradient of the sampled value with respect to the sample position.
    #[inline]
    pub fn position_gradient(&self, data: &[f64]) -> [f64; 3] {
        let v: [f64; 8] = std::array::from_fn(|c| data[self.idx[c]]);
        let [tx, ty, tz] = self.t;
        let (ux, uy, uz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
        let dx = uy * uz * (v[1] - v[0])
            + ty * uz * (v[3] - v[2])
            + uy * tz * (v[5] - v[4])
            + ty * tz * (v[7] - v[6]);
        let dy = ux * uz * (v[2] - v[0])
            + tx * uz * (v[3] - v[1])
            + ux * tz * (v[6] - v[4])
            + tx * tz * (v[7] - v[5]);
        let dz = ux * uy * (v[4] - v[0])
            + tx * uy * (v[5] - v[1])
            + ux * ty * (v[6] - v[2])
            + tx * ty * (v[7] - v[3]);
        let mut g = [dx, dy, dz];
        for a in 0..3 {
            if !self.inside[a] {
                g[a] = 0.0;
            }
        }
        g
    }
}

/// Trilinear sample of an x-fastest array with clamped borders.
#[inline]
pub(crate) fn sample_trilinear(data: &[f64], dims: Dims, p: [f64; 3]) -> f64 {
    Stencil::new(dims, p).sample(data)
}

/// Warps every channel of a planar multi-channel array by a planar
/// displacement: `out_c(x) = in_c(x + u(x))`.
pub(crate) fn warp_channels(src: &[f64], channels: usize, dims: Dims, disp: &[f64]) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut out = vec![0.0; channels * n];
    let [nx, ny, _] = dims;
    let mut idx = 0;
    for k in 0..dims[2] {
        for j in 0..ny {
            for i in 0..nx {
                let p = [
                    i as f64 + disp[idx],
                    j as f64 + disp[n + idx],
                    k as f64 + disp[2 * n + idx],
                ];
                let st = Stencil::new(dims, p);
                for c in 0..channels {
                    out[c * n + idx] = st.sample(&src[c * n..(c + 1) * n]);
                }
                idx += 1;
            }
        }
    }
    out
}

/// Cell-centred linear resampling from `src_dims` onto `dst_dims`, each
/// channel multiplied by `gain[channel % gain.len()]`.
pub(crate) fn resample_channels(
    src: &[f64],
    channels: usize,
    src_dims: Dims,
    dst_dims: Dims,
    gain: &[f64],
) -> Vec<f64> {
    let ns: usize = src_dims.iter().product();
    let nd: usize = dst_dims.iter().product();
    let ratio: [f64; 3] = std::array::from_fn(|a| src_dims[a] as f64 / dst_dims[a] as f64);
    let mut out = vec![0.0; channels * nd];
    let mut idx = 0;
    for k in 0..dst_dims[2] {
        for j in 0..dst_dims[1] {
            for i in 0..dst_dims[0] {
                let p = [
                    (i as f64 + 0.5) * ratio[0] - 0.5,
                    (j as f64 + 0.5) * ratio[1] - 0.5,
                    (k as f64 + 0.5) * ratio[2] - 0.5,
                ];
                let st = Stencil::new(src_dims, p);
                for c in 0..channels {
                    out[c * nd + idx] = gain[c % gain.len()] * st.sample(&src[c * ns..(c + 1) * ns]);
                }
                idx += 1;
            }
        }
    }
    out
}

fn check_point(p: &[f64; 3]) -> Result<()> {
    if p.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("sample point {p:?}")))
    }
}

/// Trilinear interpolation at arbitrary voxel coordinates.
pub fn interpolate_trilinear(vol: &ScalarVolume, pts: &[[f64; 3]]) -> Result<Vec<f64>> {
    let dims = vol.geometry.dims();
    pts.iter()
        .map(|p| {
            check_point(p)?;
            Ok(sample_trilinear(&vol.data, dims, *p))
        })
        .collect()
}

/// `out(x) = img(x + u(x))`.
pub fn warp(img: &ScalarVolume, phi: &VectorField) -> Result<ScalarVolume> {
    img.geometry.ensure_same(&phi.geometry)?;
    let data = warp_channels(&img.data, 1, img.geometry.dims(), &phi.data);
    Ok(ScalarVolume {
        geometry: img.geometry,
        data,
    })
}

/// Displacement of `phi_a ∘ phi_b`: `u(x) = u_b(x) + u_a(x + u_b(x))`.
pub fn compose_deformations(phi_a: &VectorField, phi_b: &VectorField) -> Result<VectorField> {
    phi_a.geometry.ensure_same(&phi_b.geometry)?;
    let mut data = warp_channels(&phi_a.data, 3, phi_a.geometry.dims(), &phi_b.data);
    for (d, b) in data.iter_mut().zip(&phi_b.data) {
        *d = b + *d;
    }
    Ok(VectorField {
        geometry: phi_a.geometry,
        kind: FieldKind::Displacement,
        data,
    })
}

/// Linear upsampling onto a finer grid covering the same extent. Vector
/// components are rescaled into target voxel units.
pub fn upsample_field(v: &VectorField, target: GridGeometry) -> Result<VectorField> {
    let src = v.geometry.dims();
    let dst = target.dims();
    if (0..3).any(|a| dst[a] < src[a]) {
        return Err(Error::InvalidArgument(format!(
            "upsample_field cannot downsample {src:?} -> {dst:?}"
        )));
    }
    Ok(resample_field(v, target))
}

/// Cell-centred linear resampling of a field onto any grid covering the same
/// extent, with components rescaled into target voxel units.
pub fn resample_field(v: &VectorField, target: GridGeometry) -> VectorField {
    let (src, dst) = (v.geometry.dims(), target.dims());
    let gain: [f64; 3] = std::array::from_fn(|a| dst[a] as f64 / src[a] as f64);
    VectorField {
        geometry: target,
        kind: v.kind,
        data: resample_channels(&v.data, 3, src, dst, &gain),
    }
}

/// Cell-centred linear resampling of a volume onto any grid covering the
/// same extent.
pub fn resample_volume(vol: &ScalarVolume, target: GridGeometry) -> ScalarVolume {
    ScalarVolume {
        geometry: target,
        data: resample_channels(&vol.data, 1, vol.geometry.dims(), target.dims(), &[1.0]),
    }
}
