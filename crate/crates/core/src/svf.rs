//! Stationary velocity field algebra: spatial Jacobians, the Lie bracket of
//! vector fields, truncated BCH composition and the scaling-and-squaring
//! exponential.

use crate::error::{Error, Result};
use crate::grid::{compose_deformations, Dims, FieldKind, GridGeometry, VectorField};

/// Per-voxel Jacobian `∂u_i/∂x_j` of a vector field in voxel units.
#[derive(Clone, Debug)]
pub struct JacobianField {
    geometry: GridGeometry,
    /// Nine planar arrays, entry (i, j) at slot `3 * i + j`.
    entries: Vec<f64>,
}

impl JacobianField {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn entry(&self, i: usize, j: usize) -> &[f64] {
        let n = self.geometry.num_voxels();
        let s = 3 * i + j;
        &self.entries[s * n..(s + 1) * n]
    }

    pub fn matrix_at(&self, idx: usize) -> [[f64; 3]; 3] {
        let n = self.geometry.num_voxels();
        std::array::from_fn(|i| std::array::from_fn(|j| self.entries[(3 * i + j) * n + idx]))
    }

    pub(crate) fn raw(&self) -> &[f64] {
        &self.entries
    }
}

/// Truncation order of the BCH series.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BchdConfig {
    truncation_order: u8,
}

impl BchdConfig {
    pub fn new(truncation_order: u8) -> Result<Self> {
        if !(1..=4).contains(&truncation_order) {
            return Err(Error::InvalidArgument(format!(
                "BCH truncation order must be in 1..=4, got {truncation_order}"
            )));
        }
        Ok(Self { truncation_order })
    }

    /// Order 1: plain summation of velocity fields.
    pub fn summation() -> Self {
        Self { truncation_order: 1 }
    }

    pub fn truncation_order(&self) -> u8 {
        self.truncation_order
    }
}

impl Default for BchdConfig {
    fn default() -> Self {
        Self { truncation_order: 4 }
    }
}

pub(crate) fn ensure_differentiable(dims: Dims) -> Result<()> {
    if dims.iter().any(|&n| n < 3) {
        return Err(Error::Geometry(format!(
            "finite differences need at least 3 voxels per axis, got {dims:?}"
        )));
    }
    Ok(())
}

/// Derivative of one x-fastest channel along `axis`: central differences in
/// the interior, one-sided on the faces. Accumulates `scale * ∂f` into `out`.
pub(crate) fn diff_axis_acc(src: &[f64], dims: Dims, axis: usize, scale: f64, out: &mut [f64]) {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let n = dims[axis];
    let h = 0.5 * scale;
    for (idx, o) in out.iter_mut().enumerate() {
        let c = (idx / stride) % n;
        let d = if c == 0 {
            scale * (src[idx + stride] - src[idx])
        } else if c == n - 1 {
            scale * (src[idx] - src[idx - stride])
        } else {
            h * (src[idx + stride] - src[idx - stride])
        };
        *o += d;
    }
}

/// Adjoint of [`diff_axis_acc`]: accumulates `scale * Dᵀ g` into `out`.
pub(crate) fn diff_axis_adjoint_acc(g: &[f64], dims: Dims, axis: usize, scale: f64, out: &mut [f64]) {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let n = dims[axis];
    let h = 0.5 * scale;
    for idx in 0..g.len() {
        let c = (idx / stride) % n;
        let gi = g[idx];
        if c == 0 {
            out[idx + stride] += scale * gi;
            out[idx] -= scale * gi;
        } else if c == n - 1 {
            out[idx] += scale * gi;
            out[idx - stride] -= scale * gi;
        } else {
            out[idx + stride] += h * gi;
            out[idx - stride] -= h * gi;
        }
    }
}

/// Spatial gradient of each channel of a planar array; output channel
/// `3 * c + j` holds `∂f_c/∂x_j`.
pub(crate) fn channel_gradients(src: &[f64], channels: usize, dims: Dims) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut out = vec![0.0; 3 * channels * n];
    for c in 0..channels {
        for j in 0..3 {
            let slot = 3 * c + j;
            diff_axis_acc(&src[c * n..(c + 1) * n], dims, j, 1.0, &mut out[slot * n..(slot + 1) * n]);
        }
    }
    out
}

pub fn spatial_jacobian(u: &VectorField) -> Result<JacobianField> {
    let geometry = *u.geometry();
    ensure_differentiable(geometry.dims())?;
    Ok(JacobianField {
        geometry,
        entries: channel_gradients(u.data(), 3, geometry.dims()),
    })
}

/// `Σ_j (Jv_ij w_j − Jw_ij v_j)`, term by term so that `[v, v]` is exactly zero
/// and swapping the operands negates the result exactly.
pub(crate) fn bracket_kernel(jv: &[f64], w: &[f64], jw: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * n];
    for i in 0..3 {
        let o = &mut out[i * n..(i + 1) * n];
        for j in 0..3 {
            let s = (3 * i + j) * n;
            let (jv, jw) = (&jv[s..s + n], &jw[s..s + n]);
            let (wj, vj) = (&w[j * n..(j + 1) * n], &v[j * n..(j + 1) * n]);
            for x in 0..n {
                o[x] += jv[x] * wj[x] - jw[x] * vj[x];
            }
        }
    }
    out
}

/// Lie bracket of vector fields, `[v, w] = Jv·w − Jw·v`.
///
/// For linear fields `v = Ax`, `w = Bx` this is the commutator field
/// `(AB − BA)x`, the sign under which `exp(v) ∘ exp(w) = exp(v + w + ½[v, w] + …)`
/// holds for composition `(φ_a ∘ φ_b)(x) = φ_a(φ_b(x))`.
pub fn lie_bracket(v: &VectorField, w: &VectorField) -> Result<VectorField> {
    v.geometry().ensure_same(w.geometry())?;
    let jv = spatial_jacobian(v)?;
    let jw = spatial_jacobian(w)?;
    let n = v.geometry().num_voxels();
    let out = bracket_kernel(jv.raw(), w.data(), jw.raw(), v.data(), n);
    VectorField::new(*v.geometry(), v.kind(), out)
}

/// Truncated BCH composition `ζ(a, b)` with `exp(ζ(a, b)) ≈ exp(a) ∘ exp(b)`:
///
/// `a + b + ½[a,b] + 1/12([a,[a,b]] + [b,[b,a]]) − 1/24[b,[a,[a,b]]]`,
/// keeping terms up to the configured order.
pub fn bchd_compose(a: &VectorField, b: &VectorField, cfg: BchdConfig) -> Result<VectorField> {
    a.geometry().ensure_same(b.geometry())?;
    let order = cfg.truncation_order();
    let mut z = a.try_add(b)?;
    if order < 2 {
        return Ok(z);
    }
    let ab = lie_bracket(a, b)?;
    z = z.try_add(&ab.scaled(0.5))?;
    if order < 3 {
        return Ok(z);
    }
    let a_ab = lie_bracket(a, &ab)?;
    // [b, [b, a]] = −[b, [a, b]]
    let b_ab = lie_bracket(b, &ab)?;
    z = z.try_add(&a_ab.try_sub(&b_ab)?.scaled(1.0 / 12.0))?;
    if order < 4 {
        return Ok(z);
    }
    let b_a_ab = lie_bracket(b, &a_ab)?;
    z.try_sub(&b_a_ab.scaled(1.0 / 24.0))
}

pub const MIN_SQUARINGS: u32 = 4;
pub const MAX_SQUARINGS: u32 = 10;

/// Smallest `N` with `max_abs / 2^N <= 0.5`, clamped to
/// `[MIN_SQUARINGS, MAX_SQUARINGS]`.
pub fn adaptive_steps(max_abs: f64) -> u32 {
    let mut n = MIN_SQUARINGS;
    while n < MAX_SQUARINGS && max_abs / f64::powi(2.0, n as i32) > 0.5 {
        n += 1;
    }
    n
}

/// Scaling and squaring: `φ ← id + v / 2^N`, then `φ ← φ ∘ φ` N times.
/// `steps == 0` selects N adaptively.
pub fn exponentiate(v: &VectorField, steps: u32) -> Result<VectorField> {
    if v.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("velocity field".into()));
    }
    let n = if steps == 0 { adaptive_steps(v.max_abs()) } else { steps };
    let mut phi = v
        .scaled(1.0 / f64::powi(2.0, n as i32))
        .with_kind(FieldKind::Displacement);
    for _ in 0..n {
        phi = compose_deformations(&phi, &phi)?;
    }
    Ok(phi)
}

/// `exp(−v)`, the inverse deformation of `exp(v)`.
pub fn exponentiate_inverse(v: &VectorField, steps: u32) -> Result<VectorField> {
    exponentiate(&v.scaled(-1.0), steps)
}
