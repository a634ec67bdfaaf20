//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough of its inputs to run the backward rule. Spatial tensors have
//! shape `[channels, nx, ny, nz]` with channels planar and x fastest, the
//! same layout as [`VectorField`].

use crate::analysis::ncc as ncc_value;
use crate::error::{Error, Result};
use crate::grid::{resample_channels, Dims, GridGeometry, ScalarVolume, Stencil, VectorField};
use crate::svf::{adaptive_steps, bracket_kernel, channel_gradients, diff_axis_adjoint_acc, ensure_differentiable};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.is_empty() {
            return Err(Error::shape("Tensor::new", format!("shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![1], data: vec![x] }
    }

    pub fn spatial(channels: usize, dims: Dims, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![channels, dims[0], dims[1], dims[2]], data)
    }

    pub fn from_volume(v: &ScalarVolume) -> Self {
        let d = v.geometry().dims();
        Self { shape: vec![1, d[0], d[1], d[2]], data: v.data().to_vec() }
    }

    pub fn from_field(f: &VectorField) -> Self {
        let d = f.geometry().dims();
        Self { shape: vec![3, d[0], d[1], d[2]], data: f.data().to_vec() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_spatial(&self) -> bool {
        self.shape.len() == 4
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn dims(&self) -> Dims {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Reinterprets a 3-channel spatial tensor as a field on `geometry`.
    pub fn to_field(&self, geometry: GridGeometry, kind: crate::grid::FieldKind) -> Result<VectorField> {
        if !self.is_spatial() || self.channels() != 3 || self.dims() != geometry.dims() {
            return Err(Error::shape("Tensor::to_field", format!("shape {:?}", self.shape)));
        }
        VectorField::new(geometry, kind, self.data.clone())
    }

    pub fn to_volume(&self, geometry: GridGeometry) -> Result<ScalarVolume> {
        if !self.is_spatial() || self.channels() != 1 || self.dims() != geometry.dims() {
            return Err(Error::shape("Tensor::to_volume", format!("shape {:?}", self.shape)));
        }
        ScalarVolume::new(geometry, self.data.clone())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv3d { x: Var, w: Var, b: Var, stride: usize },
    Resample { x: Var, gain: Vec<f64> },
    LeakyRelu { x: Var, slope: f64 },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Hadamard(Var, Var),
    Warp { img: Var, disp: Var },
    Gradient(Var),
    Bracket(Var, Var),
    Sum(Var),
    SumSq { x: Var, div: f64 },
    Ncc(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the node does not depend on any trainable leaf.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::shape(op, format!("{a:?} vs {b:?}"))
}

/// Rows of a 3³ zero-padded convolution: for every kernel tap and output
/// row `(y, z)`, the contiguous run of output x that reads inside the input.
struct ConvRow {
    tap: usize,
    out: usize,
    inp: usize,
    len: usize,
}

fn conv_out_dims(d: Dims, stride: usize) -> Dims {
    d.map(|n| (n - 1) / stride + 1)
}

/// Dot product with four independent accumulators so the loop vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row segments grouped by output row; `groups` holds the start of each
/// group plus a final end marker, so the inner loops keep one output row hot.
struct ConvPlan {
    rows: Vec<ConvRow>,
    groups: Vec<usize>,
}

impl ConvPlan {
    fn groups(&self) -> impl Iterator<Item = &[ConvRow]> {
        self.groups.windows(2).map(|w| &self.rows[w[0]..w[1]])
    }
}

fn conv_rows(din: Dims, dout: Dims, s: usize) -> ConvPlan {
    let mut rows = Vec::with_capacity(27 * dout[1] * dout[2]);
    let mut groups = vec![0];
    for z in 0..dout[2] {
        for y in 0..dout[1] {
            for kz in 0..3 {
                let iz = (z * s + kz) as isize - 1;
                if iz < 0 || iz >= din[2] as isize {
                    continue;
                }
                for ky in 0..3 {
                    let iy = (y * s + ky) as isize - 1;
                    if iy < 0 || iy >= din[1] as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        // x*s + kx - 1 in [0, nx_in)
                        let x_lo = if kx == 0 { 1usize.div_ceil(s) } else { 0 };
                        let x_hi = ((din[0] + s - kx) / s).min(dout[0]);
                        if x_lo >= x_hi {
                            continue;
                        }
                        let ix = x_lo * s + kx - 1;
                        rows.push(ConvRow {
                            tap: kx + 3 * (ky + 3 * kz),
                            out: x_lo + dout[0] * (y + dout[1] * z),
                            inp: ix + din[0] * (iy as usize + din[1] * iz as usize),
                            len: x_hi - x_lo,
                        });
                    }
                }
            }
            if rows.len() > *groups.last().unwrap() {
                groups.push(rows.len());
            }
        }
    }
    ConvPlan { rows, groups }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; gradients are reported for it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn spatial(&self, op: &'static str, v: Var) -> Result<&Tensor> {
        let t = self.value(v);
        if t.is_spatial() {
            Ok(t)
        } else {
            Err(Error::shape(op, format!("expected [C, X, Y, Z], got {:?}", t.shape)))
        }
    }

    /// 3³ convolution, zero padding 1, stride 1 or 2. `w` is
    /// `[out, in, 3, 3, 3]`, `b` is `[out]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xt = self.spatial("conv3d", x)?;
        let wt = self.value(w);
        let bt = self.value(b);
        if !(stride == 1 || stride == 2) {
            return Err(Error::shape("conv3d", format!("stride must be 1 or 2, got {stride}")));
        }
        if wt.shape.len() != 5 || wt.shape[2..] != [3, 3, 3] || wt.shape[1] != xt.channels() {
            return Err(Error::shape(
                "conv3d",
                format!("kernel {:?} does not fit input {:?}", wt.shape, xt.shape),
            ));
        }
        let co = wt.shape[0];
        if bt.shape != [co] {
            return Err(mismatch("conv3d bias", &bt.shape, &[co]));
        }
        let ci = xt.channels();
        let din = xt.dims();
        let dout = conv_out_dims(din, stride);
        let (nin, nout): (usize, usize) = (din.iter().product(), dout.iter().product());
        let mut out = vec![0.0; co * nout];
        for (o, ch) in out.chunks_mut(nout).enumerate() {
            ch.fill(bt.data[o]);
        }
        let plan = conv_rows(din, dout, stride);
        let (xd, wd) = (&xt.data, &wt.data);
        for o in 0..co {
            let oc = &mut out[o * nout..(o + 1) * nout];
            for rows in plan.groups() {
                for i in 0..ci {
                    let ic = &xd[i * nin..(i + 1) * nin];
                    let wk = &wd[(o * ci + i) * 27..(o * ci + i + 1) * 27];
                    for r in rows {
                        let wv = wk[r.tap];
                        if wv == 0.0 {
                            continue;
                        }
                        let dst = &mut oc[r.out..r.out + r.len];
                        if stride == 1 {
                            for (d, s) in dst.iter_mut().zip(&ic[r.inp..r.inp + r.len]) {
                                *d += wv * s;
                            }
                        } else {
                            for (q, d) in dst.iter_mut().enumerate() {
                                *d += wv * ic[r.inp + 2 * q];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::spatial(co, dout, out)?;
        Ok(self.push(t, Op::Conv3d { x, w, b, stride }, &[x, w, b]))
    }

    /// Cell-centred trilinear resampling to `dims`; channel `c` is multiplied
    /// by `gain[c % gain.len()]`.
    pub fn resample(&mut self, x: Var, dims: Dims, gain: &[f64]) -> Result<Var> {
        let xt = self.spatial("resample", x)?;
        if gain.is_empty() || dims.contains(&0) {
            return Err(Error::shape("resample", "empty gain or target"));
        }
        let data = resample_channels(&xt.data, xt.channels(), xt.dims(), dims, gain);
        let t = Tensor::spatial(xt.channels(), dims, data)?;
        Ok(self.push(t, Op::Resample { x, gain: gain.to_vec() }, &[x]))
    }

    /// Doubles every spatial dimension; a displacement or velocity field
    /// keeps its meaning in voxels of the finer grid with `gain = 2`.
    pub fn upsample2(&mut self, x: Var, gain: f64) -> Result<Var> {
        let d = self.spatial("upsample2", x)?.dims();
        self.resample(x, d.map(|n| 2 * n), &[gain])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| if v >= 0.0 { v } else { slope * v }).collect();
        let t = Tensor { shape: t.shape.clone(), data };
        self.push(t, Op::LeakyRelu { x, slope }, &[x])
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch(op, &ta.shape, &tb.shape));
        }
        Ok(Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let t = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|v| v * s).collect() };
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// Channel concatenation of spatial tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.spatial("concat", *parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)?;
        let dims = first.dims();
        let mut data = Vec::new();
        let mut channels = 0;
        for &p in parts {
            let t = self.spatial("concat", p)?;
            if t.dims() != dims {
                return Err(mismatch("concat", &t.shape, &first.shape));
            }
            channels += t.channels();
            data.extend_from_slice(&t.data);
        }
        let t = Tensor::spatial(channels, dims, data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.spatial("slice_channels", x)?;
        if len == 0 || start + len > t.channels() {
            return Err(Error::shape("slice_channels", format!("{start}+{len} of {} channels", t.channels())));
        }
        let n = t.voxels();
        let t = Tensor::spatial(len, t.dims(), t.data[start * n..(start + len) * n].to_vec())?;
        Ok(self.push(t, Op::Slice { x, start }, &[x]))
    }

    /// `H(a, b) = (a + b, a − b)`, concatenated along channels.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.spatial("hadamard", a)?, self.spatial("hadamard", b)?);
        if ta.shape != tb.shape {
            return Err(mismatch("hadamard", &ta.shape, &tb.shape));
        }
        let mut data: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        data.extend(ta.data.iter().zip(&tb.data).map(|(x, y)| x - y));
        let t = Tensor::spatial(2 * ta.channels(), ta.dims(), data)?;
        Ok(self.push(t, Op::Hadamard(a, b), &[a, b]))
    }

    /// `out_c(x) = img_c(x + u(x))` with clamped trilinear sampling.
    pub fn warp(&mut self, img: Var, disp: Var) -> Result<Var> {
        let (ti, td) = (self.spatial("warp", img)?, self.spatial("warp", disp)?);
        if td.channels() != 3 || td.dims() != ti.dims() {
            return Err(mismatch("warp", &ti.shape, &td.shape));
        }
        let data = crate::grid::warp_channels(&ti.data, ti.channels(), ti.dims(), &td.data);
        let t = Tensor { shape: ti.shape.clone(), data };
        Ok(self.push(t, Op::Warp { img, disp }, &[img, disp]))
    }

    /// `(a ∘ b)(x) = b(x) + a(x + b(x))` for displacement fields.
    pub fn compose(&mut self, a: Var, b: Var) -> Result<Var> {
        let w = self.warp(a, b)?;
        self.add(b, w)
    }

    /// Scaling and squaring; `steps == 0` picks the count from the current
    /// value of `v`.
    pub fn exp(&mut self, v: Var, steps: u32) -> Result<Var> {
        let t = self.spatial("exp", v)?;
        if t.channels() != 3 {
            return Err(Error::shape("exp", format!("expected 3 channels, got {}", t.channels())));
        }
        if t.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("velocity field".into()));
        }
        let n = if steps == 0 { adaptive_steps(t.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))) } else { steps };
        let mut phi = self.scale(v, 1.0 / f64::powi(2.0, n as i32));
        for _ in 0..n {
            phi = self.compose(phi, phi)?;
        }
        Ok(phi)
    }

    /// Central-difference gradient of every channel; output channel `3c + j`
    /// is `∂x_c/∂x_j`.
    pub fn gradient(&mut self, x: Var) -> Result<Var> {
        let t = self.spatial("gradient", x)?;
        ensure_differentiable(t.dims())?;
        let data = channel_gradients(&t.data, t.channels(), t.dims());
        let t = Tensor::spatial(3 * t.channels(), t.dims(), data)?;
        Ok(self.push(t, Op::Gradient(x), &[x]))
    }

    /// Lie bracket `Jv·w − Jw·v` of two 3-channel fields.
    pub fn bracket(&mut self, v: Var, w: Var) -> Result<Var> {
        let (tv, tw) = (self.spatial("bracket", v)?, self.spatial("bracket", w)?);
        if tv.shape != tw.shape || tv.channels() != 3 {
            return Err(mismatch("bracket", &tv.shape, &tw.shape));
        }
        ensure_differentiable(tv.dims())?;
        let n = tv.voxels();
        let jv = channel_gradients(&tv.data, 3, tv.dims());
        let jw = channel_gradients(&tw.data, 3, tw.dims());
        let data = bracket_kernel(&jv, &tw.data, &jw, &tv.data, n);
        let t = Tensor { shape: tv.shape.clone(), data };
        Ok(self.push(t, Op::Bracket(v, w), &[v, w]))
    }

    /// Truncated BCH series `ζ(a, b)`, same term order as
    /// [`crate::svf::bchd_compose`].
    pub fn bchd(&mut self, a: Var, b: Var, order: u8) -> Result<Var> {
        let mut z = self.add(a, b)?;
        if order < 2 {
            return Ok(z);
        }
        let ab = self.bracket(a, b)?;
        let half = self.scale(ab, 0.5);
        z = self.add(z, half)?;
        if order < 3 {
            return Ok(z);
        }
        let a_ab = self.bracket(a, ab)?;
        let b_ab = self.bracket(b, ab)?;
        let d = self.sub(a_ab, b_ab)?;
        let d = self.scale(d, 1.0 / 12.0);
        z = self.add(z, d)?;
        if order < 4 {
            return Ok(z);
        }
        let b_a_ab = self.bracket(b, a_ab)?;
        let e = self.scale(b_a_ab, 1.0 / 24.0);
        self.sub(z, e)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ x² / div`.
    pub fn sum_sq(&mut self, x: Var, div: f64) -> Var {
        let s = self.value(x).data.iter().map(|v| v * v).sum::<f64>() / div;
        self.push(Tensor::scalar(s), Op::SumSq { x, div }, &[x])
    }

    /// Per-voxel mean of squared component differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.spatial("mse", a)?.voxels() as f64;
        let d = self.sub(a, b)?;
        Ok(self.sum_sq(d, n))
    }

    /// Global normalised cross-correlation of two single-channel volumes.
    pub fn ncc(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.spatial("ncc", a)?, self.spatial("ncc", b)?);
        if ta.shape != tb.shape || ta.channels() != 1 {
            return Err(mismatch("ncc", &ta.shape, &tb.shape));
        }
        let g = GridGeometry::with_dims(ta.dims())?;
        let r = ncc_value(&ta.to_volume(g)?, &tb.to_volume(g)?)?;
        Ok(self.push(Tensor::scalar(r), Op::Ncc(a, b), &[a, b]))
    }

    /// `Σ ‖∇ⁿu‖² / (3|Ω|)` with central differences, `n ∈ {1, 2}`.
    pub fn smoothness(&mut self, u: Var, order: u32) -> Result<Var> {
        if !(order == 1 || order == 2) {
            return Err(Error::InvalidArgument(format!("smoothness order must be 1 or 2, got {order}")));
        }
        let n = self.spatial("smoothness", u)?.voxels() as f64;
        let mut d = self.gradient(u)?;
        if order == 2 {
            d = self.gradient(d)?;
        }
        Ok(self.sum_sq(d, 3.0 * n))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", lt.shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        // Only leaves that asked for gradients are reported.
        for (id, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].needs_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Scale(a, k) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(d, g)| *d += k * g)),
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                acc(*a, &mut |s| {
                    for ((d, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((d, g), x) in s.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::LeakyRelu { x, slope } => {
                let xv = &nodes[x.0].value.data;
                acc(*x, &mut |s| {
                    for ((d, g), v) in s.iter_mut().zip(g).zip(xv) {
                        *d += if *v >= 0.0 { *g } else { slope * g };
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |s| s.iter_mut().zip(&g[off..off + len]).for_each(|(d, g)| *d += g));
                    off += len;
                }
            }
            Op::Slice { x, start } => {
                let n = nodes[x.0].value.voxels();
                acc(*x, &mut |s| {
                    s[start * n..start * n + g.len()].iter_mut().zip(g).for_each(|(d, g)| *d += g)
                });
            }
            Op::Hadamard(a, b) => {
                let h = g.len() / 2;
                let (p, q) = (&g[..h], &g[h..]);
                acc(*a, &mut |s| {
                    for i in 0..h {
                        s[i] += p[i] + q[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..h {
                        s[i] += p[i] - q[i];
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::SumSq { x, div } => {
                let xv = &nodes[x.0].value.data;
                let k = 2.0 * g[0] / div;
                acc(*x, &mut |s| s.iter_mut().zip(xv).for_each(|(d, v)| *d += k * v));
            }
            Op::Ncc(a, b) => {
                let (va, vb) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                let (ga, gb) = ncc_grads(va, vb);
                acc(*a, &mut |s| s.iter_mut().zip(&ga).for_each(|(d, x)| *d += g[0] * x));
                acc(*b, &mut |s| s.iter_mut().zip(&gb).for_each(|(d, x)| *d += g[0] * x));
            }
            Op::Gradient(x) => {
                let t = &nodes[x.0].value;
                let (n, dims) = (t.voxels(), t.dims());
                acc(*x, &mut |s| {
                    for c in 0..t.channels() {
                        for j in 0..3 {
                            let slot = 3 * c + j;
                            diff_axis_adjoint_acc(&g[slot * n..(slot + 1) * n], dims, j, 1.0, &mut s[c * n..(c + 1) * n]);
                        }
                    }
                });
            }
            Op::Bracket(v, w) => {
                let (tv, tw) = (&nodes[v.0].value, &nodes[w.0].value);
                let (n, dims) = (tv.voxels(), tv.dims());
                let jv = channel_gradients(&tv.data, 3, dims);
                let jw = channel_gradients(&tw.data, 3, dims);
                // out_i = Σ_j D_j v_i · w_j − D_j w_i · v_j
                let side = |own_j: &[f64], other: &[f64], sign: f64, s: &mut [f64]| {
                    let mut tmp = vec![0.0; n];
                    for i in 0..3 {
                        let gi = &g[i * n..(i + 1) * n];
                        for j in 0..3 {
                            let oj = &other[j * n..(j + 1) * n];
                            for x in 0..n {
                                tmp[x] = sign * gi[x] * oj[x];
                            }
                            diff_axis_adjoint_acc(&tmp, dims, j, 1.0, &mut s[i * n..(i + 1) * n]);
                            let jo = &own_j[(3 * i + j) * n..(3 * i + j + 1) * n];
                            let sj = &mut s[j * n..(j + 1) * n];
                            for x in 0..n {
                                sj[x] -= sign * gi[x] * jo[x];
                            }
                        }
                    }
                };
                acc(*v, &mut |s| side(&jw, &tw.data, 1.0, s));
                acc(*w, &mut |s| side(&jv, &tv.data, -1.0, s));
            }
            Op::Warp { img, disp } => {
                let (ti, td) = (&nodes[img.0].value, &nodes[disp.0].value);
                let (n, dims, ch) = (ti.voxels(), ti.dims(), ti.channels());
                let stencils: Vec<Stencil> = (0..n)
                    .map(|idx| {
                        let i = idx % dims[0];
                        let j = (idx / dims[0]) % dims[1];
                        let k = idx / (dims[0] * dims[1]);
                        Stencil::new(
                            dims,
                            [i as f64 + td.data[idx], j as f64 + td.data[n + idx], k as f64 + td.data[2 * n + idx]],
                        )
                    })
                    .collect();
                acc(*img, &mut |s| {
                    for c in 0..ch {
                        let (gc, sc) = (&g[c * n..(c + 1) * n], &mut s[c * n..(c + 1) * n]);
                        for (st, &gv) in stencils.iter().zip(gc) {
                            for q in 0..8 {
                                sc[st.idx[q]] += st.w[q] * gv;
                            }
                        }
                    }
                });
                acc(*disp, &mut |s| {
                    for c in 0..ch {
                        let (gc, ic) = (&g[c * n..(c + 1) * n], &ti.data[c * n..(c + 1) * n]);
                        for (idx, st) in stencils.iter().enumerate() {
                            let pg = st.position_gradient(ic);
                            for a in 0..3 {
                                s[a * n + idx] += gc[idx] * pg[a];
                            }
                        }
                    }
                });
            }
            Op::Resample { x, gain } => {
                let tx = &nodes[x.0].value;
                let (src, dst) = (tx.dims(), node.value.dims());
                let (ns, nd) = (tx.voxels(), node.value.voxels());
                let ratio: [f64; 3] = std::array::from_fn(|a| src[a] as f64 / dst[a] as f64);
                acc(*x, &mut |s| {
                    let mut idx = 0;
                    for k in 0..dst[2] {
                        for j in 0..dst[1] {
                            for i in 0..dst[0] {
                                let p = [
                                    (i as f64 + 0.5) * ratio[0] - 0.5,
                                    (j as f64 + 0.5) * ratio[1] - 0.5,
                                    (k as f64 + 0.5) * ratio[2] - 0.5,
                                ];
                                let st = Stencil::new(src, p);
                                for c in 0..tx.channels() {
                                    let gv = gain[c % gain.len()] * g[c * nd + idx];
                                    for q in 0..8 {
                                        s[c * ns + st.idx[q]] += st.w[q] * gv;
                                    }
                                }
                                idx += 1;
                            }
                        }
                    }
                });
            }
            Op::Conv3d { x, w, b, stride } => {
                let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                let (ci, co) = (tx.channels(), tw.shape[0]);
                let (din, dout) = (tx.dims(), node.value.dims());
                let (nin, nout) = (tx.voxels(), node.value.voxels());
                let rows = conv_rows(din, dout, *stride).rows;
                let st = *stride;
                acc(*b, &mut |s| {
                    for o in 0..co {
                        s[o] += g[o * nout..(o + 1) * nout].iter().sum::<f64>();
                    }
                });
                acc(*w, &mut |s| {
                    for o in 0..co {
                        let go = &g[o * nout..(o + 1) * nout];
                        for i in 0..ci {
                            let xi = &tx.data[i * nin..(i + 1) * nin];
                            let sk = &mut s[(o * ci + i) * 27..(o * ci + i + 1) * 27];
                            for r in &rows {
                                let gr = &go[r.out..r.out + r.len];
                                let d: f64 = if st == 1 {
                                    dot(gr, &xi[r.inp..r.inp + r.len])
                                } else {
                                    gr.iter().enumerate().map(|(q, a)| a * xi[r.inp + 2 * q]).sum()
                                };
                                sk[r.tap] += d;
                            }
                        }
                    }
                });
                acc(*x, &mut |s| {
                    for i in 0..ci {
                        let si = &mut s[i * nin..(i + 1) * nin];
                        for o in 0..co {
                            let go = &g[o * nout..(o + 1) * nout];
                            let wk = &tw.data[(o * ci + i) * 27..(o * ci + i + 1) * 27];
                            for r in &rows {
                                let wv = wk[r.tap];
                                if wv == 0.0 {
                                    continue;
                                }
                                let gr = &go[r.out..r.out + r.len];
                                if st == 1 {
                                    for (d, gv) in si[r.inp..r.inp + r.len].iter_mut().zip(gr) {
                                        *d += wv * gv;
                                    }
                                } else {
                                    for (q, gv) in gr.iter().enumerate() {
                                        si[r.inp + 2 * q] += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Partial derivatives of `ncc(a, b)`; zero when either input is constant.
fn ncc_grads(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cross, mut sa, mut sb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cross += (x - ma) * (y - mb);
        sa += (x - ma) * (x - ma);
        sb += (y - mb) * (y - mb);
    }
    if sa <= 0.0 || sb <= 0.0 {
        return (vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let root = (sa * sb).sqrt();
    let r = cross / root;
    let ga = a.iter().zip(b).map(|(&x, &y)| (y - mb) / root - r * (x - ma) / sa).collect();
    let gb = a.iter().zip(b).map(|(&x, &y)| (x - ma) / root - r * (y - mb) / sb).collect();
    (ga, gb)
}

/// Result of comparing analytic gradients with central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` per input.
    pub rel_err: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rel_err.iter().all(|&e| e < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().cloned().fold(0.0, f64::max)
    }
}

/// Finite-difference check of `f` at `inputs`. Non-scalar outputs are
/// contracted with fixed pseudo-random weights so every output entry
/// contributes.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let loss = if g.value(out).is_scalar() {
            out
        } else {
            let shape = g.value(out).shape.clone();
            let len = g.value(out).len();
            // Weyl sequence in [-1, 1]; deterministic and free of symmetries.
            let w = (0..len).map(|i| 2.0 * ((i as f64 * 0.618_033_988_749_895 + 0.31) % 1.0) - 1.0).collect();
            let wv = g.constant(Tensor::new(shape, w)?);
            let m = g.mul(out, wv)?;
            g.sum(m)
        };
        let value = g.value(loss).item();
        let grads = if grad {
            let gr = g.backward(loss)?;
            Some(vars.iter().zip(vals).map(|(v, t)| gr.get_or_zeros(*v, t.len())).collect())
        } else {
            None
        };
        Ok((value, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let analytic = analytic.expect("gradients requested");
    let mut rel_err = Vec::with_capacity(inputs.len());
    for (k, t) in inputs.iter().enumerate() {
        let mut fd = vec![0.0; t.len()];
        let mut work = inputs.to_vec();
        for e in 0..t.len() {
            let x0 = t.data[e];
            work[k].data[e] = x0 + h;
            let (fp, _) = eval(&work, false)?;
            work[k].data[e] = x0 - h;
            let (fm, _) = eval(&work, false)?;
            work[k].data[e] = x0;
            fd[e] = (fp - fm) / (2.0 * h);
        }
        let diff: f64 = analytic[k].iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let na = analytic[k].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nf = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nf);
        rel_err.push(if denom > 0.0 { diff / denom } else { 0.0 });
    }
    Ok(GradCheckReport { rel_err, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::FieldKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, amp: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-amp..amp)).collect()).unwrap()
    }

    fn smooth_field(dims: Dims, amp: f64, phase: f64) -> Tensor {
        let g = GridGeometry::with_dims(dims).unwrap();
        Tensor::from_field(&VectorField::from_fn(g, FieldKind::Velocity, |[i, j, k]| {
            let (x, y, z) = (i as f64, j as f64, k as f64);
            [
                amp * (0.7 * x + 0.4 * y + phase).sin(),
                amp * (0.5 * y - 0.6 * z + 2.0 * phase).cos(),
                amp * (0.3 * x + 0.8 * z - phase).sin(),
            ]
        }))
    }

    #[test]
    fn leaky_relu_forward() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(-1.0));
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y).item(), -0.2);
    }

    #[test]
    fn hadamard_of_equal_inputs() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = g.constant(rand_tensor(&mut rng, vec![2, 3, 3, 3], 1.0));
        let h = g.hadamard(f, f).unwrap();
        let (v, fv) = (g.value(h).data(), g.value(f).data());
        assert_eq!(&v[..54], &fv.iter().map(|x| 2.0 * x).collect::<Vec<_>>()[..]);
        assert!(v[54..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hadamard_backward_maps_cotangents() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = g.param(rand_tensor(&mut rng, vec![1, 2, 2, 2], 1.0));
        let b = g.param(rand_tensor(&mut rng, vec![1, 2, 2, 2], 1.0));
        let h = g.hadamard(a, b).unwrap();
        let pq = rand_tensor(&mut rng, vec![2, 2, 2, 2], 1.0);
        let w = g.constant(pq.clone());
        let m = g.mul(h, w).unwrap();
        let l = g.sum(m);
        let gr = g.backward(l).unwrap();
        let (p, q) = pq.data().split_at(8);
        for i in 0..8 {
            assert_eq!(gr.get(a).unwrap()[i], p[i] + q[i]);
            assert_eq!(gr.get(b).unwrap()[i], p[i] - q[i]);
        }
    }

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        let mut g = Graph::new();
        let theta = Tensor::new(vec![5], vec![0.5, -1.25, 3.0, 0.0, 7.5]).unwrap();
        let t = g.param(theta.clone());
        let other = g.param(Tensor::scalar(4.0));
        let l = g.sum_sq(t, 1.0);
        let gr = g.backward(l).unwrap();
        let expected: Vec<f64> = theta.data().iter().map(|x| 2.0 * x).collect();
        assert_eq!(gr.get(t).unwrap(), &expected[..]);
        assert!(gr.get(other).is_none());
        assert_eq!(gr.get_or_zeros(other, 1), vec![0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let t = g.param(Tensor::zeros(vec![2]));
        assert!(g.backward(t).is_err());
    }

    #[test]
    fn shape_mismatch_errors_at_construction() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(vec![1, 4, 4, 4]));
        let b = g.param(Tensor::zeros(vec![1, 4, 4, 5]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        let w = g.param(Tensor::zeros(vec![2, 2, 3, 3, 3]));
        let bias = g.param(Tensor::zeros(vec![2]));
        assert!(g.conv3d(a, w, bias, 1).is_err());
        assert!(g.warp(a, a).is_err());
    }

    #[test]
    fn warp_image_gradient_under_identity_is_identity() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = g.param(rand_tensor(&mut rng, vec![1, 4, 4, 4], 1.0));
        let u = g.constant(Tensor::zeros(vec![3, 4, 4, 4]));
        let cot = rand_tensor(&mut rng, vec![1, 4, 4, 4], 1.0);
        let w = g.warp(img, u).unwrap();
        let c = g.constant(cot.clone());
        let m = g.mul(w, c).unwrap();
        let l = g.sum(m);
        assert_eq!(g.backward(l).unwrap().get(img).unwrap(), cot.data());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![2, 5, 4, 6], 1.0);
        let w = rand_tensor(&mut rng, vec![3, 2, 3, 3, 3], 1.0);
        let b = rand_tensor(&mut rng, vec![3], 1.0);
        for stride in [1, 2] {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv3d(xv, wv, bv, stride).unwrap();
            let yt = g.value(y);
            let din = x.dims();
            let dout = yt.dims();
            assert_eq!(dout, din.map(|n| (n - 1) / stride + 1));
            for o in 0..3 {
                for z in 0..dout[2] {
                    for yy in 0..dout[1] {
                        for xx in 0..dout[0] {
                            let mut s = b.data()[o];
                            for i in 0..2 {
                                for kz in 0..3 {
                                    for ky in 0..3 {
                                        for kx in 0..3 {
                                            let p = [
                                                (xx * stride + kx) as isize - 1,
                                                (yy * stride + ky) as isize - 1,
                                                (z * stride + kz) as isize - 1,
                                            ];
                                            if (0..3).any(|a| p[a] < 0 || p[a] >= din[a] as isize) {
                                                continue;
                                            }
                                            let xi = p[0] as usize + din[0] * (p[1] as usize + din[1] * p[2] as usize);
                                            s += w.data()[((o * 2 + i) * 27) + kx + 3 * (ky + 3 * kz)]
                                                * x.data()[i * 120 + xi];
                                        }
                                    }
                                }
                            }
                            let oi = xx + dout[0] * (yy + dout[1] * z);
                            assert!((yt.data()[o * yt.voxels() + oi] - s).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn graph_bchd_matches_library() {
        let dims = [6, 6, 6];
        let a = smooth_field(dims, 0.3, 0.1);
        let b = smooth_field(dims, 0.2, 0.7);
        let geo = GridGeometry::with_dims(dims).unwrap();
        let fa = a.to_field(geo, FieldKind::Velocity).unwrap();
        let fb = b.to_field(geo, FieldKind::Velocity).unwrap();
        for order in 1..=4u8 {
            let mut g = Graph::new();
            let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
            let z = g.bchd(va, vb, order).unwrap();
            let lib = crate::svf::bchd_compose(&fa, &fb, crate::svf::BchdConfig::new(order).unwrap()).unwrap();
            assert_eq!(g.value(z).data(), lib.data());
        }
        let mut g = Graph::new();
        let va = g.constant(a.clone());
        let e = g.exp(va, 0).unwrap();
        assert_eq!(g.value(e).data(), crate::svf::exponentiate(&fa, 0).unwrap().data());
    }

    fn check(tol: f64, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
        let r = grad_check(f, inputs, 1e-4, tol).unwrap();
        assert!(r.passed(), "relative errors {:?}", r.rel_err);
    }

    #[test]
    fn grad_conv3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&mut rng, vec![1, 5, 5, 5], 1.0);
        let w = rand_tensor(&mut rng, vec![2, 1, 3, 3, 3], 0.5);
        let b = rand_tensor(&mut rng, vec![2], 0.5);
        check(1e-3, &[x, w, b], |g, v| g.conv3d(v[0], v[1], v[2], 1));
        let x = rand_tensor(&mut rng, vec![2, 6, 4, 4], 1.0);
        let w = rand_tensor(&mut rng, vec![1, 2, 3, 3, 3], 0.5);
        let b = rand_tensor(&mut rng, vec![1], 0.5);
        check(1e-3, &[x, w, b], |g, v| g.conv3d(v[0], v[1], v[2], 2));
    }

    #[test]
    fn grad_elementwise_and_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&mut rng, vec![2, 3, 4, 3], 1.0);
        let b = rand_tensor(&mut rng, vec![2, 3, 4, 3], 1.0);
        let ab = [a.clone(), b.clone()];
        check(1e-3, &ab, |g, v| g.add(v[0], v[1]));
        check(1e-3, &ab, |g, v| g.sub(v[0], v[1]));
        check(1e-3, &ab, |g, v| g.mul(v[0], v[1]));
        check(1e-3, &ab, |g, v| g.hadamard(v[0], v[1]));
        check(1e-3, &ab, |g, v| g.concat(&[v[0], v[1]]));
        check(1e-3, &ab[..1], |g, v| Ok(g.scale(v[0], -1.7)));
        check(1e-3, &ab[..1], |g, v| Ok(g.leaky_relu(v[0], 0.2)));
        check(1e-3, &ab[..1], |g, v| g.slice_channels(v[0], 1, 1));
        check(1e-3, &ab[..1], |g, v| Ok(g.mean(v[0])));
        check(1e-3, &ab[..1], |g, v| Ok(g.sum(v[0])));
        check(1e-3, &ab[..1], |g, v| Ok(g.sum_sq(v[0], 3.0)));
    }

    #[test]
    fn grad_resample() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, vec![3, 3, 3, 3], 1.0);
        check(1e-3, &[x.clone()], |g, v| g.upsample2(v[0], 2.0));
        check(1e-3, &[x], |g, v| g.resample(v[0], [5, 4, 6], &[1.0, 2.0, 0.5]));
    }

    #[test]
    fn grad_warp() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let img = rand_tensor(&mut rng, vec![2, 6, 6, 6], 1.0);
        let u = rand_tensor(&mut rng, vec![3, 6, 6, 6], 1.3);
        check(1e-3, &[img, u], |g, v| g.warp(v[0], v[1]));
    }

    #[test]
    fn grad_compose_and_exp() {
        let a = smooth_field([6, 6, 6], 0.8, 0.2);
        let b = smooth_field([6, 6, 6], 0.6, 1.13);
        check(1e-3, &[a.clone(), b.clone()], |g, v| g.compose(v[0], v[1]));
        check(1e-2, &[smooth_field([6, 6, 6], 1.5, 0.4)], |g, v| g.exp(v[0], 4));
    }

    #[test]
    fn grad_gradient_bracket_bchd() {
        let a = smooth_field([5, 6, 5], 0.5, 0.3);
        let b = smooth_field([5, 6, 5], 0.4, 1.4);
        check(1e-3, &[a.clone()], |g, v| g.gradient(v[0]));
        check(1e-3, &[a.clone(), b.clone()], |g, v| g.bracket(v[0], v[1]));
        check(1e-3, &[a.clone(), b.clone()], |g, v| g.bchd(v[0], v[1], 4));
    }

    #[test]
    fn grad_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = rand_tensor(&mut rng, vec![1, 4, 5, 4], 1.0);
        let b = rand_tensor(&mut rng, vec![1, 4, 5, 4], 1.0);
        check(1e-3, &[a.clone(), b.clone()], |g, v| g.ncc(v[0], v[1]));
        let u = rand_tensor(&mut rng, vec![3, 4, 5, 4], 1.0);
        let w = rand_tensor(&mut rng, vec![3, 4, 5, 4], 1.0);
        check(1e-3, &[u.clone(), w], |g, v| g.mse(v[0], v[1]));
        check(1e-3, &[u.clone()], |g, v| g.smoothness(v[0], 1));
        check(1e-3, &[u], |g, v| g.smoothness(v[0], 2));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let a = g.param(smooth_field([5, 5, 5], 0.9, 0.5));
            let e = g.exp(a, 0).unwrap();
            let l = g.sum_sq(e, 1.0);
            g.backward(l).unwrap().get(a).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }
}
