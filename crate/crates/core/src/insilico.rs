//! Synthetic registration data: random B-spline displacement fields applied
//! to a base volume, split into train/validation/test sets on disk.
//!
//! Each displacement component is a superposition of lattice-centred,
//! separable B-spline bumps with standard-normal weights:
//!
//! `u_d(x) = scale · Σ_γ γ_d · Π_a β((x_a − c_a(γ)) / h_a)`
//!
//! with control points on an even lattice spanning the grid, `h_a` the
//! lattice spacing. Fields that fold anywhere are rejected and redrawn.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::analysis::folding_count;
use crate::error::{Error, Result};
use crate::grid::{warp, FieldKind, GridGeometry, ScalarVolume, VectorField};
use crate::io;

pub const MAX_BASIS_ORDER: usize = 7;

/// Mean displacement magnitude (voxels) of 3×3×3 quintic fields at unit
/// scale. Independent of grid size since the lattice stretches with the grid.
/// Produced by `examples/calibrate_scale.rs`.
pub const UNIT_SCALE_MEAN_DISPLACEMENT: f64 = 0.374_225;

/// Target mean displacement as a fraction of the grid extent (≈ 9.56 mm over
/// a ~100 mm field of view).
pub const TARGET_DISPLACEMENT_FRACTION: f64 = 0.0956;

/// Attempts per sample before the generator gives up on finding a fold-free
/// field.
pub const MAX_REDRAWS: usize = 200;

/// Centred cardinal B-spline of degree `order` at `t`, by Cox–de Boor.
pub fn bspline_basis(order: usize, t: f64) -> Result<f64> {
    if order > MAX_BASIS_ORDER {
        return Err(Error::InvalidArgument(format!(
            "B-spline order must be in 0..={MAX_BASIS_ORDER}, got {order}"
        )));
    }
    Ok(cardinal(order, t + (order as f64 + 1.0) / 2.0))
}

/// Uniform-knot B-spline `N_{0,p}` supported on `[0, p + 1)`.
fn cardinal(p: usize, x: f64) -> f64 {
    if !(0.0..(p as f64 + 1.0)).contains(&x) {
        return 0.0;
    }
    // N_{i,0} on the knot cells, then raise the degree in place.
    let mut n = [0.0f64; MAX_BASIS_ORDER + 1];
    let cell = x.floor() as usize;
    n[cell] = 1.0;
    for q in 1..=p {
        let qf = q as f64;
        for i in 0..=(p - q) {
            let fi = i as f64;
            n[i] = (x - fi) / qf * n[i] + (fi + qf + 1.0 - x) / qf * n[i + 1];
        }
    }
    n[0]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BsplineDeformationSpec {
    pub control_grid: [usize; 3],
    pub order: usize,
    /// Displacement scale in voxels.
    pub scale: f64,
    pub seed: u64,
}

impl BsplineDeformationSpec {
    /// 3×3×3 control lattice, quintic splines, scale calibrated for `geometry`.
    pub fn default_for(geometry: &GridGeometry) -> Self {
        Self {
            control_grid: [3, 3, 3],
            order: 5,
            scale: default_scale(geometry),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order < 1 || self.order > MAX_BASIS_ORDER {
            return Err(Error::InvalidArgument(format!(
                "spline order must be in 1..={MAX_BASIS_ORDER}, got {}",
                self.order
            )));
        }
        if self.control_grid.iter().any(|&c| c < 2) {
            return Err(Error::InvalidArgument(format!(
                "control grid needs >= 2 points per axis, got {:?}",
                self.control_grid
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

/// Scale giving a mean displacement of [`TARGET_DISPLACEMENT_FRACTION`] of the
/// mean grid extent.
pub fn default_scale(geometry: &GridGeometry) -> f64 {
    TARGET_DISPLACEMENT_FRACTION * mean_extent(geometry) / UNIT_SCALE_MEAN_DISPLACEMENT
}

/// Mean extent of the grid in voxels.
pub fn mean_extent(geometry: &GridGeometry) -> f64 {
    geometry.dims().iter().map(|&n| n as f64).sum::<f64>() / 3.0
}

/// A drawn B-spline field that can be evaluated anywhere, not only on grid
/// nodes.
#[derive(Clone, Debug)]
pub struct BsplineField {
    spec: BsplineDeformationSpec,
    geometry: GridGeometry,
    /// Weights per component, control points x-fastest.
    coeffs: [Vec<f64>; 3],
}

impl BsplineField {
    pub fn draw(spec: BsplineDeformationSpec, geometry: GridGeometry, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let m: usize = spec.control_grid.iter().product();
        let coeffs = std::array::from_fn(|_| (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
        Ok(Self { spec, geometry, coeffs })
    }

    pub fn from_coeffs(spec: BsplineDeformationSpec, geometry: GridGeometry, coeffs: [Vec<f64>; 3]) -> Result<Self> {
        spec.validate()?;
        let m: usize = spec.control_grid.iter().product();
        if coeffs.iter().any(|c| c.len() != m) {
            return Err(Error::shape("BsplineField::from_coeffs", format!("expected {m} weights per component")));
        }
        Ok(Self { spec, geometry, coeffs })
    }

    pub fn coeffs(&self) -> &[Vec<f64>; 3] {
        &self.coeffs
    }

    fn lattice_spacing(&self, axis: usize) -> f64 {
        (self.geometry.dims()[axis] - 1) as f64 / (self.spec.control_grid[axis] - 1) as f64
    }

    fn axis_weights(&self, axis: usize, x: f64) -> Vec<f64> {
        let h = self.lattice_spacing(axis);
        (0..self.spec.control_grid[axis])
            .map(|c| cardinal(self.spec.order, (x - c as f64 * h) / h + (self.spec.order as f64 + 1.0) / 2.0))
            .collect()
    }

    /// Displacement at an arbitrary point in voxel coordinates.
    pub fn evaluate(&self, p: [f64; 3]) -> [f64; 3] {
        let w: [Vec<f64>; 3] = std::array::from_fn(|a| self.axis_weights(a, p[a]));
        let [gx, gy, _] = self.spec.control_grid;
        let mut out = [0.0; 3];
        for (cz, wz) in w[2].iter().enumerate() {
            for (cy, wy) in w[1].iter().enumerate() {
                for (cx, wx) in w[0].iter().enumerate() {
                    let b = wx * wy * wz;
                    let ci = cx + gx * (cy + gy * cz);
                    for d in 0..3 {
                        out[d] += self.coeffs[d][ci] * b;
                    }
                }
            }
        }
        out.map(|v| self.spec.scale * v)
    }

    /// The field sampled on the grid nodes.
    pub fn sample(&self, kind: FieldKind) -> VectorField {
        let dims = self.geometry.dims();
        // Separable: per-axis weight tables, then the tensor product.
        let tables: [Vec<Vec<f64>>; 3] =
            std::array::from_fn(|a| (0..dims[a]).map(|x| self.axis_weights(a, x as f64)).collect());
        let [gx, gy, _] = self.spec.control_grid;
        VectorField::from_fn(self.geometry, kind, |[i, j, k]| {
            let mut out = [0.0; 3];
            for (cz, wz) in tables[2][k].iter().enumerate() {
                for (cy, wy) in tables[1][j].iter().enumerate() {
                    let wyz = wy * wz;
                    for (cx, wx) in tables[0][i].iter().enumerate() {
                        let b = wx * wyz;
                        let ci = cx + gx * (cy + gy * cz);
                        for d in 0..3 {
                            out[d] += self.coeffs[d][ci] * b;
                        }
                    }
                }
            }
            out.map(|v| self.spec.scale * v)
        })
    }
}

/// One random displacement field (no fold rejection).
pub fn generate_deformation(
    spec: &BsplineDeformationSpec,
    geometry: GridGeometry,
    rng: &mut impl Rng,
) -> Result<VectorField> {
    Ok(BsplineField::draw(*spec, geometry, rng)?.sample(FieldKind::Displacement))
}

/// Draws until the field is fold-free. Returns the field and the number of
/// rejected draws.
pub fn generate_fold_free(
    spec: &BsplineDeformationSpec,
    geometry: GridGeometry,
    rng: &mut impl Rng,
) -> Result<(VectorField, usize)> {
    for rejected in 0..MAX_REDRAWS {
        let phi = generate_deformation(spec, geometry, rng)?;
        if folding_count(&phi)?.1 == 0 {
            return Ok((phi, rejected));
        }
    }
    Err(Error::Numerical(format!(
        "no fold-free deformation after {MAX_REDRAWS} draws; lower the scale"
    )))
}

/// Independent random stream for sample `index`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Procedural stand-in for an MR volume: soft tissue envelope, smooth blobs
/// and thin membrane-like sheets, normalised to `[0, 1]`.
pub fn phantom(geometry: GridGeometry, seed: u64) -> ScalarVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_b1_0b5);
    let dims = geometry.dims().map(|n| n as f64);
    let centre = dims.map(|n| (n - 1.0) / 2.0);
    let blobs: Vec<([f64; 3], f64, f64)> = (0..14)
        .map(|_| {
            let c = std::array::from_fn(|a| rng.random_range(0.2..0.8) * dims[a]);
            let sigma = rng.random_range(0.06..0.14) * dims.iter().cloned().fold(f64::MAX, f64::min);
            let amp = rng.random_range(-0.5..1.0);
            (c, sigma, amp)
        })
        .collect();
    let sheets: Vec<([f64; 3], f64, f64, f64)> = (0..3)
        .map(|_| {
            let mut n: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt().max(1e-6);
            n = n.map(|v| v / len);
            let offset = rng.random_range(-0.25..0.25) * dims[0];
            let amp = rng.random_range(1.0..3.0);
            let freq = rng.random_range(0.15..0.35);
            (n, offset, amp, freq)
        })
        .collect();
    let raw = ScalarVolume::from_fn(geometry, |c| {
        let x: [f64; 3] = std::array::from_fn(|a| c[a] as f64 - centre[a]);
        let r2: f64 = (0..3).map(|a| (x[a] / (0.42 * dims[a])).powi(2)).sum();
        let envelope = 1.0 / (1.0 + (8.0 * (r2.sqrt() - 1.0)).exp());
        let mut v = 0.35 * envelope;
        for (bc, s, a) in &blobs {
            let d2: f64 = (0..3).map(|i| (c[i] as f64 - bc[i]).powi(2)).sum();
            v += a * (-d2 / (2.0 * s * s)).exp() * envelope;
        }
        for (n, off, amp, freq) in &sheets {
            let d = n[0] * x[0] + n[1] * x[1] + n[2] * x[2] - off - amp * (freq * x[0]).sin() * (freq * x[2]).cos();
            v += 0.6 * (-d * d / (2.0 * 1.2 * 1.2)).exp() * envelope;
        }
        v
    });
    let lo = raw.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = raw.data().iter().map(|v| (v - lo) / (hi - lo)).collect();
    ScalarVolume::new(geometry, data).expect("phantom values are finite")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

/// Sizes of the three splits for `count` samples; the test split takes the
/// rounding remainder.
pub fn split_counts(count: usize, ratio: [f64; 3]) -> Result<[usize; 3]> {
    if ratio.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratio.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios must be >= 0 and sum to 1, got {ratio:?}")));
    }
    let train = (count as f64 * ratio[0]).round() as usize;
    let val = ((count as f64 * ratio[1]).round() as usize).min(count - train);
    Ok([train, val, count - train - val])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub f0: String,
    pub f1: String,
    pub phi: Option<String>,
    pub rejections: usize,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_COLUMNS: &str = "id\tsplit\tf0\tf1\tphi\trejections";

pub fn write_manifest(path: &Path, provenance: &str, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "# {provenance}");
    let _ = writeln!(s, "{MANIFEST_COLUMNS}");
    for e in entries {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.id,
            e.split.as_str(),
            e.f0,
            e.f1,
            e.phi.as_deref().unwrap_or("-"),
            e.rejections
        );
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut offset = 0;
    let mut seen_header = false;
    for line in text.split_inclusive('\n') {
        let row = line.trim_end_matches(['\n', '\r']);
        let at = offset;
        offset += line.len();
        if row.is_empty() || row.starts_with('#') {
            continue;
        }
        if !seen_header {
            if row != MANIFEST_COLUMNS {
                return Err(Error::Format {
                    format: "manifest",
                    offset: at,
                    detail: format!("expected header '{MANIFEST_COLUMNS}'"),
                });
            }
            seen_header = true;
            continue;
        }
        let cols: Vec<&str> = row.split('\t').collect();
        if cols.len() != 6 {
            return Err(Error::Format {
                format: "manifest",
                offset: at,
                detail: format!("expected 6 columns, found {}", cols.len()),
            });
        }
        let bad = |d: String| Error::Format {
            format: "manifest",
            offset: at,
            detail: d,
        };
        entries.push(ManifestEntry {
            id: cols[0].to_string(),
            split: Split::parse(cols[1]).map_err(|e| bad(e.to_string()))?,
            f0: cols[2].to_string(),
            f1: cols[3].to_string(),
            phi: (cols[4] != "-").then(|| cols[4].to_string()),
            rejections: cols[5].parse().map_err(|_| bad(format!("bad rejection count '{}'", cols[5])))?,
        });
    }
    Ok(entries)
}

fn quantize_f32(data: &mut [f64]) {
    for v in data {
        *v = f64::from(*v as f32);
    }
}

/// Writes `count` samples under `out_dir`: for sample `i`, a fold-free
/// `φ̂_i` drawn from stream `(spec.seed, i)`, `f1_i = base` and
/// `f0_i = warp(base, φ̂_i)`. Inputs are rounded to f32 before warping so
/// that `warp(f1, φ̂) == f0` also holds for the stored files.
pub fn generate_dataset(
    base: &ScalarVolume,
    spec: &BsplineDeformationSpec,
    count: usize,
    split: [f64; 3],
    out_dir: &Path,
    provenance: &str,
) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    if count < 10 {
        return Err(Error::InvalidArgument(format!("dataset needs at least 10 samples, got {count}")));
    }
    let [n_train, n_val, _] = split_counts(count, split)?;
    let samples = out_dir.join("samples");
    fs::create_dir_all(&samples).map_err(|e| Error::io(&samples, e))?;
    let geometry = *base.geometry();
    let mut f1 = base.clone();
    quantize_f32(f1.data_mut());
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = sample_rng(spec.seed, i as u64);
        let (mut phi, rejections) = generate_fold_free(spec, geometry, &mut rng)?;
        quantize_f32(phi.data_mut());
        let f0 = warp(&f1, &phi)?;
        let id = format!("s{i:05}");
        let names = [
            format!("samples/{id}_f0.svol"),
            format!("samples/{id}_f1.svol"),
            format!("samples/{id}_phi.svol"),
        ];
        io::write_scalar(out_dir.join(&names[0]), &f0)?;
        io::write_scalar(out_dir.join(&names[1]), &f1)?;
        io::write_field(out_dir.join(&names[2]), &phi)?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let [f0n, f1n, phin] = names;
        entries.push(ManifestEntry {
            id,
            split,
            f0: f0n,
            f1: f1n,
            phi: Some(phin),
            rejections,
        });
        log::debug!("sample {i}: {rejections} rejected draws");
    }
    write_manifest(&out_dir.join(MANIFEST_FILE), provenance, &entries)?;
    Ok(entries)
}

/// A fixed/moving pair with optional ground-truth deformation.
#[derive(Clone, Debug)]
pub struct RegistrationSample {
    pub id: String,
    pub f0: ScalarVolume,
    pub f1: ScalarVolume,
    pub phi_hat: Option<VectorField>,
}

/// Dataset directory reader. Every sample load is recorded so callers can
/// audit which splits were touched.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    accessed: RefCell<Vec<String>>,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let entries = read_manifest(&root.join(MANIFEST_FILE))?;
        Ok(Self {
            root,
            entries,
            accessed: RefCell::new(Vec::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.clone())
            .collect()
    }

    pub fn load(&self, id: &str) -> Result<RegistrationSample> {
        let e = self
            .entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sample id '{id}'")))?;
        self.accessed.borrow_mut().push(id.to_string());
        let f0 = io::read_scalar(self.root.join(&e.f0))?;
        let f1 = io::read_scalar(self.root.join(&e.f1))?;
        f0.geometry().ensure_same(f1.geometry())?;
        let phi_hat = e.phi.as_ref().map(|p| io::read_field(self.root.join(p))).transpose()?;
        Ok(RegistrationSample {
            id: e.id.clone(),
            f0,
            f1,
            phi_hat,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<RegistrationSample>> {
        self.ids(split).iter().map(|id| self.load(id)).collect()
    }

    /// Ids loaded so far, in access order.
    pub fn accessed(&self) -> Vec<String> {
        self.accessed.borrow().clone()
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.split)
    }
}
