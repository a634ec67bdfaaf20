//! Deformation quality metrics: Jacobian determinants, folding counts,
//! image similarity and flow discrepancy, plus CSV reporting.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, ScalarVolume, VectorField};
use crate::svf::spatial_jacobian;

/// Voxels where the deformation folds (`det J <= 0`).
#[derive(Clone, Debug)]
pub struct FoldingMap {
    geometry: GridGeometry,
    flags: Vec<bool>,
}

impl FoldingMap {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn to_volume(&self) -> ScalarVolume {
        ScalarVolume::from_fn(self.geometry, |[i, j, k]| {
            if self.flags[self.geometry.index(i, j, k)] {
                1.0
            } else {
                0.0
            }
        })
    }
}

#[inline]
pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// `det(I + ∂u/∂x)` per voxel.
pub fn jacobian_determinant(phi: &VectorField) -> Result<ScalarVolume> {
    let jac = spatial_jacobian(phi)?;
    let g = *phi.geometry();
    let data = (0..g.num_voxels())
        .map(|idx| {
            let mut m = jac.matrix_at(idx);
            for (d, row) in m.iter_mut().enumerate() {
                row[d] += 1.0;
            }
            det3(&m)
        })
        .collect();
    ScalarVolume::new(g, data)
}

/// Folding map and the folded-voxel count `ε_reg`, boundary voxels included.
pub fn folding_count(phi: &VectorField) -> Result<(FoldingMap, usize)> {
    let det = jacobian_determinant(phi)?;
    let flags: Vec<bool> = det.data().iter().map(|&d| d <= 0.0).collect();
    let map = FoldingMap {
        geometry: *phi.geometry(),
        flags,
    };
    let n = map.count();
    Ok((map, n))
}

/// Global zero-mean normalised cross-correlation.
///
/// Returns 0 when exactly one volume is constant and an error when both are.
pub fn ncc(f0: &ScalarVolume, f1: &ScalarVolume) -> Result<f64> {
    f0.geometry().ensure_same(f1.geometry())?;
    let n = f0.data().len() as f64;
    let m0 = f0.data().iter().sum::<f64>() / n;
    let m1 = f1.data().iter().sum::<f64>() / n;
    let (mut cross, mut s0, mut s1) = (0.0, 0.0, 0.0);
    for (&a, &b) in f0.data().iter().zip(f1.data()) {
        let (da, db) = (a - m0, b - m1);
        cross += da * db;
        s0 += da * da;
        s1 += db * db;
    }
    match (s0 > 0.0, s1 > 0.0) {
        (false, false) => Err(Error::UndefinedCorrelation),
        (true, true) => Ok(cross / (s0 * s1).sqrt()),
        _ => Ok(0.0),
    }
}

/// Per-voxel mean of the squared component differences, in voxel².
pub fn flow_sse(phi: &VectorField, phi_hat: &VectorField) -> Result<f64> {
    phi.geometry().ensure_same(phi_hat.geometry())?;
    let sum: f64 = phi
        .data()
        .iter()
        .zip(phi_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / phi.geometry().num_voxels() as f64)
}

/// Mean Euclidean displacement in millimetres.
pub fn mean_displacement_mm(phi: &VectorField) -> f64 {
    let g = phi.geometry();
    let s = g.spacing();
    let n = g.num_voxels();
    (0..n)
        .map(|idx| {
            let u = phi.at(idx);
            ((u[0] * s[0]).powi(2) + (u[1] * s[1]).powi(2) + (u[2] * s[2]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / n as f64
}

pub fn mean_jacobian(phi: &VectorField) -> Result<f64> {
    let det = jacobian_determinant(phi)?;
    Ok(det.data().iter().sum::<f64>() / det.data().len() as f64)
}

/// Median, mean and sample standard deviation of a set of values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("summary of empty set".into()));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Ok(Self { median, mean, sd })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisplacementStats {
    pub mean_jacobian: Summary,
    pub mean_displacement_mm: Summary,
}

/// Dataset-level statistics: per-field mean `det J` and mean `‖u‖` in mm,
/// summarised over the list.
pub fn displacement_stats(phis: &[VectorField]) -> Result<DisplacementStats> {
    if phis.is_empty() {
        return Err(Error::InvalidArgument("displacement_stats needs at least one field".into()));
    }
    let jac = phis.iter().map(mean_jacobian).collect::<Result<Vec<_>>>()?;
    let disp: Vec<f64> = phis.iter().map(mean_displacement_mm).collect();
    Ok(DisplacementStats {
        mean_jacobian: Summary::of(&jac)?,
        mean_displacement_mm: Summary::of(&disp)?,
    })
}

/// One evaluated case. Metrics that could not be computed from the
/// available inputs are `None` and print as empty CSV cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub eps_reg: Option<usize>,
    pub eps_img: Option<f64>,
    pub eps_flow: Option<f64>,
    pub mean_jac: Option<f64>,
    pub mean_disp_mm: Option<f64>,
}

impl CaseMetrics {
    /// Computes everything the given inputs allow. `images` is
    /// `(fixed, moving)`; `eps_img` compares `warp(moving, phi)` to `fixed`.
    pub fn evaluate(
        case_id: impl Into<String>,
        phi: &VectorField,
        phi_hat: Option<&VectorField>,
        images: Option<(&ScalarVolume, &ScalarVolume)>,
    ) -> Result<Self> {
        let (_, eps_reg) = folding_count(phi)?;
        let eps_flow = phi_hat.map(|h| flow_sse(phi, h)).transpose()?;
        let eps_img = images
            .map(|(f0, f1)| ncc(&crate::grid::warp(f1, phi)?, f0))
            .transpose()?;
        Ok(Self {
            case_id: case_id.into(),
            eps_reg: Some(eps_reg),
            eps_img,
            eps_flow,
            mean_jac: Some(mean_jacobian(phi)?),
            mean_disp_mm: Some(mean_displacement_mm(phi)),
        })
    }
}

pub const CSV_COLUMNS: &str = "case_id,eps_reg,eps_img,eps_flow,mean_jac,mean_disp_mm";

pub const METRIC_DEFINITIONS: &str = "eps_reg=count of voxels with det(I+du/dx)<=0; \
eps_img=global zero-mean NCC of warped moving vs fixed (higher is better); \
eps_flow=per-voxel mean of squared displacement differences in voxel^2 (lower is better); \
mean_jac=mean det J; mean_disp_mm=mean displacement norm in mm";

/// Fixed six-decimal formatting used by every report.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.6}")
}

fn opt<T>(v: &Option<T>, f: impl Fn(&T) -> String) -> String {
    v.as_ref().map(f).unwrap_or_default()
}

impl CaseMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.case_id,
            opt(&self.eps_reg, |v| v.to_string()),
            opt(&self.eps_img, |v| fmt_real(*v)),
            opt(&self.eps_flow, |v| fmt_real(*v)),
            opt(&self.mean_jac, |v| fmt_real(*v)),
            opt(&self.mean_disp_mm, |v| fmt_real(*v)),
        )
    }
}

/// Per-case rows in input order.
#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    pub rows: Vec<CaseMetrics>,
}

impl MetricsReport {
    pub fn eps_flow_values(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.eps_flow).collect()
    }

    pub fn eps_img_values(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.eps_img).collect()
    }

    pub fn total_eps_reg(&self) -> usize {
        self.rows.iter().filter_map(|r| r.eps_reg).sum()
    }

    pub fn max_eps_reg(&self) -> usize {
        self.rows.iter().filter_map(|r| r.eps_reg).max().unwrap_or(0)
    }

    /// CSV text: two `#` provenance/definition lines, column header, rows.
    pub fn to_csv(&self, provenance: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {provenance}");
        let _ = writeln!(out, "# {METRIC_DEFINITIONS}");
        let _ = writeln!(out, "{CSV_COLUMNS}");
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.csv_row());
        }
        out
    }
}
