//! Estimates the mean displacement of default-spec B-spline fields at unit
//! scale, the constant behind the generator's default scale.
//!
//! cargo run --release -p svflow --example calibrate_scale [samples] [size]

use svflow::analysis::folding_count;
use svflow::grid::{FieldKind, GridGeometry};
use svflow::insilico::{sample_rng, BsplineDeformationSpec, BsplineField, TARGET_DISPLACEMENT_FRACTION};

fn main() {
    let mut args = std::env::args().skip(1);
    let samples: u64 = args.next().map(|a| a.parse().expect("samples")).unwrap_or(400);
    let size: usize = args.next().map(|a| a.parse().expect("size")).unwrap_or(32);
    let geometry = GridGeometry::cube(size).expect("grid");
    let spec = BsplineDeformationSpec {
        control_grid: [3, 3, 3],
        order: 5,
        scale: 1.0,
        seed: 0x00ca_11b7,
    };
    let mut total = 0.0;
    for i in 0..samples {
        let field = BsplineField::draw(spec, geometry, &mut sample_rng(spec.seed, i))
            .expect("valid spec")
            .sample(FieldKind::Displacement);
        let n = geometry.num_voxels();
        total += (0..n)
            .map(|v| field.at(v).iter().map(|c| c * c).sum::<f64>().sqrt())
            .sum::<f64>()
            / n as f64;
    }
    let unit = total / samples as f64;
    println!("unit-scale mean displacement: {unit:.6} voxels");
    let scale = TARGET_DISPLACEMENT_FRACTION * size as f64 / unit;
    println!("scale for {TARGET_DISPLACEMENT_FRACTION} of a {size}-voxel extent: {scale:.4}");
    let spec = BsplineDeformationSpec { scale, ..spec };
    let folded = (0..samples)
        .filter(|&i| {
            let field = BsplineField::draw(spec, geometry, &mut sample_rng(spec.seed, i))
                .expect("valid spec")
                .sample(FieldKind::Displacement);
            folding_count(&field).expect("jacobian").1 > 0
        })
        .count();
    println!("folded at that scale: {folded}/{samples}");
}
