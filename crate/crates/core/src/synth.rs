//! Synthetic phantoms, atlases and deformations with known geometry.
//!
//! Used by the tests, the runnable examples and the `run` smoke scenario.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::path::{Path, PathBuf};

use nalgebra::Matrix4;

use crate::affine::AffineParams;
use crate::dicom::write_series;
use crate::error::Result;
use crate::field::VectorField;
use crate::nifti::{write_labels, write_nifti, Datatype};
use crate::register::{apply_transform, exp_velocity, Direction, TransformChain};
use crate::segment::format_label_table;
use crate::volume::{Grid, Interpolation, LabelTable, LabelVolume, OutOfBounds, SampleMode, Volume3};

pub const AIR_HU: f32 = -1000.0;
pub const TISSUE_HU: f32 = 40.0;
pub const BONE_HU: f32 = 1200.0;

/// Logistic step from 1 (inside, `d < 0`) to 0 (outside) with width `w` mm.
fn soft_inside(d: f64, w: f64) -> f64 {
    if w <= 0.0 {
        return if d <= 0.0 { 1.0 } else { 0.0 };
    }
    1.0 / (1.0 + (d / w).exp())
}

/// A soft-edged ball of value 100 on a background of 0.
pub fn sphere(grid: Grid, center: Vector3<f64>, radius: f64, edge_mm: f64) -> Volume3 {
    Volume3::from_world_fn(grid, move |p| (100.0 * soft_inside((p - center).norm() - radius, edge_mm)) as f32)
}

/// Two overlapping balls of different brightness, placed off-centre. The
/// large ball carries a gentle intensity ramp across the line joining the
/// centres so that no rotation leaves the image unchanged.
pub fn two_sphere_phantom(grid: Grid) -> Volume3 {
    let c = grid.center();
    let ext = grid.spacing()[0] * grid.dims()[0] as f64;
    let a = c + Vector3::new(-0.12, -0.05, 0.02) * ext;
    let b = c + Vector3::new(0.16, 0.1, -0.06) * ext;
    let (ra, rb) = (0.22 * ext, 0.12 * ext);
    Volume3::from_world_fn(grid, move |p| {
        let ramp = 1.0 + 0.3 * (p.z - a.z) / ra;
        let va = 100.0 * ramp * soft_inside((p - a).norm() - ra, 1.0);
        let vb = 80.0 * soft_inside((p - b).norm() - rb, 1.0);
        (va + vb) as f32
    })
}

/// Soft-tissue ball (40 HU) inside a bone shell (1200 HU) in air.
pub fn head_phantom(grid: Grid, tissue_radius: f64, shell_thickness: f64) -> Volume3 {
    let c = grid.center();
    Volume3::from_world_fn(grid, move |p| {
        let d = (p - c).norm();
        if d <= tissue_radius {
            TISSUE_HU
        } else if d <= tissue_radius + shell_thickness {
            BONE_HU
        } else {
            AIR_HU
        }
    })
}

/// Smooth band-limited random texture (sum of cosines), mean 0, amplitude
/// roughly `amplitude`, shortest wavelength `min_wavelength` mm.
pub fn texture(grid: Grid, seed: u64, amplitude: f64, min_wavelength: f64) -> Volume3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms: Vec<(Vector3<f64>, f64, f64)> = (0..16)
        .map(|_| {
            let dir = loop {
                let d = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let n: f64 = d.norm();
                if n > 0.2 && n <= 1.0 {
                    break d / n;
                }
            };
            let wl = rng.gen_range(min_wavelength..min_wavelength * 2.5);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.5..1.0);
            (dir * (std::f64::consts::TAU / wl), phase, amp)
        })
        .collect();
    let norm = amplitude / (terms.len() as f64 / 2.0).sqrt();
    Volume3::from_world_fn(grid, move |p| {
        let s: f64 = terms.iter().map(|(k, ph, a)| a * (k.dot(&p) + ph).cos()).sum();
        (s * norm) as f32
    })
}

/// Textured soft-tissue body: HU in roughly [0, 100] inside a ball, air
/// outside. Gives demons a gradient everywhere inside.
pub fn textured_phantom(grid: Grid, seed: u64) -> Volume3 {
    let c = grid.center();
    let ext = grid.spacing()[0] * grid.dims()[0] as f64;
    let radius = 0.4 * ext;
    let tex = texture(grid.clone(), seed, 25.0, 10.0);
    let data = tex
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &t)| {
            let [i, j, k] = grid.coords(idx);
            let p = grid.voxel_to_world([i as f64, j as f64, k as f64]);
            let w = soft_inside((p - c).norm() - radius, 1.5);
            (w * (50.0 + t as f64) + (1.0 - w) * AIR_HU as f64) as f32
        })
        .collect();
    Volume3::new(grid, data).expect("grid length")
}

/// Head phantom with textured soft tissue inside a bone shell. The tissue
/// is an ellipsoid with semi-axes `tissue_radius × (1, 0.85, 0.9)` and holds
/// a dark and a bright inclusion off the symmetry planes, so its orientation
/// is recoverable. Tissue values stay inside the default strip window.
pub fn textured_head(grid: Grid, seed: u64, tissue_radius: f64, shell_thickness: f64) -> Volume3 {
    let c = grid.center();
    let radii = Vector3::new(1.0, 0.85, 0.9) * tissue_radius;
    let shell = 1.0 + shell_thickness / tissue_radius;
    let dark = (c + Vector3::new(0.35, 0.2, 0.15) * tissue_radius, 0.3 * tissue_radius);
    let bright = (c + Vector3::new(-0.3, -0.25, 0.35) * tissue_radius, 0.22 * tissue_radius);
    let tex = texture(grid.clone(), seed, 12.0, 8.0);
    let data = tex
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &t)| {
            let [i, j, k] = grid.coords(idx);
            let p = grid.voxel_to_world([i as f64, j as f64, k as f64]);
            let rho = (p - c).component_div(&radii).norm();
            if rho <= 1.0 {
                let mut base = 50.0;
                base -= 30.0 * soft_inside((p - dark.0).norm() - dark.1, 1.0);
                base += 30.0 * soft_inside((p - bright.0).norm() - bright.1, 1.0);
                (base + t as f64).clamp(5.0, 95.0) as f32
            } else if rho <= shell {
                BONE_HU
            } else {
                AIR_HU
            }
        })
        .collect();
    Volume3::new(grid, data).expect("grid length")
}

/// Multiplicative bias `1 + (peak - 1)·exp(-|x-c|²/2σ²)`.
pub fn bias_bump(grid: Grid, center: Vector3<f64>, peak: f64, sigma_mm: f64) -> Volume3 {
    Volume3::from_world_fn(grid, move |p| {
        (1.0 + (peak - 1.0) * (-(p - center).norm_squared() / (2.0 * sigma_mm * sigma_mm)).exp()) as f32
    })
}

/// Velocity `amplitude · exp(-|x-c|²/2σ²)`.
pub fn gaussian_bump_velocity(grid: Grid, center: Vector3<f64>, sigma_mm: f64, amplitude: Vector3<f64>) -> VectorField {
    VectorField::from_world_fn(grid, move |p| amplitude * (-(p - center).norm_squared() / (2.0 * sigma_mm * sigma_mm)).exp())
}

/// Labelled balls; later balls overwrite earlier ones where they overlap.
pub fn ball_atlas(grid: Grid, balls: &[(Vector3<f64>, f64)]) -> LabelVolume {
    let mut data = vec![0u32; grid.len()];
    for (idx, d) in data.iter_mut().enumerate() {
        let [i, j, k] = grid.coords(idx);
        let p = grid.voxel_to_world([i as f64, j as f64, k as f64]);
        for (n, (c, r)) in balls.iter().enumerate() {
            if (p - c).norm() <= *r {
                *d = n as u32 + 1;
            }
        }
    }
    let table = (1..=balls.len() as u32).map(|l| (l, format!("ball_{l}"))).collect();
    LabelVolume::new(grid, data).expect("grid length").with_table(table)
}

/// Five disjoint balls of radius `radius` mm around the grid centre.
pub fn five_ball_atlas(grid: Grid, radius: f64) -> LabelVolume {
    let c = grid.center();
    let o = 1.15 * radius;
    let balls = [
        (c + Vector3::new(-o, -o, 0.0), radius),
        (c + Vector3::new(o, -o, 0.0), radius),
        (c + Vector3::new(-o, o, 0.0), radius),
        (c + Vector3::new(o, o, 0.0), radius),
        (c + Vector3::new(0.0, 0.0, 1.6 * o), radius),
    ];
    ball_atlas(grid, &balls)
}

/// `n` Voronoi parcels of the ball of radius `radius` mm around the grid
/// centre; every parcel gets at least its seed voxel.
pub fn parcel_atlas(grid: Grid, n: usize, radius: f64, seed: u64) -> LabelVolume {
    let c = grid.center();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inside: Vec<usize> = (0..grid.len())
        .filter(|&idx| {
            let [i, j, k] = grid.coords(idx);
            (grid.voxel_to_world([i as f64, j as f64, k as f64]) - c).norm() <= radius
        })
        .collect();
    assert!(inside.len() >= n, "ball too small for {n} parcels");
    let mut seeds: Vec<usize> = Vec::with_capacity(n);
    while seeds.len() < n {
        let s = inside[rng.gen_range(0..inside.len())];
        if !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    let centers: Vec<Vector3<f64>> = seeds
        .iter()
        .map(|&s| {
            let [i, j, k] = grid.coords(s);
            grid.voxel_to_world([i as f64, j as f64, k as f64])
        })
        .collect();
    let mut data = vec![0u32; grid.len()];
    for &idx in &inside {
        let [i, j, k] = grid.coords(idx);
        let p = grid.voxel_to_world([i as f64, j as f64, k as f64]);
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (l, q) in centers.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < bd {
                bd = d;
                best = l;
            }
        }
        data[idx] = best as u32 + 1;
    }
    let table: LabelTable = (1..=n as u32).map(|l| (l, format!("parcel_{l:03}"))).collect();
    LabelVolume::new(grid, data).expect("grid length").with_table(table)
}

/// Layout of a synthetic multi-subject study written by [`write_study`].
#[derive(Debug, Clone)]
pub struct StudySpec {
    /// Template grid is `n³` at `spacing` mm.
    pub n: usize,
    pub spacing: f64,
    pub n_labels: usize,
    pub subjects: usize,
    /// Every second subject is written as a DICOM series.
    pub dicom_subjects: bool,
    pub seed: u64,
    /// Overrides the registration iteration schedule in the config.
    pub register_iters: Option<Vec<usize>>,
    pub parallel_subjects: usize,
}

impl Default for StudySpec {
    fn default() -> Self {
        StudySpec {
            n: 64,
            spacing: 1.0,
            n_labels: 5,
            subjects: 1,
            dicom_subjects: false,
            seed: 7,
            register_iters: None,
            parallel_subjects: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyPaths {
    pub config: PathBuf,
    pub template: PathBuf,
    pub atlas: PathBuf,
    pub labels: PathBuf,
    pub output_root: PathBuf,
    pub subject_ids: Vec<String>,
}

/// Ground-truth map from subject `i`'s world frame to template world, for a
/// study written with `spec`.
pub fn study_subject_map(spec: &StudySpec, i: usize) -> Result<TransformChain> {
    let grid = Grid::centered([spec.n; 3], [spec.spacing; 3])?;
    Ok(subject_chain(&grid, i, spec.seed))
}

/// Per-subject pose and deformation relative to the template anatomy.
fn subject_chain(grid: &Grid, i: usize, seed: u64) -> TransformChain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(i as u64));
    let ext = grid.spacing()[0] * grid.dims()[0] as f64;
    let mut p = AffineParams::identity([0.0; 3]);
    p.rotation = [rng.gen_range(-0.06..0.06), rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04)];
    p.translation = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0)];
    let pose = p.to_transform().expect("rigid pose");
    let c = grid.center() + Vector3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), 0.0) * ext;
    let amp = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize() * 1.5;
    let v = gaussian_bump_velocity(grid.clone(), c, 0.12 * ext, amp);
    let (u, _) = exp_velocity(&v, Direction::Forward, 0);
    TransformChain::affine(pose, "subject", "anatomy")
        .then(TransformChain::displacement(u, "anatomy", "template"))
        .expect("chain spaces")
}

/// Writes template, atlas, label table, subjects and `config.toml` under
/// `dir`. The template is the phantom head itself; subjects are the same
/// anatomy posed and deformed differently, on anisotropic grids with
/// flipped axes.
pub fn write_study(dir: &Path, spec: &StudySpec) -> Result<StudyPaths> {
    std::fs::create_dir_all(dir)?;
    let grid = Grid::centered([spec.n; 3], [spec.spacing; 3])?;
    let ext = spec.spacing * spec.n as f64;
    let (r, shell) = (0.3 * ext, 0.05 * ext);
    let head = textured_head(grid.clone(), spec.seed, r, shell);
    let atlas = parcel_atlas(grid.clone(), spec.n_labels, 0.8 * r, spec.seed);

    let paths = StudyPaths {
        config: dir.join("config.toml"),
        template: dir.join("template.nii.gz"),
        atlas: dir.join("atlas.nii.gz"),
        labels: dir.join("labels.tsv"),
        output_root: dir.join("out"),
        subject_ids: (0..spec.subjects).map(|i| format!("sub-{:02}", i + 1)).collect(),
    };
    write_nifti(&head, &paths.template, Datatype::Float32)?;
    let dt = if spec.n_labels < 256 { Datatype::Uint8 } else { Datatype::Int16 };
    write_labels(&atlas, &paths.atlas, dt)?;
    std::fs::write(&paths.labels, format_label_table(atlas.table()))?;

    let mut cfg = String::new();
    cfg.push_str("template_path = \"template.nii.gz\"\natlas_path = \"atlas.nii.gz\"\n");
    cfg.push_str("label_table_path = \"labels.tsv\"\noutput_root = \"out\"\n");
    cfg.push_str(&format!("parallel_subjects = {}\n", spec.parallel_subjects));
    if let Some(iters) = &spec.register_iters {
        let list: Vec<String> = iters.iter().map(|i| i.to_string()).collect();
        cfg.push_str(&format!("\n[register]\nlevels = {}\niters_per_level = [{}]\n", iters.len(), list.join(", ")));
    }
    let air = SampleMode::new(Interpolation::Trilinear, OutOfBounds::Constant(AIR_HU));
    let nz = (spec.n * 2).div_ceil(3);
    for (i, id) in paths.subject_ids.iter().enumerate() {
        let dicom = spec.dicom_subjects && i % 2 == 1;
        let sz = 1.5 * spec.spacing;
        let mut m = Matrix4::identity();
        m[(0, 0)] = -spec.spacing;
        m[(1, 1)] = if dicom { -spec.spacing } else { spec.spacing };
        m[(2, 2)] = sz;
        let half = |n: usize, s: f64| 0.5 * (n as f64 - 1.0) * s;
        m[(0, 3)] = half(spec.n, spec.spacing);
        m[(1, 3)] = if dicom { half(spec.n, spec.spacing) } else { -half(spec.n, spec.spacing) };
        m[(2, 3)] = -half(nz, sz);
        let sg = Grid::new([spec.n, spec.n, nz], m)?;
        let subject = apply_transform(&head, &subject_chain(&grid, i, spec.seed), &sg, air);
        cfg.push_str(&format!("\n[[subjects]]\nid = \"{id}\"\n"));
        if dicom {
            let rounded = subject.map(f32::round);
            write_series(&rounded, &dir.join(id), &format!("1.2.826.0.1.3680043.9.{}", i + 1), 1.0, 0.0)?;
            cfg.push_str(&format!("input = \"{id}\"\nkind = \"dicom-dir\"\n"));
        } else {
            write_nifti(&subject, &dir.join(format!("{id}.nii.gz")), Datatype::Float32)?;
            cfg.push_str(&format!("input = \"{id}.nii.gz\"\nkind = \"nifti\"\n"));
        }
    }
    std::fs::write(&paths.config, cfg)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parcels_are_all_present() {
        let g = Grid::centered([24, 24, 24], [1.0; 3]).unwrap();
        let a = parcel_atlas(g, 30, 10.0, 3);
        assert_eq!(a.labels(), (1..=30).collect::<Vec<u32>>());
    }

    #[test]
    fn head_phantom_values() {
        let g = Grid::centered([21, 21, 21], [1.0; 3]).unwrap();
        let h = head_phantom(g, 5.0, 2.0);
        assert_eq!(h.get(10, 10, 10), TISSUE_HU);
        assert_eq!(h.get(16, 10, 10), BONE_HU);
        assert_eq!(h.get(0, 0, 0), AIR_HU);
    }

    #[test]
    fn texture_is_deterministic() {
        let g = Grid::centered([8, 8, 8], [1.0; 3]).unwrap();
        assert_eq!(texture(g.clone(), 7, 10.0, 6.0), texture(g, 7, 10.0, 6.0));
    }
}
