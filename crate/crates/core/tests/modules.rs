mod common;

use ctatlas::affine::AffineTransform;
use ctatlas::bonestrip::threshold_mask;
use ctatlas::preprocess::{correct_bias, prealign, PreprocessParams};
use ctatlas::quantify::{geo_measures, jacobian_determinant, Space};
use ctatlas::register::*;
use ctatlas::segment::{segment_normalized, segment_physical};
use ctatlas::synth;
use ctatlas::*;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cube(n: usize, spacing: f64) -> Grid {
    Grid::centered([n, n, n], [spacing; 3]).unwrap()
}

fn air_fill() -> SampleMode {
    SampleMode::new(Interpolation::Trilinear, OutOfBounds::Constant(synth::AIR_HU))
}

fn warp(vol: &Volume3, t: AffineTransform) -> Volume3 {
    apply_transform(vol, &TransformChain::affine(t, "x", "y"), vol.grid(), air_fill())
}

fn masked_cv(v: &Volume3, mask: &LabelVolume) -> f64 {
    let xs: Vec<f64> = v.data().iter().zip(mask.data()).filter(|(_, &m)| m != 0).map(|(&x, _)| x as f64).collect();
    let m = common::mean(&xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    var.sqrt() / m
}

#[test]
fn bias_correction_halves_tissue_variation() {
    let g = cube(96, 2.0);
    let head = synth::head_phantom(g.clone(), 70.0, 6.0);
    let bump = synth::bias_bump(g.clone(), g.center() + Vector3::new(40.0, 0.0, 0.0), 1.3, 60.0);
    let biased: Vec<f32> = head
        .data()
        .iter()
        .zip(bump.data())
        .map(|(&v, &b)| if v == synth::TISSUE_HU { v * b } else { v })
        .collect();
    let biased = head.with_data(biased).unwrap();
    let mask = threshold_mask(&biased, 0.0, 100.0).unwrap();
    let out = correct_bias(&biased, &mask, &PreprocessParams::default()).unwrap();
    let (before, after) = (masked_cv(&biased, &mask), masked_cv(&out.corrected, &mask));
    assert!(before > 0.05, "phantom bias too weak: cv {before}");
    assert!(after <= 0.5 * before, "cv {before} -> {after}");
}

fn prealign_template() -> Volume3 {
    synth::textured_head(cube(64, 1.5), 11, 30.0, 4.0)
}

#[test]
fn prealign_of_template_to_itself_is_identity() {
    let t = prealign_template();
    let p = prealign(&t, &t, &PreprocessParams::default()).unwrap();
    let m = p.transform.matrix();
    let lin = p.transform.linear() - Matrix3::identity();
    assert!(lin.amax() < 1e-2, "{m}");
    assert!(p.transform.translation_part().amax() < 1e-2, "{m}");
}

#[test]
fn prealign_recovers_a_7mm_shift() {
    let t = prealign_template();
    let subject = warp(&t, AffineTransform::translation([-7.0, 0.0, 0.0]));
    let p = prealign(&subject, &t, &PreprocessParams::default()).unwrap();
    let probe = t.grid().center() + Vector3::new(7.0, 0.0, 0.0);
    let moved = p.transform.apply(&probe) - probe;
    assert!((moved - Vector3::new(-7.0, 0.0, 0.0)).norm() < 0.5, "{moved}");
}

#[test]
fn prealign_recovers_isotropic_scale() {
    let t = prealign_template();
    let c = t.grid().center();
    let shrink = AffineParams { scale: [1.0 / 1.1; 3], ..AffineParams::identity(c.into()) };
    let subject = warp(&t, shrink.to_transform().unwrap());
    let p = prealign(&subject, &t, &PreprocessParams::default()).unwrap();
    let to_subject = p.transform.inverse().linear();
    for a in 0..3 {
        let s = to_subject.column(a).norm();
        assert!((s - 1.1).abs() < 0.02, "axis {a}: {s}");
    }
}

#[test]
fn rigid_fit_cannot_absorb_scale() {
    let fixed = synth::two_sphere_phantom(cube(40, 2.0));
    let c = fixed.grid().center();
    let scale = AffineParams { scale: [1.0 / 1.1; 3], ..AffineParams::identity(c.into()) };
    let moving = warp(&fixed, scale.to_transform().unwrap());
    let metric = SimilarityMetric::NormalizedCrossCorrelation;
    let rigid = affine_register(&moving, &fixed, metric, AffineDof::Rigid).unwrap();
    let similar = affine_register(&moving, &fixed, metric, AffineDof::Similarity).unwrap();
    assert_eq!(rigid.params.scale, [1.0; 3]);
    assert!(similar.params.scale.iter().all(|s| (s - 1.1).abs() < 0.02), "{:?}", similar.params.scale);
    assert!(rigid.final_value > similar.final_value, "{} vs {}", rigid.final_value, similar.final_value);
}

#[test]
fn affine_self_registration_is_identity() {
    let fixed = synth::two_sphere_phantom(cube(40, 2.0));
    let r = affine_register(&fixed, &fixed, SimilarityMetric::MutualInformation, AffineDof::Full).unwrap();
    let p = &r.params;
    for (class, vals) in [("translation", p.translation), ("rotation", p.rotation), ("shear", p.shear)] {
        assert!(vals.iter().all(|v| v.abs() < 1e-2), "{class}: {vals:?}");
    }
    assert!(p.scale.iter().all(|s| (s - 1.0).abs() < 1e-2), "{:?}", p.scale);
}

fn smooth_velocity(g: Grid, seed: u64, amp: f64) -> VectorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = g.center();
    let centers: Vec<(Vector3<f64>, Vector3<f64>)> = (0..3)
        .map(|_| {
            let off = Vector3::new(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0));
            let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            (c + off, dir.normalize() * amp)
        })
        .collect();
    VectorField::from_world_fn(g, move |p| {
        centers.iter().map(|(q, a)| a * (-(p - q).norm_squared() / (2.0 * 36.0)).exp()).sum::<Vector3<f64>>() / 3.0
    })
}

#[test]
fn small_velocity_round_trip_is_sub_tenth_voxel() {
    for seed in 0..4 {
        let (u, _) = exp_velocity(&smooth_velocity(cube(32, 1.0), seed, 1.5), Direction::Forward, 0);
        let v = smooth_velocity(cube(32, 1.0), seed, 1.5).scaled(-1.0);
        let (w, _) = exp_velocity(&v, Direction::Forward, 0);
        let err = common::max_round_trip(&u, &w);
        assert!(err < 0.1, "seed {seed}: {err}");
    }
}

#[test]
fn forward_then_inverse_restores_a_smooth_image() {
    let g = cube(40, 1.0);
    let img = synth::sphere(g.clone(), g.center(), 10.0, 3.0);
    let d = Diffeomorphism::from_velocity(smooth_velocity(g.clone(), 3, 3.0), 0);
    let there = apply_transform(&img, &TransformChain::displacement(d.forward.clone(), "a", "b"), &g, SampleMode::TRILINEAR_CLAMP);
    let back = apply_transform(&there, &TransformChain::displacement(d.inverse.clone(), "b", "a"), &g, SampleMode::TRILINEAR_CLAMP);
    let peak = img.min_max().1.abs().max(img.min_max().0.abs()) as f64;
    let mut worst = 0.0f64;
    for idx in 0..g.len() {
        let [i, j, k] = g.coords(idx);
        if g.is_interior(i, j, k) {
            worst = worst.max((back.data()[idx] - img.data()[idx]).abs() as f64);
        }
    }
    assert!(worst <= 0.02 * peak, "max error {worst} of {peak}");
}

fn half_space_atlas(g: Grid) -> LabelVolume {
    let data = (0..g.len())
        .map(|idx| {
            let [i, j, k] = g.coords(idx);
            if g.voxel_to_world([i as f64, j as f64, k as f64]).x < 0.0 { 1 } else { 2 }
        })
        .collect();
    LabelVolume::new(g, data).unwrap()
}

fn constant_map(g: &Grid, shift: Vector3<f64>) -> Diffeomorphism {
    let f = VectorField::from_world_fn(g.clone(), move |_| -shift);
    let b = VectorField::from_world_fn(g.clone(), move |_| shift);
    Diffeomorphism::from_fields(f, b).unwrap()
}

#[test]
fn constant_shift_moves_label_plane_backwards() {
    let g = Grid::with_spacing([20, 6, 6], [1.0; 3], [-9.5, 0.0, 0.0]).unwrap();
    let atlas = half_space_atlas(g.clone());
    let out = segment_normalized(&atlas, &constant_map(&g, Vector3::new(3.0, 0.0, 0.0))).unwrap();
    for idx in 0..g.len() {
        let [i, j, k] = g.coords(idx);
        let x = g.voxel_to_world([i as f64, j as f64, k as f64]).x;
        let want = if x + 3.0 > 9.5 { 0 } else if x < -3.0 { 1 } else { 2 };
        assert_eq!(out.get(i, j, k), want, "x = {x}");
    }
}

#[test]
fn single_label_atlas_fills_everything_in_bounds() {
    let g = cube(12, 2.0);
    let atlas = LabelVolume::new(g.clone(), vec![9; g.len()]).unwrap();
    let id = segment_normalized(&atlas, &Diffeomorphism::identity(g.clone())).unwrap();
    assert!(id.data().iter().all(|&l| l == 9));
    let shifted = segment_normalized(&atlas, &constant_map(&g, Vector3::new(0.0, 4.0, 0.0))).unwrap();
    for idx in 0..g.len() {
        let [i, j, k] = g.coords(idx);
        let inside = (j as f64) + 2.0 <= 11.0;
        assert_eq!(shifted.get(i, j, k), if inside { 9 } else { 0 });
    }
}

#[test]
fn translated_prealign_matches_direct_formula() {
    let template = cube(24, 1.0);
    let labels = synth::five_ball_atlas(template.clone(), 4.0);
    let native = Grid::with_spacing([20, 22, 18], [1.2, 1.0, 1.1], [-10.3, -12.1, -8.65]).unwrap();
    let t = AffineTransform::translation([10.0, 0.0, 0.0]);
    let out = segment_physical(&labels, &t, &native).unwrap();
    let dims = template.dims();
    for idx in 0..native.len() {
        let [i, j, k] = native.coords(idx);
        let q = native.voxel_to_world([i as f64, j as f64, k as f64]) + Vector3::new(10.0, 0.0, 0.0);
        let c = template.world_to_voxel(&q).map(|x| x.round());
        let want = if (0..3).all(|a| c[a] >= 0.0 && c[a] <= (dims[a] - 1) as f64) {
            labels.get(c[0] as usize, c[1] as usize, c[2] as usize)
        } else {
            0
        };
        assert_eq!(out.get(i, j, k), want);
    }
}

#[test]
fn coarse_native_grid_keeps_region_volume() {
    let template = cube(64, 1.0);
    let labels = synth::ball_atlas(template.clone(), &[(template.center(), 20.0)]);
    let native = cube(32, 2.0);
    let out = segment_physical(&labels, &AffineTransform::identity(), &native).unwrap();
    assert!(out.labels().iter().all(|l| labels.labels().contains(l)));
    let table = LabelTable::new();
    let fine = geo_measures(&labels, &table, Space::Normalized);
    let coarse = geo_measures(&out, &table, Space::Physical);
    for (a, b) in fine.iter().zip(&coarse) {
        assert_eq!(a.label, b.label);
        let rel = (b.volume_mm3 - a.volume_mm3).abs() / a.volume_mm3;
        assert!(rel < 0.15, "label {}: {} vs {}", a.label, a.volume_mm3, b.volume_mm3);
    }
}

#[test]
fn jacobian_agrees_with_forward_differences() {
    let g = cube(32, 1.0);
    let u = smooth_velocity(g.clone(), 5, 2.0);
    let jac = jacobian_determinant(&u);
    let [nx, ny, nz] = g.dims();
    let mut checked = 0;
    for k in 1..nz - 1 {
        for j in 1..ny - 1 {
            for i in 1..nx - 1 {
                let base = u.at(i, j, k);
                let du = Matrix3::from_columns(&[
                    u.at(i + 1, j, k) - base,
                    u.at(i, j + 1, k) - base,
                    u.at(i, j, k + 1) - base,
                ]);
                let want = (Matrix3::identity() + du).determinant();
                let got = jac.get(i, j, k) as f64;
                assert!((got - want).abs() <= 0.05 * want.abs(), "({i},{j},{k}): {got} vs {want}");
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

/// Separable Gaussian sum over the voxel centres of a `side`³ cube centred at
/// the origin, and its gradient.
fn smoothed_cube(p: &Vector3<f64>, side: usize, sigma: f64) -> (f64, Vector3<f64>) {
    let half = side as f64 / 2.0;
    let axis = |x: f64| {
        let (mut v, mut dv) = (0.0, 0.0);
        for n in 0..side {
            let c = -half + 0.5 + n as f64;
            let g = (-(x - c) * (x - c) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            v += g;
            dv += -(x - c) / (sigma * sigma) * g;
        }
        (v, dv)
    };
    let (fx, gx) = axis(p.x);
    let (fy, gy) = axis(p.y);
    let (fz, gz) = axis(p.z);
    (fx * fy * fz, Vector3::new(gx * fy * fz, fx * gy * fz, fx * fy * gz))
}

/// Area of the star-shaped level set `f = level` by integrating
/// `r² dΩ / (d·n)` over directions.
fn star_surface_area(f: impl Fn(&Vector3<f64>) -> (f64, Vector3<f64>), level: f64, r_max: f64) -> f64 {
    let (nt, np) = (240, 480);
    let (dt, dp) = (std::f64::consts::PI / nt as f64, 2.0 * std::f64::consts::PI / np as f64);
    let mut area = 0.0;
    for a in 0..nt {
        let theta = (a as f64 + 0.5) * dt;
        for b in 0..np {
            let phi = (b as f64 + 0.5) * dp;
            let d = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            let (mut lo, mut hi) = (0.0, r_max);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if f(&(d * mid)).0 > level { lo = mid } else { hi = mid }
            }
            let r = 0.5 * (lo + hi);
            let n = -f(&(d * r)).1.normalize();
            area += r * r * theta.sin() * dt * dp / d.dot(&n);
        }
    }
    area
}

#[test]
fn cube_label_volume_and_area() {
    let g = Grid::with_spacing([16, 16, 16], [1.0; 3], [-7.5; 3]).unwrap();
    let data = (0..g.len())
        .map(|idx| {
            let c = g.coords(idx);
            u32::from(c.iter().all(|&x| (3..13).contains(&x)))
        })
        .collect();
    let labels = LabelVolume::new(g, data).unwrap();
    let rows = geo_measures(&labels, &LabelTable::new(), Space::Physical);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].volume_mm3, 1000.0);
    let sigma = ctatlas::quantify::SURFACE_SMOOTH_SIGMA;
    let want = star_surface_area(|p| smoothed_cube(p, 10, sigma), 0.5, 12.0);
    let got = rows[0].surface_area_mm2;
    assert!((got - want).abs() < 0.02 * want, "area {got} vs level-set oracle {want}");
}

#[test]
fn empty_labels_have_no_rows() {
    let labels = LabelVolume::empty(cube(8, 1.0));
    assert!(geo_measures(&labels, &LabelTable::new(), Space::Physical).is_empty());
}
