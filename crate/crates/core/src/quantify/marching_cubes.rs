//! Marching-cubes isosurface area.
//!
//! The per-case polygon table is generated rather than transcribed. On each
//! cube face the crossed edges are joined into segments; a face with two
//! diagonally opposite inside corners is ambiguous, and by convention each
//! inside corner is cut off separately (inside corners never connect across
//! a face, matching 6-connectivity of the foreground). Neighbouring cells
//! see the same face with the same corner states and therefore the same
//! segments, so the surface is closed. Segments are chained into loops and
//! each loop is fan-triangulated.

use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};

/// Corner `c` sits at `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
fn corner(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The 12 cube edges as corner pairs `(lo, hi)`, `hi = lo | axis bit`.
fn edges() -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(12);
    for axis in 0..3 {
        let bit = 1 << axis;
        for c in 0..8 {
            if c & bit == 0 {
                out.push((c, c | bit));
            }
        }
    }
    out
}

fn edge_id(table: &[(usize, usize)], a: usize, b: usize) -> usize {
    let key = (a.min(b), a.max(b));
    table.iter().position(|&e| e == key).expect("cube edge")
}

/// Corner cycles of the six faces.
fn faces() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(6);
    for axis in 0..3 {
        let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let base = side << axis;
            out.push([base, base | 1 << b, base | 1 << b | 1 << c, base | 1 << c]);
        }
    }
    out
}

/// Loops of edge ids for one inside/outside corner configuration.
fn case_loops(case: usize, edge_table: &[(usize, usize)], face_table: &[[usize; 4]]) -> Vec<Vec<usize>> {
    let inside = |c: usize| case >> c & 1 == 1;
    let mut segments: Vec<(usize, usize)> = Vec::new();
    for f in face_table {
        let crossed: Vec<usize> = (0..4)
            .filter(|&t| inside(f[t]) != inside(f[(t + 1) % 4]))
            .collect();
        match crossed.len() {
            0 => {}
            2 => {
                let e = |t: usize| edge_id(edge_table, f[t], f[(t + 1) % 4]);
                segments.push((e(crossed[0]), e(crossed[1])));
            }
            4 => {
                // separate every inside corner: join the two face edges meeting at it
                for t in 0..4 {
                    if inside(f[t]) {
                        let prev = edge_id(edge_table, f[(t + 3) % 4], f[t]);
                        let next = edge_id(edge_table, f[t], f[(t + 1) % 4]);
                        segments.push((prev, next));
                    }
                }
            }
            _ => unreachable!("a face cycle crosses an even number of edges"),
        }
    }
    let mut loops = Vec::new();
    let mut used = vec![false; segments.len()];
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (first, mut cur) = segments[start];
        let mut lp = vec![first];
        while cur != first {
            lp.push(cur);
            let next = (0..segments.len())
                .find(|&s| !used[s] && (segments[s].0 == cur || segments[s].1 == cur))
                .expect("closed loop");
            used[next] = true;
            cur = if segments[next].0 == cur { segments[next].1 } else { segments[next].0 };
        }
        loops.push(lp);
    }
    loops
}

struct Tables {
    edges: Vec<(usize, usize)>,
    cases: Vec<Vec<Vec<usize>>>,
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let e = edges();
        let f = faces();
        let cases = (0..256).map(|c| case_loops(c, &e, &f)).collect();
        Tables { edges: e, cases }
    })
}

fn polygon_area(pts: &[Vector3<f64>]) -> f64 {
    let mut a = 0.0;
    for t in 1..pts.len() - 1 {
        a += 0.5 * (pts[t] - pts[0]).cross(&(pts[t + 1] - pts[0])).norm();
    }
    a
}

/// Area of the `level` isosurface of a scalar buffer (x-fastest, `dims`),
/// over all cells of the buffer. Vertices are placed by linear
/// interpolation along cell edges in voxel coordinates, then mapped to world
/// by `linear`. Callers pad the buffer with outside values so that surfaces
/// close.
pub fn isosurface_area(values: &[f32], dims: [usize; 3], level: f32, linear: &Matrix3<f64>) -> f64 {
    let t = tables();
    let [nx, ny, nz] = dims;
    let mut area = 0.0;
    let mut pts = Vec::with_capacity(12);
    let mut v = [0.0f32; 8];
    for k in 0..nz.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            for i in 0..nx.saturating_sub(1) {
                let mut case = 0usize;
                for (c, vc) in v.iter_mut().enumerate() {
                    let o = corner(c);
                    *vc = values[i + o[0] + nx * (j + o[1] + ny * (k + o[2]))];
                    if *vc >= level {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                for lp in &t.cases[case] {
                    pts.clear();
                    for &e in lp {
                        let (a, b) = t.edges[e];
                        let s = ((level - v[a]) / (v[b] - v[a])) as f64;
                        let (pa, pb) = (corner(a), corner(b));
                        let p = Vector3::new(
                            i as f64 + pa[0] as f64 + s * (pb[0] as f64 - pa[0] as f64),
                            j as f64 + pa[1] as f64 + s * (pb[1] as f64 - pa[1] as f64),
                            k as f64 + pa[2] as f64 + s * (pb[2] as f64 - pa[2] as f64),
                        );
                        pts.push(linear * p);
                    }
                    area += polygon_area(&pts);
                }
            }
        }
    }
    area
}
