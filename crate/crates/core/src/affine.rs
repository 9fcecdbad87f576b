//! World-to-world affine transforms and their plain-text persistence.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3, Vector4};

use crate::error::{Error, Result};

/// Invertible homogeneous 4x4 map between two world spaces (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    matrix: Matrix4<f64>,
    inverse: Matrix4<f64>,
}

impl AffineTransform {
    pub fn new(matrix: Matrix4<f64>) -> Result<Self> {
        let bottom = [matrix[(3, 0)], matrix[(3, 1)], matrix[(3, 2)], matrix[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid(format!("affine bottom row must be (0,0,0,1), got {bottom:?}")));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("affine contains non-finite entries"));
        }
        let lin: Matrix3<f64> = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        if lin.determinant().abs() < 1e-12 {
            return Err(Error::invalid("affine is singular"));
        }
        let mut inverse = matrix
            .try_inverse()
            .ok_or_else(|| Error::invalid("affine is singular"))?;
        inverse.set_row(3, &nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0));
        Ok(AffineTransform { matrix, inverse })
    }

    pub fn identity() -> Self {
        AffineTransform { matrix: Matrix4::identity(), inverse: Matrix4::identity() }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut m = Matrix4::identity();
        for a in 0..3 {
            m[(a, 3)] = t[a];
        }
        AffineTransform::new(m).expect("translation is invertible")
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_part(&self) -> Vector3<f64> {
        Vector3::new(self.matrix[(0, 3)], self.matrix[(1, 3)], self.matrix[(2, 3)])
    }

    pub fn inverse(&self) -> AffineTransform {
        AffineTransform { matrix: self.inverse, inverse: self.matrix }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        AffineTransform::new(self.matrix * other.matrix).expect("product of invertible maps")
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (self.matrix * Vector4::new(p.x, p.y, p.z, 1.0)).xyz()
    }

    /// Largest absolute entry of `M · M⁻¹ − I`.
    pub fn inverse_residual(&self) -> f64 {
        (self.matrix * self.inverse - Matrix4::identity()).amax()
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        (self.matrix - Matrix4::identity()).amax() <= tol
    }

    /// Writes the matrix row-major, preceded by a one-line header naming
    /// the source and target spaces.
    pub fn to_text(&self, source: &str, target: &str) -> String {
        let mut s = format!("# affine {source} -> {target} (world mm, row-major 4x4)\n");
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|c| format!("{:.17e}", self.matrix[(r, c)])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    /// Parses the format written by [`AffineTransform::to_text`], returning
    /// the transform and its `(source, target)` space names.
    pub fn from_text(text: &str) -> std::result::Result<(Self, String, String), String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or("empty file")?;
        let rest = header
            .strip_prefix("# affine ")
            .ok_or("missing `# affine <source> -> <target>` header")?;
        let (source, tail) = rest.split_once(" -> ").ok_or("header lacks `->`")?;
        let target = tail.split_whitespace().next().ok_or("header lacks target space")?;
        let mut m = Matrix4::zeros();
        for r in 0..4 {
            let line = lines.next().ok_or_else(|| format!("missing row {r}"))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| format!("row {r}: {e}")))
                .collect::<std::result::Result<_, _>>()?;
            if vals.len() != 4 {
                return Err(format!("row {r} has {} entries, expected 4", vals.len()));
            }
            for (c, v) in vals.into_iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        let t = AffineTransform::new(m).map_err(|e| e.to_string())?;
        Ok((t, source.to_string(), target.to_string()))
    }

    pub fn save(&self, path: &Path, source: &str, target: &str) -> Result<()> {
        fs::write(path, self.to_text(source, target))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, String, String)> {
        let text = fs::read_to_string(path)?;
        AffineTransform::from_text(&text)
            .map_err(|reason| Error::TransformFile { path: path.to_path_buf(), reason })
    }
}

/// Number of free parameters in the affine model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffineDof {
    /// translations + rotations
    Rigid = 6,
    /// rigid + per-axis scale
    Similarity = 9,
    /// rigid + scale + shear
    Full = 12,
}

impl AffineDof {
    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            6 => Ok(AffineDof::Rigid),
            9 => Ok(AffineDof::Similarity),
            12 => Ok(AffineDof::Full),
            _ => Err(Error::invalid(format!("dof must be 6, 9 or 12, got {n}"))),
        }
    }

    pub fn count(self) -> usize {
        self as usize
    }
}

/// Parameterisation `T(x) = C + R(θ)·S·H·(x − C) + t`, rotations as
/// intrinsic ZYX Euler angles (radians), `S` diagonal scale, `H` upper
/// triangular shear (xy, xz, yz).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub center: [f64; 3],
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
    pub scale: [f64; 3],
    pub shear: [f64; 3],
}

impl AffineParams {
    pub fn identity(center: [f64; 3]) -> Self {
        AffineParams {
            center,
            translation: [0.0; 3],
            rotation: [0.0; 3],
            scale: [1.0; 3],
            shear: [0.0; 3],
        }
    }

    /// Parameter vector in optimisation order: translations, rotations,
    /// scales, shears.
    pub fn to_vec(&self) -> [f64; 12] {
        let mut v = [0.0; 12];
        v[0..3].copy_from_slice(&self.translation);
        v[3..6].copy_from_slice(&self.rotation);
        v[6..9].copy_from_slice(&self.scale);
        v[9..12].copy_from_slice(&self.shear);
        v
    }

    pub fn from_vec(center: [f64; 3], v: &[f64; 12]) -> Self {
        AffineParams {
            center,
            translation: [v[0], v[1], v[2]],
            rotation: [v[3], v[4], v[5]],
            scale: [v[6], v[7], v[8]],
            shear: [v[9], v[10], v[11]],
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let [rx, ry, rz] = self.rotation;
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), rz);
        let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), ry);
        let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), rx);
        (rz * ry * rx).into_inner()
    }

    pub fn linear(&self) -> Matrix3<f64> {
        let s = Matrix3::from_diagonal(&Vector3::from(self.scale));
        let [hxy, hxz, hyz] = self.shear;
        let h = Matrix3::new(1.0, hxy, hxz, 0.0, 1.0, hyz, 0.0, 0.0, 1.0);
        self.rotation_matrix() * s * h
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let lin = self.linear();
        let c = Vector3::from(self.center);
        let offset = c - lin * c + Vector3::from(self.translation);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&lin);
        for a in 0..3 {
            m[(a, 3)] = offset[a];
        }
        m
    }

    pub fn to_transform(&self) -> Result<AffineTransform> {
        AffineTransform::new(self.to_matrix())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_is_accurate() {
        let p = AffineParams {
            center: [10.0, -5.0, 3.0],
            translation: [4.0, 1.0, -2.0],
            rotation: [0.1, -0.2, 0.3],
            scale: [1.1, 0.9, 1.05],
            shear: [0.02, -0.01, 0.03],
        };
        let t = p.to_transform().unwrap();
        assert!(t.inverse_residual() < 1e-8);
        let x = Vector3::new(1.0, 2.0, 3.0);
        assert!((t.inverse().apply(&t.apply(&x)) - x).norm() < 1e-10);
    }

    #[test]
    fn rejects_bad_bottom_row_and_singular() {
        let mut m = Matrix4::identity();
        m[(3, 0)] = 1.0;
        assert!(AffineTransform::new(m).is_err());
        let mut m = Matrix4::identity();
        m[(1, 1)] = 0.0;
        assert!(AffineTransform::new(m).is_err());
    }

    #[test]
    fn center_is_fixed_point_without_translation() {
        let mut p = AffineParams::identity([5.0, 6.0, 7.0]);
        p.rotation = [0.0, 0.0, 0.5];
        p.scale = [1.2, 1.2, 1.2];
        let t = p.to_transform().unwrap();
        let c = Vector3::new(5.0, 6.0, 7.0);
        assert!((t.apply(&c) - c).norm() < 1e-12);
    }

    #[test]
    fn text_round_trip() {
        let mut p = AffineParams::identity([0.0; 3]);
        p.rotation = [0.3, 0.2, 0.1];
        p.translation = [1.5, -2.25, 1e-7];
        let t = p.to_transform().unwrap();
        let text = t.to_text("subject_world", "template_world");
        assert!(text.starts_with("# affine subject_world -> template_world"));
        let (back, src, dst) = AffineTransform::from_text(&text).unwrap();
        assert_eq!(src, "subject_world");
        assert_eq!(dst, "template_world");
        assert_eq!(back.matrix(), t.matrix());
    }

    #[test]
    fn malformed_text_is_reported() {
        assert!(AffineTransform::from_text("1 0 0 0\n").is_err());
        let bad = "# affine a -> b\n1 0 0 0\n0 1 0 0\n0 0 1\n0 0 0 1\n";
        assert!(AffineTransform::from_text(bad).is_err());
    }
}
