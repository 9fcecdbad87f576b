//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reading and writing.
//!
//! Files are always written little-endian with `sform_code = 1`; the qform
//! is filled in as well when the affine's 3x3 block is a scaled rotation.
//! Big-endian files are recognised by a byte-swapped `sizeof_hdr`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::volume::{Grid, LabelVolume, Volume3};

pub const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
/// NIfTI intent code for vector-valued voxels.
pub const INTENT_VECTOR: i16 = 1007;

#[derive(Debug, Error, PartialEq)]
pub enum NiftiError {
    #[error("nifti: sizeof_hdr is {0}, expected 348")]
    SizeofHdr(i32),
    #[error("nifti: bad magic {0:?}, expected \"n+1\\0\"")]
    Magic([u8; 4]),
    #[error("nifti: unsupported datatype code {0}")]
    Datatype(i16),
    #[error("nifti: bitpix {bitpix} inconsistent with datatype {datatype}")]
    Bitpix { datatype: i16, bitpix: i16 },
    #[error("nifti: dim[0] is {0}, expected 3")]
    Dim0(i16),
    #[error("nifti: dim[{index}] is {value}, must be positive")]
    Dim { index: usize, value: i16 },
    #[error("nifti: header truncated ({0} bytes)")]
    TruncatedHeader(usize),
    #[error("nifti: data section truncated: need {needed} bytes from offset {offset}, file has {available}")]
    TruncatedData { offset: usize, needed: usize, available: usize },
    #[error("nifti: vox_offset {0} is invalid")]
    VoxOffset(f32),
    #[error("nifti: label file has intensity scaling (scl_slope={slope}, scl_inter={inter})")]
    LabelScaling { slope: f32, inter: f32 },
    #[error("nifti: label value {0} is not a non-negative integer")]
    LabelValue(f64),
    #[error("nifti: value {value} at voxel {index} is not representable as {datatype:?}")]
    Range { value: f64, index: usize, datatype: Datatype },
    #[error("nifti: not a 3-component vector field (dim = {0:?})")]
    NotVectorField([i16; 8]),
    #[error("nifti: invalid geometry: {0}")]
    Geometry(String),
}

/// On-disk voxel types supported by this reader/writer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Int32 => 8,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> std::result::Result<Self, NiftiError> {
        Ok(match code {
            2 => Datatype::Uint8,
            4 => Datatype::Int16,
            8 => Datatype::Int32,
            16 => Datatype::Float32,
            64 => Datatype::Float64,
            other => return Err(NiftiError::Datatype(other)),
        })
    }

    pub fn bitpix(self) -> i16 {
        match self {
            Datatype::Uint8 => 8,
            Datatype::Int16 => 16,
            Datatype::Int32 | Datatype::Float32 => 32,
            Datatype::Float64 => 64,
        }
    }

    fn bytes(self) -> usize {
        self.bitpix() as usize / 8
    }

    fn is_integer(self) -> bool {
        matches!(self, Datatype::Uint8 | Datatype::Int16 | Datatype::Int32)
    }

    fn range(self) -> (f64, f64) {
        match self {
            Datatype::Uint8 => (0.0, 255.0),
            Datatype::Int16 => (i16::MIN as f64, i16::MAX as f64),
            Datatype::Int32 => (i32::MIN as f64, i32::MAX as f64),
            Datatype::Float32 => (f32::MIN as f64, f32::MAX as f64),
            Datatype::Float64 => (f64::MIN, f64::MAX),
        }
    }
}

/// The NIfTI-1 header fields this crate reads or writes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: [u8; 80],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern_b: f32,
    pub quatern_c: f32,
    pub quatern_d: f32,
    pub qoffset: [f32; 3],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub magic: [u8; 4],
    /// True if the file was stored big-endian.
    pub big_endian: bool,
}

impl Default for NiftiHeader {
    fn default() -> Self {
        NiftiHeader {
            sizeof_hdr: HEADER_SIZE as i32,
            dim: [3, 1, 1, 1, 1, 1, 1, 1],
            intent_code: 0,
            datatype: Datatype::Float32.code(),
            bitpix: 32,
            pixdim: [1.0; 8],
            vox_offset: VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            xyzt_units: 2,
            descrip: [0; 80],
            qform_code: 0,
            sform_code: 0,
            quatern_b: 0.0,
            quatern_c: 0.0,
            quatern_d: 0.0,
            qoffset: [0.0; 3],
            srow_x: [1.0, 0.0, 0.0, 0.0],
            srow_y: [0.0, 1.0, 0.0, 0.0],
            srow_z: [0.0, 0.0, 1.0, 0.0],
            magic: *MAGIC,
            big_endian: false,
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    big: bool,
}

impl Cursor<'_> {
    fn arr<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.buf[off..off + N]);
        if self.big {
            a.reverse();
        }
        a
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.arr(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.arr(off))
    }
    fn f32s<const N: usize>(&self, off: usize) -> [f32; N] {
        std::array::from_fn(|i| self.f32(off + 4 * i))
    }
}

impl NiftiHeader {
    /// Parses the first 348 bytes, detecting byte order from `sizeof_hdr`.
    pub fn parse(bytes: &[u8]) -> std::result::Result<Self, NiftiError> {
        if bytes.len() < HEADER_SIZE {
            return Err(NiftiError::TruncatedHeader(bytes.len()));
        }
        let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
        let big = if le == HEADER_SIZE as i32 {
            false
        } else if be == HEADER_SIZE as i32 {
            true
        } else {
            return Err(NiftiError::SizeofHdr(le));
        };
        let c = Cursor { buf: bytes, big };
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[344..348]);
        if &magic != MAGIC {
            return Err(NiftiError::Magic(magic));
        }
        let mut descrip = [0u8; 80];
        descrip.copy_from_slice(&bytes[148..228]);
        Ok(NiftiHeader {
            sizeof_hdr: HEADER_SIZE as i32,
            dim: std::array::from_fn(|i| c.i16(40 + 2 * i)),
            intent_code: c.i16(68),
            datatype: c.i16(70),
            bitpix: c.i16(72),
            pixdim: c.f32s(76),
            vox_offset: c.f32(108),
            scl_slope: c.f32(112),
            scl_inter: c.f32(116),
            xyzt_units: bytes[123],
            descrip,
            qform_code: c.i16(252),
            sform_code: c.i16(254),
            quatern_b: c.f32(256),
            quatern_c: c.f32(260),
            quatern_d: c.f32(264),
            qoffset: c.f32s(268),
            srow_x: c.f32s(280),
            srow_y: c.f32s(296),
            srow_z: c.f32s(312),
            magic,
            big_endian: big,
        })
    }

    /// Serialises to 348 little-endian bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = vec![0u8; HEADER_SIZE];
        let put = |b: &mut Vec<u8>, off: usize, bytes: &[u8]| b[off..off + bytes.len()].copy_from_slice(bytes);
        put(&mut b, 0, &(HEADER_SIZE as i32).to_le_bytes());
        for (i, d) in self.dim.iter().enumerate() {
            put(&mut b, 40 + 2 * i, &d.to_le_bytes());
        }
        put(&mut b, 68, &self.intent_code.to_le_bytes());
        put(&mut b, 70, &self.datatype.to_le_bytes());
        put(&mut b, 72, &self.bitpix.to_le_bytes());
        for (i, p) in self.pixdim.iter().enumerate() {
            put(&mut b, 76 + 4 * i, &p.to_le_bytes());
        }
        put(&mut b, 108, &self.vox_offset.to_le_bytes());
        put(&mut b, 112, &self.scl_slope.to_le_bytes());
        put(&mut b, 116, &self.scl_inter.to_le_bytes());
        b[123] = self.xyzt_units;
        put(&mut b, 148, &self.descrip);
        put(&mut b, 252, &self.qform_code.to_le_bytes());
        put(&mut b, 254, &self.sform_code.to_le_bytes());
        put(&mut b, 256, &self.quatern_b.to_le_bytes());
        put(&mut b, 260, &self.quatern_c.to_le_bytes());
        put(&mut b, 264, &self.quatern_d.to_le_bytes());
        for (i, q) in self.qoffset.iter().enumerate() {
            put(&mut b, 268 + 4 * i, &q.to_le_bytes());
        }
        for (row, off) in [(&self.srow_x, 280), (&self.srow_y, 296), (&self.srow_z, 312)] {
            for (i, v) in row.iter().enumerate() {
                put(&mut b, off + 4 * i, &v.to_le_bytes());
            }
        }
        put(&mut b, 344, &self.magic);
        b
    }

    pub fn datatype(&self) -> std::result::Result<Datatype, NiftiError> {
        let dt = Datatype::from_code(self.datatype)?;
        if dt.bitpix() != self.bitpix {
            return Err(NiftiError::Bitpix { datatype: self.datatype, bitpix: self.bitpix });
        }
        Ok(dt)
    }

    fn spatial_dims(&self) -> std::result::Result<[usize; 3], NiftiError> {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let v = self.dim[a + 1];
            if v <= 0 {
                return Err(NiftiError::Dim { index: a + 1, value: v });
            }
            dims[a] = v as usize;
        }
        Ok(dims)
    }

    /// Voxel-to-world matrix by sform, then qform, then pixdim precedence.
    pub fn voxel_to_world(&self) -> Matrix4<f64> {
        if self.sform_code > 0 {
            let mut m = Matrix4::identity();
            for (r, row) in [self.srow_x, self.srow_y, self.srow_z].iter().enumerate() {
                for c in 0..4 {
                    m[(r, c)] = row[c] as f64;
                }
            }
            return m;
        }
        let dx = self.pixdim[1].abs().max(f32::MIN_POSITIVE) as f64;
        let dy = self.pixdim[2].abs().max(f32::MIN_POSITIVE) as f64;
        let dz = self.pixdim[3].abs().max(f32::MIN_POSITIVE) as f64;
        let mut m = Matrix4::identity();
        if self.qform_code > 0 {
            let (b, c, d) = (self.quatern_b as f64, self.quatern_c as f64, self.quatern_d as f64);
            let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let q = UnitQuaternion::from_quaternion(Quaternion::new(a, b, c, d));
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let r = q.to_rotation_matrix().into_inner();
            let lin = r * Matrix3::from_diagonal(&Vector3::new(dx, dy, qfac * dz));
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&lin);
            for a in 0..3 {
                m[(a, 3)] = self.qoffset[a] as f64;
            }
        } else {
            m[(0, 0)] = dx;
            m[(1, 1)] = dy;
            m[(2, 2)] = dz;
        }
        m
    }

    fn for_grid(grid: &Grid, datatype: Datatype) -> Self {
        let mut h = NiftiHeader::default();
        let d = grid.dims();
        h.dim = [3, d[0] as i16, d[1] as i16, d[2] as i16, 1, 1, 1, 1];
        h.datatype = datatype.code();
        h.bitpix = datatype.bitpix();
        let sp = grid.spacing();
        h.pixdim = [1.0, sp[0] as f32, sp[1] as f32, sp[2] as f32, 0.0, 0.0, 0.0, 0.0];
        let m = grid.affine();
        let row = |r: usize| [m[(r, 0)] as f32, m[(r, 1)] as f32, m[(r, 2)] as f32, m[(r, 3)] as f32];
        h.srow_x = row(0);
        h.srow_y = row(1);
        h.srow_z = row(2);
        h.sform_code = 1;
        if let Some((q, qfac)) = orthogonal_quaternion(&grid.linear(), sp) {
            h.qform_code = 1;
            h.pixdim[0] = qfac as f32;
            h.quatern_b = q.i as f32;
            h.quatern_c = q.j as f32;
            h.quatern_d = q.k as f32;
            h.qoffset = [m[(0, 3)] as f32, m[(1, 3)] as f32, m[(2, 3)] as f32];
        }
        h
    }
}

/// Quaternion (with non-negative real part) and qfac for a scaled rotation,
/// or `None` when the columns are not mutually orthogonal.
fn orthogonal_quaternion(lin: &Matrix3<f64>, spacing: [f64; 3]) -> Option<(Quaternion<f64>, f64)> {
    let mut r = *lin;
    for c in 0..3 {
        let s = spacing[c];
        r.column_mut(c).iter_mut().for_each(|v| *v /= s);
    }
    if (r.transpose() * r - Matrix3::identity()).amax() > 1e-6 {
        return None;
    }
    let mut qfac = 1.0;
    if r.determinant() < 0.0 {
        qfac = -1.0;
        r.column_mut(2).iter_mut().for_each(|v| *v = -*v);
    }
    let rot = nalgebra::Rotation3::from_matrix_unchecked(r);
    let mut q = *UnitQuaternion::from_rotation_matrix(&rot).quaternion();
    if q.w < 0.0 {
        q = -q;
    }
    Some((q, qfac))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Parsed {
    header: NiftiHeader,
    grid: Grid,
    values: Vec<f64>,
}

fn parse_file(bytes: &[u8], expect_vector: bool) -> Result<Parsed> {
    let header = NiftiHeader::parse(bytes)?;
    if expect_vector {
        if !(header.dim[0] == 5 && header.dim[4] == 1 && header.dim[5] == 3) {
            return Err(NiftiError::NotVectorField(header.dim).into());
        }
    } else if header.dim[0] != 3 {
        return Err(NiftiError::Dim0(header.dim[0]).into());
    }
    let dt = header.datatype()?;
    let dims = header.spatial_dims()?;
    let grid = Grid::new(dims, header.voxel_to_world())
        .map_err(|e| NiftiError::Geometry(e.to_string()))?;
    if !(header.vox_offset >= HEADER_SIZE as f32) || !header.vox_offset.is_finite() {
        return Err(NiftiError::VoxOffset(header.vox_offset).into());
    }
    let offset = header.vox_offset as usize;
    let count = grid.len() * if expect_vector { 3 } else { 1 };
    let needed = count * dt.bytes();
    if bytes.len() < offset + needed {
        return Err(NiftiError::TruncatedData { offset, needed, available: bytes.len() }.into());
    }
    let data = &bytes[offset..offset + needed];
    let big = header.big_endian;
    let values = decode(data, dt, big);
    Ok(Parsed { header, grid, values })
}

fn decode(data: &[u8], dt: Datatype, big: bool) -> Vec<f64> {
    let n = dt.bytes();
    data.chunks_exact(n)
        .map(|c| {
            let mut b = [0u8; 8];
            b[..n].copy_from_slice(c);
            if big {
                b[..n].reverse();
            }
            match dt {
                Datatype::Uint8 => b[0] as f64,
                Datatype::Int16 => i16::from_le_bytes([b[0], b[1]]) as f64,
                Datatype::Int32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
                Datatype::Float32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
                Datatype::Float64 => f64::from_le_bytes(b),
            }
        })
        .collect()
}

fn scaling(h: &NiftiHeader) -> (f64, f64) {
    let slope = if h.scl_slope == 0.0 || !h.scl_slope.is_finite() { 1.0 } else { h.scl_slope as f64 };
    let inter = if h.scl_inter.is_finite() { h.scl_inter as f64 } else { 0.0 };
    (slope, inter)
}

/// Reads the header only.
pub fn read_header(path: &Path) -> Result<NiftiHeader> {
    let bytes = read_bytes(path)?;
    Ok(NiftiHeader::parse(&bytes)?)
}

/// Reads an intensity volume, applying `scl_slope`/`scl_inter`.
pub fn read_nifti(path: &Path) -> Result<Volume3> {
    let bytes = read_bytes(path)?;
    read_nifti_bytes(&bytes)
}

pub fn read_nifti_bytes(bytes: &[u8]) -> Result<Volume3> {
    let p = parse_file(bytes, false)?;
    let (slope, inter) = scaling(&p.header);
    let identity = slope == 1.0 && inter == 0.0;
    let data = p
        .values
        .iter()
        .map(|&v| if identity { v as f32 } else { (slope * v + inter) as f32 })
        .collect();
    Volume3::new(p.grid, data)
}

/// Reads a label volume. Integer files keep exact values; float files are
/// accepted only if every value is a non-negative integer.
pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let bytes = read_bytes(path)?;
    read_labels_bytes(&bytes)
}

pub fn read_labels_bytes(bytes: &[u8]) -> Result<LabelVolume> {
    let p = parse_file(bytes, false)?;
    let h = &p.header;
    let slope_ok = h.scl_slope == 0.0 || h.scl_slope == 1.0 || !h.scl_slope.is_finite();
    let inter_ok = h.scl_inter == 0.0 || !h.scl_inter.is_finite();
    if !(slope_ok && inter_ok) {
        return Err(NiftiError::LabelScaling { slope: h.scl_slope, inter: h.scl_inter }.into());
    }
    let data = p
        .values
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                Err(NiftiError::LabelValue(v))
            } else {
                Ok(v as u32)
            }
        })
        .collect::<std::result::Result<Vec<u32>, _>>()?;
    LabelVolume::new(p.grid, data)
}

fn encode(values: impl Iterator<Item = f64>, dt: Datatype, out: &mut Vec<u8>) -> Result<()> {
    let (lo, hi) = dt.range();
    for (index, v) in values.enumerate() {
        let bad = !v.is_finite() && dt.is_integer()
            || v < lo
            || v > hi
            || (dt.is_integer() && v.fract() != 0.0);
        if bad {
            return Err(NiftiError::Range { value: v, index, datatype: dt }.into());
        }
        match dt {
            Datatype::Uint8 => out.push(v as u8),
            Datatype::Int16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            Datatype::Int32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
            Datatype::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Datatype::Float64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(())
}

fn assemble(header: &NiftiHeader, payload: Vec<u8>) -> Vec<u8> {
    let mut bytes = header.to_bytes();
    bytes.extend_from_slice(&[0, 0, 0, 0]);
    bytes.extend(payload);
    bytes
}

fn emit(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.to_string_lossy();
    if name.ends_with(".gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::new(6));
        enc.write_all(bytes)?;
        fs::write(path, enc.finish()?)?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

/// Encodes an intensity volume as an uncompressed `.nii` byte image.
pub fn nifti_bytes(vol: &Volume3, datatype: Datatype) -> Result<Vec<u8>> {
    let header = NiftiHeader::for_grid(vol.grid(), datatype);
    let mut payload = Vec::with_capacity(vol.data().len() * datatype.bytes());
    if datatype == Datatype::Float32 {
        for v in vol.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    } else {
        encode(vol.data().iter().map(|&v| v as f64), datatype, &mut payload)?;
    }
    Ok(assemble(&header, payload))
}

/// Writes an intensity volume; gzip when the path ends in `.gz`.
pub fn write_nifti(vol: &Volume3, path: &Path, datatype: Datatype) -> Result<()> {
    emit(path, &nifti_bytes(vol, datatype)?)
}

/// Writes a label volume with an integer datatype.
pub fn write_labels(labels: &LabelVolume, path: &Path, datatype: Datatype) -> Result<()> {
    if !datatype.is_integer() {
        return Err(Error::invalid("label volumes must be written with an integer datatype"));
    }
    let header = NiftiHeader::for_grid(labels.grid(), datatype);
    let mut payload = Vec::with_capacity(labels.data().len() * datatype.bytes());
    encode(labels.data().iter().map(|&v| v as f64), datatype, &mut payload)?;
    emit(path, &assemble(&header, payload))
}

/// Writes a vector field as `dim = (nx, ny, nz, 1, 3)` float32, the three
/// components stored as consecutive scalar volumes.
pub fn write_vector_field(field: &VectorField, path: &Path) -> Result<()> {
    let mut header = NiftiHeader::for_grid(field.grid(), Datatype::Float32);
    header.dim[0] = 5;
    header.dim[4] = 1;
    header.dim[5] = 3;
    header.intent_code = INTENT_VECTOR;
    let mut payload = Vec::with_capacity(field.data().len() * 12);
    for c in 0..3 {
        for v in field.data() {
            payload.extend_from_slice(&v[c].to_le_bytes());
        }
    }
    emit(path, &assemble(&header, payload))
}

pub fn read_vector_field(path: &Path) -> Result<VectorField> {
    let bytes = read_bytes(path)?;
    let p = parse_file(&bytes, true)?;
    let n = p.grid.len();
    let (slope, inter) = scaling(&p.header);
    let f = |v: f64| (slope * v + inter) as f32;
    let data = (0..n)
        .map(|i| [f(p.values[i]), f(p.values[n + i]), f(p.values[2 * n + i])])
        .collect();
    VectorField::new(p.grid, data)
}
