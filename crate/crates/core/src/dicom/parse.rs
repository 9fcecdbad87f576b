//! Minimal DICOM Part 10 reader for single-frame CT slices.

use nalgebra::Vector3;

use super::DicomError;

const EXPLICIT_LE: &str = "1.2.840.10008.1.2.1";
const IMPLICIT_LE: &str = "1.2.840.10008.1.2";
const EXPLICIT_BE: &str = "1.2.840.10008.1.2.2";

const UNDEFINED: u32 = 0xFFFF_FFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Tag(pub u16, pub u16);

impl Tag {
    pub const TRANSFER_SYNTAX: Tag = Tag(0x0002, 0x0010);
    pub const SERIES_UID: Tag = Tag(0x0020, 0x000E);
    pub const IMAGE_POSITION: Tag = Tag(0x0020, 0x0032);
    pub const IMAGE_ORIENTATION: Tag = Tag(0x0020, 0x0037);
    pub const SAMPLES_PER_PIXEL: Tag = Tag(0x0028, 0x0002);
    pub const ROWS: Tag = Tag(0x0028, 0x0010);
    pub const COLUMNS: Tag = Tag(0x0028, 0x0011);
    pub const PIXEL_SPACING: Tag = Tag(0x0028, 0x0030);
    pub const BITS_ALLOCATED: Tag = Tag(0x0028, 0x0100);
    pub const BITS_STORED: Tag = Tag(0x0028, 0x0101);
    pub const HIGH_BIT: Tag = Tag(0x0028, 0x0102);
    pub const PIXEL_REPRESENTATION: Tag = Tag(0x0028, 0x0103);
    pub const RESCALE_INTERCEPT: Tag = Tag(0x0028, 0x1052);
    pub const RESCALE_SLOPE: Tag = Tag(0x0028, 0x1053);
    pub const PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);

    const ITEM: Tag = Tag(0xFFFE, 0xE000);
    const ITEM_END: Tag = Tag(0xFFFE, 0xE00D);
    const SEQUENCE_END: Tag = Tag(0xFFFE, 0xE0DD);

    pub fn keyword(self) -> &'static str {
        match self {
            Tag::TRANSFER_SYNTAX => "TransferSyntaxUID",
            Tag::SERIES_UID => "SeriesInstanceUID",
            Tag::IMAGE_POSITION => "ImagePositionPatient",
            Tag::IMAGE_ORIENTATION => "ImageOrientationPatient",
            Tag::SAMPLES_PER_PIXEL => "SamplesPerPixel",
            Tag::ROWS => "Rows",
            Tag::COLUMNS => "Columns",
            Tag::PIXEL_SPACING => "PixelSpacing",
            Tag::BITS_ALLOCATED => "BitsAllocated",
            Tag::BITS_STORED => "BitsStored",
            Tag::HIGH_BIT => "HighBit",
            Tag::PIXEL_REPRESENTATION => "PixelRepresentation",
            Tag::RESCALE_INTERCEPT => "RescaleIntercept",
            Tag::RESCALE_SLOPE => "RescaleSlope",
            Tag::PIXEL_DATA => "PixelData",
            _ => "unknown",
        }
    }

    /// Value representation for the tags we interpret when reading implicit VR.
    fn implicit_vr(self) -> [u8; 2] {
        match self {
            Tag::SERIES_UID | Tag::TRANSFER_SYNTAX => *b"UI",
            Tag::IMAGE_POSITION | Tag::IMAGE_ORIENTATION | Tag::PIXEL_SPACING => *b"DS",
            Tag::RESCALE_INTERCEPT | Tag::RESCALE_SLOPE => *b"DS",
            Tag::SAMPLES_PER_PIXEL
            | Tag::ROWS
            | Tag::COLUMNS
            | Tag::BITS_ALLOCATED
            | Tag::BITS_STORED
            | Tag::HIGH_BIT
            | Tag::PIXEL_REPRESENTATION => *b"US",
            Tag::PIXEL_DATA => *b"OW",
            _ => *b"UN",
        }
    }
}

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({:04X},{:04X}) {}", self.0, self.1, self.keyword())
    }
}

/// One CT slice with the geometry and rescale tags needed for assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct DicomSlice {
    pub rows: usize,
    pub columns: usize,
    /// (row spacing, column spacing) in mm, as stored in PixelSpacing.
    pub pixel_spacing: [f64; 2],
    pub image_position: Vector3<f64>,
    /// Row direction cosine then column direction cosine.
    pub image_orientation: [Vector3<f64>; 2],
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    pub series_uid: String,
    pub bits_allocated: u16,
    pub bits_stored: u16,
    pub high_bit: u16,
    pub signed: bool,
    /// Stored values, row-major (column index fastest), sign-extended.
    pub pixels: Vec<i32>,
    /// Where the slice came from, for error messages.
    pub source: Option<String>,
}

impl DicomSlice {
    pub fn normal(&self) -> Vector3<f64> {
        self.image_orientation[0].cross(&self.image_orientation[1])
    }

    /// Hounsfield values `slope * stored + intercept`.
    pub fn hounsfield(&self) -> Vec<f32> {
        self.pixels
            .iter()
            .map(|&v| (self.rescale_slope * v as f64 + self.rescale_intercept) as f32)
            .collect()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Syntax {
    ExplicitLe,
    ImplicitLe,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DicomError> {
        if self.remaining() < n {
            return Err(DicomError::Truncated { offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DicomError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DicomError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tag(&mut self) -> Result<Tag, DicomError> {
        Ok(Tag(self.u16()?, self.u16()?))
    }
}

struct Element<'a> {
    tag: Tag,
    vr: [u8; 2],
    /// `None` for undefined length.
    value: Option<&'a [u8]>,
}

fn has_long_length(vr: &[u8; 2]) -> bool {
    matches!(
        vr,
        b"OB" | b"OD" | b"OF" | b"OL" | b"OV" | b"OW" | b"SQ" | b"SV" | b"UC" | b"UN" | b"UR" | b"UT" | b"UV"
    )
}

fn read_element<'a>(r: &mut Reader<'a>, syntax: Syntax) -> Result<Element<'a>, DicomError> {
    let tag = r.tag()?;
    if tag.0 == 0xFFFE {
        let len = r.u32()?;
        let value = if len == UNDEFINED { None } else { Some(r.take(len as usize)?) };
        return Ok(Element { tag, vr: *b"  ", value });
    }
    let (vr, len) = match syntax {
        Syntax::ExplicitLe => {
            let b = r.take(2)?;
            let vr = [b[0], b[1]];
            if has_long_length(&vr) {
                r.take(2)?;
                (vr, r.u32()?)
            } else {
                (vr, r.u16()? as u32)
            }
        }
        Syntax::ImplicitLe => (tag.implicit_vr(), r.u32()?),
    };
    if len == UNDEFINED {
        if tag == Tag::PIXEL_DATA {
            return Err(DicomError::EncapsulatedPixelData);
        }
        skip_undefined_sequence(r, syntax)?;
        return Ok(Element { tag, vr: *b"SQ", value: None });
    }
    let value = Some(r.take(len as usize)?);
    Ok(Element { tag, vr, value })
}

/// Skips items of an undefined-length sequence up to its delimiter.
fn skip_undefined_sequence(r: &mut Reader<'_>, syntax: Syntax) -> Result<(), DicomError> {
    loop {
        let tag = r.tag()?;
        let len = r.u32()?;
        match tag {
            Tag::SEQUENCE_END => return Ok(()),
            Tag::ITEM if len == UNDEFINED => loop {
                let el = read_element(r, syntax)?;
                if el.tag == Tag::ITEM_END {
                    break;
                }
            },
            Tag::ITEM => {
                r.take(len as usize)?;
            }
            other => return Err(DicomError::Malformed(format!("unexpected {other} inside sequence"))),
        }
    }
}

fn text(v: &[u8]) -> String {
    String::from_utf8_lossy(v).trim_matches(|c: char| c == '\0' || c.is_whitespace()).to_string()
}

fn decimals(tag: Tag, v: &[u8]) -> Result<Vec<f64>, DicomError> {
    text(v)
        .split('\\')
        .map(|s| s.trim().parse::<f64>().map_err(|_| DicomError::BadValue { tag, value: text(v) }))
        .collect()
}

fn us(tag: Tag, v: &[u8]) -> Result<u16, DicomError> {
    if v.len() < 2 {
        return Err(DicomError::BadValue { tag, value: format!("{} bytes", v.len()) });
    }
    Ok(u16::from_le_bytes([v[0], v[1]]))
}

#[derive(Default)]
struct Fields<'a> {
    series_uid: Option<String>,
    position: Option<Vec<f64>>,
    orientation: Option<Vec<f64>>,
    samples: Option<u16>,
    rows: Option<u16>,
    columns: Option<u16>,
    spacing: Option<Vec<f64>>,
    bits_allocated: Option<u16>,
    bits_stored: Option<u16>,
    high_bit: Option<u16>,
    pixel_representation: Option<u16>,
    slope: Option<f64>,
    intercept: Option<f64>,
    pixel_data: Option<&'a [u8]>,
}

fn require<T>(v: Option<T>, tag: Tag) -> Result<T, DicomError> {
    v.ok_or(DicomError::MissingTag(tag))
}

/// Parses a Part 10 file held in memory.
pub fn parse_dicom_file(bytes: &[u8]) -> Result<DicomSlice, DicomError> {
    if bytes.len() < 132 || &bytes[128..132] != b"DICM" {
        return Err(DicomError::MissingPreamble);
    }
    let mut r = Reader { buf: bytes, pos: 132 };

    let mut syntax_uid: Option<String> = None;
    while r.remaining() >= 4 {
        let group = u16::from_le_bytes([bytes[r.pos], bytes[r.pos + 1]]);
        if group != 0x0002 {
            break;
        }
        let el = read_element(&mut r, Syntax::ExplicitLe)?;
        if el.tag == Tag::TRANSFER_SYNTAX {
            syntax_uid = el.value.map(text);
        }
    }
    let uid = require(syntax_uid, Tag::TRANSFER_SYNTAX)?;
    let syntax = match uid.as_str() {
        EXPLICIT_LE => Syntax::ExplicitLe,
        IMPLICIT_LE => Syntax::ImplicitLe,
        EXPLICIT_BE => return Err(DicomError::UnsupportedTransferSyntax(uid)),
        _ => return Err(DicomError::UnsupportedTransferSyntax(uid)),
    };

    let mut f = Fields::default();
    while r.remaining() > 0 {
        let el = read_element(&mut r, syntax)?;
        let Some(v) = el.value else { continue };
        let _ = el.vr;
        match el.tag {
            Tag::SERIES_UID => f.series_uid = Some(text(v)),
            Tag::IMAGE_POSITION => f.position = Some(decimals(el.tag, v)?),
            Tag::IMAGE_ORIENTATION => f.orientation = Some(decimals(el.tag, v)?),
            Tag::SAMPLES_PER_PIXEL => f.samples = Some(us(el.tag, v)?),
            Tag::ROWS => f.rows = Some(us(el.tag, v)?),
            Tag::COLUMNS => f.columns = Some(us(el.tag, v)?),
            Tag::PIXEL_SPACING => f.spacing = Some(decimals(el.tag, v)?),
            Tag::BITS_ALLOCATED => f.bits_allocated = Some(us(el.tag, v)?),
            Tag::BITS_STORED => f.bits_stored = Some(us(el.tag, v)?),
            Tag::HIGH_BIT => f.high_bit = Some(us(el.tag, v)?),
            Tag::PIXEL_REPRESENTATION => f.pixel_representation = Some(us(el.tag, v)?),
            Tag::RESCALE_SLOPE => f.slope = decimals(el.tag, v)?.first().copied(),
            Tag::RESCALE_INTERCEPT => f.intercept = decimals(el.tag, v)?.first().copied(),
            Tag::PIXEL_DATA => f.pixel_data = Some(v),
            _ => {}
        }
    }
    build_slice(f)
}

fn build_slice(f: Fields<'_>) -> Result<DicomSlice, DicomError> {
    let rows = require(f.rows, Tag::ROWS)? as usize;
    let columns = require(f.columns, Tag::COLUMNS)? as usize;
    let spacing = require(f.spacing, Tag::PIXEL_SPACING)?;
    let position = require(f.position, Tag::IMAGE_POSITION)?;
    let orientation = require(f.orientation, Tag::IMAGE_ORIENTATION)?;
    let series_uid = require(f.series_uid, Tag::SERIES_UID)?;
    let bits_allocated = require(f.bits_allocated, Tag::BITS_ALLOCATED)?;
    let pixel_representation = require(f.pixel_representation, Tag::PIXEL_REPRESENTATION)?;
    let data = require(f.pixel_data, Tag::PIXEL_DATA)?;
    let bits_stored = f.bits_stored.unwrap_or(bits_allocated);
    let high_bit = f.high_bit.unwrap_or(bits_stored.saturating_sub(1));

    if f.samples.unwrap_or(1) != 1 {
        return Err(DicomError::Unsupported(format!("SamplesPerPixel = {}", f.samples.unwrap())));
    }
    if bits_allocated != 16 {
        return Err(DicomError::Unsupported(format!("BitsAllocated = {bits_allocated}")));
    }
    if bits_stored == 0 || bits_stored > 16 || high_bit >= 16 || high_bit + 1 < bits_stored {
        return Err(DicomError::BadValue {
            tag: Tag::BITS_STORED,
            value: format!("bits_stored={bits_stored} high_bit={high_bit}"),
        });
    }
    if rows == 0 || columns == 0 {
        return Err(DicomError::BadValue { tag: Tag::ROWS, value: format!("{rows}x{columns}") });
    }
    if spacing.len() != 2 || spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(DicomError::BadValue { tag: Tag::PIXEL_SPACING, value: format!("{spacing:?}") });
    }
    if position.len() != 3 {
        return Err(DicomError::BadValue { tag: Tag::IMAGE_POSITION, value: format!("{position:?}") });
    }
    if orientation.len() != 6 {
        return Err(DicomError::BadValue { tag: Tag::IMAGE_ORIENTATION, value: format!("{orientation:?}") });
    }
    let row_cos = Vector3::new(orientation[0], orientation[1], orientation[2]);
    let col_cos = Vector3::new(orientation[3], orientation[4], orientation[5]);
    if (row_cos.norm() - 1.0).abs() > 1e-3 || (col_cos.norm() - 1.0).abs() > 1e-3 || row_cos.dot(&col_cos).abs() > 1e-3 {
        return Err(DicomError::BadValue { tag: Tag::IMAGE_ORIENTATION, value: format!("{orientation:?}") });
    }
    let n = rows * columns;
    if data.len() < 2 * n {
        return Err(DicomError::PixelDataLength { expected: 2 * n, found: data.len() });
    }
    let signed = pixel_representation == 1;
    let shift = high_bit + 1 - bits_stored;
    let mask: u32 = (1u32 << bits_stored) - 1;
    let pixels = data[..2 * n]
        .chunks_exact(2)
        .map(|c| {
            let raw = (u16::from_le_bytes([c[0], c[1]]) as u32 >> shift) & mask;
            if signed && raw & (1 << (bits_stored - 1)) != 0 {
                raw as i32 - (1i32 << bits_stored)
            } else {
                raw as i32
            }
        })
        .collect();

    Ok(DicomSlice {
        rows,
        columns,
        pixel_spacing: [spacing[0], spacing[1]],
        image_position: Vector3::new(position[0], position[1], position[2]),
        image_orientation: [row_cos, col_cos],
        rescale_slope: f.slope.unwrap_or(1.0),
        rescale_intercept: f.intercept.unwrap_or(0.0),
        series_uid,
        bits_allocated,
        bits_stored,
        high_bit,
        signed,
        pixels,
        source: None,
    })
}
