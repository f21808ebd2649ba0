//! A deliberately small DICOM reader: Part 10 files in explicit VR little
//! endian with uncompressed 16-bit monochrome pixel data. Anything else is
//! refused rather than guessed at.

use super::DataError;

pub const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";
const CT_IMAGE_STORAGE: &str = "1.2.840.10008.5.1.4.1.1.2";

const TRANSFER_SYNTAX: (u16, u16) = (0x0002, 0x0010);
const SAMPLES_PER_PIXEL: (u16, u16) = (0x0028, 0x0002);
const ROWS: (u16, u16) = (0x0028, 0x0010);
const COLUMNS: (u16, u16) = (0x0028, 0x0011);
const BITS_ALLOCATED: (u16, u16) = (0x0028, 0x0100);
const PIXEL_REPRESENTATION: (u16, u16) = (0x0028, 0x0103);
const RESCALE_INTERCEPT: (u16, u16) = (0x0028, 0x1052);
const RESCALE_SLOPE: (u16, u16) = (0x0028, 0x1053);
const PIXEL_DATA: (u16, u16) = (0x7FE0, 0x0010);

const ITEM: (u16, u16) = (0xFFFE, 0xE000);
const ITEM_END: (u16, u16) = (0xFFFE, 0xE00D);
const SEQUENCE_END: (u16, u16) = (0xFFFE, 0xE0DD);
const UNDEFINED: u32 = 0xFFFF_FFFF;

/// One CT slice as stored: raw pixel values plus the rescale to Hounsfield units.
#[derive(Clone, Debug, PartialEq)]
pub struct CtSlice {
    pub rows: usize,
    pub cols: usize,
    /// Stored values, row-major; unsigned or signed 16-bit widened to `i32`.
    pub pixel_values: Vec<i32>,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    pub signed: bool,
    pub source_id: String,
    /// Set when slope or intercept was absent and the 1/0 default was used.
    pub rescale_defaulted: bool,
}

impl CtSlice {
    /// Unsigned 16-bit slice.
    pub fn new(
        rows: usize,
        cols: usize,
        pixel_values: Vec<i32>,
        rescale_slope: f64,
        rescale_intercept: f64,
    ) -> Result<Self, DataError> {
        Self::build(rows, cols, pixel_values, rescale_slope, rescale_intercept, false)
    }

    /// Signed (two's complement) 16-bit slice.
    pub fn new_signed(
        rows: usize,
        cols: usize,
        pixel_values: Vec<i32>,
        rescale_slope: f64,
        rescale_intercept: f64,
    ) -> Result<Self, DataError> {
        Self::build(rows, cols, pixel_values, rescale_slope, rescale_intercept, true)
    }

    fn build(
        rows: usize,
        cols: usize,
        pixel_values: Vec<i32>,
        rescale_slope: f64,
        rescale_intercept: f64,
        signed: bool,
    ) -> Result<Self, DataError> {
        let slice = Self {
            rows,
            cols,
            pixel_values,
            rescale_slope,
            rescale_intercept,
            signed,
            source_id: String::new(),
            rescale_defaulted: false,
        };
        slice.validate()?;
        Ok(slice)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.rows * self.cols != self.pixel_values.len() || self.rows == 0 || self.cols == 0 {
            return Err(DataError::Invalid(format!(
                "{}×{} slice with {} pixels",
                self.rows,
                self.cols,
                self.pixel_values.len()
            )));
        }
        if self.rescale_slope == 0.0 || !self.rescale_slope.is_finite() {
            return Err(DataError::Invalid(format!(
                "rescale slope {} must be finite and non-zero",
                self.rescale_slope
            )));
        }
        let (lo, hi) = if self.signed {
            (i16::MIN as i32, i16::MAX as i32)
        } else {
            (0, u16::MAX as i32)
        };
        if let Some(v) = self.pixel_values.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(DataError::Invalid(format!(
                "stored value {v} outside the {} 16-bit range",
                if self.signed { "signed" } else { "unsigned" }
            )));
        }
        Ok(())
    }

    /// Hounsfield unit of pixel `i`.
    pub fn hu(&self, i: usize) -> f64 {
        self.rescale_slope * self.pixel_values[i] as f64 + self.rescale_intercept
    }
}

struct Element {
    tag: (u16, u16),
    vr: [u8; 2],
    /// `None` for undefined length.
    len: Option<usize>,
    value_at: usize,
}

fn corrupt(msg: impl Into<String>, offset: usize, needed: usize, available: usize) -> DataError {
    DataError::Corrupt {
        msg: msg.into(),
        offset,
        needed,
        available,
    }
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8], DataError> {
    bytes
        .get(at..at.saturating_add(n))
        .ok_or_else(|| corrupt(format!("truncated {what}"), at, n, bytes.len().saturating_sub(at)))
}

fn u16_at(bytes: &[u8], at: usize) -> Result<u16, DataError> {
    let b = take(bytes, at, 2, "u16")?;
    Ok(u16::from_le_bytes([b[0], b[1]]))
}

fn u32_at(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    let b = take(bytes, at, 4, "u32")?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn has_long_length(vr: &[u8; 2]) -> bool {
    matches!(
        vr,
        b"OB" | b"OD" | b"OF" | b"OL" | b"OV" | b"OW" | b"SQ" | b"SV" | b"UC" | b"UN" | b"UR" | b"UT" | b"UV"
    )
}

fn read_tag(bytes: &[u8], at: usize) -> Result<(u16, u16), DataError> {
    Ok((u16_at(bytes, at)?, u16_at(bytes, at + 2)?))
}

/// Reads an element header at `at`. Item and delimiter tags carry no VR.
fn read_header(bytes: &[u8], at: usize) -> Result<Element, DataError> {
    let tag = read_tag(bytes, at)?;
    if tag.0 == 0xFFFE {
        let len = u32_at(bytes, at + 4)?;
        return Ok(Element {
            tag,
            vr: *b"  ",
            len: (len != UNDEFINED).then_some(len as usize),
            value_at: at + 8,
        });
    }
    let vr_bytes = take(bytes, at + 4, 2, "value representation")?;
    let vr = [vr_bytes[0], vr_bytes[1]];
    if !vr.iter().all(u8::is_ascii_uppercase) {
        return Err(DataError::Unsupported(format!(
            "element ({:04X},{:04X}) at byte {at} has no explicit VR (implicit VR encoding?)",
            tag.0, tag.1
        )));
    }
    let (len, value_at) = if has_long_length(&vr) {
        let len = u32_at(bytes, at + 8)?;
        ((len != UNDEFINED).then_some(len as usize), at + 12)
    } else {
        (Some(u16_at(bytes, at + 6)? as usize), at + 8)
    };
    Ok(Element {
        tag,
        vr,
        len,
        value_at,
    })
}

/// Skips an undefined-length sequence starting at `at` (its first item),
/// returning the offset after the sequence delimiter.
fn skip_sequence(bytes: &[u8], mut at: usize) -> Result<usize, DataError> {
    loop {
        let el = read_header(bytes, at)?;
        match (el.tag, el.len) {
            (SEQUENCE_END, _) => return Ok(el.value_at),
            (ITEM, Some(len)) => {
                take(bytes, el.value_at, len, "sequence item")?;
                at = el.value_at + len;
            }
            (ITEM, None) => {
                at = el.value_at;
                loop {
                    let inner = read_header(bytes, at)?;
                    if inner.tag == ITEM_END {
                        at = inner.value_at;
                        break;
                    }
                    at = skip_value(bytes, &inner)?;
                }
            }
            _ => {
                return Err(corrupt(
                    format!("unexpected ({:04X},{:04X}) inside sequence", el.tag.0, el.tag.1),
                    at,
                    0,
                    bytes.len().saturating_sub(at),
                ))
            }
        }
    }
}

fn skip_value(bytes: &[u8], el: &Element) -> Result<usize, DataError> {
    match el.len {
        Some(len) => {
            take(bytes, el.value_at, len, "element value")?;
            Ok(el.value_at + len)
        }
        None if &el.vr == b"SQ" => skip_sequence(bytes, el.value_at),
        None => Err(DataError::Unsupported(format!(
            "undefined length on ({:04X},{:04X}) {}",
            el.tag.0,
            el.tag.1,
            String::from_utf8_lossy(&el.vr)
        ))),
    }
}

fn text(value: &[u8]) -> String {
    String::from_utf8_lossy(value)
        .trim_matches(|c: char| c == '\0' || c.is_whitespace())
        .to_string()
}

fn decimal(value: &[u8], name: &str) -> Result<f64, DataError> {
    let s = text(value);
    let first = s.split('\\').next().unwrap_or("");
    first
        .trim()
        .parse()
        .map_err(|_| DataError::Invalid(format!("{name} `{s}` is not a decimal string")))
}

fn us(value: &[u8], name: &'static str) -> Result<u16, DataError> {
    if value.len() < 2 {
        return Err(DataError::Invalid(format!("{name} has {} value bytes", value.len())));
    }
    Ok(u16::from_le_bytes([value[0], value[1]]))
}

/// Parses a Part 10 byte stream restricted to the supported subset.
pub fn parse_dicom_lite(bytes: &[u8], source_id: &str) -> Result<CtSlice, DataError> {
    if bytes.len() < 132 {
        return Err(DataError::UnsupportedFormat(format!(
            "{} bytes is shorter than the 132-byte preamble and magic",
            bytes.len()
        )));
    }
    if &bytes[128..132] != b"DICM" {
        return Err(DataError::UnsupportedFormat(
            "no DICM magic at byte 128".into(),
        ));
    }
    let mut rows = None;
    let mut cols = None;
    let mut bits = None;
    let mut representation = 0u16;
    let mut slope = None;
    let mut intercept = None;
    let mut pixels: Option<(usize, usize)> = None;

    let mut at = 132;
    while at < bytes.len() {
        let el = read_header(bytes, at)?;
        if el.tag == PIXEL_DATA {
            let Some(len) = el.len else {
                return Err(DataError::Unsupported(
                    "encapsulated (compressed) pixel data".into(),
                ));
            };
            let available = bytes.len().saturating_sub(el.value_at);
            if len > available {
                return Err(corrupt("truncated PixelData", el.value_at, len, available));
            }
            pixels = Some((el.value_at, len));
            at = el.value_at + len;
            continue;
        }
        let next = skip_value(bytes, &el)?;
        let value = &bytes[el.value_at..next];
        match el.tag {
            TRANSFER_SYNTAX => {
                let ts = text(value);
                if ts != EXPLICIT_VR_LE {
                    return Err(DataError::Unsupported(format!("transfer syntax {ts}")));
                }
            }
            SAMPLES_PER_PIXEL => {
                let n = us(value, "SamplesPerPixel")?;
                if n != 1 {
                    return Err(DataError::Unsupported(format!("{n} samples per pixel")));
                }
            }
            ROWS => rows = Some(us(value, "Rows")? as usize),
            COLUMNS => cols = Some(us(value, "Columns")? as usize),
            BITS_ALLOCATED => bits = Some(us(value, "BitsAllocated")?),
            PIXEL_REPRESENTATION => representation = us(value, "PixelRepresentation")?,
            RESCALE_INTERCEPT => intercept = Some(decimal(value, "RescaleIntercept")?),
            RESCALE_SLOPE => slope = Some(decimal(value, "RescaleSlope")?),
            _ => {}
        }
        at = next;
    }

    let rows = rows.ok_or(DataError::MissingElement("Rows (0028,0010)"))?;
    let cols = cols.ok_or(DataError::MissingElement("Columns (0028,0011)"))?;
    let bits = bits.ok_or(DataError::MissingElement("BitsAllocated (0028,0100)"))?;
    if bits != 16 {
        return Err(DataError::Unsupported(format!("{bits} bits allocated")));
    }
    if representation > 1 {
        return Err(DataError::Invalid(format!(
            "PixelRepresentation {representation}"
        )));
    }
    let (start, len) = pixels.ok_or(DataError::MissingElement("PixelData (7FE0,0010)"))?;
    let needed = rows * cols * 2;
    if len < needed {
        return Err(corrupt(
            format!("PixelData holds {len} bytes for a {rows}×{cols} slice"),
            start,
            needed,
            len,
        ));
    }
    let signed = representation == 1;
    let pixel_values = bytes[start..start + needed]
        .chunks_exact(2)
        .map(|b| {
            let raw = [b[0], b[1]];
            if signed {
                i16::from_le_bytes(raw) as i32
            } else {
                u16::from_le_bytes(raw) as i32
            }
        })
        .collect();
    let rescale_defaulted = slope.is_none() || intercept.is_none();
    if rescale_defaulted {
        log::warn!("{source_id}: rescale slope/intercept missing, using 1/0");
    }
    let slice = CtSlice {
        rows,
        cols,
        pixel_values,
        rescale_slope: slope.unwrap_or(1.0),
        rescale_intercept: intercept.unwrap_or(0.0),
        signed,
        source_id: source_id.to_string(),
        rescale_defaulted,
    };
    slice.validate()?;
    Ok(slice)
}

/// Knobs for [`write_dicom_lite`].
#[derive(Clone, Debug)]
pub struct FixtureOptions {
    pub transfer_syntax: String,
    /// Write RescaleSlope/RescaleIntercept.
    pub include_rescale: bool,
    /// Insert an undefined-length sequence before the image module.
    pub include_sequence: bool,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        Self {
            transfer_syntax: EXPLICIT_VR_LE.into(),
            include_rescale: true,
            include_sequence: false,
        }
    }
}

fn put_element(out: &mut Vec<u8>, tag: (u16, u16), vr: &[u8; 2], value: &[u8]) {
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
    out.extend_from_slice(vr);
    if has_long_length(vr) {
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    } else {
        out.extend_from_slice(&(value.len() as u16).to_le_bytes());
    }
    out.extend_from_slice(value);
}

fn padded(s: &str, pad: u8) -> Vec<u8> {
    let mut v = s.as_bytes().to_vec();
    if v.len() % 2 == 1 {
        v.push(pad);
    }
    v
}

/// Decimal string for `v`, at most 16 characters as DS requires.
fn ds(v: f64) -> String {
    let plain = format!("{v}");
    if plain.len() <= 16 {
        return plain;
    }
    (1..=10)
        .rev()
        .map(|p| format!("{v:.p$e}"))
        .find(|s| s.len() <= 16)
        .unwrap_or_else(|| format!("{v:.0e}"))
}

/// Serialises a slice in the supported subset. Companion of [`parse_dicom_lite`];
/// used to produce test fixtures.
pub fn write_dicom_lite(slice: &CtSlice, opts: &FixtureOptions) -> Result<Vec<u8>, DataError> {
    slice.validate()?;
    if slice.rows > u16::MAX as usize || slice.cols > u16::MAX as usize {
        return Err(DataError::Invalid("slice too large for Rows/Columns".into()));
    }
    let mut meta = Vec::new();
    put_element(&mut meta, (0x0002, 0x0001), b"OB", &[0, 1]);
    put_element(&mut meta, (0x0002, 0x0002), b"UI", &padded(CT_IMAGE_STORAGE, 0));
    put_element(&mut meta, (0x0002, 0x0003), b"UI", &padded("1.2.826.0.1.3680043.10.1", 0));
    put_element(&mut meta, TRANSFER_SYNTAX, b"UI", &padded(&opts.transfer_syntax, 0));

    let mut out = vec![0u8; 128];
    out.extend_from_slice(b"DICM");
    put_element(&mut out, (0x0002, 0x0000), b"UL", &(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);

    put_element(&mut out, (0x0008, 0x0060), b"CS", &padded("CT", b' '));
    if opts.include_sequence {
        // (0008,1140) ReferencedImageSequence, undefined length, one undefined-length item.
        out.extend_from_slice(&0x0008u16.to_le_bytes());
        out.extend_from_slice(&0x1140u16.to_le_bytes());
        out.extend_from_slice(b"SQ\0\0");
        out.extend_from_slice(&UNDEFINED.to_le_bytes());
        out.extend_from_slice(&ITEM.0.to_le_bytes());
        out.extend_from_slice(&ITEM.1.to_le_bytes());
        out.extend_from_slice(&UNDEFINED.to_le_bytes());
        put_element(&mut out, (0x0008, 0x1150), b"UI", &padded(CT_IMAGE_STORAGE, 0));
        for tag in [ITEM_END, SEQUENCE_END] {
            out.extend_from_slice(&tag.0.to_le_bytes());
            out.extend_from_slice(&tag.1.to_le_bytes());
            out.extend_from_slice(&0u32.to_le_bytes());
        }
    }
    put_element(&mut out, SAMPLES_PER_PIXEL, b"US", &1u16.to_le_bytes());
    put_element(&mut out, (0x0028, 0x0004), b"CS", &padded("MONOCHROME2", b' '));
    put_element(&mut out, ROWS, b"US", &(slice.rows as u16).to_le_bytes());
    put_element(&mut out, COLUMNS, b"US", &(slice.cols as u16).to_le_bytes());
    put_element(&mut out, BITS_ALLOCATED, b"US", &16u16.to_le_bytes());
    put_element(&mut out, (0x0028, 0x0101), b"US", &16u16.to_le_bytes());
    put_element(&mut out, (0x0028, 0x0102), b"US", &15u16.to_le_bytes());
    put_element(&mut out, PIXEL_REPRESENTATION, b"US", &u16::from(slice.signed).to_le_bytes());
    if opts.include_rescale {
        put_element(&mut out, RESCALE_INTERCEPT, b"DS", &padded(&ds(slice.rescale_intercept), b' '));
        put_element(&mut out, RESCALE_SLOPE, b"DS", &padded(&ds(slice.rescale_slope), b' '));
    }
    let mut data = Vec::with_capacity(slice.pixel_values.len() * 2);
    for &v in &slice.pixel_values {
        let raw = if slice.signed {
            (v as i16).to_le_bytes()
        } else {
            (v as u16).to_le_bytes()
        };
        data.extend_from_slice(&raw);
    }
    put_element(&mut out, PIXEL_DATA, b"OW", &data);
    Ok(out)
}
