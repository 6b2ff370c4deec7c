//! MetaImage (`.mhd` + `.raw`) reading and writing.
//!
//! Only uncompressed little-endian 3D payloads are supported. Header keys
//! outside the MetaIO core set are carried through as volume metadata.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::volume::{check_labels, ElementType, Grid, LabelMask, Meta, Volume};

const CORE_KEYS: &[&str] = &[
    "ObjectType",
    "NDims",
    "BinaryData",
    "BinaryDataByteOrderMSB",
    "ElementByteOrderMSB",
    "CompressedData",
    "DimSize",
    "ElementSpacing",
    "Offset",
    "Origin",
    "Position",
    "ElementType",
    "ElementNumberOfChannels",
    "ElementDataFile",
];

/// Parsed header, before the payload is decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub element_type: ElementType,
    pub data_file: String,
    pub extra: Meta,
}

fn parse_triple<T: std::str::FromStr>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::format(key, format!("expected 3 values, got `{value}`")));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::format(key, format!("cannot parse `{p}`")))?,
        );
    }
    match <[T; 3]>::try_from(out) {
        Ok(arr) => Ok(arr),
        Err(_) => unreachable!(),
    }
}

/// Parses header text. Returns the header and the byte offset just past the
/// `ElementDataFile` line (where a `LOCAL` payload begins).
pub fn parse_header(bytes: &[u8]) -> Result<(MetaHeader, usize)> {
    let mut fields: Vec<(String, String)> = Vec::new();
    let mut offset = 0usize;
    let mut payload_start = None;
    while offset < bytes.len() {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| offset + p + 1)
            .unwrap_or(bytes.len());
        let line = std::str::from_utf8(&bytes[offset..end])
            .map_err(|_| Error::format("<header>", "non-UTF-8 header line"))?
            .trim();
        offset = end;
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(line, "expected `Key = Value`"))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let is_data_file = key == "ElementDataFile";
        fields.push((key, value));
        if is_data_file {
            payload_start = Some(offset);
            break;
        }
    }

    let get = |k: &str| -> Option<&str> {
        fields
            .iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
    };
    let require = |k: &str| -> Result<&str> { get(k).ok_or_else(|| Error::format(k, "missing")) };

    let ndims = require("NDims")?;
    if ndims.parse::<usize>().ok() != Some(3) {
        return Err(Error::format("NDims", format!("only 3 is supported, got `{ndims}`")));
    }
    let dims: [usize; 3] = parse_triple("DimSize", require("DimSize")?)?;
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::format("DimSize", "dimensions must be >= 1"));
    }
    let spacing: [f64; 3] = parse_triple("ElementSpacing", require("ElementSpacing")?)?;
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::format("ElementSpacing", "spacing must be positive"));
    }
    let et = require("ElementType")?;
    let element_type = ElementType::from_tag(et)
        .ok_or_else(|| Error::format("ElementType", format!("unsupported `{et}`")))?;
    let data_file = require("ElementDataFile")?.to_string();

    let origin = match get("Offset").or_else(|| get("Origin")).or_else(|| get("Position")) {
        Some(v) => parse_triple("Offset", v)?,
        None => [0.0; 3],
    };
    for key in ["BinaryDataByteOrderMSB", "ElementByteOrderMSB"] {
        if let Some(v) = get(key) {
            if !v.eq_ignore_ascii_case("false") {
                return Err(Error::format(key, "only little-endian payloads are supported"));
            }
        }
    }
    if let Some(v) = get("CompressedData") {
        if !v.eq_ignore_ascii_case("false") {
            return Err(Error::format("CompressedData", "compressed payloads are not supported"));
        }
    }
    if let Some(v) = get("ElementNumberOfChannels") {
        if v != "1" {
            return Err(Error::format("ElementNumberOfChannels", "only scalar volumes are supported"));
        }
    }

    let extra = fields
        .iter()
        .filter(|(k, _)| !CORE_KEYS.contains(&k.as_str()))
        .cloned()
        .collect();

    Ok((
        MetaHeader {
            dims,
            spacing,
            origin,
            element_type,
            data_file,
            extra,
        },
        payload_start.unwrap_or(bytes.len()),
    ))
}

fn decode(element_type: ElementType, payload: &[u8]) -> Vec<f32> {
    match element_type {
        ElementType::UChar => payload.iter().map(|&b| b as f32).collect(),
        ElementType::Short => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        ElementType::UShort => payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        ElementType::Float => payload
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
    }
}

fn encode(element_type: ElementType, voxels: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(voxels.len() * element_type.size());
    for &v in voxels {
        match element_type {
            ElementType::UChar => out.push(v as u8),
            ElementType::Short => out.extend_from_slice(&(v as i16).to_le_bytes()),
            ElementType::UShort => out.extend_from_slice(&(v as u16).to_le_bytes()),
            ElementType::Float => out.extend_from_slice(&v.to_bits().to_le_bytes()),
        }
    }
    out
}

/// Reads a MetaImage volume.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, payload_start) = parse_header(&bytes)?;

    let expected = header.dims.iter().product::<usize>() * header.element_type.size();
    let payload: std::borrow::Cow<'_, [u8]> = if header.data_file.eq_ignore_ascii_case("LOCAL") {
        std::borrow::Cow::Borrowed(&bytes[payload_start..])
    } else {
        let raw = raw_path_for(path, &header.data_file);
        std::borrow::Cow::Owned(fs::read(&raw).map_err(|e| Error::io(&raw, e))?)
    };
    if payload.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: payload.len(),
        });
    }

    let voxels = Grid::from_vec(header.dims, decode(header.element_type, &payload))?;
    Ok(Volume {
        voxels,
        spacing: header.spacing,
        origin: header.origin,
        meta: header.extra,
        element_type: header.element_type,
    })
}

/// Reads a MetaImage label mask; values must be integral class codes.
pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let vol = read_volume(path)?;
    let mut labels = Vec::with_capacity(vol.voxels.len());
    for &v in vol.voxels.as_slice() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::Domain(format!("mask voxel {v} is not a class code")));
        }
        labels.push(v as u8);
    }
    check_labels(&labels)?;
    Ok(LabelMask {
        labels: Grid::from_vec(vol.dims(), labels)?,
        spacing: vol.spacing,
        origin: vol.origin,
        meta: vol.meta,
    })
}

fn raw_path_for(header_path: &Path, data_file: &str) -> PathBuf {
    match header_path.parent() {
        Some(dir) => dir.join(data_file),
        None => PathBuf::from(data_file),
    }
}

fn fmt_triple<T: std::fmt::Display>(v: &[T; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

fn header_text(
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    element_type: ElementType,
    meta: &Meta,
    data_file: &str,
) -> Result<String> {
    let mut text = String::new();
    text.push_str("ObjectType = Image\n");
    text.push_str("NDims = 3\n");
    text.push_str("BinaryData = True\n");
    text.push_str("BinaryDataByteOrderMSB = False\n");
    text.push_str("CompressedData = False\n");
    text.push_str(&format!("Offset = {}\n", fmt_triple(&origin)));
    text.push_str(&format!("ElementSpacing = {}\n", fmt_triple(&spacing)));
    text.push_str(&format!("DimSize = {}\n", fmt_triple(&dims)));
    for (k, v) in meta {
        if CORE_KEYS.contains(&k.as_str()) {
            continue;
        }
        if k.is_empty() || k.contains(['=', '\n', '\r']) || k.chars().any(char::is_whitespace) {
            return Err(Error::format(k.as_str(), "metadata key not representable in a header"));
        }
        if v.contains(['\n', '\r']) {
            return Err(Error::format(k.as_str(), "metadata value contains a newline"));
        }
        text.push_str(&format!("{k} = {v}\n"));
    }
    text.push_str(&format!("ElementType = {}\n", element_type.tag()));
    text.push_str(&format!("ElementDataFile = {data_file}\n"));
    Ok(text)
}

fn write_pair(path: &Path, header: &str, payload: &[u8]) -> Result<()> {
    fs::write(path, header).map_err(|e| Error::io(path, e))?;
    let raw = path.with_extension("raw");
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))
}

fn raw_name(path: &Path) -> Result<String> {
    path.with_extension("raw")
        .file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Domain(format!("bad output path {}", path.display())))
}

/// Writes `volume` as `path` (header) plus a sibling `.raw` payload.
pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    volume.validate()?;
    let path = path.as_ref();
    let header = header_text(
        volume.dims(),
        volume.spacing,
        volume.origin,
        volume.element_type,
        &volume.meta,
        &raw_name(path)?,
    )?;
    write_pair(path, &header, &encode(volume.element_type, volume.voxels.as_slice()))
}

/// Writes a mask as 8-bit unsigned MetaImage.
pub fn write_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    mask.validate()?;
    let path = path.as_ref();
    let header = header_text(
        mask.dims(),
        mask.spacing,
        mask.origin,
        ElementType::UChar,
        &mask.meta,
        &raw_name(path)?,
    )?;
    write_pair(path, &header, mask.labels.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw_header(dir: &Path, header: &str, payload: &[u8]) -> PathBuf {
        let p = dir.join("v.mhd");
        fs::write(&p, header).unwrap();
        fs::write(dir.join("v.raw"), payload).unwrap();
        p
    }

    const BYTE_HEADER: &str = "NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\nElementType = MET_UCHAR\nElementDataFile = v.raw\n";

    #[test]
    fn decodes_enumerated_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_raw_header(dir.path(), BYTE_HEADER, &[0, 1, 2, 3, 4, 5, 6, 7]);
        let v = read_volume(&p).unwrap();
        assert_eq!(v.dims(), [2, 2, 2]);
        assert_eq!(v.voxels.get(1, 1, 1), 7.0);
        assert_eq!(v.voxels.get(1, 0, 0), 1.0);
        assert_eq!(v.voxels.get(0, 1, 0), 2.0);
        assert_eq!(v.voxels.get(0, 0, 1), 4.0);
    }

    #[test]
    fn short_payload_is_truncation_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_raw_header(dir.path(), BYTE_HEADER, &[0, 1, 2]);
        assert!(matches!(
            read_volume(&p),
            Err(Error::Truncated { expected: 8, actual: 3 })
        ));
    }

    #[test]
    fn missing_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let header = BYTE_HEADER.replace("ElementSpacing = 1 1 1\n", "");
        let p = write_raw_header(dir.path(), &header, &[0; 8]);
        match read_volume(&p) {
            Err(Error::Format { key, .. }) => assert_eq!(key, "ElementSpacing"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn garbled_dimsize_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let header = BYTE_HEADER.replace("DimSize = 2 2 2", "DimSize = 2 two 2");
        let p = write_raw_header(dir.path(), &header, &[0; 8]);
        match read_volume(&p) {
            Err(Error::Format { key, .. }) => assert_eq!(key, "DimSize"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unsupported_element_type() {
        let dir = tempfile::tempdir().unwrap();
        let header = BYTE_HEADER.replace("MET_UCHAR", "MET_DOUBLE");
        let p = write_raw_header(dir.path(), &header, &[0; 64]);
        assert!(matches!(read_volume(&p), Err(Error::Format { key, .. }) if key == "ElementType"));
    }

    #[test]
    fn local_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("local.mhd");
        let mut bytes = BYTE_HEADER.replace("v.raw", "LOCAL").into_bytes();
        bytes.extend_from_slice(&[9, 8, 7, 6, 5, 4, 3, 2]);
        fs::write(&p, bytes).unwrap();
        let v = read_volume(&p).unwrap();
        assert_eq!(v.voxels.get(0, 0, 0), 9.0);
    }

    #[test]
    fn single_voxel_payload() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = Volume::new(Grid::filled([1, 1, 1], 42.0).unwrap(), [1.0; 3]).unwrap();
        v.element_type = ElementType::UChar;
        let p = dir.path().join("one.mhd");
        write_volume(&v, &p).unwrap();
        assert_eq!(fs::read(dir.path().join("one.raw")).unwrap(), vec![42u8]);
        assert_eq!(read_volume(&p).unwrap(), v);
    }

    #[test]
    fn spacing_and_meta_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::from_fn([3, 2, 2], |x, y, z| (x + y * 3 + z * 6) as f32 - 5.0).unwrap();
        let mut v = Volume::new(grid, [0.5, 0.25, 1.0])
            .unwrap()
            .with_meta("vendor", "Topcon")
            .with_meta("patient", "p 007");
        v.element_type = ElementType::Short;
        v.origin = [1.5, -2.0, 0.1];
        let p = dir.path().join("s.mhd");
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.spacing, [0.5, 0.25, 1.0]);
    }

    #[test]
    fn unrepresentable_voxel_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = Volume::new(Grid::filled([1, 1, 1], 300.0).unwrap(), [1.0; 3]).unwrap();
        v.element_type = ElementType::UChar;
        assert!(write_volume(&v, dir.path().join("x.mhd")).is_err());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let v = Volume::new(Grid::filled([1, 1, 1], 1.0).unwrap(), [1.0; 3]).unwrap();
        let r = write_volume(&v, "/nonexistent-dir/sub/v.mhd");
        assert!(matches!(r, Err(Error::Io { .. })));
    }
}
