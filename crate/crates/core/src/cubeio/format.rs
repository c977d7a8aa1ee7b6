//! `.hsc` cube files.
//!
//! A cube is stored as three files sharing a stem:
//!
//! * `<name>.hsc` — band-sequential payload, one little-endian `f32` per
//!   value, ordered channel, then row, then column.
//! * `<name>.hsc.json` — header (dimensions, optional band centers, label,
//!   `format_version`).
//! * `<name>.hsc.mask` — optional foreground mask, one bit per pixel in
//!   row-major order, most significant bit first, zero-padded to a byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HyperCube;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeHeader {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_centers: Option<Vec<f64>>,
    /// Mask file name, relative to the header's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn mask_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".mask");
    PathBuf::from(s)
}

fn pack_mask(mask: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        out[i / 8] |= 0x80 >> (i % 8);
    }
    out
}

fn unpack_mask(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len)
        .map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0)
        .collect()
}

/// Writes `cube` to `path` (payload), plus its header and optional mask.
pub fn save_cube(cube: &HyperCube, path: impl AsRef<Path>, label: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    if path.as_os_str().is_empty() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty path"),
        ));
    }

    let mut payload = Vec::with_capacity(cube.data().len() * 4);
    for v in cube.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &payload).map_err(|e| Error::io(path, e))?;

    let mask_file = match cube.mask() {
        Some(mask) => {
            let mp = mask_path(path);
            fs::write(&mp, pack_mask(mask)).map_err(|e| Error::io(&mp, e))?;
            mp.file_name().map(|n| n.to_string_lossy().into_owned())
        }
        None => None,
    };

    let header = CubeHeader {
        format_version: FORMAT_VERSION,
        height: cube.height(),
        width: cube.width(),
        channels: cube.channels(),
        band_centers: cube.band_centers().map(<[f64]>::to_vec),
        mask_file,
        label: label.map(str::to_owned),
    };
    let sp = sidecar_path(path);
    let text = serde_json::to_string_pretty(&header)?;
    fs::write(&sp, text).map_err(|e| Error::io(&sp, e))?;
    Ok(())
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HyperCube> {
    load_cube_with_header(path).map(|(cube, _)| cube)
}

/// Loads a cube and returns the parsed header alongside it.
pub fn load_cube_with_header(path: impl AsRef<Path>) -> Result<(HyperCube, CubeHeader)> {
    let path = path.as_ref();
    let sp = sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let header: CubeHeader =
        serde_json::from_str(&text).map_err(|e| Error::decode("header", e.to_string()))?;

    if header.format_version != FORMAT_VERSION {
        return Err(Error::decode(
            "format_version",
            format!("unsupported version {}", header.format_version),
        ));
    }
    for (name, v) in [
        ("height", header.height),
        ("width", header.width),
        ("channels", header.channels),
    ] {
        if v == 0 {
            return Err(Error::decode(name, "must be positive"));
        }
    }

    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let plane = header.height * header.width * 4;
    if bytes.len() % plane != 0 || bytes.len() / plane != header.channels {
        return Err(Error::decode(
            "channels",
            format!(
                "header declares {} channels of {}x{} but payload holds {} bytes ({} channels)",
                header.channels,
                header.height,
                header.width,
                bytes.len(),
                bytes.len() as f64 / plane as f64
            ),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::decode(
            "data",
            format!("non-finite value at payload index {i}"),
        ));
    }

    if let Some(bc) = &header.band_centers {
        if bc.len() != header.channels {
            return Err(Error::decode(
                "band_centers",
                format!("{} entries for {} channels", bc.len(), header.channels),
            ));
        }
        if bc.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::decode("band_centers", "not strictly increasing"));
        }
    }

    let mask = match &header.mask_file {
        Some(name) => {
            let mp = path.parent().unwrap_or_else(|| Path::new("")).join(name);
            let mb = fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
            let n = header.height * header.width;
            if mb.len() != n.div_ceil(8) {
                return Err(Error::decode(
                    "mask_file",
                    format!("{} bytes for {n} pixels", mb.len()),
                ));
            }
            Some(unpack_mask(&mb, n))
        }
        None => None,
    };

    let cube = HyperCube::from_parts(
        header.height,
        header.width,
        header.channels,
        data,
        header.band_centers.clone(),
        mask,
    )
    .map_err(|e| Error::decode("cube", e.to_string()))?;
    Ok((cube, header))
}
