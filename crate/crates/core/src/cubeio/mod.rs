//! Hyperspectral cube data model, on-disk format and the ingestion pipeline
//! (trim, reduce, crop, density filter, split).

mod format;
mod manifest;
mod prep;

pub use format::{load_cube, load_cube_with_header, save_cube, CubeHeader, FORMAT_VERSION};
pub use manifest::{split_dataset, Dataset, DatasetManifest, Labeled, ManifestEntry};
pub use prep::{
    average_reduce_channels, crop_count, crop_windows, density_filter, foreground_fraction,
    minmax_normalize, trim_channels,
};

use crate::error::{Error, Result};

/// A height × width × channels reflectance raster.
///
/// Storage is band-sequential: all pixels of channel 0 in row-major order,
/// then channel 1, and so on. This is also the file payload layout.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    band_centers: Option<Vec<f64>>,
    mask: Option<Vec<bool>>,
}

impl HyperCube {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::arg(format!(
                "cube dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::arg(format!(
                "cube data has {} values, expected {expected}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!("cube value at index {i} is not finite")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            band_centers: None,
            mask: None,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![0.0; height * width * channels],
        )
    }

    /// Builds a cube from a closure evaluated at every `(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for r in 0..height {
                for col in 0..width {
                    data.push(f(r, col, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn with_band_centers(mut self, centers: Vec<f64>) -> Result<Self> {
        if centers.len() != self.channels {
            return Err(Error::arg(format!(
                "band_centers has {} entries for {} channels",
                centers.len(),
                self.channels
            )));
        }
        if centers.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::arg("band_centers must be strictly increasing"));
        }
        self.band_centers = Some(centers);
        Ok(self)
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.height * self.width {
            return Err(Error::arg(format!(
                "mask has {} entries for a {}x{} cube",
                mask.len(),
                self.height,
                self.width
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn without_mask(mut self) -> Self {
        self.mask = None;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Raw band-sequential payload.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn band_centers(&self) -> Option<&[f64]> {
        self.band_centers.as_deref()
    }

    /// Row-major foreground map, `true` marks kernel pixels.
    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    /// All pixels of one channel, row-major.
    pub fn band(&self, channel: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn bands(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.pixels())
    }

    /// Multiplies channel `c` by `scales[c]`.
    pub fn scale_channels(&self, scales: &[f32]) -> Result<Self> {
        if scales.len() != self.channels {
            return Err(Error::arg(format!(
                "{} scale factors for {} channels",
                scales.len(),
                self.channels
            )));
        }
        let n = self.pixels();
        let mut out = self.clone();
        for (band, &s) in out.data.chunks_exact_mut(n).zip(scales) {
            band.iter_mut().for_each(|v| *v *= s);
        }
        Ok(out)
    }

    pub(crate) fn from_parts(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
        band_centers: Option<Vec<f64>>,
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let mut cube = Self::new(height, width, channels, data)?;
        if let Some(bc) = band_centers {
            cube = cube.with_band_centers(bc)?;
        }
        if let Some(m) = mask {
            cube = cube.with_mask(m)?;
        }
        Ok(cube)
    }
}

/// A cube with its class label and a stable identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCube {
    pub id: String,
    pub cube: HyperCube,
    pub label: String,
    pub label_index: usize,
}

impl Labeled for LabeledCube {
    fn label_index(&self) -> usize {
        self.label_index
    }
}
