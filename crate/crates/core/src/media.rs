//! Frames, coordinate grids and quality metrics.
//!
//! Pixels live in `[0, 1]`; PSNR therefore uses a peak value of 1.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use thiserror::Error;

/// Name of the optional frame-order manifest inside a frame directory.
pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("path does not exist: {0}")]
    MissingPath(PathBuf),
    #[error("frames have mixed resolutions: {first:?} vs {other:?} ({path})")]
    MixedResolution {
        first: (usize, usize),
        other: (usize, usize),
        path: PathBuf,
    },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(PathBuf),
    #[error("no frames found in {0}")]
    NoFrames(PathBuf),
    #[error("grid dimensions must be at least 1 (got {height}x{width})")]
    ZeroDimension { height: usize, width: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("invalid image data: {0}")]
    InvalidData(String),
    #[error("pixel count is zero")]
    ZeroPixels,
    #[error("image codec error for {path}: {source}")]
    Codec {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("i/o error for {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// An RGB frame with values in `[0, 1]`, stored row-major as `H x W x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, MediaError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(MediaError::ZeroDimension { height, width });
        }
        if data.len() != height * width * channels {
            return Err(MediaError::InvalidData(format!(
                "expected {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(MediaError::InvalidData(format!(
                "value {v} outside [0, 1]"
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a frame from per-pixel rows (`H*W x C`), clamping into `[0, 1]`.
    /// Non-finite values map to 0.
    pub fn from_clamped(height: usize, width: usize, values: ArrayView2<f64>) -> Self {
        assert_eq!(values.nrows(), height * width, "row count must equal H*W");
        let channels = values.ncols();
        let data = values
            .iter()
            .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        ImageTensor {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self, MediaError> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, 3, data)
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// The frame as an `(H*W) x C` matrix in row-major pixel order.
    pub fn as_rows(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.height * self.width, self.channels), &self.data)
            .expect("length checked at construction")
    }

    pub fn to_rows(&self) -> Array2<f64> {
        self.as_rows().to_owned()
    }

    /// Rounds every value to the nearest 8-bit level, which is what the
    /// exported file contains.
    pub fn to_8bit_levels(&self) -> ImageTensor {
        let data = self
            .data
            .iter()
            .map(|v| (v * 255.0).round() / 255.0)
            .collect();
        ImageTensor { data, ..*self }
    }

    /// Extracts the `h x w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<ImageTensor, MediaError> {
        if top + h > self.height || left + w > self.width {
            return Err(MediaError::InvalidData(format!(
                "crop {h}x{w}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for y in top..top + h {
            let start = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        ImageTensor::new(h, w, self.channels, data)
    }

    fn from_rgb8(img: &image::RgbImage) -> ImageTensor {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        ImageTensor {
            height: h as usize,
            width: w as usize,
            channels: 3,
            data,
        }
    }

    fn to_rgb8(&self) -> image::RgbImage {
        let raw = (0..self.height * self.width)
            .flat_map(|p| {
                let px = &self.data[p * self.channels..(p + 1) * self.channels];
                [0, 1, 2].map(|c| {
                    let v = px.get(c).copied().unwrap_or(px[0]);
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                })
            })
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer sized from dimensions")
    }
}

/// Normalized pixel-centre coordinates for a lattice of frames.
///
/// Points are ordered frame-major, then row-major: `(x, y)` for 2-D grids
/// and `(x, y, t)` for 3-D grids.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid {
    frames: usize,
    height: usize,
    width: usize,
    coords: Array2<f64>,
}

/// `n` evenly spaced values from -1 to +1 inclusive; a single sample sits at 0.
pub fn linspace_unit(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n)
            .map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Spacing between neighbouring samples of [`linspace_unit`].
pub fn unit_step(n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 / (n - 1) as f64
    }
}

pub fn make_coord_grid(height: usize, width: usize) -> Result<CoordGrid, MediaError> {
    if height == 0 || width == 0 {
        return Err(MediaError::ZeroDimension { height, width });
    }
    let xs = linspace_unit(width);
    let ys = linspace_unit(height);
    let mut coords = Array2::zeros((height * width, 2));
    for (y, &yv) in ys.iter().enumerate() {
        for (x, &xv) in xs.iter().enumerate() {
            let mut row = coords.row_mut(y * width + x);
            row[0] = xv;
            row[1] = yv;
        }
    }
    Ok(CoordGrid {
        frames: 1,
        height,
        width,
        coords,
    })
}

/// A space-time grid with `(x, y, t)` coordinates, `t` spaced like `x`/`y`.
pub fn make_coord_grid_3d(
    frames: usize,
    height: usize,
    width: usize,
) -> Result<CoordGrid, MediaError> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(MediaError::ZeroDimension { height, width });
    }
    let plane = make_coord_grid(height, width)?;
    let ts = linspace_unit(frames);
    let per = height * width;
    let mut coords = Array2::zeros((frames * per, 3));
    for (t, &tv) in ts.iter().enumerate() {
        for p in 0..per {
            let mut row = coords.row_mut(t * per + p);
            row[0] = plane.coords[[p, 0]];
            row[1] = plane.coords[[p, 1]];
            row[2] = tv;
        }
    }
    Ok(CoordGrid {
        frames,
        height,
        width,
        coords,
    })
}

impl CoordGrid {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.coords.ncols()
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }

    pub fn coords(&self) -> ArrayView2<'_, f64> {
        self.coords.view()
    }

    /// The same lattice with `offset` added to every point. The result may
    /// leave `[-1, 1]`; networks are defined everywhere.
    pub fn shifted(&self, offset: &[f64]) -> CoordGrid {
        assert_eq!(offset.len(), self.dims(), "offset dimension");
        let mut coords = self.coords.clone();
        for mut row in coords.rows_mut() {
            for (v, o) in row.iter_mut().zip(offset) {
                *v += o;
            }
        }
        CoordGrid { coords, ..*self }
    }
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64, MediaError> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64, MediaError> {
    if a.shape() != b.shape() {
        return Err(MediaError::ShapeMismatch(a.shape(), b.shape()));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// `-10 log10(mse)`, or `+inf` when `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// PSNR over the interior of a frame, excluding `border` pixels on each side.
pub fn psnr_interior(a: &ImageTensor, b: &ImageTensor, border: usize) -> Result<f64, MediaError> {
    if a.shape() != b.shape() {
        return Err(MediaError::ShapeMismatch(a.shape(), b.shape()));
    }
    if 2 * border >= a.height || 2 * border >= a.width {
        return Err(MediaError::ZeroPixels);
    }
    let h = a.height - 2 * border;
    let w = a.width - 2 * border;
    psnr(&a.crop(border, border, h, w)?, &b.crop(border, border, h, w)?)
}

pub fn bits_per_pixel(
    total_bits: u64,
    height: usize,
    width: usize,
    frames: usize,
) -> Result<f64, MediaError> {
    let pixels = height * width * frames;
    if pixels == 0 {
        return Err(MediaError::ZeroPixels);
    }
    Ok(total_bits as f64 / pixels as f64)
}

fn is_supported(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "ppm")
    )
}

fn load_still(path: &Path) -> Result<ImageTensor, MediaError> {
    if !is_supported(path) {
        return Err(MediaError::UnsupportedFormat(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::Unsupported(_) => MediaError::UnsupportedFormat(path.to_path_buf()),
        source => MediaError::Codec {
            path: path.to_path_buf(),
            source,
        },
    })?;
    Ok(ImageTensor::from_rgb8(&img.to_rgb8()))
}

/// Loads a single still or a directory of stills.
///
/// Directory frames are taken from `manifest.txt` when present (one file
/// name per line, `#` comments allowed), otherwise every PNG/PPM file in
/// lexicographic order.
pub fn load_frame_sequence(path: impl AsRef<Path>) -> Result<Vec<ImageTensor>, MediaError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(MediaError::MissingPath(path.to_path_buf()));
    }
    if path.is_file() {
        return Ok(vec![load_still(path)?]);
    }
    let io_err = |source| MediaError::Io {
        path: path.to_path_buf(),
        source,
    };
    let manifest = path.join(MANIFEST_NAME);
    let files: Vec<PathBuf> = if manifest.is_file() {
        fs::read_to_string(&manifest)
            .map_err(io_err)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| path.join(l))
            .collect()
    } else {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_supported(p))
            .collect();
        files.sort();
        files
    };
    if files.is_empty() {
        return Err(MediaError::NoFrames(path.to_path_buf()));
    }
    let mut frames: Vec<ImageTensor> = Vec::with_capacity(files.len());
    for file in &files {
        if !file.exists() {
            return Err(MediaError::MissingPath(file.clone()));
        }
        let frame = load_still(file)?;
        if let Some(first) = frames.first() {
            if (first.height, first.width) != (frame.height, frame.width) {
                return Err(MediaError::MixedResolution {
                    first: (first.height, first.width),
                    other: (frame.height, frame.width),
                    path: file.clone(),
                });
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

/// Writes an 8-bit PNG or binary PPM, chosen by extension.
pub fn save_frame(image: &ImageTensor, path: impl AsRef<Path>) -> Result<(), MediaError> {
    let path = path.as_ref();
    if !is_supported(path) {
        return Err(MediaError::UnsupportedFormat(path.to_path_buf()));
    }
    let codec = |source| MediaError::Codec {
        path: path.to_path_buf(),
        source,
    };
    let rgb = image.to_rgb8();
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        return rgb.save(path).map_err(codec);
    }
    // The generic encoder picks PAM (P7) for .ppm; force binary P6.
    let file = std::fs::File::create(path).map_err(|source| MediaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let encoder = PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
    rgb.write_with_encoder(encoder).map_err(codec)
}
