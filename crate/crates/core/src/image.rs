//! Image tensors, PNG/JPEG IO and resampling.
//!
//! Pixel values live in `[0, 1]` as `f32`; 8-bit quantization happens only
//! when encoding to or decoding from files.

use std::path::Path;

use bfr_autograd::{Float, SparseRows, Tensor};
use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// `height × width × channels` image, interleaved (HWC) storage.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!(
                "image size must be positive, got {height}x{width}"
            ));
        }
        if channels != 1 && channels != 3 {
            return Err(invalid!("images have 1 or 3 channels, got {channels}"));
        }
        if data.len() != height * width * channels {
            return Err(invalid!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("image contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Values rounded to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| quantize(v) as f32 / 255.0)
            .collect();
        Self { data, ..*self }
    }

    /// ITU-R BT.601 luma plane in `f64`, row-major.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.iter().map(|&v| v as f64).collect();
        }
        self.data
            .chunks(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Single-item NCHW tensor.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        batch_to_tensor(std::slice::from_ref(self)).expect("single image batch")
    }

    /// Reads item `n` of an NCHW batch, clamping into `[0, 1]`.
    pub fn from_tensor<T: Float>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let (bn, c, h, w) = t.dims4()?;
        if n >= bn {
            return Err(invalid!("batch item {n} out of {bn}"));
        }
        let plane = h * w;
        let src = &t.data()[n * c * plane..(n + 1) * c * plane];
        let mut data = Vec::with_capacity(c * plane);
        for p in 0..plane {
            for ch in 0..c {
                data.push((src[ch * plane + p].as_f64() as f32).clamp(0.0, 1.0));
            }
        }
        Self::new(h, w, c, data)
    }
}

/// Stacks equally-shaped images into an NCHW tensor.
pub fn batch_to_tensor<T: Float>(images: &[ImageTensor]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| invalid!("empty image batch"))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if !img.same_shape(first) {
            return Err(invalid!("batch mixes image shapes"));
        }
        for ch in 0..c {
            data.extend(
                img.data
                    .iter()
                    .skip(ch)
                    .step_by(c)
                    .map(|&v| T::of(v as f64)),
            );
        }
    }
    Ok(Tensor::new(vec![images.len(), c, h, w], data)?)
}

/// `C × H × W` activation map (channel-major storage).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Float> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(invalid!("feature map dimensions must be positive"));
        }
        if data.len() != channels * height * width {
            return Err(invalid!(
                "feature map {channels}x{height}x{width} needs {} values",
                channels * height * width
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("feature map contains non-finite values"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("validated shape")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 {
            return Err(invalid!("expected a single-item batch, got {n}"));
        }
        Self::new(c, h, w, t.data().to_vec())
    }

    /// Splits the channel axis into two equal halves.
    pub fn split_channels(&self) -> Result<(Self, Self)> {
        if self.channels % 2 != 0 {
            return Err(invalid!("cannot split {} channels evenly", self.channels));
        }
        let half = self.channels / 2 * self.height * self.width;
        let (a, b) = self.data.split_at(half);
        Ok((
            Self {
                channels: self.channels / 2,
                data: a.to_vec(),
                ..*self
            },
            Self {
                channels: self.channels / 2,
                data: b.to_vec(),
                ..*self
            },
        ))
    }

    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        if self.height != other.height || self.width != other.width {
            return Err(invalid!(
                "spatial mismatch {}x{} vs {}x{}",
                self.height,
                self.width,
                other.height,
                other.width
            ));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            channels: self.channels + other.channels,
            data,
            ..*self
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Discard an alpha channel instead of rejecting the file.
    pub drop_alpha: bool,
}

/// Decodes a PNG or JPEG into an RGB image in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    load_image_with(path, LoadOptions::default())
}

pub fn load_image_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<ImageTensor> {
    let path = path.as_ref();
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::Decode {
        path: path.into(),
        reason: e.to_string(),
    })?;
    if decoded.color().has_alpha() && !opts.drop_alpha {
        return Err(Error::Decode {
            path: path.into(),
            reason: format!(
                "{:?} has an alpha channel; enable alpha dropping to load it",
                decoded.color()
            ),
        });
    }
    from_dynamic(&decoded)
}

fn from_dynamic(img: &DynamicImage) -> Result<ImageTensor> {
    let rgb = img.to_rgb8();
    let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    ImageTensor::new(rgb.height() as usize, rgb.width() as usize, 3, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Png,
    Jpeg,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "png" => Some(Self::Png),
            "jpg" | "jpeg" => Some(Self::Jpeg),
            _ => None,
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn color_type(channels: usize) -> ExtendedColorType {
    if channels == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    }
}

fn encode(img: &ImageTensor, format: ImageFormat, quality: Option<u8>) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let mut out = Vec::new();
    let res = match format {
        ImageFormat::Png => {
            if quality.is_some() {
                log::warn!("quality setting ignored for PNG output");
            }
            image::codecs::png::PngEncoder::new(&mut out).write_image(
                &bytes,
                w,
                h,
                color_type(img.channels),
            )
        }
        ImageFormat::Jpeg => {
            let q = quality.unwrap_or(90);
            if !(1..=100).contains(&q) {
                return Err(invalid!("JPEG quality must be in 1..=100, got {q}"));
            }
            JpegEncoder::new_with_quality(&mut out, q).write_image(
                &bytes,
                w,
                h,
                color_type(img.channels),
            )
        }
    };
    res.map_err(|e| invalid!("encoding failed: {e}"))?;
    Ok(out)
}

/// Writes `img` as 8-bit PNG or JPEG. `quality` applies to JPEG only.
pub fn save_image(
    img: &ImageTensor,
    path: impl AsRef<Path>,
    format: ImageFormat,
    quality: Option<u8>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(img, format, quality)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Encodes to JPEG at `quality` and decodes again, in memory.
pub fn jpeg_roundtrip(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let bytes = encode(img, ImageFormat::Jpeg, Some(quality))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg)
        .map_err(|e| invalid!("JPEG decode failed: {e}"))?;
    let rgb = from_dynamic(&decoded)?;
    if img.channels == 1 {
        let data = rgb.data.chunks(3).map(|p| p[0]).collect();
        return ImageTensor::new(rgb.height, rgb.width, 1, data);
    }
    Ok(rgb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMethod {
    Bicubic,
    Bilinear,
    Nearest,
}

const CUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (CUBIC_A + 2.0) * x.powi(3) - (CUBIC_A + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        CUBIC_A * x.powi(3) - 5.0 * CUBIC_A * x.powi(2) + 8.0 * CUBIC_A * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Normalized 1-D resampling taps from `in_len` to `out_len` samples.
///
/// Pixel centres map as `src = (dst + 0.5) / scale - 0.5`. When shrinking,
/// the kernel is stretched by `1/scale` to low-pass before sampling. Taps
/// beyond the edge are clamped onto the border sample.
pub fn resize_taps(in_len: usize, out_len: usize, method: ResizeMethod) -> SparseRows {
    let scale = out_len as f64 / in_len as f64;
    if method == ResizeMethod::Nearest {
        return (0..out_len)
            .map(|i| {
                vec![(
                    (((i as f64 + 0.5) / scale).floor() as usize).min(in_len - 1),
                    1.0,
                )]
            })
            .collect();
    }
    let (kernel, support): (fn(f64) -> f64, f64) = match method {
        ResizeMethod::Bilinear => (|x: f64| (1.0 - x.abs()).max(0.0), 1.0),
        _ => (cubic_kernel, 2.0),
    };
    let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let radius = support * stretch;
            let lo = (center - radius).floor() as isize;
            let hi = (center + radius).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let wt = kernel((j as f64 - center) / stretch);
                if wt == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as isize - 1) as usize;
                match taps.iter_mut().find(|(k, _)| *k == idx) {
                    Some(t) => t.1 += wt,
                    None => taps.push((idx, wt)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Resamples to `out_h × out_w`; output is clamped into `[0, 1]`.
pub fn resize(
    img: &ImageTensor,
    out_h: usize,
    out_w: usize,
    method: ResizeMethod,
) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid!(
            "resize target must be positive, got {out_h}x{out_w}"
        ));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let rows = resize_taps(img.height, out_h, method);
    let cols = resize_taps(img.width, out_w, method);
    let c = img.channels;
    let mut tmp = vec![0.0f64; img.height * out_w * c];
    for y in 0..img.height {
        for (j, taps) in cols.iter().enumerate() {
            for ch in 0..c {
                tmp[(y * out_w + j) * c + ch] = taps
                    .iter()
                    .map(|&(x, wt)| wt * img.get(y, x, ch) as f64)
                    .sum();
            }
        }
    }
    let mut data = vec![0.0f32; out_h * out_w * c];
    for (i, taps) in rows.iter().enumerate() {
        for j in 0..out_w {
            for ch in 0..c {
                let v: f64 = taps
                    .iter()
                    .map(|&(y, wt)| wt * tmp[(y * out_w + j) * c + ch])
                    .sum();
                data[(i * out_w + j) * c + ch] = (v as f32).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(out_h, out_w, c, data)
}
