//! Grayscale frames, temporal stacks and PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use wami_engine::{Shape, Tensor};

use crate::error::{CoreError, Result};

/// 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayFrame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(CoreError::Shape(format!("{} pixels for a {width}x{height} frame", pixels.len())));
        }
        Ok(GrayFrame { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, v: u8) -> Self {
        GrayFrame { width, height, pixels: vec![v; width * height] }
    }

    /// Quantizes intensities in `[0, 1]` (values outside are clamped).
    pub fn from_unit(width: usize, height: usize, values: &[f32]) -> Self {
        let pixels = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        GrayFrame { width, height, pixels }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| CoreError::Png(e.to_string()))?;
        writer.write_image_data(&self.pixels).map_err(|e| CoreError::Png(e.to_string()))?;
        writer.finish().map_err(|e| CoreError::Png(e.to_string()))?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| CoreError::Png(format!("{}: {e}", path.display())))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| CoreError::Png(format!("{}: {e}", path.display())))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let data = &buf[..info.buffer_size()];
        let pixels = match info.color_type {
            png::ColorType::Grayscale => data.to_vec(),
            png::ColorType::GrayscaleAlpha => data.chunks_exact(2).map(|p| p[0]).collect(),
            _ => data
                .chunks_exact(channels)
                .map(|p| ((u32::from(p[0]) * 299 + u32::from(p[1]) * 587 + u32::from(p[2]) * 114 + 500) / 1000) as u8)
                .collect(),
        };
        GrayFrame::new(w, h, pixels)
    }
}

/// Network input value for an 8-bit pixel.
#[inline]
pub fn normalize_pixel(v: u8) -> f32 {
    f32::from(v) / 255.0 - 0.5
}

/// `N` consecutive registered frames around a frame of interest.
#[derive(Clone, Debug)]
pub struct FrameStack {
    pub frames: Vec<GrayFrame>,
    /// Index into `frames` of the frame detections refer to.
    pub center: usize,
    pub frame_id: usize,
}

impl FrameStack {
    pub fn new(frames: Vec<GrayFrame>, frame_id: usize) -> Result<Self> {
        if frames.is_empty() || frames.len() % 2 == 0 {
            return Err(CoreError::Config(format!("a stack needs an odd number of frames, got {}", frames.len())));
        }
        let (w, h) = (frames[0].width, frames[0].height);
        if frames.iter().any(|f| f.width != w || f.height != h) {
            return Err(CoreError::Shape("frames in a stack must share dimensions".into()));
        }
        let center = (frames.len() - 1) / 2;
        Ok(FrameStack { frames, center, frame_id })
    }

    /// The `n`-frame stack centered on `center` of a sequence.
    pub fn from_sequence(seq: &[GrayFrame], center: usize, n: usize) -> Result<Self> {
        let half = n / 2;
        if n % 2 == 0 || center < half || center + half >= seq.len() {
            return Err(CoreError::Config(format!(
                "cannot center a {n}-frame stack on frame {center} of a {}-frame sequence",
                seq.len()
            )));
        }
        FrameStack::new(seq[center - half..=center + half].to_vec(), center)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    /// Normalized `(1, N, h, w)` crop with origin `(x0, y0)`; pixels outside
    /// the frame read as zero after normalization.
    pub fn crop(&self, x0: isize, y0: isize, w: usize, h: usize) -> Tensor<f32> {
        let mut t = Tensor::zeros(Shape::new(1, self.len(), h, w));
        let (fw, fh) = (self.width() as isize, self.height() as isize);
        let xs = x0.max(0)..(x0 + w as isize).min(fw);
        if xs.is_empty() {
            return t;
        }
        for (c, frame) in self.frames.iter().enumerate() {
            let plane = &mut t.data_mut()[c * w * h..(c + 1) * w * h];
            for y in y0.max(0)..(y0 + h as isize).min(fh) {
                let src = &frame.pixels[(y * fw + xs.start) as usize..(y * fw + xs.end) as usize];
                let row = ((y - y0) as usize) * w;
                let dst = &mut plane[row + (xs.start - x0) as usize..row + (xs.end - x0) as usize];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = normalize_pixel(s);
                }
            }
        }
        t
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        self.crop(0, 0, self.width(), self.height())
    }
}
