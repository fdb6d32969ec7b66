//! Planar RGB images in [0, 1], region masking, and the image/heatmap file
//! formats: PNG (8-bit gray or RGB), binary PPM (P6) and PGM (P5).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Map2D, Tensor};

/// Axis-aligned rectangle in integer pixels, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl Rect {
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Self {
        Self { x, y, w, h }
    }

    /// Square of side `side` whose center pixel is (cx, cy).
    pub fn centered(cx: i64, cy: i64, side: i64) -> Self {
        Self::new(cx - side / 2, cy - side / 2, side, side)
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    /// Membership after growing every edge by `margin` pixels.
    pub fn contains_with_margin(&self, x: i64, y: i64, margin: i64) -> bool {
        x >= self.x - margin
            && x < self.x + self.w + margin
            && y >= self.y - margin
            && y < self.y + self.h + margin
    }

    pub fn center(&self) -> (i64, i64) {
        (self.x + self.w / 2, self.y + self.h / 2)
    }

    pub fn area(&self) -> i64 {
        self.w.max(0) * self.h.max(0)
    }

    pub fn intersect(&self, other: &Rect) -> Rect {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        Rect::new(x0, y0, (x1 - x0).max(0), (y1 - y0).max(0))
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersect(other).area();
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Whether the rectangle lies fully inside a width × height image.
    pub fn within(&self, width: usize, height: usize) -> bool {
        self.w >= 1
            && self.h >= 1
            && self.x >= 0
            && self.y >= 0
            && self.x + self.w <= width as i64
            && self.y + self.h <= height as i64
    }

    pub fn to_array(self) -> [i64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(v: [i64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

/// 3-channel planar image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::invalid(format!(
                "rgb image {width}×{height} needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, width * height));
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, channel: usize, y: usize, x: usize, v: f32) {
        self.data[(channel * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], self.data.clone())
            .expect("image dims are valid")
    }

    /// Square crop of side `side` whose center pixel is (cx, cy); rows and
    /// columns beyond the border replicate the nearest edge pixel.
    pub fn crop_clamped(&self, cx: i64, cy: i64, side: usize) -> RgbImage {
        let x0 = cx - (side / 2) as i64;
        let y0 = cy - (side / 2) as i64;
        let mut data = Vec::with_capacity(3 * side * side);
        for c in 0..3 {
            for dy in 0..side as i64 {
                let y = (y0 + dy).clamp(0, self.height as i64 - 1) as usize;
                for dx in 0..side as i64 {
                    let x = (x0 + dx).clamp(0, self.width as i64 - 1) as usize;
                    data.push(self.get(c, y, x));
                }
            }
        }
        RgbImage {
            width: side,
            height: side,
            data,
        }
    }

    /// Bilinear (align-corners) resize of every channel.
    pub fn resize(&self, width: usize, height: usize) -> Result<RgbImage> {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            let m = Map2D::new(self.height, self.width, self.plane(c).to_vec())?;
            let r = crate::tensor::upsample_bilinear(&m, height, width)?;
            data.extend_from_slice(r.values());
        }
        RgbImage::new(width, height, data)
    }

    /// Nearest-neighbour resize; keeps flat colors flat.
    pub fn resize_nearest(&self, width: usize, height: usize) -> RgbImage {
        let mut out = RgbImage::filled(width, height, [0.0; 3]);
        for y in 0..height {
            let sy = (y * self.height / height).min(self.height - 1);
            for x in 0..width {
                let sx = (x * self.width / width).min(self.width - 1);
                out.set_pixel(y, x, self.pixel(sy, sx));
            }
        }
        out
    }
}

/// Sets every pixel inside any of `regions` to exactly 0; the rest is untouched.
/// Regions are clipped to the image.
pub fn mask_regions(image: &RgbImage, regions: &[Rect]) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = (image.width as i64, image.height as i64);
    for r in regions {
        let x0 = r.x.clamp(0, w) as usize;
        let x1 = (r.x + r.w).clamp(0, w) as usize;
        let y0 = r.y.clamp(0, h) as usize;
        let y1 = (r.y + r.h).clamp(0, h) as usize;
        for c in 0..3 {
            for y in y0..y1 {
                let row = (c * image.height + y) * image.width;
                out.data[row + x0..row + x1].fill(0.0);
            }
        }
    }
    out
}

/// Reads extents without decoding pixel data.
pub fn image_dimensions(path: &Path) -> Result<(usize, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        let decoder = png::Decoder::new(std::io::Cursor::new(&bytes));
        let reader = decoder.read_info().map_err(|e| image_err(path, e))?;
        let info = reader.info();
        return Ok((info.width as usize, info.height as usize));
    }
    let (_, w, h, _) = parse_pnm_header(&bytes).ok_or_else(|| Error::Image {
        path: path.to_path_buf(),
        reason: "not a PNG or binary PPM/PGM file".into(),
    })?;
    Ok((w, h))
}

/// Loads PNG (8/16-bit gray or RGB, alpha dropped) or binary PPM/PGM.
/// Grayscale inputs are replicated to three channels.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(path, &bytes)
    } else {
        decode_pnm(path, &bytes)
    }
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<RgbImage> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(image_err(path, "unexpanded palette image")),
    };
    Ok(from_interleaved(w, h, channels, &buf[..info.line_size * h], info.line_size))
}

fn from_interleaved(w: usize, h: usize, channels: usize, buf: &[u8], stride: usize) -> RgbImage {
    let mut img = RgbImage::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let p = y * stride + x * channels;
            let rgb = if channels < 3 {
                let g = buf[p] as f32 / 255.0;
                [g, g, g]
            } else {
                [
                    buf[p] as f32 / 255.0,
                    buf[p + 1] as f32 / 255.0,
                    buf[p + 2] as f32 / 255.0,
                ]
            };
            img.set_pixel(y, x, rgb);
        }
    }
    img
}

/// Parses a binary PNM header: returns (magic digit, width, height, data offset).
fn parse_pnm_header(bytes: &[u8]) -> Option<(u8, usize, usize, usize)> {
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'5' || bytes[1] == b'6') {
        return None;
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos]).ok()?.parse().ok()?;
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 || w == 0 || h == 0 {
        return None;
    }
    Some((bytes[1] - b'0', w, h, pos))
}

fn decode_pnm(path: &Path, bytes: &[u8]) -> Result<RgbImage> {
    let (magic, w, h, offset) = parse_pnm_header(bytes)
        .ok_or_else(|| image_err(path, "not a PNG or 8-bit binary PPM/PGM file"))?;
    let channels = if magic == 6 { 3 } else { 1 };
    let need = w * h * channels;
    if bytes.len() < offset + need {
        return Err(image_err(path, "truncated raster"));
    }
    Ok(from_interleaved(w, h, channels, &bytes[offset..offset + need], w * channels))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn interleave(image: &RgbImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(3 * image.width * image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            out.extend(image.pixel(y, x).map(to_u8));
        }
    }
    out
}

pub fn write_png(image: &RgbImage, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer
        .write_image_data(&interleave(image))
        .map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

pub fn write_ppm(image: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend(interleave(image));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// 8-bit heatmap bytes: min maps to 0 and max to 255; constant maps are all 0.
pub fn heatmap_bytes(map: &Map2D) -> Vec<u8> {
    let norm = crate::tensor::minmax_normalize(map);
    norm.values().iter().map(|&v| to_u8(v)).collect()
}

/// Binary PGM (P5) heatmap. `comments` become `#` header lines.
pub fn encode_pgm(map: &Map2D, comments: &[String]) -> Vec<u8> {
    let mut out = b"P5\n".to_vec();
    for c in comments {
        for line in c.lines() {
            out.extend_from_slice(b"# ");
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
    }
    out.extend(format!("{} {}\n255\n", map.width(), map.height()).into_bytes());
    out.extend(heatmap_bytes(map));
    out
}

pub fn write_pgm(map: &Map2D, path: &Path, comments: &[String]) -> Result<()> {
    std::fs::write(path, encode_pgm(map, comments)).map_err(|e| Error::io(path, e))
}

/// Grayscale PNG heatmap; comments are stored as tEXt chunks.
pub fn write_heatmap_png(map: &Map2D, path: &Path, comments: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), map.width() as u32, map.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    for (i, c) in comments.iter().enumerate() {
        enc.add_text_chunk(format!("Comment{i}"), c.clone())
            .map_err(|e| image_err(path, e))?;
    }
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer
        .write_image_data(&heatmap_bytes(map))
        .map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}
