//! Image loading, saving and the in-memory image representation.
//!
//! Images are held as `f64` in `[0, 1]`, channel-major (`[c][row][col]`),
//! three channels in red, green, blue order. Only 8-bit PNG and binary PPM
//! (`P6`) are read and written.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Three-channel image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RasterImage {
    /// Builds an image from channel-major data, rejecting out-of-range or
    /// non-finite values.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!("zero-sized image {height}x{width}")));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {height}x{width}x3, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidImage(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from arbitrary finite values, clamping into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite pixel value {v}")));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(height, width, data)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for r in 0..height {
                for x in 0..width {
                    data.push(f(c, r, x));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; CHANNELS * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    /// Rounds every value to the nearest 8-bit level, exactly as a
    /// save/load round trip would.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| quantize(v) as f64 / 255.0).collect(),
        }
    }

    /// Rearranges pixels: output pixel `(r, c)` of an `h x w` image is taken
    /// from the source pixel returned by `src(r, c)`.
    pub(crate) fn remap(&self, h: usize, w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * h * w);
        for ch in 0..CHANNELS {
            for r in 0..h {
                for c in 0..w {
                    let (sr, sc) = src(r, c);
                    data.push(self.get(ch, sr, sc));
                }
            }
        }
        Self { height: h, width: w, data }
    }

    /// Nearest-neighbour resample to `h x w`.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Self {
        if h == self.height && w == self.width {
            return self.clone();
        }
        let (sh, sw) = (self.height, self.width);
        self.remap(h, w, |r, c| ((r * sh) / h, (c * sw) / w))
    }
}

/// `{0, 1}`-valued mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidImage("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width) as u8).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn same_shape(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }
}

/// `round(v * 255)` with halves rounded away from zero, saturated to a byte.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Decoded 8-bit raster before conversion.
struct Decoded {
    height: usize,
    width: usize,
    channels: usize,
    bytes: Vec<u8>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn decode(path: &Path) -> Result<Decoded> {
    let bytes = read_file(path)?;
    let unsupported = |reason: &str| Error::UnsupportedFormat { path: path.to_path_buf(), reason: reason.into() };
    let decoded = if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(&bytes).map_err(|r| unsupported(&r))?
    } else if bytes.starts_with(b"P6") {
        decode_ppm(&bytes).map_err(|r| unsupported(&r))?
    } else {
        return Err(unsupported("expected 8-bit PNG or binary PPM (P6)"));
    };
    if decoded.height == 0 || decoded.width == 0 {
        return Err(Error::EmptyImage(path.to_path_buf()));
    }
    Ok(decoded)
}

fn decode_png(bytes: &[u8]) -> std::result::Result<Decoded, String> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format!("unsupported bit depth {:?}", info.bit_depth));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err("unexpanded palette".into()),
    };
    buf.truncate(info.buffer_size());
    Ok(Decoded { height: info.height as usize, width: info.width as usize, channels, bytes: buf })
}

fn decode_ppm(bytes: &[u8]) -> std::result::Result<Decoded, String> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated PPM header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("malformed PPM header".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed PPM header number")?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported PPM maxval {maxval}, only 255"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after PPM maxval".into());
    }
    pos += 1;
    let n = width.checked_mul(height).and_then(|p| p.checked_mul(3)).ok_or("PPM dimensions overflow")?;
    let payload = bytes.get(pos..pos + n).ok_or("truncated PPM payload")?;
    Ok(Decoded { height, width, channels: 3, bytes: payload.to_vec() })
}

/// Loads an 8-bit PNG or P6 PPM as an RGB image in `[0, 1]`. Grayscale
/// sources are replicated across channels; alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let d = decode(path.as_ref())?;
    let n = d.height * d.width;
    let mut data = vec![0.0; CHANNELS * n];
    for p in 0..n {
        for c in 0..CHANNELS {
            let src = if d.channels < 3 { 0 } else { c };
            data[c * n + p] = d.bytes[p * d.channels + src] as f64 / 255.0;
        }
    }
    RasterImage::new(d.height, d.width, data)
}

/// Loads a grayscale mask, thresholding at 127.5/255. Colour sources use
/// the mean of their three channels.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let d = decode(path.as_ref())?;
    let n = d.height * d.width;
    let data = (0..n)
        .map(|p| {
            let px = &d.bytes[p * d.channels..(p + 1) * d.channels];
            let v = if d.channels >= 3 {
                (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0
            } else {
                px[0] as f64
            };
            (v > 127.5) as u8
        })
        .collect();
    BinaryMask::new(d.height, d.width, data)
}

fn is_ppm(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Writes `img` as 8-bit PPM (`.ppm` extension) or PNG (anything else).
pub fn save_image(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = img.pixels();
    let mut interleaved = Vec::with_capacity(3 * n);
    for p in 0..n {
        for c in 0..CHANNELS {
            interleaved.push(quantize(img.data[c * n + p]));
        }
    }
    let bytes = if is_ppm(path) {
        let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
        out.extend_from_slice(&interleaved);
        out
    } else {
        encode_png(img.width, img.height, png::ColorType::Rgb, &interleaved)?
    };
    write_atomic(path, &bytes)
}

/// Writes a single-channel `[0, 1]` map as 8-bit grayscale PNG.
pub fn save_gray(height: usize, width: usize, values: &[f64], path: impl AsRef<Path>) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::ShapeMismatch(format!("{} values for {height}x{width}", values.len())));
    }
    let bytes: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    write_atomic(path.as_ref(), &encode_png(width, height, png::ColorType::Grayscale, &bytes)?)
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|&v| v * 255).collect();
    write_atomic(path.as_ref(), &encode_png(mask.width, mask.height, png::ColorType::Grayscale, &bytes)?)
}

fn encode_png(width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let encode_err = |e: png::EncodingError| Error::InvalidImage(format!("png encoding failed: {e}"));
        let mut writer = enc.write_header().map_err(encode_err)?;
        writer.write_image_data(bytes).map_err(encode_err)?;
    }
    Ok(out)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ppm(w: usize, h: usize, fill: u8) -> Vec<u8> {
        let mut b = format!("P6\n{w} {h}\n255\n").into_bytes();
        b.extend(std::iter::repeat_n(fill, w * h * 3));
        b
    }

    fn write(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn ppm_byte_mapping() {
        let dir = tempfile::tempdir().unwrap();
        let img = load_image(write(&dir, "w.ppm", &ppm(2, 2, 255))).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
        let img = load_image(write(&dir, "b.ppm", &ppm(2, 2, 0))).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        let img = load_image(write(&dir, "g.ppm", &ppm(2, 2, 128))).unwrap();
        assert!((img.get(0, 0, 0) - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn ppm_header_comments() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = b"P6 # comment\n3 # w\n1\n255\n".to_vec();
        b.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255]);
        let img = load_image(write(&dir, "c.ppm", &b)).unwrap();
        assert_eq!((img.height(), img.width()), (1, 3));
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(1, 0, 1), 1.0);
        assert_eq!(img.get(2, 0, 2), 1.0);
        assert_eq!(img.get(2, 0, 0), 0.0);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image(dir.path().join("nope.png")), Err(Error::MissingFile(_))));
        let p = write(&dir, "x.jpg", b"\xff\xd8\xff\xe0garbage");
        assert!(matches!(load_image(p), Err(Error::UnsupportedFormat { .. })));
        let p = write(&dir, "z.ppm", &ppm(0, 4, 0));
        assert!(matches!(load_image(p), Err(Error::EmptyImage(_))));
        let p = write(&dir, "t.ppm", b"P6\n4 4\n255\n\x00\x00");
        assert!(matches!(load_image(p), Err(Error::UnsupportedFormat { .. })));
        let p = write(&dir, "m.ppm", b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00");
        assert!(matches!(load_image(p), Err(Error::UnsupportedFormat { .. })));
    }

    #[test]
    fn save_rounding() {
        let dir = tempfile::tempdir().unwrap();
        let img = RasterImage::from_fn(1, 2, |_, _, c| if c == 0 { 1.0 } else { 0.5 }).unwrap();
        let p = dir.path().join("o.ppm");
        save_image(&img, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let payload = &bytes[bytes.len() - 6..];
        assert_eq!(payload, &[255, 255, 255, 128, 128, 128]);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.0), 255);
    }

    #[test]
    fn mask_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        save_gray(1, 4, &[1.0, 0.0, 128.0 / 255.0, 127.0 / 255.0], &p).unwrap();
        let m = load_mask(&p).unwrap();
        assert_eq!(m.data(), &[1, 0, 1, 0]);
        let all = dir.path().join("a.png");
        save_gray(2, 2, &[1.0; 4], &all).unwrap();
        assert_eq!(load_mask(&all).unwrap().count(), 4);
        save_gray(2, 2, &[0.0; 4], &all).unwrap();
        assert!(load_mask(&all).unwrap().is_empty());
    }

    #[test]
    fn png_roundtrip_and_gray_expansion() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        save_gray(2, 3, &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0], &p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.channel(0), img.channel(2));
        assert_eq!(img.get(1, 1, 2), 1.0);
    }

    #[test]
    fn resize_nearest_shape() {
        let img = RasterImage::from_fn(4, 8, |_, r, c| (r * 8 + c) as f64 / 32.0).unwrap();
        let r = img.resize_nearest(8, 4);
        assert_eq!((r.height(), r.width()), (8, 4));
        assert_eq!(r.get(0, 7, 3), img.get(0, 3, 6));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn save_load_error_within_one_level(
            h in 1usize..12, w in 1usize..12, seed in any::<u64>(), ppm_ext in any::<bool>()
        ) {
            use rand::Rng;
            let mut rng = crate::rng::prng(seed);
            let data: Vec<f64> = (0..3 * h * w).map(|_| rng.random::<f64>()).collect();
            let img = RasterImage::new(h, w, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join(if ppm_ext { "r.ppm" } else { "r.png" });
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-9);
            }
            prop_assert_eq!(back, img.quantized());
        }

        #[test]
        fn random_payload_decodes_finite(h in 1usize..10, w in 1usize..10, payload in proptest::collection::vec(any::<u8>(), 300)) {
            let mut b = format!("P6\n{w} {h}\n255\n").into_bytes();
            b.extend_from_slice(&payload[..3 * w * h]);
            let dir = tempfile::tempdir().unwrap();
            let img = load_image(write(&dir, "f.ppm", &b)).unwrap();
            prop_assert!(img.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }
}
