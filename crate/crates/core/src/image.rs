//! RGB images with a traffic-light label, binary NetPBM (P6) I/O and the
//! `filename,label` index format.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::labels::TrafficLightState;

/// Pixels are stored row-major `H × W × 3`, each channel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub label: TrafficLightState,
}

impl LabeledImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, label: TrafficLightState) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::shape("image", width * height * 3, pixels.len()));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(LabeledImage { width, height, pixels, label })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        self.pixels.iter().skip(c).step_by(3).sum::<f64>() / (self.width * self.height) as f64
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<LabeledImage> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(h * w * 3);
        for y in top..top + h {
            let o = (y * self.width + left) * 3;
            pixels.extend_from_slice(&self.pixels[o..o + w * 3]);
        }
        Ok(LabeledImage { width: w, height: h, pixels, label: self.label })
    }

    pub fn center_crop(&self, size: usize) -> Result<LabeledImage> {
        if size > self.height || size > self.width {
            return Err(Error::InvalidArgument(format!("center crop {size} exceeds {}x{}", self.height, self.width)));
        }
        self.crop((self.height - size) / 2, (self.width - size) / 2, size, size)
    }

    /// Square crop at a uniformly drawn offset.
    pub fn random_crop<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<LabeledImage> {
        if size > self.height || size > self.width {
            return Err(Error::InvalidArgument(format!("random crop {size} exceeds {}x{}", self.height, self.width)));
        }
        let top = rng.gen_range(0..=self.height - size);
        let left = rng.gen_range(0..=self.width - size);
        self.crop(top, left, size, size)
    }

    /// Channel-major copy `3 × H × W`.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        out
    }
}

fn pnm_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line: 1,
        msg: msg.into(),
    }
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn header_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Decodes a binary P6 image (maxval up to 65535).
pub fn decode_p6(bytes: &[u8], source: &str, label: TrafficLightState) -> Result<LabeledImage> {
    let mut pos = 0;
    if header_token(bytes, &mut pos).as_deref() != Some("P6") {
        return Err(pnm_err(source, "not a binary P6 file"));
    }
    let mut num = |what: &str| -> Result<usize> {
        header_token(bytes, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| pnm_err(source, format!("bad {what} in header")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(pnm_err(source, format!("unsupported geometry {w}x{h} maxval {maxval}")));
    }
    pos += 1; // single whitespace byte before the raster
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = w * h * 3 * bps;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| pnm_err(source, format!("raster truncated: need {need} bytes")))?;
    let scale = maxval as f64;
    let pixels: Vec<f64> = if bps == 1 {
        raster.iter().map(|&b| (b as f64 / scale).min(1.0)).collect()
    } else {
        raster
            .chunks(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / scale).min(1.0))
            .collect()
    };
    LabeledImage::new(w, h, pixels, label)
}

/// Encodes with maxval 255.
pub fn encode_p6(img: &LabeledImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

/// Rounds pixels to the 8-bit grid so an image survives a P6 round trip.
pub fn quantize(img: &mut LabeledImage) {
    for p in &mut img.pixels {
        *p = (*p * 255.0).round() / 255.0;
    }
}

pub fn read_p6(path: impl AsRef<Path>, label: TrafficLightState) -> Result<LabeledImage> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_p6(&bytes, &path.display().to_string(), label)
}

pub fn write_p6(path: impl AsRef<Path>, img: &LabeledImage) -> Result<()> {
    let path = path.as_ref();
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(&encode_p6(img)).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Writes `img_00000.ppm …` plus `labels.csv` into `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, images: &[LabeledImage]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index = dir.join("labels.csv");
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&index)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", index.display())))?;
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("labels.csv: {e}"));
    w.write_record(["filename", "label"]).map_err(csv_err)?;
    for (i, img) in images.iter().enumerate() {
        let name = format!("img_{i:05}.ppm");
        write_p6(dir.join(&name), img)?;
        w.write_record([name.as_str(), img.label.name()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&index, e))?;
    Ok(index)
}

/// Loads every image listed in a `filename,label` CSV; file names are
/// resolved relative to the CSV's directory.
pub fn load_dataset(index: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let index = index.as_ref();
    let base = index.parent().unwrap_or(Path::new("."));
    let src = index.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(index)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(index, io),
            other => Error::InvalidArgument(format!("{src}: {other:?}")),
        })?;
    let header = rdr.headers().map_err(|e| pnm_err(&src, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["filename", "label"] {
        return Err(pnm_err(&src, "expected header filename,label"));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| pnm_err(&src, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Parse { path: src.clone(), line, msg };
        if rec.len() != 2 {
            return Err(bad(format!("expected 2 fields, found {}", rec.len())));
        }
        let label: TrafficLightState = rec[1].parse().map_err(|e: Error| bad(e.to_string()))?;
        out.push(read_p6(base.join(&rec[0]), label)?);
    }
    Ok(out)
}
