//! Reader and writer for the IDX binary format used by MNIST-style image
//! and label files (big-endian header, unsigned byte payload).

use std::fs;
use std::path::Path;

use crate::data::{Sample, SampleId};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw grayscale images, `rows × cols` bytes each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<u8>>,
}

fn header(bytes: &[u8], magic: u32, ndims: usize) -> Result<Vec<usize>> {
    let word = |i: usize| -> Result<u32> {
        let at = 4 * i;
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::Format { offset: at as u64, message: "truncated header".into() })
    };
    let found = word(0)?;
    if found != magic {
        return Err(Error::Format { offset: 0, message: format!("bad magic {found:#010x}, expected {magic:#010x}") });
    }
    (1..=ndims)
        .map(|i| {
            let d = word(i)?;
            if d == 0 && i > 1 {
                return Err(Error::Format { offset: 4 * i as u64, message: "zero dimension".into() });
            }
            Ok(d as usize)
        })
        .collect()
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    let end = start.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Format {
        offset: bytes.len() as u64,
        message: format!("truncated payload: {} bytes present, header promises {}", bytes.len(), start + len),
    })?;
    if end != bytes.len() {
        return Err(Error::Format { offset: end as u64, message: "trailing bytes after payload".into() });
    }
    Ok(&bytes[start..end])
}

pub fn decode_images(bytes: &[u8]) -> Result<IdxImages> {
    let dims = header(bytes, IMAGE_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let data = payload(bytes, 16, n * rows * cols)?;
    Ok(IdxImages { rows, cols, images: data.chunks(rows * cols).map(<[u8]>::to_vec).collect() })
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let n = header(bytes, LABEL_MAGIC, 1)?[0];
    Ok(payload(bytes, 8, n)?.to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.images.len() * images.rows * images.cols);
    for w in [IMAGE_MAGIC, images.images.len() as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    for img in &images.images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Bilinear resampling of a single-channel image to `side × side`.
pub fn resize(image: &[f32], rows: usize, cols: usize, side: usize) -> Vec<f32> {
    if rows == side && cols == side {
        return image.to_vec();
    }
    let mut out = Vec::with_capacity(side * side);
    let scale = |n: usize| if side > 1 { (n - 1) as f64 / (side - 1) as f64 } else { 0.0 };
    let (sy, sx) = (scale(rows), scale(cols));
    for y in 0..side {
        let fy = y as f64 * sy;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        let y1 = (y0 + 1).min(rows - 1);
        for x in 0..side {
            let fx = x as f64 * sx;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let x1 = (x0 + 1).min(cols - 1);
            let p = |r: usize, c: usize| image[r * cols + c] as f64;
            let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
            let bottom = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
            out.push((top * (1.0 - ty) + bottom * ty) as f32);
        }
    }
    out
}

/// Loads an image file and its label file into samples with pixels scaled
/// to [0, 1], optionally resized to `side × side`. Nothing is returned
/// unless both files parse completely.
pub fn load_idx_images(images: &Path, labels: &Path, side: Option<usize>) -> Result<Vec<Sample>> {
    let img_bytes = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl_bytes = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let imgs = decode_images(&img_bytes)?;
    let lbls = decode_labels(&lbl_bytes)?;
    if imgs.images.len() != lbls.len() {
        return Err(Error::Input(format!("{} images but {} labels", imgs.images.len(), lbls.len())));
    }
    Ok(imgs
        .images
        .iter()
        .zip(&lbls)
        .enumerate()
        .map(|(i, (img, &label))| {
            let scaled: Vec<f32> = img.iter().map(|&b| b as f32 / 255.0).collect();
            let pixels = match side {
                Some(s) => resize(&scaled, imgs.rows, imgs.cols, s),
                None => scaled,
            };
            Sample { id: SampleId { class: label as usize, index: i as u64, domain: 0 }, label: label as usize, pixels }
        })
        .collect())
}
