//! IDX reader/writer for digit images (MNIST, USPS re-packaged as IDX).
//!
//! Headers are big-endian: a magic word (`0x00000803` for rank-3 unsigned
//! byte images, `0x00000801` for rank-1 labels) followed by one `u32` per
//! dimension, then raw bytes.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use super::{DomainDataset, DomainTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
/// Images are padded or cropped to this side length.
pub const TARGET_SIDE: usize = 28;

const DIGIT_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Truncated(format!("missing {what}")))?;
    Ok(u32::from_be_bytes(b))
}

fn check_magic(r: &mut impl Read, expected: u32) -> Result<()> {
    let found = read_u32(r, "magic number")?;
    if found != expected {
        return Err(Error::BadMagic { found, expected });
    }
    Ok(())
}

fn read_payload(r: &mut impl Read, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    r.take(len as u64).read_to_end(&mut data)?;
    if data.len() != len {
        return Err(Error::Truncated(format!("{what}: expected {len} bytes, found {}", data.len())));
    }
    Ok(data)
}

/// Reads at most `limit` images (all when `None`).
pub fn read_idx_images(mut r: impl Read, limit: Option<usize>) -> Result<IdxImages> {
    check_magic(&mut r, IMAGE_MAGIC)?;
    let total = read_u32(&mut r, "image count")? as usize;
    let rows = read_u32(&mut r, "row count")? as usize;
    let cols = read_u32(&mut r, "column count")? as usize;
    let count = limit.map_or(total, |l| l.min(total));
    let pixels = read_payload(&mut r, count * rows * cols, "image data")?;
    if count == total {
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Truncated("image file longer than its header declares".into()));
        }
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn read_idx_labels(mut r: impl Read, limit: Option<usize>) -> Result<Vec<u8>> {
    check_magic(&mut r, LABEL_MAGIC)?;
    let total = read_u32(&mut r, "label count")? as usize;
    let count = limit.map_or(total, |l| l.min(total));
    read_payload(&mut r, count, "label data")
}

pub fn write_idx_images(w: &mut impl Write, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let per = rows * cols;
    if per == 0 || !pixels.len().is_multiple_of(per) {
        return Err(Error::shape("write_idx_images", format!("{} bytes for {rows}×{cols} images", pixels.len())));
    }
    for v in [IMAGE_MAGIC, (pixels.len() / per) as u32, rows as u32, cols as u32] {
        w.write_all(&v.to_be_bytes())?;
    }
    w.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(w: &mut impl Write, labels: &[u8]) -> Result<()> {
    w.write_all(&LABEL_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    Ok(())
}

/// Places a `rows × cols` image centred on a 28×28 canvas, zero-padding
/// smaller images and centre-cropping larger ones; pixels scale to `[0, 1]`.
fn to_canvas(img: &[u8], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; TARGET_SIDE * TARGET_SIDE];
    // canvas position of source pixel 0; negative when cropping
    let row_off = (TARGET_SIDE as isize - rows as isize) / 2;
    let col_off = (TARGET_SIDE as isize - cols as isize) / 2;
    for r in 0..rows {
        let cr = r as isize + row_off;
        if !(0..TARGET_SIDE as isize).contains(&cr) {
            continue;
        }
        for c in 0..cols {
            let cc = c as isize + col_off;
            if !(0..TARGET_SIDE as isize).contains(&cc) {
                continue;
            }
            out[cr as usize * TARGET_SIDE + cc as usize] = f64::from(img[r * cols + c]) / 255.0;
        }
    }
    out
}

/// Loads an image/label IDX pair as a 784-dimensional digit dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<DomainDataset> {
    let images = read_idx_images(BufReader::new(File::open(images_path)?), limit)?;
    let labels = read_idx_labels(BufReader::new(File::open(labels_path)?), limit)?;
    if images.count != labels.len() {
        return Err(Error::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    if images.count == 0 {
        return Err(Error::Empty("IDX dataset"));
    }
    let per = images.rows * images.cols;
    let mut values = Vec::with_capacity(images.count * TARGET_SIDE * TARGET_SIDE);
    for img in images.pixels.chunks_exact(per) {
        values.extend(to_canvas(img, images.rows, images.cols));
    }
    let features = Tensor::matrix(images.count, TARGET_SIDE * TARGET_SIDE, values)?;
    let labels = labels.into_iter().map(i64::from).collect();
    DomainDataset::new(features, labels, DomainTag::Source, DIGIT_CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip() {
        let pixels: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 37 % 256) as u8).collect();
        let mut buf = Vec::new();
        write_idx_images(&mut buf, 4, 5, &pixels).unwrap();
        assert_eq!(&buf[..4], &[0, 0, 8, 3]);
        let back = read_idx_images(buf.as_slice(), None).unwrap();
        assert_eq!(back.count, 3);
        assert_eq!((back.rows, back.cols), (4, 5));
        assert_eq!(back.pixels, pixels);
    }

    #[test]
    fn label_magic_checked() {
        let mut buf = Vec::new();
        write_idx_labels(&mut buf, &[1, 2, 3]).unwrap();
        assert!(matches!(
            read_idx_images(buf.as_slice(), None),
            Err(Error::BadMagic {
                found: LABEL_MAGIC,
                expected: IMAGE_MAGIC
            })
        ));
        assert_eq!(read_idx_labels(buf.as_slice(), None).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn truncation_detected() {
        let mut buf = Vec::new();
        write_idx_images(&mut buf, 2, 2, &[1; 8]).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_idx_images(buf.as_slice(), None), Err(Error::Truncated(_))));
        assert!(matches!(read_idx_images(&buf[..6], None), Err(Error::Truncated(_))));
    }

    #[test]
    fn limit_reads_prefix() {
        let mut buf = Vec::new();
        write_idx_labels(&mut buf, &[9, 8, 7, 6]).unwrap();
        assert_eq!(read_idx_labels(buf.as_slice(), Some(2)).unwrap(), vec![9, 8]);
    }

    #[test]
    fn small_images_are_centred() {
        let img = vec![255u8; 16 * 16];
        let canvas = to_canvas(&img, 16, 16);
        assert_eq!(canvas.iter().filter(|&&v| v == 1.0).count(), 256);
        assert_eq!(canvas[0], 0.0);
        assert_eq!(canvas[6 * TARGET_SIDE + 6], 1.0);
        assert_eq!(canvas[5 * TARGET_SIDE + 6], 0.0);
        assert_eq!(canvas[21 * TARGET_SIDE + 21], 1.0);
        assert_eq!(canvas[22 * TARGET_SIDE + 21], 0.0);
    }

    #[test]
    fn large_images_are_cropped() {
        let img: Vec<u8> = (0..32 * 32).map(|i| if i % 32 == 2 { 255 } else { 0 }).collect();
        let canvas = to_canvas(&img, 32, 32);
        // column 2 of the source lands on canvas column 0
        assert_eq!(canvas[TARGET_SIDE * 5], 1.0);
        assert_eq!(canvas.iter().filter(|&&v| v == 1.0).count(), TARGET_SIDE);
    }
}
