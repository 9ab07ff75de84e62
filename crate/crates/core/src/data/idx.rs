//! IDX (MNIST) reader.

use std::path::Path;

use super::{DataError, ImageCollection};
use crate::transform::Image;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(buf: &[u8], at: usize, file: &str) -> Result<u32, DataError> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            file: file.to_string(),
            needed: at + 4,
            actual: buf.len(),
        })
}

/// Parses in-memory IDX image and label buffers. Pixels are scaled to `[0,1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<ImageCollection, DataError> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            file: "images".into(),
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic {
            file: "labels".into(),
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n != n_labels {
        return Err(DataError::CountMismatch(format!("{n} images but {n_labels} labels")));
    }
    if rows != cols {
        return Err(DataError::Invalid(format!("non-square {rows}x{cols} images")));
    }
    let px = rows * cols;
    let needed = 16 + n * px;
    if images.len() < needed {
        return Err(DataError::Truncated {
            file: "images".into(),
            needed,
            actual: images.len(),
        });
    }
    if labels.len() < 8 + n {
        return Err(DataError::Truncated {
            file: "labels".into(),
            needed: 8 + n,
            actual: labels.len(),
        });
    }
    let mut out = ImageCollection::new();
    for i in 0..n {
        let raw = &images[16 + i * px..16 + (i + 1) * px];
        let img = Image::new(rows, raw.iter().map(|&b| b as f32 / 255.0).collect())?;
        out.push(labels[8 + i] as u16, img);
    }
    Ok(out)
}

/// Loads an IDX image file and its label file.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageCollection, DataError> {
    let images = std::fs::read(images_path).map_err(|e| DataError::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| DataError::io(labels_path, e))?;
    parse_idx(&images, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair(n: u32, side: u32) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend(IMAGES_MAGIC.to_be_bytes());
        img.extend(n.to_be_bytes());
        img.extend(side.to_be_bytes());
        img.extend(side.to_be_bytes());
        for i in 0..n * side * side {
            img.push(if i % 3 == 0 { 255 } else { 0 });
        }
        let mut lab = Vec::new();
        lab.extend(LABELS_MAGIC.to_be_bytes());
        lab.extend(n.to_be_bytes());
        lab.extend((0..n).map(|i| (i % 3) as u8));
        (img, lab)
    }

    #[test]
    fn loads_declared_count() {
        let (img, lab) = idx_pair(10, 28);
        let c = parse_idx(&img, &lab).unwrap();
        assert_eq!(c.image_count(), 10);
        assert_eq!(c.class_count(), 3);
        assert_eq!(c.side(), Some(28));
        let first = &c.class(0).unwrap()[0];
        assert_eq!(first.pixels()[0], 1.0);
        assert_eq!(first.pixels()[1], 0.0);
    }

    #[test]
    fn wrong_magic() {
        let (mut img, lab) = idx_pair(2, 8);
        img[3] = 0x01;
        assert!(matches!(parse_idx(&img, &lab), Err(DataError::BadMagic { .. })));
        assert!(matches!(parse_idx(&lab, &lab), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload() {
        let (img, lab) = idx_pair(4, 8);
        assert!(matches!(
            parse_idx(&img[..img.len() - 1], &lab),
            Err(DataError::Truncated { .. })
        ));
        assert!(matches!(parse_idx(&img[..10], &lab), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn label_count_mismatch() {
        let (img, _) = idx_pair(4, 8);
        let (_, lab) = idx_pair(5, 8);
        assert!(matches!(parse_idx(&img, &lab), Err(DataError::CountMismatch(_))));
    }

    #[test]
    fn reads_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_pair(3, 8);
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        assert_eq!(load_idx(&ip, &lp).unwrap().image_count(), 3);
        assert!(matches!(
            load_idx(&dir.path().join("missing"), &lp),
            Err(DataError::Io { .. })
        ));
    }
}
