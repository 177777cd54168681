//! Bit-exact reader and writer for the IDX binary format used by the MNIST
//! distribution: big-endian magic, big-endian dimension sizes, then raw u8
//! payload. Images use magic `0x00000803` (three dimensions), labels
//! `0x00000801` (one dimension).

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images as a flat `count * rows * cols` u8 buffer.
#[derive(Debug, Clone)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// Reads an IDX image file (`train-images-idx3-ubyte` layout).
pub fn read_images(path: &Path) -> Result<IdxImages> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let magic = r.read_u32::<BigEndian>().map_err(|e| Error::io(path, e))?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            path,
            format!("bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = r.read_u32::<BigEndian>().map_err(|e| Error::io(path, e))? as usize;
    let rows = r.read_u32::<BigEndian>().map_err(|e| Error::io(path, e))? as usize;
    let cols = r.read_u32::<BigEndian>().map_err(|e| Error::io(path, e))? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    r.read_exact(&mut pixels)
        .map_err(|e| Error::format(path, format!("truncated image payload: {e}")))?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

/// Reads an IDX label file (`train-labels-idx1-ubyte` layout).
pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let magic = r.read_u32::<BigEndian>().map_err(|e| Error::io(path, e))?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            path,
            format!("bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let count = r.read_u32::<BigEndian>().map_err(|e| Error::io(path, e))? as usize;
    let mut labels = vec![0u8; count];
    r.read_exact(&mut labels)
        .map_err(|e| Error::format(path, format!("truncated label payload: {e}")))?;
    Ok(labels)
}

/// Writes an IDX image file.
pub fn write_images(path: &Path, images: &IdxImages) -> Result<()> {
    if images.pixels.len() != images.count * images.rows * images.cols {
        return Err(Error::ShapeMismatch(format!(
            "pixel buffer is {} bytes, expected {}",
            images.pixels.len(),
            images.count * images.rows * images.cols
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_u32::<BigEndian>(IMAGES_MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_u32::<BigEndian>(images.count as u32).map_err(|e| Error::io(path, e))?;
    w.write_u32::<BigEndian>(images.rows as u32).map_err(|e| Error::io(path, e))?;
    w.write_u32::<BigEndian>(images.cols as u32).map_err(|e| Error::io(path, e))?;
    w.write_all(&images.pixels).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes an IDX label file.
pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_u32::<BigEndian>(LABELS_MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_u32::<BigEndian>(labels.len() as u32).map_err(|e| Error::io(path, e))?;
    w.write_all(labels).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn image_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("imgs");
        let images = IdxImages {
            count: 2,
            rows: 3,
            cols: 2,
            pixels: vec![0, 255, 7, 13, 200, 1, 2, 3, 4, 5, 6, 250],
        };
        write_images(&path, &images).unwrap();
        let back = read_images(&path).unwrap();
        assert_eq!(back.count, 2);
        assert_eq!(back.rows, 3);
        assert_eq!(back.cols, 2);
        assert_eq!(back.pixels, images.pixels);
        // header layout: magic then dims, all big-endian
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[0..4], &[0, 0, 8, 3]);
        assert_eq!(&raw[4..8], &[0, 0, 0, 2]);
    }

    #[test]
    fn label_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("labels");
        write_labels(&path, &[1, 9, 0, 4]).unwrap();
        assert_eq!(read_labels(&path).unwrap(), vec![1, 9, 0, 4]);
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[0..4], &[0, 0, 8, 1]);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("imgs");
        write_labels(&path, &[1, 2]).unwrap(); // label magic where images expected
        assert!(matches!(read_images(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("imgs");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&5u32.to_be_bytes());
        bytes.extend_from_slice(&28u32.to_be_bytes());
        bytes.extend_from_slice(&28u32.to_be_bytes());
        bytes.extend_from_slice(&[0u8; 10]); // far too short
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_images(&path), Err(Error::Format { .. })));
    }
}
