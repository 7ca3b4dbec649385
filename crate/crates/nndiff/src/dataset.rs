//! Datasets and the on-disk formats they travel in.
//!
//! IDX is read and written bit-exactly as published: big-endian magic and
//! dimension words, unsigned-byte payload. Pixels are stored normalized to
//! [0,1] in memory (byte / 255); quantization back to 8 bits happens only
//! at export. PGM (P5, maxval 255) serves as the human-viewable export for
//! 2-D inputs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A batch of inputs with class labels. The first dimension of `inputs`
/// indexes samples; the rest is the per-sample input shape.
#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() < 2 {
            return Err(Error::InvalidConfig(
                "dataset inputs need at least [N, ...] dimensions".into(),
            ));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::InvalidConfig(format!(
                "{} inputs but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if inputs.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidConfig(
                "dataset values must lie in [0,1]".into(),
            ));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    /// Per-sample input shape (without the batch dimension).
    pub fn input_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    /// The i-th input as its own tensor.
    pub fn input(&self, i: usize) -> Result<Tensor> {
        if i >= self.len() {
            return Err(Error::InvalidConfig(format!(
                "sample index {i} out of range ({} samples)",
                self.len()
            )));
        }
        let n = self.sample_len();
        Tensor::new(
            self.input_shape().to_vec(),
            self.inputs.data()[i * n..(i + 1) * n].to_vec(),
        )
    }

    /// All inputs as individual tensors (seed sets).
    pub fn input_tensors(&self) -> Result<Vec<Tensor>> {
        (0..self.len()).map(|i| self.input(i)).collect()
    }

    /// New dataset from the given sample indices, in order.
    pub fn subset(&self, idxs: &[usize]) -> Result<Dataset> {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(idxs.len() * n);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            if i >= self.len() {
                return Err(Error::InvalidConfig(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.inputs.data()[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![idxs.len()];
        shape.extend_from_slice(self.input_shape());
        Ok(Dataset {
            inputs: Tensor::new(shape, data)?,
            labels,
        })
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idxs: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idxs)
    }

    /// Appends extra labeled samples (shapes must match).
    pub fn extended(&self, extra: &[(Tensor, usize)]) -> Result<Dataset> {
        let mut data = self.inputs.data().to_vec();
        let mut labels = self.labels.clone();
        for (x, label) in extra {
            x.check_shape(self.input_shape())?;
            data.extend_from_slice(x.data());
            labels.push(*label);
        }
        let mut shape = vec![self.len() + extra.len()];
        shape.extend_from_slice(self.input_shape());
        Ok(Dataset {
            inputs: Tensor::new(shape, data)?,
            labels,
        })
    }

    /// Replaces a label (pollution experiments).
    pub fn set_label(&mut self, i: usize, label: usize) {
        self.labels[i] = label;
    }
}

fn read_be_u32(bytes: &[u8], pos: usize, path: &str) -> Result<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Loads an IDX image/label pair into a `[N, 1, rows, cols]` dataset with
/// pixels scaled to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (images, rows, cols) = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    let n = images.len() / (rows * cols);
    if n != labels.len() {
        return Err(Error::format(
            images_path.display().to_string(),
            format!("{} images but {} labels", n, labels.len()),
        ));
    }
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], images)?, labels)
}

/// Raw image payload of an IDX images file, scaled to [0,1].
pub fn load_idx_images(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = fs::read(path)?;
    let p = path.display().to_string();
    let magic = read_be_u32(&bytes, 0, &p)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            p,
            format!("wrong magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = read_be_u32(&bytes, 4, &p)? as usize;
    let rows = read_be_u32(&bytes, 8, &p)? as usize;
    let cols = read_be_u32(&bytes, 12, &p)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::format(
            p,
            format!("payload is {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let data = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((data, rows, cols))
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    let p = path.display().to_string();
    let magic = read_be_u32(&bytes, 0, &p)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            p,
            format!("wrong magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = read_be_u32(&bytes, 4, &p)? as usize;
    if bytes.len() != 8 + count {
        return Err(Error::format(
            p,
            format!("payload is {} bytes, expected {}", bytes.len(), 8 + count),
        ));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Writes a `[N, 1, rows, cols]` (or `[N, rows, cols]`) dataset as an IDX
/// image/label pair, quantizing pixels to bytes.
pub fn save_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (rows, cols) = match data.input_shape() {
        [1, r, c] | [r, c] => (*r, *c),
        other => {
            return Err(Error::InvalidConfig(format!(
                "IDX export needs 2-D inputs, got shape {other:?}"
            )))
        }
    };
    let mut images = Vec::with_capacity(16 + data.len() * rows * cols);
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(data.len() as u32).to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    images.extend(data.inputs().data().iter().map(|&v| quantize_byte(v)));
    fs::write(images_path, images)?;

    let mut labels = Vec::with_capacity(8 + data.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(data.len() as u32).to_be_bytes());
    labels.extend(data.labels().iter().map(|&l| l as u8));
    fs::write(labels_path, labels)?;
    Ok(())
}

pub(crate) fn quantize_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// P5 PGM with maxval 255. `values` are row-major [0,1] pixels.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    if values.len() != rows * cols {
        return Err(Error::InvalidConfig(format!(
            "pgm payload {} does not match {rows}x{cols}",
            values.len()
        )));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantize_byte(v)));
    fs::write(path, out)?;
    Ok(())
}

/// Reads a P5 PGM back into [0,1] pixels.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let p = path.display().to_string();
    // Header: "P5" <ws> width <ws> height <ws> maxval <single ws> payload.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        if fields.len() == 4 {
            pos += 1; // exactly one whitespace byte before the payload
        }
    }
    if fields.len() != 4 || fields[0] != "P5" {
        return Err(Error::format(p, "not a P5 pgm"));
    }
    let cols: usize = fields[1].parse().map_err(|_| Error::format(&p, "bad width"))?;
    let rows: usize = fields[2].parse().map_err(|_| Error::format(&p, "bad height"))?;
    if fields[3] != "255" {
        return Err(Error::format(p, "maxval must be 255"));
    }
    let payload = &bytes[pos..];
    if payload.len() != rows * cols {
        return Err(Error::format(p, "truncated pgm payload"));
    }
    Ok((rows, cols, payload.iter().map(|&b| b as f64 / 255.0).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn toy_dataset() -> Dataset {
        let inputs = Tensor::new(
            vec![3, 1, 2, 2],
            vec![
                0.0, 0.25, 0.5, 1.0, //
                1.0, 0.75, 0.5, 0.0, //
                0.1, 0.2, 0.3, 0.4,
            ],
        )
        .unwrap();
        Dataset::new(inputs, vec![0, 1, 2]).unwrap()
    }

    #[test]
    fn count_mismatch_rejected() {
        let inputs = Tensor::new(vec![2, 2], vec![0.0, 0.1, 0.2, 0.3]).unwrap();
        assert!(Dataset::new(inputs, vec![0]).is_err());
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        let inputs = Tensor::new(vec![1, 2], vec![0.0, 1.5]).unwrap();
        assert!(Dataset::new(inputs, vec![0]).is_err());
    }

    #[test]
    fn idx_round_trip_preserves_quantized_pixels() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("images-idx3-ubyte");
        let lab = dir.path().join("labels-idx1-ubyte");
        let data = toy_dataset();
        save_idx(&data, &img, &lab).unwrap();
        let back = load_idx(&img, &lab).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.labels(), data.labels());
        for (a, b) in back.inputs().data().iter().zip(data.inputs().data()) {
            // One quantization step of slack.
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn byte_scaling_is_exact_at_ends() {
        // 255 -> 1.0, 0 -> 0.0.
        assert_eq!(quantize_byte(1.0), 255);
        assert_eq!(quantize_byte(0.0), 0);
        assert_eq!(255u8 as f64 / 255.0, 1.0);
        assert_eq!(0u8 as f64 / 255.0, 0.0);
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("images-idx3-ubyte");
        let lab = dir.path().join("labels-idx1-ubyte");
        save_idx(&toy_dataset(), &img, &lab).unwrap();
        // A labels file where an images file is expected: wrong magic.
        let err = load_idx(&lab, &lab).unwrap_err();
        assert!(err.to_string().contains("wrong magic"), "{err}");
        // And vice versa.
        let err = load_idx_labels(&img).unwrap_err();
        assert!(err.to_string().contains("wrong magic"), "{err}");
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("images-idx3-ubyte");
        let lab = dir.path().join("labels-idx1-ubyte");
        save_idx(&toy_dataset(), &img, &lab).unwrap();
        let mut bytes = std::fs::read(&img).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&img, bytes).unwrap();
        assert!(load_idx(&img, &lab).is_err());
    }

    #[test]
    fn official_header_layout() {
        // The published MNIST train-images header: magic 0x00000803,
        // 60000 items of 28x28. Frozen byte-for-byte.
        let mut header = Vec::new();
        header.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        header.extend_from_slice(&60000u32.to_be_bytes());
        header.extend_from_slice(&28u32.to_be_bytes());
        header.extend_from_slice(&28u32.to_be_bytes());
        assert_eq!(
            header,
            [0, 0, 8, 3, 0, 0, 0xEA, 0x60, 0, 0, 0, 28, 0, 0, 0, 28]
        );
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let values = vec![0.0, 0.5, 1.0, 0.25];
        write_pgm(&path, 2, 2, &values).unwrap();
        let (r, c, back) = read_pgm(&path).unwrap();
        assert_eq!((r, c), (2, 2));
        for (a, b) in back.iter().zip(&values) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
