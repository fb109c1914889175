use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Examples;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bytes per record: one label byte then 3×32×32 channel-major pixels.
pub const CIFAR_RECORD: usize = 3073;
const PIXELS: usize = CIFAR_RECORD - 1;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Images kept as raw bytes; batches are scaled to `[0, 1]` on demand.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CifarSet {
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl CifarSet {
    pub fn record(&self, i: usize) -> &[u8] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    fn extend(&mut self, other: CifarSet) {
        self.labels.extend(other.labels);
        self.pixels.extend(other.pixels);
    }
}

impl Examples for CifarSet {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn classes(&self) -> usize {
        10
    }

    fn instance_shape(&self) -> Vec<usize> {
        vec![3, 32, 32]
    }

    fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(rows.len() * PIXELS);
        for &r in rows {
            data.extend(self.record(r).iter().map(|&b| b as f64 / 255.0));
        }
        let x = Tensor::new(vec![rows.len(), 3, 32, 32], data).expect("non-empty batch");
        (x, rows.iter().map(|&r| self.labels[r] as usize).collect())
    }
}

fn ingestion(file: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Ingestion {
        file: file.to_path_buf(),
        offset,
        detail: detail.into(),
    }
}

/// Reads one binary batch file, preserving record order.
pub fn read_cifar_file(path: &Path) -> Result<CifarSet> {
    let bytes = fs::read(path).map_err(|e| ingestion(path, 0, format!("cannot read: {e}")))?;
    if bytes.is_empty() {
        return Err(ingestion(path, 0, "empty file"));
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
        return Err(ingestion(
            path,
            offset,
            format!(
                "truncated record: {} trailing bytes",
                bytes.len() % CIFAR_RECORD
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut set = CifarSet {
        labels: Vec::with_capacity(n),
        pixels: Vec::with_capacity(n * PIXELS),
    };
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(ingestion(
                path,
                (i * CIFAR_RECORD) as u64,
                format!("label byte {}", rec[0]),
            ));
        }
        set.labels.push(rec[0]);
        set.pixels.extend_from_slice(&rec[1..]);
    }
    Ok(set)
}

/// Writes records in the distribution format.
pub fn write_cifar_file(set: &CifarSet, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(set.len() * CIFAR_RECORD);
    for i in 0..set.len() {
        bytes.push(set.labels[i]);
        bytes.extend_from_slice(set.record(i));
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// The five training batches in order, and the test batch as validation set.
pub fn load_cifar10(dir: &Path) -> Result<(CifarSet, CifarSet)> {
    let mut train = CifarSet::default();
    for name in TRAIN_FILES {
        train.extend(read_cifar_file(&dir.join(name))?);
    }
    let val = read_cifar_file(&dir.join(TEST_FILE))?;
    Ok((train, val))
}

/// Files [`load_cifar10`] reads.
pub fn cifar_files(dir: &Path) -> Vec<PathBuf> {
    TRAIN_FILES
        .iter()
        .chain([&TEST_FILE])
        .map(|f| dir.join(f))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(n: usize) -> Vec<u8> {
        (0..n * CIFAR_RECORD)
            .map(|i| {
                if i % CIFAR_RECORD == 0 {
                    (i / CIFAR_RECORD % 10) as u8
                } else {
                    (i * 31 % 256) as u8
                }
            })
            .collect()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("a.bin");
        let bytes = synthetic(4);
        fs::write(&src, &bytes).unwrap();
        let set = read_cifar_file(&src).unwrap();
        assert_eq!(set.labels, vec![0, 1, 2, 3]);
        let out = dir.path().join("b.bin");
        write_cifar_file(&set, &out).unwrap();
        assert_eq!(fs::read(&out).unwrap(), bytes);
        let (x, y) = set.batch(&[1]);
        assert_eq!(x.shape(), &[1, 3, 32, 32]);
        assert_eq!(y, vec![1]);
        assert_eq!(x.data()[0], bytes[CIFAR_RECORD + 1] as f64 / 255.0);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let mut bytes = synthetic(2);
        bytes.truncate(CIFAR_RECORD + 100);
        fs::write(&p, &bytes).unwrap();
        match read_cifar_file(&p) {
            Err(Error::Ingestion { file, offset, .. }) => {
                assert_eq!(file, p);
                assert_eq!(offset, CIFAR_RECORD as u64);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_label_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.bin");
        let mut bytes = synthetic(3);
        bytes[2 * CIFAR_RECORD] = 10;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            read_cifar_file(&p),
            Err(Error::Ingestion { offset, .. }) if offset == 2 * CIFAR_RECORD as u64
        ));
        assert!(matches!(
            load_cifar10(dir.path()),
            Err(Error::Ingestion { offset: 0, .. })
        ));
    }
}
