//! Dataset files: `.fvecs`, headerless `.csv` and the raw-f32 container.

use std::io::Read;
use std::path::Path;

use ndarray::Array2;

use crate::binio::{put_f32s, put_u32, write_file, LeReader};
use crate::encoding::RawDataset;
use crate::error::{Error, Result};

const RAW_MAGIC: &[u8; 8] = b"SANN-RAW";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Fvecs,
    Csv,
    RawF32,
}

impl DataFormat {
    /// Picks a format from the file extension; anything unknown is raw-f32.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("fvecs") => DataFormat::Fvecs,
            Some("csv") => DataFormat::Csv,
            _ => DataFormat::RawF32,
        }
    }
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fvecs" => Ok(DataFormat::Fvecs),
            "csv" => Ok(DataFormat::Csv),
            "raw-f32" | "raw" => Ok(DataFormat::RawF32),
            other => Err(Error::Config(format!("unknown data format {other:?}"))),
        }
    }
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<RawDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        DataFormat::Fvecs => parse_fvecs(&bytes),
        DataFormat::Csv => parse_csv(&bytes),
        DataFormat::RawF32 => parse_raw(&bytes),
    }
}

pub fn write_dataset(path: &Path, data: &RawDataset, format: DataFormat) -> Result<()> {
    let bytes = match format {
        DataFormat::Fvecs => {
            let mut out = Vec::with_capacity(data.len() * (4 + 4 * data.dim()));
            for row in data.data().rows() {
                put_u32(&mut out, data.dim() as u32);
                put_f32s(&mut out, row.iter());
            }
            out
        }
        DataFormat::RawF32 => {
            let mut out = Vec::with_capacity(16 + 4 * data.len() * data.dim());
            out.extend_from_slice(RAW_MAGIC);
            put_u32(&mut out, data.len() as u32);
            put_u32(&mut out, data.dim() as u32);
            put_f32s(&mut out, data.data().iter());
            out
        }
        DataFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            for row in data.data().rows() {
                // `{}` on f32 prints the shortest string that parses back exactly.
                w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| Error::Config(e.to_string()))?;
            }
            w.into_inner().map_err(|e| Error::Config(e.to_string()))?
        }
    };
    write_file(path, &bytes)
}

fn parse_fvecs(bytes: &[u8]) -> Result<RawDataset> {
    let mut r = LeReader::new(bytes);
    let mut values = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    while (r.offset() as usize) < bytes.len() {
        let at = r.offset();
        let d = r.u32()? as usize;
        match dim {
            None if d == 0 => return Err(Error::format(at, "record dimension is zero")),
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::format(at, format!("record dimension {d} differs from {expected}")))
            }
            _ => {}
        }
        values.extend(r.f32s(d)?);
        rows += 1;
    }
    let dim = dim.ok_or_else(|| Error::format(0, "no records"))?;
    RawDataset::new(Array2::from_shape_vec((rows, dim), values).expect("shape matches"))
}

fn parse_raw(bytes: &[u8]) -> Result<RawDataset> {
    let mut r = LeReader::new(bytes);
    r.magic(RAW_MAGIC)?;
    let m = r.u32()? as usize;
    let at = r.offset();
    let n = r.u32()? as usize;
    if n == 0 {
        return Err(Error::format(at, "dimension is zero"));
    }
    let values = r.f32s(m * n)?;
    r.at_eof()?;
    RawDataset::new(Array2::from_shape_vec((m, n), values).expect("shape matches"))
}

fn parse_csv(bytes: &[u8]) -> Result<RawDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(bytes);
    let mut values = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    let mut record = csv::StringRecord::new();
    loop {
        let at = reader.position().byte();
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(Error::format(at, e.to_string())),
        }
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match dim {
            None => dim = Some(record.len()),
            Some(d) if d != record.len() => {
                return Err(Error::format(at, format!("row has {} fields, expected {d}", record.len())))
            }
            _ => {}
        }
        for field in record.iter() {
            values.push(field.parse::<f32>().map_err(|e| Error::format(at, format!("{field:?}: {e}")))?);
        }
        rows += 1;
    }
    let dim = dim.ok_or_else(|| Error::format(0, "no rows"))?;
    RawDataset::new(Array2::from_shape_vec((rows, dim), values).expect("shape matches"))
}

/// Reads only the `(M, N)` header of a raw-f32 file.
pub fn raw_header(path: &Path) -> Result<(usize, usize)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = LeReader::new(f.take(16));
    r.magic(RAW_MAGIC)?;
    Ok((r.u32()? as usize, r.u32()? as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize) -> RawDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        RawDataset::new(Array2::from_shape_fn((m, n), |_| rng.gen::<f32>() * 2e3 - 1e3)).unwrap()
    }

    #[test]
    fn single_fvecs_record() {
        let mut bytes = 4u32.to_le_bytes().to_vec();
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let d = parse_fvecs(&bytes).unwrap();
        assert_eq!((d.len(), d.dim()), (1, 4));
        assert_eq!(d.point(0).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn inconsistent_fvecs_dims_report_offset() {
        let mut bytes = 2u32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&[0u8; 8]);
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 12]);
        match parse_fvecs(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_raw_reports_offset() {
        let data = random(3, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.raw");
        write_dataset(&path, &data, DataFormat::RawF32).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        match parse_raw(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
        assert_eq!(raw_header(&path).unwrap(), (3, 4));
    }

    #[test]
    fn round_trips_are_bit_identical() {
        let data = random(17, 9);
        let dir = tempfile::tempdir().unwrap();
        for (name, fmt) in [("a.fvecs", DataFormat::Fvecs), ("a.csv", DataFormat::Csv), ("a.raw", DataFormat::RawF32)] {
            let path = dir.path().join(name);
            assert_eq!(DataFormat::from_path(&path), fmt);
            write_dataset(&path, &data, fmt).unwrap();
            let back = load_dataset(&path, fmt).unwrap();
            let same = back.data().iter().zip(data.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{name}");
        }
    }

    #[test]
    fn csv_bad_field_is_format_error() {
        assert!(matches!(parse_csv(b"1,2\n3,x\n"), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(parse_csv(b"1,2\n3\n"), Err(Error::Format { .. })));
    }
}
