//! Dataset CSV format: header `domain,label,f0,...,f{d-1}`, one row per sample.
//!
//! Floats are written in shortest round-trip form, so a save/load cycle is
//! lossless.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::measures::{FeatureSet, LabeledDataset};
use crate::{Error, Result};

fn parse_error(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        message: message.into(),
    }
}

/// Reads one domain. With `n_classes` unset, it is taken as `max label + 1`.
pub fn read_dataset<R: Read>(reader: R, n_classes: Option<usize>) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = records.next().ok_or_else(|| parse_error(1, "empty file"))??;
    let line = |r: &csv::StringRecord| r.position().map_or(0, |p| p.line());
    if header.get(0) != Some("domain") || header.get(1) != Some("label") {
        return Err(parse_error(line(&header), "header must start with domain,label"));
    }
    let dim = header.len() - 2;
    for (k, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{k}") {
            return Err(parse_error(
                line(&header),
                format!("expected column f{k}, found {name:?}"),
            ));
        }
    }
    if dim == 0 {
        return Err(parse_error(line(&header), "no feature columns"));
    }

    let mut domain: Option<String> = None;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for rec in records {
        let rec = rec?;
        let at = line(&rec);
        if rec.len() != dim + 2 {
            return Err(parse_error(
                at,
                format!("expected {} fields, found {}", dim + 2, rec.len()),
            ));
        }
        match &domain {
            None => domain = Some(rec[0].to_string()),
            Some(d) if d != &rec[0] => {
                return Err(parse_error(at, format!("domain {:?} differs from {d:?}", &rec[0])));
            }
            Some(_) => {}
        }
        let y: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| parse_error(at, format!("unknown label {:?}", &rec[1])))?;
        if let Some(c) = n_classes {
            if y >= c {
                return Err(parse_error(at, format!("unknown label {y} for {c} classes")));
            }
        }
        labels.push(y);
        for field in rec.iter().skip(2) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_error(at, format!("bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_error(at, format!("non-finite value {field:?}")));
            }
            values.push(v);
        }
    }
    let domain = domain.ok_or_else(|| parse_error(line(&header) + 1, "no data rows"))?;
    let n = labels.len();
    let c = n_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let features = Array2::from_shape_vec((n, dim), values).expect("rows were checked for width");
    LabeledDataset::new(features, labels, c, domain)
}

pub fn write_dataset<W: Write>(data: &LabeledDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["domain".to_string(), "label".to_string()];
    header.extend((0..data.dim()).map(|k| format!("f{k}")));
    w.write_record(&header)?;
    for (row, y) in data.features().rows().into_iter().zip(data.labels()) {
        let mut rec = vec![data.domain().to_string(), y.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>, n_classes: Option<usize>) -> Result<LabeledDataset> {
    read_dataset(BufReader::new(File::open(path)?), n_classes)
}

pub fn save_dataset(data: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(data, BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn read(text: &str) -> Result<LabeledDataset> {
        read_dataset(text.as_bytes(), None)
    }

    #[test]
    fn two_rows_infer_the_width() {
        let d = read("domain,label,f0,f1,f2\ns,0,1.5,2,3\ns,1,-1,0,1e-3\n").unwrap();
        assert_eq!((d.len(), d.dim(), d.n_classes()), (2, 3, 2));
        assert_eq!(d.domain(), "s");
        assert_eq!(d.features()[[1, 2]], 1e-3);
    }

    fn line_of(e: Error) -> usize {
        match e {
            Error::Parse { line, .. } => line,
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_files_name_the_line() {
        assert_eq!(line_of(read("domain,f0\ns,1\n").unwrap_err()), 1);
        assert_eq!(line_of(read("domain,label,f1\ns,0,1\n").unwrap_err()), 1);
        assert_eq!(line_of(read("domain,label,f0\ns,0,1\ns,1\n").unwrap_err()), 3);
        assert_eq!(line_of(read("domain,label,f0\ns,0,1\ns,x,2\n").unwrap_err()), 3);
        assert_eq!(line_of(read("domain,label,f0\ns,0,1\nt,0,2\n").unwrap_err()), 3);
        assert_eq!(line_of(read("domain,label,f0\ns,0,nan\n").unwrap_err()), 2);
        assert_eq!(
            line_of(read_dataset("domain,label,f0\ns,0,1\ns,2,1\n".as_bytes(), Some(2)).unwrap_err()),
            3
        );
        assert!(read("domain,label,f0\n").is_err());
        assert!(read("").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_lossless(
            rows in proptest::collection::vec(
                (0usize..3, proptest::collection::vec(-1e6f64..1e6, 4)),
                1..20,
            )
        ) {
            let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
            let values: Vec<f64> = rows.iter().flat_map(|r| r.1.clone()).collect();
            let x = Array2::from_shape_vec((rows.len(), 4), values).unwrap();
            let data = LabeledDataset::new(x, labels, 3, "dom").unwrap();
            let mut buf = Vec::new();
            write_dataset(&data, &mut buf).unwrap();
            let back = read_dataset(buf.as_slice(), Some(3)).unwrap();
            prop_assert_eq!(back, data);
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let data = LabeledDataset::new(ndarray::array![[0.1, 0.2], [1.0 / 3.0, -7e-300]], vec![1, 0], 2, "x").unwrap();
        save_dataset(&data, &path).unwrap();
        assert_eq!(load_dataset(&path, Some(2)).unwrap(), data);
    }
}
