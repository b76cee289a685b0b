//! JSON-lines persistence: a header line followed by one patient per line.
//!
//! ```text
//! {"m": 3, "p": 3, "order": [0, 1, 2], "version": 1}
//! {"id": "p0", "x": [..], "visits": [{"t": 12.5, "y": [2.1, null, 1.7]}], "T": 900.0, "censored": true}
//! ```
//!
//! An optional `"split": "train" | "val" | "eval"` key carries split labels.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BaselineCovariates, ConcurrentOrder, Dataset, LongitudinalObservation, PatientRecord, Split};
use crate::error::{LsrError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    m: usize,
    p: usize,
    order: Vec<usize>,
    version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct VisitLine {
    t: f64,
    y: Vec<Option<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PatientLine {
    id: String,
    x: Vec<f64>,
    visits: Vec<VisitLine>,
    #[serde(rename = "T")]
    terminal: f64,
    censored: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

fn parse_err(record: usize, field: &str, reason: impl ToString) -> LsrError {
    LsrError::Parse {
        record,
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    let header = Header {
        m: dataset.m,
        p: dataset.p,
        order: dataset.order.as_slice().to_vec(),
        version: FORMAT_VERSION,
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for (i, r) in dataset.records.iter().enumerate() {
        let line = PatientLine {
            id: r.id.clone(),
            x: r.covariates.0.clone(),
            visits: r
                .visit_times()
                .iter()
                .zip(r.observations())
                .map(|(&t, o)| VisitLine { t, y: o.to_options() })
                .collect(),
            terminal: r.terminal_time(),
            censored: r.censored(),
            split: dataset.splits.as_ref().map(|s| s[i]),
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let header_line = lines.next().ok_or_else(|| parse_err(0, "header", "empty file"))??;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| parse_err(0, "header", e))?;
    if header.version != FORMAT_VERSION {
        return Err(parse_err(0, "version", format!("unsupported version {}", header.version)));
    }
    let order = ConcurrentOrder::new(header.order).map_err(|e| parse_err(0, "order", e))?;
    if order.len() != header.m {
        return Err(parse_err(0, "order", format!("length {} != m = {}", order.len(), header.m)));
    }
    let mut records = Vec::new();
    let mut splits = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: PatientLine = serde_json::from_str(&line).map_err(|e| parse_err(i, "json", e))?;
        if raw.x.len() != header.p {
            return Err(parse_err(i, "x", format!("expected {} covariates, got {}", header.p, raw.x.len())));
        }
        if raw.x.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(i, "x", "non-finite covariate"));
        }
        let mut prev = 0.0;
        for (j, v) in raw.visits.iter().enumerate() {
            if !(v.t > prev) || !v.t.is_finite() {
                return Err(parse_err(i, &format!("visits[{j}].t"), format!("{} is not strictly increasing and positive", v.t)));
            }
            prev = v.t;
            if v.y.len() != header.m {
                return Err(parse_err(i, &format!("visits[{j}].y"), format!("expected {} values, got {}", header.m, v.y.len())));
            }
            if v.y.iter().flatten().any(|x| !x.is_finite()) {
                return Err(parse_err(i, &format!("visits[{j}].y"), "non-finite observed value"));
            }
        }
        if !(raw.terminal >= prev) || !raw.terminal.is_finite() {
            return Err(parse_err(i, "T", format!("{} precedes the last visit", raw.terminal)));
        }
        let record = PatientRecord::new(
            raw.id,
            BaselineCovariates(raw.x),
            raw.visits.iter().map(|v| v.t).collect(),
            raw.visits.iter().map(|v| LongitudinalObservation::from_options(&v.y)).collect(),
            raw.terminal,
            raw.censored,
        )
        .map_err(|e| parse_err(i, "record", e))?;
        records.push(record);
        splits.push(raw.split);
    }
    let mut ds = Dataset::new(header.m, header.p, order, records)?;
    if splits.iter().any(Option::is_some) {
        let labels: Option<Vec<Split>> = splits.into_iter().collect();
        ds.splits = Some(labels.ok_or_else(|| parse_err(0, "split", "split labels present on only some records"))?);
    }
    Ok(ds)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split_dataset;

    fn sample() -> Dataset {
        let recs = vec![
            PatientRecord::new(
                "a",
                BaselineCovariates(vec![0.1, -1.0 / 3.0]),
                vec![1.5, 2.0 / 3.0 + 2.0],
                vec![
                    LongitudinalObservation::from_options(&[Some(0.1 + 0.2), None]),
                    LongitudinalObservation::from_options(&[Some(1e-300), Some(-7.25)]),
                ],
                10.0,
                true,
            )
            .unwrap(),
            PatientRecord::new(
                "b",
                BaselineCovariates(vec![2.0, 3.0]),
                vec![0.25],
                vec![LongitudinalObservation::from_options(&[None, Some(4.0)])],
                0.25,
                false,
            )
            .unwrap(),
            PatientRecord::new("c", BaselineCovariates(vec![0.0, 0.0]), vec![], vec![], 3.0, true).unwrap(),
        ];
        Dataset::new(2, 2, ConcurrentOrder::new(vec![1, 0]).unwrap(), recs).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = split_dataset(&sample(), (0.4, 0.3, 0.3), 3).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, ds);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        save_dataset(&sample(), &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), sample());
    }

    #[test]
    fn non_increasing_times_name_the_record() {
        let text = r#"{"m":1,"p":0,"order":[0],"version":1}
{"id":"ok","x":[],"visits":[{"t":1.0,"y":[1.0]}],"T":2.0,"censored":true}
{"id":"bad","x":[],"visits":[{"t":2.0,"y":[1.0]},{"t":2.0,"y":[1.0]}],"T":3.0,"censored":true}
"#;
        match read_dataset(text.as_bytes()) {
            Err(LsrError::Parse { record, field, .. }) => {
                assert_eq!(record, 1);
                assert_eq!(field, "visits[1].t");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_value_is_rejected() {
        let text = r#"{"m":1,"p":0,"order":[0],"version":1}
{"id":"bad","x":[],"visits":[{"t":1.0,"y":[NaN]}],"T":3.0,"censored":true}
"#;
        assert!(matches!(read_dataset(text.as_bytes()), Err(LsrError::Parse { record: 0, .. })));
    }

    #[test]
    fn wrong_dimension_rejected() {
        let text = r#"{"m":2,"p":0,"order":[0,1],"version":1}
{"id":"bad","x":[],"visits":[{"t":1.0,"y":[1.0]}],"T":3.0,"censored":true}
"#;
        assert!(matches!(
            read_dataset(text.as_bytes()),
            Err(LsrError::Parse { record: 0, ref field, .. }) if field == "visits[0].y"
        ));
    }
}
