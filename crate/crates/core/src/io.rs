//! CSV and JSON files.
//!
//! Records CSV: `id,exit,cause` are required, `entry` and `cluster` are
//! optional, every other column is a numeric feature. `cause` is 0 for
//! censored records.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::CifSet;
use crate::ped::{Dataset, PedFrame, SurvivalRecord};

const RESERVED: [&str; 5] = ["id", "entry", "exit", "cause", "cluster"];

fn parse_error(line: usize, column: &str, reason: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column: column.to_string(),
        reason: reason.into(),
    }
}

pub fn read_records<P: AsRef<Path>>(path: P) -> Result<Dataset> {
    read_records_from(File::open(path)?)
}

pub fn read_records_from<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let (Some(id_col), Some(exit_col), Some(cause_col)) = (find("id"), find("exit"), find("cause"))
    else {
        return Err(parse_error(1, "", "header must contain id, exit and cause"));
    };
    let entry_col = find("entry");
    let cluster_col = find("cluster");
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| !RESERVED.contains(&headers[i].as_str()))
        .collect();
    let feature_names: Vec<String> = feature_cols.iter().map(|&i| headers[i].clone()).collect();

    let mut records = Vec::new();
    for (n, row) in rdr.records().enumerate() {
        let line = n + 2;
        let row = row.map_err(|e| parse_error(line, "", e.to_string()))?;
        if row.len() != headers.len() {
            return Err(parse_error(
                line,
                "",
                format!("expected {} fields, found {}", headers.len(), row.len()),
            ));
        }
        let num = |col: usize| -> Result<f64> {
            let v: f64 = row[col]
                .parse()
                .map_err(|_| parse_error(line, &headers[col], format!("not a number: `{}`", &row[col])))?;
            if !v.is_finite() {
                return Err(parse_error(line, &headers[col], "value must be finite"));
            }
            Ok(v)
        };
        let cause: usize = row[cause_col].parse().map_err(|_| {
            parse_error(
                line,
                "cause",
                format!("cause must be a non-negative integer, got `{}`", &row[cause_col]),
            )
        })?;
        let exit = num(exit_col)?;
        let entry = match entry_col {
            Some(c) => num(c)?,
            None => 0.0,
        };
        let features = feature_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
        let mut rec = SurvivalRecord::new(&row[id_col], exit, cause, features).with_entry(entry);
        if let Some(c) = cluster_col {
            if !row[c].is_empty() {
                rec = rec.with_cluster(&row[c]);
            }
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(parse_error(1, "", "no records"));
    }
    Ok(Dataset {
        feature_names,
        records,
    })
}

pub fn write_records<P: AsRef<Path>>(path: P, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let has_cluster = data.records.iter().any(|r| r.cluster.is_some());
    let mut header = vec!["id", "entry", "exit", "cause"];
    if has_cluster {
        header.push("cluster");
    }
    header.extend(data.feature_names.iter().map(String::as_str));
    w.write_record(&header)?;
    for r in &data.records {
        let mut row = vec![r.id.clone(), r.entry.to_string(), r.exit.to_string(), r.cause.to_string()];
        if has_cluster {
            row.push(r.cluster.clone().unwrap_or_default());
        }
        row.extend(r.features.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `id,j,tj,delta,exposure,offset,cause,<features>`; `cause` is the row's
/// cause in an expanded frame and the subject's observed cause otherwise.
pub fn write_ped<P: AsRef<Path>>(path: P, ped: &PedFrame) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header: Vec<&str> = vec!["id", "j", "tj", "delta", "exposure", "offset", "cause"];
    header.extend(ped.feature_names.iter().map(String::as_str));
    w.write_record(&header)?;
    for row in &ped.rows {
        let s = &ped.subjects[row.subject];
        let cause = row.cause.unwrap_or(s.cause);
        let mut out = vec![
            s.id.clone(),
            row.interval.to_string(),
            row.tj.to_string(),
            row.status.to_string(),
            row.exposure.to_string(),
            row.offset.to_string(),
            cause.to_string(),
        ];
        out.extend(s.features.iter().map(f64::to_string));
        w.write_record(&out)?;
    }
    w.flush()?;
    Ok(())
}

/// `id,t,S,cif_1..cif_K` for every subject on `times`.
pub fn write_curves<P: AsRef<Path>>(path: P, ids: &[String], curves: &[CifSet], times: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let k = curves.first().map_or(1, CifSet::n_causes);
    let mut header = vec!["id".to_string(), "t".into(), "S".into()];
    header.extend((1..=k).map(|c| format!("cif_{c}")));
    w.write_record(&header)?;
    for (id, set) in ids.iter().zip(curves) {
        for &t in times {
            let mut row = vec![id.clone(), t.to_string(), set.survival(t).to_string()];
            for c in 1..=k {
                row.push(set.cif(c, t)?.to_string());
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Two-column CSV with the given header.
pub fn write_series<P: AsRef<Path>>(path: P, header: [&str; 2], series: &[(f64, f64)]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{},{}", header[0], header[1])?;
    for (a, b) in series {
        writeln!(f, "{a},{b}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned, P: AsRef<Path>>(path: P) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize, P: AsRef<Path>>(path: P, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_and_full_headers() {
        let d = read_records_from("id,exit,cause,age\na,1.5,1,30\nb,2,0,40\n".as_bytes()).unwrap();
        assert_eq!(d.feature_names, vec!["age"]);
        assert_eq!(d.records[1].cause, 0);
        assert_eq!(d.records[0].entry, 0.0);

        let d = read_records_from(
            "id,entry,exit,cause,cluster,x,z\na,0.2,1.5,2,w1,0.1,3\nb,0,2,0,,1,2\n".as_bytes(),
        )
        .unwrap();
        assert_eq!(d.records[0].cluster.as_deref(), Some("w1"));
        assert_eq!(d.records[1].cluster, None);
        assert_eq!(d.records[0].entry, 0.2);
        assert_eq!(d.feature_names, vec!["x", "z"]);
    }

    #[test]
    fn reports_line_and_column() {
        let err = read_records_from("id,exit,cause,x\na,1,1,0.5\nb,oops,1,2\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "exit");
            }
            e => panic!("unexpected {e:?}"),
        }
        assert!(matches!(
            read_records_from("id,exit,cause\n".as_bytes()),
            Err(Error::Parse { .. })
        ));
        assert!(read_records_from("id,time\n".as_bytes()).is_err());
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let d = Dataset {
            feature_names: vec!["x".into()],
            records: vec![
                SurvivalRecord::new("a", 0.1 + 0.2, 1, vec![1.0 / 3.0]).with_cluster("c"),
                SurvivalRecord::new("b", 2.0, 0, vec![-4.0]).with_entry(0.5),
            ],
        };
        write_records(&path, &d).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back.records, d.records);
    }
}
