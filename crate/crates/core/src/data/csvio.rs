use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};

use super::SeriesFrame;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const DATE_FORMATS: [&str; 4] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y/%m/%d %H:%M"];

fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for f in DATE_FORMATS {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, f) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp())
}

fn format_timestamp(ts: i64) -> String {
    DateTime::from_timestamp(ts, 0)
        .map(|dt| dt.format("%Y-%m-%d %H:%M:%S").to_string())
        .unwrap_or_else(|| ts.to_string())
}

/// Reads a CSV whose `date_col` (default: the first column) holds ISO-8601
/// or epoch-second timestamps and whose remaining columns are numeric.
///
/// Rows with an empty or NaN cell are dropped and counted in
/// `rejected_rows`; any other unparsable cell is an error naming its row.
pub fn load_csv(path: &Path, target_cols: &[String], date_col: Option<&str>) -> Result<SeriesFrame> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() {
        return Err(Error::Data(format!("{}: empty header", path.display())));
    }
    let date_idx = match date_col {
        Some(name) => {
            header.iter().position(|h| h == name).ok_or_else(|| Error::Data(format!("missing column `{name}`")))?
        }
        None => 0,
    };
    for t in target_cols {
        if !header.iter().any(|h| h == t) || header[date_idx] == *t {
            return Err(Error::Data(format!("missing column `{t}`")));
        }
    }
    let names: Vec<String> =
        header.iter().enumerate().filter(|&(i, _)| i != date_idx).map(|(_, h)| h.clone()).collect();

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut rejected = 0;
    for (i, rec) in rdr.records().enumerate() {
        // 1-based data row, header excluded
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Data(format!("row {row}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::Data(format!("row {row}: expected {} fields, found {}", header.len(), rec.len())));
        }
        let ts = parse_timestamp(&rec[date_idx])
            .ok_or_else(|| Error::Data(format!("row {row}: unparsable timestamp `{}`", &rec[date_idx])))?;
        let mut cells = Vec::with_capacity(names.len());
        let mut missing = false;
        for (j, cell) in rec.iter().enumerate() {
            if j == date_idx {
                continue;
            }
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                missing = true;
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Data(format!("row {row}, column `{}`: unparsable cell `{cell}`", header[j])))?;
            if !v.is_finite() {
                missing = true;
            }
            cells.push(v);
        }
        if missing {
            rejected += 1;
            continue;
        }
        timestamps.push(ts);
        values.extend(cells);
    }
    if timestamps.is_empty() {
        return Err(Error::Data(format!("{}: no usable rows", path.display())));
    }
    let t = timestamps.len();
    let mut frame = SeriesFrame::new(timestamps, Tensor::new(values, vec![t, names.len()])?, names)?;
    frame.rejected_rows = rejected;
    if rejected > 0 {
        log::warn!("{}: rejected {rejected} rows with missing values", path.display());
    }
    Ok(frame)
}

/// Writes `frame` with a leading `date` column. Values use the shortest
/// representation that parses back to the same bits.
pub fn write_csv(frame: &SeriesFrame, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{other:?}")),
    })?;
    let io_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut header = vec!["date".to_string()];
    header.extend(frame.names.iter().cloned());
    w.write_record(&header).map_err(io_err)?;
    for t in 0..frame.len() {
        let mut rec = vec![format_timestamp(frame.timestamps[t])];
        rec.extend(frame.values.row(t).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let p = dir.path().join("in.csv");
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn toy_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "date,a,b\n2020-01-01 00:00:00,1,2\n2020-01-01 01:00:00,3,4\n2020-01-01 02:00:00,5,6\n");
        let f = load_csv(&p, &["b".into()], None).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f.width(), 2);
        assert_eq!(f.frequency, "1h");
        assert_eq!(f.values.get(2, 1), 6.0);
    }

    #[test]
    fn shuffled_timestamps_name_inversion() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "date,a\n1000,1\n3000,2\n2000,3\n");
        let err = load_csv(&p, &[], None).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn nan_rows_rejected_and_garbage_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "date,a\n1,1\n2,NaN\n3,\n4,2\n");
        let f = load_csv(&p, &[], None).unwrap();
        assert_eq!((f.len(), f.rejected_rows), (2, 2));
        let p = write(&dir, "date,a\n1,1\n2,x7\n");
        let err = load_csv(&p, &[], None).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn missing_target_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "date,a\n1,1\n");
        let err = load_csv(&p, &["OT".into()], None).unwrap_err();
        assert!(err.to_string().contains("`OT`"));
    }

    #[test]
    fn ett_shaped_file_has_seven_covariates() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n");
        for h in 0..24 {
            body.push_str(&format!("2016-07-01 {h:02}:00:00,5.8,2.0,1.5,0.4,4.2,1.3,30.5\n"));
        }
        let f = load_csv(&write(&dir, &body), &["OT".into()], Some("date")).unwrap();
        assert_eq!(f.width(), 7);
        assert_eq!(f.len(), 24);
    }
}
