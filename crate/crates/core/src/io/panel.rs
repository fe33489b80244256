use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use crate::domain::{RealizedPanel, StageMatrix};
use crate::error::{Error, Result};

fn load_err(row: usize, column: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Load {
        row,
        column: column.into(),
        message: message.into(),
    }
}

/// Loads a wide CSV of daily simple returns: header `date,T1,...,TN`,
/// ISO-8601 dates in strictly ascending order. Rows in error messages are
/// 1-based file lines (the header is line 1).
pub fn load_returns_csv(path: &Path) -> Result<RealizedPanel> {
    let file = std::fs::File::open(path)?;
    read_returns_csv(file)
}

pub fn read_returns_csv<R: Read>(reader: R) -> Result<RealizedPanel> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(load_err(1, "header", "expected `date` followed by at least one ticker"));
    }
    if !header[0].trim().eq_ignore_ascii_case("date") {
        return Err(load_err(1, header[0].to_string(), "first column must be `date`"));
    }
    let tickers: Vec<String> = header.iter().skip(1).map(|t| t.trim().to_string()).collect();
    for (j, t) in tickers.iter().enumerate() {
        if t.is_empty() {
            return Err(load_err(1, format!("#{}", j + 2), "empty ticker name"));
        }
        if tickers[..j].contains(t) {
            return Err(load_err(1, t.clone(), "duplicate ticker"));
        }
    }
    let n = tickers.len();
    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut data = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec?;
        if rec.len() != n + 1 {
            return Err(load_err(line, "*", format!("expected {} fields, found {}", n + 1, rec.len())));
        }
        let raw = rec[0].trim();
        let date = NaiveDate::parse_from_str(raw, "%Y-%m-%d")
            .map_err(|e| load_err(line, "date", format!("bad date `{raw}`: {e}")))?;
        if let Some(prev) = dates.last() {
            if date == *prev {
                return Err(load_err(line, "date", format!("duplicate date {date}")));
            }
            if date < *prev {
                return Err(load_err(line, "date", format!("date {date} precedes {prev}")));
            }
        }
        dates.push(date);
        for (j, ticker) in tickers.iter().enumerate() {
            let cell = rec[j + 1].trim();
            if cell.is_empty() {
                return Err(load_err(line, ticker.clone(), "missing value"));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| load_err(line, ticker.clone(), format!("unparseable number `{cell}`")))?;
            if !v.is_finite() {
                return Err(load_err(line, ticker.clone(), format!("non-finite value `{cell}`")));
            }
            data.push(v);
        }
    }
    if dates.is_empty() {
        return Err(load_err(2, "*", "no data rows"));
    }
    let returns = StageMatrix::from_vec(dates.len(), n, data)?;
    RealizedPanel::new(dates, tickers, returns)
}

/// Writes a panel in the format read by [`load_returns_csv`]. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_returns_csv<W: Write>(panel: &RealizedPanel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(panel.tickers.iter().cloned());
    w.write_record(&header)?;
    for (k, d) in panel.dates.iter().enumerate() {
        let mut rec = vec![d.format("%Y-%m-%d").to_string()];
        rec.extend(panel.returns.row(k).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
