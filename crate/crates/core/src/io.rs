//! Return series on disk: CSV with header `date,excess_log_return`. Lines
//! starting with `#` are skipped.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, Days, NaiveDate, Weekday};

use crate::error::{Error, Result};
use crate::filter::csv_io;

pub const DATE_COLUMN: &str = "date";
pub const RETURN_COLUMN: &str = "excess_log_return";

/// Daily log excess returns with strictly increasing ISO-8601 dates.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    pub dates: Vec<NaiveDate>,
    pub returns: Vec<f64>,
}

impl ReturnSeries {
    pub fn new(dates: Vec<NaiveDate>, returns: Vec<f64>) -> Result<Self> {
        if dates.len() != returns.len() {
            return Err(Error::invalid("dates and returns differ in length"));
        }
        for (i, w) in dates.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::Data {
                    line: i + 3,
                    message: format!("date {} does not follow {}", w[1], w[0]),
                });
            }
        }
        if let Some(i) = returns.iter().position(|r| !r.is_finite()) {
            return Err(Error::Data {
                line: i + 2,
                message: "return is not finite".into(),
            });
        }
        Ok(Self { dates, returns })
    }

    /// Attach consecutive weekdays starting at `start` (moved forward to a
    /// weekday if needed).
    pub fn with_business_days(start: NaiveDate, returns: Vec<f64>) -> Result<Self> {
        let mut dates = Vec::with_capacity(returns.len());
        let mut d = start;
        for _ in 0..returns.len() {
            while matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
                d = d + Days::new(1);
            }
            dates.push(d);
            d = d + Days::new(1);
        }
        Self::new(dates, returns)
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }
}

/// Default first date for synthetic series.
pub fn default_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date")
}

pub fn read_returns<R: Read>(input: R) -> Result<ReturnSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input);
    let header = rdr.headers().map_err(|e| Error::Data {
        line: 1,
        message: e.to_string(),
    })?;
    if header.len() != 2 || &header[0] != DATE_COLUMN || &header[1] != RETURN_COLUMN {
        return Err(Error::Data {
            line: 1,
            message: format!("expected header `{DATE_COLUMN},{RETURN_COLUMN}`"),
        });
    }
    let mut dates = Vec::new();
    let mut returns = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 2 {
            return Err(Error::Data {
                line,
                message: format!("expected 2 fields, found {}", rec.len()),
            });
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|e| Error::Data {
            line,
            message: format!("bad date `{}`: {e}", &rec[0]),
        })?;
        let r: f64 = rec[1].parse().map_err(|_| Error::Data {
            line,
            message: format!("bad return `{}`", &rec[1]),
        })?;
        if !r.is_finite() {
            return Err(Error::Data {
                line,
                message: "return is not finite".into(),
            });
        }
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(Error::Data {
                    line,
                    message: format!("date {date} does not follow {prev}"),
                });
            }
        }
        dates.push(date);
        returns.push(r);
    }
    Ok(ReturnSeries { dates, returns })
}

pub fn ingest_returns(path: &Path) -> Result<ReturnSeries> {
    read_returns(File::open(path)?)
}

pub fn write_returns<W: Write>(out: W, series: &ReturnSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([DATE_COLUMN, RETURN_COLUMN])
        .map_err(csv_io)?;
    for (d, r) in series.dates.iter().zip(&series.returns) {
        w.write_record([d.format("%Y-%m-%d").to_string(), r.to_string()])
            .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_returns(path: &Path, series: &ReturnSeries) -> Result<()> {
    write_returns(File::create(path)?, series)
}
