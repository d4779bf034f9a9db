//! Per-epoch training metrics and their CSV serialization.
//!
//! Fixed column order, floats at 6 decimals, blank fields for quantities a
//! step does not produce (e.g. discriminator losses in Step 3). The CSV
//! re-parses to records that match at printed precision.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// One row per epoch. `subnet` arrays are indexed 0..3 (third slot unused
/// for two-subnet runs); the composite losses are the quantities the
/// optimizer actually minimized that epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: u8,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub l3: Option<f64>,
    pub l_cls: [Option<f64>; 3],
    pub l_d1: Option<f64>,
    pub l_d2: Option<f64>,
    pub l_d3: Option<f64>,
    pub l_d: Option<f64>,
    pub l_extra: Option<f64>,
    pub disc_sep_acc: f64,
    pub train_acc: [Option<f64>; 4],
    pub test_acc: [Option<f64>; 4],
}

impl MetricsRecord {
    pub fn blank(epoch: usize, step: u8) -> Self {
        MetricsRecord {
            epoch,
            step,
            l1: None,
            l2: None,
            l3: None,
            l_cls: [None; 3],
            l_d1: None,
            l_d2: None,
            l_d3: None,
            l_d: None,
            l_extra: None,
            disc_sep_acc: 0.0,
            train_acc: [None; 4],
            test_acc: [None; 4],
        }
    }
}

pub const CSV_HEADER: &str = "epoch,step,l1,l2,l3,l_cls1,l_cls2,l_cls3,l_d1,l_d2,l_d3,l_d,\
l_extra,disc_sep_acc,train_acc1,train_acc2,train_acc3,train_acc_extra,\
test_acc1,test_acc2,test_acc3,test_acc_extra";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| Error::Data(format!("bad float field '{s}'")))
}

pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let fields = [
            r.epoch.to_string(),
            r.step.to_string(),
            fmt_opt(r.l1),
            fmt_opt(r.l2),
            fmt_opt(r.l3),
            fmt_opt(r.l_cls[0]),
            fmt_opt(r.l_cls[1]),
            fmt_opt(r.l_cls[2]),
            fmt_opt(r.l_d1),
            fmt_opt(r.l_d2),
            fmt_opt(r.l_d3),
            fmt_opt(r.l_d),
            fmt_opt(r.l_extra),
            format!("{:.6}", r.disc_sep_acc),
            fmt_opt(r.train_acc[0]),
            fmt_opt(r.train_acc[1]),
            fmt_opt(r.train_acc[2]),
            fmt_opt(r.train_acc[3]),
            fmt_opt(r.test_acc[0]),
            fmt_opt(r.test_acc[1]),
            fmt_opt(r.test_acc[2]),
            fmt_opt(r.test_acc[3]),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(to_csv(records).as_bytes())?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(Error::Data(format!("bad metrics header: {other:?}"))),
    }
    let mut records = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 22 {
            return Err(Error::Data(format!("expected 22 fields, got {}", f.len())));
        }
        records.push(MetricsRecord {
            epoch: f[0].parse().map_err(|_| Error::Data(format!("bad epoch '{}'", f[0])))?,
            step: f[1].parse().map_err(|_| Error::Data(format!("bad step '{}'", f[1])))?,
            l1: parse_opt(f[2])?,
            l2: parse_opt(f[3])?,
            l3: parse_opt(f[4])?,
            l_cls: [parse_opt(f[5])?, parse_opt(f[6])?, parse_opt(f[7])?],
            l_d1: parse_opt(f[8])?,
            l_d2: parse_opt(f[9])?,
            l_d3: parse_opt(f[10])?,
            l_d: parse_opt(f[11])?,
            l_extra: parse_opt(f[12])?,
            disc_sep_acc: f[13]
                .parse()
                .map_err(|_| Error::Data(format!("bad sep acc '{}'", f[13])))?,
            train_acc: [
                parse_opt(f[14])?,
                parse_opt(f[15])?,
                parse_opt(f[16])?,
                parse_opt(f[17])?,
            ],
            test_acc: [
                parse_opt(f[18])?,
                parse_opt(f[19])?,
                parse_opt(f[20])?,
                parse_opt(f[21])?,
            ],
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(epoch: usize) -> MetricsRecord {
        let mut r = MetricsRecord::blank(epoch, 2);
        r.l1 = Some(1.234567891);
        r.l_cls[0] = Some(1.0);
        r.l_d1 = Some(0.234567891);
        r.disc_sep_acc = 0.8125;
        r.train_acc = [Some(0.5), Some(0.625), None, Some(0.75)];
        r.test_acc = [Some(0.4), Some(0.5), None, Some(0.6)];
        r
    }

    #[test]
    fn empty_run_is_header_only() {
        let csv = to_csv(&[]);
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.ends_with('\n'));
    }

    #[test]
    fn three_records_make_four_lines() {
        let csv = to_csv(&[sample(0), sample(1), sample(2)]);
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn round_trip_at_printed_precision() {
        let records = vec![sample(0), sample(1)];
        let parsed = parse_csv(&to_csv(&records)).unwrap();
        assert_eq!(parsed.len(), 2);
        // printed at 6 decimals, so compare against the rounded original
        assert_eq!(parsed[0].l1, Some(1.234568));
        assert_eq!(parsed[0].l_d1, Some(0.234568));
        assert_eq!(parsed[0].l2, None);
        assert_eq!(parsed[0].train_acc, [Some(0.5), Some(0.625), None, Some(0.75)]);
        // and a re-serialization is byte-stable
        assert_eq!(to_csv(&parsed), to_csv(&parse_csv(&to_csv(&parsed)).unwrap()));
    }

    #[test]
    fn bad_header_rejected() {
        assert!(parse_csv("nope\n1,2").is_err());
    }
}
