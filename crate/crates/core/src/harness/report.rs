//! Aggregation of sweep results into per-method mean-error-vs-FAD tables.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::scenario::Method;
use crate::harness::sweep::MetricsRow;

#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub method: Method,
    pub cmr: f64,
    pub fad: f64,
    /// Number of successful seeds behind the means.
    pub count: usize,
    pub mean_mape_power: f64,
    pub mean_mape_vmag: f64,
    pub mean_miae_vang: f64,
}

/// Group rows by (method, cmr, fad) and average the error metrics over
/// successful seeds. Rows with a failure status contribute nothing.
pub fn aggregate(rows: &[MetricsRow]) -> Result<Vec<AggregateRow>> {
    let ok_rows: Vec<&MetricsRow> = rows.iter().filter(|r| r.is_ok()).collect();
    if ok_rows.is_empty() {
        return Err(Error::InvalidParameter(
            "no successful rows to aggregate".into(),
        ));
    }
    // Keys ordered by (method label, cmr, fad); f64 keys go through bits
    // after the range checks, which keeps BTreeMap happy.
    let mut groups: BTreeMap<(&'static str, u64, u64), Vec<&MetricsRow>> = BTreeMap::new();
    for row in ok_rows {
        groups
            .entry((row.method.label(), row.cmr.to_bits(), row.fad.to_bits()))
            .or_default()
            .push(row);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((_, _, _), members) in groups {
        let count = members.len();
        let mean = |f: fn(&MetricsRow) -> f64| -> f64 {
            members.iter().map(|r| f(r)).sum::<f64>() / count as f64
        };
        out.push(AggregateRow {
            method: members[0].method,
            cmr: members[0].cmr,
            fad: members[0].fad,
            count,
            mean_mape_power: mean(|r| r.mape_power),
            mean_mape_vmag: mean(|r| r.mape_vmag),
            mean_miae_vang: mean(|r| r.miae_vang),
        });
    }
    Ok(out)
}

fn write_table<W: Write>(
    writer: W,
    rows: &[AggregateRow],
    metric_name: &str,
    metric: fn(&AggregateRow) -> f64,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["method", "cmr", "fad", "seeds", metric_name])?;
    for row in rows {
        out.write_record([
            row.method.label().to_string(),
            format!("{}", row.cmr),
            format!("{}", row.fad),
            row.count.to_string(),
            format!("{}", metric(row)),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Write the three per-figure tables (power MAPE, voltage-magnitude MAPE,
/// voltage-angle MIAE, each versus FAD per method) into `dir`.
pub fn write_report_tables(dir: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<Vec<String>> {
    let aggregated = aggregate(rows)?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let tables: [(&str, &str, fn(&AggregateRow) -> f64); 3] = [
        ("report_power.csv", "mean_mape_power", |r| r.mean_mape_power),
        ("report_vmag.csv", "mean_mape_vmag", |r| r.mean_mape_vmag),
        ("report_vang.csv", "mean_miae_vang", |r| r.mean_miae_vang),
    ];
    let mut written = Vec::new();
    for (file, metric_name, metric) in tables {
        let path = dir.join(file);
        let handle = std::fs::File::create(&path)?;
        write_table(handle, &aggregated, metric_name, metric)?;
        written.push(path.display().to_string());
    }
    Ok(written)
}
