//! Line-oriented file formats: click logs (CSV or JSON lines) and aggregated JSON lines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::aggregate::{AggregatedInstance, Aggregator};
use super::schema::ClickLogRecord;
use crate::error::{Error, Result};

fn is_jsonl(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("ndjson") | Some("json")
    )
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::file(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::file(path, e))?))
}

/// Streams click-log records into an aggregator. CSV needs a header row naming the fields.
pub fn aggregate_click_file(path: &Path, agg: &mut Aggregator) -> Result<()> {
    let file = open(path)?;
    if is_jsonl(path) {
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ClickLogRecord = serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
            agg.push(&rec)?;
        }
    } else {
        let mut rdr = csv::Reader::from_reader(BufReader::new(file));
        for rec in rdr.deserialize::<ClickLogRecord>() {
            agg.push(&rec?)?;
        }
    }
    Ok(())
}

pub fn read_click_file(path: &Path) -> Result<Vec<ClickLogRecord>> {
    let file = open(path)?;
    if is_jsonl(path) {
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(
                    serde_json::from_str(&line)
                        .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?,
                );
            }
        }
        Ok(out)
    } else {
        let mut rdr = csv::Reader::from_reader(BufReader::new(file));
        Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
    }
}

pub fn write_click_csv(path: &Path, records: impl IntoIterator<Item = ClickLogRecord>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_click_jsonl(path: &Path, records: impl IntoIterator<Item = ClickLogRecord>) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregated(path: &Path, instances: &[AggregatedInstance]) -> Result<()> {
    let mut w = create(path)?;
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_aggregated(path: &Path) -> Result<Vec<AggregatedInstance>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: AggregatedInstance = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if inst.impressions == 0 || inst.clicks > inst.impressions {
            return Err(Error::invalid(format!(
                "{}:{}: inconsistent counts {} clicks / {} impressions",
                path.display(),
                i + 1,
                inst.clicks,
                inst.impressions
            )));
        }
        if let Err((attr, v)) = inst.attributes.validate() {
            return Err(Error::MalformedRecord {
                index: i,
                attribute: attr.name(),
                value: v,
            });
        }
        out.push(inst);
    }
    Ok(out)
}
