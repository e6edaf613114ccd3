use super::{NamedArray, RelevanceRecord};
use crate::error::{Error, Result};
use std::io::{BufRead, BufReader, Read, Write};

/// CSV with the columns
/// `data,model_input,model_output,feature,feature_2,channel,output_node,value`.
/// Absent labels are empty cells. Values use the shortest representation
/// that parses back to the same `f64`.
pub fn write_records_csv(records: &[RelevanceRecord], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if records.is_empty() {
        w.write_record([
            "data",
            "model_input",
            "model_output",
            "feature",
            "feature_2",
            "channel",
            "output_node",
            "value",
        ])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(reader: impl Read) -> Result<Vec<RelevanceRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize()
        .map(|rec| rec.map_err(Error::from))
        .collect()
}

/// One JSON object per line.
pub fn write_records_jsonl(records: &[RelevanceRecord], mut writer: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_records_jsonl(reader: impl Read) -> Result<Vec<RelevanceRecord>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_arrays_json(arrays: &[NamedArray], mut writer: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, arrays)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}
