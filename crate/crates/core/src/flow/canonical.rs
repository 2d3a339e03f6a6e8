//! Canonical debug CSV for flow records.
//!
//! A lossless textual form used by tests and debugging dumps: fixed
//! canonical columns followed by one `feat:<name>` column per feature
//! present anywhere in the record set. Absent optional values are empty
//! cells. Never a production data path.

use std::collections::BTreeSet;

use super::{FlowError, FlowRecord, L4Protocol};

const FIXED: [&str; 11] = [
    "client_id",
    "server_ip",
    "client_port",
    "server_port",
    "l4_protocol",
    "bytes_up",
    "bytes_down",
    "packets_up",
    "packets_down",
    "timestamp",
    "domain",
];

pub fn write_canonical_csv(records: &[FlowRecord]) -> String {
    let feature_names: BTreeSet<&str> = records
        .iter()
        .flat_map(|r| r.features.keys().map(String::as_str))
        .collect();

    let mut out = String::new();
    out.push_str(&FIXED.join(","));
    for name in &feature_names {
        out.push_str(",feat:");
        out.push_str(name);
    }
    out.push('\n');

    for r in records {
        let mut row = vec![
            r.client_id.clone(),
            r.server_ip.to_string(),
            r.client_port.to_string(),
            r.server_port.to_string(),
            r.l4_protocol.as_str().to_string(),
            r.bytes_up.to_string(),
            r.bytes_down.to_string(),
            r.packets_up.to_string(),
            r.packets_down.to_string(),
            r.timestamp.to_string(),
            r.domain.clone().unwrap_or_default(),
        ];
        for name in &feature_names {
            // `{}` on f64 prints the shortest round-trippable form.
            row.push(match r.features.get(*name) {
                Some(v) => format!("{v}"),
                None => String::new(),
            });
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn read_canonical_csv(text: &str) -> Result<Vec<FlowRecord>, FlowError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| FlowError::InvalidRecord("missing canonical header".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < FIXED.len() || cols[..FIXED.len()] != FIXED {
        return Err(FlowError::InvalidRecord(
            "unexpected canonical header".into(),
        ));
    }
    let feature_names: Vec<&str> = cols[FIXED.len()..]
        .iter()
        .map(|c| {
            c.strip_prefix("feat:")
                .ok_or_else(|| FlowError::InvalidRecord(format!("bad feature column {c:?}")))
        })
        .collect::<Result<_, _>>()?;

    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(FlowError::InvalidRecord(format!(
                "row {} has {} fields, expected {}",
                lineno + 2,
                fields.len(),
                cols.len()
            )));
        }
        let bad = |what: &str| FlowError::InvalidRecord(format!("row {}: {what}", lineno + 2));
        let record = FlowRecord {
            client_id: fields[0].to_string(),
            server_ip: fields[1].parse().map_err(|_| bad("server_ip"))?,
            client_port: fields[2].parse().map_err(|_| bad("client_port"))?,
            server_port: fields[3].parse().map_err(|_| bad("server_port"))?,
            l4_protocol: L4Protocol::parse(fields[4]).ok_or_else(|| bad("l4_protocol"))?,
            bytes_up: fields[5].parse().map_err(|_| bad("bytes_up"))?,
            bytes_down: fields[6].parse().map_err(|_| bad("bytes_down"))?,
            packets_up: fields[7].parse().map_err(|_| bad("packets_up"))?,
            packets_down: fields[8].parse().map_err(|_| bad("packets_down"))?,
            timestamp: fields[9].parse().map_err(|_| bad("timestamp"))?,
            domain: (!fields[10].is_empty()).then(|| fields[10].to_string()),
            features: feature_names
                .iter()
                .zip(&fields[FIXED.len()..])
                .filter(|(_, v)| !v.is_empty())
                .map(|(name, v)| {
                    v.parse::<f64>()
                        .map(|x| (name.to_string(), x))
                        .map_err(|_| bad(&format!("feature {name}")))
                })
                .collect::<Result<_, _>>()?,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}
