//! Raw cellular records and their pairing into route traversals.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::topology::RoadTopology;

/// Opaque, already-anonymised user key.
///
/// Hex strings of up to 16 digits map onto the integer directly (and render
/// back identically); any other text is digested to 64 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UserHash(pub u64);

impl UserHash {
    pub fn parse(s: &str) -> Self {
        let s = s.trim();
        if !s.is_empty() && s.len() <= 16 && s.bytes().all(|b| b.is_ascii_hexdigit()) {
            if let Ok(v) = u64::from_str_radix(s, 16) {
                return UserHash(v);
            }
        }
        let d = Sha256::digest(s.as_bytes());
        UserHash(u64::from_be_bytes(d[..8].try_into().expect("8 bytes")))
    }
}

impl fmt::Display for UserHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GctRecord {
    pub user: UserHash,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    pub segment: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GctPairing {
    pub user: UserHash,
    pub route: usize,
    pub start_time: i64,
    pub end_time: i64,
}

/// Default pairing window: 15 minutes.
pub const PAIRING_WINDOW_SECS: i64 = 900;

/// Match records of the same user on a route's start and end segments.
///
/// For each route `i -> j` and user, start records are visited in time order
/// and each takes the earliest unused end record strictly after it and no more
/// than `window` seconds later. Every record joins at most one pairing per
/// route. The result is ordered by start time, then route, then user.
pub fn pair_records(records: &[GctRecord], topology: &RoadTopology, window: i64) -> Result<Vec<GctPairing>> {
    if window <= 0 {
        return Err(Error::InvalidInput("pairing window must be positive".into()));
    }
    let n = topology.num_segments();
    for (k, r) in records.iter().enumerate() {
        if r.segment >= n {
            return Err(Error::InvalidInput(format!(
                "record {k} references unknown segment {}",
                r.segment
            )));
        }
        if k > 0 && records[k - 1].timestamp > r.timestamp {
            return Err(Error::InvalidInput(format!(
                "records must be sorted by timestamp (record {k} precedes its predecessor)"
            )));
        }
    }

    let mut by_start: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for route in topology.routes() {
        by_start[route.start].push((route.id, route.end));
    }

    let mut by_user: HashMap<UserHash, Vec<u32>> = HashMap::new();
    for (k, r) in records.iter().enumerate() {
        by_user.entry(r.user).or_default().push(k as u32);
    }

    let mut out = Vec::new();
    let mut starts = Vec::new();
    let mut ends = Vec::new();
    for (user, idx) in &by_user {
        let mut visited: Vec<usize> = idx.iter().map(|&k| records[k as usize].segment).collect();
        visited.sort_unstable();
        visited.dedup();
        for &seg in &visited {
            for &(route, end_seg) in &by_start[seg] {
                if visited.binary_search(&end_seg).is_err() {
                    continue;
                }
                starts.clear();
                ends.clear();
                for &k in idx {
                    let r = &records[k as usize];
                    if r.segment == seg {
                        starts.push(r.timestamp);
                    } else if r.segment == end_seg {
                        ends.push(r.timestamp);
                    }
                }
                // End records at or before a start can never serve a later start.
                let mut next_end = 0;
                for &s in &starts {
                    while next_end < ends.len() && ends[next_end] <= s {
                        next_end += 1;
                    }
                    if next_end < ends.len() && ends[next_end] - s <= window {
                        out.push(GctPairing {
                            user: *user,
                            route,
                            start_time: s,
                            end_time: ends[next_end],
                        });
                        next_end += 1;
                    }
                }
            }
        }
    }
    out.sort_unstable_by_key(|p| (p.start_time, p.route, p.user, p.end_time));
    Ok(out)
}

/// Parse `YYYY-MM-DD HH:MM:SS`, `YYYY/MM/DD HH:MM:SS`, RFC 3339 or integer
/// epoch seconds. Naive timestamps are read as UTC.
pub fn parse_timestamp(s: &str) -> Result<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Ok(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y/%m/%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    Err(Error::InvalidInput(format!("unrecognised timestamp `{s}`")))
}

#[derive(Deserialize)]
struct RecordRow {
    user_hash: String,
    timestamp: String,
    segment_id: usize,
}

pub fn read_records_csv<R: Read>(reader: R) -> Result<Vec<GctRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: RecordRow = row?;
        out.push(GctRecord {
            user: UserHash::parse(&row.user_hash),
            timestamp: parse_timestamp(&row.timestamp)?,
            segment: row.segment_id,
        });
    }
    Ok(out)
}

pub fn write_records_csv<W: Write>(records: &[GctRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user_hash", "timestamp", "segment_id"])?;
    for r in records {
        w.write_record([r.user.to_string(), r.timestamp.to_string(), r.segment.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<records csv>", e))?;
    Ok(())
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<GctRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records_csv(std::io::BufReader::new(f))
}

pub fn save_records(records: &[GctRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_records_csv(records, std::io::BufWriter::new(f))
}
