//! Station and observation tables.
//!
//! Both files are strict comma-separated tables with a mandatory header.
//! Fields never contain commas or quotes, so no quoting dialect applies;
//! every malformed row is reported with its line number.

use crate::error::{Error, Result};
use crate::mesh::Point2;
use crate::model::Field;
use crate::simulate::Station;

pub const STATION_HEADER: &str = "station_id,x_km,y_km,elevation_m,dist_ocean_m";
pub const OBS_HEADER: &str = "station_id,year,field,value";

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Schema(format!("line {line}: {msg}"))
}

fn parse_num(line: usize, name: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| bad(line, format!("bad {name} '{s}'")))?;
    if !v.is_finite() {
        return Err(bad(line, format!("{name} must be finite, got '{s}'")));
    }
    Ok(v)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

/// Parse a station table.
pub fn parse_stations(text: &str) -> Result<Vec<Station>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Schema("empty station file".into()))?;
    if header.trim() != STATION_HEADER {
        return Err(Error::Schema(format!(
            "station header must be '{STATION_HEADER}', got '{}'",
            header.trim()
        )));
    }
    let mut out: Vec<Station> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (idx, line) in lines {
        let ln = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(bad(ln, format!("expected 5 fields, got {}", parts.len())));
        }
        let id = parts[0].trim();
        if !valid_id(id) {
            return Err(bad(ln, format!("invalid station_id '{id}'")));
        }
        if !seen.insert(id.to_string()) {
            return Err(bad(ln, format!("duplicate station_id '{id}'")));
        }
        out.push(Station {
            id: id.to_string(),
            location: Point2::new(
                parse_num(ln, "x_km", parts[1])?,
                parse_num(ln, "y_km", parts[2])?,
            ),
            elevation_m: parse_num(ln, "elevation_m", parts[3])?,
            dist_ocean_m: parse_num(ln, "dist_ocean_m", parts[4])?,
        });
    }
    if out.is_empty() {
        return Err(Error::Schema("station file has no rows".into()));
    }
    Ok(out)
}

pub fn write_stations(stations: &[Station]) -> String {
    let mut s = String::from(STATION_HEADER);
    s.push('\n');
    for st in stations {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            st.id, st.location.x, st.location.y, st.elevation_m, st.dist_ocean_m
        ));
    }
    s
}

/// One raw observation row (humidity still on the measurement scale).
#[derive(Debug, Clone, PartialEq)]
pub struct RawObs {
    pub station_id: String,
    pub year: i32,
    pub field: Field,
    pub value: f64,
}

/// Parse an observation table. Humidity values must be positive (they are
/// transformed later).
pub fn parse_obs(text: &str) -> Result<Vec<RawObs>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Schema("empty observation file".into()))?;
    if header.trim() != OBS_HEADER {
        return Err(Error::Schema(format!(
            "observation header must be '{OBS_HEADER}', got '{}'",
            header.trim()
        )));
    }
    let mut out: Vec<RawObs> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (idx, line) in lines {
        let ln = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(bad(ln, format!("expected 4 fields, got {}", parts.len())));
        }
        let id = parts[0].trim();
        if !valid_id(id) {
            return Err(bad(ln, format!("invalid station_id '{id}'")));
        }
        let year: i32 = parts[1]
            .trim()
            .parse()
            .map_err(|_| bad(ln, format!("bad year '{}'", parts[1])))?;
        let field = Field::parse(parts[2].trim()).map_err(|e| bad(ln, e))?;
        let value = parse_num(ln, "value", parts[3])?;
        if field == Field::Humidity && value <= 0.0 {
            return Err(bad(ln, format!("humidity must be positive, got {value}")));
        }
        if !seen.insert((id.to_string(), year, field)) {
            return Err(bad(
                ln,
                format!("duplicate observation key ({id}, {year}, {})", field.code()),
            ));
        }
        out.push(RawObs {
            station_id: id.to_string(),
            year,
            field,
            value,
        });
    }
    if out.is_empty() {
        return Err(Error::Schema("observation file has no rows".into()));
    }
    Ok(out)
}

pub fn write_obs(rows: &[RawObs]) -> String {
    let mut s = String::from(OBS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.station_id,
            r.year,
            r.field.code(),
            r.value
        ));
    }
    s
}

/// Prediction target rows: `x_km,y_km,year,field,elevation_m,dist_ocean_m`.
pub const TARGET_HEADER: &str = "x_km,y_km,year,field,elevation_m,dist_ocean_m";

pub struct TargetRow {
    pub location: Point2,
    pub year: i32,
    pub field: Field,
    pub elevation_m: f64,
    pub dist_ocean_m: f64,
}

pub fn parse_targets(text: &str) -> Result<Vec<TargetRow>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Schema("empty target file".into()))?;
    if header.trim() != TARGET_HEADER {
        return Err(Error::Schema(format!(
            "target header must be '{TARGET_HEADER}', got '{}'",
            header.trim()
        )));
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let ln = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(bad(ln, format!("expected 6 fields, got {}", parts.len())));
        }
        out.push(TargetRow {
            location: Point2::new(
                parse_num(ln, "x_km", parts[0])?,
                parse_num(ln, "y_km", parts[1])?,
            ),
            year: parts[2]
                .trim()
                .parse()
                .map_err(|_| bad(ln, format!("bad year '{}'", parts[2])))?,
            field: Field::parse(parts[3].trim()).map_err(|e| bad(ln, e))?,
            elevation_m: parse_num(ln, "elevation_m", parts[4])?,
            dist_ocean_m: parse_num(ln, "dist_ocean_m", parts[5])?,
        });
    }
    if out.is_empty() {
        return Err(Error::Schema("target file has no rows".into()));
    }
    Ok(out)
}
