//! File formats: beacon-style drifter CSV and flat binary field snapshots
//! with a text sidecar.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Duration as ChronoDuration, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GeoProjection, Grid, ScalarField, Vec2};
use crate::lagrangian::{DrifterObservation, DrifterRole};

#[derive(Debug, Serialize, Deserialize)]
struct DrifterRow {
    drifter_id: String,
    iso_timestamp: String,
    lat: f64,
    lon: f64,
    v_east_mps: f64,
    v_north_mps: f64,
    role: String,
}

pub fn parse_epoch(s: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| Error::config(format!("bad timestamp {s:?}: {e}")))
}

pub fn format_time(epoch: DateTime<Utc>, t: f64) -> String {
    let ms = (t * 1000.0).round() as i64;
    (epoch + ChronoDuration::milliseconds(ms)).to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Reads drifter reports; positions go through `projection` into local
/// meters and timestamps become seconds since `epoch`.
pub fn read_drifter_csv(
    path: &Path,
    projection: &GeoProjection,
    epoch: DateTime<Utc>,
) -> Result<Vec<DrifterObservation>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Input(format!("cannot open drifter file {}: {e}", path.display())))?;
    parse_drifter_csv(file, projection, epoch).map_err(|e| match e {
        Error::Input(msg) => Error::Input(format!("{}: {msg}", path.display())),
        Error::Csv(err) => Error::Input(format!("{}: {err}", path.display())),
        other => other,
    })
}

pub fn parse_drifter_csv(
    reader: impl std::io::Read,
    projection: &GeoProjection,
    epoch: DateTime<Utc>,
) -> Result<Vec<DrifterObservation>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (n, row) in rdr.deserialize::<DrifterRow>().enumerate() {
        let line = n + 2;
        let row = row?;
        let t = DateTime::parse_from_rfc3339(&row.iso_timestamp)
            .map_err(|e| {
                Error::Input(format!(
                    "line {line}: bad timestamp {:?}: {e}",
                    row.iso_timestamp
                ))
            })?
            .with_timezone(&Utc);
        let role = DrifterRole::parse(&row.role)
            .ok_or_else(|| Error::Input(format!("line {line}: unknown role {:?}", row.role)))?;
        let secs = (t - epoch).num_milliseconds() as f64 / 1000.0;
        out.push(DrifterObservation {
            drifter_id: row.drifter_id.as_str().into(),
            timestamp: secs,
            position: projection.to_local(row.lat, row.lon),
            velocity: Vec2::new(row.v_east_mps, row.v_north_mps),
            role,
        });
    }
    if out.is_empty() {
        return Err(Error::Input("drifter file has no observations".into()));
    }
    Ok(out)
}

pub fn write_drifter_csv(
    path: &Path,
    obs: &[DrifterObservation],
    projection: &GeoProjection,
    epoch: DateTime<Utc>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for o in obs {
        let (lat, lon) = projection.to_geo(o.position);
        w.serialize(DrifterRow {
            drifter_id: o.drifter_id.0.clone(),
            iso_timestamp: format_time(epoch, o.timestamp),
            lat,
            lon,
            v_east_mps: o.velocity.x,
            v_north_mps: o.velocity.y,
            role: o.role.as_str().into(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar metadata of a binary snapshot. Values are stored as
/// little-endian f64, row-major with `i` (east) fastest, south row first.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotHeader {
    pub name: String,
    pub nx: usize,
    pub ny: usize,
    pub origin: Vec2,
    pub cell_size: f64,
    /// Seconds since the mission epoch.
    pub t: f64,
}

impl SnapshotHeader {
    pub fn for_field(name: &str, field: &ScalarField, t: f64) -> Self {
        let g = field.grid();
        SnapshotHeader {
            name: name.into(),
            nx: g.nx(),
            ny: g.ny(),
            origin: g.origin(),
            cell_size: g.cell_size(),
            t,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "nx = {}", self.nx);
        let _ = writeln!(s, "ny = {}", self.ny);
        let _ = writeln!(s, "origin_x = {:?}", self.origin.x);
        let _ = writeln!(s, "origin_y = {:?}", self.origin.y);
        let _ = writeln!(s, "cell_size = {:?}", self.cell_size);
        let _ = writeln!(s, "t = {:?}", self.t);
        let _ = writeln!(s, "dtype = f64le");
        let _ = writeln!(s, "order = row-major, x fastest, south row first");
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let get = |key: &str| -> Result<String> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim().to_string())
                .ok_or_else(|| Error::Input(format!("snapshot header lacks {key}")))
        };
        let num = |v: String, key: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Input(format!("snapshot header: bad {key} {v:?}")))
        };
        let int = |v: String, key: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Input(format!("snapshot header: bad {key} {v:?}")))
        };
        Ok(SnapshotHeader {
            name: get("name")?,
            nx: int(get("nx")?, "nx")?,
            ny: int(get("ny")?, "ny")?,
            origin: Vec2::new(
                num(get("origin_x")?, "origin_x")?,
                num(get("origin_y")?, "origin_y")?,
            ),
            cell_size: num(get("cell_size")?, "cell_size")?,
            t: num(get("t")?, "t")?,
        })
    }
}

fn sidecar(bin: &Path) -> PathBuf {
    bin.with_extension("hdr")
}

/// Writes `<stem>.bin` and `<stem>.hdr` into `dir`, creating it if needed;
/// returns the bin path.
pub fn write_snapshot(
    dir: &Path,
    stem: &str,
    header: &SnapshotHeader,
    values: &[f64],
) -> Result<PathBuf> {
    if values.len() != header.nx * header.ny {
        return Err(Error::config("snapshot size does not match its header"));
    }
    fs::create_dir_all(dir)?;
    let bin = dir.join(format!("{stem}.bin"));
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bin, bytes)?;
    fs::write(sidecar(&bin), header.to_text())?;
    Ok(bin)
}

pub fn read_snapshot(bin: &Path) -> Result<(SnapshotHeader, Vec<f64>)> {
    let hdr_path = sidecar(bin);
    let text = fs::read_to_string(&hdr_path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", hdr_path.display())))?;
    let header = SnapshotHeader::parse(&text)?;
    let bytes =
        fs::read(bin).map_err(|e| Error::Input(format!("cannot read {}: {e}", bin.display())))?;
    if bytes.len() != 8 * header.nx * header.ny {
        return Err(Error::Input(format!(
            "{} holds {} bytes, header implies {}",
            bin.display(),
            bytes.len(),
            8 * header.nx * header.ny
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, values))
}

/// Snapshot values as a field on an all-sea grid of the header's shape.
pub fn snapshot_field(header: &SnapshotHeader, values: Vec<f64>) -> Result<ScalarField> {
    let grid = Grid::new(header.origin, header.cell_size, header.nx, header.ny)?;
    ScalarField::from_values(Arc::new(grid), values)
}

/// Dense matrix CSV: `ny` rows of `nx` values, south row first.
pub fn write_matrix_csv(path: &Path, header: &SnapshotHeader, values: &[f64]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for row in values.chunks(header.nx) {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn epoch() -> DateTime<Utc> {
        parse_epoch("2024-06-12T10:15:00Z").unwrap()
    }

    #[test]
    fn drifter_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let proj = GeoProjection::new(44.9, 14.36);
        let obs = vec![
            DrifterObservation {
                drifter_id: "D1".into(),
                timestamp: 10.0,
                position: Vec2::new(120.0, -40.0),
                velocity: Vec2::new(0.1, -0.05),
                role: DrifterRole::Fitting,
            },
            DrifterObservation {
                drifter_id: "V1".into(),
                timestamp: 20.5,
                position: Vec2::new(900.0, 700.0),
                velocity: Vec2::new(0.0, 0.2),
                role: DrifterRole::Validation,
            },
        ];
        let path = dir.path().join("d.csv");
        write_drifter_csv(&path, &obs, &proj, epoch()).unwrap();
        let back = read_drifter_csv(&path, &proj, epoch()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in obs.iter().zip(&back) {
            assert_eq!(a.drifter_id, b.drifter_id);
            assert_eq!(a.role, b.role);
            assert!((a.timestamp - b.timestamp).abs() < 1e-9);
            assert!((a.position - b.position).norm() < 1e-6);
            assert_eq!(a.velocity, b.velocity);
        }
    }

    #[test]
    fn missing_and_empty_files_are_input_errors() {
        let dir = tempfile::tempdir().unwrap();
        let proj = GeoProjection::new(44.9, 14.36);
        let missing = dir.path().join("nope.csv");
        let e = read_drifter_csv(&missing, &proj, epoch()).unwrap_err();
        assert!(e.is_input_error());
        assert!(e.to_string().contains("nope.csv"));
        let empty = dir.path().join("empty.csv");
        fs::write(
            &empty,
            "drifter_id,iso_timestamp,lat,lon,v_east_mps,v_north_mps,role\n",
        )
        .unwrap();
        assert!(read_drifter_csv(&empty, &proj, epoch())
            .unwrap_err()
            .is_input_error());
        fs::write(&empty, "").unwrap();
        assert!(read_drifter_csv(&empty, &proj, epoch())
            .unwrap_err()
            .is_input_error());
    }

    #[test]
    fn bad_row_names_line() {
        let proj = GeoProjection::new(44.9, 14.36);
        let text = "drifter_id,iso_timestamp,lat,lon,v_east_mps,v_north_mps,role\n\
                    a,2024-06-12T10:15:10Z,44.9,14.36,0.1,0.0,fitting\n\
                    a,yesterday,44.9,14.36,0.1,0.0,fitting\n";
        let e = parse_drifter_csv(text.as_bytes(), &proj, epoch()).unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Arc::new(Grid::new(Vec2::new(-10.0, 5.0), 25.0, 7, 5).unwrap());
        let f = ScalarField::from_fn(Arc::clone(&g), |p| p.x * 1e-3 + p.y.sin() / 3.0);
        let h = SnapshotHeader::for_field("belief", &f, 123.0);
        let bin = write_snapshot(dir.path(), "belief_000123", &h, f.values()).unwrap();
        let (h2, v2) = read_snapshot(&bin).unwrap();
        assert_eq!(h, h2);
        assert_eq!(v2, f.values());
        let back = snapshot_field(&h2, v2).unwrap();
        assert_eq!(back.values(), f.values());
        assert!(SnapshotHeader::parse("nx = 3").is_err());
    }

    #[test]
    fn matrix_export_shape() {
        let dir = tempfile::tempdir().unwrap();
        let g = Arc::new(Grid::new(Vec2::ZERO, 10.0, 6, 4).unwrap());
        let f = ScalarField::from_fn(Arc::clone(&g), |p| p.x + 100.0 * p.y);
        let h = SnapshotHeader::for_field("u", &f, 0.0);
        let path = dir.path().join("u.csv");
        write_matrix_csv(&path, &h, f.values()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.len() == 6));
        assert_eq!(rows[2][3], f.get(3, 2));
    }
}
