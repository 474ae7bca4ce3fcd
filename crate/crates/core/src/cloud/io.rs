//! Tile and raster file formats.
//!
//! * **PCT1** — binary point tiles: magic `PCT1`, one byte for the height
//!   frame (0 = HAS, 1 = HAG), a little-endian `u64` point count, then per
//!   point eight little-endian `f32` fields (`x, y, z, intensity, r, g, b,
//!   nir`) and one label byte. The header is exactly 13 bytes, each point
//!   record 33 bytes.
//! * **CSV tiles** — header `x,y,z,intensity,r,g,b,nir,label`, one row per
//!   point, labels as integer codes. Floats use the shortest representation
//!   that round-trips, so CSV tiles rewrite byte-identically.
//! * **Ground raster CSV** — five `key,value` header lines (`origin_x`,
//!   `origin_y`, `cell_size`, `rows`, `cols`) followed by the row-major grid,
//!   one raster row per line.
//! * **Window index CSV** — sidecar listing window geometry per window tile:
//!   `window_id,source_block_id,center_x,center_y,side,contains_target`.
//!
//! All writers validate invariants before touching the filesystem and emit
//! identical bytes for identical inputs; readers reject malformed content
//! with the offending byte offset (binary) or line number (text).

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::{ClassLabel, GroundModel, HeightFrame, PointCloud, PointRecord};

/// Magic bytes opening every binary tile.
const MAGIC: &[u8; 4] = b"PCT1";
/// Size of the binary header: magic + frame byte + u64 count.
const HEADER_LEN: usize = 13;
/// Size of one serialized point record: 8 f32 fields + 1 label byte.
const RECORD_LEN: usize = 33;
/// Column header of CSV tiles.
const CSV_HEADER: &str = "x,y,z,intensity,r,g,b,nir,label";

/// On-disk encoding of a point tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileFormat {
    /// Compact binary (`.pct1`).
    Binary,
    /// Human-readable CSV (`.csv`).
    Csv,
}

impl TileFormat {
    /// Guess the format from a path extension; defaults to binary.
    pub fn from_path(path: &Path) -> TileFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => TileFormat::Csv,
            _ => TileFormat::Binary,
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Serialize a cloud to `path`. The cloud is validated first; nothing is
/// written if any invariant fails. Identical clouds produce identical bytes.
pub fn write_tile(cloud: &PointCloud, path: &Path, format: TileFormat) -> Result<()> {
    cloud.validate()?;
    match format {
        TileFormat::Binary => {
            let mut buf = Vec::with_capacity(HEADER_LEN + RECORD_LEN * cloud.len());
            buf.extend_from_slice(MAGIC);
            buf.push(cloud.height_frame.to_u8());
            buf.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
            for p in &cloud.points {
                for v in [p.x, p.y, p.z, p.intensity, p.red, p.green, p.blue, p.nir] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                buf.push(p.label.to_u8());
            }
            write_atomic(path, &buf)
        }
        TileFormat::Csv => {
            let mut buf = Vec::with_capacity(64 * (cloud.len() + 1));
            // The height frame rides along as a comment so CSV tiles stay
            // self-describing like their binary siblings.
            writeln!(buf, "# height_frame={}", cloud.height_frame.to_u8()).unwrap();
            writeln!(buf, "{CSV_HEADER}").unwrap();
            for p in &cloud.points {
                writeln!(
                    buf,
                    "{},{},{},{},{},{},{},{},{}",
                    p.x,
                    p.y,
                    p.z,
                    p.intensity,
                    p.red,
                    p.green,
                    p.blue,
                    p.nir,
                    p.label.to_u8()
                )
                .unwrap();
            }
            write_atomic(path, &buf)
        }
    }
}

/// Read a tile written by [`write_tile`]. Point order is preserved exactly.
pub fn read_tile(path: &Path, format: TileFormat) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        TileFormat::Binary => read_binary(path, &bytes),
        TileFormat::Csv => read_csv(path, &bytes),
    }
}

fn read_binary(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::at_byte(
            path,
            bytes.len() as u64,
            format!("truncated header: {} bytes, expected at least {HEADER_LEN}", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::at_byte(path, 0, "bad magic, expected PCT1"));
    }
    let frame = HeightFrame::from_u8(bytes[4])
        .ok_or_else(|| Error::at_byte(path, 4, format!("unknown height frame {}", bytes[4])))?;
    let count = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
    let count_usize = usize::try_from(count)
        .map_err(|_| Error::at_byte(path, 5, format!("point count {count} overflows")))?;
    let expected = HEADER_LEN as u64 + RECORD_LEN as u64 * count;
    if bytes.len() as u64 != expected {
        return Err(Error::at_byte(
            path,
            bytes.len() as u64,
            format!(
                "file holds {} bytes but the header promises {count} points ({expected} bytes)",
                bytes.len()
            ),
        ));
    }
    let mut points = Vec::with_capacity(count_usize);
    for i in 0..count_usize {
        let base = HEADER_LEN + i * RECORD_LEN;
        let mut fields = [0f32; 8];
        for (j, f) in fields.iter_mut().enumerate() {
            let at = base + 4 * j;
            *f = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        }
        let label_at = base + 32;
        let label = ClassLabel::from_u8(bytes[label_at]).ok_or_else(|| {
            Error::at_byte(
                path,
                label_at as u64,
                format!("unknown class label {}", bytes[label_at]),
            )
        })?;
        let p = PointRecord {
            x: fields[0],
            y: fields[1],
            z: fields[2],
            intensity: fields[3],
            red: fields[4],
            green: fields[5],
            blue: fields[6],
            nir: fields[7],
            label,
        };
        p.validate()
            .map_err(|e| Error::at_byte(path, base as u64, format!("point {i}: {e}")))?;
        if frame == HeightFrame::Hag && p.z < 0.0 {
            return Err(Error::at_byte(
                path,
                base as u64,
                format!("point {i}: negative height above ground: {}", p.z),
            ));
        }
        points.push(p);
    }
    Ok(PointCloud::new(points, frame))
}

fn read_csv(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::at_byte(path, e.valid_up_to() as u64, "tile is not valid UTF-8"))?;
    let mut lines = text.lines().enumerate();

    let (_, frame_line) = lines
        .next()
        .ok_or_else(|| Error::at_line(path, 1, "empty file, expected height-frame comment"))?;
    let frame_code = frame_line
        .strip_prefix("# height_frame=")
        .and_then(|v| v.parse::<u8>().ok())
        .ok_or_else(|| Error::at_line(path, 1, "expected `# height_frame=<0|1>`"))?;
    let frame = HeightFrame::from_u8(frame_code)
        .ok_or_else(|| Error::at_line(path, 1, format!("unknown height frame {frame_code}")))?;

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::at_line(path, 2, "missing column header"))?;
    if header != CSV_HEADER {
        return Err(Error::at_line(
            path,
            2,
            format!("bad header {header:?}, expected {CSV_HEADER:?}"),
        ));
    }

    let mut points = Vec::new();
    for (idx, line) in lines {
        let line_no = idx as u64 + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::at_line(
                path,
                line_no,
                format!("expected 9 fields, found {}", fields.len()),
            ));
        }
        let mut parsed = [0f32; 8];
        for (j, v) in parsed.iter_mut().enumerate() {
            *v = fields[j].parse::<f32>().map_err(|_| {
                Error::at_line(path, line_no, format!("unparseable float {:?}", fields[j]))
            })?;
        }
        let code = fields[8].parse::<u8>().map_err(|_| {
            Error::at_line(path, line_no, format!("unparseable label {:?}", fields[8]))
        })?;
        let label = ClassLabel::from_u8(code)
            .ok_or_else(|| Error::at_line(path, line_no, format!("unknown class label {code}")))?;
        let p = PointRecord {
            x: parsed[0],
            y: parsed[1],
            z: parsed[2],
            intensity: parsed[3],
            red: parsed[4],
            green: parsed[5],
            blue: parsed[6],
            nir: parsed[7],
            label,
        };
        p.validate()
            .map_err(|e| Error::at_line(path, line_no, e.to_string()))?;
        if frame == HeightFrame::Hag && p.z < 0.0 {
            return Err(Error::at_line(
                path,
                line_no,
                format!("negative height above ground: {}", p.z),
            ));
        }
        points.push(p);
    }
    Ok(PointCloud::new(points, frame))
}

/// Serialize a ground raster; identical rasters produce identical bytes.
pub fn write_ground(ground: &GroundModel, path: &Path) -> Result<()> {
    ground.validate()?;
    let mut buf = Vec::with_capacity(16 * ground.elevation.len());
    writeln!(buf, "origin_x,{}", ground.origin_x).unwrap();
    writeln!(buf, "origin_y,{}", ground.origin_y).unwrap();
    writeln!(buf, "cell_size,{}", ground.cell_size).unwrap();
    writeln!(buf, "rows,{}", ground.rows).unwrap();
    writeln!(buf, "cols,{}", ground.cols).unwrap();
    for r in 0..ground.rows {
        let row = &ground.elevation[r * ground.cols..(r + 1) * ground.cols];
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(buf, "{}", line.join(",")).unwrap();
    }
    write_atomic(path, &buf)
}

/// Read a raster written by [`write_ground`].
pub fn read_ground(path: &Path) -> Result<GroundModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let mut header = |key: &str| -> Result<String> {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| Error::at_line(path, 0, format!("missing header line {key}")))?;
        let line_no = idx as u64 + 1;
        let (k, v) = line
            .split_once(',')
            .ok_or_else(|| Error::at_line(path, line_no, "expected `key,value`"))?;
        if k != key {
            return Err(Error::at_line(
                path,
                line_no,
                format!("expected header {key:?}, found {k:?}"),
            ));
        }
        Ok(v.to_string())
    };
    let parse_f64 = |s: String, what: &str, line: u64| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::at_line(path, line, format!("unparseable {what} {s:?}")))
    };
    let origin_x = parse_f64(header("origin_x")?, "origin_x", 1)?;
    let origin_y = parse_f64(header("origin_y")?, "origin_y", 2)?;
    let cell_size = parse_f64(header("cell_size")?, "cell_size", 3)?;
    let rows: usize = header("rows")?
        .parse()
        .map_err(|_| Error::at_line(path, 4, "unparseable rows"))?;
    let cols: usize = header("cols")?
        .parse()
        .map_err(|_| Error::at_line(path, 5, "unparseable cols"))?;

    let mut elevation = Vec::with_capacity(rows * cols);
    for (idx, line) in lines {
        let line_no = idx as u64 + 1;
        if line.is_empty() {
            continue;
        }
        for field in line.split(',') {
            let v = field.parse::<f32>().map_err(|_| {
                Error::at_line(path, line_no, format!("unparseable elevation {field:?}"))
            })?;
            elevation.push(v);
        }
    }
    GroundModel::new(origin_x, origin_y, cell_size, rows, cols, elevation)
}

/// One row of the window-index sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowIndexEntry {
    pub window_id: String,
    pub source_block_id: String,
    pub center_x: f64,
    pub center_y: f64,
    pub side: f64,
    pub contains_target: bool,
}

const WINDOW_INDEX_HEADER: &str = "window_id,source_block_id,center_x,center_y,side,contains_target";

/// Write the window-index sidecar CSV.
pub fn write_window_index(entries: &[WindowIndexEntry], path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(64 * (entries.len() + 1));
    writeln!(buf, "{WINDOW_INDEX_HEADER}").unwrap();
    for e in entries {
        if e.window_id.contains(',') || e.source_block_id.contains(',') {
            return Err(Error::InvalidData(format!(
                "window id {:?} / block id {:?} must not contain commas",
                e.window_id, e.source_block_id
            )));
        }
        writeln!(
            buf,
            "{},{},{},{},{},{}",
            e.window_id,
            e.source_block_id,
            e.center_x,
            e.center_y,
            e.side,
            u8::from(e.contains_target)
        )
        .unwrap();
    }
    write_atomic(path, &buf)
}

/// Read a sidecar written by [`write_window_index`].
pub fn read_window_index(path: &Path) -> Result<Vec<WindowIndexEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::at_line(path, 1, "empty window index"))?;
    if header != WINDOW_INDEX_HEADER {
        return Err(Error::at_line(
            path,
            1,
            format!("bad header {header:?}, expected {WINDOW_INDEX_HEADER:?}"),
        ));
    }
    let mut entries = Vec::new();
    for (idx, line) in lines {
        let line_no = idx as u64 + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::at_line(
                path,
                line_no,
                format!("expected 6 fields, found {}", f.len()),
            ));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::at_line(path, line_no, format!("unparseable {what} {s:?}")))
        };
        let contains_target = match f[5] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::at_line(
                    path,
                    line_no,
                    format!("contains_target must be 0 or 1, found {other:?}"),
                ));
            }
        };
        entries.push(WindowIndexEntry {
            window_id: f[0].to_string(),
            source_block_id: f[1].to_string(),
            center_x: parse(f[2], "center_x")?,
            center_y: parse(f[3], "center_y")?,
            side: parse(f[4], "side")?,
            contains_target,
        });
    }
    Ok(entries)
}
