//! On-disk storage for reference point-cloud maps.
//!
//! Outdoor maps are partitioned into square ground-plane tiles so a
//! navigation run can stream in only the neighbourhood of the current
//! position estimate. A map directory holds one binary point file per
//! occupied tile plus a JSON `index.json`:
//!
//! ```json
//! {
//!   "tile_size": 50.0,
//!   "tiles": [ { "id": [ix, iy], "file": "tile_0_-1.bin", "count": 1234 } ]
//! }
//! ```
//!
//! A point with planar coordinates `(x, y)` belongs to tile
//! `(floor(x / tile_size), floor(y / tile_size))`. Tile files are raw
//! little-endian `f32` triples, 12 bytes per point. All writes iterate
//! tiles in sorted id order, so rebuilding a map from the same cloud is
//! byte-for-byte reproducible.
//!
//! Indoor maps are small enough to live in a single point file; the
//! [`IndoorMap`] type carries the full cloud together with its
//! ground/surround partition (see [`split_indoor`]), optionally cached on
//! disk next to the full cloud.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{Frame, PointCloud};
use crate::ground::{split_ground, GroundError, GroundSplitConfig};
use crate::scalar::Real;

pub const INDEX_FILE: &str = "index.json";
pub const DEFAULT_TILE_SIZE: f64 = 50.0;
/// Default ceiling cut for indoor map preparation: surround points more than
/// this height above the fitted ground plane are discarded.
pub const DEFAULT_CEILING_OFFSET: f64 = 2.2;

pub const INDOOR_FULL_FILE: &str = "map.bin";
pub const INDOOR_GROUND_FILE: &str = "ground.bin";
pub const INDOOR_SURROUND_FILE: &str = "surround.bin";

#[derive(Debug, Error)]
pub enum MapError {
    #[error("map I/O failed on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: cannot parse point record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("map index {path} is invalid: {message}")]
    BadIndex { path: PathBuf, message: String },
    #[error("tile file {path} is truncated or misaligned ({bytes} bytes)")]
    TruncatedTile { path: PathBuf, bytes: usize },
    #[error("tile file {path} holds {found} points but the index records {expected}")]
    CountMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("no map points inside the {extent} m region of interest at ({cx:.1}, {cy:.1})")]
    EmptyRoi { cx: f64, cy: f64, extent: f64 },
    #[error("no point files found under {path}")]
    EmptyStore { path: PathBuf },
    #[error(transparent)]
    Ground(#[from] GroundError),
}

fn io_err(path: &Path, source: std::io::Error) -> MapError {
    MapError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Tile id of a planar coordinate.
pub fn tile_id<R: Real>(x: R, y: R, tile_size: R) -> (i64, i64) {
    let ix = (x / tile_size).floor().to_i64().expect("tile index fits i64");
    let iy = (y / tile_size).floor().to_i64().expect("tile index fits i64");
    (ix, iy)
}

/// Writes a cloud as raw little-endian `f32` triples.
pub fn write_point_file<R: Real>(path: &Path, cloud: &PointCloud<R>) -> Result<(), MapError> {
    let mut buf = Vec::with_capacity(cloud.len() * 12);
    for p in &cloud.points {
        for c in [p.x, p.y, p.z] {
            buf.extend_from_slice(&(c.as_f64() as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Reads a raw little-endian `f32` point file into the given frame.
pub fn read_point_file<R: Real>(path: &Path, frame: Frame) -> Result<PointCloud<R>, MapError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() % 12 != 0 {
        return Err(MapError::TruncatedTile {
            path: path.to_path_buf(),
            bytes: bytes.len(),
        });
    }
    let points = bytes
        .chunks_exact(12)
        .map(|chunk| {
            let coord = |i: usize| {
                let raw: [u8; 4] = chunk[4 * i..4 * i + 4].try_into().expect("chunk size");
                R::c(f32::from_le_bytes(raw) as f64)
            };
            Vector3::new(coord(0), coord(1), coord(2))
        })
        .collect();
    Ok(PointCloud::new(points, frame))
}

/// Parses an ASCII `.xyz` file: one `x y z` triple per line, whitespace
/// separated. Blank lines and lines starting with `#` are skipped.
pub fn import_xyz<R: Real>(path: &Path) -> Result<PointCloud<R>, MapError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse = |field: Option<&str>, name: &str| -> Result<R, MapError> {
            let text = field.ok_or_else(|| MapError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("missing {name} coordinate"),
            })?;
            let value: f64 = text.parse().map_err(|_| MapError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("bad {name} coordinate {text:?}"),
            })?;
            Ok(R::c(value))
        };
        let mut fields = line.split_whitespace();
        let x = parse(fields.next(), "x")?;
        let y = parse(fields.next(), "y")?;
        let z = parse(fields.next(), "z")?;
        points.push(Vector3::new(x, y, z));
    }
    Ok(PointCloud::new(points, Frame::LocalLevel))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TileRecord {
    pub id: [i64; 2],
    pub file: String,
    pub count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    tile_size: f64,
    tiles: Vec<TileRecord>,
}

/// An opened tiled map directory.
#[derive(Debug, Clone)]
pub struct TileIndex {
    dir: PathBuf,
    tile_size: f64,
    tiles: BTreeMap<(i64, i64), TileRecord>,
}

impl TileIndex {
    pub fn tile_size(&self) -> f64 {
        self.tile_size
    }

    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }

    pub fn total_points(&self) -> usize {
        self.tiles.values().map(|t| t.count).sum()
    }

    pub fn contains(&self, id: (i64, i64)) -> bool {
        self.tiles.contains_key(&id)
    }

    pub fn tile_ids(&self) -> impl Iterator<Item = (i64, i64)> + '_ {
        self.tiles.keys().copied()
    }

    /// Opens an existing map directory by reading its index.
    pub fn load(dir: &Path) -> Result<Self, MapError> {
        let index_path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&index_path).map_err(|e| io_err(&index_path, e))?;
        let parsed: IndexFile =
            serde_json::from_str(&text).map_err(|e| MapError::BadIndex {
                path: index_path.clone(),
                message: e.to_string(),
            })?;
        if !(parsed.tile_size > 0.0) {
            return Err(MapError::BadIndex {
                path: index_path.clone(),
                message: format!("tile_size must be > 0, got {}", parsed.tile_size),
            });
        }
        let mut tiles = BTreeMap::new();
        for record in parsed.tiles {
            let id = (record.id[0], record.id[1]);
            if tiles.insert(id, record).is_some() {
                return Err(MapError::BadIndex {
                    path: index_path,
                    message: format!("duplicate tile id {id:?}"),
                });
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            tile_size: parsed.tile_size,
            tiles,
        })
    }

    /// Reads one tile, checking the point count against the index.
    pub fn read_tile<R: Real>(&self, id: (i64, i64)) -> Result<PointCloud<R>, MapError> {
        let record = &self.tiles[&id];
        let path = self.dir.join(&record.file);
        let cloud = read_point_file(&path, Frame::LocalLevel)?;
        if cloud.len() != record.count {
            return Err(MapError::CountMismatch {
                path,
                expected: record.count,
                found: cloud.len(),
            });
        }
        Ok(cloud)
    }

    /// Loads all map points inside the square region of interest of side
    /// `extent` centred at `(cx, cy)` (bounds inclusive).
    ///
    /// Tiles are visited in sorted id order and points kept in file order,
    /// so the output ordering is reproducible. An empty result is reported
    /// as [`MapError::EmptyRoi`]; the caller is expected to skip
    /// registration for that epoch.
    pub fn query_roi<R: Real>(
        &self,
        cx: R,
        cy: R,
        extent: R,
    ) -> Result<PointCloud<R>, MapError> {
        assert!(extent > R::zero(), "ROI extent must be > 0");
        let half = extent / R::c(2.0);
        let size = R::c(self.tile_size);
        let (ix_min, iy_min) = tile_id(cx - half, cy - half, size);
        let (ix_max, iy_max) = tile_id(cx + half, cy + half, size);
        let mut points = Vec::new();
        for ix in ix_min..=ix_max {
            for iy in iy_min..=iy_max {
                if !self.tiles.contains_key(&(ix, iy)) {
                    continue;
                }
                let tile = self.read_tile::<R>((ix, iy))?;
                points.extend(
                    tile.points
                        .into_iter()
                        .filter(|p| (p.x - cx).abs() <= half && (p.y - cy).abs() <= half),
                );
            }
        }
        if points.is_empty() {
            return Err(MapError::EmptyRoi {
                cx: cx.as_f64(),
                cy: cy.as_f64(),
                extent: extent.as_f64(),
            });
        }
        Ok(PointCloud::new(points, Frame::LocalLevel))
    }
}

/// Partitions a cloud into tiles and writes a complete map directory
/// (binary tiles plus `index.json`), creating it if needed.
pub fn build_tiles<R: Real>(
    cloud: &PointCloud<R>,
    tile_size: f64,
    dir: &Path,
) -> Result<TileIndex, MapError> {
    assert!(tile_size > 0.0, "tile size must be > 0");
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let size = R::c(tile_size);
    let mut cells: BTreeMap<(i64, i64), Vec<Vector3<R>>> = BTreeMap::new();
    for p in &cloud.points {
        cells.entry(tile_id(p.x, p.y, size)).or_default().push(*p);
    }
    let mut tiles = BTreeMap::new();
    let mut records = Vec::new();
    for ((ix, iy), points) in cells {
        let file = format!("tile_{ix}_{iy}.bin");
        let tile_cloud = PointCloud::new(points, Frame::LocalLevel);
        write_point_file(&dir.join(&file), &tile_cloud)?;
        let record = TileRecord {
            id: [ix, iy],
            file,
            count: tile_cloud.len(),
        };
        records.push(record.clone());
        tiles.insert((ix, iy), record);
    }
    let index = IndexFile {
        tile_size,
        tiles: records,
    };
    let index_path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    fs::write(&index_path, text).map_err(|e| io_err(&index_path, e))?;
    Ok(TileIndex {
        dir: dir.to_path_buf(),
        tile_size,
        tiles,
    })
}

/// True for files [`build_index`] should ingest: `.bin`/`.xyz` point files
/// that are not themselves tiles or the index.
fn is_ingest_file(name: &str) -> bool {
    if name == INDEX_FILE || name.starts_with("tile_") {
        return false;
    }
    name.ends_with(".bin") || name.ends_with(".xyz")
}

/// Ingests every raw point file in a directory (binary `.bin` or ASCII
/// `.xyz`, tile files excluded) and writes the tiled map in place.
///
/// Files are read in sorted name order so the build is reproducible.
pub fn build_index(dir: &Path, tile_size: f64) -> Result<TileIndex, MapError> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|entry| {
            let entry = entry.ok()?;
            let name = entry.file_name().into_string().ok()?;
            entry.file_type().ok()?.is_file().then_some(name)
        })
        .filter(|name| is_ingest_file(name))
        .collect();
    names.sort();
    let mut points: Vec<Vector3<f64>> = Vec::new();
    for name in &names {
        let path = dir.join(name);
        let cloud: PointCloud<f64> = if name.ends_with(".xyz") {
            import_xyz(&path)?
        } else {
            read_point_file(&path, Frame::LocalLevel)?
        };
        points.extend(cloud.points);
    }
    if points.is_empty() {
        return Err(MapError::EmptyStore {
            path: dir.to_path_buf(),
        });
    }
    build_tiles(&PointCloud::new(points, Frame::LocalLevel), tile_size, dir)
}

/// An indoor reference map: the full cloud plus its ground/surround
/// partition. `ground` and `surround` are disjoint subsets of `full`;
/// ceiling points may be dropped from both.
#[derive(Debug, Clone, PartialEq)]
pub struct IndoorMap<R: Real> {
    pub full: PointCloud<R>,
    pub ground: PointCloud<R>,
    pub surround: PointCloud<R>,
}

/// Default split configuration for indoor map preparation: the standard
/// ground fit plus the 2.2 m ceiling cut.
pub fn indoor_map_split_config<R: Real>() -> GroundSplitConfig<R> {
    GroundSplitConfig {
        ceiling_offset: Some(R::c(DEFAULT_CEILING_OFFSET)),
        ..GroundSplitConfig::default()
    }
}

/// Partitions an indoor map cloud into ground and surround.
///
/// Thin wrapper over [`split_ground`]; with a fixed seed the partition is
/// deterministic and independent of input point order.
pub fn split_indoor<R: Real>(
    map: &PointCloud<R>,
    config: &GroundSplitConfig<R>,
) -> Result<IndoorMap<R>, GroundError> {
    let split = split_ground(map, config)?;
    Ok(IndoorMap {
        full: map.clone(),
        ground: split.ground,
        surround: split.surround,
    })
}

impl<R: Real> IndoorMap<R> {
    /// Writes the full cloud plus the cached split into a directory.
    pub fn save(&self, dir: &Path) -> Result<(), MapError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_point_file(&dir.join(INDOOR_FULL_FILE), &self.full)?;
        write_point_file(&dir.join(INDOOR_GROUND_FILE), &self.ground)?;
        write_point_file(&dir.join(INDOOR_SURROUND_FILE), &self.surround)
    }

    /// Loads an indoor map directory, using the cached split when both
    /// cached files are present and recomputing it otherwise.
    pub fn load(dir: &Path, config: &GroundSplitConfig<R>) -> Result<Self, MapError> {
        let full = read_point_file(&dir.join(INDOOR_FULL_FILE), Frame::LocalLevel)?;
        let ground_path = dir.join(INDOOR_GROUND_FILE);
        let surround_path = dir.join(INDOOR_SURROUND_FILE);
        if ground_path.is_file() && surround_path.is_file() {
            Ok(Self {
                ground: read_point_file(&ground_path, Frame::LocalLevel)?,
                surround: read_point_file(&surround_path, Frame::LocalLevel)?,
                full,
            })
        } else {
            Ok(split_indoor(&full, config)?)
        }
    }
}
