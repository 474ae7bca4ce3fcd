//! Reading a generated corpus directory: `index.csv` (one row per block),
//! `split.csv` (train/test roles), and the per-block tile + ground raster
//! under `blocks/`.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use towerseg_core::cloud::{GroundModel, PointCloud, TileFormat, read_ground, read_tile};

use crate::errors::{CliError, CliResult, require_input};

#[derive(Debug, Clone)]
pub struct BlockMeta {
    pub id: String,
    pub n_points: u64,
    pub n_towers: u64,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    root: PathBuf,
    pub blocks: Vec<BlockMeta>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Which corpus blocks a command operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSel {
    Train,
    Test,
    All,
}

impl FromStr for SplitSel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitSel::Train),
            "test" => Ok(SplitSel::Test),
            "all" => Ok(SplitSel::All),
            other => Err(format!("expected train, test or all, got {other:?}")),
        }
    }
}

fn parse_csv_rows<'a>(
    text: &'a str,
    path: &Path,
    header: &str,
) -> CliResult<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == header => {}
        other => {
            return Err(CliError::runtime(format!(
                "{}: expected header {header:?}, got {other:?}",
                path.display()
            )));
        }
    }
    let width = header.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(CliError::runtime(format!(
                "{}:{}: expected {width} fields, got {}",
                path.display(),
                i + 2,
                fields.len()
            )));
        }
        rows.push(fields);
    }
    Ok(rows)
}

impl Corpus {
    /// Open a corpus directory; an absent directory or index is a usage
    /// error, malformed contents a runtime error.
    pub fn open(root: &Path) -> CliResult<Corpus> {
        require_input(root, "corpus directory")?;
        let index_path = root.join("index.csv");
        let split_path = root.join("split.csv");
        require_input(&index_path, "corpus index")?;
        require_input(&split_path, "corpus split")?;

        let read = |p: &Path| {
            std::fs::read_to_string(p)
                .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", p.display())))
        };
        let bad_num = |p: &Path, what: &str, raw: &str| {
            CliError::runtime(format!("{}: bad {what} {raw:?}", p.display()))
        };

        let mut blocks = Vec::new();
        for row in parse_csv_rows(&read(&index_path)?, &index_path, "block_id,n_points,n_towers")? {
            blocks.push(BlockMeta {
                id: row[0].to_string(),
                n_points: row[1]
                    .parse()
                    .map_err(|_| bad_num(&index_path, "point count", row[1]))?,
                n_towers: row[2]
                    .parse()
                    .map_err(|_| bad_num(&index_path, "tower count", row[2]))?,
            });
        }

        let mut train = Vec::new();
        let mut test = Vec::new();
        for row in parse_csv_rows(&read(&split_path)?, &split_path, "block_id,role")? {
            match row[1] {
                "train" => train.push(row[0].to_string()),
                "test" => test.push(row[0].to_string()),
                other => {
                    return Err(CliError::runtime(format!(
                        "{}: unknown role {other:?}",
                        split_path.display()
                    )));
                }
            }
        }
        train.sort();
        test.sort();
        let known: std::collections::BTreeSet<&str> =
            blocks.iter().map(|b| b.id.as_str()).collect();
        if let Some(orphan) = train
            .iter()
            .chain(&test)
            .find(|id| !known.contains(id.as_str()))
        {
            return Err(CliError::runtime(format!(
                "{}: block {orphan:?} is not in the index",
                split_path.display()
            )));
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            blocks,
            train,
            test,
        })
    }

    /// Corpus totals from the index: (points, towers).
    pub fn totals(&self) -> (u64, u64) {
        self.blocks
            .iter()
            .fold((0, 0), |(p, t), b| (p + b.n_points, t + b.n_towers))
    }

    pub fn block_ids(&self, split: SplitSel) -> Vec<String> {
        match split {
            SplitSel::Train => self.train.clone(),
            SplitSel::Test => self.test.clone(),
            SplitSel::All => {
                let mut all: Vec<String> =
                    self.train.iter().chain(&self.test).cloned().collect();
                all.sort();
                all
            }
        }
    }

    pub fn tile_path(&self, id: &str) -> PathBuf {
        self.root.join("blocks").join(format!("{id}.pct1"))
    }

    pub fn ground_path(&self, id: &str) -> PathBuf {
        self.root.join("blocks").join(format!("{id}.ground.csv"))
    }

    /// Read one block's tile and ground raster.
    pub fn read_block(&self, id: &str) -> CliResult<(PointCloud, GroundModel)> {
        let cloud = read_tile(&self.tile_path(id), TileFormat::Binary)?;
        let ground = read_ground(&self.ground_path(id))?;
        Ok((cloud, ground))
    }
}
