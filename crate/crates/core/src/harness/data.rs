//! JSON-lines dataset cache, one scene per line:
//!
//! `{"id", "split", "grid", "dim", "boxes": [[cx,cy,w,h], ..], "categories": [..], "features"}`
//!
//! `features` is base64 of the row-major `[grid * grid, dim]` grid as
//! little-endian f64, so reloaded scenes are bit-identical.

use std::io::{BufRead, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scene::{generate_dataset, GroundTruth, Scene, Split};

use super::ExperimentConfig;

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    split: String,
    grid: usize,
    dim: usize,
    boxes: Vec<[f64; 4]>,
    categories: Vec<usize>,
    features: String,
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Vec<Scene> {
    generate_dataset(&cfg.gen, cfg.data_seed, cfg.train_scenes, cfg.val_scenes)
}

/// Splits a generated dataset into `(train, val)` by split tag.
pub fn split(scenes: &[Scene]) -> (Vec<Scene>, Vec<Scene>) {
    scenes.iter().cloned().partition(|s| s.split == Split::Train)
}

pub fn write_jsonl(scenes: &[Scene], w: impl Write) -> Result<()> {
    let mut w = std::io::BufWriter::new(w);
    for s in scenes {
        let bytes: Vec<u8> = s.features.iter().flat_map(|x| x.to_le_bytes()).collect();
        let rec = Record {
            id: s.id,
            split: s.split.as_str().into(),
            grid: s.grid,
            dim: s.dim,
            boxes: s.objects.iter().map(|o| o.bbox.to_array()).collect(),
            categories: s.objects.iter().map(|o| o.category).collect(),
            features: STANDARD.encode(bytes),
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<Scene>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |column: usize, msg: String| Error::Parse { row: i + 1, column, msg };
        let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.column(), e.to_string()))?;
        if rec.boxes.len() != rec.categories.len() {
            return Err(bad(0, format!("{} boxes but {} categories", rec.boxes.len(), rec.categories.len())));
        }
        let bytes = STANDARD.decode(&rec.features).map_err(|e| bad(0, format!("features: {e}")))?;
        if bytes.len() != rec.grid * rec.grid * rec.dim * 8 {
            return Err(bad(0, format!("features hold {} bytes, expected {}", bytes.len(), rec.grid * rec.grid * rec.dim * 8)));
        }
        out.push(Scene {
            id: rec.id,
            objects: rec
                .boxes
                .iter()
                .zip(&rec.categories)
                .map(|(b, &category)| GroundTruth {
                    bbox: BBox::new(b[0], b[1], b[2], b[3]),
                    category,
                })
                .collect(),
            grid: rec.grid,
            dim: rec.dim,
            features: bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            split: rec.split.parse().map_err(|e: String| bad(0, e))?,
        });
    }
    Ok(out)
}

pub fn save_dataset(scenes: &[Scene], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(scenes, std::fs::File::create(path)?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}
