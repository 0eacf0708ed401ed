//! Corpus generation and the on-disk dataset layout.
//!
//! ```text
//! dir/manifest.json
//! dir/captions.jsonl
//! dir/images/{id}.ppm
//! dir/lq/{id}.ppm
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::degrade::{degrade, DegradationConfig};
use super::font::{glyphs_to_string, parse_glyphs};
use super::scene::{render_scene, Background, GlyphScene, Placement, SceneConfig};
use crate::codec::{Image, CHANNELS};
use crate::error::{contract, Error, Result};
use crate::numerics::Rng;

pub const FORMAT: &str = "glyph-scenes/1";

const SCENE_STREAM: u64 = 1;
const DEGRADE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub scene: GlyphScene,
    pub lq: Image,
    pub degradation_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub count: usize,
    pub global_seed: u64,
    pub scene_config: SceneConfig,
    pub degradation_config: DegradationConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub items: Vec<DatasetItem>,
}

#[derive(Serialize, Deserialize)]
struct CaptionRecord {
    id: String,
    caption: String,
    grid: Vec<Placement>,
    degradation_seed: u64,
    background: Background,
}

/// Seeds of item `index` in a corpus keyed by `global_seed`.
pub fn item_seeds(global_seed: u64, index: usize) -> (u64, u64) {
    let root = Rng::new(global_seed);
    (
        root.derive(&[SCENE_STREAM, index as u64]).key(),
        root.derive(&[DEGRADE_STREAM, index as u64]).key(),
    )
}

pub fn item_id(index: usize) -> String {
    format!("{index:05}")
}

/// Items `start..start + count` of the corpus keyed by `global_seed`.
pub fn generate_items(
    global_seed: u64,
    start: usize,
    count: usize,
    scene_cfg: &SceneConfig,
    deg_cfg: &DegradationConfig,
) -> Result<Vec<DatasetItem>> {
    (start..start + count)
        .map(|i| {
            let (scene_seed, degradation_seed) = item_seeds(global_seed, i);
            let scene = render_scene(scene_seed, scene_cfg)?;
            let lq = degrade(&scene.image, deg_cfg, degradation_seed)?;
            Ok(DatasetItem {
                id: item_id(i),
                scene,
                lq,
                degradation_seed,
            })
        })
        .collect()
}

pub fn generate_dataset(
    global_seed: u64,
    count: usize,
    scene_cfg: &SceneConfig,
    deg_cfg: &DegradationConfig,
) -> Result<Dataset> {
    Ok(Dataset {
        manifest: Manifest {
            format: FORMAT.into(),
            count,
            global_seed,
            scene_config: scene_cfg.clone(),
            degradation_config: deg_cfg.clone(),
        },
        items: generate_items(global_seed, 0, count, scene_cfg, deg_cfg)?,
    })
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<Manifest> {
    if ds.manifest.count != ds.items.len() {
        contract!(
            "manifest count {} but {} items",
            ds.manifest.count,
            ds.items.len()
        );
    }
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("lq"))?;
    let mut captions = Vec::new();
    for item in &ds.items {
        write_ppm(&dir.join("images").join(format!("{}.ppm", item.id)), &item.scene.image)?;
        write_ppm(&dir.join("lq").join(format!("{}.ppm", item.id)), &item.lq)?;
        let rec = CaptionRecord {
            id: item.id.clone(),
            caption: glyphs_to_string(&item.scene.caption),
            grid: item.scene.grid.clone(),
            degradation_seed: item.degradation_seed,
            background: item.scene.background.clone(),
        };
        serde_json::to_writer(&mut captions, &rec)?;
        captions.push(b'\n');
    }
    fs::write(dir.join("captions.jsonl"), captions)?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&ds.manifest)?,
    )?;
    Ok(ds.manifest.clone())
}

fn parse_err(file: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| parse_err(&manifest_path, json_offset(&text, &e), e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(parse_err(
            &manifest_path,
            0,
            format!("unsupported format {:?}", manifest.format),
        ));
    }

    let cap_path = dir.join("captions.jsonl");
    let text = fs::read_to_string(&cap_path)?;
    let mut items = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end();
        if !body.is_empty() {
            let rec: CaptionRecord = serde_json::from_str(body)
                .map_err(|e| parse_err(&cap_path, offset + json_offset(body, &e), e.to_string()))?;
            let caption = parse_glyphs(&rec.caption)
                .map_err(|e| parse_err(&cap_path, offset, e.to_string()))?;
            if caption.len() != rec.grid.len()
                || caption.iter().zip(&rec.grid).any(|(&g, p)| g != p.glyph)
            {
                return Err(parse_err(&cap_path, offset, "caption disagrees with grid"));
            }
            let image = read_ppm(&dir.join("images").join(format!("{}.ppm", rec.id)))?;
            let lq = read_ppm(&dir.join("lq").join(format!("{}.ppm", rec.id)))?;
            items.push(DatasetItem {
                id: rec.id,
                scene: GlyphScene {
                    image,
                    caption,
                    grid: rec.grid,
                    background: rec.background,
                },
                lq,
                degradation_seed: rec.degradation_seed,
            });
        }
        offset += line.len();
    }
    if items.len() != manifest.count {
        return Err(parse_err(
            &cap_path,
            offset,
            format!("manifest lists {} items, found {}", manifest.count, items.len()),
        ));
    }
    Ok(Dataset { manifest, items })
}

fn json_offset(text: &str, e: &serde_json::Error) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(e.line().saturating_sub(1))
        .map(str::len)
        .sum();
    line_start + e.column().saturating_sub(1)
}

/// Binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    buf.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    parse_ppm(&bytes, path)
}

pub fn parse_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 0;
    let mut token = |what: &str| -> Result<(String, usize)> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, start, format!("missing {what}")));
        }
        Ok((String::from_utf8_lossy(&bytes[start..pos]).into_owned(), start))
    };
    let (magic, at) = token("magic")?;
    if magic != "P6" {
        return Err(parse_err(path, at, format!("expected P6, found {magic:?}")));
    }
    let mut number = |what: &str| -> Result<usize> {
        let (t, at) = token(what)?;
        t.parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| parse_err(path, at, format!("bad {what} {t:?}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(parse_err(path, pos, format!("maxval {maxval} unsupported")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = width * height * CHANNELS;
    let have = bytes.len().saturating_sub(start);
    if have < need {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated raster: {have} of {need} bytes"),
        ));
    }
    if have > need {
        return Err(parse_err(path, start + need, "trailing bytes after raster"));
    }
    let data = bytes[start..].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(height, width, data)
}

pub fn ppm_path(dir: &Path, sub: &str, id: &str) -> PathBuf {
    dir.join(sub).join(format!("{id}.ppm"))
}
