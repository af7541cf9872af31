//! Tiling of large co-registered scenes, reproducible split manifests and
//! sample loading.
//!
//! On-disk layout of a tiled dataset:
//!
//! ```text
//! <root>/A/<tile_id>.png      first acquisition (RGB)
//! <root>/B/<tile_id>.png      second acquisition (RGB)
//! <root>/label/<tile_id>.png  change mask, 0 = unchanged, 255 = changed
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const TILE_SIZE: usize = 256;
pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];
/// Label pixels above this value are changed.
pub const LABEL_THRESHOLD: u8 = 127;

/// Window starts along one axis: `ceil(extent / tile)` windows, the last
/// one pushed flush against the far border.
pub fn tile_starts(extent: usize, tile: usize) -> Result<Vec<usize>> {
    if tile == 0 {
        return Err(Error::invalid("tile size must be positive"));
    }
    if extent < tile {
        return Err(Error::invalid(format!(
            "image extent {extent} is smaller than the tile size {tile}"
        )));
    }
    let n = extent.div_ceil(tile);
    Ok((0..n).map(|i| (i * tile).min(extent - tile)).collect())
}

/// Number of tiles a `width × height` scene yields.
pub fn tile_count(width: usize, height: usize, tile: usize) -> Result<usize> {
    Ok(tile_starts(width, tile)?.len() * tile_starts(height, tile)?.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileOrigin {
    pub row: usize,
    pub col: usize,
    pub x: usize,
    pub y: usize,
}

pub fn tile_grid(width: usize, height: usize, tile: usize) -> Result<Vec<TileOrigin>> {
    let xs = tile_starts(width, tile)?;
    let ys = tile_starts(height, tile)?;
    let mut grid = Vec::with_capacity(xs.len() * ys.len());
    for (row, &y) in ys.iter().enumerate() {
        for (col, &x) in xs.iter().enumerate() {
            grid.push(TileOrigin { row, col, x, y });
        }
    }
    Ok(grid)
}

/// One training sample: two co-registered crops and their change label.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePair {
    pub image_a: RgbImage,
    pub image_b: RgbImage,
    /// Raw 8-bit mask; see [`LABEL_THRESHOLD`].
    pub label: GrayImage,
    pub source_id: String,
    pub row: usize,
    pub col: usize,
}

impl TilePair {
    pub fn id(&self) -> String {
        tile_id(&self.source_id, self.row, self.col)
    }
}

pub fn tile_id(source_id: &str, row: usize, col: usize) -> String {
    format!("{source_id}_r{row}_c{col}")
}

/// Cuts a scene triple into `tile × tile` crops on the flush-edge grid.
pub fn tile_pair(
    image_a: &RgbImage,
    image_b: &RgbImage,
    label: &GrayImage,
    tile: usize,
    source_id: &str,
) -> Result<Vec<TilePair>> {
    let dims = image_a.dimensions();
    if image_b.dimensions() != dims || label.dimensions() != dims {
        return Err(Error::invalid(format!(
            "scene `{source_id}`: image A is {:?}, image B is {:?}, label is {:?}",
            dims,
            image_b.dimensions(),
            label.dimensions()
        )));
    }
    let (w, h) = (dims.0 as usize, dims.1 as usize);
    let t = tile as u32;
    tile_grid(w, h, tile)?
        .into_iter()
        .map(|o| {
            let (x, y) = (o.x as u32, o.y as u32);
            Ok(TilePair {
                image_a: image::imageops::crop_imm(image_a, x, y, t, t).to_image(),
                image_b: image::imageops::crop_imm(image_b, x, y, t, t).to_image(),
                label: image::imageops::crop_imm(label, x, y, t, t).to_image(),
                source_id: source_id.to_string(),
                row: o.row,
                col: o.col,
            })
        })
        .collect()
}

/// Tile identifiers assigned to each split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub splits: BTreeMap<String, Vec<String>>,
}

impl SplitManifest {
    pub fn split(&self, name: &str) -> &[String] {
        self.splits.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn counts(&self) -> [usize; 3] {
        SPLIT_NAMES.map(|n| self.split(n).len())
    }

    /// True when every id of `all` appears in exactly one split and no
    /// split holds anything else.
    pub fn is_partition_of(&self, all: &[String]) -> bool {
        let mut seen = HashSet::new();
        for ids in self.splits.values() {
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return false;
                }
            }
        }
        seen.len() == all.len() && all.iter().all(|id| seen.contains(id.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# tunet split manifest v1\n");
        let _ = writeln!(s, "# seed\t{}", self.seed);
        let _ = writeln!(
            s,
            "# ratios\t{}:{}:{}",
            self.ratios[0], self.ratios[1], self.ratios[2]
        );
        let c = self.counts();
        let _ = writeln!(s, "# counts\ttrain={}\tval={}\ttest={}", c[0], c[1], c[2]);
        for name in SPLIT_NAMES {
            for id in self.split(name) {
                let _ = writeln!(s, "{name}\t{id}");
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut ratios = [7.0, 1.0, 2.0];
        let mut splits: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix("# ") {
                let mut parts = header.splitn(2, '\t');
                match (parts.next(), parts.next()) {
                    (Some("seed"), Some(v)) => {
                        seed = Some(v.trim().parse().map_err(|_| {
                            Error::invalid(format!("manifest line {}: bad seed `{v}`", lineno + 1))
                        })?)
                    }
                    (Some("ratios"), Some(v)) => {
                        let r: Vec<f64> =
                            v.split(':').filter_map(|x| x.trim().parse().ok()).collect();
                        if r.len() != 3 {
                            return Err(Error::invalid(format!(
                                "manifest line {}: bad ratios `{v}`",
                                lineno + 1
                            )));
                        }
                        ratios = [r[0], r[1], r[2]];
                    }
                    _ => {}
                }
                continue;
            }
            let (split, id) = line.split_once('\t').ok_or_else(|| {
                Error::invalid(format!(
                    "manifest line {}: expected `split<TAB>tile_id`",
                    lineno + 1
                ))
            })?;
            if !SPLIT_NAMES.contains(&split) {
                return Err(Error::invalid(format!(
                    "manifest line {}: unknown split `{split}`",
                    lineno + 1
                )));
            }
            splits
                .entry(split.to_string())
                .or_default()
                .push(id.to_string());
        }
        Ok(Self {
            seed: seed.ok_or_else(|| Error::invalid("manifest has no seed header"))?,
            ratios,
            splits,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ingest(path, e))?;
        Self::parse(&text)
    }
}

/// Shuffles `tile_ids` with `seed` and partitions them into train / val /
/// test. Explicit counts, when given, replace the rounded ratios.
pub fn split_dataset(
    tile_ids: &[String],
    ratios: [f64; 3],
    seed: u64,
    explicit_counts: Option<[usize; 3]>,
) -> Result<SplitManifest> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::invalid(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    let n = tile_ids.len();
    let counts = match explicit_counts {
        Some(c) => {
            if c.iter().sum::<usize>() != n {
                return Err(Error::invalid(format!(
                    "split counts {c:?} sum to {} but there are {n} tiles",
                    c.iter().sum::<usize>()
                )));
            }
            c
        }
        None => ratio_counts(n, ratios),
    };
    let mut ids = tile_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != n {
        return Err(Error::invalid("tile identifiers are not unique"));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = BTreeMap::new();
    let mut rest = ids.as_slice();
    for (name, count) in SPLIT_NAMES.iter().zip(counts) {
        let (head, tail) = rest.split_at(count);
        splits.insert(name.to_string(), head.to_vec());
        rest = tail;
    }
    Ok(SplitManifest {
        seed,
        ratios,
        splits,
    })
}

/// Largest-remainder rounding of `n · ratio / Σratio`.
fn ratio_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let sum: f64 = ratios.iter().sum();
    let exact = ratios.map(|r| n as f64 * r / sum);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut missing = n - counts.iter().sum::<usize>();
    for i in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[*i] += 1;
        missing -= 1;
    }
    counts
}

/// Per-channel `(v / 255 - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub fn apply(&self, channel: usize, value: u8) -> f32 {
        (value as f32 / 255.0 - self.mean[channel]) / self.std[channel]
    }
}

impl Default for Normalization {
    fn default() -> Self {
        Self::IMAGENET
    }
}

/// Normalized image pair `(3, h, w)` each and binary label `(1, h, w)`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub x1: Tensor,
    pub x2: Tensor,
    pub y: Tensor,
}

pub fn image_to_tensor(img: &RgbImage, norm: &Normalization) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * w * h + i] = norm.apply(c, px[c]);
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &Device::Cpu)?)
}

pub fn label_to_tensor(label: &GrayImage) -> Result<Tensor> {
    let (w, h) = label.dimensions();
    let data: Vec<f32> = label
        .pixels()
        .map(|p| if p[0] > LABEL_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(
        data,
        (1, h as usize, w as usize),
        &Device::Cpu,
    )?)
}

pub fn load_sample(tile: &TilePair, norm: &Normalization) -> Result<Sample> {
    Ok(Sample {
        id: tile.id(),
        x1: image_to_tensor(&tile.image_a, norm)?,
        x2: image_to_tensor(&tile.image_b, norm)?,
        y: label_to_tensor(&tile.label)?,
    })
}

/// Stacks samples into `(x1, x2, y)` batches.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor, Tensor, Tensor)> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot stack an empty batch"));
    }
    let x1: Vec<&Tensor> = samples.iter().map(|s| &s.x1).collect();
    let x2: Vec<&Tensor> = samples.iter().map(|s| &s.x2).collect();
    let y: Vec<&Tensor> = samples.iter().map(|s| &s.y).collect();
    Ok((
        Tensor::stack(&x1, 0)?,
        Tensor::stack(&x2, 0)?,
        Tensor::stack(&y, 0)?,
    ))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::ingest(path, e))?
        .to_rgb8())
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|e| Error::ingest(path, e))?
        .to_luma8())
}

/// A tiled dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    root: PathBuf,
}

impl DatasetDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, part: &str, id: &str) -> PathBuf {
        self.root.join(part).join(format!("{id}.png"))
    }

    /// Tile ids present in `A/`, sorted.
    pub fn list_ids(&self) -> Result<Vec<String>> {
        list_pngs(&self.root.join("A"))
    }

    pub fn read_tile(&self, id: &str) -> Result<TilePair> {
        let (source_id, row, col) = parse_tile_id(id);
        Ok(TilePair {
            image_a: read_rgb(&self.path("A", id))?,
            image_b: read_rgb(&self.path("B", id))?,
            label: read_gray(&self.path("label", id))?,
            source_id,
            row,
            col,
        })
    }

    pub fn write_tile(&self, tile: &TilePair) -> Result<String> {
        let id = tile.id();
        for part in ["A", "B", "label"] {
            std::fs::create_dir_all(self.root.join(part))?;
        }
        let save_err = |p: PathBuf| move |e: image::ImageError| Error::ingest(p, e);
        let p = self.path("A", &id);
        tile.image_a.save(&p).map_err(save_err(p.clone()))?;
        let p = self.path("B", &id);
        tile.image_b.save(&p).map_err(save_err(p.clone()))?;
        let p = self.path("label", &id);
        tile.label.save(&p).map_err(save_err(p.clone()))?;
        Ok(id)
    }

    pub fn load_sample(&self, id: &str, norm: &Normalization) -> Result<Sample> {
        let mut s = load_sample(&self.read_tile(id)?, norm)?;
        s.id = id.to_string();
        Ok(s)
    }
}

/// Inverse of [`tile_id`]; ids that do not follow the pattern are treated
/// as a whole scene at row 0, column 0.
fn parse_tile_id(id: &str) -> (String, usize, usize) {
    let parsed = id.rsplit_once("_c").and_then(|(head, c)| {
        let (src, r) = head.rsplit_once("_r")?;
        Some((src.to_string(), r.parse().ok()?, c.parse().ok()?))
    });
    parsed.unwrap_or_else(|| (id.to_string(), 0, 0))
}

/// File stems of the `.png` files in `dir`, sorted.
pub fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::ingest(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::ingest(dir, e))?.path();
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}
