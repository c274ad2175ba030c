//! Corpus construction and the on-disk dataset format.
//!
//! A dataset named `NAME` in a directory is two files:
//!
//! * `NAME.manifest`: a header line followed by one tab-separated record per
//!   region (`seed`, `object`, `box`, `point`, `label`, `caption`, `image`,
//!   `mask`), where `image` and `mask` are byte offsets into the blob.
//! * `NAME.bin`: little-endian `f64` images (`H·W·3`) and masks (`H·W`).
//!
//! Regions of the same scene share one stored image.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{generate_scene, regions_of, PixelBox, RegionSample, SceneConfig};
use crate::error::{Error, Result};
use crate::lm::vocab::Vocabulary;
use crate::numerics::Tensor;

const HEADER: &str = "# sca-dataset v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusKind {
    /// Class-label targets; the large weak-supervision corpus.
    Detection,
    /// Grammar-caption targets; the small finetuning corpus.
    Caption,
}

impl CorpusKind {
    pub fn name(self) -> &'static str {
        match self {
            CorpusKind::Detection => "detection",
            CorpusKind::Caption => "caption",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub kind: CorpusKind,
    pub images: usize,
    pub samples: Vec<RegionSample>,
}

/// Generates `images` scenes with seeds `first_seed..first_seed + images`.
pub fn build_corpus(
    kind: CorpusKind,
    first_seed: u64,
    images: usize,
    config: &SceneConfig,
    vocab: &Vocabulary,
) -> Result<Corpus> {
    let mut samples = Vec::new();
    for i in 0..images as u64 {
        let scene = generate_scene(first_seed + i, config)?;
        samples.extend(regions_of(&scene, vocab));
    }
    Ok(Corpus { kind, images, samples })
}

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.manifest")), dir.join(format!("{name}.bin")))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn push_f64s(blob: &mut Vec<u8>, data: &[f64]) -> usize {
    let at = blob.len();
    for v in data {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    at
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

pub fn export_dataset(samples: &[RegionSample], dir: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let canvas = samples.first().map_or(0, |s| s.image.shape()[0]);
    let mut blob = Vec::new();
    let mut image_at: HashMap<*const Tensor, usize> = HashMap::new();
    let mut lines = String::new();
    for s in samples {
        if s.image.shape()[0] != canvas {
            return Err(Error::contract("all samples in a dataset must share a canvas size"));
        }
        let img = *image_at
            .entry(Arc::as_ptr(&s.image))
            .or_insert_with(|| push_f64s(&mut blob, s.image.data()));
        let mask = push_f64s(&mut blob, s.mask.data());
        let b = s.bbox;
        let _ = writeln!(
            lines,
            "seed={}\tobject={}\tbox={},{},{},{}\tpoint={},{}\tlabel={}\tcaption={}\timage={}\tmask={}",
            s.scene_seed,
            s.object_index,
            b.x0,
            b.y0,
            b.x1,
            b.y1,
            s.point.0,
            s.point.1,
            join_ids(&s.label),
            join_ids(&s.caption),
            img,
            mask
        );
    }
    let manifest = format!(
        "{HEADER}\ncount={} images={} canvas={}\n{lines}",
        samples.len(),
        image_at.len(),
        canvas
    );
    let (mpath, bpath) = paths(dir, name);
    write_atomic(&bpath, &blob)?;
    write_atomic(&mpath, manifest.as_bytes())?;
    Ok(())
}

struct Header {
    count: usize,
    canvas: usize,
}

fn parse_header(line: Option<&str>) -> Result<Header> {
    let line = line.ok_or_else(|| Error::parse("manifest header", "missing count line"))?;
    let mut count = None;
    let mut canvas = None;
    for kv in line.split_whitespace() {
        match kv.split_once('=') {
            Some(("count", v)) => count = v.parse().ok(),
            Some(("canvas", v)) => canvas = v.parse().ok(),
            _ => {}
        }
    }
    match (count, canvas) {
        (Some(count), Some(canvas)) => Ok(Header { count, canvas }),
        _ => Err(Error::parse("manifest header", format!("malformed `{line}`"))),
    }
}

fn read_f64s(blob: &[u8], at: usize, n: usize) -> Option<Vec<f64>> {
    let end = at.checked_add(n * 8)?;
    let bytes = blob.get(at..end)?;
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

fn parse_ids(s: &str) -> Option<Vec<u32>> {
    s.split_whitespace().map(|t| t.parse().ok()).collect()
}

fn parse_pair<T: std::str::FromStr>(s: &str, n: usize) -> Option<Vec<T>> {
    let v: Option<Vec<T>> = s.split(',').map(|t| t.parse().ok()).collect();
    v.filter(|v| v.len() == n)
}

pub fn import_dataset(dir: &Path, name: &str) -> Result<Vec<RegionSample>> {
    let (mpath, bpath) = paths(dir, name);
    let text = fs::read_to_string(&mpath)?;
    let blob = fs::read(&bpath)?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::parse("manifest header", "unrecognized format"));
    }
    let header = parse_header(lines.next())?;
    let n = header.canvas;
    let mut images: HashMap<usize, Arc<Tensor>> = HashMap::new();
    let mut out = Vec::with_capacity(header.count);
    for (index, line) in lines.enumerate() {
        let bad = |msg: &str| Error::parse(format!("record {index}"), msg.to_string());
        let fields: HashMap<&str, &str> = line.split('\t').filter_map(|kv| kv.split_once('=')).collect();
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(&format!("missing field `{k}`")));
        let seed: u64 = get("seed")?.parse().map_err(|_| bad("bad seed"))?;
        let object: usize = get("object")?.parse().map_err(|_| bad("bad object index"))?;
        let b: Vec<f64> = parse_pair(get("box")?, 4).ok_or_else(|| bad("bad box"))?;
        let p: Vec<usize> = parse_pair(get("point")?, 2).ok_or_else(|| bad("bad point"))?;
        let label = parse_ids(get("label")?).ok_or_else(|| bad("bad label ids"))?;
        let caption = parse_ids(get("caption")?).ok_or_else(|| bad("bad caption ids"))?;
        let img_at: usize = get("image")?.parse().map_err(|_| bad("bad image offset"))?;
        let mask_at: usize = get("mask")?.parse().map_err(|_| bad("bad mask offset"))?;
        let image = match images.get(&img_at) {
            Some(img) => Arc::clone(img),
            None => {
                let data = read_f64s(&blob, img_at, n * n * 3).ok_or_else(|| bad("image runs past end of blob"))?;
                let img = Arc::new(Tensor::from_parts(vec![n, n, 3], data));
                images.insert(img_at, Arc::clone(&img));
                img
            }
        };
        let mask = read_f64s(&blob, mask_at, n * n).ok_or_else(|| bad("mask runs past end of blob"))?;
        out.push(RegionSample {
            scene_seed: seed,
            object_index: object,
            image,
            bbox: PixelBox { x0: b[0], y0: b[1], x1: b[2], y1: b[3] },
            point: (p[0], p[1]),
            mask: Tensor::from_parts(vec![n, n], mask),
            label,
            caption,
        });
    }
    if out.len() != header.count {
        return Err(Error::parse(
            format!("record {}", out.len()),
            format!("manifest declares {} records but holds {}", header.count, out.len()),
        ));
    }
    Ok(out)
}

/// Number of records a manifest declares, without loading the blob.
pub fn manifest_count(dir: &Path, name: &str) -> Result<usize> {
    let text = fs::read_to_string(paths(dir, name).0)?;
    let mut lines = text.lines();
    lines.next();
    Ok(parse_header(lines.next())?.count)
}
