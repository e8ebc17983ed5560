//! Dataset folders: 8-bit grayscale PNG images, `{0, 255}` PNG masks and
//! `row,col` CSV centerlines, paired by file stem.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, ImageSample, Pixel};
use crate::error::{Error, Result};

/// On-disk arrangement of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `images/`, `masks/` and optional `centerlines/` subdirectories.
    FundusFolder,
    /// One directory: `<stem>.png`, `<stem>_mask.png`, `<stem>.csv`.
    FlatFolder,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fundus_folder" => Ok(Self::FundusFolder),
            "flat_folder" => Ok(Self::FlatFolder),
            other => Err(Error::Config(format!("unknown dataset layout `{other}`"))),
        }
    }
}

const MASK_SUFFIX: &str = "_mask";

struct Entry {
    stem: String,
    image: PathBuf,
    mask: Option<PathBuf>,
    centerline: Option<PathBuf>,
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

fn existing(path: PathBuf) -> Option<PathBuf> {
    path.is_file().then_some(path)
}

fn scan(root: &Path, layout: Layout) -> Result<Vec<Entry>> {
    if !root.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset root {} does not exist", root.display()),
        )));
    }
    let entries = match layout {
        Layout::FundusFolder => png_stems(&root.join("images"))?
            .into_iter()
            .map(|(stem, image)| Entry {
                mask: existing(root.join("masks").join(format!("{stem}.png"))),
                centerline: existing(root.join("centerlines").join(format!("{stem}.csv"))),
                stem,
                image,
            })
            .collect(),
        Layout::FlatFolder => png_stems(root)?
            .into_iter()
            .filter(|(stem, _)| !stem.ends_with(MASK_SUFFIX))
            .map(|(stem, image)| Entry {
                mask: existing(root.join(format!("{stem}{MASK_SUFFIX}.png"))),
                centerline: existing(root.join(format!("{stem}.csv"))),
                stem,
                image,
            })
            .collect(),
    };
    Ok(entries)
}

/// Loads a dataset folder and splits it deterministically.
///
/// Samples are sorted by id and rotated left by
/// `fold * (n_labeled + n_unlabeled)`; the first `n_labeled` become labeled,
/// the next `n_unlabeled` unlabeled, and the remainder test.
pub fn load_dataset(
    root: &Path,
    layout: Layout,
    fold: usize,
    n_labeled: usize,
    n_unlabeled: usize,
) -> Result<DatasetSplit> {
    let mut entries = scan(root, layout)?;
    let n = entries.len();
    if n_labeled + n_unlabeled > n {
        return Err(Error::Split(format!(
            "{n_labeled} labeled + {n_unlabeled} unlabeled exceeds {n} images in {}",
            root.display()
        )));
    }
    if n > 0 {
        entries.rotate_left((fold * (n_labeled + n_unlabeled)) % n);
    }
    let mut samples = Vec::with_capacity(n);
    for (i, e) in entries.into_iter().enumerate() {
        if i < n_labeled && e.mask.is_none() && e.centerline.is_none() {
            return Err(Error::MissingAnnotation(e.stem));
        }
        let mut s = ImageSample::new(e.stem, read_gray_png(&e.image)?);
        if let Some(p) = &e.mask {
            s.mask = Some(read_mask_png(p)?);
        }
        if let Some(p) = &e.centerline {
            s.centerline = Some(read_centerline_csv(p)?);
        }
        samples.push(s);
    }
    DatasetSplit::partition(samples, n_labeled, n_unlabeled, fold)
}

/// Reads any PNG as luminance in `[0, 1]`.
pub fn read_gray_png(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        f32::from(img.get_pixel(c as u32, r as u32).0[0]) / 255.0
    }))
}

/// Reads a mask PNG; values of 128 and above are foreground.
pub fn read_mask_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        u8::from(img.get_pixel(c as u32, r as u32).0[0] >= 128)
    }))
}

pub fn write_gray_png(path: &Path, values: &Array2<f32>) -> Result<()> {
    let (h, w) = values.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = values[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

pub fn write_mask_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] > 0 { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_centerline_csv(path: &Path) -> Result<Vec<Pixel>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut points = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.eq_ignore_ascii_case("row,col")) {
            continue;
        }
        let bad = || Error::InvalidData(format!("{}:{}: expected `row,col`", path.display(), lineno + 1));
        let (r, c) = line.split_once(',').ok_or_else(bad)?;
        let r = r.trim().parse().map_err(|_| bad())?;
        let c = c.trim().parse().map_err(|_| bad())?;
        points.push((r, c));
    }
    Ok(points)
}

pub fn write_centerline_csv(path: &Path, points: &[Pixel]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "row,col")?;
    for (r, c) in points {
        writeln!(w, "{r},{c}")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes samples in the `fundus_folder` layout.
pub fn write_dataset(root: &Path, samples: &[ImageSample]) -> Result<()> {
    for sub in ["images", "masks", "centerlines"] {
        fs::create_dir_all(root.join(sub))?;
    }
    for s in samples {
        write_gray_png(&root.join("images").join(format!("{}.png", s.id)), &s.pixels)?;
        if let Some(m) = &s.mask {
            write_mask_png(&root.join("masks").join(format!("{}.png", s.id)), m)?;
        }
        if let Some(c) = &s.centerline {
            write_centerline_csv(&root.join("centerlines").join(format!("{}.csv", s.id)), c)?;
        }
    }
    Ok(())
}
