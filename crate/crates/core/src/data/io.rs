//! On-disk dataset layout:
//!
//! ```text
//! <root>/images/NNNNNN.ppm   binary P6, 8-bit RGB
//! <root>/annotations.txt     file \t expression \t x1 y1 x2 y2
//! <root>/splits.txt          name start end   (half-open record ranges)
//! <root>/generator.cfg       base_seed plus the generator settings
//! ```
//!
//! Record `i` was generated from seed `base_seed + i`, so the record ranges
//! in `splits.txt` are also disjoint seed ranges.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use super::generate::{generate_sample, GeneratorConfig, Sample};
use crate::error::{Error, Result};
use crate::kv;
use crate::targets::GroundTruthBox;
use crate::tensor::Tensor;

pub const ANNOTATIONS_FILE: &str = "annotations.txt";
pub const SPLITS_FILE: &str = "splits.txt";
pub const GENERATOR_FILE: &str = "generator.cfg";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// 80/10/10 split of `count`, with rounding absorbed by train.
    pub fn from_total(count: usize) -> Self {
        let val = count / 10;
        let test = count / 10;
        SplitCounts {
            train: count - val - test,
            val,
            test,
        }
    }

    fn splits(&self) -> Vec<Split> {
        let mut at = 0;
        [("train", self.train), ("val", self.val), ("test", self.test)]
            .into_iter()
            .map(|(name, n)| {
                let s = Split {
                    name: name.to_string(),
                    start: at,
                    end: at + n,
                };
                at += n;
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub file: String,
    pub sample: Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub base_seed: u64,
    pub generator: GeneratorConfig,
    pub records: Vec<Record>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Record]> {
        let s = self
            .splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Invalid(format!("dataset has no split named `{name}`")))?;
        Ok(&self.records[s.start..s.end])
    }

    /// Reads a dataset directory. Images are decoded eagerly.
    pub fn load(root: &Path) -> Result<Dataset> {
        let gen_path = root.join(GENERATOR_FILE);
        let text = fs::read_to_string(&gen_path).map_err(|e| Error::io(&gen_path, e))?;
        let mut entries = kv::parse(&text, &gen_path)?;
        let seed_at = entries
            .iter()
            .position(|e| e.key == "base_seed")
            .ok_or_else(|| Error::Parse {
                path: gen_path.clone(),
                line: 1,
                msg: "missing `base_seed`".into(),
            })?;
        let base_seed = kv::parse_value(&entries.remove(seed_at), &gen_path)?;
        let generator = GeneratorConfig::from_entries(entries, &gen_path)?;

        let ann_path = root.join(ANNOTATIONS_FILE);
        let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let annotations = parse_annotations(&text, &ann_path)?;

        let split_path = root.join(SPLITS_FILE);
        let text = fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
        let splits = parse_splits(&text, &split_path, annotations.len())?;

        let mut records = Vec::with_capacity(annotations.len());
        for (file, expression, target) in annotations {
            let image = read_ppm(&root.join(IMAGES_DIR).join(&file))?;
            records.push(Record {
                file,
                sample: Sample {
                    image,
                    expression,
                    target,
                },
            });
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            base_seed,
            generator,
            records,
            splits,
        })
    }
}

pub fn image_name(index: usize) -> String {
    format!("{index:06}.ppm")
}

/// Generates `counts.total()` samples from consecutive seeds starting at
/// `base_seed` and writes them under `root`.
pub fn generate_dataset(
    root: &Path,
    base_seed: u64,
    counts: SplitCounts,
    cfg: &GeneratorConfig,
) -> Result<Dataset> {
    let samples = (0..counts.total())
        .map(|i| generate_sample(base_seed + i as u64, cfg).map(|g| g.sample))
        .collect::<Result<Vec<_>>>()?;
    write_dataset(root, base_seed, cfg, &samples, counts)
}

pub fn write_dataset(
    root: &Path,
    base_seed: u64,
    cfg: &GeneratorConfig,
    samples: &[Sample],
    counts: SplitCounts,
) -> Result<Dataset> {
    if counts.total() != samples.len() {
        return Err(Error::Invalid(format!(
            "split counts cover {} records but {} samples were given",
            counts.total(),
            samples.len()
        )));
    }
    let img_dir = root.join(IMAGES_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut ann = String::new();
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.expression.contains(['\t', '\n']) {
            return Err(Error::Invalid(format!("expression {i} contains a tab or newline")));
        }
        let file = image_name(i);
        write_ppm(&img_dir.join(&file), &s.image)?;
        let [x1, y1, x2, y2] = s.target.corners();
        ann.push_str(&format!("{file}\t{}\t{x1} {y1} {x2} {y2}\n", s.expression));
        records.push(Record {
            file,
            sample: Sample {
                image: quantize(&s.image),
                expression: s.expression.clone(),
                target: s.target,
            },
        });
    }
    write_file(&root.join(ANNOTATIONS_FILE), ann.as_bytes())?;

    let splits = counts.splits();
    let split_text: String = splits
        .iter()
        .map(|s| format!("{} {} {}\n", s.name, s.start, s.end))
        .collect();
    write_file(&root.join(SPLITS_FILE), split_text.as_bytes())?;
    let gen_text = format!("base_seed = {base_seed}\n{}", cfg.to_text());
    write_file(&root.join(GENERATOR_FILE), gen_text.as_bytes())?;

    Ok(Dataset {
        root: root.to_path_buf(),
        base_seed,
        generator: cfg.clone(),
        records,
        splits,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The values a `3 x H x W` image takes after one trip through 8 bits.
pub fn quantize(img: &Tensor) -> Tensor {
    let v = img.values().iter().map(|&x| to_u8(x) as f64 / 255.0).collect();
    Tensor::new(img.shape(), v).expect("same shape")
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("write_ppm", format!("expected 3xHxW, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let v = img.values();
    let mut buf = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            buf.push(to_u8(v[c * plane + i]));
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&buf, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads any 8-bit PNM image as a `3 x H x W` tensor in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut v = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            v[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], v).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<(String, String, GroundTruthBox)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [file, expr, coords] = fields[..] else {
            return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        let nums = coords
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad coordinate {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let [x1, y1, x2, y2] = nums[..] else {
            return Err(err(format!("expected 4 coordinates, got {}", nums.len())));
        };
        if !(x2 > x1 && y2 > y1) || nums.iter().any(|v| !v.is_finite()) {
            return Err(err("box must satisfy x1 < x2 and y1 < y2".into()));
        }
        if file.is_empty() || file.contains(['/', '\\']) {
            return Err(err(format!("bad image file name {file:?}")));
        }
        out.push((
            file.to_string(),
            expr.to_string(),
            GroundTruthBox::from_corners(x1, y1, x2, y2),
        ));
    }
    Ok(out)
}

pub fn parse_splits(text: &str, path: &Path, records: usize) -> Result<Vec<Split>> {
    let mut out: Vec<Split> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, a, b] = parts[..] else {
            return Err(err("expected `name start end`".into()));
        };
        let start: usize = a.parse().map_err(|_| err(format!("bad start {a:?}")))?;
        let end: usize = b.parse().map_err(|_| err(format!("bad end {b:?}")))?;
        if start > end || end > records {
            return Err(err(format!("range {start}..{end} outside 0..{records}")));
        }
        if out.iter().any(|s| s.name == name) {
            return Err(err(format!("duplicate split `{name}`")));
        }
        if out.iter().any(|s| start < s.end && s.start < end) {
            return Err(err(format!("split `{name}` overlaps another split")));
        }
        out.push(Split {
            name: name.to_string(),
            start,
            end,
        });
    }
    Ok(out)
}
