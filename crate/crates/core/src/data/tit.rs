//! Text-image translation records: images holding several text lines,
//! each with its bounding box, ground-truth text, OCR output and
//! translation. One JSON object per image, one line per object.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::corpus::Language;
use crate::data::noise::{corrupt_ocr, NoiseSpec};
use crate::data::render::{render_text_image, RenderSpec};
use crate::data::GrayImage;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TitLine {
    /// `[x, y, w, h]` in pixels.
    pub bbox: [usize; 4],
    pub text: String,
    pub ocr_text: Option<String>,
    pub translation: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TitImage {
    pub id: String,
    pub image: GrayImage,
    pub lines: Vec<TitLine>,
}

/// One line of one image, cropped and resized to the model's input size.
#[derive(Clone, Debug, PartialEq)]
pub struct TitExample {
    pub id: String,
    pub image_id: String,
    pub image: GrayImage,
    /// Ground-truth source text `x`.
    pub text: String,
    /// OCR output `x̂`, when available.
    pub recognized: Option<String>,
    pub translation: String,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ImageField {
    Path { pgm_path: String },
    Inline { b64: String, w: usize, h: usize },
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    image: ImageField,
    lines: Vec<TitLine>,
}

/// Split every image into per-line examples sized `width × height`.
pub fn examples(images: &[TitImage], width: usize, height: usize) -> Result<Vec<TitExample>> {
    let mut out = Vec::new();
    for img in images {
        for (i, line) in img.lines.iter().enumerate() {
            let [x, y, w, h] = line.bbox;
            let crop = img.image.crop(x, y, w, h)?;
            out.push(TitExample {
                id: format!("{}#{i}", img.id),
                image_id: img.id.clone(),
                image: crop.resize_nearest(width, height),
                text: line.text.clone(),
                recognized: line.ocr_text.clone(),
                translation: line.translation.clone(),
            });
        }
    }
    Ok(out)
}

/// Write one JSON record per image. With `pgm_dir`, pixels go to
/// `<pgm_dir>/<id>.pgm` referenced relative to the JSONL file; otherwise
/// they are inlined as base64.
pub fn write_tit_jsonl(path: &Path, images: &[TitImage], pgm_dir: Option<&Path>) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    if let Some(dir) = pgm_dir {
        std::fs::create_dir_all(base.join(dir)).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for img in images {
        let image = match pgm_dir {
            Some(dir) => {
                let rel = dir.join(format!("{}.pgm", img.id));
                img.image.write_pgm(&base.join(&rel))?;
                ImageField::Path {
                    pgm_path: rel.to_string_lossy().into_owned(),
                }
            }
            None => ImageField::Inline {
                b64: img.image.to_b64(),
                w: img.image.width(),
                h: img.image.height(),
            },
        };
        let rec = Record {
            id: img.id.clone(),
            image,
            lines: img.lines.clone(),
        };
        serde_json::to_writer(&mut f, &rec)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn require<'v>(obj: &'v Value, record: &str, field: &str) -> Result<&'v Value> {
    obj.get(field).ok_or_else(|| Error::MissingField {
        record: record.to_string(),
        field: field.to_string(),
    })
}

fn parse_record(value: &Value, line_no: usize, base: &Path) -> Result<TitImage> {
    let fallback = format!("line {line_no}");
    let id = require(value, &fallback, "id")?
        .as_str()
        .ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "`id` must be a string".into(),
        })?
        .to_string();
    let image_v = require(value, &id, "image")?;
    let lines_v = require(value, &id, "lines")?.as_array().ok_or_else(|| Error::Parse {
        line: line_no,
        msg: format!("record {id}: `lines` must be an array"),
    })?;
    let mut lines = Vec::with_capacity(lines_v.len());
    for (i, l) in lines_v.iter().enumerate() {
        let name = format!("{id}#{i}");
        for field in ["bbox", "text", "translation"] {
            require(l, &name, field)?;
        }
        let line: TitLine = serde_json::from_value(l.clone()).map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("record {name}: {e}"),
        })?;
        lines.push(line);
    }
    let image = if let Some(p) = image_v.get("pgm_path") {
        let p = p.as_str().ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("record {id}: `pgm_path` must be a string"),
        })?;
        let full: PathBuf = base.join(p);
        GrayImage::read_pgm(&full)?
    } else if image_v.get("b64").is_some() {
        for field in ["w", "h"] {
            require(image_v, &id, field)?;
        }
        match serde_json::from_value::<ImageField>(image_v.clone()) {
            Ok(ImageField::Inline { b64, w, h }) => GrayImage::from_b64(&b64, w, h)?,
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("record {id}: malformed inline image"),
                })
            }
        }
    } else {
        return Err(Error::MissingField {
            record: id,
            field: "image.pgm_path|image.b64".into(),
        });
    };
    for (i, l) in lines.iter().enumerate() {
        let [x, y, w, h] = l.bbox;
        if w == 0 || h == 0 || x + w > image.width() || y + h > image.height() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("record {id}#{i}: bbox outside the image"),
            });
        }
    }
    Ok(TitImage { id, image, lines })
}

/// Load records in file order. PGM paths resolve against the file's
/// directory.
pub fn load_tit_jsonl(path: &Path) -> Result<Vec<TitImage>> {
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(parse_record(&value, i + 1, &base)?);
    }
    Ok(out)
}

/// Generation settings for synthetic text images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TitGenSpec {
    pub render: RenderSpec,
    pub noise: NoiseSpec,
    pub min_lines: usize,
    pub max_lines: usize,
    /// Fill `translation`; OCR-pair data leaves it empty.
    pub translate: bool,
    /// Fill `ocr_text` through the noise channel.
    pub recognize: bool,
}

/// `count` images of stacked rendered lines. Image `i` is a pure function
/// of `(lang, spec, seed, i)`.
pub fn gen_tit_images(lang: &Language, spec: &TitGenSpec, count: usize, seed: u64) -> Result<Vec<TitImage>> {
    if spec.min_lines == 0 || spec.min_lines > spec.max_lines {
        return Err(Error::invalid("gen_tit", "line counts must satisfy 1 ≤ min ≤ max"));
    }
    if lang.max_chars() > spec.render.capacity() {
        return Err(Error::invalid(
            "gen_tit",
            format!(
                "sentences of up to {} characters do not fit {} columns",
                lang.max_chars(),
                spec.render.capacity()
            ),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let n = rng.random_range(spec.min_lines..=spec.max_lines);
        let mut strips = Vec::with_capacity(n);
        let mut lines = Vec::with_capacity(n);
        for l in 0..n {
            let text = lang.sentence(&mut rng);
            let render_seed = rng.random::<u64>();
            strips.push(render_text_image(&text, &spec.render, render_seed)?);
            let h = spec.render.height;
            let ocr_text = if spec.recognize {
                Some(corrupt_ocr(&text, &spec.noise, (i as u64) << 8 | l as u64)?)
            } else {
                None
            };
            let translation = if spec.translate {
                lang.translate(&text).expect("lexicon sentence")
            } else {
                String::new()
            };
            lines.push(TitLine {
                bbox: [0, l * h, spec.render.width, h],
                text,
                ocr_text,
                translation,
            });
        }
        out.push(TitImage {
            id: format!("img{i:06}"),
            image: GrayImage::vstack(&strips)?,
            lines,
        });
    }
    Ok(out)
}

/// `(dev, test)` sizes: 1,000 each when at least 3,000 items exist, else a
/// tenth each.
pub fn split_sizes(n: usize) -> (usize, usize) {
    if n >= 3000 {
        (1000, 1000)
    } else {
        let k = n / 10;
        (k, k)
    }
}

/// `(train, dev, test)` with dev and test taken from the end.
pub fn split<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (d, t) = split_sizes(items.len());
    let train_end = items.len() - d - t;
    (
        items[..train_end].to_vec(),
        items[train_end..train_end + d].to_vec(),
        items[train_end + d..].to_vec(),
    )
}
