//! Dataset directory format: per sample `NNNNNN_a.png`, `NNNNNN_b.png` (8-bit RGB),
//! `NNNNNN_seg.png` (8-bit gray, object index + 1) and `NNNNNN_meta.json`.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::types::{ImageTensor, PanopticMap};

use super::Sample;

#[derive(Debug, Serialize, Deserialize)]
struct MetaObject {
    index: usize,
    category_id: usize,
    bbox: [usize; 4],
    is_thing: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    scene_seed: u64,
    objects: Vec<MetaObject>,
}

fn stem(dir: &Path, index: usize, suffix: &str) -> PathBuf {
    dir.join(format!("{index:06}_{suffix}"))
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Write an image as an 8-bit RGB PNG.
pub fn write_image_png(path: &Path, img: &ImageTensor) -> Result<()> {
    write_png(path, img.width(), img.height(), png::ColorType::Rgb, &img.to_bytes())
}

/// Decoded 8-bit PNG: (width, height, channels, bytes).
fn read_png(path: &Path, index: usize) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bad = |m: String| Error::Dataset {
        index: Some(index),
        message: format!("{}: {m}", path.display()),
    };
    let file = fs::File::open(path).map_err(|e| bad(e.to_string()))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!("bit depth {:?}, expected 8", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(bad(format!("unsupported colour type {other:?}"))),
    };
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, channels, buf))
}

/// Write `samples` into `dir` (created if needed).
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        let n = s.a.width();
        write_png(&stem(dir, s.index, "a.png"), n, n, png::ColorType::Rgb, &s.a.to_bytes())?;
        write_png(&stem(dir, s.index, "b.png"), n, n, png::ColorType::Rgb, &s.b.to_bytes())?;
        if s.panoptic.len() > 255 {
            return Err(Error::Dataset {
                index: Some(s.index),
                message: format!("{} objects do not fit an 8-bit label map", s.panoptic.len()),
            });
        }
        let labels: Vec<u8> = s
            .panoptic
            .label_map()
            .iter()
            .map(|l| l.map_or(0, |i| i as u8 + 1))
            .collect();
        write_png(&stem(dir, s.index, "seg.png"), n, n, png::ColorType::Grayscale, &labels)?;
        let meta = Meta {
            scene_seed: s.scene_seed,
            objects: s
                .panoptic
                .objects
                .iter()
                .enumerate()
                .map(|(index, o)| MetaObject {
                    index,
                    category_id: o.category_id,
                    bbox: o.bbox.as_array(),
                    is_thing: o.is_thing,
                })
                .collect(),
        };
        let path = stem(dir, s.index, "meta.json");
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Sample indices present in `dir`, ascending.
fn indices(dir: &Path) -> Result<Vec<usize>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name();
        let name = name.to_string_lossy();
        if let Some(num) = name.strip_suffix("_meta.json") {
            if num.len() == 6 {
                if let Ok(i) = num.parse::<usize>() {
                    out.push(i);
                }
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Read every sample in `dir`. Errors name the offending sample index.
pub fn read_dataset(dir: &Path, cfg: &Config) -> Result<Vec<Sample>> {
    let idx = indices(dir)?;
    if idx.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    idx.into_iter().map(|i| read_sample(dir, i, cfg)).collect()
}

fn read_sample(dir: &Path, index: usize, cfg: &Config) -> Result<Sample> {
    let bad = |m: String| Error::Dataset {
        index: Some(index),
        message: m,
    };
    let meta_path = stem(dir, index, "meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| bad(format!("{}: {e}", meta_path.display())))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", meta_path.display())))?;
    let image = |suffix: &str| -> Result<ImageTensor> {
        let (w, h, ch, bytes) = read_png(&stem(dir, index, suffix), index)?;
        if ch != 3 {
            return Err(bad(format!("{suffix} has {ch} channels, expected 3")));
        }
        ImageTensor::from_bytes(&bytes, h, w, cfg).map_err(|e| bad(format!("{suffix}: {e}")))
    };
    let a = image("a.png")?;
    let b = image("b.png")?;
    let (w, h, ch, seg) = read_png(&stem(dir, index, "seg.png"), index)?;
    if ch != 1 || w != cfg.image_size || h != cfg.image_size {
        return Err(bad(format!("label map is {w}x{h}x{ch}, expected {0}x{0}x1", cfg.image_size)));
    }
    let m = meta.objects.len();
    let mut labels = Vec::with_capacity(seg.len());
    for &v in &seg {
        if v == 0 || v as usize > m {
            return Err(bad(format!("label value {v} outside 1..={m}")));
        }
        labels.push(v as usize - 1);
    }
    for (k, o) in meta.objects.iter().enumerate() {
        if o.index != k {
            return Err(bad(format!("object entry {k} carries index {}", o.index)));
        }
    }
    let attrs: Vec<(usize, bool)> = meta.objects.iter().map(|o| (o.category_id, o.is_thing)).collect();
    let panoptic = PanopticMap::from_labels(cfg.image_size, &labels, &attrs).map_err(|e| bad(e.to_string()))?;
    for (o, mo) in panoptic.objects.iter().zip(&meta.objects) {
        if o.bbox.as_array() != mo.bbox {
            return Err(bad(format!(
                "object {} bbox {:?} disagrees with its mask {:?}",
                mo.index,
                mo.bbox,
                o.bbox.as_array()
            )));
        }
    }
    Ok(Sample {
        index,
        scene_seed: meta.scene_seed,
        a,
        b,
        panoptic,
    })
}

/// SHA-256 over sample file names and contents in index order (hex).
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for i in indices(dir)? {
        for suffix in ["a.png", "b.png", "seg.png", "meta.json"] {
            let p = stem(dir, i, suffix);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            h.update(p.file_name().unwrap().to_string_lossy().as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(crate::config::hex(&h.finalize()))
}
