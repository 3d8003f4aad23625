//! Images, panoptic maps, and their validation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Category id of the background stuff region.
pub const BACKGROUND: usize = 0;

/// `H x W x 3` image with values in `[-1, 1]`, stored row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image data has {} values, expected {height}x{width}x3",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidArgument(format!("image value {v} outside [-1, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-major `[3, H, W]` tensor for the networks.
    pub fn to_chw<T: Float>(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        let mut out = vec![T::ZERO; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = T::from_f64(self.data[p * 3 + c] as f64);
            }
        }
        Tensor::new(&[3, self.height, self.width], out)
    }

    /// Inverse of [`ImageTensor::to_chw`]; values are clamped to `[-1, 1]`.
    pub fn from_chw<T: Float>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("expected [3, H, W], got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let hw = h * w;
        let mut data = vec![0f32; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                let v = t.data()[c * hw + p].to_f64() as f32;
                if !v.is_finite() {
                    return Err(Error::InvalidArgument("non-finite image value".into()));
                }
                data[p * 3 + c] = v.clamp(-1.0, 1.0);
            }
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Bytes → `[-1, 1]` by `2·b/255 − 1`.
    pub fn from_bytes(raw: &[u8], height: usize, width: usize, cfg: &Config) -> Result<Self> {
        if height != cfg.image_size || width != cfg.image_size {
            return Err(Error::Shape(format!(
                "image is {height}x{width}, configured size is {}",
                cfg.image_size
            )));
        }
        if raw.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} bytes for a {height}x{width}x3 image",
                raw.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data: raw.iter().map(|&b| byte_to_unit(b)).collect(),
        })
    }

    /// `[-1, 1]` → bytes, rounding to the nearest level.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| unit_to_byte(v)).collect()
    }

    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape("image size mismatch".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len() as f64)
    }
}

pub fn byte_to_unit(b: u8) -> f32 {
    (2.0 * b as f64 / 255.0 - 1.0) as f32
}

pub fn unit_to_byte(v: f32) -> u8 {
    (((v as f64 + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn full(size: usize) -> Self {
        Self::new(0, 0, size, size)
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectEntry {
    pub category_id: usize,
    pub bbox: BBox,
    /// Full-image binary mask, row-major `H x W`.
    pub mask: Vec<bool>,
    pub is_thing: bool,
}

impl ObjectEntry {
    /// Entry whose bbox is the tight rectangle of `mask`. `None` if the mask is empty.
    pub fn from_mask(category_id: usize, mask: Vec<bool>, size: usize, is_thing: bool) -> Option<Self> {
        let bbox = tight_bbox(&mask, size)?;
        Some(Self {
            category_id,
            bbox,
            mask,
            is_thing,
        })
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn tight_bbox(mask: &[bool], size: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (i / size, i % size);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    (x0 != usize::MAX).then(|| BBox::new(x0, y0, x1, y1))
}

/// Ordered, overlap-free objects tiling the canvas. The order is the composition order.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticMap {
    pub size: usize,
    pub objects: Vec<ObjectEntry>,
}

impl PanopticMap {
    pub fn new(size: usize, objects: Vec<ObjectEntry>) -> Self {
        Self { size, objects }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn categories(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.category_id).collect()
    }

    /// Per-pixel object index (`None` where uncovered). Later objects win on overlap.
    pub fn label_map(&self) -> Vec<Option<usize>> {
        let mut labels = vec![None; self.size * self.size];
        for (i, o) in self.objects.iter().enumerate() {
            for (l, &m) in labels.iter_mut().zip(&o.mask) {
                if m {
                    *l = Some(i);
                }
            }
        }
        labels
    }

    /// Build a map from a per-pixel label image and the per-label attributes.
    pub fn from_labels(size: usize, labels: &[usize], attrs: &[(usize, bool)]) -> Result<Self> {
        let mut objects = Vec::with_capacity(attrs.len());
        for (idx, &(category_id, is_thing)) in attrs.iter().enumerate() {
            let mask: Vec<bool> = labels.iter().map(|&l| l == idx).collect();
            let entry = ObjectEntry::from_mask(category_id, mask, size, is_thing)
                .ok_or_else(|| Error::InvalidArgument(format!("object {idx} has an empty mask")))?;
            objects.push(entry);
        }
        Ok(Self { size, objects })
    }

    /// Enforce the object cap: keep background plus the largest-area objects, merging
    /// the remainder into background. Relative order is preserved.
    pub fn cap_objects(mut self, max_objects: usize) -> Self {
        if self.objects.len() <= max_objects {
            return self;
        }
        let size = self.size;
        let bg_pos = self.objects.iter().position(|o| o.category_id == BACKGROUND);
        let mut candidates: Vec<(usize, usize)> = self
            .objects
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != bg_pos)
            .map(|(i, o)| (i, o.area()))
            .collect();
        candidates.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let keep_n = max_objects.saturating_sub(1);
        let mut keep = vec![false; self.objects.len()];
        for &(i, _) in candidates.iter().take(keep_n) {
            keep[i] = true;
        }
        let mut bg_mask = bg_pos
            .map(|p| self.objects[p].mask.clone())
            .unwrap_or_else(|| vec![false; size * size]);
        for (i, o) in self.objects.iter().enumerate() {
            if !keep[i] && Some(i) != bg_pos {
                for (b, &m) in bg_mask.iter_mut().zip(&o.mask) {
                    *b |= m;
                }
            }
        }
        let bg = ObjectEntry::from_mask(BACKGROUND, bg_mask, size, false).expect("merged background is non-empty");
        let mut out = Vec::with_capacity(max_objects);
        if bg_pos.is_none() {
            out.push(bg.clone());
        }
        for (i, o) in self.objects.drain(..).enumerate() {
            if Some(i) == bg_pos {
                out.push(bg.clone());
            } else if keep[i] {
                out.push(o);
            }
        }
        Self { size, objects: out }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rule {
    ObjectCount,
    Category,
    MaskSize,
    BBoxBounds,
    EmptyMask,
    MaskOutsideBBox,
    Overlap,
    Coverage,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub objects: Vec<usize>,
    pub rule: Rule,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?} (objects {:?}): {}", self.rule, self.objects, self.detail)
    }
}

/// All broken map and entry invariants; empty iff the map is valid.
pub fn validate_panoptic_map(p: &PanopticMap, cfg: &Config) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = p.size;
    let m = p.objects.len();
    if m == 0 || m > cfg.max_objects {
        out.push(Violation {
            objects: vec![],
            rule: Rule::ObjectCount,
            detail: format!("{m} objects, allowed 1..={}", cfg.max_objects),
        });
    }
    let mut owner: Vec<Option<usize>> = vec![None; n * n];
    let mut overlaps: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (i, o) in p.objects.iter().enumerate() {
        if o.category_id >= cfg.CAT {
            out.push(Violation {
                objects: vec![i],
                rule: Rule::Category,
                detail: format!("category {} not in [0, {})", o.category_id, cfg.CAT),
            });
        }
        let b = o.bbox;
        if !(b.x0 < b.x1 && b.x1 <= n && b.y0 < b.y1 && b.y1 <= n) {
            out.push(Violation {
                objects: vec![i],
                rule: Rule::BBoxBounds,
                detail: format!("bbox {:?} not within a {n}x{n} canvas", b.as_array()),
            });
        }
        if o.mask.len() != n * n {
            out.push(Violation {
                objects: vec![i],
                rule: Rule::MaskSize,
                detail: format!("mask has {} cells, expected {}", o.mask.len(), n * n),
            });
            continue;
        }
        let mut area = 0;
        let mut outside = 0;
        for (px, _) in o.mask.iter().enumerate().filter(|(_, &v)| v) {
            area += 1;
            if !b.contains(px % n, px / n) {
                outside += 1;
            }
            match owner[px] {
                Some(j) => *overlaps.entry((j, i)).or_insert(0) += 1,
                None => owner[px] = Some(i),
            }
        }
        if area == 0 {
            out.push(Violation {
                objects: vec![i],
                rule: Rule::EmptyMask,
                detail: "mask has no pixels".into(),
            });
        }
        if outside > 0 {
            out.push(Violation {
                objects: vec![i],
                rule: Rule::MaskOutsideBBox,
                detail: format!("{outside} mask pixels outside bbox"),
            });
        }
    }
    for ((a, b), count) in overlaps {
        out.push(Violation {
            objects: vec![a, b],
            rule: Rule::Overlap,
            detail: format!("{count} shared pixels"),
        });
    }
    let uncovered = owner.iter().filter(|o| o.is_none()).count();
    if uncovered > 0 {
        out.push(Violation {
            objects: vec![],
            rule: Rule::Coverage,
            detail: format!("{uncovered} uncovered pixels"),
        });
    }
    out
}
