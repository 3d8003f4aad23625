//! Fixed spatial resampling operators: RoIAlign cropping, bilinear resizing, layout
//! placement and mask downsampling. Each is a constant matrix over spatial positions,
//! so applying it is linear in the feature map and differentiable through
//! [`Var::spatial_map`].

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::types::BBox;

/// RoIAlign sampling points per bin along each axis.
pub const SAMPLING_RATIO: usize = 2;

/// `[out*out, feat_h*feat_w]` interpolation matrix for one box given in image pixel
/// coordinates. Coordinates are scaled by `scale` (feature size / image size) and use
/// the half-pixel aligned convention; each bin averages `SAMPLING_RATIO²` bilinear
/// samples, clamped at the map border.
pub fn roi_align_matrix<T: Float>(
    feat_h: usize,
    feat_w: usize,
    bbox: [f64; 4],
    scale: f64,
    out_size: usize,
) -> Result<Tensor<T>> {
    let [x0, y0, x1, y1] = bbox;
    let (sx, sy) = (x0 * scale - 0.5, y0 * scale - 0.5);
    let (w, h) = ((x1 - x0) * scale, (y1 - y0) * scale);
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "zero-area box {bbox:?} after scaling by {scale}"
        )));
    }
    if x0 < 0.0 || y0 < 0.0 || x1 * scale > feat_w as f64 + 1e-9 || y1 * scale > feat_h as f64 + 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "box {bbox:?} outside a {feat_w}x{feat_h} feature map at scale {scale}"
        )));
    }
    let (bin_w, bin_h) = (w / out_size as f64, h / out_size as f64);
    let n = SAMPLING_RATIO as f64;
    let weight = 1.0 / (n * n);
    let mut m = vec![0.0f64; out_size * out_size * feat_h * feat_w];
    for by in 0..out_size {
        for bx in 0..out_size {
            let row = (by * out_size + bx) * feat_h * feat_w;
            for iy in 0..SAMPLING_RATIO {
                let y = sy + by as f64 * bin_h + (iy as f64 + 0.5) * bin_h / n;
                for ix in 0..SAMPLING_RATIO {
                    let x = sx + bx as f64 * bin_w + (ix as f64 + 0.5) * bin_w / n;
                    for (cy, wy) in axis_weights(y, feat_h) {
                        for &(cx, wx) in &axis_weights(x, feat_w) {
                            m[row + cy * feat_w + cx] += weight * wy * wx;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_f64(&[out_size * out_size, feat_h * feat_w], &m))
}

/// Bilinear taps along one axis, clamped to `[0, n-1]`.
fn axis_weights(v: f64, n: usize) -> Vec<(usize, f64)> {
    if v < -1.0 || v > n as f64 {
        return Vec::new();
    }
    let v = v.max(0.0);
    let lo = v.floor() as usize;
    if lo >= n - 1 {
        return vec![(n - 1, 1.0)];
    }
    let frac = v - lo as f64;
    vec![(lo, 1.0 - frac), (lo + 1, frac)]
}

/// Crop `fm` (`[C, H, W]`) to `[C, out, out]` under `bbox` given in image pixels.
pub fn roi_align<'g, T: Float>(fm: Var<'g, T>, bbox: &BBox, image_size: usize, out_size: usize) -> Result<Var<'g, T>> {
    let shape = fm.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let scale = w as f64 / image_size as f64;
    let m = roi_align_matrix(h, w, bbox.as_array().map(|v| v as f64), scale, out_size)?;
    Ok(fm.spatial_map(Rc::new(m)).reshape(&[c, out_size, out_size]))
}

/// `[out, in]` bilinear resize matrix with half-pixel centres (no corner alignment).
pub fn resize_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let ratio = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        let frac = src - lo as f64;
        m[o * input + lo] += 1.0 - frac;
        m[o * input + hi] += frac;
    }
    m
}

/// Footprint of an image-space box on a `layout` grid covering an `image` canvas:
/// `[floor(x0·s), floor(y0·s), ceil(x1·s), ceil(y1·s))` with `s = layout / image`.
pub fn layout_footprint(bbox: &BBox, image: usize, layout: usize) -> Result<[usize; 4]> {
    let lo = |v: usize| v * layout / image;
    let hi = |v: usize| (v * layout).div_ceil(image);
    let fp = [lo(bbox.x0), lo(bbox.y0), hi(bbox.x1), hi(bbox.y1)];
    if fp[2] <= fp[0] || fp[3] <= fp[1] || fp[2] > layout || fp[3] > layout {
        return Err(Error::InvalidArgument(format!(
            "box {:?} has an empty footprint on a {layout}x{layout} layout",
            bbox.as_array()
        )));
    }
    Ok(fp)
}

/// `[layout², roi²]` matrix that upsamples an `roi x roi` grid by `alpha`, resizes it to
/// the box footprint and places it on a zero `layout x layout` canvas.
pub fn layout_matrix<T: Float>(roi: usize, alpha: usize, layout: usize, footprint: [usize; 4]) -> Tensor<T> {
    let up = roi * alpha;
    let [fx0, fy0, fx1, fy1] = footprint;
    let axis = |len: usize| -> Vec<f64> {
        // [len, roi] = resize(up -> len) · resize(roi -> up)
        let a = resize_matrix(up, len);
        let b = resize_matrix(roi, up);
        let mut out = vec![0.0; len * roi];
        for i in 0..len {
            for k in 0..up {
                let aik = a[i * up + k];
                if aik != 0.0 {
                    for j in 0..roi {
                        out[i * roi + j] += aik * b[k * roi + j];
                    }
                }
            }
        }
        out
    };
    let (fw, fh) = (fx1 - fx0, fy1 - fy0);
    let ax = axis(fw);
    let ay = axis(fh);
    let mut m = vec![0.0; layout * layout * roi * roi];
    for y in 0..fh {
        for x in 0..fw {
            let row = ((fy0 + y) * layout + fx0 + x) * roi * roi;
            for iy in 0..roi {
                let wy = ay[y * roi + iy];
                if wy == 0.0 {
                    continue;
                }
                for ix in 0..roi {
                    m[row + iy * roi + ix] += wy * ax[x * roi + ix];
                }
            }
        }
    }
    Tensor::from_f64(&[layout * layout, roi * roi], &m)
}

/// Place a `[C, roi, roi]` object feature on the layout canvas: `[C, layout, layout]`.
pub fn to_layout<'g, T: Float>(
    o: Var<'g, T>,
    bbox: &BBox,
    image_size: usize,
    alpha: usize,
    layout: usize,
) -> Result<Var<'g, T>> {
    let shape = o.shape();
    let (c, roi) = (shape[0], shape[1]);
    let fp = layout_footprint(bbox, image_size, layout)?;
    let m = layout_matrix(roi, alpha, layout, fp);
    Ok(o.spatial_map(Rc::new(m)).reshape(&[c, layout, layout]))
}

/// Area-average a full-resolution mask onto a `layout x layout` grid and threshold at 0.5.
pub fn downsample_mask(mask: &[bool], image_size: usize, layout: usize) -> Vec<bool> {
    assert_eq!(mask.len(), image_size * image_size, "mask size mismatch");
    let mut out = vec![false; layout * layout];
    for ly in 0..layout {
        let (ya, yb) = (ly * image_size / layout, (ly + 1) * image_size / layout);
        for lx in 0..layout {
            let (xa, xb) = (lx * image_size / layout, (lx + 1) * image_size / layout);
            let mut on = 0usize;
            for y in ya..yb {
                on += mask[y * image_size + xa..y * image_size + xb].iter().filter(|&&b| b).count();
            }
            let area = (yb - ya) * (xb - xa);
            out[ly * layout + lx] = 2 * on >= area;
        }
    }
    out
}

/// Zero every cell of a `[C, H, W]` layout where `mask` is false.
pub fn feature_mask<'g, T: Float>(o_bbox: Var<'g, T>, mask: &[bool]) -> Var<'g, T> {
    let m: Vec<T> = mask.iter().map(|&b| if b { T::ONE } else { T::ZERO }).collect();
    let n = m.len();
    o_bbox.mask_spatial(Rc::new(Tensor::new(&[n], m)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    fn ramp(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor<f64> {
        let mut d = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    d.push(f(ch, y, x));
                }
            }
        }
        Tensor::new(&[c, h, w], d)
    }

    #[test]
    fn constant_field_stays_constant() {
        let g = Graph::new();
        let fm = g.constant(Tensor::full(&[2, 8, 8], 3.0f64));
        for b in [BBox::new(0, 0, 32, 32), BBox::new(3, 5, 17, 29), BBox::new(28, 28, 32, 32)] {
            let out = roi_align(fm, &b, 32, 4).unwrap().value();
            assert!(out.data().iter().all(|&v| (v - 3.0).abs() < 1e-12), "{b:?}");
        }
    }

    #[test]
    fn ramp_bins_equal_mean_sample_coordinate() {
        // f(x, y) = x; interior box so no clamping
        let g = Graph::new();
        let fm = g.constant(ramp(1, 16, 16, |_, _, x| x as f64));
        let (x0, x1) = (8.0, 40.0);
        let out = roi_align(fm, &BBox::new(8, 12, 40, 44), 64, 4).unwrap().value();
        let scale = 0.25;
        let bin = (x1 - x0) * scale / 4.0;
        for by in 0..4 {
            for bx in 0..4 {
                let start = x0 * scale - 0.5 + bx as f64 * bin;
                let mean_x = start + 0.5 * ((0.5 * bin / 2.0) + (1.5 * bin / 2.0));
                assert!((out.data()[by * 4 + bx] - mean_x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn whole_map_reproduces_linear_field_in_interior() {
        let g = Graph::new();
        let field = ramp(2, 8, 8, |c, y, x| 1.5 * x as f64 - 0.5 * y as f64 + c as f64);
        let fm = g.constant(field.clone());
        let out = roi_align(fm, &BBox::full(8), 8, 8).unwrap().value();
        for c in 0..2 {
            for y in 1..7 {
                for x in 1..7 {
                    let i = (c * 8 + y) * 8 + x;
                    assert!((out.data()[i] - field.data()[i]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn linear_in_feature_map() {
        let g = Graph::new();
        let f = ramp(3, 8, 8, |c, y, x| ((c * 31 + y * 7 + x * 3) % 11) as f64 - 5.0);
        let h = ramp(3, 8, 8, |c, y, x| ((c * 5 + y * 13 + x) % 7) as f64 * 0.3);
        let (a, b) = (1.7, -0.4);
        let mut comb = f.map(|v| a * v);
        comb.add_assign(&h.map(|v| b * v));
        let bbox = BBox::new(5, 2, 27, 19);
        let crop = |t: &Tensor<f64>| roi_align(g.constant(t.clone()), &bbox, 32, 4).unwrap().value();
        let lhs = crop(&comb);
        let (cf, ch) = (crop(&f), crop(&h));
        for i in 0..lhs.len() {
            assert!((lhs.data()[i] - (a * cf.data()[i] + b * ch.data()[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_area_box_is_an_error() {
        let err = roi_align_matrix::<f64>(8, 8, [4.0, 4.0, 4.0, 9.0], 0.25, 4).unwrap_err();
        assert!(err.to_string().contains("zero-area"));
    }

    #[test]
    fn resize_rows_sum_to_one() {
        for (i, o) in [(4, 16), (16, 5), (4, 1), (3, 3)] {
            let m = resize_matrix(i, o);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layout_zero_outside_footprint_and_constant_inside() {
        let g = Graph::new();
        let o = g.constant(Tensor::full(&[2, 4, 4], 0.7f64));
        let bbox = BBox::new(10, 20, 30, 50);
        let fp = layout_footprint(&bbox, 64, 16).unwrap();
        assert_eq!(fp, [2, 5, 8, 13]);
        let out = to_layout(o, &bbox, 64, 4, 16).unwrap().value();
        for c in 0..2 {
            for y in 0..16 {
                for x in 0..16 {
                    let v = out.data()[(c * 16 + y) * 16 + x];
                    let inside = (fp[0]..fp[2]).contains(&x) && (fp[1]..fp[3]).contains(&y);
                    if inside {
                        assert!((v - 0.7).abs() < 1e-12);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn whole_image_box_covers_layout() {
        assert_eq!(layout_footprint(&BBox::full(64), 64, 16).unwrap(), [0, 0, 16, 16]);
        let m = layout_matrix::<f64>(4, 4, 16, [0, 0, 16, 16]);
        // full-frame placement is exactly the alpha-upsampling
        for r in 0..256 {
            let s: f64 = m.data()[r * 16..(r + 1) * 16].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_downsampling_and_masking() {
        // left half on at 8x8 -> left half of a 4x4 grid
        let mask: Vec<bool> = (0..64).map(|i| i % 8 < 4).collect();
        let small = downsample_mask(&mask, 8, 4);
        assert_eq!(small, (0..16).map(|i| i % 4 < 2).collect::<Vec<_>>());
        // checkerboard at layout resolution
        let checker: Vec<bool> = (0..16).map(|i| (i / 4 + i % 4) % 2 == 0).collect();
        let g = Graph::new();
        let x = ramp(2, 4, 4, |c, y, x| 1.0 + (c + y + x) as f64);
        let f = feature_mask(g.constant(x.clone()), &checker).value();
        for i in 0..32 {
            let on = checker[i % 16];
            assert_eq!(f.data()[i] != 0.0, on);
            if on {
                assert_eq!(f.data()[i], x.data()[i]);
            }
        }
        let all = feature_mask(g.constant(x.clone()), &[true; 16]).value();
        assert_eq!(all.data(), x.data());
        let none = feature_mask(g.constant(x), &[false; 16]).value();
        assert!(none.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn roi_align_gradient_matches_finite_differences() {
        use crate::autograd::gradcheck::check_fn;
        let fm = ramp(2, 6, 6, |c, y, x| ((c * 17 + y * 5 + x * 11) % 13) as f64 * 0.1);
        let err = check_fn(&[fm], |_, v| {
            let out = roi_align(v[0], &BBox::new(3, 1, 20, 22), 24, 3).unwrap();
            (out.sqr() + out).sum()
        });
        assert!(err < 1e-4, "{err}");
    }
}
