//! Image- and object-level discriminator with an auxiliary category classifier.

use crate::autograd::Var;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::roi::roi_align;
use crate::nn::{lrelu, Bound, Conv2d, Linear, ParameterStore, ResBlock};
use crate::rng::Rng;
use crate::tensor::Float;
use crate::types::PanopticMap;

const BLOCKS: usize = 2;

/// Scores for one image: `s_img` is `[1]`, `s_real` is `[m]`, `s_cls` is `[m, CAT]`.
#[derive(Clone, Copy)]
pub struct DiscriminatorOutput<'g, T> {
    pub s_img: Var<'g, T>,
    pub s_real: Var<'g, T>,
    pub s_cls: Var<'g, T>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: Config,
    stem: Conv2d,
    down: [Conv2d; 2],
    blocks: Vec<ResBlock>,
    img_head: Linear,
    obj_real: Linear,
    obj_cls: Linear,
    channels: usize,
}

/// Names of the output-head parameters (weights and biases).
pub const HEAD_PREFIXES: [&str; 3] = ["head.image", "head.object_real", "head.object_class"];

impl Discriminator {
    pub fn new<T: Float>(cfg: &Config, store: &mut ParameterStore<T>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let channels = 4 * b;
        let stem = Conv2d::new(store, rng, "disc.stem", 3, b, 3, 1);
        let down = [
            Conv2d::new(store, rng, "disc.down0", b, 2 * b, 3, 2),
            Conv2d::new(store, rng, "disc.down1", 2 * b, channels, 3, 2),
        ];
        let blocks = (0..BLOCKS)
            .map(|i| ResBlock::new(store, rng, &format!("disc.block{i}"), channels))
            .collect();
        let flat = channels * cfg.roi_size * cfg.roi_size;
        let img_head = Linear::new(store, rng, HEAD_PREFIXES[0], channels, 1);
        let obj_real = Linear::new(store, rng, HEAD_PREFIXES[1], flat, 1);
        let obj_cls = Linear::new(store, rng, HEAD_PREFIXES[2], flat, cfg.CAT);
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            down,
            blocks,
            img_head,
            obj_real,
            obj_cls,
            channels,
        })
    }

    pub fn features<'g, T: Float>(&self, p: &Bound<'g, '_, T>, img: Var<'g, T>) -> Var<'g, T> {
        let mut x = lrelu(self.stem.forward(p, img));
        for conv in &self.down {
            x = lrelu(conv.forward(p, x));
        }
        for block in &self.blocks {
            x = block.forward(p, x);
        }
        x
    }

    pub fn discriminate<'g, T: Float>(
        &self,
        p: &Bound<'g, '_, T>,
        img: Var<'g, T>,
        map: &PanopticMap,
    ) -> Result<DiscriminatorOutput<'g, T>> {
        let n = self.cfg.image_size;
        if img.shape() != [3, n, n] {
            return Err(Error::Shape(format!("image tensor {:?}, expected [3, {n}, {n}]", img.shape())));
        }
        if map.is_empty() {
            return Err(Error::InvalidArgument("discriminating against an empty map".into()));
        }
        let fm = self.features(p, img);
        let s_img = self.img_head.forward(p, lrelu(fm).mean_spatial());
        let r = self.cfg.roi_size;
        let flat = self.channels * r * r;
        let objs: Vec<Var<'g, T>> = map
            .objects
            .iter()
            .map(|o| Ok(roi_align(fm, &o.bbox, n, r)?.reshape(&[1, flat])))
            .collect::<Result<_>>()?;
        let rows = lrelu(Var::concat(&objs));
        let m = map.len();
        let s_real = self.obj_real.forward(p, rows).reshape(&[m]);
        let s_cls = self.obj_cls.forward(p, rows);
        Ok(DiscriminatorOutput { s_img, s_real, s_cls })
    }
}

/// `mean_i s_real_i + mean_i log softmax(s_cls_i)[category_i]`.
pub fn object_score<'g, T: Float>(out: &DiscriminatorOutput<'g, T>, categories: &[usize]) -> Result<Var<'g, T>> {
    let m = out.s_real.numel();
    if categories.len() != m {
        return Err(Error::Shape(format!("{} categories for {m} objects", categories.len())));
    }
    Ok(out.s_real.mean() + class_log_likelihood(out.s_cls, categories)?)
}

/// Mean true-category log-probability over the rows of `[m, CAT]` logits.
pub fn class_log_likelihood<'g, T: Float>(s_cls: Var<'g, T>, categories: &[usize]) -> Result<Var<'g, T>> {
    let shape = s_cls.shape();
    if shape.len() != 2 || shape[0] != categories.len() {
        return Err(Error::Shape(format!("logits {shape:?} for {} categories", categories.len())));
    }
    let terms: Vec<Var<'g, T>> = categories
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if c >= shape[1] {
                return Err(Error::InvalidArgument(format!("category {c} outside 0..{}", shape[1])));
            }
            Ok(s_cls.select_row(i).log_softmax().index(c))
        })
        .collect::<Result<_>>()?;
    Ok(crate::autograd::sum_all(&terms).scale(1.0 / categories.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::synthdata::generate_sample;
    use crate::tensor::Tensor;
    use crate::types::{BBox, ImageTensor, ObjectEntry};

    #[test]
    fn output_shapes_and_determinism() {
        let cfg = Config::toy();
        let mut store = ParameterStore::<f64>::new();
        let d = Discriminator::new(&cfg, &mut store, &mut Rng::new(0, 12)).unwrap();
        let s = generate_sample(&cfg, 0, 0);
        let run = || {
            let g = Graph::new();
            let p = Bound::frozen(&g, &store);
            let o = d.discriminate(&p, g.constant(s.b.to_chw()), &s.panoptic).unwrap();
            (o.s_img.value().to_f64_vec(), o.s_real.value().to_f64_vec(), o.s_cls.value().shape().to_vec(), o.s_cls.value().to_f64_vec())
        };
        let (img, real, cls_shape, cls) = run();
        assert_eq!(img.len(), 1);
        assert_eq!(real.len(), s.panoptic.len());
        assert_eq!(cls_shape, vec![s.panoptic.len(), cfg.CAT]);
        assert_eq!(run(), (img, real, cls_shape, cls));
    }

    #[test]
    fn uniform_logits_score_is_log_one_eighth() {
        let g = Graph::<f64>::new();
        let out = DiscriminatorOutput {
            s_img: g.constant(Tensor::zeros(&[1])),
            s_real: g.constant(Tensor::zeros(&[1])),
            s_cls: g.constant(Tensor::zeros(&[1, 8])),
        };
        let v = object_score(&out, &[3]).unwrap().item();
        assert!((v - (1.0f64 / 8.0).ln()).abs() < 1e-12);
        assert!((v + 2.0794).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_classifier_approaches_zero() {
        let g = Graph::<f64>::new();
        let mut prev = f64::NEG_INFINITY;
        for margin in [1.0, 5.0, 10.0, 20.0, 30.0] {
            let mut logits = vec![0.0; 8];
            logits[2] = margin;
            let out = DiscriminatorOutput {
                s_img: g.constant(Tensor::zeros(&[1])),
                s_real: g.constant(Tensor::zeros(&[1])),
                s_cls: g.constant(Tensor::from_f64(&[1, 8], &logits)),
            };
            let v = object_score(&out, &[2]).unwrap().item();
            assert!(v <= 0.0 && v > prev);
            prev = v;
        }
        assert!(prev > -1e-11);
    }

    #[test]
    fn object_score_is_permutation_invariant() {
        let g = Graph::<f64>::new();
        let mut r = Rng::new(1, 1);
        let real = r.normals(3);
        let cls = r.normals(15);
        let cats = [0usize, 4, 2];
        let perm = [2usize, 0, 1];
        let make = |order: &[usize]| {
            let real: Vec<f64> = order.iter().map(|&i| real[i]).collect();
            let cls: Vec<f64> = order.iter().flat_map(|&i| cls[i * 5..i * 5 + 5].to_vec()).collect();
            let cats: Vec<usize> = order.iter().map(|&i| cats[i]).collect();
            let out = DiscriminatorOutput {
                s_img: g.constant(Tensor::zeros(&[1])),
                s_real: g.constant(Tensor::from_f64(&[3], &real)),
                s_cls: g.constant(Tensor::from_f64(&[3, 5], &cls)),
            };
            object_score(&out, &cats).unwrap().item()
        };
        assert!((make(&[0, 1, 2]) - make(&perm)).abs() < 1e-12);
    }

    #[test]
    fn distant_objects_are_unaffected_by_local_edits() {
        // receptive field of the object features: stem 3x3, two stride-2 3x3, two
        // bottlenecks with one 3x3 each at stride 4: 1 + 2 + 2 + 4 + 2*8 = 25 pixels,
        // plus one feature cell (4 px) of bilinear support either side of the box.
        let cfg = Config::desk();
        let mut store = ParameterStore::<f64>::new();
        let d = Discriminator::new(&cfg, &mut store, &mut Rng::new(0, 12)).unwrap();
        let n = cfg.image_size;
        let rect = |x0, y0, x1, y1| {
            let mut mask = vec![false; n * n];
            for y in y0..y1 {
                for x in x0..x1 {
                    mask[y * n + x] = true;
                }
            }
            mask
        };
        let a = rect(0, 0, 12, 12);
        let b = rect(48, 48, 64, 64);
        let bg: Vec<bool> = a.iter().zip(&b).map(|(p, q)| !p && !q).collect();
        let map = PanopticMap::new(
            n,
            vec![
                ObjectEntry::from_mask(0, bg, n, false).unwrap(),
                ObjectEntry::from_mask(4, a, n, true).unwrap(),
                ObjectEntry::from_mask(5, b, n, true).unwrap(),
            ],
        );
        assert_eq!(map.objects[2].bbox, BBox::new(48, 48, 64, 64));
        let base = ImageTensor::filled(n, n, 0.1);
        let mut edited = base.clone();
        for y in 50..62 {
            for x in 50..62 {
                edited.set_pixel(y, x, [0.9, -0.4, 0.3]);
            }
        }
        let scores = |img: &ImageTensor| {
            let g = Graph::new();
            let p = Bound::frozen(&g, &store);
            d.discriminate(&p, g.constant(img.to_chw()), &map).unwrap().s_real.value().to_f64_vec()
        };
        let (s0, s1) = (scores(&base), scores(&edited));
        assert_eq!(s0[1], s1[1]);
        assert_ne!(s0[2], s1[2]);
    }

    #[test]
    fn full_discriminator_gradients_match_finite_differences() {
        let cfg = Config::toy();
        let mut store = ParameterStore::<f64>::new();
        let d = Discriminator::new(&cfg, &mut store, &mut Rng::new(0, 12)).unwrap();
        let s = generate_sample(&cfg, 0, 5);
        let cats = s.panoptic.categories();
        let report = crate::nn::check_store_gradients(&store, |g, p| {
            let o = d.discriminate(p, g.constant(s.b.to_chw()), &s.panoptic).unwrap();
            o.s_img.sum().scale(0.7) + object_score(&o, &cats).unwrap()
        });
        assert!(report.worst < 1e-3, "{report:?}");
    }
}
