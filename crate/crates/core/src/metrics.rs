//! Panoptic Quality and the proxy Inception / diversity scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::generator::translate;
use crate::losses::FeaturePyramid;
use crate::nn::{lrelu, Bound, Conv2d, Linear, ParameterStore};
use crate::rng::{stream, Rng};
use crate::synthdata::{generate_dataset, palette_segment, Sample, MAX_THINGS};
use crate::tensor::Tensor;
use crate::trainer::{AdamState, Networks, TrainState};
use crate::types::{ImageTensor, PanopticMap};

/// Matching threshold: a prediction matches a ground-truth segment iff IoU exceeds it.
pub const MATCH_IOU: f64 = 0.5;
/// Segment bound per category for [`pq_oracle`].
pub const ORACLE_MAX_SEGMENTS: usize = 6;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category_id: usize,
    pub is_thing: bool,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Sum of IoU over true positives, accumulated in ascending ground-truth order.
    pub iou_sum: f64,
}

impl CategoryStats {
    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.tp as f64 / denom
        }
    }

    pub fn pq(&self) -> f64 {
        self.sq() * self.rq()
    }
}

/// Macro-averaged PQ, SQ, RQ overall and for things / stuff. A split without any
/// category reports 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct PQReport {
    pub PQ: f64,
    pub SQ: f64,
    pub RQ: f64,
    pub PQ_th: f64,
    pub SQ_th: f64,
    pub RQ_th: f64,
    pub PQ_st: f64,
    pub SQ_st: f64,
    pub RQ_st: f64,
    pub categories: Vec<CategoryStats>,
}

/// Per-category statistics accumulated over any number of map pairs.
#[derive(Clone, Debug, Default)]
pub struct PqAccumulator {
    stats: BTreeMap<usize, CategoryStats>,
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Segment indices of each category in a map.
fn by_category(map: &PanopticMap) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, o) in map.objects.iter().enumerate() {
        out.entry(o.category_id).or_default().push(i);
    }
    out
}

fn check_canvas(pred: &PanopticMap, gt: &PanopticMap) -> Result<()> {
    if pred.size != gt.size {
        return Err(Error::Shape(format!("prediction canvas {} vs ground truth {}", pred.size, gt.size)));
    }
    Ok(())
}

/// Matched (gt index, pred index, IoU) triples of one category, in ascending gt order.
type Matching = Vec<(usize, usize, f64)>;

impl PqAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &PanopticMap, gt: &PanopticMap) -> Result<()> {
        self.add_with(pred, gt, |p, g, pi, gi| Ok(greedy_matching(p, g, pi, gi)))
    }

    fn add_with(
        &mut self,
        pred: &PanopticMap,
        gt: &PanopticMap,
        matcher: impl Fn(&PanopticMap, &PanopticMap, &[usize], &[usize]) -> Result<Matching>,
    ) -> Result<()> {
        check_canvas(pred, gt)?;
        let pc = by_category(pred);
        let gc = by_category(gt);
        let mut cats: Vec<usize> = pc.keys().chain(gc.keys()).copied().collect();
        cats.sort_unstable();
        cats.dedup();
        let none = Vec::new();
        for cat in cats {
            let pi = pc.get(&cat).unwrap_or(&none);
            let gi = gc.get(&cat).unwrap_or(&none);
            let matching = matcher(pred, gt, pi, gi)?;
            let is_thing = gi
                .first()
                .map(|&i| gt.objects[i].is_thing)
                .or_else(|| pi.first().map(|&i| pred.objects[i].is_thing))
                .unwrap_or(false);
            let s = self.stats.entry(cat).or_insert_with(|| CategoryStats {
                category_id: cat,
                is_thing,
                ..Default::default()
            });
            s.tp += matching.len();
            s.fp += pi.len() - matching.len();
            s.fn_ += gi.len() - matching.len();
            for (_, _, v) in &matching {
                s.iou_sum += v;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> PQReport {
        let avg = |filter: &dyn Fn(&CategoryStats) -> bool| {
            let sel: Vec<&CategoryStats> = self.stats.values().filter(|s| filter(s)).collect();
            if sel.is_empty() {
                return (0.0, 0.0, 0.0);
            }
            let n = sel.len() as f64;
            let sum = |f: fn(&CategoryStats) -> f64| sel.iter().map(|s| f(s)).sum::<f64>() / n;
            (sum(CategoryStats::pq), sum(CategoryStats::sq), sum(CategoryStats::rq))
        };
        let (pq, sq, rq) = avg(&|_| true);
        let (pq_th, sq_th, rq_th) = avg(&|s| s.is_thing);
        let (pq_st, sq_st, rq_st) = avg(&|s| !s.is_thing);
        PQReport {
            PQ: pq,
            SQ: sq,
            RQ: rq,
            PQ_th: pq_th,
            SQ_th: sq_th,
            RQ_th: rq_th,
            PQ_st: pq_st,
            SQ_st: sq_st,
            RQ_st: rq_st,
            categories: self.stats.values().cloned().collect(),
        }
    }
}

/// Threshold matching: with disjoint segments in each map at most one partner can
/// exceed IoU 0.5, so every qualifying pair is a match.
fn greedy_matching(pred: &PanopticMap, gt: &PanopticMap, pi: &[usize], gi: &[usize]) -> Matching {
    let mut out = Vec::new();
    let mut used = vec![false; pi.len()];
    for &g in gi {
        let mut hit = None;
        for (k, &p) in pi.iter().enumerate() {
            let v = iou(&pred.objects[p].mask, &gt.objects[g].mask);
            if v > MATCH_IOU {
                assert!(hit.is_none() && !used[k], "IoU > 0.5 admits a single match per segment");
                hit = Some((k, v));
            }
        }
        if let Some((k, v)) = hit {
            used[k] = true;
            out.push((g, pi[k], v));
        }
    }
    out
}

pub fn panoptic_quality(pred: &PanopticMap, gt: &PanopticMap) -> Result<PQReport> {
    let mut acc = PqAccumulator::new();
    acc.add(pred, gt)?;
    Ok(acc.report())
}

/// Exhaustive reference: enumerates every one-to-one assignment between predictions
/// and ground truth of each category and keeps the one with the most qualifying pairs.
pub fn pq_oracle(pred: &PanopticMap, gt: &PanopticMap) -> Result<PQReport> {
    let mut acc = PqAccumulator::new();
    acc.add_with(pred, gt, |p, g, pi, gi| {
        if pi.len() > ORACLE_MAX_SEGMENTS || gi.len() > ORACLE_MAX_SEGMENTS {
            return Err(Error::InvalidArgument(format!(
                "oracle supports at most {ORACLE_MAX_SEGMENTS} segments per category, got {} / {}",
                pi.len(),
                gi.len()
            )));
        }
        let table: Vec<Vec<f64>> = gi
            .iter()
            .map(|&gk| pi.iter().map(|&pk| iou(&p.objects[pk].mask, &g.objects[gk].mask)).collect())
            .collect();
        let mut best: Option<Vec<Option<usize>>> = None;
        let mut current = Vec::with_capacity(gi.len());
        let mut used = vec![false; pi.len()];
        enumerate(&table, 0, &mut used, &mut current, &mut best);
        let best = best.unwrap_or_default();
        Ok(best
            .iter()
            .enumerate()
            .filter_map(|(gk, m)| {
                m.filter(|&pk| table[gk][pk] > MATCH_IOU).map(|pk| (gi[gk], pi[pk], table[gk][pk]))
            })
            .collect())
    })?;
    Ok(acc.report())
}

fn enumerate(
    table: &[Vec<f64>],
    g: usize,
    used: &mut [bool],
    current: &mut Vec<Option<usize>>,
    best: &mut Option<Vec<Option<usize>>>,
) {
    let score = |a: &[Option<usize>]| {
        a.iter().enumerate().filter(|(gk, m)| m.is_some_and(|pk| table[*gk][pk] > MATCH_IOU)).count()
    };
    if g == table.len() {
        if best.as_ref().is_none_or(|b| score(current) > score(b)) {
            *best = Some(current.clone());
        }
        return;
    }
    current.push(None);
    enumerate(table, g + 1, used, current, best);
    current.pop();
    for p in 0..used.len() {
        if !used[p] {
            used[p] = true;
            current.push(Some(p));
            enumerate(table, g + 1, used, current, best);
            current.pop();
            used[p] = false;
        }
    }
}

/// `exp(mean_x KL(p(y|x) || p(y)))` over rows of class probabilities.
pub fn inception_score(probs: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = probs.first() else {
        return Err(Error::InvalidArgument("inception score of no images".into()));
    };
    let k = first.len();
    if probs.iter().any(|p| p.len() != k) {
        return Err(Error::Shape("class probability rows differ in length".into()));
    }
    let n = probs.len() as f64;
    let marginal: Vec<f64> = (0..k).map(|j| probs.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let kl: f64 = probs
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(&pj, _)| pj > 0.0)
                .map(|(&pj, &mj)| pj * (pj.ln() - mj.ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    Ok(kl.exp())
}

/// Small fixed-seed CNN predicting the number of things in a colour-domain image.
#[derive(Clone, Debug)]
pub struct ProxyClassifier {
    store: ParameterStore<f32>,
    convs: Vec<Conv2d>,
    head: Linear,
}

/// Training recipe of the proxy classifier.
pub const PROXY_TRAIN_SAMPLES: usize = 256;
pub const PROXY_TRAIN_STEPS: usize = 400;
pub const PROXY_BATCH: usize = 8;
pub const PROXY_LR: f64 = 2e-3;
const PROXY_DATA_SEED: u64 = 0x5052_4f58;

pub fn thing_count(map: &PanopticMap) -> usize {
    map.objects.iter().filter(|o| o.is_thing).count().min(MAX_THINGS)
}

impl ProxyClassifier {
    pub const CLASSES: usize = MAX_THINGS + 1;

    pub fn untrained(seed: u64) -> Self {
        let mut store = ParameterStore::new();
        let mut rng = Rng::new(seed, stream::PROXY_CLASSIFIER);
        let widths = [3, 8, 16, 32];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(&mut store, &mut rng, &format!("proxy.conv{i}"), w[0], w[1], 3, 2))
            .collect();
        let head = Linear::new(&mut store, &mut rng, "proxy.head", 32, Self::CLASSES);
        Self { store, convs, head }
    }

    /// The shipped recipe: Adam on synthetic colour-domain images labelled with
    /// their thing count, everything seeded.
    pub fn train(cfg: &Config) -> Result<Self> {
        let mut clf = Self::untrained(0);
        let data = generate_dataset(cfg, PROXY_TRAIN_SAMPLES, PROXY_DATA_SEED);
        let mut opt = AdamState::new(&clf.store);
        let mut rng = Rng::new(1, stream::PROXY_CLASSIFIER);
        for _ in 0..PROXY_TRAIN_STEPS {
            let mut grads = clf.store.zeros_like();
            for _ in 0..PROXY_BATCH {
                let s = &data[rng.below(data.len())];
                let g = Graph::new();
                let p = Bound::trainable(&g, &clf.store);
                let logits = clf.logits(&p, g.constant(s.b.to_chw()));
                let nll = logits.log_softmax().index(thing_count(&s.panoptic)).neg();
                let gr = p.grads(&g.backward(nll));
                for (name, t) in grads.iter_mut() {
                    for (a, b) in t.data_mut().iter_mut().zip(gr.get(name).data()) {
                        *a += b / PROXY_BATCH as f32;
                    }
                }
            }
            opt.update(&mut clf.store, &grads, PROXY_LR, 0.9, 0.999);
        }
        Ok(clf)
    }

    fn logits<'g>(&self, p: &Bound<'g, '_, f32>, img: Var<'g, f32>) -> Var<'g, f32> {
        let mut x = img;
        for conv in &self.convs {
            x = lrelu(conv.forward(p, x));
        }
        self.head.forward(p, x.mean_spatial())
    }

    pub fn probabilities(&self, img: &ImageTensor) -> Vec<f64> {
        let g = Graph::new();
        let p = Bound::frozen(&g, &self.store);
        let lp = self.logits(&p, g.constant(img.to_chw())).log_softmax();
        lp.value().to_f64_vec().into_iter().map(f64::exp).collect()
    }

    pub fn accuracy(&self, samples: &[Sample]) -> f64 {
        let hits = samples
            .iter()
            .filter(|s| {
                let p = self.probabilities(&s.b);
                let arg = (0..p.len()).fold(0, |b, j| if p[j] > p[b] { j } else { b });
                arg == thing_count(&s.panoptic)
            })
            .count();
        hits as f64 / samples.len().max(1) as f64
    }
}

pub fn inception_proxy(images: &[ImageTensor], classifier: &ProxyClassifier) -> Result<f64> {
    let probs: Vec<Vec<f64>> = images.iter().map(|i| classifier.probabilities(i)).collect();
    inception_score(&probs)
}

const NORM_EPS: f64 = 1e-10;

/// Channel-normalized squared L2 distance averaged over positions, then over layers.
pub fn feature_distance(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape("feature pyramids differ in depth".into()));
    }
    let mut total = 0.0;
    for (fa, fb) in a.iter().zip(b) {
        if fa.shape() != fb.shape() {
            return Err(Error::Shape(format!("features {:?} vs {:?}", fa.shape(), fb.shape())));
        }
        let c = fa.shape()[0];
        let hw = fa.len() / c;
        let (da, db) = (fa.data(), fb.data());
        let mut layer = 0.0;
        for pos in 0..hw {
            let norm = |d: &[f32]| (0..c).map(|ch| (d[ch * hw + pos] as f64).powi(2)).sum::<f64>().sqrt() + NORM_EPS;
            let (na, nb) = (norm(da), norm(db));
            layer += (0..c)
                .map(|ch| (da[ch * hw + pos] as f64 / na - db[ch * hw + pos] as f64 / nb).powi(2))
                .sum::<f64>();
        }
        total += layer / hw as f64;
    }
    Ok(total / a.len() as f64)
}

/// Mean feature distance over image pairs.
pub fn diversity_score(pairs: &[(ImageTensor, ImageTensor)], phi: &FeaturePyramid<f32>) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("diversity of no pairs".into()));
    }
    let mut sum = 0.0;
    for (x, y) in pairs {
        sum += feature_distance(&phi.image_features(x), &phi.image_features(y))?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Inputs used for the diversity measurement.
pub const DIVERSITY_INPUTS: usize = 32;

/// Two prior-style `t2c` translations for each of the first `n` samples.
pub fn style_pairs(nets: &Networks, state: &TrainState, samples: &[Sample], n: usize) -> Result<Vec<(ImageTensor, ImageTensor)>> {
    let mut rng = Rng::new(state.cfg.seed, stream::EVAL);
    let src = (&nets.gen_t, &state.gen_t);
    let tgt = (&nets.gen_c, &state.gen_c);
    samples
        .iter()
        .take(n)
        .map(|s| {
            let a = translate(src, tgt, &s.a, &s.panoptic, &mut rng)?;
            let b = translate(src, tgt, &s.a, &s.panoptic, &mut rng)?;
            Ok((a, b))
        })
        .collect()
}

/// Report written by `evaluate`. Every score is a desk-scale proxy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// PQ of palette segmentation of `t2c` translations against the ground truth.
    pub pq: PQReport,
    /// Same measurement on the real colour images (the segmenter's ceiling, 1.0).
    pub pq_real: PQReport,
    pub inception_proxy: f64,
    pub diversity_proxy: f64,
    pub n_samples: usize,
    pub config_hash: String,
}

pub fn evaluate(nets: &Networks, state: &TrainState, samples: &[Sample], classifier: &ProxyClassifier) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one sample".into()));
    }
    let cfg = &state.cfg;
    let mut rng = Rng::new(cfg.seed, stream::EVAL);
    let mut acc = PqAccumulator::new();
    let mut acc_real = PqAccumulator::new();
    let mut translated = Vec::with_capacity(samples.len());
    for s in samples {
        let img = translate((&nets.gen_t, &state.gen_t), (&nets.gen_c, &state.gen_c), &s.a, &s.panoptic, &mut rng)?;
        acc.add(&palette_segment(&img, cfg), &s.panoptic)?;
        acc_real.add(&palette_segment(&s.b, cfg), &s.panoptic)?;
        translated.push(img);
    }
    let pairs = style_pairs(nets, state, samples, DIVERSITY_INPUTS)?;
    Ok(EvalReport {
        pq: acc.report(),
        pq_real: acc_real.report(),
        inception_proxy: inception_proxy(&translated, classifier)?,
        diversity_proxy: diversity_score(&pairs, &nets.phi)?,
        n_samples: samples.len(),
        config_hash: cfg.hash(),
    })
}
